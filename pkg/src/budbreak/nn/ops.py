"""Layer primitives with hand-derived backward passes.

Everything runs in float64 on plain numpy arrays. The GRU cell follows the
convention where the reset gate multiplies the hidden-side pre-activation of
the candidate state:

    z = sigmoid(Wz x + Uz h + bz)
    r = sigmoid(Wr x + Ur h + br)
    n = tanh(Wn x + b_in + r * (Un h + b_hn))
    h_next = (1 - z) * n + z * h

These vector-level functions are the reference semantics; the sequence
kernels in :mod:`budbreak.kernels` implement the same math batched over
seasons and are cross-checked against these in the tests.
"""

from __future__ import annotations

import numpy as np

from budbreak.errors import ShapeError

# Probabilities are clamped to this range before any log; keeps BCE finite
# without measurable bias.
PROB_EPS = 1e-7


def _as_f64(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def sigmoid(x: np.ndarray) -> np.ndarray:
    """Numerically safe logistic function."""
    x = _as_f64(x)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def affine_forward(W: np.ndarray, b: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Return W @ x + b for a single input vector."""
    W = _as_f64(W)
    b = _as_f64(b)
    x = _as_f64(x)
    if W.ndim != 2:
        raise ShapeError(f"weight must be 2-d, got shape {W.shape}")
    if W.shape[1] != x.shape[0]:
        raise ShapeError(f"weight shape {W.shape} incompatible with input shape {x.shape}")
    if b.shape[0] != W.shape[0]:
        raise ShapeError(f"bias shape {b.shape} incompatible with weight shape {W.shape}")
    return W @ x + b


def affine_backward(W: np.ndarray, x: np.ndarray, grad_out: np.ndarray):
    """Gradients of ``affine_forward`` w.r.t. (W, b, x) given upstream grad."""
    W = _as_f64(W)
    x = _as_f64(x)
    grad_out = _as_f64(grad_out)
    if grad_out.shape[0] != W.shape[0]:
        raise ShapeError(f"upstream grad shape {grad_out.shape} incompatible with weight shape {W.shape}")
    grad_W = np.outer(grad_out, x)
    grad_b = grad_out.copy()
    grad_x = W.T @ grad_out
    return grad_W, grad_b, grad_x


_ACTIVATIONS = ("relu", "sigmoid", "tanh")


def activation_forward(kind: str, x: np.ndarray) -> np.ndarray:
    """Element-wise relu / sigmoid / tanh."""
    x = _as_f64(x)
    if kind == "relu":
        return np.maximum(x, 0.0)
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "tanh":
        return np.tanh(x)
    raise ValueError(f"unknown activation {kind!r}; expected one of {_ACTIVATIONS}")


def activation_backward(kind: str, out: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    """Backward pass expressed through the forward *output* (cheaper caches)."""
    out = _as_f64(out)
    grad_out = _as_f64(grad_out)
    if kind == "relu":
        return grad_out * (out > 0.0)
    if kind == "sigmoid":
        return grad_out * out * (1.0 - out)
    if kind == "tanh":
        return grad_out * (1.0 - out * out)
    raise ValueError(f"unknown activation {kind!r}; expected one of {_ACTIVATIONS}")


_GRU_WEIGHT_KEYS = ("wz", "wr", "wn", "uz", "ur", "un", "bz", "br", "bin", "bhn")


def _check_gru_shapes(params: dict, x: np.ndarray, h: np.ndarray) -> tuple[int, int]:
    missing = [k for k in _GRU_WEIGHT_KEYS if k not in params]
    if missing:
        raise ShapeError(f"gru params missing keys {missing}")
    hidden = params["uz"].shape[0]
    in_dim = params["wz"].shape[1]
    if x.shape != (in_dim,):
        raise ShapeError(f"gru input shape {x.shape} incompatible with weight shape {params['wz'].shape}")
    if h.shape != (hidden,):
        raise ShapeError(f"gru state shape {h.shape} incompatible with hidden size {hidden}")
    for k in ("wz", "wr", "wn"):
        if params[k].shape != (hidden, in_dim):
            raise ShapeError(f"gru weight {k} has shape {params[k].shape}, expected {(hidden, in_dim)}")
    for k in ("uz", "ur", "un"):
        if params[k].shape != (hidden, hidden):
            raise ShapeError(f"gru weight {k} has shape {params[k].shape}, expected {(hidden, hidden)}")
    for k in ("bz", "br", "bin", "bhn"):
        if params[k].shape != (hidden,):
            raise ShapeError(f"gru bias {k} has shape {params[k].shape}, expected {(hidden,)}")
    return hidden, in_dim


def gru_cell_forward(params: dict, x: np.ndarray, h: np.ndarray):
    """One GRU step. Returns (h_next, cache) with cache holding backward intermediates."""
    x = _as_f64(x)
    h = _as_f64(h)
    _check_gru_shapes(params, x, h)
    z = sigmoid(params["wz"] @ x + params["uz"] @ h + params["bz"])
    r = sigmoid(params["wr"] @ x + params["ur"] @ h + params["br"])
    m = params["un"] @ h + params["bhn"]
    n = np.tanh(params["wn"] @ x + params["bin"] + r * m)
    h_next = (1.0 - z) * n + z * h
    cache = {"params": params, "x": x, "h": h, "z": z, "r": r, "m": m, "n": n}
    return h_next, cache


def gru_cell_backward(cache: dict, grad_h_next: np.ndarray):
    """Exact gradients of one GRU step.

    Returns (grad_params, grad_x, grad_h). Callers accumulate grad_params
    across timesteps to run backpropagation through time.
    """
    grad_h_next = _as_f64(grad_h_next)
    params, x, h = cache["params"], cache["x"], cache["h"]
    z, r, m, n = cache["z"], cache["r"], cache["m"], cache["n"]
    if grad_h_next.shape != h.shape:
        raise ShapeError(f"upstream grad shape {grad_h_next.shape} incompatible with state shape {h.shape}")

    dn = grad_h_next * (1.0 - z)
    dz = grad_h_next * (h - n)
    grad_h = grad_h_next * z

    dan = dn * (1.0 - n * n)          # through tanh
    dr = dan * m
    dm = dan * r
    daz = dz * z * (1.0 - z)          # through sigmoid
    dar = dr * r * (1.0 - r)

    grad_params = {
        "wz": np.outer(daz, x),
        "wr": np.outer(dar, x),
        "wn": np.outer(dan, x),
        "uz": np.outer(daz, h),
        "ur": np.outer(dar, h),
        "un": np.outer(dm, h),
        "bz": daz,
        "br": dar,
        "bin": dan,
        "bhn": dm,
    }
    grad_x = params["wz"].T @ daz + params["wr"].T @ dar + params["wn"].T @ dan
    grad_h = grad_h + params["uz"].T @ daz + params["ur"].T @ dar + params["un"].T @ dm
    return grad_params, grad_x, grad_h


def bce_loss(p: np.ndarray, y: np.ndarray, mask: np.ndarray):
    """Masked mean binary cross entropy and its gradient w.r.t. p.

    p is clamped to [PROB_EPS, 1 - PROB_EPS] before the logs; the gradient is
    taken at the clamped value, so it stays finite for saturated inputs.
    Raises if the mask selects no steps.
    """
    p = _as_f64(p)
    y = _as_f64(y)
    mask = _as_f64(mask)
    if not (p.shape == y.shape == mask.shape):
        raise ShapeError(f"bce shapes differ: p {p.shape}, y {y.shape}, mask {mask.shape}")
    total = mask.sum()
    if total == 0:
        raise ValueError("no labeled steps: mask selects nothing")
    pc = np.clip(p, PROB_EPS, 1.0 - PROB_EPS)
    loss = float(-(mask * (y * np.log(pc) + (1.0 - y) * np.log(1.0 - pc))).sum() / total)
    grad_p = mask * (-y / pc + (1.0 - y) / (1.0 - pc)) / total
    return loss, grad_p
