"""Recurrent budbreak models: spec, init, forward/backward, checkpoints.

One architecture family, five variants:

* ``single``       : one cultivar, one head, no embedding.
* ``multi_head``   : shared backbone, one output head per cultivar.
* ``embed_add``    : learned cultivar vector added to the backbone activations.
* ``embed_concat`` : cultivar vector concatenated onto the activations.
* ``embed_mult``   : cultivar vector multiplied into the activations.

Backbone is FC -> FC -> GRU -> FC with ReLU after each FC, then a per-sample
linear head squashed by a sigmoid to a daily budbreak probability. The
embedding joins either after the second FC (``combine="pre_gru"``, default) or
directly on the input features (``combine="input"``).
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass

import numpy as np

from budbreak import kernels
from budbreak.errors import CheckpointError, ConfigError, ShapeError
from budbreak.nn.ops import activation_backward, activation_forward, sigmoid

VARIANTS = ("single", "multi_head", "embed_add", "embed_concat", "embed_mult")
EMBED_VARIANTS = ("embed_add", "embed_concat", "embed_mult")
COMBINE_POINTS = ("pre_gru", "input")

CHECKPOINT_MAGIC = b"BBCHKPT1"
CHECKPOINT_VERSION = 1
DEFAULT_CONCAT_EMBED_DIM = 64


@dataclass(frozen=True)
class ModelSpec:
    """Immutable architecture description; fully determines parameter shapes."""

    variant: str
    input_dim: int
    fc_dims: tuple[int, int, int]
    gru_hidden: int
    num_cultivars: int = 1
    embed_dim: int | None = None
    combine: str = "pre_gru"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.combine not in COMBINE_POINTS:
            raise ConfigError(f"unknown combine point {self.combine!r}; expected one of {COMBINE_POINTS}")
        object.__setattr__(self, "fc_dims", tuple(int(d) for d in self.fc_dims))
        if len(self.fc_dims) != 3:
            raise ConfigError(f"fc_dims must have 3 entries, got {self.fc_dims}")
        dims = {"input_dim": self.input_dim, "gru_hidden": self.gru_hidden,
                "num_cultivars": self.num_cultivars, "fc_dims": min(self.fc_dims)}
        for label, dim in dims.items():
            if int(dim) < 1:
                raise ConfigError(f"{label} must be >= 1, got {dim}")
        if self.variant == "single" and self.num_cultivars != 1:
            raise ConfigError("variant 'single' models exactly one cultivar; set num_cultivars=1")
        if self.variant == "embed_concat":
            if self.embed_dim is None:
                object.__setattr__(self, "embed_dim", DEFAULT_CONCAT_EMBED_DIM)
            elif self.embed_dim < 1:
                raise ConfigError(f"embed_dim must be >= 1, got {self.embed_dim}")
        elif self.variant in EMBED_VARIANTS:
            # add/mult embeddings must match the width they combine with.
            derived = self.input_dim if self.combine == "input" else self.fc_dims[1]
            if self.embed_dim is None:
                object.__setattr__(self, "embed_dim", derived)
            elif self.embed_dim != derived:
                raise ConfigError(
                    f"variant {self.variant!r} with combine {self.combine!r} requires"
                    f" embed_dim {derived}, got {self.embed_dim}"
                )
        elif self.embed_dim is not None:
            raise ConfigError(f"variant {self.variant!r} takes no embedding; leave embed_dim unset")

    @property
    def uses_embedding(self) -> bool:
        return self.variant in EMBED_VARIANTS

    @property
    def num_heads(self) -> int:
        return self.num_cultivars if self.variant == "multi_head" else 1

    @property
    def fc1_input_dim(self) -> int:
        if self.variant == "embed_concat" and self.combine == "input":
            return self.input_dim + self.embed_dim
        return self.input_dim

    @property
    def gru_input_dim(self) -> int:
        if self.variant == "embed_concat" and self.combine == "pre_gru":
            return self.fc_dims[1] + self.embed_dim
        return self.fc_dims[1]


def param_shapes(spec: ModelSpec) -> dict[str, tuple[int, ...]]:
    """Parameter name -> shape map implied by a ModelSpec."""
    d1, d2, d3 = spec.fc_dims
    h = spec.gru_hidden
    shapes = {
        "fc1_w": (d1, spec.fc1_input_dim),
        "fc1_b": (d1,),
        "fc2_w": (d2, d1),
        "fc2_b": (d2,),
        "gru_w": (3 * h, spec.gru_input_dim),
        "gru_u": (3 * h, h),
        "gru_bx": (3 * h,),
        "gru_bh": (h,),
        "fc3_w": (d3, h),
        "fc3_b": (d3,),
        "head_w": (spec.num_heads, d3),
        "head_b": (spec.num_heads,),
    }
    if spec.uses_embedding:
        shapes["embed"] = (spec.num_cultivars, spec.embed_dim)
    return shapes


def _glorot(rng: np.random.Generator, shape: tuple[int, int], fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def init_params(spec: ModelSpec, seed, bias_jitter: float = 0.0) -> dict[str, np.ndarray]:
    """Seeded Glorot-uniform weights, zero biases.

    Embedding rows start near the combine identity: U(0.9, 1.1) for
    multiplicative, U(-0.1, 0.1) otherwise. Draw order is fixed, so the same
    (spec, seed) always yields bitwise-identical parameters.

    bias_jitter > 0 draws the FC biases from U(-jitter, jitter) instead of
    zero. Gradient checking needs this: with zero biases a ReLU preactivation
    can sit exactly on the kink, where the subgradient and a finite-difference
    estimate legitimately disagree.
    """
    rng = np.random.default_rng(seed)
    d1, d2, d3 = spec.fc_dims
    h = spec.gru_hidden
    params = {
        "fc1_w": _glorot(rng, (d1, spec.fc1_input_dim), spec.fc1_input_dim, d1),
        "fc2_w": _glorot(rng, (d2, d1), d1, d2),
        "gru_w": _glorot(rng, (3 * h, spec.gru_input_dim), spec.gru_input_dim, h),
        "gru_u": _glorot(rng, (3 * h, h), h, h),
        "fc3_w": _glorot(rng, (d3, h), h, d3),
        "head_w": _glorot(rng, (spec.num_heads, d3), d3, 1),
        "fc1_b": np.zeros(d1),
        "fc2_b": np.zeros(d2),
        "gru_bx": np.zeros(3 * h),
        "gru_bh": np.zeros(h),
        "fc3_b": np.zeros(d3),
        "head_b": np.zeros(spec.num_heads),
    }
    if spec.uses_embedding:
        lo, hi = (0.9, 1.1) if spec.variant == "embed_mult" else (-0.1, 0.1)
        params["embed"] = rng.uniform(lo, hi, size=(spec.num_cultivars, spec.embed_dim))
    if bias_jitter > 0.0:
        for name in ("fc1_b", "fc2_b", "fc3_b"):
            params[name] = rng.uniform(-bias_jitter, bias_jitter, size=params[name].shape)
    return {name: params[name] for name in param_shapes(spec)}


def validate_params(spec: ModelSpec, params: dict[str, np.ndarray]) -> None:
    expected = param_shapes(spec)
    missing = sorted(set(expected) - set(params))
    extra = sorted(set(params) - set(expected))
    if missing or extra:
        raise ShapeError(f"parameter set does not match spec (missing {missing}, unexpected {extra})")
    for name, shape in expected.items():
        if tuple(params[name].shape) != shape:
            raise ShapeError(f"parameter {name!r} has shape {params[name].shape}, spec requires {shape}")


def _seq_affine(w: np.ndarray, b: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Affine over a (B, H, in) tensor as one flat matmul."""
    B, H, _ = x.shape
    return (x.reshape(B * H, -1) @ w.T + b).reshape(B, H, -1)


def _combine_forward(variant: str, a: np.ndarray, e: np.ndarray) -> np.ndarray:
    """Merge per-sample embedding e (B, E) into activations a (B, H, D)."""
    eb = e[:, None, :]
    if variant == "embed_add":
        return a + eb
    if variant == "embed_mult":
        return a * eb
    B, H, _ = a.shape
    return np.concatenate([a, np.broadcast_to(eb, (B, H, e.shape[1]))], axis=2)


def _combine_backward(variant: str, a: np.ndarray, e: np.ndarray, d_out: np.ndarray):
    """Returns (d_a, d_e) for the combine op."""
    if variant == "embed_add":
        return d_out, d_out.sum(axis=1)
    if variant == "embed_mult":
        return d_out * e[:, None, :], (d_out * a).sum(axis=1)
    D = a.shape[2]
    return d_out[:, :, :D], d_out[:, :, D:].sum(axis=1)


def forward_group(spec: ModelSpec, params: dict, x: np.ndarray, cultivar_ids: np.ndarray):
    """Run a same-length batch through the network.

    x: (B, H, F) normalized features; cultivar_ids: (B,) ints in
    [0, num_cultivars). Returns (probs, cache) with probs (B, H); cache feeds
    backward_group.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3 or x.shape[2] != spec.input_dim:
        raise ShapeError(f"expected features (B, H, {spec.input_dim}), got {x.shape}")
    ids = np.asarray(cultivar_ids, dtype=np.intp)
    if ids.shape != (x.shape[0],):
        raise ShapeError(f"expected cultivar_ids ({x.shape[0]},), got {ids.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= spec.num_cultivars):
        raise ShapeError(f"cultivar id outside 0..{spec.num_cultivars - 1}")
    B, H, _ = x.shape

    e = params["embed"][ids] if spec.uses_embedding else None
    xin = x
    if spec.uses_embedding and spec.combine == "input":
        xin = _combine_forward(spec.variant, x, e)

    a1 = activation_forward("relu", _seq_affine(params["fc1_w"], params["fc1_b"], xin))
    a2 = activation_forward("relu", _seq_affine(params["fc2_w"], params["fc2_b"], a1))

    g = a2
    if spec.uses_embedding and spec.combine == "pre_gru":
        g = _combine_forward(spec.variant, a2, e)

    xg = _seq_affine(params["gru_w"], params["gru_bx"], g)
    h0 = np.zeros((B, spec.gru_hidden))
    hs, zs, rs, ms, ns = kernels.gru_sequence_forward(xg, params["gru_u"], params["gru_bh"], h0)

    a3 = activation_forward("relu", _seq_affine(params["fc3_w"], params["fc3_b"], hs))
    head_idx = ids if spec.variant == "multi_head" else np.zeros(B, dtype=np.intp)
    hw = params["head_w"][head_idx]
    logits = np.einsum("bhd,bd->bh", a3, hw) + params["head_b"][head_idx][:, None]
    probs = sigmoid(logits)

    cache = {
        "x": x, "ids": ids, "head_idx": head_idx, "e": e, "xin": xin,
        "a1": a1, "a2": a2, "g": g, "h0": h0,
        "hs": hs, "zs": zs, "rs": rs, "ms": ms, "ns": ns,
        "a3": a3, "probs": probs,
    }
    return probs, cache


def backward_group(spec: ModelSpec, params: dict, cache: dict, d_probs: np.ndarray) -> dict:
    """Gradients of a scalar loss wrt every parameter given d loss / d probs.

    Embedding and head gradients are routed: rows for cultivars absent from
    the batch come back exactly zero.
    """
    probs = cache["probs"]
    if d_probs.shape != probs.shape:
        raise ShapeError(f"expected upstream gradient {probs.shape}, got {d_probs.shape}")
    hs, a3 = cache["hs"], cache["a3"]
    head_idx = cache["head_idx"]
    B, H = probs.shape
    grads = {name: np.zeros(shape) for name, shape in param_shapes(spec).items()}

    d_logits = d_probs * probs * (1.0 - probs)
    hw = params["head_w"][head_idx]
    np.add.at(grads["head_w"], head_idx, np.einsum("bh,bhd->bd", d_logits, a3))
    np.add.at(grads["head_b"], head_idx, d_logits.sum(axis=1))
    d_a3 = d_logits[:, :, None] * hw[:, None, :]

    d_z3 = activation_backward("relu", a3, d_a3)
    flat = d_z3.reshape(B * H, -1)
    grads["fc3_w"] += flat.T @ hs.reshape(B * H, -1)
    grads["fc3_b"] += flat.sum(axis=0)
    d_hs = (flat @ params["fc3_w"]).reshape(B, H, -1)

    d_xg, d_u, d_bh, _ = kernels.gru_sequence_backward(
        params["gru_u"], params["gru_bh"], cache["h0"],
        hs, cache["zs"], cache["rs"], cache["ms"], cache["ns"], d_hs,
    )
    grads["gru_u"] += d_u
    grads["gru_bh"] += d_bh
    flat = d_xg.reshape(B * H, -1)
    grads["gru_w"] += flat.T @ cache["g"].reshape(B * H, -1)
    grads["gru_bx"] += flat.sum(axis=0)
    d_g = (flat @ params["gru_w"]).reshape(B, H, -1)

    d_e = None
    d_a2 = d_g
    if spec.uses_embedding and spec.combine == "pre_gru":
        d_a2, d_e = _combine_backward(spec.variant, cache["a2"], cache["e"], d_g)

    d_z2 = activation_backward("relu", cache["a2"], d_a2)
    flat = d_z2.reshape(B * H, -1)
    grads["fc2_w"] += flat.T @ cache["a1"].reshape(B * H, -1)
    grads["fc2_b"] += flat.sum(axis=0)
    d_a1 = (flat @ params["fc2_w"]).reshape(B, H, -1)

    d_z1 = activation_backward("relu", cache["a1"], d_a1)
    flat = d_z1.reshape(B * H, -1)
    grads["fc1_w"] += flat.T @ cache["xin"].reshape(B * H, -1)
    grads["fc1_b"] += flat.sum(axis=0)

    if spec.uses_embedding and spec.combine == "input":
        d_xin = (flat @ params["fc1_w"]).reshape(B, H, -1)
        _, d_e = _combine_backward(spec.variant, cache["x"], cache["e"], d_xin)
    if d_e is not None:
        np.add.at(grads["embed"], cache["ids"], d_e)
    return grads


def predict_season_probs(spec: ModelSpec, params: dict, features: np.ndarray,
                         cultivar_id: int = 0) -> np.ndarray:
    """Daily probabilities for one season: (H, F) -> (H,)."""
    probs, _ = forward_group(spec, params, features[None], np.array([cultivar_id]))
    return probs[0]


# ---------------------------------------------------------------------------
# Checkpoint container: magic, version, JSON manifest, raw arrays, SHA-256.
# ---------------------------------------------------------------------------

def save_checkpoint(path, spec: ModelSpec, params: dict, norm=None, meta: dict | None = None) -> None:
    """Write a self-verifying binary checkpoint.

    Layout: 8-byte magic, uint32 LE version, uint64 LE manifest length,
    canonical JSON manifest, concatenated float64 LE arrays in manifest
    order, SHA-256 of all preceding bytes. ``norm`` is an optional
    data.NormStats stored alongside the parameters; ``meta`` must be
    JSON-serializable.
    """
    validate_params(spec, params)
    arrays = {name: np.ascontiguousarray(params[name], dtype=np.float64) for name in sorted(params)}
    norm_entry = None
    if norm is not None:
        arrays["norm/mean"] = np.ascontiguousarray(norm.mean, dtype=np.float64)
        arrays["norm/std"] = np.ascontiguousarray(norm.std, dtype=np.float64)
        norm_entry = {"feature_names": list(norm.feature_names)}
    manifest_arrays = []
    offset = 0
    for name in sorted(arrays):
        arr = arrays[name]
        manifest_arrays.append({
            "name": name, "shape": list(arr.shape), "dtype": "<f8",
            "offset": offset, "nbytes": arr.nbytes,
        })
        offset += arr.nbytes
    manifest = {
        "arrays": manifest_arrays,
        "meta": meta or {},
        "norm": norm_entry,
        "params": sorted(params),
        "spec": asdict(spec),
    }
    blob = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    digest = hashlib.sha256()
    with open(path, "wb") as fh:
        for chunk in (
            CHECKPOINT_MAGIC,
            CHECKPOINT_VERSION.to_bytes(4, "little"),
            len(blob).to_bytes(8, "little"),
            blob,
        ):
            digest.update(chunk)
            fh.write(chunk)
        for entry in manifest_arrays:
            raw = arrays[entry["name"]].astype("<f8", copy=False).tobytes()
            digest.update(raw)
            fh.write(raw)
        fh.write(digest.digest())


def load_checkpoint(path):
    """Read a checkpoint; returns (spec, params, norm, meta).

    norm comes back as data.NormStats or None. Raises CheckpointError on bad
    magic, unsupported version, truncation, checksum mismatch, or arrays that
    do not match the embedded spec.
    """
    from budbreak.data import NormStats

    with open(path, "rb") as fh:
        raw = fh.read()
    head = len(CHECKPOINT_MAGIC) + 4 + 8
    if len(raw) < head + 32:
        raise CheckpointError(f"{path}: truncated checkpoint ({len(raw)} bytes)")
    if raw[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:8]!r}; not a checkpoint file")
    version = int.from_bytes(raw[8:12], "little")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    manifest_len = int.from_bytes(raw[12:20], "little")
    body_start = head + manifest_len
    if len(raw) < body_start + 32:
        raise CheckpointError(f"{path}: truncated checkpoint ({len(raw)} bytes)")
    if hashlib.sha256(raw[:-32]).digest() != raw[-32:]:
        raise CheckpointError(f"{path}: checksum mismatch; file is corrupt")
    try:
        manifest = json.loads(raw[head:body_start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable manifest: {exc}") from None
    payload = raw[body_start:-32]
    arrays = {}
    for entry in manifest["arrays"]:
        if entry["dtype"] != "<f8":
            raise CheckpointError(f"{path}: array {entry['name']!r} has unsupported dtype {entry['dtype']}")
        stop = entry["offset"] + entry["nbytes"]
        if stop > len(payload):
            raise CheckpointError(f"{path}: truncated checkpoint (array {entry['name']!r} out of bounds)")
        arr = np.frombuffer(payload[entry["offset"]:stop], dtype="<f8").reshape(entry["shape"])
        arrays[entry["name"]] = arr.copy()
    spec_fields = dict(manifest["spec"])
    spec_fields["fc_dims"] = tuple(spec_fields["fc_dims"])
    try:
        spec = ModelSpec(**spec_fields)
    except (ConfigError, TypeError) as exc:
        raise CheckpointError(f"{path}: invalid embedded spec: {exc}") from None
    try:
        params = {name: arrays[name] for name in manifest["params"]}
    except KeyError as exc:
        raise CheckpointError(f"{path}: manifest lists parameter {exc} with no stored array") from None
    try:
        validate_params(spec, params)
    except ShapeError as exc:
        raise CheckpointError(f"{path}: stored arrays do not match spec: {exc}") from None
    norm = None
    if manifest.get("norm") is not None:
        norm = NormStats(
            mean=arrays["norm/mean"],
            std=arrays["norm/std"],
            feature_names=tuple(manifest["norm"]["feature_names"]),
        )
    return spec, params, norm, manifest.get("meta", {})
