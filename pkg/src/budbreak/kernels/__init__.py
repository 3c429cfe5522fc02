"""Recurrence kernels with a compiled core and a pure-NumPy fallback.

The compiled extension is preferred when importable; set the environment
variable ``BUDBREAK_BACKEND`` to ``numpy`` or ``cython`` to force a choice
before import, or call :func:`set_backend` at runtime (used by the tests and
the benchmark to compare both).
"""

from __future__ import annotations

import os

from budbreak.kernels import reference as _reference

_modules = {"numpy": _reference}
try:
    from budbreak.kernels import _recurrent as _compiled

    _modules["cython"] = _compiled
except ImportError:
    _compiled = None

_requested = os.environ.get("BUDBREAK_BACKEND", "auto")
if _requested == "auto":
    _active_name = "cython" if _compiled is not None else "numpy"
elif _requested in _modules:
    _active_name = _requested
else:
    raise ImportError(
        f"BUDBREAK_BACKEND={_requested!r} not available; choices: {sorted(_modules)} or 'auto'"
    )


def available_backends() -> list[str]:
    return sorted(_modules)


def active_backend() -> str:
    return _active_name


def set_backend(name: str) -> None:
    global _active_name
    if name not in _modules:
        raise ValueError(f"backend {name!r} not available; choices: {sorted(_modules)}")
    _active_name = name


def gru_sequence_forward(xg, u, b_hn, h0):
    return _modules[_active_name].gru_sequence_forward(xg, u, b_hn, h0)


def gru_sequence_backward(u, b_hn, h0, hs, zs, rs, ms, ns, d_hs):
    return _modules[_active_name].gru_sequence_backward(u, b_hn, h0, hs, zs, rs, ms, ns, d_hs)
