"""Central finite-difference verification of analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class ParamCheck:
    name: str
    n_checked: int
    max_rel_err: float
    worst_index: tuple
    analytic_at_worst: float
    numeric_at_worst: float


@dataclass
class FiniteDiffReport:
    h: float
    tolerance: float
    entries: list[ParamCheck] = field(default_factory=list)

    @property
    def max_rel_err(self) -> float:
        return max((e.max_rel_err for e in self.entries), default=0.0)

    @property
    def passed(self) -> bool:
        return all(e.max_rel_err < self.tolerance for e in self.entries)

    def failures(self) -> list[str]:
        return [e.name for e in self.entries if e.max_rel_err >= self.tolerance]

    def __str__(self) -> str:
        lines = [f"finite-difference check (h={self.h:g}, tolerance={self.tolerance:g})"]
        for e in sorted(self.entries, key=lambda e: -e.max_rel_err):
            status = "ok  " if e.max_rel_err < self.tolerance else "FAIL"
            lines.append(
                f"  {status} {e.name:<12} max_rel_err={e.max_rel_err:.3e} at {e.worst_index}"
                f" (analytic={e.analytic_at_worst:.6e}, numeric={e.numeric_at_worst:.6e})"
            )
        lines.append("PASS" if self.passed else f"FAIL: {', '.join(self.failures())}")
        return "\n".join(lines)


def finite_diff_check(loss_fn, params: dict, h: float = 1e-5, tolerance: float = 1e-4,
                      denom_floor: float = 1e-3) -> FiniteDiffReport:
    """Compare analytic gradients from ``loss_fn`` against central differences.

    ``loss_fn(params) -> (loss, grads)`` must be deterministic; ``grads`` is a
    dict matching ``params``. Every coordinate w gets perturbed to w±h and the
    two-sided slope is compared with the analytic value. The relative error is
    |a - n| / max(|a|, |n|, denom_floor); the floor keeps finite-difference
    noise on near-zero coordinates from dominating the report.
    """
    if h <= 0:
        raise ValueError(f"step size must be positive, got {h}")
    loss0, grads = loss_fn(params)
    if not np.isfinite(loss0):
        raise ValueError(f"loss_fn returned non-finite loss {loss0!r}; cannot run finite differences")

    report = FiniteDiffReport(h=h, tolerance=tolerance)
    for name in params:
        p = params[name]
        g = np.asarray(grads[name], dtype=np.float64)
        worst = (0.0, (), 0.0, 0.0)
        n_checked = 0
        it = np.nditer(p, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            orig = p[idx]
            p[idx] = orig + h
            lp, _ = loss_fn(params)
            p[idx] = orig - h
            lm, _ = loss_fn(params)
            p[idx] = orig
            if not (np.isfinite(lp) and np.isfinite(lm)):
                raise ValueError(f"non-finite loss while perturbing {name}{idx}")
            numeric = (lp - lm) / (2.0 * h)
            analytic = float(g[idx])
            rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), denom_floor)
            n_checked += 1
            if rel > worst[0]:
                worst = (rel, idx, analytic, numeric)
        report.entries.append(ParamCheck(
            name=name,
            n_checked=n_checked,
            max_rel_err=worst[0],
            worst_index=worst[1],
            analytic_at_worst=worst[2],
            numeric_at_worst=worst[3],
        ))
    return report
