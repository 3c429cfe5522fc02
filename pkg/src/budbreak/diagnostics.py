"""Self-check utilities: finite-difference verification of every variant.

The toy problem is deliberately small (3 features, widths 4/6/4, GRU 5,
3 cultivars, 10-day seasons) so a full parameter sweep finishes in seconds.
Seeds are pinned per variant and chosen so no ReLU preactivation sits within
the finite-difference step of its kink, where a subgradient and a numeric
estimate legitimately disagree.
"""

from __future__ import annotations

import numpy as np

from budbreak import models
from budbreak.data import build_labels
from budbreak.nn import bce_loss, finite_diff_check
from budbreak.nn.gradcheck import FiniteDiffReport

TOY_DIMS = dict(input_dim=3, fc_dims=(4, 6, 4), gru_hidden=5)
TOY_CULTIVARS = 3
TOY_DAYS = 10
TOY_CONCAT_EMBED = 2


def toy_spec(variant: str, combine: str = "pre_gru") -> models.ModelSpec:
    return models.ModelSpec(
        variant=variant,
        num_cultivars=1 if variant == "single" else TOY_CULTIVARS,
        embed_dim=TOY_CONCAT_EMBED if variant == "embed_concat" else None,
        combine=combine,
        **TOY_DIMS,
    )


def toy_problem(spec: models.ModelSpec, seed_pair):
    """Deterministic (params, x, ids, labels, mask) for one gradcheck run."""
    param_seed, data_seed = seed_pair
    params = models.init_params(spec, seed=param_seed, bias_jitter=0.2)
    rng = np.random.default_rng(data_seed)
    B = TOY_CULTIVARS
    x = rng.normal(size=(B, TOY_DAYS, spec.input_dim))
    ids = np.arange(B) % spec.num_cultivars
    doys = rng.integers(2, TOY_DAYS, size=B)
    labels = np.stack([build_labels(int(d), TOY_DAYS)[0] for d in doys])
    mask = np.ones((B, TOY_DAYS))
    return params, x, ids, labels, mask


def gradcheck_variant(variant: str, combine: str = "pre_gru", h: float = 1e-5,
                      tolerance: float = 1e-4) -> FiniteDiffReport:
    """Finite-difference check of one variant's full backward pass."""
    spec = toy_spec(variant, combine)
    i = models.VARIANTS.index(variant)
    base = 20 if combine == "pre_gru" else 22
    params, x, ids, labels, mask = toy_problem(spec, ([base, i], [base + 1, i]))

    def loss_fn(p):
        probs, cache = models.forward_group(spec, p, x, ids)
        loss, d_probs = bce_loss(probs, labels, mask)
        return loss, models.backward_group(spec, p, cache, d_probs)

    return finite_diff_check(loss_fn, params, h=h, tolerance=tolerance)


def gradcheck_all(variants=models.VARIANTS, combine: str = "pre_gru", h: float = 1e-5,
                  tolerance: float = 1e-4) -> dict[str, FiniteDiffReport]:
    return {v: gradcheck_variant(v, combine, h, tolerance) for v in variants}
