"""Training loop and the multi-trial, multi-variant experiment driver.

One trained model = (variant, trial, cultivar-or-pooled). The experiment
driver holds out seeded test years per cultivar and trial, fits
normalization on the training seasons only, trains every requested variant,
and writes one checkpoint plus one JSON-lines loss log per model, all tied
together by an experiment manifest. Every random draw derives from the
master seed, so reruns reproduce checkpoints bit for bit.
"""

from __future__ import annotations

import json
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from budbreak import models
from budbreak.data import (
    CultivarDataset,
    SeasonSeries,
    apply_normalization,
    fit_normalization,
    make_batches,
    make_trial_plan,
)
from budbreak.errors import ConfigError, DataError, TrainingDiverged
from budbreak.models import ModelSpec, init_params
from budbreak.nn import AdamState, adam_step, bce_loss

MANIFEST_FILE = "experiment.json"


@dataclass(frozen=True)
class TrainConfig:
    """Optimization recipe for a single model."""

    learning_rate: float = 1e-3
    batch_size: int = 12
    epochs: int = 400
    seed: int = 0
    balanced_batches: bool = False
    divergence_threshold: float = 1e3

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")


@dataclass(frozen=True)
class ExperimentConfig:
    """Full benchmark recipe: which variants, how many trials, model size."""

    variants: tuple[str, ...] = models.VARIANTS
    trials: int = 3
    test_per_trial: int = 2
    fc_dims: tuple[int, int, int] = (64, 128, 64)
    gru_hidden: int = 128
    embed_dim: int | None = None
    combine: str = "pre_gru"
    learning_rate: float = 1e-3
    batch_size: int = 12
    epochs: int = 400
    seed: int = 0
    balanced_batches: bool = False

    def __post_init__(self):
        object.__setattr__(self, "variants", tuple(self.variants))
        object.__setattr__(self, "fc_dims", tuple(self.fc_dims))
        unknown = [v for v in self.variants if v not in models.VARIANTS]
        if unknown:
            raise ConfigError(f"unknown variants {unknown}; expected a subset of {models.VARIANTS}")
        if not self.variants:
            raise ConfigError("need at least one variant")
        if self.trials < 1:
            raise ConfigError(f"trials must be >= 1, got {self.trials}")

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            learning_rate=self.learning_rate,
            batch_size=self.batch_size,
            epochs=self.epochs,
            seed=self.seed,
            balanced_batches=self.balanced_batches,
        )

    def model_spec(self, variant: str, input_dim: int, num_cultivars: int) -> ModelSpec:
        return ModelSpec(
            variant=variant,
            input_dim=input_dim,
            fc_dims=self.fc_dims,
            gru_hidden=self.gru_hidden,
            num_cultivars=1 if variant == "single" else num_cultivars,
            embed_dim=self.embed_dim if variant == "embed_concat" else None,
            combine=self.combine,
        )


def _stack_group(group: list[SeasonSeries]):
    x = np.stack([s.features for s in group])
    y = np.stack([s.labels for s in group])
    mask = np.stack([s.label_mask for s in group])
    ids = np.array([s.cultivar_id for s in group], dtype=np.intp)
    return x, y, mask, ids


def batch_loss_and_grads(spec: ModelSpec, params: dict, batch: list[SeasonSeries]):
    """Mean per-season masked BCE over the batch, with matching gradients.

    Seasons of different lengths are forwarded in same-length groups; every
    season still contributes its own masked-mean loss with equal weight.
    """
    n = len(batch)
    groups: dict[int, list[SeasonSeries]] = {}
    for s in batch:
        groups.setdefault(s.H, []).append(s)
    total = 0.0
    grads = {name: np.zeros(shape) for name, shape in models.param_shapes(spec).items()}
    for group in groups.values():
        x, y, mask, ids = _stack_group(group)
        probs, cache = models.forward_group(spec, params, x, ids)
        d_probs = np.zeros_like(probs)
        for i in range(len(group)):
            loss_i, grad_i = bce_loss(probs[i], y[i], mask[i])
            total += loss_i / n
            d_probs[i] = grad_i / n
        g = models.backward_group(spec, params, cache, d_probs)
        for name in grads:
            grads[name] += g[name]
    return total, grads


def train_model(spec: ModelSpec, config: TrainConfig, seasons: list[SeasonSeries],
                seed_tuple: tuple[int, ...] = (), log_fn=None):
    """Adam-train one model; returns (params, per-epoch loss history).

    seed_tuple namespaces the run (e.g. (master, trial, slot)) so that every
    model in an experiment draws independent, reproducible randomness.
    """
    seasons = [s for s in seasons if s.label_mask.any()]
    if not seasons:
        raise DataError("no labeled training seasons")
    base = [*seed_tuple, config.seed]
    params = init_params(spec, seed=[*base, 0])
    adam = AdamState.for_params(params, lr=config.learning_rate)
    history = []
    for epoch in range(config.epochs):
        batches = make_batches(seasons, config.batch_size, epoch_seed=[*base, 1, epoch],
                               balanced=config.balanced_batches)
        epoch_sum = 0.0
        for batch in batches:
            loss, grads = batch_loss_and_grads(spec, params, batch)
            if not np.isfinite(loss) or loss > config.divergence_threshold:
                raise TrainingDiverged(f"epoch {epoch}: batch loss {loss}")
            adam_step(adam, params, grads)
            epoch_sum += loss * len(batch)
        n_pool = sum(len(b) for b in batches)
        history.append(epoch_sum / n_pool)
        if log_fn is not None:
            log_fn(epoch, history[-1])
    return params, history


def split_trial(datasets: list[CultivarDataset], plan, trial: int):
    """(train, test) labeled seasons per cultivar id for one trial."""
    train: dict[int, list[SeasonSeries]] = {}
    test: dict[int, list[SeasonSeries]] = {}
    for ds in datasets:
        held = set(plan.test_years(trial, ds.cultivar_id))
        train[ds.cultivar_id] = [s for s in ds.seasons if s.labeled and s.year not in held]
        test[ds.cultivar_id] = [s for s in ds.seasons if s.labeled and s.year in held]
    return train, test


def _train_job(payload: dict) -> dict:
    """Worker: train one model, write its checkpoint and loss log."""
    spec = ModelSpec(**payload["spec"])
    config = TrainConfig(**payload["config"])
    started = time.perf_counter()
    params, history = train_model(spec, config, payload["seasons"],
                                  seed_tuple=tuple(payload["seed_tuple"]))
    seconds = time.perf_counter() - started
    # wall time stays out of the checkpoint so reruns are bitwise identical
    meta = dict(payload["meta"], final_loss=history[-1])
    models.save_checkpoint(payload["ckpt_path"], spec, params,
                           norm=payload["norm"], meta=meta)
    log_path = Path(payload["log_path"])
    with open(log_path, "w", encoding="utf-8") as fh:
        for epoch, loss in enumerate(history):
            fh.write(json.dumps({"epoch": epoch, "loss": loss}) + "\n")
    return {
        "variant": spec.variant,
        "trial": payload["meta"]["trial"],
        "cultivar": payload["meta"]["cultivar"],
        "checkpoint": payload["ckpt_name"],
        "log": log_path.name,
        "final_loss": history[-1],
        "train_seconds": round(seconds, 3),
    }


def run_experiment(datasets: list[CultivarDataset], config: ExperimentConfig, out_dir,
                   jobs: int = 1, progress_fn=None) -> dict:
    """Train every (variant, trial) model and write the experiment manifest.

    Pooled variants train one model per trial on all cultivars; the "single"
    variant trains one model per cultivar per trial on that cultivar alone,
    with its own normalization. Checkpoints land in out_dir/checkpoints and
    loss logs in out_dir/logs; the manifest (experiment.json) records the
    split plan and model inventory for evaluation.
    """
    out = Path(out_dir)
    ckpt_dir = out / "checkpoints"
    log_dir = out / "logs"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    log_dir.mkdir(parents=True, exist_ok=True)

    datasets = sorted(datasets, key=lambda d: d.cultivar_id)
    names = {ds.cultivar_id: ds.name for ds in datasets}
    input_dim = len(datasets[0].seasons[0].feature_names)
    plan = make_trial_plan(datasets, seed=config.seed, n_trials=config.trials,
                           test_per_trial=config.test_per_trial)
    tc = config.train_config()

    payloads = []
    for trial in range(config.trials):
        train_by_cid, _ = split_trial(datasets, plan, trial)
        test_years = {names[cid]: list(plan.test_years(trial, cid)) for cid in names}
        pooled_train = [s for cid in sorted(train_by_cid) for s in train_by_cid[cid]]
        pooled_norm = fit_normalization(pooled_train)
        for variant in config.variants:
            vidx = models.VARIANTS.index(variant)
            if variant == "single":
                for ds in datasets:
                    cid = ds.cultivar_id
                    norm = fit_normalization(train_by_cid[cid])
                    seasons = [replace(apply_normalization(norm, s), cultivar_id=0)
                               for s in train_by_cid[cid]]
                    stem = f"trial{trial}_single_{ds.name}"
                    payloads.append({
                        "spec": asdict(config.model_spec(variant, input_dim, 1)),
                        "config": asdict(tc),
                        "seasons": seasons,
                        "norm": norm,
                        "seed_tuple": (config.seed, trial, vidx, cid + 1),
                        "ckpt_name": f"{stem}.ckpt",
                        "ckpt_path": str(ckpt_dir / f"{stem}.ckpt"),
                        "log_path": str(log_dir / f"{stem}.jsonl"),
                        "meta": {
                            "variant": variant, "trial": trial, "cultivar": ds.name,
                            "cultivar_names": [ds.name], "master_seed": config.seed,
                            "test_years": {ds.name: test_years[ds.name]},
                        },
                    })
            else:
                seasons = [apply_normalization(pooled_norm, s) for s in pooled_train]
                stem = f"trial{trial}_{variant}"
                payloads.append({
                    "spec": asdict(config.model_spec(variant, input_dim, len(datasets))),
                    "config": asdict(tc),
                    "seasons": seasons,
                    "norm": pooled_norm,
                    "seed_tuple": (config.seed, trial, vidx, 0),
                    "ckpt_name": f"{stem}.ckpt",
                    "ckpt_path": str(ckpt_dir / f"{stem}.ckpt"),
                    "log_path": str(log_dir / f"{stem}.jsonl"),
                    "meta": {
                        "variant": variant, "trial": trial, "cultivar": None,
                        "cultivar_names": [names[cid] for cid in sorted(names)],
                        "master_seed": config.seed, "test_years": test_years,
                    },
                })

    rows = []
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            for row in pool.map(_train_job, payloads):
                rows.append(row)
                if progress_fn is not None:
                    progress_fn(row)
    else:
        for payload in payloads:
            row = _train_job(payload)
            rows.append(row)
            if progress_fn is not None:
                progress_fn(row)

    manifest = {
        "config": asdict(config),
        "cultivars": [names[cid] for cid in sorted(names)],
        "plan": [
            {names[cid]: list(plan.test_years(t, cid)) for cid in sorted(names)}
            for t in range(config.trials)
        ],
        "models": rows,
    }
    with open(out / MANIFEST_FILE, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest
