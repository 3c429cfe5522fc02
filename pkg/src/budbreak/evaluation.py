"""Evaluation: per-season BCE, day-difference metrics, report files.

The report compares every pooled variant against the per-cultivar "single"
baseline on the held-out test seasons recorded in an experiment manifest.
Day differences are predicted minus actual, so negative means the model
called budbreak early. A season whose probability curve never reaches the
threshold is counted as "missing" rather than being folded into a fake
difference. All report files are written with fixed formatting and sorted
keys, so rerunning evaluation on the same inputs reproduces them byte for
byte.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from budbreak import models
from budbreak.data import CultivarDataset, apply_normalization
from budbreak.errors import DataError
from budbreak.nn import bce_loss
from budbreak.training import MANIFEST_FILE

DEFAULT_THRESHOLD = 0.5
BUCKETS = ((3, 7), (7, 14), (14, 30))  # half-open (lo, hi]; plus <=3 and >30


def predict_budbreak_day(probs: np.ndarray, threshold: float = DEFAULT_THRESHOLD):
    """First 1-based day the probability reaches the threshold, else None."""
    probs = np.asarray(probs)
    if probs.ndim != 1:
        raise DataError(f"expected a 1-D probability curve, got shape {probs.shape}")
    hits = np.nonzero(probs >= threshold)[0]
    if hits.size == 0:
        return None
    return int(hits[0]) + 1


def season_bce(spec, params, season, model_index: int):
    """Masked BCE of one normalized season; returns (bce, probability curve)."""
    probs = models.predict_season_probs(spec, params, season.features, model_index)
    loss, _ = bce_loss(probs, season.labels, season.label_mask)
    return float(loss), probs


@dataclass
class EvalRecord:
    """One (model, test season) outcome."""

    variant: str
    trial: int
    cultivar: str
    year: int
    bce: float
    true_day: int
    predicted_day: int | None

    @property
    def diff(self):
        if self.predicted_day is None:
            return None
        return self.predicted_day - self.true_day


@dataclass
class DaySummary:
    """Distribution of |predicted - actual| over scored seasons."""

    n_scored: int
    n_missing: int
    median_abs: float | None
    mean_abs: float | None
    within_3: int
    b3_7: int
    b7_14: int
    b14_30: int
    over_30: int


def summarize_days(diffs) -> DaySummary:
    scored = [abs(d) for d in diffs if d is not None]
    missing = sum(1 for d in diffs if d is None)
    if not scored:
        return DaySummary(0, missing, None, None, 0, 0, 0, 0, 0)
    arr = np.array(scored, dtype=np.float64)
    counts = [int(((arr > lo) & (arr <= hi)).sum()) for lo, hi in BUCKETS]
    return DaySummary(
        n_scored=len(scored),
        n_missing=missing,
        median_abs=float(np.median(arr)),
        mean_abs=float(arr.mean()),
        within_3=int((arr <= 3).sum()),
        b3_7=counts[0],
        b7_14=counts[1],
        b14_30=counts[2],
        over_30=int((arr > 30).sum()),
    )


def histogram_bins(diffs, width: int = 5):
    """Signed day differences -> [(bin_center, count)] with centers k * width."""
    if width < 1:
        raise DataError(f"histogram width must be >= 1, got {width}")
    counts: dict[int, int] = {}
    for d in diffs:
        if d is None:
            continue
        k = math.ceil(d / width - 0.5)
        counts[k] = counts.get(k, 0) + 1
    return [(k * width, counts[k]) for k in sorted(counts)]


def mean_bce_table(records) -> dict:
    """(variant, cultivar) -> mean BCE, plus (variant, None) pooled rows."""
    sums: dict[tuple, list] = {}
    for r in records:
        for key in ((r.variant, r.cultivar), (r.variant, None)):
            bucket = sums.setdefault(key, [0.0, 0])
            bucket[0] += r.bce
            bucket[1] += 1
    return {key: total / n for key, (total, n) in sums.items()}


def bce_deltas(records) -> dict:
    """Per-cultivar and pooled BCE improvement of each variant over "single".

    delta = mean_bce(single) - mean_bce(variant); positive means the pooled
    variant beats the per-cultivar baseline.
    """
    table = mean_bce_table(records)
    variants = sorted({r.variant for r in records} - {"single"})
    cultivars = sorted({r.cultivar for r in records})
    deltas = {}
    for variant in variants:
        for cultivar in [*cultivars, None]:
            base = table.get(("single", cultivar))
            ours = table.get((variant, cultivar))
            if base is not None and ours is not None:
                deltas[(variant, cultivar)] = base - ours
    return deltas


def evaluate_run(run_dir, datasets: list[CultivarDataset], threshold: float = DEFAULT_THRESHOLD):
    """Score every model in an experiment on its held-out test seasons.

    Returns (records, curves) where curves maps
    (variant, trial, cultivar, year) -> probability array.
    """
    run = Path(run_dir)
    manifest_path = run / MANIFEST_FILE
    if not manifest_path.exists():
        raise DataError(f"{manifest_path}: no experiment manifest found")
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    by_name = {ds.name: ds for ds in datasets}
    records, curves = [], {}
    for row in sorted(manifest["models"],
                      key=lambda r: (r["trial"], r["variant"], r["cultivar"] or "")):
        spec, params, norm, meta = models.load_checkpoint(run / "checkpoints" / row["checkpoint"])
        if norm is None:
            raise DataError(f"{row['checkpoint']}: checkpoint carries no normalization stats")
        names = meta["cultivar_names"]
        for name in sorted(meta["test_years"]):
            if name not in by_name:
                raise DataError(f"manifest cultivar {name!r} not present in the dataset")
            model_index = 0 if meta["cultivar"] is not None else names.index(name)
            seasons = {s.year: s for s in by_name[name].seasons}
            for year in meta["test_years"][name]:
                if year not in seasons or not seasons[year].labeled:
                    raise DataError(f"test season {name!r} {year} missing or unlabeled")
                season = apply_normalization(norm, seasons[year])
                bce, probs = season_bce(spec, params, season, model_index)
                records.append(EvalRecord(
                    variant=meta["variant"],
                    trial=meta["trial"],
                    cultivar=name,
                    year=year,
                    bce=bce,
                    true_day=season.budbreak_doy,
                    predicted_day=predict_budbreak_day(probs, threshold),
                ))
                curves[(meta["variant"], meta["trial"], name, year)] = probs
    return records, curves


def write_prob_curve(path, probs: np.ndarray, labels: np.ndarray | None = None) -> None:
    """CSV probability curve: doy, probability and (optionally) the label."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        if labels is None:
            writer.writerow(["doy", "probability"])
            for i, p in enumerate(probs):
                writer.writerow([i + 1, f"{p:.9f}"])
        else:
            writer.writerow(["doy", "probability", "label"])
            for i, (p, y) in enumerate(zip(probs, labels)):
                writer.writerow([i + 1, f"{p:.9f}", int(y)])


def _fmt(value, width=10):
    if value is None:
        return "-".rjust(width)
    return f"{value:.6f}".rjust(width)


def write_report(records, curves, out_dir, datasets=None, histogram_width: int = 5,
                 export_curves: bool = False) -> dict:
    """Write CSV tables, per-variant histograms and a text summary.

    Returns {file kind: path}. Rerunning with the same records reproduces
    identical bytes.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {}

    per_season = out / "per_season.csv"
    with open(per_season, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["variant", "trial", "cultivar", "year", "bce",
                         "true_day", "predicted_day", "diff_days"])
        for r in sorted(records, key=lambda r: (r.variant, r.trial, r.cultivar, r.year)):
            writer.writerow([
                r.variant, r.trial, r.cultivar, r.year, f"{r.bce:.6f}", r.true_day,
                "" if r.predicted_day is None else r.predicted_day,
                "" if r.diff is None else r.diff,
            ])
    paths["per_season"] = per_season

    table = mean_bce_table(records)
    deltas = bce_deltas(records)
    variants = sorted({r.variant for r in records})
    cultivars = sorted({r.cultivar for r in records})

    bce_csv = out / "bce_summary.csv"
    with open(bce_csv, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["variant", "cultivar", "mean_bce", "delta_vs_single"])
        for variant in variants:
            for cultivar in [*cultivars, None]:
                key = (variant, cultivar)
                if key not in table:
                    continue
                writer.writerow([
                    variant, cultivar if cultivar is not None else "ALL",
                    f"{table[key]:.6f}",
                    "" if key not in deltas else f"{deltas[key]:.6f}",
                ])
    paths["bce_summary"] = bce_csv

    day_csv = out / "day_summary.csv"
    with open(day_csv, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["variant", "scored", "missing", "median_abs", "mean_abs",
                         "within_3", "gt3_le7", "gt7_le14", "gt14_le30", "gt30"])
        for variant in variants:
            s = summarize_days([r.diff for r in records if r.variant == variant])
            writer.writerow([
                variant, s.n_scored, s.n_missing,
                "" if s.median_abs is None else f"{s.median_abs:.2f}",
                "" if s.mean_abs is None else f"{s.mean_abs:.2f}",
                s.within_3, s.b3_7, s.b7_14, s.b14_30, s.over_30,
            ])
    paths["day_summary"] = day_csv

    for variant in variants:
        hist = out / f"hist_{variant}.csv"
        with open(hist, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["bin_center", "count"])
            diffs = [r.diff for r in records if r.variant == variant]
            for center, count in histogram_bins(diffs, histogram_width):
                writer.writerow([center, count])
        paths[f"hist_{variant}"] = hist

    if export_curves:
        curve_dir = out / "curves"
        curve_dir.mkdir(exist_ok=True)
        labels_by = {}
        if datasets is not None:
            labels_by = {(ds.name, s.year): s.labels for ds in datasets for s in ds.seasons}
        for (variant, trial, name, year), probs in sorted(curves.items()):
            cpath = curve_dir / f"{variant}_trial{trial}_{name}_{year}.csv"
            write_prob_curve(cpath, probs, labels_by.get((name, year)))
        paths["curves"] = curve_dir

    lines = ["budbreak evaluation report", "=" * 26, ""]
    lines.append("pooled test BCE by variant (delta > 0 means better than single)")
    lines.append(f"{'variant':<14}{'mean_bce':>10}{'delta_vs_single':>17}")
    for variant in variants:
        delta = deltas.get((variant, None))
        lines.append(f"{variant:<14}{_fmt(table[(variant, None)])}"
                     f"{_fmt(delta, 17) if variant != 'single' else '-'.rjust(17)}")
    lines += ["", "per-cultivar mean test BCE"]
    header = f"{'cultivar':<12}" + "".join(f"{v:>14}" for v in variants)
    lines.append(header)
    for cultivar in cultivars:
        row = f"{cultivar:<12}"
        for variant in variants:
            value = table.get((variant, cultivar))
            row += _fmt(value, 14)
        lines.append(row)
    lines += ["", "day difference |predicted - actual| by variant"]
    lines.append(f"{'variant':<14}{'scored':>7}{'missing':>8}{'median':>8}{'mean':>8}"
                 f"{'<=3':>6}{'(3,7]':>7}{'(7,14]':>8}{'(14,30]':>9}{'>30':>6}")
    for variant in variants:
        s = summarize_days([r.diff for r in records if r.variant == variant])
        med = "-" if s.median_abs is None else f"{s.median_abs:.1f}"
        mean = "-" if s.mean_abs is None else f"{s.mean_abs:.1f}"
        lines.append(f"{variant:<14}{s.n_scored:>7}{s.n_missing:>8}{med:>8}{mean:>8}"
                     f"{s.within_3:>6}{s.b3_7:>7}{s.b7_14:>8}{s.b14_30:>9}{s.over_30:>6}")
    summary = out / "summary.txt"
    summary.write_text("\n".join(lines) + "\n", encoding="utf-8")
    paths["summary"] = summary
    return paths


def evaluate_experiment(run_dir, datasets, out_dir=None, threshold: float = DEFAULT_THRESHOLD,
                        histogram_width: int = 5, export_curves: bool = False) -> dict:
    """End-to-end: score a finished run and write its report directory."""
    records, curves = evaluate_run(run_dir, datasets, threshold)
    out = Path(out_dir) if out_dir is not None else Path(run_dir) / "report"
    paths = write_report(records, curves, out, datasets=datasets,
                         histogram_width=histogram_width, export_curves=export_curves)
    return {
        "records": records,
        "mean_bce": mean_bce_table(records),
        "deltas": bce_deltas(records),
        "paths": paths,
    }
