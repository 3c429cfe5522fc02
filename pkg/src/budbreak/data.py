"""Season datasets: CSV ingestion, gap repair, labels, normalization, splits.

File formats (see docs/data_formats.md for examples):

* weather CSV:   header ``cultivar,year,doy,<feature columns...>``; one row
  per (cultivar, year, doy); empty cell = missing value.
* phenology CSV: header ``cultivar,year,budbreak_doy``; a season with no row
  is unlabeled (its loss mask is all zeros and it is never picked as a test
  season).
"""

from __future__ import annotations

import calendar
import csv
from dataclasses import dataclass, field, replace

import numpy as np

from budbreak.errors import DataError

DEFAULT_FEATURES = ("tmean", "tmin", "tmax", "humidity", "dewpoint", "precip", "wind")

WEATHER_KEY_COLUMNS = ("cultivar", "year", "doy")
PHENOLOGY_COLUMNS = ("cultivar", "year", "budbreak_doy")


def season_length(year: int) -> int:
    """Days in the calendar year: 366 for leap years, else 365."""
    return 366 if calendar.isleap(year) else 365


@dataclass
class WeatherDay:
    """One day of weather; missing values are NaN until interpolation."""

    doy: int
    features: np.ndarray


@dataclass
class SeasonSeries:
    """One cultivar-year: daily feature matrix plus the step-function label."""

    cultivar_id: int
    year: int
    features: np.ndarray          # (H, F) float64, gap-free
    budbreak_doy: int | None
    labels: np.ndarray            # (H,) float64 in {0, 1}
    label_mask: np.ndarray        # (H,) float64 in {0, 1}
    feature_names: tuple[str, ...]

    @property
    def H(self) -> int:
        return self.features.shape[0]

    @property
    def labeled(self) -> bool:
        return self.budbreak_doy is not None


@dataclass
class CultivarDataset:
    """All seasons observed for one cultivar."""

    cultivar_id: int
    name: str
    seasons: list[SeasonSeries] = field(default_factory=list)

    @property
    def labeled_years(self) -> list[int]:
        return [s.year for s in self.seasons if s.labeled]


@dataclass
class NormStats:
    """Per-feature z-score statistics fitted on training seasons only."""

    mean: np.ndarray
    std: np.ndarray
    feature_names: tuple[str, ...]


@dataclass
class TrialPlan:
    """Held-out test years per cultivar for each evaluation trial."""

    seed: int
    trials: list[dict[int, tuple[int, ...]]]

    def test_years(self, trial: int, cultivar_id: int) -> tuple[int, ...]:
        return self.trials[trial][cultivar_id]


def interpolate_missing(values: np.ndarray) -> np.ndarray:
    """Fill NaN gaps: linear between known neighbors, nearest value at edges."""
    values = np.asarray(values, dtype=np.float64)
    known = np.isfinite(values)
    if not known.any():
        raise DataError("all values missing; cannot interpolate")
    if known.all():
        return values.copy()
    idx = np.arange(values.shape[0])
    return np.interp(idx, idx[known], values[known])


def build_labels(budbreak_doy: int | None, H: int):
    """Step labels: 1 from the budbreak day onward. Unlabeled -> all-zero mask."""
    if budbreak_doy is None:
        return np.zeros(H), np.zeros(H)
    if not 1 <= budbreak_doy <= H:
        raise DataError(f"budbreak_doy {budbreak_doy} outside 1..{H}")
    labels = np.zeros(H)
    labels[budbreak_doy - 1:] = 1.0
    return labels, np.ones(H)


def parse_weather_csv(path, schema: tuple[str, ...] | None = None):
    """Read a weather CSV into per-season day rows.

    Returns ``(records, feature_names)`` where records is a list of
    ``(cultivar_name, year, [WeatherDay...])`` sorted by (cultivar, year) and
    day rows sorted by doy. Missing numeric cells become NaN gaps.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        if tuple(header[:3]) != WEATHER_KEY_COLUMNS:
            raise DataError(f"{path}: header must start with {','.join(WEATHER_KEY_COLUMNS)}, got {header[:3]}")
        feature_names = tuple(header[3:])
        if not feature_names:
            raise DataError(f"{path}: no feature columns in header")
        if schema is not None and feature_names != tuple(schema):
            unknown = [c for c in feature_names if c not in schema]
            missing = [c for c in schema if c not in feature_names]
            raise DataError(
                f"{path}: feature columns {feature_names} do not match schema {tuple(schema)}"
                f" (unknown: {unknown}, missing: {missing})"
            )
        n_feat = len(feature_names)
        groups: dict[tuple[str, int], dict[int, WeatherDay]] = {}
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 3 + n_feat:
                raise DataError(f"{path}:{lineno}: expected {3 + n_feat} cells, got {len(row)}")
            name = row[0]
            try:
                year = int(row[1])
                doy = int(row[2])
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from None
            if not 1 <= doy <= 366:
                raise DataError(f"{path}:{lineno}: doy {doy} outside 1..366")
            feats = np.empty(n_feat)
            for j, cell in enumerate(row[3:]):
                if cell == "":
                    feats[j] = np.nan
                else:
                    try:
                        feats[j] = float(cell)
                    except ValueError:
                        raise DataError(
                            f"{path}:{lineno}: bad value {cell!r} in column {feature_names[j]}"
                        ) from None
            days = groups.setdefault((name, year), {})
            if doy in days:
                raise DataError(f"{path}:{lineno}: duplicate row for (cultivar={name}, year={year}, doy={doy})")
            days[doy] = WeatherDay(doy=doy, features=feats)
    records = [
        (name, year, [days[d] for d in sorted(days)])
        for (name, year), days in sorted(groups.items())
    ]
    return records, feature_names


def parse_phenology_csv(path) -> dict[tuple[str, int], int]:
    """Read the budbreak-day CSV into a {(cultivar, year): doy} map."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        if tuple(header) != PHENOLOGY_COLUMNS:
            raise DataError(f"{path}: header must be {','.join(PHENOLOGY_COLUMNS)}, got {header}")
        out: dict[tuple[str, int], int] = {}
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 3:
                raise DataError(f"{path}:{lineno}: expected 3 cells, got {len(row)}")
            try:
                key = (row[0], int(row[1]))
                doy = int(row[2])
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from None
            if key in out:
                raise DataError(f"{path}:{lineno}: duplicate phenology row for {key}")
            out[key] = doy
    return out


def build_season(cultivar_id: int, year: int, days: list[WeatherDay],
                 budbreak_doy: int | None, feature_names: tuple[str, ...]) -> SeasonSeries:
    """Assemble a gap-free season on the full 1..H day grid."""
    H = season_length(year)
    n_feat = len(feature_names)
    grid = np.full((H, n_feat), np.nan)
    for day in days:
        if day.doy > H:
            raise DataError(f"year {year} has {H} days but found doy {day.doy}")
        grid[day.doy - 1] = day.features
    for j in range(n_feat):
        try:
            grid[:, j] = interpolate_missing(grid[:, j])
        except DataError:
            raise DataError(
                f"cultivar_id {cultivar_id} year {year}: feature {feature_names[j]!r} has no data"
            ) from None
    labels, mask = build_labels(budbreak_doy, H)
    return SeasonSeries(
        cultivar_id=cultivar_id,
        year=year,
        features=grid,
        budbreak_doy=budbreak_doy,
        labels=labels,
        label_mask=mask,
        feature_names=feature_names,
    )


def load_dataset(weather_path, phenology_path, schema: tuple[str, ...] | None = None) -> list[CultivarDataset]:
    """Load weather + phenology CSVs into per-cultivar datasets.

    Cultivar ids are assigned by sorted cultivar name, so the mapping is
    stable across runs and file orderings.
    """
    records, feature_names = parse_weather_csv(weather_path, schema)
    phenology = parse_phenology_csv(phenology_path)
    known = {(name, year) for name, year, _ in records}
    for key in phenology:
        if key not in known:
            raise DataError(f"{phenology_path}: phenology row {key} has no weather data")
    names = sorted({name for name, _, _ in records})
    ids = {name: i for i, name in enumerate(names)}
    datasets = {name: CultivarDataset(cultivar_id=ids[name], name=name) for name in names}
    for name, year, days in records:
        season = build_season(ids[name], year, days, phenology.get((name, year)), feature_names)
        datasets[name].seasons.append(season)
    for ds in datasets.values():
        ds.seasons.sort(key=lambda s: s.year)
    return [datasets[name] for name in names]


def write_weather_csv(path, datasets: list[CultivarDataset]) -> None:
    """Write seasons back to the weather CSV format (NaN -> empty cell)."""
    feature_names = datasets[0].seasons[0].feature_names
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(list(WEATHER_KEY_COLUMNS) + list(feature_names))
        for ds in sorted(datasets, key=lambda d: d.name):
            for season in sorted(ds.seasons, key=lambda s: s.year):
                for i in range(season.H):
                    cells = [
                        "" if not np.isfinite(v) else repr(float(v))
                        for v in season.features[i]
                    ]
                    writer.writerow([ds.name, season.year, i + 1] + cells)


def write_phenology_csv(path, datasets: list[CultivarDataset]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(list(PHENOLOGY_COLUMNS))
        for ds in sorted(datasets, key=lambda d: d.name):
            for season in sorted(ds.seasons, key=lambda s: s.year):
                if season.labeled:
                    writer.writerow([ds.name, season.year, season.budbreak_doy])


def fit_normalization(train_seasons: list[SeasonSeries]) -> NormStats:
    """Per-feature mean/std pooled over every day of the training seasons."""
    if not train_seasons:
        raise DataError("need at least one training season to fit normalization")
    stacked = np.concatenate([s.features for s in train_seasons], axis=0)
    return NormStats(
        mean=stacked.mean(axis=0),
        std=stacked.std(axis=0),
        feature_names=train_seasons[0].feature_names,
    )


def apply_normalization(stats: NormStats, season: SeasonSeries) -> SeasonSeries:
    """Return a copy of the season with z-scored features (std 0 -> 0)."""
    if stats.feature_names != season.feature_names:
        raise DataError(
            f"normalization schema {stats.feature_names} does not match season schema {season.feature_names}"
        )
    centered = season.features - stats.mean
    scaled = np.where(stats.std > 0.0, centered / np.where(stats.std > 0.0, stats.std, 1.0), 0.0)
    return replace(season, features=scaled)


def make_trial_plan(datasets: list[CultivarDataset], seed: int, n_trials: int = 3,
                    test_per_trial: int = 2) -> TrialPlan:
    """Seeded assignment of held-out test years per cultivar and trial.

    Only labeled seasons are eligible. When a cultivar has at least
    n_trials * test_per_trial labeled seasons the trials' test sets are
    disjoint; otherwise each trial samples without replacement independently
    and overlap across trials is allowed. Deterministic in (seed, cultivar_id)
    only, so reordering the dataset list does not change the plan.
    """
    trials: list[dict[int, tuple[int, ...]]] = [dict() for _ in range(n_trials)]
    for ds in sorted(datasets, key=lambda d: d.cultivar_id):
        years = sorted(ds.labeled_years)
        if len(years) < test_per_trial + 1:
            raise DataError(
                f"cultivar {ds.name!r} (id {ds.cultivar_id}) has only {len(years)} labeled seasons;"
                f" need at least {test_per_trial + 1}"
            )
        rng = np.random.default_rng([seed, ds.cultivar_id])
        if len(years) >= n_trials * test_per_trial:
            perm = rng.permutation(len(years))
            for t in range(n_trials):
                chosen = perm[t * test_per_trial:(t + 1) * test_per_trial]
                trials[t][ds.cultivar_id] = tuple(sorted(years[i] for i in chosen))
        else:
            for t in range(n_trials):
                chosen = rng.choice(len(years), size=test_per_trial, replace=False)
                trials[t][ds.cultivar_id] = tuple(sorted(years[i] for i in chosen))
    return TrialPlan(seed=seed, trials=trials)


def make_batches(seasons: list[SeasonSeries], batch_size: int = 12, epoch_seed=0,
                 balanced: bool = False) -> list[list[SeasonSeries]]:
    """Seeded shuffle of the training seasons partitioned into batches.

    With ``balanced=True`` every cultivar is resampled (with replacement where
    needed) up to the largest cultivar's season count before shuffling, so
    low-data cultivars are not underrepresented. Off by default: the plain
    uniform shuffle over all seasons is the standard recipe.
    """
    if not seasons:
        raise DataError("no seasons to batch")
    if batch_size < 1:
        raise DataError(f"batch_size must be >= 1, got {batch_size}")
    rng = np.random.default_rng(epoch_seed)
    if balanced:
        by_cultivar: dict[int, list[SeasonSeries]] = {}
        for s in seasons:
            by_cultivar.setdefault(s.cultivar_id, []).append(s)
        target = max(len(v) for v in by_cultivar.values())
        pool: list[SeasonSeries] = []
        for cid in sorted(by_cultivar):
            group = by_cultivar[cid]
            pool.extend(group)
            extra = target - len(group)
            if extra > 0:
                picks = rng.choice(len(group), size=extra, replace=True)
                pool.extend(group[i] for i in picks)
    else:
        pool = list(seasons)
    order = rng.permutation(len(pool))
    shuffled = [pool[i] for i in order]
    return [shuffled[i:i + batch_size] for i in range(0, len(shuffled), batch_size)]
