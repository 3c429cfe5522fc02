"""Synthetic weather + budbreak generator with a known forcing-sum oracle.

Weather is a seasonal temperature sinusoid with per-year climate offsets and
daily noise, plus correlated secondary features. The budbreak label comes
from a degree-day oracle: forcing accumulates as max(0, tmean - base_temp)
from January 1 and the bud breaks on the first day the running sum reaches
the cultivar's forcing requirement. Labels are therefore an exact function
of the generated inputs, and every seeded draw is reproducible.

All cultivars generated from one master seed share each year's weather (one
site, many cultivars); they differ only in their forcing parameters.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from budbreak.data import (
    DEFAULT_FEATURES,
    CultivarDataset,
    build_season,
    season_length,
    write_phenology_csv,
    write_weather_csv,
)
from budbreak.data import WeatherDay
from budbreak.errors import DataError

DEFAULT_SEASON_COUNTS = (4, 4, 8, 16, 24, 30)
PROVENANCE_FILE = "provenance.json"
WEATHER_FILE = "weather.csv"
PHENOLOGY_FILE = "phenology.csv"


@dataclass(frozen=True)
class ClimateParams:
    """Sinusoidal site climate; defaults put budbreak in DOY 80..135."""

    mean_temp: float = 13.5        # annual mean of tmean, degrees C
    amplitude: float = 11.0        # seasonal swing around the mean
    coldest_doy: int = 15          # phase: coldest day of the year
    daily_noise: float = 2.0       # sd of day-to-day tmean noise
    year_effect_std: float = 1.5   # sd of the per-year climate offset


@dataclass(frozen=True)
class CultivarParams:
    """Forcing response of one cultivar."""

    name: str
    base_temp: float           # forcing threshold, degrees C
    forcing_requirement: float  # degree-day sum that triggers budbreak


def _phase(doys: np.ndarray, climate: ClimateParams) -> np.ndarray:
    return 2.0 * np.pi * (doys - climate.coldest_doy) / 365.25


def generate_weather_features(year: int, climate: ClimateParams, seed) -> np.ndarray:
    """One year of daily features, shape (H, 7) in DEFAULT_FEATURES order."""
    rng = np.random.default_rng(seed)
    H = season_length(year)
    doys = np.arange(1, H + 1, dtype=np.float64)
    cos_term = np.cos(_phase(doys, climate))

    year_effect = rng.normal(0.0, climate.year_effect_std) if climate.year_effect_std > 0 else 0.0
    tmean = climate.mean_temp - climate.amplitude * cos_term + year_effect
    if climate.daily_noise > 0:
        tmean = tmean + rng.normal(0.0, climate.daily_noise, size=H)

    tmin = tmean - rng.uniform(1.0, 6.0, size=H)
    tmax = tmean + rng.uniform(1.0, 6.0, size=H)
    humidity = np.clip(75.0 + 15.0 * cos_term + rng.normal(0.0, 8.0, size=H), 5.0, 100.0)
    dewpoint = np.minimum(tmean - (100.0 - humidity) / 5.0 + rng.normal(0.0, 1.0, size=H), tmean)
    wet = rng.random(H) < np.clip(0.35 + 0.15 * cos_term, 0.05, 0.95)
    precip = np.where(wet, rng.exponential(3.0, size=H), 0.0)
    wind = rng.gamma(2.0, 1.5, size=H)

    return np.column_stack([tmean, tmin, tmax, humidity, dewpoint, precip, wind])


def oracle_budbreak_day(tmean: np.ndarray, base_temp: float, forcing_requirement: float):
    """First day the running forcing sum reaches the requirement, 1-based.

    Returns None when the requirement is never met within the season.
    """
    if forcing_requirement <= 0:
        raise DataError(f"forcing_requirement must be > 0, got {forcing_requirement}")
    forcing = np.cumsum(np.maximum(0.0, np.asarray(tmean, dtype=np.float64) - base_temp))
    crossed = np.nonzero(forcing >= forcing_requirement)[0]
    if crossed.size == 0:
        return None
    return int(crossed[0]) + 1


def draw_cultivar_params(master_seed: int, index: int, name: str) -> CultivarParams:
    """Seeded forcing parameters: base_temp U[4, 8], requirement U[150, 250]."""
    rng = np.random.default_rng([master_seed, 1, index])
    return CultivarParams(
        name=name,
        base_temp=float(rng.uniform(4.0, 8.0)),
        forcing_requirement=float(rng.uniform(150.0, 250.0)),
    )


def generate_cultivar(cultivar_id: int, params: CultivarParams, years,
                      climate: ClimateParams, master_seed: int) -> CultivarDataset:
    """Seasons for one cultivar; weather seed depends on (master_seed, year) only."""
    ds = CultivarDataset(cultivar_id=cultivar_id, name=params.name)
    for year in years:
        features = generate_weather_features(year, climate, seed=[master_seed, 0, year])
        doy = oracle_budbreak_day(features[:, 0], params.base_temp, params.forcing_requirement)
        if doy is None:
            raise DataError(
                f"cultivar {params.name!r} year {year}: forcing requirement"
                f" {params.forcing_requirement:.1f} never reached; climate too cold"
            )
        days = [WeatherDay(doy=i + 1, features=features[i]) for i in range(len(features))]
        ds.seasons.append(build_season(cultivar_id, year, days, doy, DEFAULT_FEATURES))
    return ds


@dataclass
class Benchmark:
    datasets: list[CultivarDataset]
    cultivar_params: list[CultivarParams]
    climate: ClimateParams
    master_seed: int
    season_counts: tuple[int, ...]
    end_year: int

    def provenance(self) -> dict:
        return {
            "master_seed": self.master_seed,
            "climate": asdict(self.climate),
            "cultivars": [
                {**asdict(p), "cultivar_id": i, "n_seasons": n,
                 "years": [s.year for s in self.datasets[i].seasons]}
                for i, (p, n) in enumerate(zip(self.cultivar_params, self.season_counts))
            ],
            "end_year": self.end_year,
            "feature_names": list(DEFAULT_FEATURES),
            "oracle": "budbreak on first day cumsum(max(0, tmean - base_temp)) >= forcing_requirement",
        }


def gen_benchmark(master_seed: int, season_counts=DEFAULT_SEASON_COUNTS,
                  end_year: int = 2022, climate: ClimateParams | None = None) -> Benchmark:
    """Multi-cultivar benchmark: few-season and many-season cultivars, one site.

    Cultivar i is named cv0i and observed for season_counts[i] consecutive
    years ending at end_year.
    """
    climate = climate or ClimateParams()
    datasets, cparams = [], []
    for i, count in enumerate(season_counts):
        if count < 1:
            raise DataError(f"season_counts must be positive, got {season_counts}")
        params = draw_cultivar_params(master_seed, i, f"cv{i:02d}")
        years = range(end_year - count + 1, end_year + 1)
        datasets.append(generate_cultivar(i, params, years, climate, master_seed))
        cparams.append(params)
    return Benchmark(
        datasets=datasets,
        cultivar_params=cparams,
        climate=climate,
        master_seed=master_seed,
        season_counts=tuple(season_counts),
        end_year=end_year,
    )


def write_benchmark(bench: Benchmark, out_dir) -> dict:
    """Write weather.csv, phenology.csv and provenance.json; returns file map."""
    from pathlib import Path

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "weather": out / WEATHER_FILE,
        "phenology": out / PHENOLOGY_FILE,
        "provenance": out / PROVENANCE_FILE,
    }
    write_weather_csv(paths["weather"], bench.datasets)
    write_phenology_csv(paths["phenology"], bench.datasets)
    with open(paths["provenance"], "w", encoding="utf-8") as fh:
        json.dump(bench.provenance(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    return paths
