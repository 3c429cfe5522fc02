"""Evaluation metrics and report generation."""

import csv

import numpy as np
import pytest

from budbreak import evaluation, models, synthgen, training
from budbreak.errors import DataError
from budbreak.evaluation import EvalRecord


def crossing_loop(probs, threshold):
    for i, p in enumerate(probs):
        if p >= threshold:
            return i + 1
    return None


class TestPredictDay:
    def test_hand_cases(self):
        assert evaluation.predict_budbreak_day(np.array([0.1, 0.4, 0.6, 0.7])) == 3
        assert evaluation.predict_budbreak_day(np.array([0.9, 0.1])) == 1
        assert evaluation.predict_budbreak_day(np.array([0.1, 0.2, 0.3])) is None
        # first crossing wins even if the curve dips afterwards
        assert evaluation.predict_budbreak_day(np.array([0.1, 0.6, 0.2, 0.9])) == 2
        # reaching the threshold exactly counts
        assert evaluation.predict_budbreak_day(np.array([0.2, 0.5, 0.8])) == 2

    def test_matches_brute_force_randomized(self):
        rng = np.random.default_rng(77)
        for _ in range(1000):
            H = int(rng.integers(1, 80))
            probs = rng.random(H)
            threshold = float(rng.uniform(0.05, 0.95))
            assert (evaluation.predict_budbreak_day(probs, threshold)
                    == crossing_loop(probs, threshold))

    def test_rejects_matrix(self):
        with pytest.raises(DataError, match="1-D"):
            evaluation.predict_budbreak_day(np.zeros((2, 3)))


class TestSummarizeDays:
    def test_hand_case(self):
        diffs = [0, -2, 3, 4, -7, 8, 20, -31, None]
        s = evaluation.summarize_days(diffs)
        assert s.n_scored == 8 and s.n_missing == 1
        assert s.within_3 == 3          # 0, 2, 3
        assert s.b3_7 == 2              # 4, 7
        assert s.b7_14 == 1             # 8
        assert s.b14_30 == 1            # 20
        assert s.over_30 == 1           # 31
        assert s.median_abs == 5.5
        assert s.mean_abs == pytest.approx(75 / 8)

    def test_buckets_partition(self):
        rng = np.random.default_rng(3)
        diffs = [int(d) for d in rng.integers(-60, 60, size=500)]
        s = evaluation.summarize_days(diffs)
        assert s.within_3 + s.b3_7 + s.b7_14 + s.b14_30 + s.over_30 == s.n_scored == 500

    def test_empty_and_all_missing(self):
        s = evaluation.summarize_days([None, None])
        assert s.n_scored == 0 and s.n_missing == 2
        assert s.median_abs is None and s.mean_abs is None


class TestHistogram:
    def test_hand_bins_width_5(self):
        # nearest multiple of 5, exact midpoints round up
        bins = dict(evaluation.histogram_bins([0, 2, 3, -3, 7, 8, None], width=5))
        assert bins == {0: 2, 5: 2, -5: 1, 10: 1}

    def test_every_diff_within_half_width(self):
        rng = np.random.default_rng(4)
        for width in (1, 2, 5, 7, 10):
            diffs = [int(d) for d in rng.integers(-200, 200, size=300)]
            bins = evaluation.histogram_bins(diffs, width)
            assert sum(c for _, c in bins) == len(diffs)
            centers = [c for c, _ in bins]
            assert centers == sorted(centers)
            for d in diffs:
                nearest = min(centers, key=lambda c: abs(d - c))
                assert abs(d - nearest) <= width / 2

    def test_width_validated(self):
        with pytest.raises(DataError, match="width"):
            evaluation.histogram_bins([1, 2], width=0)


def rec(variant, cultivar, bce, trial=0, year=2020, true_day=100, predicted=103):
    return EvalRecord(variant=variant, trial=trial, cultivar=cultivar, year=year,
                      bce=bce, true_day=true_day, predicted_day=predicted)


class TestBceTables:
    def test_mean_and_delta(self):
        records = [
            rec("single", "a", 0.30), rec("single", "a", 0.50),
            rec("single", "b", 0.20),
            rec("multi_head", "a", 0.30), rec("multi_head", "a", 0.10),
            rec("multi_head", "b", 0.40),
        ]
        table = evaluation.mean_bce_table(records)
        assert table[("single", "a")] == pytest.approx(0.40)
        assert table[("single", None)] == pytest.approx(1.0 / 3)
        deltas = evaluation.bce_deltas(records)
        assert deltas[("multi_head", "a")] == pytest.approx(0.40 - 0.20)
        assert deltas[("multi_head", "b")] == pytest.approx(0.20 - 0.40)
        assert deltas[("multi_head", None)] == pytest.approx(1.0 / 3 - 0.8 / 3)
        assert ("single", None) not in deltas

    def test_diff_sign_convention(self):
        r = rec("single", "a", 0.1, true_day=100, predicted=97)
        assert r.diff == -3  # negative means predicted early
        r = rec("single", "a", 0.1, predicted=None)
        assert r.diff is None


class TestSeasonBce:
    def test_matches_manual_formula(self):
        bench = synthgen.gen_benchmark(master_seed=6, season_counts=(3,))
        from budbreak.data import apply_normalization, fit_normalization
        norm = fit_normalization(bench.datasets[0].seasons)
        season = apply_normalization(norm, bench.datasets[0].seasons[0])
        spec = models.ModelSpec("single", input_dim=7, fc_dims=(8, 12, 8), gru_hidden=10)
        params = models.init_params(spec, seed=2)
        bce, probs = evaluation.season_bce(spec, params, season, 0)
        p = np.clip(probs, 1e-7, 1 - 1e-7)
        y = season.labels
        expect = -np.mean(y * np.log(p) + (1 - y) * np.log(1 - p))
        assert bce == pytest.approx(expect, rel=1e-12)


class TestProbCurveFile:
    def test_round_trip(self, tmp_path):
        probs = np.random.default_rng(1).random(20)
        labels = (np.arange(20) >= 12).astype(float)
        path = tmp_path / "curve.csv"
        evaluation.write_prob_curve(path, probs, labels)
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["doy", "probability", "label"]
        assert len(rows) == 21
        got = np.array([float(r[1]) for r in rows[1:]])
        assert np.allclose(got, probs, atol=1e-9)
        assert [int(r[2]) for r in rows[1:]] == [int(v) for v in labels]
        assert [int(r[0]) for r in rows[1:]] == list(range(1, 21))


@pytest.fixture(scope="module")
def finished_run(tmp_path_factory):
    bench = synthgen.gen_benchmark(master_seed=5, season_counts=(4, 6))
    config = training.ExperimentConfig(
        variants=("single", "multi_head", "embed_mult"),
        trials=2, epochs=2, seed=9, fc_dims=(8, 12, 8), gru_hidden=10,
    )
    out = tmp_path_factory.mktemp("run")
    manifest = training.run_experiment(bench.datasets, config, out)
    return bench, config, out, manifest


class TestEvaluateRun:
    def test_records_cover_all_test_seasons(self, finished_run):
        bench, config, out, manifest = finished_run
        records, curves = evaluation.evaluate_run(out, bench.datasets)
        # 3 variants x 2 trials x (2 cultivars x 2 test years)
        assert len(records) == 3 * 2 * 4
        assert len(curves) == len(records)
        for trial, plan in enumerate(manifest["plan"]):
            for name, years in plan.items():
                for variant in config.variants:
                    hits = [r for r in records
                            if (r.variant, r.trial, r.cultivar) == (variant, trial, name)]
                    assert sorted(r.year for r in hits) == sorted(years)

    def test_records_are_scored_sanely(self, finished_run):
        bench, _, out, _ = finished_run
        records, curves = evaluation.evaluate_run(out, bench.datasets)
        truth = {(ds.name, s.year): s.budbreak_doy for ds in bench.datasets for s in ds.seasons}
        for r in records:
            assert r.bce > 0.0 and np.isfinite(r.bce)
            assert r.true_day == truth[(r.cultivar, r.year)]
        for key, probs in curves.items():
            assert probs.ndim == 1 and np.all((probs > 0) & (probs < 1))

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(DataError, match="manifest"):
            evaluation.evaluate_run(tmp_path, [])

    def test_report_files_and_determinism(self, finished_run, tmp_path):
        bench, _, out, _ = finished_run
        r1 = evaluation.evaluate_experiment(out, bench.datasets, out_dir=tmp_path / "a",
                                            export_curves=True)
        r2 = evaluation.evaluate_experiment(out, bench.datasets, out_dir=tmp_path / "b",
                                            export_curves=True)
        for kind in ("per_season", "bce_summary", "day_summary", "summary"):
            a, b = r1["paths"][kind], r2["paths"][kind]
            assert a.exists()
            assert a.read_bytes() == b.read_bytes(), kind
        curve_files = sorted(p.name for p in (tmp_path / "a" / "curves").iterdir())
        assert len(curve_files) == len(r1["records"])
        with open(r1["paths"]["per_season"], newline="") as fh:
            rows = list(csv.reader(fh))
        assert len(rows) == len(r1["records"]) + 1
        assert rows[0][:4] == ["variant", "trial", "cultivar", "year"]

    def test_summary_text_mentions_each_variant(self, finished_run, tmp_path):
        bench, config, out, _ = finished_run
        report = evaluation.evaluate_experiment(out, bench.datasets, out_dir=tmp_path / "s")
        text = report["paths"]["summary"].read_text()
        for variant in config.variants:
            assert variant in text
        assert "delta" in text
