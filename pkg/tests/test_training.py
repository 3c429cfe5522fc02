"""Training loop, batch loss semantics, experiment driver."""

import json
from dataclasses import replace

import numpy as np
import pytest

from budbreak import models, synthgen, training
from budbreak.data import apply_normalization, fit_normalization, make_trial_plan
from budbreak.errors import ConfigError, DataError, TrainingDiverged
from budbreak.nn import bce_loss

SMALL = dict(fc_dims=(8, 12, 8), gru_hidden=10)


def small_seasons(n=4, cultivars=2, seed=5):
    bench = synthgen.gen_benchmark(master_seed=seed, season_counts=(n,) * cultivars)
    seasons = [s for ds in bench.datasets for s in ds.seasons]
    norm = fit_normalization(seasons)
    return [apply_normalization(norm, s) for s in seasons], bench


class TestConfigs:
    def test_train_config_validation(self):
        with pytest.raises(ConfigError, match="epochs"):
            training.TrainConfig(epochs=0)
        with pytest.raises(ConfigError, match="learning_rate"):
            training.TrainConfig(learning_rate=0.0)
        with pytest.raises(ConfigError, match="batch_size"):
            training.TrainConfig(batch_size=0)

    def test_experiment_config_validation(self):
        with pytest.raises(ConfigError, match="unknown variants"):
            training.ExperimentConfig(variants=("single", "fancy"))
        with pytest.raises(ConfigError, match="at least one"):
            training.ExperimentConfig(variants=())
        with pytest.raises(ConfigError, match="trials"):
            training.ExperimentConfig(trials=0)

    def test_model_spec_builder(self):
        ec = training.ExperimentConfig(**SMALL, embed_dim=3)
        spec = ec.model_spec("embed_concat", input_dim=7, num_cultivars=4)
        assert spec.embed_dim == 3 and spec.num_cultivars == 4
        spec = ec.model_spec("embed_add", input_dim=7, num_cultivars=4)
        assert spec.embed_dim == 12  # derived, config embed_dim only applies to concat
        spec = ec.model_spec("single", input_dim=7, num_cultivars=4)
        assert spec.num_cultivars == 1

    def test_defaults_match_recipe(self):
        tc = training.TrainConfig()
        assert tc.learning_rate == 1e-3
        assert tc.batch_size == 12
        assert tc.epochs == 400
        ec = training.ExperimentConfig()
        assert ec.trials == 3 and ec.test_per_trial == 2
        assert ec.variants == models.VARIANTS


class TestBatchLoss:
    def test_matches_per_season_mean(self):
        # independent path: one forward per season, equally weighted
        seasons, _ = small_seasons()
        spec = models.ModelSpec("multi_head", input_dim=7, num_cultivars=2, **SMALL)
        params = models.init_params(spec, seed=1)
        batch = seasons[:5]
        loss, grads = training.batch_loss_and_grads(spec, params, batch)
        expect = 0.0
        expect_grads = {k: np.zeros_like(v) for k, v in params.items()}
        for s in batch:
            probs, cache = models.forward_group(spec, params, s.features[None],
                                                np.array([s.cultivar_id]))
            li, gi = bce_loss(probs[0], s.labels, s.label_mask)
            expect += li / len(batch)
            g = models.backward_group(spec, params, cache, gi[None] / len(batch))
            for k in expect_grads:
                expect_grads[k] += g[k]
        assert np.isclose(loss, expect, rtol=1e-12)
        for k in grads:
            assert np.allclose(grads[k], expect_grads[k], rtol=1e-9, atol=1e-12), k

    def test_mixed_season_lengths(self):
        # 2020 is a leap year: groups of H=366 and H=365 in one batch
        seasons, _ = small_seasons(n=4, cultivars=1, seed=8)
        lengths = {s.H for s in seasons}
        assert lengths == {365, 366}
        spec = models.ModelSpec("single", input_dim=7, **SMALL)
        remapped = [replace(s, cultivar_id=0) for s in seasons]
        params = models.init_params(spec, seed=2)
        loss, grads = training.batch_loss_and_grads(spec, params, remapped)
        expect = np.mean([
            bce_loss(models.predict_season_probs(spec, params, s.features), s.labels,
                     s.label_mask)[0]
            for s in remapped
        ])
        assert np.isclose(loss, expect, rtol=1e-12)


class TestTrainModel:
    def test_loss_decreases(self):
        seasons, _ = small_seasons(n=2, cultivars=1)
        spec = models.ModelSpec("single", input_dim=7, fc_dims=(16, 24, 16), gru_hidden=24)
        remapped = [replace(s, cultivar_id=0) for s in seasons]
        _, history = training.train_model(spec, training.TrainConfig(epochs=80, seed=3), remapped)
        assert len(history) == 80
        assert history[-1] < history[0] * 0.5

    def test_bitwise_determinism(self):
        seasons, _ = small_seasons()
        spec = models.ModelSpec("embed_add", input_dim=7, num_cultivars=2, **SMALL)
        cfg = training.TrainConfig(epochs=3, seed=4)
        p1, h1 = training.train_model(spec, cfg, seasons, seed_tuple=(9, 0))
        p2, h2 = training.train_model(spec, cfg, seasons, seed_tuple=(9, 0))
        p3, _ = training.train_model(spec, cfg, seasons, seed_tuple=(9, 1))
        assert h1 == h2
        for k in p1:
            assert np.array_equal(p1[k], p2[k]), k
        assert any(not np.array_equal(p1[k], p3[k]) for k in p1)

    def test_unlabeled_seasons_rejected(self):
        seasons, _ = small_seasons(n=2, cultivars=1)
        stripped = [replace(s, cultivar_id=0, label_mask=np.zeros(s.H)) for s in seasons]
        spec = models.ModelSpec("single", input_dim=7, **SMALL)
        with pytest.raises(DataError, match="no labeled"):
            training.train_model(spec, training.TrainConfig(epochs=1), stripped)

    def test_divergence_guard(self):
        seasons, _ = small_seasons(n=2, cultivars=1)
        remapped = [replace(s, cultivar_id=0) for s in seasons]
        spec = models.ModelSpec("single", input_dim=7, **SMALL)
        cfg = training.TrainConfig(epochs=5, divergence_threshold=1e-12)
        with pytest.raises(TrainingDiverged, match="epoch 0"):
            training.train_model(spec, cfg, remapped)


class TestSplitTrial:
    def test_partition_respects_plan(self):
        _, bench = small_seasons(n=6, cultivars=2)
        plan = make_trial_plan(bench.datasets, seed=11, n_trials=2)
        for trial in range(2):
            train, test = training.split_trial(bench.datasets, plan, trial)
            for ds in bench.datasets:
                cid = ds.cultivar_id
                held = set(plan.test_years(trial, cid))
                assert {s.year for s in test[cid]} == held
                assert {s.year for s in train[cid]} == {s.year for s in ds.seasons} - held
                assert all(s.labeled for s in train[cid] + test[cid])


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    bench = synthgen.gen_benchmark(master_seed=5, season_counts=(4, 6))
    config = training.ExperimentConfig(
        variants=("single", "multi_head", "embed_mult"),
        trials=2, epochs=2, seed=9, **SMALL,
    )
    out = tmp_path_factory.mktemp("run")
    manifest = training.run_experiment(bench.datasets, config, out)
    return bench, config, out, manifest


class TestRunExperiment:
    def test_manifest_inventory(self, tiny_run):
        bench, config, out, manifest = tiny_run
        # per trial: 2 pooled variants + one single model per cultivar
        assert len(manifest["models"]) == 2 * (2 + 2)
        assert manifest["cultivars"] == ["cv00", "cv01"]
        assert len(manifest["plan"]) == 2
        for row in manifest["models"]:
            assert (out / "checkpoints" / row["checkpoint"]).exists()
            log = out / "logs" / row["log"]
            assert len(log.read_text().splitlines()) == config.epochs

    def test_plan_matches_seeded_split(self, tiny_run):
        bench, config, _, manifest = tiny_run
        plan = make_trial_plan(bench.datasets, seed=config.seed, n_trials=config.trials,
                               test_per_trial=config.test_per_trial)
        for trial in range(config.trials):
            for ds in bench.datasets:
                assert tuple(manifest["plan"][trial][ds.name]) == plan.test_years(trial, ds.cultivar_id)

    def test_checkpoints_load_and_carry_norm(self, tiny_run):
        bench, config, out, manifest = tiny_run
        plan = make_trial_plan(bench.datasets, seed=config.seed, n_trials=config.trials,
                               test_per_trial=config.test_per_trial)
        train_by_cid, _ = training.split_trial(bench.datasets, plan, 0)
        for row in manifest["models"]:
            if row["trial"] != 0:
                continue
            spec, params, norm, meta = models.load_checkpoint(out / "checkpoints" / row["checkpoint"])
            assert norm is not None
            assert meta["variant"] == row["variant"]
            if row["variant"] == "single":
                cid = [d.cultivar_id for d in bench.datasets if d.name == row["cultivar"]][0]
                expect = fit_normalization(train_by_cid[cid])
                assert spec.num_cultivars == 1
            else:
                expect = fit_normalization([s for c in sorted(train_by_cid)
                                            for s in train_by_cid[c]])
                assert spec.num_cultivars == 2
                assert meta["cultivar_names"] == ["cv00", "cv01"]
            assert np.array_equal(norm.mean, expect.mean)
            assert np.array_equal(norm.std, expect.std)

    def test_rerun_is_bitwise_identical(self, tiny_run, tmp_path):
        bench, config, out, manifest = tiny_run
        again = training.run_experiment(bench.datasets, config, tmp_path)
        assert [r["checkpoint"] for r in again["models"]] == [r["checkpoint"] for r in manifest["models"]]
        for row in manifest["models"]:
            a = (out / "checkpoints" / row["checkpoint"]).read_bytes()
            b = (tmp_path / "checkpoints" / row["checkpoint"]).read_bytes()
            assert a == b, row["checkpoint"]

    def test_parallel_jobs_match_sequential(self, tiny_run, tmp_path):
        bench, config, out, manifest = tiny_run
        small = training.ExperimentConfig(
            variants=("single", "embed_mult"), trials=1, epochs=2, seed=9, **SMALL)
        seq_dir, par_dir = tmp_path / "seq", tmp_path / "par"
        seq = training.run_experiment(bench.datasets, small, seq_dir, jobs=1)
        par = training.run_experiment(bench.datasets, small, par_dir, jobs=2)
        assert [r["checkpoint"] for r in seq["models"]] == [r["checkpoint"] for r in par["models"]]
        for row in seq["models"]:
            assert ((seq_dir / "checkpoints" / row["checkpoint"]).read_bytes()
                    == (par_dir / "checkpoints" / row["checkpoint"]).read_bytes())

    def test_manifest_json_is_self_describing(self, tiny_run):
        _, config, out, _ = tiny_run
        parsed = json.loads((out / training.MANIFEST_FILE).read_text())
        assert parsed["config"]["epochs"] == config.epochs
        assert parsed["config"]["variants"] == list(config.variants)
