"""Metric machinery checks: correlation properties, MSE calibration against
the direct pixel-variance oracle, strips, metrics round-trip."""

import numpy as np
import pytest

from dvbf import diffcore as dc
from dvbf import evaluation as ev
from dvbf.env import BallConfig, BallEnv, generate_sequences, PendulumEnv, PendulumConfig
from dvbf.formats import read_metrics, write_metrics
from dvbf.model import Model, ModelConfig


def tiny_model(**kw):
    base = dict(image_size=8, latent_dim=8, control_dim=1, enc_hidden=32,
                trans_hidden=16, hyper_hidden=16, base_filters=2, seed=0)
    base.update(kw)
    return Model(ModelConfig(**base))


@pytest.fixture(scope="module")
def pend_batch():
    env = PendulumEnv(PendulumConfig(image_size=8))
    return generate_sequences(env, 12, 12, seed=5)


class TestLatentCorrelation:
    def test_perfect_copy(self):
        rng = np.random.default_rng(0)
        truth = rng.normal(size=(500, 1))
        latents = np.concatenate([rng.normal(size=(500, 3)), truth], axis=1)
        out = ev.latent_correlation(latents, truth)
        assert out[0]["r"] == pytest.approx(1.0)
        assert out[0]["latent"] == 3

    def test_affine_invariance(self):
        rng = np.random.default_rng(1)
        truth = rng.normal(size=(300, 1))
        latents = np.concatenate([rng.normal(size=(300, 2)),
                                  -2.0 * truth + 5.0], axis=1)
        out = ev.latent_correlation(latents, truth)
        assert out[0]["r"] == pytest.approx(1.0)
        assert out[0]["latent"] == 2

    def test_rescaling_latents_changes_nothing(self):
        rng = np.random.default_rng(2)
        latents = rng.normal(size=(400, 6))
        truths = rng.normal(size=(400, 2))
        base = ev.latent_correlation(latents, truths)
        scaled = latents * rng.uniform(0.1, 10, size=6) + rng.normal(size=6)
        again = ev.latent_correlation(scaled, truths)
        for a, b in zip(base, again):
            assert a["latent"] == b["latent"]
            assert a["r"] == pytest.approx(b["r"], rel=1e-9)

    def test_independent_latents_near_zero(self):
        rng = np.random.default_rng(3)
        latents = rng.standard_normal((10_000, 1))
        truth = rng.standard_normal((10_000, 1))
        out = ev.latent_correlation(latents, truth)
        assert out[0]["r"] < 0.05

    def test_zero_variance_latent_scores_zero(self):
        rng = np.random.default_rng(4)
        truth = rng.normal(size=(100, 1))
        latents = np.concatenate([np.full((100, 1), 3.3), truth], axis=1)
        out = ev.latent_correlation(latents, truth)
        assert out[0]["latent"] == 1

    def test_needs_two_rows(self):
        with pytest.raises(ev.EvalError):
            ev.latent_correlation(np.zeros((1, 3)), np.zeros((1, 1)))


class TestNstepMse:
    def test_mean_image_baseline_matches_pixel_variance(self, pend_batch):
        baseline = ev.MeanImageBaseline(pend_batch)
        mse = ev.nstep_mse(baseline, pend_batch, horizons=(1, 5, 10))
        oracle = ev.pixel_variance_oracle(pend_batch, horizons=(1, 5, 10))
        for h in (1, 5, 10):
            assert mse[h]["per_pixel"] == pytest.approx(oracle[h], abs=1e-6)
            n_o = 64
            assert mse[h]["per_image"] == pytest.approx(oracle[h] * n_o, rel=1e-9)

    def test_nonnegative_finite_for_model(self, pend_batch):
        with dc.precision("float64"):
            m = tiny_model()
            mse = ev.nstep_mse(ev.ModelPredictor(m), pend_batch, horizons=(1, 3))
        for h, d in mse.items():
            assert np.isfinite(d["per_pixel"]) and d["per_pixel"] >= 0

    def test_horizon_must_be_below_t(self, pend_batch):
        with pytest.raises(ev.EvalError):
            ev.nstep_mse(ev.MeanImageBaseline(pend_batch), pend_batch,
                         horizons=(12,))


class TestStrips:
    def test_strip_layout_and_determinism(self, tmp_path):
        with dc.precision("float64"):
            env = PendulumEnv(PendulumConfig(image_size=8))
            batch = generate_sequences(env, 2, 40, seed=1)
            m = tiny_model()
            strip1 = ev.trajectory_strip(m, batch.observations[0],
                                         batch.controls[0])
            strip2 = ev.trajectory_strip(m, batch.observations[0],
                                         batch.controls[0])
        assert np.array_equal(strip1, strip2)
        # 20 frames of 8 px with 2 px gaps; 3 rows
        assert strip1.shape == (3 * 8 + 4, 20 * 8 + 19 * 2)
        assert strip1.min() >= 0.0 and strip1.max() <= 1.0

    def test_emit_strips_writes_pgm(self, tmp_path):
        with dc.precision("float64"):
            env = PendulumEnv(PendulumConfig(image_size=8))
            batch = generate_sequences(env, 1, 10, seed=2)
            m = tiny_model()
            path = tmp_path / "s.pgm"
            ev.emit_strips(m, batch, path)
        assert path.read_bytes().startswith(b"P5\n")


class TestEvaluateModel:
    def test_record_fields_and_determinism(self, pend_batch):
        from dvbf import config as cfgmod
        rc = cfgmod.defaults()
        rc.update({"env.image_size": 8, "model.latent_dim": 8,
                   "model.enc_hidden": 32, "model.trans_hidden": 16,
                   "model.base_filters": 2})
        with dc.precision("float64"):
            m = tiny_model()
            r1 = ev.evaluate_model(m, rc, pend_batch, horizons=(1, 3))
            r2 = ev.evaluate_model(m, rc, pend_batch, horizons=(1, 3))
        assert r1.elbo == r2.elbo
        assert set(r1.corr) == {"angle", "velocity"}
        assert "angle" in r1.corr_trig
        assert set(r1.mse) == {1, 3}
        for d in r1.corr.values():
            assert 0.0 <= d["r"] <= 1.0

    def test_metrics_file_round_trip(self, pend_batch, tmp_path):
        from dvbf import config as cfgmod
        rc = cfgmod.defaults()
        rc.update({"env.image_size": 8, "model.latent_dim": 8,
                   "model.enc_hidden": 32, "model.trans_hidden": 16,
                   "model.base_filters": 2})
        with dc.precision("float64"):
            m = tiny_model()
            record = ev.evaluate_model(m, rc, pend_batch, horizons=(1, 3))
        path = tmp_path / "metrics.txt"
        write_metrics(path, record.flat())
        loaded = read_metrics(path)
        assert loaded == record.flat()
        write_metrics(path, loaded)  # emit -> parse -> emit is stable
        assert read_metrics(path) == loaded

    def test_holdout_is_last_fraction(self, pend_batch):
        held = ev.holdout_split(pend_batch, 0.25)
        assert held.n_seqs == 3
        np.testing.assert_array_equal(held.observations,
                                      pend_batch.observations[-3:])
