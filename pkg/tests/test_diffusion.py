import os
import tempfile
import unittest
from pathlib import Path

os.environ.setdefault("DIFFKNOCK_LOG_FILE", "0")

import numpy as np

from diffknock.core.errors import ConfigError, DataError, NumericalError
from diffknock.models.matrix import FeatureMatrix
from diffknock.models.schemas import DiffusionTrainConfig
from diffknock.services.diagnostics import ks_statistic
from diffknock.services.diffusion import (
    DiffusionKnockoffGenerator,
    build_cosine_schedule,
    build_linear_schedule,
    denoising_loss,
    forward_noise,
    load_denoiser,
    match_marginals,
    noise_blend,
    reverse_mean,
    sample_knockoffs_raw,
    save_denoiser,
    train_denoiser,
)


def tiny_config(**extra):
    base = dict(layers=1, d_model=8, heads=2, timesteps=20, epochs=3, batch_size=16, lr=1e-3, log_every=1)
    base.update(extra)
    return DiffusionTrainConfig(**base)


def block_data(n=64, p=4, rho=0.6, seed=0):
    rng = np.random.default_rng(seed)
    shared = rng.standard_normal((n, 1))
    return np.sqrt(rho) * shared + np.sqrt(1 - rho) * rng.standard_normal((n, p))


class NoiseScheduleTests(unittest.TestCase):
    def test_cosine_endpoints(self):
        sched = build_cosine_schedule(1000, 0.008)
        self.assertEqual(sched.alpha_bar[0], 1.0)
        self.assertAlmostEqual(float(sched.alpha_bar_unclamped[1000]), 0.0, places=12)

    def test_cosine_midpoint(self):
        sched = build_cosine_schedule(1000, 0.008)
        self.assertAlmostEqual(float(sched.alpha_bar[500]), 0.494, places=3)

    def test_betas_are_clipped_and_alpha_bar_decreases(self):
        sched = build_cosine_schedule(100)
        self.assertTrue(np.all(sched.beta[1:] > 0))
        self.assertTrue(np.all(sched.beta <= 0.999))
        self.assertTrue(np.all(np.diff(sched.alpha_bar) < 0))

    def test_linear_schedule_and_invalid_arguments(self):
        sched = build_linear_schedule(10, 1e-4, 0.02)
        self.assertAlmostEqual(float(sched.beta[1]), 1e-4)
        self.assertAlmostEqual(float(sched.beta[10]), 0.02)
        with self.assertRaises(ConfigError):
            build_cosine_schedule(0)
        with self.assertRaises(ConfigError):
            build_cosine_schedule(10, s=0.0)

    def test_timestep_out_of_range(self):
        sched = build_cosine_schedule(10)
        with self.assertRaises(ConfigError):
            forward_noise(np.zeros((1, 2)), [11], np.zeros((1, 2)), sched)

    def test_snr_accessors(self):
        sched = build_cosine_schedule(100)
        t = np.array([1, 50, 100])
        ab = sched.alpha_bar[t]
        np.testing.assert_allclose(sched.snr(t), ab / (1 - ab))
        np.testing.assert_allclose(sched.log_snr(t), np.log(sched.snr(t)))
        self.assertTrue(np.all(np.diff(sched.snr(np.arange(1, 101))) < 0))
        with self.assertRaises(ConfigError):
            sched.snr(0)


class ForwardReverseTests(unittest.TestCase):
    def test_noise_blend_examples(self):
        x0 = np.array([[2.0]])
        eps = np.array([[1.0]])
        self.assertEqual(float(noise_blend(x0, eps, 1.0)[0, 0]), 2.0)
        self.assertEqual(float(noise_blend(x0, eps, 0.0)[0, 0]), 1.0)
        self.assertAlmostEqual(float(noise_blend(x0, eps, 0.25)[0, 0]), 1.0 + np.sqrt(0.75), places=4)

    def test_reverse_mean_example(self):
        self.assertAlmostEqual(float(reverse_mean(1.0, 0.2, 0.99, 0.01, 0.5)), 1.00220, places=4)

    def test_reverse_step_inverts_forward_step_with_true_noise(self):
        sched = build_cosine_schedule(50)
        rng = np.random.default_rng(1)
        x0 = rng.normal(size=(3, 4))
        eps = rng.normal(size=(3, 4))
        x1 = forward_noise(x0, np.ones(3, dtype=int), eps, sched)
        back = reverse_mean(x1, eps, sched.alpha[1], sched.beta[1], sched.alpha_bar[1])
        np.testing.assert_allclose(back, x0, atol=1e-10)


class MarginalMatchingTests(unittest.TestCase):
    def test_rank_assignment_example(self):
        out = match_marginals(np.array([[1.0], [5.0], [3.0]]), np.array([[0.2], [0.9], [0.1]]))
        np.testing.assert_array_equal(out.values[:, 0], [3.0, 5.0, 1.0])
        self.assertEqual(out.provenance, "marginal-matched")

    def test_sorted_inputs_return_original(self):
        x = np.array([[1.0], [2.0], [4.0]])
        np.testing.assert_array_equal(match_marginals(x, np.array([[-1.0], [0.0], [3.0]])).values, x)

    def test_matched_columns_have_zero_ks(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(50, 3))
        out = match_marginals(x, rng.normal(size=(50, 3)) * 4.0)
        for j in range(3):
            self.assertEqual(ks_statistic(x[:, j], out.values[:, j]), 0.0)


class DenoiserTrainingTests(unittest.TestCase):
    def test_zero_prediction_loss_is_about_one_per_element(self):
        cfg = tiny_config()
        model = train_denoiser(block_data(n=16), cfg.model_copy(update={"epochs": 1}), seed=0)
        net = model.network
        net.head.weight.data = np.zeros_like(net.head.weight.data)
        net.head.bias.data = np.zeros_like(net.head.bias.data)
        rng = np.random.default_rng(7)
        x0 = block_data(n=250, seed=3)
        t = rng.integers(1, cfg.timesteps + 1, size=250)
        eps = rng.standard_normal(x0.shape)
        loss = denoising_loss(net, x0, t, eps, model.schedule).item()
        self.assertAlmostEqual(loss, float(np.mean(eps ** 2)), places=10)
        self.assertLess(abs(loss - 1.0), 0.15)

    def test_same_seed_gives_identical_training(self):
        data = block_data()
        a = train_denoiser(data, tiny_config(), seed=4)
        b = train_denoiser(data, tiny_config(), seed=4)
        self.assertEqual(a.loss_trace, b.loss_trace)
        self.assertEqual(a.params_hash(), b.params_hash())

    def test_patience_stops_early_on_a_prefix_of_the_full_trace(self):
        data = block_data()
        full = train_denoiser(data, tiny_config(epochs=30, lr=1e-12), seed=2)
        early = train_denoiser(data, tiny_config(epochs=30, lr=1e-12, patience=1), seed=2)
        self.assertEqual(len(full.loss_trace), 30)
        self.assertLess(len(early.loss_trace), 30)
        self.assertEqual(early.loss_trace, full.loss_trace[: len(early.loss_trace)])

    def test_empty_or_non_finite_data(self):
        with self.assertRaises(DataError):
            train_denoiser(np.zeros((0, 3)), tiny_config())
        bad = block_data()
        bad[0, 0] = np.nan
        with self.assertRaises(NumericalError):
            train_denoiser(bad, tiny_config())


class SamplingTests(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        cls.data = block_data(n=48, p=3)
        cls.model = train_denoiser(cls.data, tiny_config(epochs=2), seed=1)

    def test_samples_do_not_depend_on_worker_count(self):
        one = sample_knockoffs_raw(self.model, None, 7, seed=9, shard_rows=3, workers=1)
        many = sample_knockoffs_raw(self.model, None, 7, seed=9, shard_rows=3, workers=3)
        np.testing.assert_array_equal(one, many)
        self.assertEqual(one.shape, (7, 3))

    def test_schedule_mismatch_is_rejected(self):
        with self.assertRaises(ConfigError):
            sample_knockoffs_raw(self.model, build_cosine_schedule(21), 2, seed=0)

    def test_checkpoint_round_trip_reproduces_samples(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = save_denoiser(self.model, Path(tmp) / "model.dkck")
            loaded = load_denoiser(path)
        self.assertEqual(loaded.params_hash(), self.model.params_hash())
        np.testing.assert_array_equal(
            sample_knockoffs_raw(loaded, None, 4, seed=2),
            sample_knockoffs_raw(self.model, None, 4, seed=2),
        )

    def test_generator_facade_returns_matched_knockoffs(self):
        X = FeatureMatrix(self.data, ["a", "b", "c"])
        gen = DiffusionKnockoffGenerator(tiny_config(epochs=2), seed=1, model=self.model)
        Xk = gen.generate(X, seed=5)
        self.assertEqual(Xk.shape, X.shape)
        self.assertEqual(Xk.names, ["a", "b", "c"])
        self.assertIn("params_hash", Xk.fingerprint)
        np.testing.assert_array_equal(np.sort(Xk.values, axis=0), np.sort(X.values, axis=0))


if __name__ == "__main__":
    unittest.main()
