import os
import tempfile
import unittest
from pathlib import Path

os.environ.setdefault("DIFFKNOCK_LOG_FILE", "0")

import numpy as np

from diffknock.core.errors import ConfigError, DataError
from diffknock.models.matrix import FeatureMatrix
from diffknock.models.schemas import NormalizationSpec, PipelineConfig
from diffknock.services.pipeline import (
    NormalizationParams,
    load_generator,
    normalize,
    run_pipeline,
    run_repeated_selection,
    split_samples,
    stage_seeds,
)
from diffknock.services.selection import knockoff_plus_select
from diffknock.services.statistics import read_statistics
from diffknock.utils.io import read_json, sha256_file, write_matrix_csv, write_vector_csv


def tiny_config(out_dir, **extra):
    raw = {
        "simulation": {"n": 60, "p": 6, "s": 2, "block_size": 3, "amplitude": 5.0, "seed": 1},
        "generator": "autoencoder",
        "autoencoder": {"bottleneck": 2, "epochs": 5, "batch_size": 20},
        "filter": {"hidden": [4, 3], "epochs": 5, "batch_size": 20, "log_every": 5},
        "output_dir": str(out_dir),
        "seed": 3,
    }
    raw.update(extra)
    return PipelineConfig.model_validate(raw)


class NormalizeTests(unittest.TestCase):
    def test_log_then_standardize(self):
        X = FeatureMatrix(np.array([[0.0], [np.e - 1.0]]), ["g"])
        out, params = normalize(X)
        np.testing.assert_allclose(out.values[:, 0], [-1.0, 1.0], atol=1e-12)
        np.testing.assert_allclose(params.mean, [0.5])

    def test_standardized_input_without_log(self):
        rng = np.random.default_rng(0)
        out, _ = normalize(FeatureMatrix(rng.normal(size=(100, 3))), NormalizationSpec(log1p=False))
        self.assertLessEqual(float(np.abs(out.values.mean(axis=0)).max()), 1e-10)

    def test_inverse_round_trip(self):
        rng = np.random.default_rng(1)
        X = FeatureMatrix(rng.uniform(0.0, 50.0, size=(20, 4)))
        out, params = normalize(X)
        restored = NormalizationParams.from_dict(params.to_dict()).invert(out.values)
        np.testing.assert_allclose(restored, X.values, atol=1e-10)

    def test_zero_variance_columns_are_listed(self):
        X = FeatureMatrix(np.array([[1.0, 2.0, 5.0], [3.0, 2.0, 5.0]]), ["a", "b", "c"])
        with self.assertRaises(DataError) as ctx:
            normalize(X)
        self.assertIn("'b'", ctx.exception.message)
        self.assertIn("'c'", ctx.exception.message)
        self.assertEqual(ctx.exception.stage, "normalize")

    def test_log_of_values_below_minus_one(self):
        with self.assertRaises(DataError):
            normalize(FeatureMatrix(np.array([[-2.0], [1.0]])))


class SplitTests(unittest.TestCase):
    def test_sizes_and_disjointness(self):
        screen, train, test = split_samples(100, (0.5, 0.4, 0.1), seed=4)
        self.assertEqual((screen.size, train.size, test.size), (50, 40, 10))
        union = np.concatenate([screen, train, test])
        self.assertEqual(sorted(union.tolist()), list(range(100)))

    def test_seed_controls_split(self):
        a = split_samples(30, seed=1)
        b = split_samples(30, seed=1)
        for left, right in zip(a, b):
            np.testing.assert_array_equal(left, right)

    def test_invalid_split(self):
        with self.assertRaises(DataError):
            split_samples(2)
        with self.assertRaises(ConfigError):
            split_samples(10, (0.5, 0.5, 0.5))

    def test_stage_seeds_are_distinct(self):
        seeds = stage_seeds(0)
        self.assertEqual(len(set(seeds.values())), 4)
        self.assertEqual(seeds, stage_seeds(0))


class RunPipelineTests(unittest.TestCase):
    def test_artifacts_and_idempotent_rerun(self):
        with tempfile.TemporaryDirectory() as tmp:
            cfg = tiny_config(Path(tmp) / "run")
            first = run_pipeline(cfg)
            self.assertFalse(first.skipped)
            for name in ("knockoffs.csv", "statistics.csv", "selection.json", "diagnostics.json",
                         "generator.dkck", "normalization.json", "evaluation.json", "manifest.json"):
                self.assertTrue((first.output_dir / name).is_file(), name)
            second = run_pipeline(cfg)
            self.assertTrue(second.skipped)
            self.assertEqual(second.selection.selected, first.selection.selected)
            self.assertEqual(second.manifest.outputs, first.manifest.outputs)
            generator = load_generator(first.output_dir / "generator.dkck", cfg)
            self.assertEqual(generator.model.normalization["names"], first.report.feature_names)

    def test_forced_rerun_reproduces_every_output(self):
        with tempfile.TemporaryDirectory() as tmp:
            cfg = tiny_config(Path(tmp) / "run")
            first = run_pipeline(cfg)
            again = run_pipeline(cfg, force=True)
            self.assertFalse(again.skipped)
            self.assertEqual(again.manifest.outputs, first.manifest.outputs)
            self.assertEqual(again.manifest.config_hash, first.manifest.config_hash)

    def test_larger_q_gives_superset(self):
        with tempfile.TemporaryDirectory() as tmp:
            result = run_pipeline(tiny_config(Path(tmp) / "run"))
            stats, names = read_statistics(result.output_dir / "statistics.csv")
        strict = set(knockoff_plus_select(stats, 0.2, names).selected)
        loose = set(knockoff_plus_select(stats, 0.999, names).selected)
        self.assertTrue(strict <= loose)

    def test_diffusion_generator_path(self):
        with tempfile.TemporaryDirectory() as tmp:
            cfg = tiny_config(
                Path(tmp) / "run",
                generator="diffusion",
                diffusion={"layers": 1, "d_model": 4, "heads": 1, "timesteps": 5, "epochs": 1, "batch_size": 30},
                statistic="filter",
            )
            result = run_pipeline(cfg)
            self.assertEqual(len(result.report.ks), 6)
            self.assertEqual(max(result.report.ks), 0.0)
            self.assertEqual(read_json(result.output_dir / "selection.json")["method"], "filter")

    def test_knockoffs_ignore_the_response(self):
        rng = np.random.default_rng(9)
        features = FeatureMatrix(rng.uniform(1.0, 100.0, size=(40, 4)), ["a", "b", "c", "d"])
        y = features.values[:, 0] + rng.normal(size=40)
        with tempfile.TemporaryDirectory() as tmp:
            root = Path(tmp)
            write_matrix_csv(features, root / "x.csv")
            write_vector_csv(y, root / "y.csv")
            write_vector_csv(rng.permutation(y), root / "y_perm.csv")
            hashes = []
            for label in ("y", "y_perm"):
                cfg = tiny_config(root / label, simulation=None,
                                  data={"features_path": str(root / "x.csv"), "response_path": str(root / f"{label}.csv")})
                result = run_pipeline(cfg)
                hashes.append(sha256_file(result.output_dir / "knockoffs.csv"))
                self.assertEqual(len(result.manifest.inputs), 2)
        self.assertEqual(hashes[0], hashes[1])

    def test_failure_carries_stage_tag(self):
        with tempfile.TemporaryDirectory() as tmp:
            root = Path(tmp)
            write_matrix_csv(FeatureMatrix(np.array([[1.0, 2.0], [1.0, 3.0], [1.0, 4.0]]), ["flat", "b"]), root / "x.csv")
            cfg = tiny_config(root / "run", simulation=None,
                              data={"features_path": str(root / "x.csv"), "response_column": "b"})
            with self.assertRaises(DataError) as ctx:
                run_pipeline(cfg)
            self.assertEqual(ctx.exception.stage, "normalize")
            self.assertFalse((root / "run" / "manifest.json").exists())

    def test_missing_response_is_a_config_error(self):
        with tempfile.TemporaryDirectory() as tmp:
            root = Path(tmp)
            write_matrix_csv(FeatureMatrix(np.ones((3, 2)) + np.arange(6.0).reshape(3, 2)), root / "x.csv")
            cfg = tiny_config(root / "run", simulation=None, data={"features_path": str(root / "x.csv")})
            with self.assertRaises(ConfigError) as ctx:
                run_pipeline(cfg)
            self.assertEqual(ctx.exception.stage, "data")


class RepeatedSelectionTests(unittest.TestCase):
    def test_frequency_tables_per_statistic(self):
        with tempfile.TemporaryDirectory() as tmp:
            cfg = tiny_config(Path(tmp) / "run", screening={"keep": 4, "repetitions": 2})
            out = run_repeated_selection(cfg)
        self.assertEqual(set(out.frequency), {"gradient", "filter"})
        self.assertEqual(len(out.scores), 2)
        self.assertTrue(all(record["kept"] == 4 for record in out.scores))
        self.assertEqual(len(out.frequency["gradient"]), 6)
        self.assertTrue(all(0.0 <= v <= 100.0 for v in out.frequency["filter"]["percent"]))


if __name__ == "__main__":
    unittest.main()
