import os
import tempfile
import unittest
from pathlib import Path
from unittest import mock

os.environ.setdefault("DIFFKNOCK_LOG_FILE", "0")

from diffknock.core.errors import ConfigError
from diffknock.utils.config_store import (
    config_hash,
    load_config,
    parse_override,
    resolve_raw,
    save_config,
    worker_count,
)

SIM = ["simulation.n=50", "simulation.p=5", "simulation.s=2"]


class ResolveTests(unittest.TestCase):
    def test_defaults_carry_reference_hyperparameters(self):
        cfg = load_config(overrides=SIM)
        self.assertEqual(cfg.diffusion.layers, 6)
        self.assertEqual(cfg.diffusion.d_model, 256)
        self.assertEqual(cfg.filter.hidden, [50, 20])
        self.assertEqual(cfg.filter.epochs, 1000)
        self.assertEqual(cfg.q, 0.2)

    def test_desk_preset(self):
        cfg = load_config(preset="desk", overrides=SIM)
        self.assertEqual((cfg.diffusion.layers, cfg.diffusion.d_model, cfg.diffusion.heads), (3, 64, 4))
        self.assertEqual(cfg.diffusion.timesteps, 250)
        self.assertEqual(cfg.diffusion.batch_size, 64)

    def test_unknown_preset(self):
        with self.assertRaises(ConfigError):
            resolve_raw(preset="huge")

    def test_file_then_overrides(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "run.yaml"
            path.write_text("q: 0.1\nsimulation:\n  n: 80\n  p: 4\n  s: 1\n", encoding="utf-8")
            cfg = load_config(path, overrides=["q=0.3", "filter.hidden=[8, 4]"])
        self.assertEqual(cfg.q, 0.3)
        self.assertEqual(cfg.simulation.n, 80)
        self.assertEqual(cfg.filter.hidden, [8, 4])

    def test_override_values_are_yaml(self):
        self.assertEqual(parse_override("diffusion.epochs=20"), ("diffusion.epochs", 20))
        self.assertEqual(parse_override("filter.clip_norm=null"), ("filter.clip_norm", None))
        self.assertEqual(parse_override("generator=autoencoder"), ("generator", "autoencoder"))
        with self.assertRaises(ConfigError):
            parse_override("diffusion.epochs")

    def test_invalid_values_raise_config_error(self):
        for bad in (["q=1.5"], ["diffusion.heads=7"], ["simulation.s=9"], ["unknown=1"]):
            with self.subTest(override=bad):
                with self.assertRaises(ConfigError) as ctx:
                    load_config(overrides=SIM + bad)
                self.assertEqual(ctx.exception.exit_code, 2)

    def test_exactly_one_data_source(self):
        with self.assertRaises(ConfigError):
            load_config()
        with self.assertRaises(ConfigError):
            load_config(overrides=SIM + ["data.features_path=x.csv"])

    def test_missing_file(self):
        with self.assertRaises(ConfigError):
            load_config("/nonexistent/run.yaml")


class SnapshotTests(unittest.TestCase):
    def test_saved_config_reloads_with_same_hash(self):
        cfg = load_config(preset="desk", overrides=SIM + ["seed=4"])
        with tempfile.TemporaryDirectory() as tmp:
            path = save_config(cfg, Path(tmp) / "cfg.yaml")
            again = load_config(path)
        self.assertEqual(config_hash(again), config_hash(cfg))

    def test_hash_changes_with_content(self):
        a = load_config(overrides=SIM)
        b = load_config(overrides=SIM + ["seed=1"])
        self.assertNotEqual(config_hash(a), config_hash(b))


class WorkerCountTests(unittest.TestCase):
    def test_explicit_value_wins(self):
        with mock.patch.dict(os.environ, {"DIFFKNOCK_WORKERS": "8"}):
            self.assertEqual(worker_count(3), 3)

    def test_environment_value(self):
        with mock.patch.dict(os.environ, {"DIFFKNOCK_WORKERS": "4"}):
            self.assertEqual(worker_count(), 4)
        with mock.patch.dict(os.environ, {"DIFFKNOCK_WORKERS": ""}):
            self.assertEqual(worker_count(), 1)

    def test_invalid_values(self):
        with self.assertRaises(ConfigError):
            worker_count(0)
        with mock.patch.dict(os.environ, {"DIFFKNOCK_WORKERS": "many"}):
            with self.assertRaises(ConfigError):
                worker_count()


if __name__ == "__main__":
    unittest.main()
