import io
import json
import os
import tempfile
import unittest
from contextlib import redirect_stderr, redirect_stdout
from pathlib import Path
from unittest import mock

os.environ.setdefault("DIFFKNOCK_LOG_FILE", "0")

import numpy as np
import pandas as pd

from diffknock.core.errors import NumericalError
from diffknock.tools import cli

SMALL = [
    "--set", "simulation.n=50",
    "--set", "simulation.p=5",
    "--set", "simulation.s=2",
    "--set", "simulation.block_size=5",
    "--set", "generator=autoencoder",
    "--set", "autoencoder.epochs=3",
    "--set", "autoencoder.bottleneck=2",
    "--set", "filter.hidden=[4]",
    "--set", "filter.epochs=3",
]


def run_cli(*argv):
    out, err = io.StringIO(), io.StringIO()
    with redirect_stdout(out), redirect_stderr(err):
        code = cli.main(list(argv))
    return code, out.getvalue(), err.getvalue()


class CliExitCodeTests(unittest.TestCase):
    def test_show_config_defaults_to_simulation(self):
        code, out, _ = run_cli("show-config", "--set", "simulation.n=40")
        self.assertEqual(code, 0)
        data = json.loads(out)
        self.assertEqual(data["config"]["simulation"]["n"], 40)
        self.assertEqual(len(data["hash"]), 64)

    def test_invalid_config_exits_with_two(self):
        code, _, err = run_cli("show-config", "--set", "q=2")
        self.assertEqual(code, 2)
        self.assertIn("Error [config]", err)

    def test_missing_statistics_file_exits_with_three(self):
        code, _, err = run_cli("select", "--stats", "/nonexistent/w.csv")
        self.assertEqual(code, 3)
        self.assertIn("Error [selection]", err)

    def test_numerical_failure_exits_with_four(self):
        with mock.patch.object(cli, "run_pipeline", side_effect=NumericalError("pérdida no finita", stage="generator")):
            code, _, err = run_cli("run")
        self.assertEqual(code, 4)
        self.assertIn("Error [generator]", err)

    def test_unknown_log_file(self):
        code, _, _ = run_cli("logs", "--file", "../etc.log")
        self.assertEqual(code, 3)


class CliSelectTests(unittest.TestCase):
    def test_select_reads_statistics_csv(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "w.csv"
            pd.DataFrame({"feature": ["a", "b", "c", "d"], "W": [3.0, 2.0, -1.0, 0.5], "method": "gradient"}).to_csv(path, index=False)
            code, out, _ = run_cli("select", "--stats", str(path), "--q", "0.5", "--out", str(Path(tmp) / "sel.json"))
            saved = json.loads((Path(tmp) / "sel.json").read_text(encoding="utf-8"))
        self.assertEqual(code, 0)
        selection = json.loads(out)["selection"]
        self.assertEqual(selection["selected_names"], ["a", "b"])
        self.assertEqual(selection["tau"], 2.0)
        self.assertEqual(saved["selected"], [0, 1])


class CliStagesTests(unittest.TestCase):
    def test_file_based_stages_chain(self):
        with tempfile.TemporaryDirectory() as tmp:
            root = Path(tmp)
            code, out, _ = run_cli("simulate", "--out", str(root), "--amplitude", "4", *SMALL)
            self.assertEqual(code, 0)
            self.assertEqual(json.loads(out)["p"], 5)
            features = str(root / "features.csv")

            self.assertEqual(run_cli("train-generator", "--features", features,
                                     "--out", str(root / "gen.dkck"), *SMALL)[0], 0)
            self.assertEqual(run_cli("gen-knockoffs", "--features", features, "--checkpoint", str(root / "gen.dkck"),
                                     "--out", str(root / "knockoffs.csv"), *SMALL)[0], 0)
            code, out, _ = run_cli("stats", "--features", features, "--knockoffs", str(root / "knockoffs.csv"),
                                   "--response", str(root / "response.csv"), "--method", "both",
                                   "--out", str(root / "w.csv"), *SMALL)
            self.assertEqual(code, 0)
            self.assertIn("agreement", json.loads(out))
            self.assertTrue((root / "w_gradient.csv").is_file())
            self.assertTrue((root / "w_filter.csv").is_file())

            code, out, _ = run_cli("diagnose", "--features", features, "--knockoffs", str(root / "knockoffs.csv"),
                                   "--out", str(root / "diag.json"), "--csv", str(root / "diag.csv"), *SMALL)
            self.assertEqual(code, 0)
            self.assertLessEqual(json.loads(out)["delta_hat"], 0.1)

            code, out, _ = run_cli("screen", "--features", features, "--response", str(root / "response.csv"),
                                   "--keep", "3", *SMALL)
            self.assertEqual(code, 0)
            self.assertEqual(len(json.loads(out)["keep"]), 3)

            knockoffs = pd.read_csv(root / "knockoffs.csv")
            self.assertEqual(knockoffs.shape, (50, 5))
            self.assertTrue(np.isfinite(knockoffs.to_numpy()).all())

    def test_knockoff_shape_mismatch(self):
        with tempfile.TemporaryDirectory() as tmp:
            root = Path(tmp)
            pd.DataFrame({"a": [1.0, 2.0, 3.0], "b": [2.0, 5.0, 1.0]}).to_csv(root / "x.csv", index=False)
            pd.DataFrame({"a": [1.0, 2.0]}).to_csv(root / "k.csv", index=False)
            code, _, err = run_cli("diagnose", "--features", str(root / "x.csv"), "--knockoffs", str(root / "k.csv"),
                                   "--out", str(root / "d.json"))
        self.assertEqual(code, 3)
        self.assertIn("Error [knockoffs]", err)


if __name__ == "__main__":
    unittest.main()
