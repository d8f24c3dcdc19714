import os
import tempfile
import unittest
from pathlib import Path

os.environ.setdefault("DIFFKNOCK_LOG_FILE", "0")

import numpy as np

from diffknock.core.errors import DataError
from diffknock.models.matrix import FeatureMatrix
from diffknock.utils.checkpoint import content_hash, decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint
from diffknock.utils.io import ingest_csv, read_json, read_response, write_json, write_matrix_csv


class IngestTests(unittest.TestCase):
    def setUp(self):
        self._tmp = tempfile.TemporaryDirectory()
        self.root = Path(self._tmp.name)

    def tearDown(self):
        self._tmp.cleanup()

    def _write(self, text, name="data.csv"):
        path = self.root / name
        path.write_text(text, encoding="utf-8")
        return path

    def test_three_by_two_with_header(self):
        matrix, y, info = ingest_csv(self._write("a,b\n1,2\n3,4\n5,6\n"))
        self.assertEqual(matrix.shape, (3, 2))
        self.assertEqual(matrix.names, ["a", "b"])
        self.assertIsNone(y)
        self.assertEqual(info, {"n": 3, "p": 2, "missing": 0})

    def test_response_column_is_split_off(self):
        matrix, y, _ = ingest_csv(self._write("a,y,b\n1,10,2\n3,20,4\n"), response_column="y")
        self.assertEqual(matrix.names, ["a", "b"])
        np.testing.assert_array_equal(y, [10.0, 20.0])

    def test_non_numeric_cell_names_row_and_column(self):
        with self.assertRaises(DataError) as ctx:
            ingest_csv(self._write("a,b\n1,2\n3,oops\n"))
        self.assertIn("fila 2", ctx.exception.message)
        self.assertIn("'b'", ctx.exception.message)
        self.assertEqual(ctx.exception.exit_code, 3)

    def test_ragged_rows(self):
        with self.assertRaises(DataError):
            ingest_csv(self._write("a,b\n1,2\n3\n"))
        with self.assertRaises(DataError):
            ingest_csv(self._write("a,b\n1,2,3\n4,5\n"))

    def test_duplicate_names(self):
        with self.assertRaises(DataError):
            ingest_csv(self._write("a,a\n1,2\n"))

    def test_missing_values(self):
        path = self._write("a,b\n1,NA\n3,4\n5,8\n")
        with self.assertRaises(DataError):
            ingest_csv(path)
        matrix, _, info = ingest_csv(path, impute="median")
        self.assertEqual(matrix.values[0, 1], 6.0)
        self.assertEqual(info["missing"], 1)

    def test_round_trip(self):
        original = FeatureMatrix(np.random.default_rng(0).normal(size=(5, 3)), ["g1", "g2", "g3"])
        path = write_matrix_csv(original, self.root / "m.csv")
        matrix, _, _ = ingest_csv(path)
        np.testing.assert_allclose(matrix.values, original.values, rtol=1e-15, atol=0)
        self.assertEqual(matrix.names, original.names)

    def test_single_column_response_file(self):
        np.testing.assert_array_equal(read_response(self._write("y\n1\n2\n", "y.csv")), [1.0, 2.0])
        with self.assertRaises(DataError):
            read_response(self._write("a,b\n1,2\n", "two.csv"))

    def test_json_writes_infinity_as_null(self):
        path = write_json({"tau": float("inf"), "values": np.array([1.0, 2.0])}, self.root / "x.json")
        self.assertEqual(read_json(path), {"tau": None, "values": [1.0, 2.0]})


class CheckpointTests(unittest.TestCase):
    def setUp(self):
        self.header = {"architecture": {"kind": "denoiser", "p": 2}, "seed": 3}
        self.arrays = {"w": np.arange(6.0).reshape(2, 3), "b": np.array([0.5, -0.5])}

    def test_round_trip(self):
        header, arrays = decode_checkpoint(encode_checkpoint(self.header, self.arrays))
        self.assertEqual(header["seed"], 3)
        self.assertEqual([m["name"] for m in header["manifest"]], ["w", "b"])
        np.testing.assert_array_equal(arrays["w"], self.arrays["w"])
        np.testing.assert_array_equal(arrays["b"], self.arrays["b"])

    def test_layout_starts_with_magic(self):
        blob = encode_checkpoint(self.header, self.arrays)
        self.assertEqual(blob[:4], b"DKCK")
        self.assertEqual(int.from_bytes(blob[4:6], "little"), 1)

    def test_tampered_payload_is_rejected(self):
        blob = bytearray(encode_checkpoint(self.header, self.arrays))
        blob[-40] ^= 0xFF
        with self.assertRaises(DataError):
            decode_checkpoint(bytes(blob))

    def test_bad_magic_and_truncation(self):
        blob = encode_checkpoint(self.header, self.arrays)
        with self.assertRaises(DataError):
            decode_checkpoint(b"XXXX" + blob[4:])
        with self.assertRaises(DataError):
            decode_checkpoint(blob[:10])

    def test_kind_check_and_content_hash(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = save_checkpoint(Path(tmp) / "m.dkck", self.header, self.arrays)
            load_checkpoint(path, expected_kind="denoiser")
            with self.assertRaises(DataError):
                load_checkpoint(path, expected_kind="autoencoder")
            self.assertEqual(len(content_hash(path)), 64)
            with self.assertRaises(DataError):
                load_checkpoint(Path(tmp) / "missing.dkck")


if __name__ == "__main__":
    unittest.main()
