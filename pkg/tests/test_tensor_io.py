"""
Unit tests for the HATK binary tensor format.
"""

import shutil
import struct
import tempfile
import unittest
from pathlib import Path

import numpy as np

from core.errors import TensorFormatError
from core.tensor_io import MAGIC, VERSION, decode_tensor, encode_tensor, load_tensor, save_tensor


class TestTensorEncoding(unittest.TestCase):
    """Header layout and decoding errors"""

    def test_header_layout(self):
        data = encode_tensor(np.zeros((2, 3), dtype=np.float64))
        self.assertEqual(data[:4], MAGIC)
        self.assertEqual(struct.unpack("<H", data[4:6])[0], VERSION)
        self.assertEqual(data[6], 2)  # f64
        self.assertEqual(data[7], 2)  # rank
        self.assertEqual(struct.unpack("<2Q", data[8:24]), (2, 3))
        self.assertEqual(len(data), 24 + 6 * 8)

    def test_payload_is_row_major_little_endian(self):
        data = encode_tensor(np.array([[1, 2], [3, 4]], dtype=np.int64))
        self.assertEqual(struct.unpack("<4q", data[24:]), (1, 2, 3, 4))

    def test_decode_supported_dtypes(self):
        for array in (
            np.arange(6, dtype=np.float32).reshape(2, 3),
            np.linspace(0, 1, 5),
            np.arange(4, dtype=np.uint8),
            np.array([[True, False], [False, True]]),
        ):
            decoded = decode_tensor(encode_tensor(array))
            self.assertEqual(decoded.dtype, array.dtype)
            np.testing.assert_array_equal(decoded, array)

    def test_big_endian_input(self):
        array = np.arange(3, dtype=">f8")
        decoded = decode_tensor(encode_tensor(array))
        self.assertEqual(decoded.dtype, np.dtype("<f8"))
        np.testing.assert_array_equal(decoded, [0.0, 1.0, 2.0])

    def test_scalar(self):
        decoded = decode_tensor(encode_tensor(np.float64(2.5)))
        self.assertEqual(decoded.shape, ())
        self.assertEqual(float(decoded), 2.5)

    def test_unsupported_dtype(self):
        with self.assertRaises(TensorFormatError):
            encode_tensor(np.zeros(2, dtype=np.complex128))

    def test_truncated_header(self):
        with self.assertRaises(TensorFormatError):
            decode_tensor(b"HATK")

    def test_bad_magic(self):
        data = bytearray(encode_tensor(np.zeros(2)))
        data[:4] = b"NOPE"
        with self.assertRaises(TensorFormatError):
            decode_tensor(bytes(data))

    def test_bad_version(self):
        data = bytearray(encode_tensor(np.zeros(2)))
        data[4:6] = struct.pack("<H", 9)
        with self.assertRaises(TensorFormatError):
            decode_tensor(bytes(data))

    def test_unknown_dtype_code(self):
        data = bytearray(encode_tensor(np.zeros(2)))
        data[6] = 42
        with self.assertRaises(TensorFormatError):
            decode_tensor(bytes(data))

    def test_truncated_dims(self):
        data = encode_tensor(np.zeros((2, 2)))
        with self.assertRaises(TensorFormatError):
            decode_tensor(data[:12])

    def test_payload_size(self):
        data = encode_tensor(np.zeros((2, 2)))
        with self.assertRaises(TensorFormatError):
            decode_tensor(data[:-1])
        with self.assertRaises(TensorFormatError):
            decode_tensor(data + b"\x00")

    def test_oversized_dims(self):
        # 2**62 x 4 wraps to 0 in int64
        data = struct.pack("<4sHBB", MAGIC, VERSION, 1, 2) + struct.pack("<2Q", 2 ** 62, 4)
        with self.assertRaises(TensorFormatError):
            decode_tensor(data)


class TestTensorFiles(unittest.TestCase):
    """save_tensor / load_tensor"""

    def setUp(self):
        self.temp_dir = tempfile.mkdtemp()

    def tearDown(self):
        shutil.rmtree(self.temp_dir)

    def test_save_and_load(self):
        array = np.random.default_rng(0).standard_normal((2, 2, 16, 4))
        path = Path(self.temp_dir) / "nested" / "q.hatk"
        save_tensor(path, array)
        self.assertTrue(path.exists())
        np.testing.assert_array_equal(load_tensor(path), array)


if __name__ == '__main__':
    unittest.main()
