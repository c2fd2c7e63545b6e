from pathlib import Path

import numpy as np

from recobert.hashing import fnv1a64, fnv1a64_file


class TestFnv1a64:
    def test_reference_vectors(self):
        # Classic FNV-1a 64-bit vectors, frozen from an independent implementation.
        assert fnv1a64(b"") == 0xCBF29CE484222325
        assert fnv1a64(b"a") == 0xAF63DC4C8601EC8C
        assert fnv1a64(b"foobar") == 0x85944171F73967E8
        assert fnv1a64(b"hello world") == 0x779A65E7023CD2E7

    def test_stays_in_64_bits(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            data = rng.integers(0, 256, size=int(rng.integers(1, 200))).astype(np.uint8).tobytes()
            assert 0 <= fnv1a64(data) < (1 << 64)

    def test_sensitive_to_single_byte(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            data = bytearray(rng.integers(0, 256, size=32).astype(np.uint8).tobytes())
            flipped = bytearray(data)
            pos = int(rng.integers(len(flipped)))
            flipped[pos] ^= 0x01
            assert fnv1a64(bytes(data)) != fnv1a64(bytes(flipped))

    def test_file_hash_matches_bytes(self, tmp_path: Path):
        payload = b"catalog bytes \x00\xff"
        path = tmp_path / "blob.bin"
        path.write_bytes(payload)
        assert fnv1a64_file(path) == fnv1a64(payload)
