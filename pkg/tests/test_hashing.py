import numpy as np

from esgvol.hashing import crc64, fnv1a64, hash_index_sign


def fnv1a64_reference(data: bytes) -> int:
    """Independent textbook FNV-1a 64 used as the oracle."""
    h = 14695981039346656037
    for b in data:
        h ^= b
        h = (h * 1099511628211) % 2**64
    return h


class TestFnv1a64:
    def test_published_vectors_via_seed_prefix(self):
        # The package variant hashes (seed as 8 LE bytes || data); frozen
        # values computed with the reference implementation above.
        assert fnv1a64(b"", 0) == 0xA8C7F832281A39C5
        assert fnv1a64(b"a", 0) == 0xE604613A248FF1AC
        assert fnv1a64(b"co2 emissions", 7) == 0x5569047988D3990A
        assert fnv1a64(b"grade3 grade3", 12345) == 0x9E4587626A09144C

    def test_matches_reference_on_random_inputs(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            seed = int(rng.integers(0, 2**32))
            data = bytes(rng.integers(0, 256, size=int(rng.integers(0, 40)), dtype=np.uint8))
            expect = fnv1a64_reference(seed.to_bytes(8, "little") + data)
            assert fnv1a64(data, seed) == expect

    def test_seed_changes_hash(self):
        assert fnv1a64(b"same text", 1) != fnv1a64(b"same text", 2)


class TestIndexSign:
    def test_ranges(self):
        rng = np.random.default_rng(1)
        for _ in range(500):
            data = bytes(rng.integers(0, 256, size=8, dtype=np.uint8))
            idx, sign = hash_index_sign(data, 3, 64)
            assert 0 <= idx < 64
            assert sign in (-1, 1)

    def test_deterministic(self):
        assert hash_index_sign(b"token", 9, 128) == hash_index_sign(b"token", 9, 128)

    def test_signs_roughly_balanced(self):
        signs = [hash_index_sign(f"tok{i}".encode(), 0, 32)[1] for i in range(2000)]
        assert 0.4 < np.mean(np.array(signs) > 0) < 0.6


class TestCrc64:
    def test_check_value(self):
        # CRC-64/XZ check value for the standard "123456789" probe.
        assert crc64(b"123456789") == 0x995DC9BBDF1939FA

    def test_detects_single_byte_flip(self):
        payload = bytes(range(100))
        reference = crc64(payload)
        mutated = bytearray(payload)
        mutated[42] ^= 0x01
        assert crc64(bytes(mutated)) != reference

    def test_incremental_equals_whole(self):
        data = b"abcdefgh" * 17
        assert crc64(data[:40], crc64(b"")) != 0  # smoke: running form usable
        assert crc64(data) == crc64(data[40:], crc64(data[:40]))
