"""
Unit tests for communication accounting, Top-k and the CSR codec
"""

import math
import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
import hypothesis.strategies as st

sys.path.append(str(Path(__file__).parent.parent))

from fedtucker.compression import (CSRBlob, CommLedger, SparseTensor, compression_percentage,
                                   compression_ratio, csr_decode, csr_encode,
                                   message_volume_bits, rank_upper_bound, topk_sparsify,
                                   tucker_bits, tucker_fraction)
from fedtucker.exceptions import (FedTuckerError, InvalidArgumentError, MalformedBlobError,
                                  NonFiniteError, RankError)
from fedtucker.tensor_core import TuckerFactors


class TestTopK:
    """Test magnitude-based sparsification"""

    def test_keep_all(self):
        t = np.arange(1.0, 7.0).reshape(2, 3)
        assert np.array_equal(topk_sparsify(t, 100).to_dense(), t)

    def test_keeps_largest_magnitudes(self):
        out = topk_sparsify(np.array([3.0, -5.0, 1.0, 0.5]), 50).to_dense()
        assert out.tolist() == [3.0, -5.0, 0.0, 0.0]

    def test_ties_prefer_lower_index(self):
        sparse_t = topk_sparsify(np.array([1.0, -1.0, 1.0, 1.0]), 50)
        assert sparse_t.indices.tolist() == [0, 1]

    def test_out_of_range(self):
        with pytest.raises(InvalidArgumentError):
            topk_sparsify(np.ones(4), 0)
        with pytest.raises(InvalidArgumentError):
            topk_sparsify(np.ones(4), 101)

    def test_fortran_linear_indices(self):
        t = np.array([[0.0, 9.0], [0.0, 0.0]])
        assert topk_sparsify(t, 25).indices.tolist() == [2]

    @given(st.integers(min_value=1, max_value=60), st.floats(min_value=0.001, max_value=100.0))
    @settings(max_examples=60, deadline=None)
    def test_kept_count(self, size, k):
        t = np.random.default_rng(size).standard_normal(size)
        expected = max(1, math.ceil(round(k * size / 100.0, 9)))
        assert len(topk_sparsify(t, k).indices) == expected

    def test_tiny_percentage_keeps_one_entry(self):
        t = np.array([[0.5, -2.0], [1.0, 0.25]])
        sparse_t = topk_sparsify(t, 1e-6)
        assert sparse_t.indices.tolist() == [2]
        assert sparse_t.values.tolist() == [-2.0]

    def test_minimal_dropped_mass(self):
        t = np.random.default_rng(0).standard_normal(20)
        kept = topk_sparsify(t, 30).to_dense()
        dropped = np.sum((t - kept) ** 2)
        smallest = np.sort(np.abs(t))[:20 - 6]
        assert dropped == pytest.approx(np.sum(smallest ** 2))


class TestCSR:
    """Test CSR encoding, decoding and the byte layout"""

    def test_zero_matrix(self):
        blob = csr_encode(np.zeros((3, 4)))
        assert blob.nnz == 0
        assert np.array_equal(csr_decode(blob), np.zeros((3, 4)))

    def test_dense_matrix_costs_more_than_raw(self):
        m = np.arange(1.0, 13.0).reshape(3, 4)
        blob = csr_encode(m)
        assert blob.nnz == 12
        assert message_volume_bits(blob) > message_volume_bits(m)

    def test_random_sparse_round_trip(self):
        rng = np.random.default_rng(1)
        m = rng.standard_normal((100, 100)) * (rng.random((100, 100)) < 0.1)
        blob = csr_encode(m)
        assert np.array_equal(csr_decode(blob), m)
        nnz = int(np.count_nonzero(m))
        assert blob.bits == 64 * nnz + 32 * nnz + 32 * 101

    @given(st.lists(st.floats(min_value=-1e6, max_value=1e6), min_size=1, max_size=30))
    @settings(max_examples=50, deadline=None)
    def test_round_trip_bitwise(self, values):
        m = np.array(values)[None, :]
        decoded = csr_decode(csr_encode(m))
        assert np.array_equal(decoded, m + 0.0)

    def test_bytes_round_trip(self):
        m = np.array([[0.0, 1.5, 0.0], [2.0, 0.0, -3.25]])
        blob = csr_encode(m)
        payload = blob.to_bytes()
        assert payload[:4] == b'CSR1'
        restored = CSRBlob.from_bytes(payload)
        assert np.array_equal(csr_decode(restored), m)

    def test_bad_magic(self):
        payload = bytearray(csr_encode(np.eye(2)).to_bytes())
        payload[0:4] = b'XXXX'
        with pytest.raises(MalformedBlobError):
            CSRBlob.from_bytes(bytes(payload))

    def test_truncated_payload(self):
        payload = csr_encode(np.eye(2)).to_bytes()
        with pytest.raises(MalformedBlobError):
            CSRBlob.from_bytes(payload[:-1])

    def test_unsorted_row_rejected(self):
        blob = CSRBlob(indptr=np.array([0, 2], dtype=np.uint32),
                       indices=np.array([1, 0], dtype=np.uint32),
                       data=np.array([1.0, 2.0]), shape=(1, 2))
        with pytest.raises(MalformedBlobError):
            csr_decode(blob)

    def test_bad_row_pointer_rejected(self):
        blob = CSRBlob(indptr=np.array([0, 3], dtype=np.uint32),
                       indices=np.array([0, 1], dtype=np.uint32),
                       data=np.array([1.0, 2.0]), shape=(1, 2))
        with pytest.raises(MalformedBlobError):
            blob.validate()

    def test_non_finite_rejected(self):
        with pytest.raises(NonFiniteError):
            csr_encode(np.array([[np.nan]]))


class TestVolume:
    """Test the bit model"""

    def test_raw_image(self):
        assert message_volume_bits(np.zeros((250, 250))) == 4_000_000

    def test_tucker_message(self):
        assert tucker_bits((250, 250), (40, 40)) == 1_382_400
        f = TuckerFactors(core=np.zeros((2, 3)), factors=[np.eye(5, 2), np.eye(4, 3)])
        assert message_volume_bits(f) == 64 * (6 + 10 + 12)

    def test_sparse_tensor_counted_as_csr(self):
        s = topk_sparsify(np.arange(1.0, 9.0).reshape(2, 4), 50)
        assert isinstance(s, SparseTensor)
        assert message_volume_bits(s) == 64 * 4 + 32 * 4 + 32 * 3

    def test_unknown_payload(self):
        with pytest.raises(TypeError):
            message_volume_bits([1.0, 2.0])

    def test_percentage(self):
        assert compression_percentage(250, 2, 40) == pytest.approx(34.56)
        assert tucker_fraction((250, 250), (40, 40)) == pytest.approx(0.3456)


class TestCompressionRatio:
    """Test the compression ratio and rank bounds"""

    def test_known_ratio(self):
        assert compression_ratio(250, 2, 40) == pytest.approx(62500 / 21600)

    def test_rank_near_n_does_not_compress(self):
        assert compression_ratio(4, 2, 3) < 1

    def test_rank_must_be_below_n(self):
        with pytest.raises(RankError):
            compression_ratio(4, 2, 4)

    def test_known_bounds(self):
        assert rank_upper_bound(250, 2) == (103, 11)
        assert rank_upper_bound(250, 3)[0] == 248

    def test_unsupported_d(self):
        with pytest.raises(RankError):
            rank_upper_bound(10, 4)

    def test_small_n(self):
        with pytest.raises(RankError):
            rank_upper_bound(2, 2)

    @pytest.mark.slow
    @pytest.mark.parametrize('d', [2, 3])
    def test_bound_sweep(self, d):
        for n in range(3, 513):
            ours, dai = rank_upper_bound(n, d)
            for r in range(1, ours + 1):
                assert compression_ratio(n, d, r) > 1, (n, d, r)
            if n >= 5:
                assert ours > dai, (n, d)


class TestCommLedger:
    """Test per-epoch bit accounting"""

    def test_cumulative(self):
        ledger = CommLedger()
        ledger.record(10, 5)
        ledger.record(3, 0)
        assert ledger.cumulative == [15, 18]
        assert ledger.volumes == [15, 3]
        assert ledger.total == 18

    def test_empty_total(self):
        assert CommLedger().total == 0

    def test_negative_rejected(self):
        with pytest.raises(FedTuckerError):
            CommLedger().record(-1, 0)


if __name__ == "__main__":
    pytest.main([__file__, '-v'])
