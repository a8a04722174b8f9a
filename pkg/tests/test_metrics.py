"""PSNR and maximum difference."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from xinr import metrics


class TestPsnr:
    def test_identical_inputs_hit_cap(self, rng):
        a = rng.standard_normal((4, 4, 4))
        assert metrics.psnr(a, a, 1.0) == metrics.PSNR_CAP_DB

    def test_uniform_offset_is_twenty_db(self):
        a = np.zeros((8, 8, 8))
        assert metrics.psnr(a, a + 0.1, 1.0) == pytest.approx(20.0, abs=1e-12)

    def test_symmetric(self, rng):
        a = rng.standard_normal((5, 5, 5))
        b = rng.standard_normal((5, 5, 5))
        assert metrics.psnr(a, b, 2.0) == metrics.psnr(b, a, 2.0)

    def test_dim_mismatch_rejected(self):
        with pytest.raises(ValueError):
            metrics.psnr(np.zeros(3), np.zeros(4), 1.0)

    def test_nonpositive_range_rejected(self):
        with pytest.raises(ValueError):
            metrics.psnr(np.zeros(3), np.zeros(3), 0.0)


class TestMaxDifference:
    def test_identical_is_zero(self, rng):
        a = rng.standard_normal((6, 6, 6))
        assert metrics.max_difference(a, a) == 0.0

    def test_single_voxel_offset(self):
        a = np.zeros((4, 4, 4))
        b = a.copy()
        b[1, 2, 3] = 0.5
        assert metrics.max_difference(a, b) == 0.5

    def test_matches_exhaustive_scan(self, rng):
        a = rng.uniform(0, 1, (5, 5, 5))
        b = rng.uniform(0, 1, (5, 5, 5))
        brute = max(abs(float(a[i, j, k]) - float(b[i, j, k]))
                    for i in range(5) for j in range(5) for k in range(5))
        assert metrics.max_difference(a, b) == pytest.approx(brute, abs=0)

    @given(st.integers(0, 2 ** 31 - 1))
    @settings(max_examples=30, deadline=None)
    def test_triangle_inequality(self, seed):
        r = np.random.default_rng(seed)
        a, b, c = r.uniform(0, 1, (3, 4, 4, 4))
        assert metrics.max_difference(a, c) <= (
            metrics.max_difference(a, b) + metrics.max_difference(b, c) + 1e-12)
