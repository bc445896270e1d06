"""Accuracy and domain tests for the truncated-normal correction kernel.

The reference for accuracy assertions is mpmath at 40+ digits, evaluated
through the survival function so the reference itself never cancels.  The
frozen grid in the package data was produced by high-precision quadrature
(see scripts/gen_kernel_reference.py), which is an independent route.
"""

import math

import mpmath as mp
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from enrichest import InvalidInterval, truncnorm_correction
from enrichest.oracle import load_kernel_reference

mp.mp.dps = 40


def mpmath_reference(z_lo, z_hi):
    """Closed form in 40-digit arithmetic via the erfc-based tail."""

    def phi(t):
        return mp.exp(-t * t / 2) / mp.sqrt(2 * mp.pi)

    def sf(t):
        return mp.erfc(t / mp.sqrt(2)) / 2

    lo = mp.mpf(z_lo) if math.isfinite(z_lo) else None
    hi = mp.mpf(z_hi) if math.isfinite(z_hi) else None
    num = (phi(hi) if hi is not None else mp.mpf(0)) - (phi(lo) if lo is not None else mp.mpf(0))
    den = (sf(lo) if lo is not None else mp.mpf(1)) - (sf(hi) if hi is not None else mp.mpf(0))
    return float(num / den)


class TestFrozenGrid:
    def test_matches_quadrature_reference(self):
        rows = load_kernel_reference()
        assert len(rows) > 150
        for z_lo, z_hi, ref in rows:
            got = truncnorm_correction(z_lo, z_hi)
            if ref == 0.0:
                assert got == 0.0
            else:
                assert got == pytest.approx(ref, rel=1e-10)

    def test_grid_covers_required_cases(self):
        keys = {(z_lo, z_hi) for z_lo, z_hi, _ in load_kernel_reference()}
        assert (6.0, 8.0) in keys and (-8.0, -6.0) in keys
        assert (-math.inf, math.inf) in keys


class TestSpecialValues:
    def test_unbounded_is_exactly_zero(self):
        assert truncnorm_correction(-math.inf, math.inf) == 0.0

    def test_symmetric_is_exactly_zero(self):
        for c in (0.5, 1.0, 3.7, 8.0):
            assert truncnorm_correction(-c, c) == 0.0

    def test_one_sided_matches_hazard_value(self):
        # the walkthrough intermediate: lower bound -1.0886 standardized
        got = truncnorm_correction(-1.0886, math.inf)
        assert got == pytest.approx(-0.2560, abs=5e-5)
        assert got == pytest.approx(mpmath_reference(-1.0886, math.inf), rel=1e-12)

    def test_rejects_nan_and_misordered(self):
        with pytest.raises(InvalidInterval):
            truncnorm_correction(math.nan, 1.0)
        with pytest.raises(InvalidInterval):
            truncnorm_correction(1.0, 1.0)
        with pytest.raises(InvalidInterval):
            truncnorm_correction(2.0, -2.0)


class TestDomain:
    def test_no_nan_inf_out_to_38(self):
        zs = np.arange(-38.0, 38.5, 1.0)
        pairs = [(a, b) for a in zs for b in zs if a < b]
        vals = truncnorm_correction(
            np.array([a for a, _ in pairs]), np.array([b for _, b in pairs])
        )
        assert np.isfinite(vals).all()
        one_sided = truncnorm_correction(zs, np.inf)
        assert np.isfinite(one_sided).all()
        other_sided = truncnorm_correction(-np.inf, zs)
        assert np.isfinite(other_sided).all()

    def test_extreme_one_sided_magnitude(self):
        # hazard asymptote: roughly z + 1/z deep in the tail
        val = truncnorm_correction(-math.inf, -38.0)
        assert val == pytest.approx(38.0 + 1 / 38.0, abs=1e-3)


class TestProperties:
    @given(
        st.floats(-8, 8),
        st.floats(-8, 8),
    )
    @settings(max_examples=300, deadline=None)
    def test_antisymmetry_and_range(self, a, b):
        z_lo, z_hi = min(a, b), max(a, b)
        if z_hi - z_lo < 1e-9:
            return
        val = truncnorm_correction(z_lo, z_hi)
        assert truncnorm_correction(-z_hi, -z_lo) == -val
        # the correction is minus the truncated mean, so it lies in (-zU, -zL)
        assert -z_hi < val < -z_lo

    @given(
        st.floats(-8, 8),
        st.floats(-8, 8),
    )
    @settings(max_examples=200, deadline=None)
    def test_matches_high_precision(self, a, b):
        z_lo, z_hi = min(a, b), max(a, b)
        if z_hi - z_lo < 1e-9:
            return
        got = truncnorm_correction(z_lo, z_hi)
        ref = mpmath_reference(z_lo, z_hi)
        assert got == pytest.approx(ref, rel=1e-10, abs=1e-13)

    @given(st.floats(-8, 8))
    @settings(max_examples=100, deadline=None)
    def test_one_sided_matches_high_precision(self, z):
        got = truncnorm_correction(z, math.inf)
        assert got == pytest.approx(mpmath_reference(z, math.inf), rel=1e-11)

    @pytest.mark.parametrize("zm", [0.0, 0.3, 2.0, 7.5, -4.0])
    @pytest.mark.parametrize("h", [1e-7, 1e-5, 2e-4, 1e-3])
    def test_narrow_intervals(self, zm, h):
        got = truncnorm_correction(zm - h, zm + h)
        ref = mpmath_reference(zm - h, zm + h)
        assert got == pytest.approx(ref, rel=1e-10, abs=1e-14)

    def test_vectorized_matches_scalar(self):
        z_lo = np.array([-1.0, -math.inf, 2.0, 6.0])
        z_hi = np.array([0.5, 1.0, math.inf, 8.0])
        vec = truncnorm_correction(z_lo, z_hi)
        for i in range(z_lo.size):
            assert vec[i] == truncnorm_correction(float(z_lo[i]), float(z_hi[i]))
