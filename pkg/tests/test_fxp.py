import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from afnas.errors import CodeRangeError, ContractError, QuantDomainError
from afnas.fxp import (
    SEARCH_QUANT_PAIRS,
    FxpFormat,
    QuantPair,
    div_round,
    from_code,
    quantize,
    round_shift,
    saturate_code,
    ste_grad,
    ste_mask,
    to_code,
)


def oracle_quantize(x, w, p):
    """Exact rational evaluation of round-half-away-then-clip."""
    fx = Fraction(x)
    scale = 2**p
    mag = math.floor(abs(fx) * scale + Fraction(1, 2))
    q = Fraction(mag if fx >= 0 else -mag, scale)
    lo = -Fraction(2 ** (w - p - 1))
    hi = Fraction(2 ** (w - p - 1)) - 1
    return float(min(max(q, lo), hi))


formats = st.builds(
    lambda w, frac: FxpFormat(w, int(frac * (w - 1))),
    st.integers(2, 32),
    st.floats(0, 1),
)
finite = st.floats(-1e6, 1e6, allow_nan=False, allow_infinity=False)


class TestFormat:
    @pytest.mark.parametrize("w,p", [(1, 0), (33, 4), (8, 8), (8, -1)])
    def test_rejects_bad_fields(self, w, p):
        with pytest.raises(ContractError):
            FxpFormat(w, p)

    def test_literal_range(self):
        f = FxpFormat(8, 4)
        assert (f.lo, f.hi) == (-8.0, 7.0)
        assert (f.code_lo, f.code_hi) == (-128, 112)

    def test_code_saturating_range(self):
        f = FxpFormat(8, 4, saturate_to_code=True)
        assert f.hi == 8.0 - 1 / 16
        assert f.code_hi == 127

    def test_search_pairs(self):
        assert SEARCH_QUANT_PAIRS == ((32, 16), (24, 16), (16, 10), (16, 8), (16, 12), (12, 6), (12, 8))
        qp = QuantPair.of(16, 8)
        assert qp.weights == qp.activations == FxpFormat(16, 8)
        assert qp.total_bits == 32


class TestQuantize:
    def test_zero(self):
        for w, p in SEARCH_QUANT_PAIRS:
            assert quantize(0.0, FxpFormat(w, p)) == 0.0

    def test_hand_values(self):
        assert quantize(0.3, FxpFormat(8, 4)) == 0.3125
        assert quantize(100.0, FxpFormat(4, 0)) == 7.0
        assert quantize(-100.0, FxpFormat(4, 0)) == -8.0

    def test_ties_round_away_from_zero(self):
        f = FxpFormat(8, 0)
        assert quantize(2.5, f) == 3.0
        assert quantize(-2.5, f) == -3.0
        assert quantize(-0.5, f) == -1.0

    def test_negative_zero_normalised(self):
        q = quantize(np.array([-0.01]), FxpFormat(8, 2))
        assert not np.signbit(q[0])

    @pytest.mark.parametrize("bad", [np.nan, np.inf, -np.inf])
    def test_non_finite(self, bad):
        with pytest.raises(QuantDomainError):
            quantize(bad, FxpFormat(16, 8))
        with pytest.raises(QuantDomainError):
            quantize(np.array([0.0, bad]), FxpFormat(16, 8))

    def test_array_matches_scalar(self):
        f = FxpFormat(12, 6)
        xs = np.linspace(-40, 40, 1001)
        assert np.array_equal(quantize(xs, f), [quantize(float(x), f) for x in xs])

    @settings(max_examples=400, deadline=None)
    @given(finite, formats)
    def test_matches_rational_oracle(self, x, f):
        assert quantize(x, f) == oracle_quantize(x, f.width_bits, f.precision_bits)

    @settings(max_examples=300, deadline=None)
    @given(finite, formats)
    def test_idempotent_and_bounded(self, x, f):
        q = quantize(x, f)
        assert quantize(q, f) == q
        assert f.lo <= q <= f.hi

    @settings(max_examples=300, deadline=None)
    @given(finite, finite, formats)
    def test_monotone(self, x, y, f):
        if x > y:
            x, y = y, x
        assert quantize(x, f) <= quantize(y, f)

    @settings(max_examples=300, deadline=None)
    @given(st.floats(-1, 1), formats)
    def test_error_bound_inside_range(self, u, f):
        x = u * f.hi if u >= 0 else -u * f.lo
        assert abs(quantize(x, f) - x) <= 2.0 ** (-f.precision_bits - 1)


class TestCodes:
    def test_hand_values(self):
        f = FxpFormat(8, 4)
        assert to_code(0.3125, f) == 5
        assert to_code(-1.0, f) == -16
        assert from_code(0, f) == 0.0
        assert from_code(0, FxpFormat(32, 16)) == 0.0

    def test_off_grid_rejected(self):
        with pytest.raises(ContractError):
            to_code(0.3, FxpFormat(8, 4))

    def test_range_errors(self):
        f = FxpFormat(8, 4)
        with pytest.raises(CodeRangeError):
            to_code(8.0, f)
        with pytest.raises(CodeRangeError):
            from_code(128, f)
        with pytest.raises(CodeRangeError):
            from_code(np.array([0, -129]), f)

    @settings(max_examples=300, deadline=None)
    @given(finite, formats)
    def test_round_trip(self, x, f):
        q = quantize(x, f)
        c = to_code(q, f)
        assert f.code_min <= c <= f.code_max
        assert from_code(c, f) == q

    def test_array_round_trip_32_bit(self):
        f = FxpFormat(32, 16)
        q = quantize(np.random.default_rng(0).uniform(-40000, 40000, 1000), f)
        c = to_code(q, f)
        assert c.dtype == np.int64
        assert np.array_equal(from_code(c, f), q)


class TestSte:
    def test_examples(self):
        f = FxpFormat(16, 8)
        assert ste_grad(2.5, 0.1, f) == 2.5
        assert ste_grad(2.5, 1e6, f) == 0.0
        assert ste_grad(0.0, 0.3, f) == 0.0

    def test_boundaries_are_saturated(self):
        f = FxpFormat(8, 4)
        assert ste_mask(np.array([f.lo, f.hi, f.lo + 1e-9, f.hi - 1e-9]), f).tolist() == [0, 0, 1, 1]

    def test_broadcast(self):
        f = FxpFormat(8, 4)
        g = ste_grad(np.ones((2, 3)), np.array([0.0, 100.0, -100.0]), f)
        assert g.tolist() == [[1, 0, 0], [1, 0, 0]]


class TestIntegerHelpers:
    @settings(max_examples=300, deadline=None)
    @given(st.integers(-(2**40), 2**40), st.integers(0, 20))
    def test_round_shift_matches_rational(self, v, s):
        want = math.floor(abs(Fraction(v, 2**s)) + Fraction(1, 2)) * (1 if v >= 0 else -1)
        assert int(round_shift(np.array(v, dtype=np.int64), s)) == want
        assert int(round_shift(np.array([v], dtype=object), s)[0]) == want

    def test_round_shift_negative_is_left_shift(self):
        assert int(round_shift(np.array(3), -4)) == 48

    @settings(max_examples=300, deadline=None)
    @given(st.integers(-(10**12), 10**12), st.integers(1, 10**6))
    def test_div_round_matches_rational(self, n, d):
        want = math.floor(abs(Fraction(n, d)) + Fraction(1, 2)) * (1 if n >= 0 else -1)
        assert int(div_round(np.array(n), d)) == want

    def test_saturate(self):
        assert saturate_code(np.array([-9, 0, 9]), -4, 3).tolist() == [-4, 0, 3]
