import warnings

import numpy as np
import pytest
from hypothesis import assume, given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from conftest import grid
from demfuse.errors import DegenerateWarning, GeometryError
from demfuse.fusion import (
    WeightPair,
    fuse_by_errors,
    fuse_hem_baseline,
    fuse_plain_average,
    fuse_weighted,
    normalize_pair,
    raw_weights,
    substitute_by_mask,
    weights_inverse_square,
    weights_one_minus_norm,
)

SHAPE = st.tuples(st.integers(1, 6), st.integers(1, 6))


def heights(shape, nodata=True):
    base = st.floats(-500, 500)
    return hnp.arrays(np.float64, shape, elements=st.one_of(base, st.just(np.nan)) if nodata else base)


def errors(shape):
    return hnp.arrays(np.float64, shape, elements=st.one_of(st.floats(0, 50), st.just(np.nan)))


def test_inverse_square_values():
    w = weights_inverse_square(grid([[2.0, 0.0, 1.0, np.nan]]), floor=0.1).values
    assert w[0, :3].tolist() == pytest.approx([0.25, 100.0, 1.0])
    assert np.isnan(w[0, 3])
    with pytest.raises(ValueError):
        weights_inverse_square(grid([[1.0]]), floor=0)


def test_one_minus_norm_values():
    w = weights_one_minus_norm(grid([[0.0, 5.0, 10.0, np.nan]])).values
    assert w[0, :3].tolist() == [1.0, 0.5, 0.0]
    assert np.isnan(w[0, 3])
    with pytest.warns(DegenerateWarning):
        w = weights_one_minus_norm(grid([[3.0, 3.0]]))
    assert w.values.tolist() == [[1.0, 1.0]]
    with pytest.raises(ValueError, match="unknown weighting"):
        raw_weights(grid([[1.0]]), "gaussian")


def test_normalize_pair_rules():
    p = normalize_pair(grid([[1.0, 0.0, 2.0, np.nan, np.nan]]), grid([[3.0, 0.0, np.nan, 4.0, np.nan]]))
    a, b = p.w_a.values[0], p.w_b.values[0]
    assert (a[0], b[0]) == (0.25, 0.75)
    assert (a[1], b[1]) == (0.5, 0.5)
    assert a[2] == 1.0 and np.isnan(b[2])
    assert np.isnan(a[3]) and b[3] == 1.0
    assert np.isnan(a[4]) and np.isnan(b[4])
    with pytest.raises(GeometryError):
        normalize_pair(grid([[1.0]]), grid([[1.0]], xll=2.0))
    with pytest.raises(ValueError):
        normalize_pair(grid([[-1.0]]), grid([[1.0]]))


def test_fuse_weighted_rules():
    d_a = grid([[10.0, 10.0, np.nan, np.nan, 4.0, 4.0, 4.0]])
    d_b = grid([[20.0, np.nan, 7.0, np.nan, 8.0, 8.0, 8.0]])
    w = WeightPair(grid([[0.25, 1.0, np.nan, np.nan, np.nan, 0.9, np.nan]]),
                   grid([[0.75, np.nan, 1.0, np.nan, 0.3, np.nan, np.nan]]))
    out = fuse_weighted(d_a, d_b, w).values[0]
    assert out[0] == 17.5
    assert out[1] == 10.0 and out[2] == 7.0 and np.isnan(out[3])
    # both heights, one weight: that DEM wins; no weights: plain mean
    assert out[4] == 8.0 and out[5] == 4.0 and out[6] == 6.0


def test_plain_average_and_identical_inputs():
    assert fuse_plain_average(grid([[10.0]]), grid([[20.0]])).values[0, 0] == 15.0
    d = grid(np.random.default_rng(0).normal(size=(4, 4)))
    np.testing.assert_array_equal(fuse_plain_average(d, d).values, d.values)
    e = grid(np.random.default_rng(1).uniform(size=(4, 4)))
    np.testing.assert_allclose(fuse_by_errors(d, d, e, e.with_values(e.values[::-1])).values, d.values, rtol=1e-15)


def test_hem_baseline():
    d_a = grid([[0.0, 10.0]])
    d_b = grid([[10.0, 30.0]])
    hem = grid([[0.7, 1.3]])
    np.testing.assert_allclose(fuse_hem_baseline(d_a, d_b, hem, hem).values, [[5.0, 20.0]])
    out = fuse_hem_baseline(d_a, d_b, hem.with_values(2 * hem.values), hem).values
    # weights (1/4, 1) normalize to (0.2, 0.8)
    np.testing.assert_allclose(out, [[8.0, 26.0]])


def test_substitute_by_mask():
    rng = np.random.default_rng(2)
    d_a = grid(rng.normal(size=(4, 4)))
    d_b = grid(rng.normal(size=(4, 4)))
    np.testing.assert_array_equal(substitute_by_mask(d_a, d_b, grid(np.zeros((4, 4)))).values, d_a.values)
    np.testing.assert_array_equal(substitute_by_mask(d_a, d_b, grid(np.ones((4, 4)))).values, d_b.values)
    checker = np.indices((4, 4)).sum(axis=0) % 2
    out = substitute_by_mask(d_a, d_b, grid(checker.astype(float))).values
    np.testing.assert_array_equal(out, np.where(checker == 1, d_b.values, d_a.values))
    with pytest.raises(ValueError):
        substitute_by_mask(d_a, d_b, grid(np.full((4, 4), 2.0)))


@given(SHAPE.flatmap(lambda s: st.tuples(heights(s), heights(s), errors(s), errors(s))),
       st.sampled_from(["inverse-square", "one-minus-norm"]))
def test_convexity_and_weight_sum(data, scheme):
    ha, hb, ea, eb = data
    d_a, d_b = grid(ha), grid(hb)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DegenerateWarning)
        pair = normalize_pair(raw_weights(grid(ea), scheme), raw_weights(grid(eb), scheme))
    both = pair.w_a.valid & pair.w_b.valid
    assert np.all(np.abs(pair.w_a.values[both] + pair.w_b.values[both] - 1) <= 1e-9)
    for w in (pair.w_a, pair.w_b):
        assert np.all((w.values[w.valid] >= 0) & (w.values[w.valid] <= 1))
    fused = fuse_weighted(d_a, d_b, pair).values
    two = d_a.valid & d_b.valid
    lo = np.minimum(ha, hb)[two]
    hi = np.maximum(ha, hb)[two]
    slack = 1e-12 * np.maximum(1.0, np.abs(hi))
    assert np.all(fused[two] >= lo - slack) and np.all(fused[two] <= hi + slack)
    one = d_a.valid ^ d_b.valid
    np.testing.assert_array_equal(fused[one], np.where(d_a.valid, ha, hb)[one])
    assert np.all(np.isnan(fused[~(d_a.valid | d_b.valid)]))


@given(SHAPE.flatmap(lambda s: st.tuples(errors(s), errors(s))), st.floats(1e-3, 1e3))
def test_normalized_weights_scale_invariant(data, c):
    # the identity needs scaling that stays clear of subnormal underflow
    for v in data:
        assume(not np.any((v != 0) & (np.abs(v) * min(c, 1.0) < np.finfo(float).tiny)))
    ra, rb = grid(data[0]), grid(data[1])
    p = normalize_pair(ra, rb)
    q = normalize_pair(ra.with_values(c * ra.values), rb.with_values(c * rb.values))
    np.testing.assert_allclose(q.w_a.values, p.w_a.values, atol=1e-12, equal_nan=True)
    np.testing.assert_allclose(q.w_b.values, p.w_b.values, atol=1e-12, equal_nan=True)


@given(SHAPE.flatmap(lambda s: st.tuples(heights(s), heights(s), errors(s), errors(s))))
def test_swap_symmetry(data):
    ha, hb, ea, eb = data
    pair = normalize_pair(grid(ea), grid(eb))
    ab = fuse_weighted(grid(ha), grid(hb), pair).values
    ba = fuse_weighted(grid(hb), grid(ha), WeightPair(pair.w_b, pair.w_a)).values
    np.testing.assert_array_equal(ab, ba)


@given(SHAPE.flatmap(lambda s: st.tuples(hnp.arrays(np.float64, s, elements=st.floats(0.06, 50)),
                                          hnp.arrays(np.float64, s, elements=st.floats(0.06, 50)))))
def test_lower_error_gets_more_weight(data):
    ea, eb = data
    # shared extremes so both grids are min-max normalized over the same range
    ea = np.column_stack([ea, np.full((ea.shape[0], 2), np.nan)])
    eb = np.column_stack([eb, np.full((eb.shape[0], 2), np.nan)])
    ea[0, -2:] = eb[0, -2:] = (0.0, 60.0)
    for scheme in ("inverse-square", "one-minus-norm"):
        p = normalize_pair(raw_weights(grid(ea), scheme), raw_weights(grid(eb), scheme))
        # strict ordering only beyond rounding distance
        lower = ea < eb * (1 - 1e-9)
        assert np.all(p.w_a.values[lower] > p.w_b.values[lower])
        higher = ea * (1 - 1e-9) > eb
        assert np.all(p.w_a.values[higher] < p.w_b.values[higher])
