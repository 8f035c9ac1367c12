import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from weeklymort.basis import BasisSpec, eval_basis, knots_from_percentiles


def cox_de_boor(i, k, t, x):
    """Textbook recursion, half-open support except at the right end."""
    if k == 0:
        if t[i] <= x < t[i + 1]:
            return 1.0
        # close the last nonempty interval so x == upper boundary is covered
        if x == t[-1] and t[i] < t[i + 1] == t[-1]:
            return 1.0
        return 0.0
    a = 0.0 if t[i + k] == t[i] else (x - t[i]) / (t[i + k] - t[i]) * cox_de_boor(i, k - 1, t, x)
    b = (0.0 if t[i + k + 1] == t[i + 1] else
         (t[i + k + 1] - x) / (t[i + k + 1] - t[i + 1]) * cox_de_boor(i + 1, k - 1, t, x))
    return a + b


SPEC = BasisSpec("cubic-bspline", (3.0, 7.0), (0.0, 10.0), intercept=True)
KNOTS = [0, 0, 0, 0, 3, 7, 10, 10, 10, 10]


def test_cox_de_boor_fixture_at_5():
    # frozen output of the recursion above
    frozen = np.array([0.0, 2 / 49, 45 / 98, 45 / 98, 2 / 49, 0.0])
    oracle = np.array([cox_de_boor(i, 3, KNOTS, 5.0) for i in range(6)])
    np.testing.assert_allclose(oracle, frozen, rtol=1e-15)
    np.testing.assert_allclose(eval_basis(SPEC, [5.0])[0], frozen, rtol=1e-12, atol=1e-15)


@settings(max_examples=50, deadline=None)
@given(st.floats(0.0, 10.0))
def test_bspline_matches_oracle(x):
    oracle = [cox_de_boor(i, 3, KNOTS, x) for i in range(6)]
    np.testing.assert_allclose(eval_basis(SPEC, [x])[0], oracle, atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.floats(0.0, 10.0))
def test_partition_of_unity(x):
    assert eval_basis(SPEC, [x]).sum() == pytest.approx(1.0, abs=1e-12)


def test_column_counts_and_intercept_drop():
    assert eval_basis(SPEC, [1.0]).shape == (1, 6)
    no = BasisSpec("cubic-bspline", (3.0, 7.0), (0.0, 10.0))
    np.testing.assert_array_equal(eval_basis(no, [1.0, 4.0]), eval_basis(SPEC, [1.0, 4.0])[:, 1:])
    nat = BasisSpec("natural-cubic", (0.5, 1.5), (0.0, 4.0), intercept=True)
    B = eval_basis(nat, np.linspace(0, 4, 9))
    assert B.shape == (9, 4) and nat.n_columns == 4
    np.testing.assert_array_equal(B[:, 0], 1.0)


def second_diff(spec, x, h=1e-3):
    return (eval_basis(spec, [x + h]) - 2 * eval_basis(spec, [x]) + eval_basis(spec, [x - h])) / h**2


def test_natural_spline_linear_beyond_boundary():
    nat = BasisSpec("natural-cubic", (0.5, 1.5), (0.0, 4.0), intercept=True)
    scale = np.abs(second_diff(nat, 1.0)).max()
    for x in (4.0 + 1e-3, 5.0, 9.0, -1e-3, -3.0):
        assert np.abs(second_diff(nat, x)).max() <= 1e-6 * scale + 1e-6
    # second derivative tends to zero at the boundary knots
    for x in (4.0, 0.0):
        assert np.abs(second_diff(nat, x, h=1e-5)).max() < 1e-3 * scale


def test_bspline_c2_at_interior_knots():
    for k in SPEC.interior_knots:
        h = 1e-4
        left = second_diff(SPEC, k - 10 * h, h)
        right = second_diff(SPEC, k + 10 * h, h)
        np.testing.assert_allclose(left, right, atol=1e-2)
        d_left = (eval_basis(SPEC, [k]) - eval_basis(SPEC, [k - h])) / h
        d_right = (eval_basis(SPEC, [k + h]) - eval_basis(SPEC, [k])) / h
        np.testing.assert_allclose(d_left, d_right, atol=1e-3)


def test_bspline_extrapolates_linearly():
    B = eval_basis(SPEC, [12.0, 14.0, 16.0])
    np.testing.assert_allclose(B[1] - B[0], B[2] - B[1], atol=1e-12)
    inside = eval_basis(SPEC, [10.0])[0]
    d = (eval_basis(SPEC, [10.0])[0] - eval_basis(SPEC, [10.0 - 1e-6])[0]) / 1e-6
    np.testing.assert_allclose(B[0], inside + 2.0 * d, atol=1e-4)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-5, 15), min_size=2, max_size=12), st.randoms(use_true_random=False))
def test_order_equivariance(points, rnd):
    perm = list(range(len(points)))
    rnd.shuffle(perm)
    for spec in (SPEC, BasisSpec("natural-cubic", (0.5, 1.5), (0.0, 4.0), intercept=True)):
        B = eval_basis(spec, points)
        np.testing.assert_array_equal(eval_basis(spec, np.asarray(points)[perm]), B[perm])


def test_linear_and_identity():
    np.testing.assert_array_equal(eval_basis(BasisSpec("linear"), [2.0, 3.0]), [[2.0], [3.0]])
    np.testing.assert_array_equal(eval_basis(BasisSpec("linear", intercept=True), [2.0]),
                                  [[1.0, 2.0]])
    np.testing.assert_array_equal(eval_basis(BasisSpec("identity"), [4.0]), [[4.0]])


def test_invalid_specs():
    with pytest.raises(ValueError):
        BasisSpec("cubic-bspline", (7.0, 3.0), (0.0, 10.0))
    with pytest.raises(ValueError):
        BasisSpec("cubic-bspline", (3.0,), (5.0, 5.0))
    with pytest.raises(ValueError):
        BasisSpec("cubic-bspline", (11.0,), (0.0, 10.0))
    with pytest.raises(ValueError):
        BasisSpec("quintic")
    with pytest.raises(ValueError):
        eval_basis(SPEC, [np.nan])


def test_type7_knots_by_hand():
    knots, bounds = knots_from_percentiles(np.arange(1, 101))
    # h = 99 * 0.1 = 9.9 -> x[9] + 0.9 (x[10] - x[9]) = 10.9
    assert knots == pytest.approx((10.9, 90.1), abs=1e-12)
    assert bounds == (1.0, 100.0)


def test_symmetric_knots():
    v = np.random.default_rng(0).normal(size=501)
    v = np.r_[v, -v]
    (k1, k2), _ = knots_from_percentiles(v)
    assert k1 == pytest.approx(-k2, abs=1e-12)


def test_constant_input_rejected():
    with pytest.raises(ValueError):
        knots_from_percentiles(np.ones(20))
