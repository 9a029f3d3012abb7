import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ar2vp.r2vpc import (CompensationConfig, coefficient, compensate, compensate_backward, flatten,
                         similarity_ratio)


def textbook_pearson(x, y):
    n = len(x)
    sx, sy = sum(x), sum(y)
    sxy = sum(a * b for a, b in zip(x, y))
    sxx = sum(a * a for a in x)
    syy = sum(b * b for b in y)
    return (n * sxy - sx * sy) / math.sqrt((n * sxx - sx ** 2) * (n * syy - sy ** 2))


def test_flatten_order(rng):
    assert flatten(np.array([[[7.0]]])).tolist() == [7.0]
    assert flatten(np.array([[[1.0]], [[2.0]]])).tolist() == [1.0, 2.0]
    m = rng.normal(size=(2, 2, 2))
    flat = flatten(m)
    for r in range(2):
        for c in range(2):
            for k in range(2):
                assert flat[(r * 2 + c) * 2 + k] == m[r, c, k]


def test_pearson_examples():
    v = np.array([1.0, 5.0, 2.0, 8.0])
    assert math.isclose(similarity_ratio(v, v), 1.0)
    assert math.isclose(similarity_ratio(v, 3.0 - v), -1.0)
    want = textbook_pearson([1, 2, 3, 4], [2, 4, 5, 4])
    assert abs(similarity_ratio([1, 2, 3, 4], [2, 4, 5, 4]) - want) < 1e-12
    assert abs(want - 3.5 / math.sqrt(5 * 4.75)) < 1e-12  # hand-evaluated deviations


def test_pearson_constant_and_errors():
    assert similarity_ratio([1.0, 1.0, 1.0], [1.0, 2.0, 3.0]) == 0.0
    with pytest.raises(ValueError):
        similarity_ratio([1.0, 2.0], [1.0, 2.0, 3.0])
    with pytest.raises(ValueError):
        similarity_ratio([1.0], [2.0])


def test_compensate_gate_boundary(rng):
    cfg = CompensationConfig(0.5)
    veh, rsu = rng.normal(size=(2, 2, 3)), rng.normal(size=(2, 2, 3))
    np.testing.assert_array_equal(compensate(veh, rsu, 0.5, cfg), veh)
    np.testing.assert_array_equal(compensate(veh, rsu, -0.5, cfg), veh + rsu)


def test_compensate_scalar_loop(rng):
    cfg = CompensationConfig(0.8)
    veh, rsu = rng.normal(size=(2, 2, 2)), rng.normal(size=(2, 2, 2))
    assert math.isclose(coefficient(0.3, cfg), 0.5)
    out = compensate(veh, rsu, 0.3, cfg)
    for idx in np.ndindex(veh.shape):
        assert abs(out[idx] - (veh[idx] + 0.5 * rsu[idx])) < 1e-15


def test_config_and_shape_errors():
    for bad in (1.5, -2.0, float("nan")):
        with pytest.raises(ValueError):
            CompensationConfig(bad)
    with pytest.raises(ValueError):
        compensate(np.ones((1, 1, 2)), np.ones((1, 2, 2)), 0.0, CompensationConfig())


@given(st.floats(-1, 1), st.floats(-1, 1))
def test_coefficient_non_negative(lam, r):
    assert coefficient(r, CompensationConfig(lam)) >= 0.0


@given(st.lists(st.floats(-10, 10), min_size=2, max_size=20), st.data())
def test_pearson_bounded_and_symmetric(x, data):
    y = data.draw(st.lists(st.floats(-10, 10), min_size=len(x), max_size=len(x)))
    r = similarity_ratio(x, y)
    assert -1.0 <= r <= 1.0
    assert math.isclose(r, similarity_ratio(y, x), abs_tol=1e-12)


def test_compensate_backward(rng):
    cfg = CompensationConfig(0.8)
    up = rng.normal(size=(2, 2, 2))
    dv, dr = compensate_backward(up, 0.3, cfg)
    np.testing.assert_array_equal(dv, up)
    np.testing.assert_allclose(dr, 0.5 * up)
    _, dr = compensate_backward(up, 0.9, cfg)
    assert not dr.any()
