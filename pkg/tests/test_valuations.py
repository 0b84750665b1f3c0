import math

import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.optimize import brentq

from dmd.valuations import DomainError, ValuationSpec

valuations = st.one_of(
    st.builds(ValuationSpec, st.just("scaled-log"), st.floats(0.1, 10)),
    st.builds(ValuationSpec, st.just("shifted-log"), st.floats(0.1, 10)),
    st.builds(ValuationSpec, st.just("power"), st.floats(0.1, 10), st.floats(0.05, 0.95)),
)
rates = st.floats(1e-3, 50)


def test_scaled_log_gradient_matches_reference_price():
    assert ValuationSpec("scaled-log", 3.0).grad(0.5) == pytest.approx(6.0)


def test_shifted_log_marginal_value_at_zero():
    v = ValuationSpec("shifted-log", 1.0)
    assert v.grad(0.0) == 1.0
    assert v.grad_at_zero == 1.0
    assert v.eval(0.0) == 0.0


def test_power_grad_inverse_against_root_finder():
    v = ValuationSpec("power", 1.0, 0.5)
    assert v.grad_inverse(1.0) == pytest.approx(0.25, rel=1e-12)
    root = brentq(lambda x: v.grad(x) - 1.0, 1e-6, 10.0, xtol=1e-14)
    assert root == pytest.approx(0.25, rel=1e-10)


def test_zero_behaviour_by_family():
    assert ValuationSpec("scaled-log", 2.0).value_at_zero() == -math.inf
    assert not ValuationSpec("scaled-log", 2.0).finite_at_zero
    assert ValuationSpec("power", 2.0, 0.5).grad(0.0) == math.inf
    with pytest.raises(DomainError):
        ValuationSpec("scaled-log", 1.0).eval(0.0)
    with pytest.raises(DomainError):
        ValuationSpec("shifted-log", 1.0).grad_inverse(2.0)


@pytest.mark.parametrize("args", [("cubic", 1.0, None), ("scaled-log", -1.0, None),
                                  ("power", 1.0, 1.5), ("power", 1.0, None), ("shifted-log", 1.0, 0.5)])
def test_bad_parameters_rejected(args):
    with pytest.raises(ValueError):
        ValuationSpec(*args)


def test_demand_is_zero_above_marginal_value_at_zero():
    v = ValuationSpec("shifted-log", 2.0)
    assert v.demand(3.0) == 0.0
    assert v.demand(1.0) == pytest.approx(1.0)


@given(valuations, rates, rates)
def test_gradient_positive_and_decreasing(v, x1, x2):
    lo, hi = sorted((x1, x2))
    assert v.grad(lo) > 0 and v.grad(hi) > 0
    if hi > lo * (1 + 1e-9):
        assert v.grad(hi) < v.grad(lo)


@given(valuations, rates)
def test_grad_inverse_inverts_grad(v, x):
    assert v.grad_inverse(v.grad(x)) == pytest.approx(x, rel=1e-10)


@given(valuations, st.floats(1e-2, 20))
def test_demand_maximises_surplus(v, price):
    x = v.demand(price)
    surplus = lambda z: (v.eval(z) if z > 0 or v.finite_at_zero else -math.inf) - price * z
    best = surplus(x)
    for z in (x * 0.9, x * 1.1 + 1e-6, x + 0.01):
        assert surplus(z) <= best + 1e-12
