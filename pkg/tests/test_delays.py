from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import quad

from braess_routes.delays import (BPRDelay, DelayVector, QueueDelay, beckmann, delay_from_dict,
                                  delay_to_dict, evaluate)

bprs = st.builds(BPRDelay,
                 t0=st.floats(0.001, 1.0), a=st.floats(0.0, 2.0),
                 b=st.floats(0.5, 6.0), cap=st.floats(100.0, 5000.0))


@st.composite
def queues(draw):
    s = draw(st.floats(100.0, 5000.0))
    d0 = draw(st.floats(0.0, 0.1))
    alpha = draw(st.floats(0.0, 1.0 / s))
    return QueueDelay.through_breakpoint(d0=d0, alpha=alpha, s=s)


delays = st.one_of(bprs, queues())


def test_bpr_free_flow_and_capacity_value():
    fn = BPRDelay(t0=0.1, a=0.15, b=4, cap=1800)
    assert evaluate(fn, 0.0) == pytest.approx(0.1)
    assert evaluate(fn, 1800.0) == pytest.approx(0.115)


def test_bpr_from_geometry_uses_free_flow_time():
    fn = BPRDelay.from_geometry(length=1000.0, free_flow_speed=10.0, cap=900.0)
    assert fn.t0 == pytest.approx(100.0 / 3600.0)


def test_queue_constant_below_breakpoint_linear_above():
    fn = QueueDelay.through_breakpoint(d0=0.01, alpha=1e-4, s=1000.0, eps=0.0)
    assert evaluate(fn, 500.0) == pytest.approx(0.01)
    assert evaluate(fn, 2000.0) == pytest.approx(0.01 + 1e-4 * 1000.0)


def test_queue_continuity_enforced():
    with pytest.raises(ValueError):
        QueueDelay(d0=0.01, alpha=1e-4, beta=0.5, s=1000.0)


@pytest.mark.parametrize("fn", [BPRDelay(0.1), QueueDelay.constant(0.01)])
def test_negative_flow_rejected(fn):
    with pytest.raises(ValueError):
        evaluate(fn, -1.0)
    with pytest.raises(ValueError):
        beckmann(fn, np.array([1.0, -0.5]))


def test_bpr_potential_closed_form():
    fn = BPRDelay(t0=0.2, a=0.5, b=2.0, cap=1000.0)
    z = 700.0
    expected = 0.2 * z + 0.2 * 0.5 * z ** 3 / (3 * 1000.0 ** 2)
    assert beckmann(fn, z) == pytest.approx(expected, rel=1e-12)


def test_queue_potential_matches_piecewise_integral():
    fn = QueueDelay.through_breakpoint(d0=0.02, alpha=2e-4, s=800.0, eps=0.0)
    z = 1300.0
    expected = 0.02 * 800.0 + 2e-4 * (z ** 2 - 800.0 ** 2) / 2 + fn.beta * (z - 800.0)
    assert beckmann(fn, z) == pytest.approx(expected, rel=1e-12)


def test_unbounded_saturation_is_constant_plus_eps():
    fn = QueueDelay.constant(0.05)
    assert math.isinf(fn.s)
    assert beckmann(fn, 10.0) == pytest.approx(0.5 + fn.eps * 50.0)


@settings(max_examples=60, deadline=None)
@given(fn=delays, z=st.floats(0.0, 6000.0))
def test_delay_non_negative_and_non_decreasing(fn, z):
    t = evaluate(fn, z)
    assert t >= 0
    assert evaluate(fn, z + 1.0) >= t


@settings(max_examples=60, deadline=None)
@given(fn=delays, z=st.floats(1.0, 6000.0))
def test_potential_matches_quadrature(fn, z):
    breaks = [fn.s] if isinstance(fn, QueueDelay) and 0 < fn.s < z else None
    ref, _ = quad(lambda u: evaluate(fn, u), 0.0, z, points=breaks, epsabs=0, epsrel=1e-11,
                  limit=200)
    assert beckmann(fn, z) == pytest.approx(ref, rel=1e-8)


@settings(max_examples=40, deadline=None)
@given(fn=delays, z1=st.floats(0.0, 6000.0), z2=st.floats(0.0, 6000.0),
       lam=st.floats(0.0, 1.0))
def test_potential_is_convex(fn, z1, z2, lam):
    mid = lam * z1 + (1 - lam) * z2
    lhs = beckmann(fn, mid)
    rhs = lam * beckmann(fn, z1) + (1 - lam) * beckmann(fn, z2)
    assert lhs <= rhs + 1e-9 * max(1.0, abs(rhs))


def test_delay_vector_matches_scalar_evaluation():
    fns = [BPRDelay(0.1, 0.2, 3.0, 900.0), QueueDelay.through_breakpoint(0.01, 1e-4, 500.0),
           QueueDelay.linear(0.0, 0.01)]
    vec = DelayVector(fns)
    z = np.array([300.0, 800.0, 50.0])
    np.testing.assert_allclose(vec.delay(z), [evaluate(f, v) for f, v in zip(fns, z)])
    np.testing.assert_allclose(vec.potential(z), [beckmann(f, v) for f, v in zip(fns, z)])
    batch = np.stack([z, 2 * z])
    assert vec.objective(batch).shape == (2,)
    assert vec.objective(batch)[0] == pytest.approx(vec.objective(z))


@pytest.mark.parametrize("fn", [BPRDelay(0.1, 0.3, 2.5, 1200.0),
                                QueueDelay.through_breakpoint(0.002, 3e-4, 1500.0),
                                QueueDelay.constant(0.01)])
def test_dict_round_trip(fn):
    assert delay_from_dict(delay_to_dict(fn)) == fn


def test_dict_seconds_keys_are_converted():
    fn = delay_from_dict({"type": "bpr", "t0_s": 36.0, "a": 0.15, "b": 4, "cap": 1000})
    assert fn.t0 == pytest.approx(0.01)
    with pytest.raises(ValueError):
        delay_from_dict({"type": "spline"})
