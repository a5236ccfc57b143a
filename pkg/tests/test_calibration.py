from __future__ import annotations

import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from braess_routes.calibration import (CalibrationWarning, ObservationSet, SignalSpec, StopSpec,
                                       Uncontrolled, analytic_queue_delay, calibrate_network,
                                       estimate_capacity, estimate_constant_delay,
                                       estimate_saturation_from_data, expected_red_delay,
                                       expected_red_delay_seconds, fit_bpr, fit_queue_delay,
                                       inherit_parameters, queue_growth, saturation_rate,
                                       throughput, BPRFit)
from braess_routes.delays import BPRDelay, evaluate
from braess_routes.errors import InsufficientData
from braess_routes.fixtures import physical_diamond


def bpr_obs(t0, a, b, cap, flows, link_id="l", noise=None):
    T = np.array([evaluate(BPRDelay(t0, a, b, cap), z) for z in flows])
    if noise is not None:
        T = T + noise
    return ObservationSet(link_id, flows, travel_time=T)


def per_cycle_obs(s, D, flows, link_id="q"):
    per_cycle = throughput(flows, s) * D / 3600.0
    return ObservationSet(link_id, flows, throughput=per_cycle, cycle=D)


# control formulas

def test_saturation_rates():
    assert saturation_rate(SignalSpec(90.0, 30.0, 20)) == pytest.approx(800.0)
    assert saturation_rate(StopSpec(4.0)) == pytest.approx(900.0)
    assert saturation_rate(Uncontrolled(1750.0)) == 1750.0


def test_red_delay_formula():
    assert expected_red_delay_seconds(20.0, 60.0) == pytest.approx(3.5)
    assert expected_red_delay_seconds(0.0, 60.0) == 0.0
    assert expected_red_delay(SignalSpec(60.0, 20.0, 5)) == pytest.approx(3.5 / 3600)


def test_throughput_extra_term_never_exceeds_two():
    s = 1000.0
    z = np.linspace(1.0, 20000.0, 500)
    n = throughput(z, s)
    assert np.all(n <= s + 2.0)
    assert throughput(500.0, s) == 500.0


def test_queue_growth_zero_below_saturation():
    assert queue_growth(500.0, 1000.0, 60.0) == 0.0
    assert queue_growth(2000.0, 1000.0, 60.0) == pytest.approx((2000 - 1001.0) * 60 / 3600)


def test_analytic_queue_delay_is_continuous():
    fn = analytic_queue_delay(SignalSpec(60.0, 20.0, 20))
    assert fn.s == pytest.approx(1200.0)
    assert fn.alpha * fn.s + fn.beta == fn.d0


def test_signal_spec_invariants():
    with pytest.raises(ValueError):
        SignalSpec(60.0, 60.0, 5)
    with pytest.raises(ValueError):
        SignalSpec(60.0, 20.0, 0)
    with pytest.raises(ValueError):
        StopSpec(0.0)


# BPR fitting

@pytest.mark.parametrize("a,b", [(0.15, 4.0), (1.0, 1.0), (0.5, 2.5), (0.05, 7.0)])
def test_fit_bpr_recovers_noiseless_parameters(a, b):
    cap, t0 = 1800.0, 60.0 / 3600
    obs = bpr_obs(t0, a, b, cap, np.linspace(0.0, 3000.0, 15))
    fit = fit_bpr(obs, t0, cap)
    assert fit.a == pytest.approx(a, abs=1e-6)
    assert fit.b == pytest.approx(b, abs=1e-6)


def test_fit_bpr_noise_unbiased():
    # estimator noise: repeated draws average out to the truth
    rng = np.random.default_rng(11)
    cap, t0, a, b = 1500.0, 0.02, 0.3, 3.0
    flows = np.linspace(100.0, 2500.0, 30)
    fits = [fit_bpr(bpr_obs(t0, a, b, cap, flows, noise=rng.normal(0, 2e-4, flows.size)),
                    t0, cap) for _ in range(40)]
    assert np.mean([f.a for f in fits]) == pytest.approx(a, rel=0.05)
    assert np.mean([f.b for f in fits]) == pytest.approx(b, rel=0.05)


def test_fit_bpr_requires_samples_on_both_sides_of_half_capacity():
    with pytest.raises(InsufficientData):
        fit_bpr(bpr_obs(0.01, 0.15, 4, 2000.0, np.linspace(0, 900, 20)), 0.01, 2000.0)
    with pytest.raises(InsufficientData):
        fit_bpr(bpr_obs(0.01, 0.15, 4, 2000.0, np.linspace(0, 3000, 7)), 0.01, 2000.0)


def test_inherit_parameters():
    up = BPRFit("up", 0.2, 3.0, 0.0, 10)
    child = inherit_parameters("down", up)
    assert (child.a, child.b, child.inherited_from) == (0.2, 3.0, "up")
    assert inherit_parameters("next", child).inherited_from == "up"
    with pytest.raises(InsufficientData):
        inherit_parameters("x", None)


# capacity

def test_capacity_max_flow_and_pwl_intersection():
    # triangular fundamental diagram: q = 60 k up to k=30, then 60*30 - 20 (k-30)
    k = np.linspace(2.0, 120.0, 40)
    q = np.where(k < 30, 60 * k, 1800 - 20 * (k - 30))
    obs = ObservationSet("l", q, density=k)
    assert estimate_capacity(obs, "max_flow") == pytest.approx(q.max())
    assert estimate_capacity(obs, "pwl_intersection") == pytest.approx(1800.0, rel=1e-6)


def test_capacity_parallel_branches_fall_back():
    k = np.linspace(1.0, 50.0, 20)
    obs = ObservationSet("l", 40 * k, density=k)
    with pytest.warns(CalibrationWarning):
        assert estimate_capacity(obs, "pwl_intersection") == pytest.approx(2000.0)


# saturation and queue delay

@pytest.mark.parametrize("n,D", [(20, 60.0), (12, 90.0), (30, 120.0)])
def test_saturation_from_per_cycle_counts(n, D):
    s = 3600.0 * n / D
    flows = np.linspace(0.1 * s, 2.0 * s, 25)
    est = estimate_saturation_from_data(per_cycle_obs(s, D, flows))
    assert est == pytest.approx(s, rel=0.02)


def test_saturation_without_breakpoint_warns():
    flows = np.linspace(100.0, 900.0, 10)
    with pytest.warns(CalibrationWarning):
        est = estimate_saturation_from_data(per_cycle_obs(5000.0, 60.0, flows))
    assert est == pytest.approx(900.0)


@settings(max_examples=80, deadline=None)
@given(s=st.floats(100.0, 6000.0), d0=st.floats(0.0, 0.05),
       slope=st.floats(0.0, 1e-2), seed=st.integers(0, 2 ** 16))
def test_fit_queue_delay_continuity(s, d0, slope, seed):
    rng = np.random.default_rng(seed)
    flows = np.sort(rng.uniform(0.0, 2.5 * s, 12))
    delay = np.where(flows < s, d0, d0 + slope * (flows - s)) + rng.normal(0, 1e-4, 12)
    obs = ObservationSet("q", flows, throughput=flows, avg_delay=np.abs(delay))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", CalibrationWarning)
        fn = fit_queue_delay(obs, s, d0)
    assert fn.alpha >= 0
    # both branches meet at s with no floating-point gap
    assert evaluate(fn, fn.s) == fn.d0 + fn.eps * fn.s
    left = np.nextafter(fn.s, 0.0)
    assert evaluate(fn, left) == pytest.approx(fn.d0 + fn.eps * left, abs=1e-12)
    # the stored coefficients satisfy continuity with no rounding gap either
    assert fn.alpha * fn.s + fn.beta == fn.d0
    assert fn.d0 == pytest.approx(d0, rel=1e-9, abs=1e-15)


def test_fit_queue_delay_recovers_slope():
    s, d0, alpha = 1200.0, 0.001, 4e-4
    flows = np.linspace(200.0, 3000.0, 20)
    obs = ObservationSet("q", flows, throughput=flows,
                         avg_delay=np.where(flows < s, d0, d0 + alpha * (flows - s)))
    fn = fit_queue_delay(obs, s, d0)
    assert fn.alpha == pytest.approx(alpha, rel=1e-9)


def test_fit_queue_delay_too_few_points():
    obs = ObservationSet("q", [100.0, 200.0, 1300.0], throughput=[1, 2, 3],
                         avg_delay=[0.001, 0.001, 0.2])
    with pytest.warns(CalibrationWarning):
        fn = fit_queue_delay(obs, 1200.0, 0.001)
    assert fn.alpha == 0.0 and fn.d0 == 0.001
    with pytest.raises(InsufficientData):
        fit_queue_delay(obs, 1200.0, 0.001, strict=True)


def test_constant_delay_estimate():
    obs = ObservationSet("q", [100.0, 200.0, 2000.0], avg_delay=[0.001, 0.003, 0.5],
                         throughput=[1, 2, 3])
    assert estimate_constant_delay(obs, 1000.0) == pytest.approx(0.002)


# whole network

def _synthetic(net, skip=()):
    obs = {}
    for link in net.links:
        if link.is_phantom or link.id in skip:
            continue
        fn = net.delay_for(link.id)
        obs[link.id] = bpr_obs(fn.t0, fn.a, fn.b, fn.cap, np.linspace(0, 3000, 15), link.id)
    return obs


def test_calibrate_network_full_data_fits_everything():
    net = physical_diamond(3000, signalized=True)
    res = calibrate_network(net, _synthetic(net))
    assert res.inherited == 0
    assert res.count("fitted") == 5
    assert res.delays["At"].b == pytest.approx(4.0, abs=1e-6)
    assert res.diagnostics["q.sA.At"]["status"] == "analytic"


def test_calibrate_network_inherits_from_upstream():
    net = physical_diamond(3000)
    res = calibrate_network(net, _synthetic(net, skip=("AB",)))
    assert res.inherited == 1
    assert res.diagnostics["AB"]["inherited_from"] == "sA"
    assert res.inherited_fraction == pytest.approx(0.2)


def test_calibrate_network_no_upstream_keeps_default():
    net = physical_diamond(3000)
    res = calibrate_network(net, _synthetic(net, skip=("sA",)))
    assert res.diagnostics["sA"]["status"] == "default"
