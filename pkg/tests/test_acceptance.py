"""Acceptance criteria, one test per criterion.

Each test records a PASS/FAIL line that is printed in the terminal
summary, so ``pytest tests/test_acceptance.py`` doubles as a report.
"""

from __future__ import annotations

import time
import warnings

import numpy as np
import pytest
from scipy.integrate import quad

from braess_routes import pipeline
from braess_routes.calibration import (CalibrationWarning, ObservationSet, SignalSpec,
                                       estimate_constant_delay, estimate_saturation_from_data,
                                       expected_red_delay_seconds, fit_bpr, fit_queue_delay,
                                       saturation_rate, throughput)
from braess_routes.cli import main
from braess_routes.delays import BPRDelay, QueueDelay, beckmann, evaluate
from braess_routes.elimination import (METHODS, ROUTE, RemovalCandidate, candidate_value,
                                       greedy_route_removal, run_method)
from braess_routes.equilibrium import build_problem, solve, solve_network, wardrop_residual
from braess_routes.fixtures import classic_diamond, physical_diamond, random_network
from braess_routes.mesosim import SimConfig, generate_observations

from criteria import criterion
from oracles import diamond_threshold_analytic, grid_minimum


def test_c1_diamond_reproduction():
    with criterion("C1", "diamond reproduction") as notes:
        start = time.perf_counter()
        with_cross = solve_network(classic_diamond(4000.0))
        without = solve_network(classic_diamond(4000.0, with_cross=False))
        rep = greedy_route_removal(classic_diamond(4000.0))
        elapsed = time.perf_counter() - start
        assert with_cross.delay_per_vehicle == pytest.approx(80.0, rel=1e-3)
        assert without.delay_per_vehicle == pytest.approx(65.0, rel=1e-3)
        assert rep.removed_routes == ("cross",)
        assert abs(100 * rep.improvement - 18.75) <= 0.1
        assert elapsed < 1.0
        notes.append(f"80/65 per vehicle, I_th={100 * rep.improvement:.3f}%, {elapsed:.3f} s")


def test_c2_method_agreement():
    with criterion("C2", "elimination methods agree") as notes:
        start = time.perf_counter()
        finals = {name: run_method(name, classic_diamond(4000.0)).y_final
                  for name in sorted(METHODS)}
        elapsed = time.perf_counter() - start
        ref = finals["greedy-route"]
        for name, y in finals.items():
            assert y == pytest.approx(ref, rel=1e-4), name
        assert elapsed < 10.0
        notes.append(f"{len(finals)} methods at Y={ref:.6g}, {elapsed:.2f} s")


def _cross_value(demand: float) -> float:
    return candidate_value(classic_diamond(demand), RemovalCandidate(ROUTE, ("cross",)))


def test_c3_paradox_free_below_threshold():
    with criterion("C3", "paradox-free low demand") as notes:
        lo, hi = 100.0, 4000.0
        assert _cross_value(lo) > 0 > _cross_value(hi)
        while hi - lo > 1e-3:
            mid = 0.5 * (lo + hi)
            if _cross_value(mid) > 0:
                lo = mid
            else:
                hi = mid
        threshold = 0.5 * (lo + hi)
        assert threshold == pytest.approx(diamond_threshold_analytic(), rel=1e-6)
        for demand in (500.0, 1500.0, 2500.0, 0.99 * threshold):
            for name in sorted(METHODS):
                rep = run_method(name, classic_diamond(demand))
                assert rep.paradox_free and not rep.steps, (name, demand)
                assert rep.removed_routes == () and rep.removed_links == ()
        notes.append(f"threshold {threshold:.4f} by bisection")


def test_c4_wardrop_property_suite():
    with criterion("C4", "Wardrop property suite") as notes:
        start = time.perf_counter()
        rng = np.random.default_rng(2024)
        worst = 0.0
        for _ in range(50):
            net = random_network(rng, max_links=10, max_routes=6, max_ods=3)
            p = build_problem(net, tolerance=1e-6)
            eq = solve(p)
            assert eq.converged
            res = max(wardrop_residual(eq, p, relative=True).values())
            worst = max(worst, res)
            assert res <= 1e-4
            assert np.all(eq.route_flows >= 0)
            for k, d in enumerate(p.demands):
                assert eq.route_flows[p.od_routes(k)].sum() == pytest.approx(d, rel=1e-12)
            h = np.array(eq.objective_history)
            assert np.all(np.diff(h) <= 1e-12 * np.abs(h[:-1]) + 1e-12)
        elapsed = time.perf_counter() - start
        assert elapsed < 30.0
        notes.append(f"worst residual {worst:.2e}, {elapsed:.2f} s")


def test_c5_brute_force_oracle():
    with criterion("C5", "brute-force grid oracle") as notes:
        rng = np.random.default_rng(77)
        worst = -np.inf
        for _ in range(20):
            net = random_network(rng, max_routes=3, max_ods=1)
            p = build_problem(net)
            obj = p.objective(solve(p).route_flows)
            best = grid_minimum(net, step=1e-3)
            worst = max(worst, (obj - best) / abs(obj))
            assert best >= obj - 1e-4 * abs(obj)
        notes.append(f"largest solver excess over grid {worst:.1e} relative")


def _random_delay(rng):
    if rng.random() < 0.5:
        return BPRDelay(t0=rng.uniform(1e-3, 1.0), a=rng.uniform(0.0, 2.0),
                        b=rng.uniform(0.5, 6.0), cap=rng.uniform(100.0, 5000.0))
    s = rng.uniform(100.0, 5000.0)
    return QueueDelay.through_breakpoint(d0=rng.uniform(0.0, 0.1),
                                         alpha=rng.uniform(0.0, 1.0 / s), s=s)


def test_c6_beckmann_consistency():
    with criterion("C6", "Beckmann consistency") as notes:
        rng = np.random.default_rng(6)
        worst_q = worst_d = 0.0
        for _ in range(100):
            fn = _random_delay(rng)
            z = rng.uniform(1.0, 8000.0)
            points = [fn.s] if isinstance(fn, QueueDelay) and fn.s < z else None
            ref, _ = quad(lambda x: float(evaluate(fn, x)), 0.0, z, points=points,
                          epsabs=0.0, epsrel=1e-12, limit=200)
            err = abs(float(beckmann(fn, z)) - ref) / abs(ref)
            worst_q = max(worst_q, err)
            assert err <= 1e-6
            if isinstance(fn, QueueDelay) and abs(z - fn.s) < 1.0:
                z = fn.s + 2.0
            h = 1e-3 * max(z, 1.0)
            if isinstance(fn, QueueDelay):
                h = min(h, 0.5 * abs(z - fn.s))
            num = (float(beckmann(fn, z + h)) - float(beckmann(fn, z - h))) / (2 * h)
            err = abs(num - float(evaluate(fn, z))) / abs(float(evaluate(fn, z)))
            worst_d = max(worst_d, err)
            assert err <= 1e-5
        notes.append(f"quadrature {worst_q:.1e}, central difference {worst_d:.1e}")


def test_c7_calibration_round_trips():
    with criterion("C7", "calibration round-trips") as notes:
        rng = np.random.default_rng(7)
        # (a) noiseless BPR
        for _ in range(10):
            a, b = rng.uniform(0.05, 2.0), rng.uniform(1.0, 6.0)
            cap, t0 = rng.uniform(500.0, 3000.0), rng.uniform(0.005, 0.05)
            flows = np.linspace(0.0, 2.0 * cap, 15)
            obs = ObservationSet("l", flows, travel_time=[evaluate(BPRDelay(t0, a, b, cap), z)
                                                          for z in flows])
            fit = fit_bpr(obs, t0, cap)
            assert abs(fit.a - a) <= 1e-6 and abs(fit.b - b) <= 1e-6
        # (b) saturation from per-cycle throughput data
        for n, D in ((20, 60.0), (12, 90.0), (45, 120.0), (8, 40.0)):
            s = 3600.0 * n / D
            flows = np.linspace(0.1 * s, 2.0 * s, 25)
            obs = ObservationSet("q", flows, throughput=throughput(flows, s) * D / 3600.0, cycle=D)
            assert estimate_saturation_from_data(obs) == pytest.approx(s, rel=0.02)
        # (c) constant delay from simulated Poisson arrivals
        d0_notes = []
        for spec in (SignalSpec(60.0, 20.0, 20), SignalSpec(90.0, 30.0, 30),
                     SignalSpec(120.0, 50.0, 40)):
            net = physical_diamond(1000.0, signalized=True, signal=spec)
            s = saturation_rate(spec)
            flows = np.linspace(0.1 * s, 0.8 * s, 8)
            obs = generate_observations(net, "q.sA.At", flows, SimConfig(injection="poisson"))
            d0 = estimate_constant_delay(obs, s) * 3600
            expected = expected_red_delay_seconds(spec.L_red, spec.D)
            d0_notes.append(f"{d0:.2f}/{expected:.2f}s")
            assert d0 == pytest.approx(expected, rel=0.2)
        # (d) exact continuity of fitted queue delays
        for _ in range(200):
            s = rng.uniform(100.0, 6000.0)
            d0 = rng.uniform(0.0, 0.05)
            slope = rng.uniform(0.0, 1e-2)
            flows = np.sort(rng.uniform(0.0, 2.5 * s, 12))
            delay = np.abs(np.where(flows < s, d0, d0 + slope * (flows - s))
                           + rng.normal(0.0, 1e-4, 12))
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", CalibrationWarning)
                fn = fit_queue_delay(ObservationSet("q", flows, throughput=flows,
                                                    avg_delay=delay), s, d0)
            assert fn.alpha * fn.s + fn.beta == fn.d0
            assert evaluate(fn, fn.s) == fn.d0 + fn.eps * fn.s
        notes.append("d0 sim/formula " + ", ".join(d0_notes))


def test_c8_simulation_sign_check():
    with criterion("C8", "simulation sign check") as notes:
        checked = 0
        worst = 0.0
        for signalized in (False, True):
            for demand in (1000.0, 1500.0, 2000.0, 2300.0, 2500.0, 3000.0, 3500.0, 4000.0,
                           4500.0):
                det = pipeline.detect(physical_diamond(demand, signalized=signalized))
                for seed in (0, 1, 2):
                    row = pipeline.validate(det, SimConfig(seed=seed))
                    assert row.spillback is None
                    if det.improvement > 0.01:
                        checked += 1
                        assert row.i_sim > 0, (signalized, demand, seed)
                    worst = max(worst, row.network_delay_diff)
                    assert row.network_delay_diff <= 0.15, (signalized, demand, seed)
        notes.append(f"{checked} paradox rows with I_sim > 0, max Y diff {100 * worst:.1f}%")


def _tree(root):
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*"))
            if p.is_file()}


def test_c9_determinism(tmp_path):
    with criterion("C9", "byte-identical reruns") as notes:
        assert main(["fixture", "signalized-diamond", "--demand", "3500",
                     "--out", str(tmp_path)]) == 0
        net = str(tmp_path / "network.json")
        trees = []
        for k in range(2):
            out = tmp_path / f"run{k}"
            assert main(["detect", "--network", net, "--out", str(out), "--seed", "11"]) == 0
            assert main(["validate", "--network", net, "--out", str(out), "--seed", "11"]) == 0
            trees.append(_tree(out))
        assert trees[0] == trees[1]
        notes.append(f"{len(trees[0])} output files identical")
