from __future__ import annotations

import json

import numpy as np
import pytest

from braess_routes.elimination import (METHODS, ROUTE, Evaluator, RemovalCandidate,
                                       SolverSettings, candidate_value, evaluate_candidate,
                                       greedy_link_removal, greedy_route_removal,
                                       link_combination_removal, link_route_combination_removal,
                                       route_combination_removal, run_method)
from braess_routes.errors import BudgetExceeded, ConnectivityViolation
from braess_routes.fixtures import classic_diamond, physical_diamond, random_network, two_parallel
from braess_routes.network import Network, ODPair, Route


def test_candidate_value_of_cross_route():
    net = classic_diamond(4000)
    v = candidate_value(net, RemovalCandidate(ROUTE, ("cross",)))
    assert v == pytest.approx(260000 - 320000, rel=1e-5)


def test_candidate_value_connectivity_violation():
    net = two_parallel()
    with pytest.raises(ConnectivityViolation):
        candidate_value(net, RemovalCandidate(ROUTE, ("r1", "r2")))
    cand = evaluate_candidate(net, RemovalCandidate(ROUTE, ("r1", "r2")), Evaluator())
    assert not cand.feasible and cand.value is None


def test_greedy_route_removes_cross_only():
    rep = greedy_route_removal(classic_diamond(4000))
    assert rep.removed_routes == ("cross",)
    assert rep.improvement == pytest.approx(0.1875, abs=1e-6)
    assert not rep.paradox_free and not rep.shortcut


def test_greedy_link_removes_cross_link():
    rep = greedy_link_removal(classic_diamond(4000))
    assert rep.removed_links == ("AB",)
    assert rep.steps[0].removed == ("AB",)


@pytest.mark.parametrize("name", sorted(METHODS))
def test_every_method_on_physical_diamond(name):
    rep = run_method(name, physical_diamond(3500, signalized=True))
    assert "cross" in rep.removed_routes
    assert rep.improvement > 0.1


def test_low_demand_shortcut_is_flagged():
    rep = greedy_route_removal(classic_diamond(100))
    assert rep.paradox_free and rep.shortcut
    assert "shortcut" in rep.verdict


def test_paradox_free_parallel_links():
    for name in METHODS:
        rep = run_method(name, two_parallel(2.0))
        assert rep.paradox_free, name
        assert rep.y_final == rep.y_original


def _two_od_network():
    # two OD pairs share the classic diamond; the second OD only has the cross route
    base = classic_diamond(4000)
    ods = list(base.od_pairs) + [ODPair("od2", "s", "t", 0.0)]
    routes = list(base.routes) + [Route("cross2", "od2", ("sA", "AB", "Bt"))]
    return Network(base.nodes, base.links, ods, routes, dict(base.intersections),
                   dict(base.delays)).validate()


def test_two_od_network_keeps_connectivity():
    net = _two_od_network()
    rep = greedy_route_removal(net)
    assert rep.removed_routes == ("cross",)
    # removing link AB would strand od2, so link methods must not touch it
    rep = greedy_link_removal(net)
    assert rep.paradox_free


def test_route_combination_budget():
    with pytest.raises(BudgetExceeded) as info:
        route_combination_removal(classic_diamond(4000), max_set_size=3,
                                  settings=SolverSettings(budget=3))
    assert info.value.needed == 7
    with pytest.raises(BudgetExceeded):
        link_route_combination_removal(classic_diamond(4000), settings=SolverSettings(budget=2))


def test_combination_methods_pick_best_subset():
    rep = link_combination_removal(classic_diamond(4000), max_set_size=2)
    assert rep.removed_links == ("AB",)
    rep = route_combination_removal(classic_diamond(4000), max_set_size=2)
    assert rep.removed_routes == ("cross",)
    assert len(rep.candidates) == 6


def test_parallel_evaluation_matches_serial():
    net = physical_diamond(3500)
    a = route_combination_removal(net, settings=SolverSettings(workers=1))
    b = route_combination_removal(net, settings=SolverSettings(workers=4))
    assert a.to_dict() == b.to_dict()


def test_evaluator_caches_by_route_set():
    ev = Evaluator()
    net = classic_diamond(4000)
    ev.delay(net)
    ev.delay(classic_diamond(4000))
    assert ev.solves == 1


def test_removal_never_increases_delay_on_random_networks():
    for seed in range(15):
        net = random_network(np.random.default_rng(seed))
        for name in ("greedy-route", "greedy-link"):
            rep = run_method(name, net)
            assert rep.y_final <= rep.y_original * (1 + 1e-9)
            for step in rep.steps:
                assert step.value < 0


def test_report_json_and_summary():
    rep = greedy_route_removal(classic_diamond(4000))
    data = json.loads(rep.to_json())
    assert data["removed_routes"] == ["cross"]
    assert data["paradox_free"] is False
    assert "I_th:       18.75%" in rep.summary()


def test_unknown_method():
    with pytest.raises(ValueError):
        run_method("simulated-annealing", classic_diamond())
