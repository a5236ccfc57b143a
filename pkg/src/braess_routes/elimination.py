"""Valuing link/route removals and the five elimination procedures.

The value of a removal is the change in total equilibrium delay it causes;
negative values mark Braess links or routes.  Every procedure keeps at
least one route per OD pair.
"""

from __future__ import annotations

import itertools
import json
import math
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

from .equilibrium import DEFAULT_TOL, EquilibriumResult, build_problem, solve
from .errors import BudgetExceeded, ConnectivityViolation
from .network import Network, remove_links, remove_routes

LINK = "link"
ROUTE = "route"
LINK_SET = "link_set"
ROUTE_SET = "route_set"
LINK_ROUTE = "link_route_config"


@dataclass(frozen=True)
class SolverSettings:
    tolerance: float = DEFAULT_TOL
    max_iters: int = 2000
    method: str = "pairwise"
    budget: int = 10_000
    workers: int = 1
    # a removal must lower Y by more than this fraction of Y to be accepted
    value_tol: float = 1e-6


@dataclass(frozen=True)
class RemovalCandidate:
    kind: str
    ids: tuple
    value: Optional[float] = None
    feasible: bool = True

    def to_dict(self) -> dict:
        return {"kind": self.kind, "ids": list(self.ids), "value": self.value,
                "feasible": self.feasible}


@dataclass(frozen=True)
class RemovalStep:
    kind: str
    removed: tuple
    removed_routes: tuple
    value: float
    y_before: float
    y_after: float

    def to_dict(self) -> dict:
        return {"kind": self.kind, "removed": list(self.removed),
                "removed_routes": list(self.removed_routes), "value": self.value,
                "y_before": self.y_before, "y_after": self.y_after}


@dataclass
class RemovalReport:
    method: str
    original_network: Network
    final_network: Network
    y_original: float
    y_final: float
    steps: list = field(default_factory=list)
    shortcut: bool = False
    evaluations: int = 0
    candidates: list = field(default_factory=list)

    @property
    def improvement(self) -> float:
        if self.y_original <= 0:
            return 0.0
        return (self.y_original - self.y_final) / self.y_original

    @property
    def paradox_free(self) -> bool:
        return not self.steps

    @property
    def removed_routes(self) -> tuple:
        kept = set(self.final_network.route_ids)
        return tuple(r for r in self.original_network.route_ids if r not in kept)

    @property
    def removed_links(self) -> tuple:
        kept = set(self.final_network.link_ids)
        return tuple(l for l in self.original_network.link_ids if l not in kept)

    @property
    def verdict(self) -> str:
        if self.steps:
            return "braess routes removed"
        return "paradox-free (zero-flow shortcut)" if self.shortcut else "paradox-free"

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "steps": [s.to_dict() for s in self.steps],
            "removed_routes": list(self.removed_routes),
            "removed_links": list(self.removed_links),
            "remaining_routes": list(self.final_network.route_ids),
            "y_original": self.y_original,
            "y_final": self.y_final,
            "improvement": self.improvement,
            "paradox_free": self.paradox_free,
            "verdict": self.verdict,
            "shortcut": self.shortcut,
            "evaluations": self.evaluations,
            "candidates": [c.to_dict() for c in self.candidates],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def summary(self) -> str:
        lines = [f"method: {self.method}",
                 f"Y original: {self.y_original:.6g}",
                 f"Y final:    {self.y_final:.6g}",
                 f"I_th:       {100 * self.improvement:.2f}%",
                 f"verdict:    {self.verdict}"]
        for i, s in enumerate(self.steps, 1):
            lines.append(f"  step {i}: remove {s.kind} {','.join(s.removed)} "
                         f"(V = {s.value:.6g}; Y {s.y_before:.6g} -> {s.y_after:.6g})")
        if self.removed_routes:
            lines.append(f"removed routes: {', '.join(self.removed_routes)}")
        return "\n".join(lines)


class Evaluator:
    """Solves equilibria on reduced networks, cached by the surviving route set."""

    def __init__(self, settings: SolverSettings = SolverSettings()):
        self.settings = settings
        self.solves = 0
        self._cache: dict = {}
        self._lock = threading.Lock()

    def equilibrium(self, network: Network) -> EquilibriumResult:
        key = frozenset(network.route_ids)
        with self._lock:
            hit = self._cache.get(key)
        if hit is not None:
            return hit
        s = self.settings
        result = solve(build_problem(network, s.tolerance, s.max_iters), method=s.method)
        with self._lock:
            self._cache.setdefault(key, result)
            self.solves += 1
        return result

    def delay(self, network: Network) -> float:
        return self.equilibrium(network).total_delay

    def threshold(self, y: float) -> float:
        return self.settings.value_tol * max(abs(y), 1e-12)


def reduce_network(network: Network, candidate: RemovalCandidate) -> Network:
    if candidate.kind in (LINK, LINK_SET):
        return remove_links(network, candidate.ids)
    return remove_routes(network, candidate.ids)


def candidate_value(network: Network, candidate: RemovalCandidate,
                    evaluator: Optional[Evaluator] = None) -> float:
    """``Y_new - Y`` for removing ``candidate``; raises ConnectivityViolation."""
    evaluator = evaluator or Evaluator()
    reduced = reduce_network(network, candidate)
    return evaluator.delay(reduced) - evaluator.delay(network)


def evaluate_candidate(network: Network, candidate: RemovalCandidate,
                       evaluator: Evaluator) -> RemovalCandidate:
    try:
        value = candidate_value(network, candidate, evaluator)
    except ConnectivityViolation:
        return RemovalCandidate(candidate.kind, candidate.ids, None, False)
    return RemovalCandidate(candidate.kind, candidate.ids, value, True)


def _evaluate_all(network, candidates, evaluator) -> list:
    workers = evaluator.settings.workers
    if workers > 1 and len(candidates) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(lambda c: evaluate_candidate(network, c, evaluator),
                                 candidates))
    return [evaluate_candidate(network, c, evaluator) for c in candidates]


def _best(evaluated: Sequence[RemovalCandidate]) -> Optional[RemovalCandidate]:
    feasible = [c for c in evaluated if c.feasible]
    if not feasible:
        return None
    return min(feasible, key=lambda c: (c.value, len(c.ids), c.ids))


def _link_candidates(network: Network) -> list:
    used = network.used_link_ids()
    return sorted(l.id for l in network.links if not l.is_phantom and l.id in used)


def _apply(report: RemovalReport, network: Network, candidate: RemovalCandidate,
           evaluator: Evaluator) -> Network:
    reduced = reduce_network(network, candidate)
    y_before = evaluator.delay(network)
    y_after = evaluator.delay(reduced)
    gone = tuple(r for r in network.route_ids if r not in set(reduced.route_ids))
    report.steps.append(RemovalStep(candidate.kind, candidate.ids, gone,
                                    y_after - y_before, y_before, y_after))
    return reduced


def _greedy(network: Network, kind: str, settings: Optional[SolverSettings],
            shortcut: bool) -> RemovalReport:
    evaluator = Evaluator(settings or SolverSettings())
    y0 = evaluator.delay(network)
    report = RemovalReport(method=f"greedy_{kind}_removal", original_network=network,
                           final_network=network, y_original=y0, y_final=y0)
    current = network
    first = True
    while True:
        ids = _link_candidates(current) if kind == LINK else sorted(current.route_ids)
        evaluated = _evaluate_all(current, [RemovalCandidate(kind, (i,)) for i in ids],
                                  evaluator)
        report.candidates = evaluated
        best = _best(evaluated)
        if best is None:
            break
        y = evaluator.delay(current)
        if first and shortcut:
            eq = evaluator.equilibrium(current)
            od = current.route(best.ids[0]).od_pair
            demand = current.od_pair(od).demand
            if eq.flow(best.ids[0]) <= 1e-6 * max(demand, 1e-12):
                report.shortcut = True
                break
        first = False
        if not best.value < -evaluator.threshold(y):
            break
        current = _apply(report, current, best, evaluator)
    report.final_network = current
    report.y_final = evaluator.delay(current)
    report.evaluations = evaluator.solves
    return report


def greedy_link_removal(network: Network, settings: Optional[SolverSettings] = None
                        ) -> RemovalReport:
    """Repeatedly close the most negative-value link (ties by ascending id)."""
    return _greedy(network, LINK, settings, shortcut=False)


def greedy_route_removal(network: Network, settings: Optional[SolverSettings] = None
                         ) -> RemovalReport:
    """Repeatedly drop the most negative-value route (ties by ascending id).

    If on the first pass the minimum-value route carries no equilibrium
    flow, the network is declared paradox-free without further search; the
    report marks such verdicts with ``shortcut``.
    """
    return _greedy(network, ROUTE, settings, shortcut=True)


def _n_subsets(n: int, max_size: int) -> int:
    return sum(math.comb(n, k) for k in range(1, min(max_size, n) + 1))


def _combination(network: Network, kind: str, max_set_size: int,
                 settings: Optional[SolverSettings]) -> RemovalReport:
    evaluator = Evaluator(settings or SolverSettings())
    items = _link_candidates(network) if kind == LINK_SET else sorted(network.route_ids)
    needed = _n_subsets(len(items), max_set_size)
    if needed > evaluator.settings.budget:
        raise BudgetExceeded(needed, evaluator.settings.budget)
    y0 = evaluator.delay(network)
    name = "link_combination_removal" if kind == LINK_SET else "route_combination_removal"
    report = RemovalReport(method=name, original_network=network, final_network=network,
                           y_original=y0, y_final=y0)
    subsets = [RemovalCandidate(kind, combo)
               for k in range(1, min(max_set_size, len(items)) + 1)
               for combo in itertools.combinations(items, k)]
    evaluated = _evaluate_all(network, subsets, evaluator)
    report.candidates = evaluated
    best = _best(evaluated)
    current = network
    if best is not None and best.value < -evaluator.threshold(y0):
        current = _apply(report, network, best, evaluator)
    report.final_network = current
    report.y_final = evaluator.delay(current)
    report.evaluations = evaluator.solves
    return report


def link_combination_removal(network: Network, max_set_size: int = 2,
                             settings: Optional[SolverSettings] = None) -> RemovalReport:
    """Evaluate every link subset up to ``max_set_size``; drop the best if it helps."""
    return _combination(network, LINK_SET, max_set_size, settings)


def route_combination_removal(network: Network, max_set_size: int = 2,
                              settings: Optional[SolverSettings] = None) -> RemovalReport:
    """Evaluate every route subset up to ``max_set_size``; drop the best if it helps."""
    return _combination(network, ROUTE_SET, max_set_size, settings)


def link_route_combination_removal(network: Network,
                                   settings: Optional[SolverSettings] = None
                                   ) -> RemovalReport:
    """Per link, find the delay-minimal subset of its routes; drop routes left out.

    Routes excluded from at least one link's optimal configuration are
    removed together.  If that joint removal is infeasible or does not
    lower Y, the per-link removals are applied one by one (best first),
    each only when it still lowers Y.
    """
    evaluator = Evaluator(settings or SolverSettings())
    links = _link_candidates(network)
    through = {l: network.routes_through(l) for l in links}
    needed = sum(2 ** len(rs) - 1 for rs in through.values())
    if needed > evaluator.settings.budget:
        raise BudgetExceeded(needed, evaluator.settings.budget)
    y0 = evaluator.delay(network)
    thr = evaluator.threshold(y0)
    report = RemovalReport(method="link_route_combination_removal", original_network=network,
                           final_network=network, y_original=y0, y_final=y0)

    per_link = []
    for lid in links:
        rs = through[lid]
        drops = [RemovalCandidate(LINK_ROUTE, combo)
                 for k in range(1, len(rs) + 1) for combo in itertools.combinations(rs, k)]
        evaluated = _evaluate_all(network, drops, evaluator)
        best = _best(evaluated)
        if best is not None and best.value < -thr:
            per_link.append((best.value, lid, best))
            report.candidates.append(RemovalCandidate(LINK_ROUTE, (lid,) + best.ids,
                                                      best.value, True))
        else:
            report.candidates.append(RemovalCandidate(LINK_ROUTE, (lid,), 0.0, True))

    current = network
    excluded = sorted({r for _, _, c in per_link for r in c.ids})
    joint = RemovalCandidate(LINK_ROUTE, tuple(excluded))
    joint_eval = evaluate_candidate(network, joint, evaluator) if excluded else None
    if joint_eval is not None and joint_eval.feasible and joint_eval.value < -thr:
        current = _apply(report, network, joint, evaluator)
    else:
        for _, _, cand in sorted(per_link, key=lambda t: (t[0], t[1])):
            ids = tuple(r for r in cand.ids if r in set(current.route_ids))
            if not ids:
                continue
            step = evaluate_candidate(current, RemovalCandidate(LINK_ROUTE, ids), evaluator)
            if step.feasible and step.value < -evaluator.threshold(evaluator.delay(current)):
                current = _apply(report, current, step, evaluator)
    report.final_network = current
    report.y_final = evaluator.delay(current)
    report.evaluations = evaluator.solves
    return report


METHODS: dict[str, Callable] = {
    "greedy-link": greedy_link_removal,
    "link-combo": link_combination_removal,
    "link-route": link_route_combination_removal,
    "greedy-route": greedy_route_removal,
    "route-combo": route_combination_removal,
}


def run_method(name: str, network: Network, settings: Optional[SolverSettings] = None,
               max_set_size: int = 2) -> RemovalReport:
    try:
        fn = METHODS[name]
    except KeyError:
        raise ValueError(f"unknown method {name!r}; choose from {sorted(METHODS)}") from None
    if name in ("link-combo", "route-combo"):
        return fn(network, max_set_size=max_set_size, settings=settings)
    return fn(network, settings=settings)
