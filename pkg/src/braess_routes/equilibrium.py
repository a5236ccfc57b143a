"""Wardrop equilibrium via the Beckmann program over route flows.

The feasible set is a product of scaled simplices (one per OD pair), so the
linear minimization oracle is closed-form: every OD sends its whole demand
down its currently fastest route.  Two step rules share that oracle:

``pairwise``
    per OD, move flow from each slower used route onto the fastest one with
    an exact line search (pairwise Frank-Wolfe steps).  Default.
``frank_wolfe``
    the classic joint step toward the oracle vertex.

Both keep every iterate feasible and never increase the objective.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Mapping, Optional

import numpy as np

from .delays import DelayVector
from .errors import NonConvergence, NoRouteForDemand
from .network import Network, RoutingMatrix, build_routing_matrix

DEFAULT_TOL = 1e-6
FLOW_TOL = 1e-6
WARDROP_TOL = 1e-4


@dataclass(frozen=True)
class EquilibriumProblem:
    routing: RoutingMatrix
    delays: DelayVector
    od_ids: tuple
    demands: np.ndarray
    route_od: np.ndarray
    tolerance: float = DEFAULT_TOL
    max_iters: int = 2000
    flow_tol: float = FLOW_TOL
    wardrop_tol: float = WARDROP_TOL

    def __post_init__(self):
        if len(self.delays.functions) != len(self.routing.link_ids):
            raise ValueError("need exactly one delay function per routing-matrix column")
        if np.any(np.asarray(self.demands) < 0):
            raise ValueError("demands must be non-negative")
        object.__setattr__(self, "_R", self.routing.matrix.astype(float))

    @property
    def R(self) -> np.ndarray:
        return self._R

    @property
    def n_routes(self) -> int:
        return len(self.routing.route_ids)

    def od_routes(self, k: int) -> np.ndarray:
        return np.flatnonzero(self.route_od == k)

    def equal_split(self) -> np.ndarray:
        x = np.zeros(self.n_routes)
        for k, d in enumerate(self.demands):
            idx = self.od_routes(k)
            if idx.size:
                x[idx] = d / idx.size
        return x

    def link_flows(self, x) -> np.ndarray:
        return np.asarray(x, dtype=float) @ self.R

    def objective(self, x) -> float:
        return float(self.delays.objective(self.link_flows(x)))

    def route_times(self, x) -> np.ndarray:
        return self.R @ self.delays.delay(self.link_flows(x))


def build_problem(network: Network, tolerance: float = DEFAULT_TOL, max_iters: int = 2000,
                  **kwargs) -> EquilibriumProblem:
    routing = build_routing_matrix(network)
    delays = DelayVector([network.delay_for(lid) for lid in routing.link_ids])
    od_ids = tuple(o.id for o in network.od_pairs)
    od_index = {k: i for i, k in enumerate(od_ids)}
    route_od = np.array([od_index[r.od_pair] for r in network.routes], dtype=int)
    demands = np.array([o.demand for o in network.od_pairs], dtype=float)
    return EquilibriumProblem(routing, delays, od_ids, demands, route_od,
                              tolerance=tolerance, max_iters=max_iters, **kwargs)


@dataclass
class EquilibriumResult:
    route_ids: tuple
    link_ids: tuple
    route_flows: np.ndarray
    link_flows: np.ndarray
    route_times: np.ndarray
    total_delay: float
    total_demand: float
    gap: float
    iterations: int
    converged: bool
    objective_history: list = field(default_factory=list)

    @property
    def delay_per_vehicle(self) -> float:
        return self.total_delay / self.total_demand if self.total_demand > 0 else 0.0

    def flow(self, route_id: str) -> float:
        return float(self.route_flows[self.route_ids.index(route_id)])

    def time(self, route_id: str) -> float:
        return float(self.route_times[self.route_ids.index(route_id)])

    def raise_for_convergence(self) -> EquilibriumResult:
        if not self.converged:
            raise NonConvergence(self.gap, self.iterations)
        return self

    def to_dict(self) -> dict:
        return {
            "route_flows": dict(zip(self.route_ids, map(float, self.route_flows))),
            "link_flows": dict(zip(self.link_ids, map(float, self.link_flows))),
            "route_times": dict(zip(self.route_ids, map(float, self.route_times))),
            "total_delay": float(self.total_delay),
            "delay_per_vehicle": float(self.delay_per_vehicle),
            "total_demand": float(self.total_demand),
            "gap": float(self.gap),
            "iterations": int(self.iterations),
            "converged": bool(self.converged),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _line_search(delays: DelayVector, z, dz, step_max: float, scale: float) -> float:
    """Largest step in ``[0, step_max]`` whose directional derivative is <= 0.

    Bisection on the (monotone) derivative of the convex objective along
    ``dz``; returning the lower bracket keeps the objective non-increasing.
    """
    nz = np.flatnonzero(dz)
    if nz.size == 0 or step_max <= 0:
        return 0.0
    dzn, zn = dz[nz], z[nz]
    sub = DelayVector([delays.functions[i] for i in nz]) if nz.size < delays.size else delays

    def slope(t):
        return float(sub.delay(zn + t * dzn) @ dzn)

    if slope(step_max) <= 0:
        return step_max
    lo, hi = 0.0, step_max
    tol = 1e-14 * max(step_max, scale)
    for _ in range(200):
        if hi - lo <= tol:
            break
        mid = 0.5 * (lo + hi)
        if slope(mid) <= 0:
            lo = mid
        else:
            hi = mid
    return lo


def _diagnostics(problem: EquilibriumProblem, x):
    """Relative duality gap, Wardrop-satisfied flag, route times, and oracle vertex."""
    z = problem.link_flows(x)
    c = problem.R @ problem.delays.delay(z)
    y = np.zeros_like(x)
    ok = True
    for k, d in enumerate(problem.demands):
        idx = problem.od_routes(k)
        if idx.size == 0 or d <= 0:
            continue
        cmin = c[idx].min()
        y[idx[np.argmin(c[idx])]] = d
        used = idx[x[idx] > problem.flow_tol * d]
        if used.size and c[used].max() - cmin > problem.wardrop_tol * max(cmin, 1e-300):
            ok = False
    total = float(c @ x)
    gap = float(c @ (x - y))
    rel = gap / total if total > 0 else 0.0
    return max(rel, 0.0), ok, c, y


def _pairwise_sweep(problem: EquilibriumProblem, x, z) -> None:
    """Equalize each OD in turn; updates ``x`` and ``z`` in place."""
    R, delays = problem.R, problem.delays
    for k, d in enumerate(problem.demands):
        idx = problem.od_routes(k)
        if idx.size < 2 or d <= 0:
            continue
        for _ in range(4 * idx.size):
            c = R[idx] @ delays.delay(z)
            best = idx[int(np.argmin(c))]
            moved = False
            for j in idx[np.argsort(-c, kind="stable")]:
                if j == best or x[j] <= 0:
                    continue
                t = delays.delay(z)
                cj, cb = float(R[j] @ t), float(R[best] @ t)
                if cj - cb <= 1e-15 * max(cb, 1e-300):
                    continue
                dz = R[best] - R[j]
                step = _line_search(delays, z, dz, x[j], d)
                if step <= 0:
                    continue
                if step >= x[j]:
                    step = x[j]
                    x[j] = 0.0
                else:
                    x[j] -= step
                x[best] += step
                z += step * dz
                moved = True
            if not moved:
                break


def solve(problem: EquilibriumProblem, x0=None, method: str = "pairwise") -> EquilibriumResult:
    """Minimize the sum of Beckmann potentials over feasible route flows."""
    if method not in ("pairwise", "frank_wolfe"):
        raise ValueError(f"unknown method {method!r}")
    stranded = [problem.od_ids[k] for k, d in enumerate(problem.demands)
                if d > 0 and problem.od_routes(k).size == 0]
    if stranded:
        raise NoRouteForDemand(stranded)

    if x0 is None:
        x = problem.equal_split()
    else:
        x = np.array(x0, dtype=float)
        if x.shape != (problem.n_routes,) or np.any(x < 0):
            raise ValueError("x0 must be a non-negative route-flow vector")
        for k, d in enumerate(problem.demands):
            idx = problem.od_routes(k)
            if idx.size and not np.isclose(x[idx].sum(), d, rtol=1e-12, atol=1e-12):
                raise ValueError(f"x0 does not meet the demand of OD {problem.od_ids[k]}")
    z = problem.link_flows(x)
    history = [float(problem.delays.objective(z))]
    converged = False
    iterations = 0
    scale = float(problem.demands.max()) if problem.demands.size else 1.0
    gap, ok, c, y = _diagnostics(problem, x)
    while True:
        if gap <= problem.tolerance and ok:
            converged = True
            break
        if iterations >= problem.max_iters:
            break
        iterations += 1
        if method == "frank_wolfe":
            d = y - x
            gamma = _line_search(problem.delays, z, d @ problem.R, 1.0, 1.0)
            x = x + gamma * d
            if gamma == 1.0:
                x = y.copy()
        else:
            _pairwise_sweep(problem, x, z)
        z = problem.link_flows(x)
        history.append(float(problem.delays.objective(z)))
        gap, ok, c, y = _diagnostics(problem, x)
        if len(history) > 3 and method == "pairwise" and history[-1] == history[-2] == history[-3]:
            # stalled at machine precision
            converged = gap <= problem.tolerance
            break

    times = c
    total = float(z @ problem.delays.delay(z))
    return EquilibriumResult(
        route_ids=problem.routing.route_ids,
        link_ids=problem.routing.link_ids,
        route_flows=x,
        link_flows=z,
        route_times=times,
        total_delay=total,
        total_demand=float(problem.demands.sum()),
        gap=gap,
        iterations=iterations,
        converged=converged,
        objective_history=history,
    )


def total_delay(result: EquilibriumResult, problem: EquilibriumProblem) -> float:
    """Flow-weighted travel time summed over links (veh*h/h)."""
    z = problem.link_flows(result.route_flows)
    return float(z @ problem.delays.delay(z))


def wardrop_residual(result: EquilibriumResult, problem: EquilibriumProblem,
                     relative: bool = False) -> dict:
    """Per OD: worst excess time of a used route over the OD's fastest route."""
    x = np.asarray(result.route_flows, dtype=float)
    c = problem.route_times(x)
    out = {}
    for k, d in enumerate(problem.demands):
        idx = problem.od_routes(k)
        if idx.size == 0:
            continue
        cmin = float(c[idx].min())
        used = idx[x[idx] > problem.flow_tol * d] if d > 0 else idx[:0]
        excess = float(c[used].max() - cmin) if used.size else 0.0
        if relative:
            excess = excess / cmin if cmin > 0 else excess
        out[problem.od_ids[k]] = max(excess, 0.0)
    return out


def solve_network(network: Network, tolerance: float = DEFAULT_TOL, max_iters: int = 2000,
                  method: str = "pairwise") -> EquilibriumResult:
    return solve(build_problem(network, tolerance, max_iters), method=method)


def result_from_dict(data: Mapping) -> EquilibriumResult:
    route_ids = tuple(sorted(data["route_flows"]))
    link_ids = tuple(sorted(data["link_flows"]))
    return EquilibriumResult(
        route_ids=route_ids,
        link_ids=link_ids,
        route_flows=np.array([data["route_flows"][r] for r in route_ids]),
        link_flows=np.array([data["link_flows"][l] for l in link_ids]),
        route_times=np.array([data["route_times"][r] for r in route_ids]),
        total_delay=float(data["total_delay"]),
        total_demand=float(data["total_demand"]),
        gap=float(data["gap"]),
        iterations=int(data["iterations"]),
        converged=bool(data["converged"]),
    )
