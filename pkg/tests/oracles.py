"""Independent reference computations used by the tests.

Nothing here calls the solver or the package's potential functions; the
formulas are written out again from the delay definitions.
"""

from __future__ import annotations

import numpy as np

from braess_routes.delays import BPRDelay, QueueDelay


def potential(fn, z):
    """Integral of the delay from 0 to z (z: array)."""
    z = np.asarray(z, dtype=float)
    if isinstance(fn, BPRDelay):
        return fn.t0 * z + fn.t0 * fn.a * z ** (fn.b + 1) / ((fn.b + 1) * fn.cap ** fn.b)
    assert isinstance(fn, QueueDelay)
    if np.isinf(fn.s):
        base = fn.d0 * z
    else:
        above = fn.d0 * fn.s + fn.alpha * (z ** 2 - fn.s ** 2) / 2 + fn.beta * (z - fn.s)
        base = np.where(z < fn.s, fn.d0 * z, above)
    return base + fn.eps * z ** 2 / 2


def simplex_grid(n_routes: int, demand: float, step: float = 1e-3) -> np.ndarray:
    """Every route split whose shares are multiples of ``step``."""
    k = int(round(1 / step))
    if n_routes == 1:
        return np.array([[demand]])
    if n_routes == 2:
        a = np.arange(k + 1)
        return np.column_stack([a, k - a]) * demand / k
    if n_routes == 3:
        i, j = np.triu_indices(k + 1)
        a, b = i, j - i
        return np.column_stack([a, b, k - a - b]) * demand / k
    raise ValueError("grid oracle handles at most three routes")


def grid_minimum(network, step: float = 1e-3) -> float:
    """Smallest Beckmann objective over the grid, for a single-OD network."""
    assert len(network.od_pairs) == 1
    routes = network.routes
    links = sorted({l for r in routes for l in r.links})
    incidence = np.array([[1.0 if l in r.links else 0.0 for l in links] for r in routes])
    X = simplex_grid(len(routes), network.od_pairs[0].demand, step)
    Z = X @ incidence
    total = np.zeros(len(X))
    for j, lid in enumerate(links):
        total += potential(network.delay_for(lid), Z[:, j])
    return float(total.min())


def diamond_threshold_analytic() -> float:
    """Demand above which the cross link of the classic diamond hurts.

    All traffic uses the cross route while 2d/100 <= d/100 + 45, giving
    Y = d^2/50; without it Y = d (d/200 + 45).  Equal at d = 3000.
    """
    return 45.0 / (1 / 50 - 1 / 200)
