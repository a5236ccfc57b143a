"""Ready-made networks: the textbook diamond, a physical diamond family,
and random small networks for property tests."""

from __future__ import annotations

import numpy as np

from .calibration import SignalSpec
from .delays import BPRDelay, QueueDelay
from .network import (Control, Intersection, Link, LinkKind, Network, ODPair, Route,
                      insert_phantom_links)

_DUMMY = dict(length=1000.0, free_flow_speed=10.0, capacity=1000.0)


def _phys(link_id, tail, head, **geometry):
    return Link(id=link_id, kind=LinkKind.PHYSICAL, tail=tail, head=head, **geometry)


def classic_diamond(demand: float = 4000.0, with_cross: bool = True) -> Network:
    """Four-node diamond with delays z/100, 45, 45, z/100 and a free cross link.

    Routes: ``up`` = s-A-t, ``down`` = s-B-t, ``cross`` = s-A-B-t.  Units are
    the textbook's abstract time units.
    """
    links = [_phys("sA", "s", "A", **_DUMMY), _phys("At", "A", "t", **_DUMMY),
             _phys("sB", "s", "B", **_DUMMY), _phys("Bt", "B", "t", **_DUMMY)]
    delays = {
        "sA": QueueDelay.linear(0.0, 0.01),
        "At": QueueDelay.linear(45.0, 0.0),
        "sB": QueueDelay.linear(45.0, 0.0),
        "Bt": QueueDelay.linear(0.0, 0.01),
    }
    routes = [Route("up", "od", ("sA", "At")), Route("down", "od", ("sB", "Bt"))]
    if with_cross:
        links.append(_phys("AB", "A", "B", **_DUMMY))
        delays["AB"] = QueueDelay.linear(0.0, 0.0)
        routes.append(Route("cross", "od", ("sA", "AB", "Bt")))
    inter = {n: Intersection(n, Control.UNCONTROLLED) for n in ("A", "B")}
    return Network(("s", "A", "B", "t"), links, [ODPair("od", "s", "t", demand)],
                   routes, inter, delays).validate()


def two_parallel(demand: float = 2.0) -> Network:
    """Two identical parallel links with delay ``z``; paradox-free."""
    links = [_phys("l1", "o", "d", **_DUMMY), _phys("l2", "o", "d", **_DUMMY)]
    delays = {"l1": QueueDelay.linear(0.0, 1.0), "l2": QueueDelay.linear(0.0, 1.0)}
    routes = [Route("r1", "od", ("l1",)), Route("r2", "od", ("l2",))]
    return Network(("o", "d"), links, [ODPair("od", "o", "d", demand)], routes,
                   {}, delays).validate()


# Physical diamond: congestible approaches (sA, Bt), long near-constant
# detours (At, sB), and a short cross link.  Braess regime roughly 2.2k-4.5k veh/h.
PHYSICAL_GEOMETRY = {
    "sA": dict(length=1200.0, free_flow_speed=20.0, capacity=1500.0, bpr=(1.0, 1.0)),
    "Bt": dict(length=1200.0, free_flow_speed=20.0, capacity=1500.0, bpr=(1.0, 1.0)),
    "At": dict(length=5000.0, free_flow_speed=25.0, capacity=2500.0, bpr=(0.15, 4.0)),
    "sB": dict(length=5000.0, free_flow_speed=25.0, capacity=2500.0, bpr=(0.15, 4.0)),
    "AB": dict(length=250.0, free_flow_speed=25.0, capacity=2500.0, bpr=(0.15, 4.0)),
}

SIGNAL = SignalSpec(D=60.0, L_red=20.0, n=90)


def physical_diamond(demand: float = 4000.0, with_cross: bool = True,
                     signalized: bool = False, signal: SignalSpec = SIGNAL) -> Network:
    """Diamond with real geometry and BPR links, optionally signalized at A and B.

    With ``signalized`` the interior nodes get fixed-time signals and
    phantom queue links are inserted.
    """
    ids = ["sA", "At", "sB", "Bt"] + (["AB"] if with_cross else [])
    ends = {"sA": ("s", "A"), "At": ("A", "t"), "sB": ("s", "B"), "Bt": ("B", "t"),
            "AB": ("A", "B")}
    links = [_phys(i, *ends[i], **PHYSICAL_GEOMETRY[i]) for i in ids]
    routes = [Route("up", "od", ("sA", "At")), Route("down", "od", ("sB", "Bt"))]
    if with_cross:
        routes.append(Route("cross", "od", ("sA", "AB", "Bt")))
    if signalized:
        inter = {n: Intersection(n, Control.SIGNALIZED, signal) for n in ("A", "B")}
    else:
        inter = {n: Intersection(n, Control.UNCONTROLLED) for n in ("A", "B")}
    net = Network(("s", "A", "B", "t"), links, [ODPair("od", "s", "t", demand)],
                  routes, inter)
    return insert_phantom_links(net).validate()


def random_network(rng: np.random.Generator, max_links: int = 10, max_routes: int = 6,
                   max_ods: int = 3) -> Network:
    """Small random DAG with BPR and queue delays on its links.

    Nodes are ordered; links only go forward, so every path is simple.
    Routes are drawn from the simple paths of up to ``max_ods`` OD pairs,
    preferring pairs with more than one path; at least one OD pair always
    has a route choice.
    """
    while True:
        n_nodes = int(rng.integers(3, 7))
        pairs = [(i, j) for i in range(n_nodes) for j in range(i + 1, n_nodes)]
        n_links = int(rng.integers(n_nodes - 1, min(max_links, len(pairs)) + 1))
        chosen = rng.choice(len(pairs), size=n_links, replace=False)
        edges = sorted(pairs[c] for c in chosen)
        out = {}
        for i, j in edges:
            out.setdefault(i, []).append(j)

        def paths(u, v):
            if u == v:
                yield ()
                return
            for w in out.get(u, []):
                if w <= v:
                    for rest in paths(w, v):
                        yield ((u, w),) + rest

        candidates = [(o, d) for o in range(n_nodes) for d in range(o + 1, n_nodes)]
        rng.shuffle(candidates)
        path_sets = {c: list(paths(*c)) for c in candidates}
        # OD pairs with a route choice first, so most demand has somewhere to go
        candidates.sort(key=lambda c: len(path_sets[c]) < 2)
        ods, routes = [], []
        for o, d in candidates:
            if len(ods) == max_ods:
                break
            ps = path_sets[(o, d)]
            room = max_routes - len(routes)
            if not ps or room <= 0:
                continue
            rng.shuffle(ps)
            low = 2 if len(ps) >= 2 and room >= 2 else 1
            take = ps[: int(rng.integers(low, max(low, min(len(ps), room, 4)) + 1))]
            k = f"od{len(ods)}"
            ods.append(ODPair(k, f"n{o}", f"n{d}", float(rng.uniform(100.0, 3000.0))))
            for p in take:
                routes.append(Route(f"{k}r{len(routes)}", k,
                                    tuple(f"e{a}{b}" for a, b in p)))
        if max(sum(r.od_pair == od.id for r in routes) for od in ods) < 2:
            continue
        used = sorted({lid for r in routes for lid in r.links})
        links, delays = [], {}
        for lid in used:
            a, b = int(lid[1]), int(lid[2])
            links.append(_phys(lid, f"n{a}", f"n{b}", **_DUMMY))
            if rng.random() < 0.6:
                delays[lid] = BPRDelay(t0=float(rng.uniform(0.01, 0.2)),
                                       a=float(rng.uniform(0.05, 1.0)),
                                       b=float(rng.uniform(1.0, 5.0)),
                                       cap=float(rng.uniform(300.0, 3000.0)))
            else:
                s = float(rng.uniform(200.0, 2500.0))
                d0 = float(rng.uniform(0.001, 0.05))
                alpha = float(rng.uniform(0.0, 1.0 / s))
                delays[lid] = QueueDelay.through_breakpoint(d0=d0, alpha=alpha, s=s)
        nodes = tuple(f"n{i}" for i in range(n_nodes))
        inter = {n: Intersection(n, Control.UNCONTROLLED) for n in nodes}
        return Network(nodes, links, ods, routes, inter, delays).validate()
