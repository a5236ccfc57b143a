"""Extended road graph: physical links, phantom queue links, OD pairs, routes."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from enum import Enum
from types import MappingProxyType
from typing import Iterable, Mapping, Optional, Union

import numpy as np

from .calibration import SignalSpec, StopSpec, analytic_queue_delay
from .delays import BPRDelay, DelayFunction
from .errors import ConnectivityViolation, NetworkError, UnknownLinkError


class LinkKind(str, Enum):
    PHYSICAL = "physical"
    PHANTOM = "phantom"


class Control(str, Enum):
    SIGNALIZED = "signalized"
    STOP_SIGN = "stop_sign"
    UNCONTROLLED = "uncontrolled"


@dataclass(frozen=True)
class Link:
    """A directed link.

    Physical links carry geometry (m, m/s, veh/h) and the BPR shape
    ``(a, b)`` used when no explicit delay function is attached.  Phantom
    links sit at a single node (``tail == head``) and record the movement
    ``approach -> exit`` whose queue they represent.
    """

    id: str
    kind: LinkKind
    tail: str
    head: str
    length: Optional[float] = None
    free_flow_speed: Optional[float] = None
    capacity: Optional[float] = None
    bpr: tuple = (0.15, 4.0)
    control: Optional[Control] = None
    approach: Optional[str] = None
    exit: Optional[str] = None
    delay_fn_ref: Optional[str] = None

    @property
    def is_phantom(self) -> bool:
        return self.kind == LinkKind.PHANTOM

    @property
    def free_flow_time(self) -> float:
        """Seconds; zero for phantom links."""
        if self.is_phantom:
            return 0.0
        return self.length / self.free_flow_speed

    def check(self) -> None:
        if self.kind == LinkKind.PHYSICAL:
            for name in ("length", "free_flow_speed", "capacity"):
                value = getattr(self, name)
                if value is None or not value > 0:
                    raise NetworkError(f"link {self.id}: {name} must be positive, got {value}")
            if self.control is not None:
                raise NetworkError(f"physical link {self.id} cannot carry a control type")
        else:
            if self.control not in (Control.SIGNALIZED, Control.STOP_SIGN, Control.UNCONTROLLED):
                raise NetworkError(f"phantom link {self.id} needs exactly one control type")
            if any(getattr(self, n) is not None for n in ("length", "free_flow_speed", "capacity")):
                raise NetworkError(f"phantom link {self.id} cannot have geometric fields")
            if self.tail != self.head:
                raise NetworkError(f"phantom link {self.id} must sit at a single node")


@dataclass(frozen=True)
class ODPair:
    id: str
    origin: str
    destination: str
    demand: float = 0.0

    def check(self) -> None:
        if self.origin == self.destination:
            raise NetworkError(f"OD pair {self.id}: origin equals destination")
        if not self.demand >= 0:
            raise NetworkError(f"OD pair {self.id}: demand must be non-negative")


@dataclass(frozen=True)
class Route:
    id: str
    od_pair: str
    links: tuple

    def __post_init__(self):
        object.__setattr__(self, "links", tuple(self.links))


@dataclass(frozen=True)
class Intersection:
    node: str
    control: Control
    spec: Union[SignalSpec, StopSpec, None] = None

    def __post_init__(self):
        object.__setattr__(self, "control", Control(self.control))
        if self.control == Control.SIGNALIZED and not isinstance(self.spec, SignalSpec):
            raise NetworkError(f"signalized node {self.node} needs a SignalSpec")
        if self.control == Control.STOP_SIGN and not isinstance(self.spec, StopSpec):
            raise NetworkError(f"stop-sign node {self.node} needs a StopSpec")
        if self.control == Control.UNCONTROLLED and self.spec is not None:
            raise NetworkError(f"uncontrolled node {self.node} cannot carry a control spec")

    @property
    def cycle(self) -> Optional[float]:
        """Seconds between discharge opportunities (the stop delay for STOP signs)."""
        if isinstance(self.spec, SignalSpec):
            return self.spec.D
        if isinstance(self.spec, StopSpec):
            return self.spec.w
        return None


@dataclass(frozen=True)
class Network:
    nodes: tuple
    links: tuple
    od_pairs: tuple
    routes: tuple
    intersections: Mapping[str, Intersection] = field(default_factory=dict)
    delays: Mapping[str, DelayFunction] = field(default_factory=dict)

    def __post_init__(self):
        for name in ("nodes", "links", "od_pairs", "routes"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        object.__setattr__(self, "intersections", MappingProxyType(dict(self.intersections)))
        object.__setattr__(self, "delays", MappingProxyType(dict(self.delays)))
        for name, items in (("link", self.links), ("OD pair", self.od_pairs),
                            ("route", self.routes)):
            ids = [item.id for item in items]
            if len(set(ids)) != len(ids):
                raise NetworkError(f"duplicate {name} ids")
        object.__setattr__(self, "_links", {l.id: l for l in self.links})
        object.__setattr__(self, "_routes", {r.id: r for r in self.routes})
        object.__setattr__(self, "_ods", {o.id: o for o in self.od_pairs})

    def __reduce__(self):
        return (_rebuild_network, (self.nodes, self.links, self.od_pairs, self.routes,
                                   dict(self.intersections), dict(self.delays)))

    # lookups

    def link(self, link_id: str) -> Link:
        try:
            return self._links[link_id]
        except KeyError:
            raise UnknownLinkError(f"unknown link id {link_id!r}") from None

    def route(self, route_id: str) -> Route:
        try:
            return self._routes[route_id]
        except KeyError:
            raise NetworkError(f"unknown route id {route_id!r}") from None

    def od_pair(self, od_id: str) -> ODPair:
        try:
            return self._ods[od_id]
        except KeyError:
            raise NetworkError(f"unknown OD pair {od_id!r}") from None

    def has_link(self, link_id: str) -> bool:
        return link_id in self._links

    @property
    def link_ids(self) -> tuple:
        return tuple(l.id for l in self.links)

    @property
    def route_ids(self) -> tuple:
        return tuple(r.id for r in self.routes)

    def routes_for(self, od_id: str) -> tuple:
        return tuple(r for r in self.routes if r.od_pair == od_id)

    def routes_through(self, link_id: str) -> tuple:
        return tuple(r.id for r in self.routes if link_id in r.links)

    def used_link_ids(self) -> set:
        return {lid for r in self.routes for lid in r.links}

    def total_demand(self) -> float:
        return float(sum(o.demand for o in self.od_pairs))

    def delay_for(self, link_id: str) -> DelayFunction:
        """Attached delay function, else the default implied by geometry or control."""
        link = self.link(link_id)
        key = link.delay_fn_ref or link.id
        if key in self.delays:
            return self.delays[key]
        if not link.is_phantom:
            a, b = link.bpr
            return BPRDelay.from_geometry(link.length, link.free_flow_speed, link.capacity, a, b)
        inter = self.intersections.get(link.head)
        if inter is None or inter.spec is None:
            raise NetworkError(f"phantom link {link_id} has no control spec at node {link.head}")
        return analytic_queue_delay(inter.spec)

    # derived networks

    def with_demands(self, demands: Mapping[str, float]) -> Network:
        unknown = set(demands) - set(self._ods)
        if unknown:
            raise NetworkError(f"demand given for unknown OD pairs: {sorted(unknown)}")
        ods = [dataclasses.replace(o, demand=float(demands.get(o.id, o.demand)))
               for o in self.od_pairs]
        for o in ods:
            o.check()
        return dataclasses.replace(self, od_pairs=tuple(ods))

    def scaled(self, factor: float) -> Network:
        return self.with_demands({o.id: o.demand * factor for o in self.od_pairs})

    def with_delays(self, delays: Mapping[str, DelayFunction]) -> Network:
        merged = dict(self.delays)
        merged.update(delays)
        return dataclasses.replace(self, delays=merged)

    def validate(self) -> Network:
        """Full structural check; returns self so it can be chained."""
        node_set = set(self.nodes)
        if len(node_set) != len(self.nodes):
            raise NetworkError("duplicate node ids")
        for link in self.links:
            link.check()
            for end in (link.tail, link.head):
                if end not in node_set:
                    raise NetworkError(f"link {link.id} references unknown node {end!r}")
        for node in self.intersections:
            if node not in node_set:
                raise NetworkError(f"intersection metadata for unknown node {node!r}")
        for od in self.od_pairs:
            od.check()
            for end in (od.origin, od.destination):
                if end not in node_set:
                    raise NetworkError(f"OD pair {od.id} references unknown node {end!r}")
        for route in self.routes:
            self._check_route(route)
        return self

    def _check_route(self, route: Route) -> None:
        od = self.od_pair(route.od_pair)
        if not route.links:
            raise NetworkError(f"route {route.id} is empty")
        if len(set(route.links)) != len(route.links):
            raise NetworkError(f"route {route.id} repeats a link")
        at = od.origin
        prev = None
        for lid in route.links:
            link = self.link(lid)
            if link.tail != at:
                raise NetworkError(f"route {route.id} is disconnected at link {lid}")
            if link.is_phantom:
                if prev is None or prev.is_phantom:
                    raise NetworkError(f"route {route.id}: phantom link {lid} must follow a physical link")
            at = link.head
            prev = link
        if prev.is_phantom:
            raise NetworkError(f"route {route.id} ends on a phantom link")
        if at != od.destination:
            raise NetworkError(f"route {route.id} does not end at {od.destination}")


def _rebuild_network(nodes, links, od_pairs, routes, intersections, delays):
    return Network(nodes, links, od_pairs, routes, intersections, delays)


def phantom_id(approach: str, exit: str) -> str:
    return f"q.{approach}.{exit}"


def insert_phantom_links(network: Network) -> Network:
    """Insert a queue link between consecutive physical links at controlled nodes.

    One phantom link per (incoming, outgoing) movement, shared by every
    route making that movement.  Idempotent.
    """
    links = list(network.links)
    known = {l.id for l in links}
    routes = []
    for route in network.routes:
        seq = [network.link(lid) for lid in route.links]
        out = []
        for i, link in enumerate(seq):
            out.append(link.id)
            if i + 1 == len(seq):
                break
            nxt = seq[i + 1]
            if link.is_phantom or nxt.is_phantom:
                continue
            node = link.head
            inter = network.intersections.get(node)
            if inter is None:
                raise NetworkError(f"route {route.id} traverses node {node!r} "
                                   "which has no intersection metadata")
            if inter.control == Control.UNCONTROLLED:
                continue
            pid = phantom_id(link.id, nxt.id)
            if pid not in known:
                links.append(Link(id=pid, kind=LinkKind.PHANTOM, tail=node, head=node,
                                  control=inter.control, approach=link.id, exit=nxt.id))
                known.add(pid)
            out.append(pid)
        routes.append(dataclasses.replace(route, links=tuple(out)))
    return dataclasses.replace(network, links=tuple(links), routes=tuple(routes))


@dataclass(frozen=True)
class RoutingMatrix:
    """Binary route-by-link incidence matrix with frozen id/index maps."""

    route_ids: tuple
    link_ids: tuple
    matrix: np.ndarray

    def __post_init__(self):
        self.matrix.setflags(write=False)
        object.__setattr__(self, "route_index", {r: i for i, r in enumerate(self.route_ids)})
        object.__setattr__(self, "link_index", {l: j for j, l in enumerate(self.link_ids)})

    @property
    def shape(self) -> tuple:
        return self.matrix.shape

    def row(self, route_id: str) -> np.ndarray:
        return self.matrix[self.route_index[route_id]]


def build_routing_matrix(network: Network) -> RoutingMatrix:
    link_ids = network.link_ids
    col = {lid: j for j, lid in enumerate(link_ids)}
    mat = np.zeros((len(network.routes), len(link_ids)), dtype=np.int8)
    for i, route in enumerate(network.routes):
        for lid in route.links:
            if lid not in col:
                raise UnknownLinkError(f"route {route.id} references unknown link {lid!r}")
            mat[i, col[lid]] = 1
    return RoutingMatrix(network.route_ids, link_ids, mat)


def remove_routes(network: Network, route_ids: Iterable[str]) -> Network:
    """New network without ``route_ids``; links orphaned by the removal are dropped."""
    drop = set(route_ids)
    missing = drop - set(network.route_ids)
    if missing:
        raise NetworkError(f"unknown route ids: {sorted(missing)}")
    kept = tuple(r for r in network.routes if r.id not in drop)
    served = {r.od_pair for r in kept}
    stranded = [o.id for o in network.od_pairs if o.id not in served]
    if stranded:
        raise ConnectivityViolation(stranded)
    used_before = network.used_link_ids()
    used_after = {lid for r in kept for lid in r.links}
    links = tuple(l for l in network.links if l.id in used_after or l.id not in used_before)
    return dataclasses.replace(network, links=links, routes=kept)


def remove_links(network: Network, link_ids: Iterable[str]) -> Network:
    """Close links: every route through them goes too (no rerouting)."""
    drop = set(link_ids)
    for lid in drop:
        network.link(lid)
    doomed = {r.id for r in network.routes if drop.intersection(r.links)}
    reduced = remove_routes(network, doomed)
    return dataclasses.replace(reduced, links=tuple(l for l in reduced.links if l.id not in drop))
