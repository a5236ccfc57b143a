"""Small mesoscopic simulator with point queues at controlled intersections.

Vehicles traverse a physical link in the time its delay function gives at
the link's occupancy-equivalent flow: the flow ``q`` with ``q * t(q)``
equal to the number of vehicles currently on the link (Little's law).
At a signalized node each approach discharges at most ``n`` vehicles per
green; at a STOP sign one vehicle per ``w`` seconds.  Queues live at the
end of the approach link; a queue longer than the link storage aborts the
run.  Link traversal is continuous in time; queues are served at the
boundaries of fixed time steps, each released vehicle keeping its exact
departure time.
"""

from __future__ import annotations

import heapq
import json
import math
import zlib
from collections import deque
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from .calibration import ObservationSet, SignalSpec, StopSpec
from .delays import SECONDS_PER_HOUR, BPRDelay, QueueDelay, evaluate
from .errors import SpillbackDetected
from .network import Control, Network

VEHICLE_SPACING = 7.5


@dataclass(frozen=True)
class SimConfig:
    """``horizon`` is the measured window (s), which starts after the warm-up."""

    horizon: float = 3600.0
    time_step: float = 1.0
    seed: int = 0
    injection: str = "poisson"
    warmup: Optional[float] = None
    check_spillback: bool = True
    trace: bool = False

    def __post_init__(self):
        if not 0 < self.time_step <= 1.0:
            raise ValueError("time_step must be in (0, 1] seconds")
        if self.injection not in ("poisson", "deterministic"):
            raise ValueError(f"unknown injection mode {self.injection!r}")
        if not self.horizon > 0:
            raise ValueError("horizon must be positive")


@dataclass
class SimResult:
    total_travel_time: float          # veh*h over measured vehicles
    measured_vehicles: int
    window_hours: float
    free_flow_bound: float            # veh*h
    injected: int
    arrived: int
    in_network: int
    per_link_stats: dict = field(default_factory=dict)
    route_stats: dict = field(default_factory=dict)
    spillback_flag: dict = field(default_factory=dict)
    warmup: float = 0.0
    demand: float = 0.0               # nominal veh/h
    trace: list = field(default_factory=list)

    @property
    def mean_travel_time(self) -> float:
        """Hours per measured vehicle."""
        return self.total_travel_time / self.measured_vehicles if self.measured_vehicles else 0.0

    @property
    def delay_rate(self) -> float:
        """Mean travel time times nominal demand (veh*h/h), comparable with model Y.

        Normalizing by the measured count removes the arrival-count noise
        that Poisson injection adds to the raw total.
        """
        return self.mean_travel_time * self.demand

    def to_dict(self) -> dict:
        return {
            "total_travel_time": self.total_travel_time,
            "delay_rate": self.delay_rate,
            "mean_travel_time": self.mean_travel_time,
            "demand": self.demand,
            "measured_vehicles": self.measured_vehicles,
            "window_hours": self.window_hours,
            "free_flow_bound": self.free_flow_bound,
            "injected": self.injected,
            "arrived": self.arrived,
            "in_network": self.in_network,
            "warmup": self.warmup,
            "per_link_stats": self.per_link_stats,
            "route_stats": self.route_stats,
            "spillback_flag": self.spillback_flag,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _scalar(fn):
    """Plain-float version of a delay function (hot path)."""
    if isinstance(fn, BPRDelay):
        t0, a, b, cap = fn.t0, fn.a, fn.b, fn.cap
        return lambda q: t0 * (1.0 + a * (q / cap) ** b)
    if isinstance(fn, QueueDelay):
        d0, al, s, eps = fn.d0, fn.alpha, fn.s, fn.eps
        return lambda q: (d0 if q < s else d0 + al * (q - s)) + eps * q
    return lambda q: float(evaluate(fn, q))


class _Vehicle:
    __slots__ = ("route", "path", "pos", "depart", "arrive", "queued_at", "entered")

    def __init__(self, route, path, depart):
        self.route = route
        self.path = path
        self.pos = 0
        self.depart = depart
        self.arrive = None
        self.queued_at = None
        self.entered = depart


class _Link:
    def __init__(self, link_id, delay_fn, free_flow_s, storage, control=None, spec=None):
        self.id = link_id
        self.delay_fn = delay_fn
        self.free_flow_s = free_flow_s
        self.storage = storage
        self.control = control
        self.spec = spec
        self.occupancy = 0
        self.queue = deque()
        self.passed = 0
        self.cycle_k = -1
        self.server_free = 0.0
        self.max_queue = 0
        self._times = {}
        # (entry time, traversal s) and (queue arrival, wait s)
        self.traversals = []
        self.waits = []
        self.discharges = []

    def travel_time(self, occupancy: int) -> float:
        """Seconds to traverse at the flow whose steady occupancy is ``occupancy``."""
        hit = self._times.get(occupancy)
        if hit is not None:
            return hit
        fn = _scalar(self.delay_fn)
        if occupancy == 0:
            t = fn(0.0)
        else:
            hi = 1.0
            while hi * fn(hi) < occupancy:
                hi *= 2.0
            lo = 0.0
            for _ in range(80):
                mid = 0.5 * (lo + hi)
                if mid * fn(mid) < occupancy:
                    lo = mid
                else:
                    hi = mid
            t = fn(0.5 * (lo + hi))
        t *= SECONDS_PER_HOUR
        self._times[occupancy] = t
        return t


class _Run:
    """One time-stepped run over fixed paths with per-path injection rates.

    With Poisson injection, paths listed together in ``groups`` (the routes
    of one OD pair) share one arrival stream and each arrival picks its
    path with probability proportional to the path rate.  Thinning keeps
    every path's arrivals Poisson at its own rate, and paired runs with
    different route sets see the same arrival times.
    """

    def __init__(self, links: Mapping[str, _Link], paths: Sequence[tuple],
                 names: Sequence[str], rates: Sequence[float], config: SimConfig,
                 warmup: float, terminal_queue: bool = False, drain_inflow: bool = True,
                 groups: Optional[Sequence[tuple]] = None, offset: Optional[float] = None):
        self.links = links
        self.paths = paths
        self.names = names
        self.rates = rates
        self.cfg = config
        self.warmup = warmup
        self.terminal_queue = terminal_queue
        self.drain_inflow = drain_inflow
        self.pending = 0
        step = config.time_step
        self.end_inject = math.ceil((warmup + config.horizon) / step) * step
        self.vehicles: list[_Vehicle] = []
        self.heap: list = []
        self.seq = 0
        self.snapshot = None
        self.trace: list = []
        if groups is None or config.injection != "poisson":
            groups = [(n, [i]) for i, n in enumerate(names)]
        # (rate, members, cumulative probabilities); streams keyed by name so
        # paired runs share random numbers
        self.sources = []
        self.rngs = []
        self.next_inj = []
        for key, members in groups:
            members = [i for i in members if rates[i] > 0]
            rate = float(sum(rates[i] for i in members))
            cum = np.cumsum([rates[i] for i in members]) / rate if rate > 0 else None
            self.sources.append((rate, members, cum))
            rng = np.random.default_rng([config.seed, zlib.crc32(key.encode())])
            self.rngs.append(rng)
            if rate <= 0:
                self.next_inj.append(math.inf)
            elif config.injection == "poisson":
                self.next_inj.append(rng.exponential(SECONDS_PER_HOUR / rate))
            elif offset is not None:
                self.next_inj.append(offset)
            else:
                self.next_inj.append(rng.uniform(0.0, SECONDS_PER_HOUR / rate))

    def _headway(self, k):
        mean = SECONDS_PER_HOUR / self.sources[k][0]
        if self.cfg.injection == "poisson":
            return self.rngs[k].exponential(mean)
        return mean

    def _pick(self, k) -> int:
        _, members, cum = self.sources[k]
        if len(members) == 1:
            return members[0]
        j = int(np.searchsorted(cum, self.rngs[k].random(), side="right"))
        return members[min(j, len(members) - 1)]

    def _enter(self, v: _Vehicle, time: float):
        link = self.links[v.path[v.pos]]
        tt = link.travel_time(link.occupancy)
        link.occupancy += 1
        link.traversals.append((time, tt))
        v.entered = time
        self.seq += 1
        heapq.heappush(self.heap, (time + tt, self.seq, v))

    def _leave_queue(self, link: _Link, v: _Vehicle, dep: float):
        link.waits.append((v.queued_at, dep - v.queued_at))
        link.discharges.append(dep)
        v.queued_at = None
        if v.pos + 1 == len(v.path):
            self._arrive(v, dep)
        else:
            v.pos += 1
            self._enter(v, dep)

    def _arrive(self, v: _Vehicle, time: float):
        v.arrive = time
        if self.warmup <= v.depart < self.end_inject:
            self.pending -= 1

    def _discharge(self, link: _Link, tau: float):
        """Release every queued vehicle whose departure time falls by ``tau``."""
        spec = link.spec
        while link.queue:
            v = link.queue[0]
            if isinstance(spec, SignalSpec):
                D, red = spec.D, spec.L_red
                k = max(math.floor(v.queued_at / D), link.cycle_k)
                dep = max(v.queued_at, k * D + red)
                if k == link.cycle_k and link.passed >= spec.n:
                    k += 1
                    dep = k * D + red
                if dep > tau + 1e-9:
                    break
                if k != link.cycle_k:
                    link.cycle_k, link.passed = k, 0
                link.passed += 1
            else:
                dep = max(v.queued_at, link.server_free) + spec.w
                if dep > tau + 1e-9:
                    break
                link.server_free = dep
            link.queue.popleft()
            self._leave_queue(link, v, dep)

    def run(self, max_time: Optional[float] = None):
        cfg = self.cfg
        step = cfg.time_step
        controlled = [l for l in self.links.values() if l.control is not None]
        max_time = max_time or 6.0 * self.end_inject + 3600.0
        t = 0.0
        while True:
            t_next = t + step
            for k in range(len(self.sources)):
                while self.next_inj[k] < t_next and (self.drain_inflow
                                                     or self.next_inj[k] < self.end_inject):
                    depart = self.next_inj[k]
                    i = self._pick(k)
                    v = _Vehicle(self.names[i], self.paths[i], depart)
                    if depart < self.end_inject:
                        self.vehicles.append(v)
                        if depart >= self.warmup:
                            self.pending += 1
                    self._enter(v, depart)
                    self.next_inj[k] = depart + self._headway(k)
            while self.heap and self.heap[0][0] < t_next:
                time, _, v = heapq.heappop(self.heap)
                link = self.links[v.path[v.pos]]
                link.occupancy -= 1
                last = v.pos + 1 == len(v.path)
                if link.control is None or (last and not self.terminal_queue):
                    if last:
                        self._arrive(v, time)
                    else:
                        v.pos += 1
                        self._enter(v, time)
                else:
                    v.queued_at = time
                    link.queue.append(v)
            for link in controlled:
                if link.queue:
                    self._discharge(link, t_next)
                n = len(link.queue)
                if n > link.max_queue and t_next >= self.warmup:
                    link.max_queue = n
                if cfg.check_spillback and n > link.storage:
                    raise SpillbackDetected(link.id, t_next, n, link.storage)
            t = t_next
            if cfg.trace:
                self.trace.append((t, sum(l.occupancy for l in self.links.values()),
                                   sum(len(l.queue) for l in controlled)))
            if self.snapshot is None and t >= self.end_inject - 1e-9:
                in_net = sum(l.occupancy + len(l.queue) for l in self.links.values())
                injected = len(self.vehicles)
                arrived = sum(1 for v in self.vehicles if v.arrive is not None)
                self.snapshot = (injected, arrived, in_net)
            if self.snapshot is not None and self.pending == 0:
                break
            if t >= max_time:
                break
        return self

    def measured(self):
        return [v for v in self.vehicles if v.depart >= self.warmup]


def _link_table(network: Network, check_storage: bool = True) -> dict:
    table = {}
    for link in network.links:
        if link.is_phantom:
            continue
        inter = network.intersections.get(link.head)
        control = spec = None
        if inter is not None and inter.control != Control.UNCONTROLLED:
            control, spec = inter.control, inter.spec
        table[link.id] = _Link(link.id, network.delay_for(link.id), link.free_flow_time,
                               link.length / VEHICLE_SPACING, control, spec)
    return table


def _route_flow_map(network: Network, route_flows) -> dict:
    if hasattr(route_flows, "route_ids"):
        flows = dict(zip(route_flows.route_ids, map(float, route_flows.route_flows)))
    else:
        flows = {k: float(v) for k, v in route_flows.items()}
    for rid in flows:
        network.route(rid)
    for od in network.od_pairs:
        total = sum(flows.get(r.id, 0.0) for r in network.routes_for(od.id))
        if not math.isclose(total, od.demand, rel_tol=1e-6, abs_tol=1e-6):
            raise ValueError(f"route flows for OD {od.id} sum to {total}, demand is {od.demand}")
    if any(v < 0 for v in flows.values()):
        raise ValueError("route flows must be non-negative")
    return flows


def _max_cycle(network: Network, nodes) -> float:
    cycles = [network.intersections[n].cycle for n in nodes
              if n in network.intersections and network.intersections[n].cycle]
    return max(cycles, default=0.0)


def default_warmup(network: Network, flows: Mapping[str, float]) -> float:
    """Two cycles, or longer if a route takes longer to traverse at its assigned flow."""
    from .equilibrium import build_problem  # local: equilibrium is heavier to import

    problem = build_problem(network)
    x = np.array([flows.get(r, 0.0) for r in problem.routing.route_ids])
    times = problem.route_times(x) * SECONDS_PER_HOUR if x.size else np.zeros(0)
    used = times[x > 0]
    nodes = {l.head for l in network.links}
    return max(2.0 * _max_cycle(network, nodes), float(used.max()) if used.size else 0.0)


def simulate(network: Network, route_flows, config: SimConfig = SimConfig()) -> SimResult:
    """Simulate route flows (veh/h) and total the measured vehicles' travel times."""
    flows = _route_flow_map(network, route_flows)
    table = _link_table(network)
    nodes = {network.link(l).head for l in table}
    max_cycle = _max_cycle(network, nodes)
    if config.horizon < 10 * max_cycle:
        raise ValueError(f"horizon {config.horizon}s shorter than 10 cycles ({max_cycle}s)")
    warmup = config.warmup if config.warmup is not None else default_warmup(network, flows)

    routes = [r for r in network.routes if flows.get(r.id, 0.0) > 0]
    paths = [tuple(l for l in r.links if l in table) for r in routes]
    names = [r.id for r in routes]
    groups = [(od.id, [i for i, r in enumerate(routes) if r.od_pair == od.id])
              for od in network.od_pairs]
    run = _Run(table, paths, names, [flows[r.id] for r in routes], config, warmup,
               groups=groups)
    try:
        run.run()
    except SpillbackDetected as exc:
        exc.result = _summarize(run, table, spilled=exc.link_id)
        raise
    return _summarize(run, table)


def _summarize(run: _Run, table, spilled: Optional[str] = None) -> SimResult:
    measured = [v for v in run.measured() if v.arrive is not None]
    window = run.end_inject - run.warmup
    ttt = sum(v.arrive - v.depart for v in measured) / SECONDS_PER_HOUR
    ff = {rid: sum(table[l].free_flow_s for l in path) for rid, path in
          zip(run.names, run.paths)}
    bound = sum(ff[v.route] for v in measured) / SECONDS_PER_HOUR
    lo, hi = run.warmup, run.end_inject
    links = {}
    for lid, link in sorted(table.items()):
        trav = [tt for t, tt in link.traversals if lo <= t < hi]
        waits = [w for t, w in link.waits if lo <= t < hi]
        links[lid] = {
            "mean_flow": len(trav) / (window / SECONDS_PER_HOUR),
            "mean_travel_time": float(np.mean(trav)) if trav else 0.0,
            "mean_queue_delay": float(np.mean(waits)) if waits else 0.0,
            "max_queue": link.max_queue,
        }
    routes = {}
    for name in run.names:
        tts = [v.arrive - v.depart for v in measured if v.route == name]
        routes[name] = {"vehicles": len(tts),
                        "mean_travel_time": float(np.mean(tts)) if tts else 0.0}
    injected, arrived, in_net = run.snapshot or (len(run.vehicles), 0, 0)
    return SimResult(
        total_travel_time=ttt,
        measured_vehicles=len(measured),
        window_hours=window / SECONDS_PER_HOUR,
        free_flow_bound=bound,
        injected=injected,
        arrived=arrived,
        in_network=in_net,
        per_link_stats=links,
        route_stats=routes,
        spillback_flag={lid: lid == spilled for lid in sorted(table)},
        warmup=run.warmup,
        demand=float(sum(run.rates)),
        trace=run.trace,
    )


def random_flow_schedule(rng: np.random.Generator, n: int, low: float = 0.0,
                         high: float = 3000.0) -> np.ndarray:
    return rng.uniform(low, high, size=n)


def generate_observations(network: Network, link_id: str, flow_schedule,
                          config: SimConfig = SimConfig(injection="deterministic"),
                          kind: Optional[str] = None, window: float = 200.0,
                          queue_horizon: float = 3600.0, replicates: int = 1) -> ObservationSet:
    """Isolated-link runs, one per scheduled flow.

    ``kind="bpr"``: mean traversal time of vehicles entering during a
    ``window``-second measurement (after a warm-up).  ``kind="queue"``:
    the approach is fed for ``queue_horizon`` seconds from empty; records
    mean per-cycle discharges and the mean queue wait.  ``link_id`` may be
    a phantom link, in which case its approach link is used.  The default
    kind is ``queue`` for phantom links and approaches to controlled nodes.

    ``replicates`` pools several queue runs per flow.  With deterministic
    injection the replicates start the stream at evenly spaced offsets
    across one cycle, which averages out the beat between the headway and
    the signal timing; with Poisson injection they use
    consecutive seeds.
    """
    if replicates < 1:
        raise ValueError("replicates must be at least 1")
    link = network.link(link_id)
    if link.is_phantom:
        link = network.link(link.approach)
    inter = network.intersections.get(link.head)
    controlled = inter is not None and inter.control != Control.UNCONTROLLED
    kind = kind or ("queue" if controlled or network.link(link_id).is_phantom else "bpr")
    fn = network.delay_for(link.id)
    flows = np.asarray(flow_schedule, dtype=float)
    storage = link.length / VEHICLE_SPACING

    if kind == "bpr":
        times = []
        for i, z in enumerate(flows):
            if z <= 0:
                times.append(float(evaluate(fn, 0.0)))
                continue
            warm = max(60.0, 3.0 * float(evaluate(fn, z)) * SECONDS_PER_HOUR)
            cfg = SimConfig(horizon=window, time_step=config.time_step,
                            seed=config.seed + i, injection=config.injection,
                            warmup=warm, check_spillback=False)
            table = {link.id: _Link(link.id, fn, link.free_flow_time, storage)}
            run = _Run(table, [(link.id,)], [link.id], [z], cfg, warm).run()
            tts = [v.arrive - v.depart for v in run.measured() if v.arrive is not None]
            times.append(float(np.mean(tts)) / SECONDS_PER_HOUR if tts
                         else float(evaluate(fn, z)))
        return ObservationSet(link_id, flows, travel_time=np.array(times), window=window,
                              length=link.length)

    if kind != "queue":
        raise ValueError(f"unknown observation kind {kind!r}")
    if not controlled:
        raise ValueError(f"link {link.id} does not end at a controlled intersection")
    spec = inter.spec
    cycle = spec.D if isinstance(spec, SignalSpec) else spec.w
    thr, delays = [], []
    for i, z in enumerate(flows):
        if z <= 0:
            thr.append(0.0)
            delays.append(0.0)
            continue
        waits, counts = [], []
        for r in range(replicates):
            deterministic = config.injection == "deterministic"
            cfg = SimConfig(horizon=queue_horizon, time_step=config.time_step,
                            seed=config.seed + i + (0 if deterministic else r * len(flows)),
                            injection=config.injection, warmup=0.0, check_spillback=False)
            table = {link.id: _Link(link.id, fn, link.free_flow_time, storage,
                                    inter.control, spec)}
            offset = (r + 0.5) * cycle / replicates if deterministic and replicates > 1 else None
            _Run(table, [(link.id,)], [link.id], [z], cfg, 0.0, terminal_queue=True,
                 drain_inflow=False, offset=offset).run()
            lk = table[link.id]
            waits.extend(w for _, w in lk.waits)
            arrivals = [t for t, _ in lk.waits]
            if arrivals:
                first = math.ceil(min(arrivals) / cycle) + 1
                last = math.floor((queue_horizon + link.free_flow_time) / cycle)
                if last > first:
                    counts.extend(np.histogram(lk.discharges,
                                               bins=np.arange(first, last + 1) * cycle)[0])
        delays.append(float(np.mean(waits)) / SECONDS_PER_HOUR if waits else 0.0)
        thr.append(float(np.mean(counts)) if counts else 0.0)
    return ObservationSet(link_id, flows, throughput=np.array(thr), avg_delay=np.array(delays),
                          window=queue_horizon, cycle=cycle)
