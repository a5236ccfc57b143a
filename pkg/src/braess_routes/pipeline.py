"""The end-to-end workflow: calibrate, solve, detect, simulate, compare.

Each step is a plain function over in-memory objects; the CLI adds file
handling around them.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from .calibration import CalibrationResult, calibrate_network, saturation_rate
from .equilibrium import EquilibriumResult, solve_network
from .elimination import RemovalReport, SolverSettings, run_method
from .errors import SpillbackDetected
from .mesosim import SimConfig, SimResult, generate_observations, simulate
from .network import Control, Network, remove_routes

BPR_SAMPLES = 30
QUEUE_SAMPLES = 20
MAX_SYNTHETIC_FLOW = 3000.0


def synthesize_observations(network: Network, seed: int = 0,
                            bpr_samples: int = BPR_SAMPLES,
                            queue_samples: int = QUEUE_SAMPLES) -> dict:
    """Simulated calibration data for every physical link and every queue.

    Physical links get random flows from [0, 3000] veh/h, one per 200 s
    window.  Each controlled approach is fed flows up to 1.5 times its
    saturation rate; the samples are stored under every phantom link of
    that approach.
    """
    rng = np.random.default_rng(seed)
    out = {}
    cfg = SimConfig(injection="deterministic", seed=seed)
    for link in network.links:
        if link.is_phantom:
            continue
        flows = rng.uniform(0.0, MAX_SYNTHETIC_FLOW, size=bpr_samples)
        out[link.id] = generate_observations(network, link.id, flows, cfg, kind="bpr")
    by_approach = {}
    for link in network.links:
        if not link.is_phantom or link.control == Control.UNCONTROLLED:
            continue
        if link.approach not in by_approach:
            spec = network.intersections[link.head].spec
            s = saturation_rate(spec)
            flows = np.sort(rng.uniform(0.05 * s, 1.5 * s, size=queue_samples))
            qcfg = SimConfig(injection="poisson", seed=seed)
            by_approach[link.approach] = generate_observations(network, link.id, flows, qcfg,
                                                               kind="queue")
        obs = by_approach[link.approach]
        out[link.id] = type(obs)(link.id, obs.flow, throughput=obs.throughput,
                                 avg_delay=obs.avg_delay, window=obs.window, cycle=obs.cycle)
    return out


def calibrate(network: Network, observations: Mapping,
              capacity_method: Optional[str] = None) -> CalibrationResult:
    return calibrate_network(network, observations, capacity_method=capacity_method)


@dataclass
class Detection:
    network: Network
    before: EquilibriumResult
    after: EquilibriumResult
    report: RemovalReport

    @property
    def improvement(self) -> float:
        return self.report.improvement


def detect(network: Network, method: str = "greedy-route",
           settings: Optional[SolverSettings] = None, max_set_size: int = 2) -> Detection:
    settings = settings or SolverSettings()
    before = solve_network(network, settings.tolerance, settings.max_iters,
                           settings.method).raise_for_convergence()
    report = run_method(method, network, settings, max_set_size)
    if report.paradox_free:
        after = before
    else:
        after = solve_network(report.final_network, settings.tolerance, settings.max_iters,
                              settings.method).raise_for_convergence()
    return Detection(network, before, after, report)


@dataclass
class ValidationRow:
    """One line of the theory-versus-simulation table."""

    demand: float
    vehicles: int
    i_th: float
    y_model: float
    y_sim: Optional[float] = None
    i_sim: Optional[float] = None
    y_model_new: Optional[float] = None
    y_sim_new: Optional[float] = None
    improvement_diff: Optional[float] = None
    network_delay_diff: Optional[float] = None
    paradox_free: bool = False
    spillback: Optional[str] = None
    removed_routes: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def _rel(a: float, b: float) -> Optional[float]:
    return abs(a - b) / b if b else None


def validate(detection: Detection, config: SimConfig = SimConfig()) -> ValidationRow:
    """Simulate the original and the reduced assignment and compare with the model.

    Improvement diff is |I_th - I_sim| / I_sim; network delay diff is
    |Y - Y_sim| / Y_sim on the original network.  Spillback is recorded
    in the row instead of raised.
    """
    net, rep = detection.network, detection.report
    row = ValidationRow(demand=net.total_demand(), vehicles=0, i_th=rep.improvement,
                        y_model=detection.before.total_delay, paradox_free=rep.paradox_free,
                        removed_routes=list(rep.removed_routes))
    try:
        sim = simulate(net, detection.before, config)
    except SpillbackDetected as exc:
        row.spillback = exc.link_id
        return row
    row.vehicles = sim.measured_vehicles
    row.y_sim = sim.delay_rate
    row.network_delay_diff = _rel(row.y_model, row.y_sim)
    if rep.paradox_free:
        return row
    reduced = remove_routes(net, rep.removed_routes)
    try:
        sim_new = simulate(reduced, detection.after, config)
    except SpillbackDetected as exc:
        row.spillback = exc.link_id
        return row
    row.y_model_new = detection.after.total_delay
    row.y_sim_new = sim_new.delay_rate
    row.i_sim = (row.y_sim - row.y_sim_new) / row.y_sim if row.y_sim else None
    if row.i_sim:
        row.improvement_diff = abs(row.i_th - row.i_sim) / abs(row.i_sim)
    return row


def simulate_pair(detection: Detection, config: SimConfig = SimConfig()
                  ) -> tuple[SimResult, Optional[SimResult]]:
    sim = simulate(detection.network, detection.before, config)
    if detection.report.paradox_free:
        return sim, None
    reduced = remove_routes(detection.network, detection.report.removed_routes)
    return sim, simulate(reduced, detection.after, config)


TABLE_HEADER = ("demand_vph", "vehicles", "I_th_pct", "I_sim_pct", "improvement_diff_pct",
                "Y_model", "Y_sim", "network_delay_diff_pct", "note")


def table_rows(rows: Sequence[ValidationRow]) -> list[tuple]:
    def pct(v):
        return None if v is None else round(100.0 * v, 4)

    out = []
    for r in rows:
        note = f"spillback on {r.spillback}" if r.spillback else (
            "paradox-free" if r.paradox_free else "removed " + " ".join(r.removed_routes))
        out.append((round(r.demand, 6), r.vehicles, pct(r.i_th), pct(r.i_sim),
                    pct(r.improvement_diff), None if r.y_model is None else round(r.y_model, 6),
                    None if r.y_sim is None else round(r.y_sim, 6),
                    pct(r.network_delay_diff), note))
    return out


def format_table(rows: Sequence[ValidationRow]) -> str:
    """Fixed-width text rendering of the validation table."""
    header = ("Demand", "Vehicles", "I_th %", "I_sim %", "Impr. diff %", "Y", "Y_sim",
              "Delay diff %", "Note")
    body = [tuple("" if v is None else (f"{v:.2f}" if isinstance(v, float) else str(v))
                  for v in row) for row in table_rows(rows)]
    widths = [max(len(h), *(len(b[i]) for b in body)) if body else len(h)
              for i, h in enumerate(header)]
    def fmt(cells):
        # numbers right-aligned, the trailing note left-aligned
        out = [c.rjust(w) for c, w in zip(cells[:-1], widths)]
        return "  ".join(out + [cells[-1].ljust(widths[-1])]).rstrip()

    lines = [fmt(header), "  ".join("-" * w for w in widths)]
    lines += [fmt(b) for b in body]
    return "\n".join(lines) + "\n"
