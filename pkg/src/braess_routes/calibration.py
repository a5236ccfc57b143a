"""Fitting link (BPR) and queue delay functions from observations.

Also holds the closed-form intersection quantities: saturation rates,
throughput, per-cycle queue growth and the expected red-phase delay.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Mapping, Optional, Union

import numpy as np
from scipy.optimize import minimize_scalar

from .delays import SECONDS_PER_HOUR, BPRDelay, QueueDelay
from .errors import InsufficientData

log = logging.getLogger(__name__)

#: Minimum sample count for a BPR fit attempt.
MIN_BPR_SAMPLES = 8
MIN_QUEUE_SAMPLES = 4
B_RANGE = (0.25, 12.0)


class CalibrationWarning(UserWarning):
    pass


@dataclass(frozen=True)
class SignalSpec:
    """Fixed-time signal: cycle ``D`` and red ``L_red`` in seconds, ``n`` vehicles per green."""

    D: float
    L_red: float
    n: int

    def __post_init__(self):
        if not 0 < self.L_red < self.D:
            raise ValueError(f"need 0 < L_red < D, got L_red={self.L_red}, D={self.D}")
        if self.n < 1:
            raise ValueError(f"n must be at least 1, got {self.n}")

    @property
    def green(self) -> float:
        return self.D - self.L_red


@dataclass(frozen=True)
class StopSpec:
    """STOP sign; ``w`` is the per-vehicle stop delay in seconds."""

    w: float

    def __post_init__(self):
        if not self.w > 0:
            raise ValueError(f"w must be positive, got {self.w}")


@dataclass(frozen=True)
class Uncontrolled:
    cap: float


ControlSpec = Union[SignalSpec, StopSpec, Uncontrolled]


def saturation_rate(spec: ControlSpec) -> float:
    """Maximum sustainable discharge in veh/h."""
    if isinstance(spec, SignalSpec):
        return 3600.0 * spec.n / spec.D
    if isinstance(spec, StopSpec):
        return 3600.0 / spec.w
    if isinstance(spec, Uncontrolled):
        return float(spec.cap)
    raise TypeError(f"unknown control spec {spec!r}")


def throughput(z, s: float):
    """Hourly discharge for inflow ``z``; never more than ``s + 2``."""
    z = np.asarray(z, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        over = s + 2.0 * (z - s) / z
    out = np.where(z < s, z, over)
    return float(out) if out.ndim == 0 else out


def queue_growth(z, s: float, D: float):
    """Vehicles added to the queue per cycle of ``D`` seconds."""
    dq = (np.asarray(z, dtype=float) - throughput(z, s)) * D / 3600.0
    dq = np.maximum(dq, 0.0)
    return float(dq) if dq.ndim == 0 else dq


def expected_red_delay_seconds(L_red: float, D: float) -> float:
    return L_red * (1.0 + L_red) / (2.0 * D)


def expected_red_delay(spec: SignalSpec) -> float:
    """Expected wait caused by the red phase, in hours."""
    return expected_red_delay_seconds(spec.L_red, spec.D) / SECONDS_PER_HOUR


def analytic_queue_delay(spec: ControlSpec, horizon: float = 1.0) -> QueueDelay:
    """Queue delay implied by the control alone, without observations.

    Above saturation a fluid queue grows at ``z - s`` for ``horizon`` hours;
    the average wait of vehicles arriving in that window is
    ``(z - s) * horizon / (2 s)``, which fixes the slope.
    """
    s = saturation_rate(spec)
    if isinstance(spec, SignalSpec):
        d0 = expected_red_delay(spec)
    elif isinstance(spec, StopSpec):
        d0 = spec.w / SECONDS_PER_HOUR
    else:
        d0 = 0.0
    return QueueDelay.through_breakpoint(d0=d0, alpha=horizon / (2.0 * s), s=s)


@dataclass
class ObservationSet:
    """Per-link samples.

    BPR data carries ``travel_time``; queue data carries ``throughput``
    (vehicles per cycle of ``cycle`` seconds) and ``avg_delay``.  Times
    are hours, flows veh/h, ``density`` veh/km.
    """

    link_id: str
    flow: np.ndarray
    travel_time: Optional[np.ndarray] = None
    throughput: Optional[np.ndarray] = None
    avg_delay: Optional[np.ndarray] = None
    density: Optional[np.ndarray] = None
    window: float = 200.0
    cycle: Optional[float] = None
    length: Optional[float] = None

    def __post_init__(self):
        self.flow = np.asarray(self.flow, dtype=float)
        for name in ("travel_time", "throughput", "avg_delay", "density"):
            value = getattr(self, name)
            if value is not None:
                value = np.asarray(value, dtype=float)
                if value.shape != self.flow.shape:
                    raise ValueError(f"{name} has {value.size} samples, flow has {self.flow.size}")
                setattr(self, name, value)

    @property
    def kind(self) -> str:
        return "bpr" if self.travel_time is not None else "queue"

    def __len__(self) -> int:
        return int(self.flow.size)


@dataclass(frozen=True)
class BPRFit:
    link_id: str
    a: float
    b: float
    residual_norm: float = float("nan")
    n_samples: int = 0
    inherited_from: Optional[str] = None

    @property
    def inherited(self) -> bool:
        return self.inherited_from is not None


def _best_a(y, basis):
    denom = float(basis @ basis)
    if denom == 0.0:
        return 0.0
    return max(float(y @ basis) / denom, 0.0)


def fit_bpr(obs: ObservationSet, t0: float, cap: float) -> BPRFit:
    """Least-squares ``(a, b)`` for travel times given ``t0`` (h) and ``cap``.

    ``a`` is closed-form for each ``b``; ``b`` is found by a log-spaced
    scan followed by bounded Brent refinement of the profiled residual.
    """
    if obs.travel_time is None:
        raise InsufficientData(f"link {obs.link_id}: no travel-time samples")
    z, T = obs.flow, obs.travel_time
    if len(z) < MIN_BPR_SAMPLES or not (np.any(z < 0.5 * cap) and np.any(z > 0.5 * cap)):
        raise InsufficientData(
            f"link {obs.link_id}: need >= {MIN_BPR_SAMPLES} samples on both sides of "
            f"half capacity ({0.5 * cap:.0f} veh/h), got {len(z)}"
        )
    u = z / cap
    y = T - t0

    def sse(b):
        basis = t0 * np.power(u, b)
        a = _best_a(y, basis)
        r = a * basis - y
        return float(r @ r)

    grid = np.geomspace(*B_RANGE, 241)
    scores = np.array([sse(b) for b in grid])
    k = int(np.argmin(scores))
    lo, hi = grid[max(k - 1, 0)], grid[min(k + 1, grid.size - 1)]
    if hi > lo:
        res = minimize_scalar(sse, bounds=(lo, hi), method="bounded",
                              options={"xatol": 1e-12, "maxiter": 500})
        b = float(res.x) if res.fun <= scores[k] else float(grid[k])
    else:
        b = float(grid[k])
    a = _best_a(y, t0 * np.power(u, b))
    return BPRFit(obs.link_id, a, b, math.sqrt(sse(b)), len(z))


def inherit_parameters(failed_link: str, upstream: Optional[BPRFit]) -> BPRFit:
    """Copy ``(a, b)`` from an upstream fit onto a link whose own fit failed."""
    if upstream is None:
        raise InsufficientData(f"link {failed_link}: no fitted upstream link to inherit from")
    source = upstream.inherited_from or upstream.link_id
    return BPRFit(failed_link, upstream.a, upstream.b, inherited_from=source)


def _fit_line(x, y):
    A = np.column_stack([x, np.ones_like(x)])
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    r = A @ coef - y
    return float(coef[0]), float(coef[1]), float(r @ r)


def _two_segment_fit(x, y, min_side: int = 3):
    """Split sorted samples into two least-squares lines; best split by total SSE."""
    order = np.argsort(x, kind="stable")
    x, y = x[order], y[order]
    best = None
    for i in range(min_side, x.size - min_side + 1):
        m1, c1, e1 = _fit_line(x[:i], y[:i])
        m2, c2, e2 = _fit_line(x[i:], y[i:])
        if best is None or e1 + e2 < best[0] - 1e-12 * max(best[0], 1e-300):
            best = (e1 + e2, (m1, c1), (m2, c2))
    return best


def _intersect(l1, l2):
    (m1, c1), (m2, c2) = l1, l2
    if abs(m1 - m2) <= 1e-6 * max(abs(m1), abs(m2), 1e-12):
        return None
    x = (c2 - c1) / (m1 - m2)
    return x, m1 * x + c1


def estimate_capacity(obs: ObservationSet, method: str = "max_flow") -> float:
    """Capacity in veh/h from a flow-density sample.

    ``max_flow`` takes the largest recorded flow.  ``pwl_intersection``
    fits free-flow and congested lines to the fundamental diagram and
    returns the flow at their intersection.
    """
    if method == "max_flow":
        if len(obs) < 2:
            raise InsufficientData(f"link {obs.link_id}: max_flow needs >= 2 samples")
        return float(obs.flow.max())
    if method != "pwl_intersection":
        raise ValueError(f"unknown capacity method {method!r}")
    if len(obs) < 6:
        raise InsufficientData(f"link {obs.link_id}: pwl_intersection needs >= 6 samples")
    density = obs.density
    if density is None:
        if obs.travel_time is None or obs.length is None:
            raise InsufficientData(f"link {obs.link_id}: no density and no way to derive it")
        density = obs.flow * obs.travel_time / (obs.length / 1000.0)
    _, left, right = _two_segment_fit(density, obs.flow)
    point = _intersect(left, right)
    if point is None or not np.all(np.isfinite(point)):
        warnings.warn(f"link {obs.link_id}: fundamental-diagram branches are parallel, "
                      "falling back to max_flow", CalibrationWarning, stacklevel=2)
        return float(obs.flow.max())
    return float(point[1])


def estimate_saturation_from_data(obs: ObservationSet) -> float:
    """Saturation rate (veh/h) where per-cycle throughput stops growing with flow."""
    if obs.throughput is None or obs.cycle is None:
        raise InsufficientData(f"link {obs.link_id}: need throughput samples and a cycle length")
    z, n = obs.flow, obs.throughput
    if len(z) < 6:
        raise InsufficientData(f"link {obs.link_id}: need >= 6 throughput samples")
    _, left, right = _two_segment_fit(z, n)
    point = _intersect(left, right)
    if point is None or left[0] <= 0 or right[0] > 0.5 * left[0]:
        warnings.warn(f"link {obs.link_id}: no throughput breakpoint detected, "
                      "using the maximum observed flow", CalibrationWarning, stacklevel=2)
        return float(z.max())
    return float(point[1]) * 3600.0 / obs.cycle


def estimate_constant_delay(obs: ObservationSet, s: float) -> float:
    """Mean observed delay (h) over undersaturated samples."""
    if obs.avg_delay is None:
        raise InsufficientData(f"link {obs.link_id}: no delay samples")
    mask = obs.flow < s
    if not mask.any():
        raise InsufficientData(f"link {obs.link_id}: no samples below saturation")
    return float(obs.avg_delay[mask].mean())


def fit_queue_delay(obs: ObservationSet, s: float, d0: float, strict: bool = False) -> QueueDelay:
    """Fit the oversaturated branch as a line pinned to ``(s, d0)``.

    With fewer than four samples at or above ``s`` the result is the
    constant ``d0`` (a warning is issued), or ``InsufficientData`` if
    ``strict``.
    """
    if obs.avg_delay is None:
        raise InsufficientData(f"link {obs.link_id}: no delay samples")
    mask = obs.flow >= s
    if mask.sum() < MIN_QUEUE_SAMPLES:
        msg = (f"link {obs.link_id}: {int(mask.sum())} samples at or above saturation, "
               f"need {MIN_QUEUE_SAMPLES}")
        if strict:
            raise InsufficientData(msg)
        warnings.warn(msg + "; using a constant delay", CalibrationWarning, stacklevel=2)
        return QueueDelay.constant(d0, s=s)
    dz = obs.flow[mask] - s
    dy = obs.avg_delay[mask] - d0
    denom = float(dz @ dz)
    alpha = max(float(dz @ dy) / denom, 0.0) if denom > 0 else 0.0
    return QueueDelay.through_breakpoint(d0=d0, alpha=alpha, s=s)


@dataclass
class CalibrationResult:
    delays: dict = field(default_factory=dict)
    diagnostics: dict = field(default_factory=dict)

    def count(self, status: str) -> int:
        return sum(1 for d in self.diagnostics.values() if d["status"] == status)

    @property
    def inherited(self) -> int:
        return self.count("inherited")

    @property
    def physical_links(self) -> int:
        return sum(1 for d in self.diagnostics.values() if d["kind"] == "physical")

    @property
    def inherited_fraction(self) -> float:
        n = self.physical_links
        return self.inherited / n if n else 0.0


def calibrate_network(network, observations: Mapping[str, ObservationSet],
                      capacity_method: Optional[str] = None,
                      horizon: float = 1.0) -> CalibrationResult:
    """Fit every link of ``network`` from ``observations``.

    BPR observations are keyed by physical link id.  Queue observations
    are keyed by phantom link id or by the approach (incoming) link id.
    Failed BPR fits inherit from an upstream fitted link; links with no
    fitted upstream keep their default shape.
    """
    bpr_obs = {k: v for k, v in observations.items() if v.kind == "bpr"}
    queue_obs = {k: v for k, v in observations.items() if v.kind == "queue"}
    result = CalibrationResult()
    fits: dict[str, BPRFit] = {}
    caps: dict[str, float] = {}
    failed: list[str] = []

    physical = [l for l in network.links if not l.is_phantom]
    for link in physical:
        t0 = link.free_flow_time / SECONDS_PER_HOUR
        cap = link.capacity
        obs = bpr_obs.get(link.id)
        if obs is not None and capacity_method is not None:
            try:
                cap = estimate_capacity(obs, capacity_method)
            except InsufficientData:
                pass
        caps[link.id] = cap
        if obs is None:
            failed.append(link.id)
            continue
        try:
            fits[link.id] = fit_bpr(obs, t0, cap)
        except InsufficientData as exc:
            log.info("%s", exc)
            failed.append(link.id)

    fitted_ids = set(fits)
    pending = sorted(failed)
    while pending:
        progress = []
        for lid in pending:
            tail = network.link(lid).tail
            ups = sorted(l.id for l in physical if l.head == tail and l.id in fits)
            if ups:
                fits[lid] = inherit_parameters(lid, fits[ups[0]])
                progress.append(lid)
        if not progress:
            break
        pending = [lid for lid in pending if lid not in progress]

    for link in physical:
        t0 = link.free_flow_time / SECONDS_PER_HOUR
        fit = fits.get(link.id)
        if fit is None:
            a, b = link.bpr
            status = "default"
        else:
            a, b = fit.a, fit.b
            status = "inherited" if fit.inherited else "fitted"
        result.delays[link.id] = BPRDelay(t0=t0, a=a, b=b, cap=caps[link.id])
        diag = {"kind": "physical", "status": status, "a": a, "b": b, "cap": caps[link.id]}
        if fit is not None and link.id in fitted_ids:
            diag["residual_norm"] = fit.residual_norm
            diag["n_samples"] = fit.n_samples
        if fit is not None and fit.inherited:
            diag["inherited_from"] = fit.inherited_from
        result.diagnostics[link.id] = diag

    for link in network.links:
        if not link.is_phantom:
            continue
        spec = network.intersections[link.head].spec
        obs = queue_obs.get(link.id) or queue_obs.get(link.approach)
        s_formula = saturation_rate(spec)
        if obs is None:
            fn = analytic_queue_delay(spec, horizon)
            diag = {"kind": "phantom", "status": "analytic", "s": fn.s}
        else:
            s = s_formula
            if obs.throughput is not None and obs.cycle is not None and len(obs) >= 6:
                with warnings.catch_warnings(record=True):
                    warnings.simplefilter("always")
                    s = estimate_saturation_from_data(obs)
            d0 = expected_red_delay(spec) if isinstance(spec, SignalSpec) \
                else spec.w / SECONDS_PER_HOUR
            with warnings.catch_warnings(record=True) as caught:
                warnings.simplefilter("always")
                fn = fit_queue_delay(obs, s, d0)
            status = "queue-constant" if caught else "queue-fitted"
            diag = {"kind": "phantom", "status": status, "s": s, "s_formula": s_formula}
        diag.update(d0=fn.d0, alpha=fn.alpha, beta=fn.beta)
        result.delays[link.id] = fn
        result.diagnostics[link.id] = diag
    return result
