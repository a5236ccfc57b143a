"""Link and queue delay functions with their Beckmann potentials.

Internal units are hours for times and veh/h for flows.  Every function
accepts scalars or numpy arrays of flows.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence, Union

import numpy as np

SECONDS_PER_HOUR = 3600.0

#: Slope added to every queue delay so that link flows at equilibrium are unique.
QUEUE_EPS = 1e-9


@dataclass(frozen=True)
class BPRDelay:
    """``t0 * (1 + a * (z / cap) ** b)``."""

    t0: float
    a: float = 0.15
    b: float = 4.0
    cap: float = 1800.0

    def __post_init__(self):
        if not self.t0 > 0:
            raise ValueError(f"t0 must be positive, got {self.t0}")
        if not self.a >= 0:
            raise ValueError(f"a must be non-negative, got {self.a}")
        if not self.b > 0:
            raise ValueError(f"b must be positive, got {self.b}")
        if not self.cap > 0:
            raise ValueError(f"cap must be positive, got {self.cap}")

    @classmethod
    def from_geometry(cls, length: float, free_flow_speed: float, cap: float,
                      a: float = 0.15, b: float = 4.0) -> BPRDelay:
        """Build from link length (m) and free-flow speed (m/s)."""
        return cls(t0=length / free_flow_speed / SECONDS_PER_HOUR, a=a, b=b, cap=cap)

    def __call__(self, z):
        return eval_bpr(self, z)


@dataclass(frozen=True)
class QueueDelay:
    """Piecewise-linear queue delay: ``d0`` below ``s``, ``alpha*z + beta`` above.

    ``eps * z`` is added on both branches.  The upper branch is evaluated
    as ``d0 + alpha*(z - s)`` so the two branches meet exactly at ``s``;
    ``beta`` is kept for reporting.
    """

    d0: float
    alpha: float
    beta: float
    s: float
    eps: float = QUEUE_EPS

    def __post_init__(self):
        if self.d0 < 0:
            raise ValueError(f"d0 must be non-negative, got {self.d0}")
        if self.alpha < 0:
            raise ValueError(f"alpha must be non-negative, got {self.alpha}")
        if self.s < 0:
            raise ValueError(f"saturation rate must be non-negative, got {self.s}")
        if self.eps < 0:
            raise ValueError("eps must be non-negative")
        if math.isfinite(self.s):
            jump = self.alpha * self.s + self.beta - self.d0
            if abs(jump) > 1e-9 * max(abs(self.d0), abs(self.beta), 1e-12):
                raise ValueError(
                    f"queue delay is discontinuous at s={self.s}: "
                    f"alpha*s+beta={self.alpha * self.s + self.beta} != d0={self.d0}"
                )

    @classmethod
    def constant(cls, d0: float, s: float = math.inf, eps: float = QUEUE_EPS) -> QueueDelay:
        return cls(d0=d0, alpha=0.0, beta=d0, s=s, eps=eps)

    @classmethod
    def linear(cls, intercept: float, slope: float, eps: float = QUEUE_EPS) -> QueueDelay:
        """``intercept + slope * z`` on all of ``[0, inf)`` (breakpoint at zero)."""
        return cls(d0=intercept, alpha=slope, beta=intercept, s=0.0, eps=eps)

    @classmethod
    def through_breakpoint(cls, d0: float, alpha: float, s: float,
                           eps: float = QUEUE_EPS) -> QueueDelay:
        """Line of slope ``alpha`` anchored at ``(s, d0)``; beta follows from continuity.

        ``d0`` is re-rounded to ``alpha*s + beta`` (a change of at most one
        rounding step of ``alpha*s``) so the stored coefficients satisfy
        continuity exactly in floating point, not just to rounding.
        """
        beta = d0 - alpha * s
        return cls(d0=alpha * s + beta, alpha=alpha, beta=beta, s=s, eps=eps)

    def __call__(self, z):
        return eval_queue(self, z)


DelayFunction = Union[BPRDelay, QueueDelay]


def _flows(z):
    z = np.asarray(z, dtype=float)
    if np.any(z < 0):
        raise ValueError("flow must be non-negative")
    return z


def _scalar(value, like):
    return float(value) if np.ndim(like) == 0 else value


def eval_bpr(fn: BPRDelay, z):
    z = _flows(z)
    return _scalar(_bpr(z, fn.t0, fn.a, fn.b, fn.cap), z)


def eval_queue(fn: QueueDelay, z):
    z = _flows(z)
    return _scalar(_queue(z, fn.d0, fn.alpha, fn.beta, fn.s, fn.eps), z)


def evaluate(fn: DelayFunction, z):
    if isinstance(fn, BPRDelay):
        return eval_bpr(fn, z)
    if isinstance(fn, QueueDelay):
        return eval_queue(fn, z)
    raise TypeError(f"not a delay function: {fn!r}")


def beckmann(fn: DelayFunction, z):
    """Exact antiderivative of the delay from 0 to ``z``."""
    z = _flows(z)
    if isinstance(fn, BPRDelay):
        out = _bpr_potential(z, fn.t0, fn.a, fn.b, fn.cap)
    elif isinstance(fn, QueueDelay):
        out = _queue_potential(z, fn.d0, fn.alpha, fn.beta, fn.s, fn.eps)
    else:
        raise TypeError(f"not a delay function: {fn!r}")
    return _scalar(out, z)


# Array kernels.  Parameters broadcast against z's trailing axis.

def _bpr(z, t0, a, b, cap):
    return t0 * (1.0 + a * np.power(z / cap, b))


def _bpr_potential(z, t0, a, b, cap):
    return t0 * z + t0 * a * np.power(z / cap, b) * z / (b + 1.0)


def _queue(z, d0, alpha, beta, s, eps):
    # s may be inf (pure constant); keep the unused branch free of inf
    s_fin = np.where(np.isfinite(s), s, 0.0)
    return d0 + np.where(z < s, 0.0, alpha * (z - s_fin)) + eps * z


def _queue_potential(z, d0, alpha, beta, s, eps):
    s_fin = np.where(np.isfinite(s), s, 0.0)
    over = np.where(z < s, 0.0, z - s_fin)
    return d0 * z + alpha * over * over / 2.0 + eps * z * z / 2.0


class DelayVector:
    """Delay functions for a fixed list of links, evaluated together.

    ``delay(z)`` and ``potential(z)`` take flows with the link axis last,
    so a ``(n_points, n_links)`` batch evaluates in one call.  Tiny negative
    flows from floating-point cancellation are clipped to zero.
    """

    def __init__(self, functions: Sequence[DelayFunction]):
        self.functions = tuple(functions)
        self.size = len(self.functions)
        bpr = [i for i, f in enumerate(self.functions) if isinstance(f, BPRDelay)]
        que = [i for i, f in enumerate(self.functions) if isinstance(f, QueueDelay)]
        if len(bpr) + len(que) != self.size:
            raise TypeError("every link needs a BPRDelay or QueueDelay")
        self._bpr_idx = np.array(bpr, dtype=int)
        self._que_idx = np.array(que, dtype=int)
        fb = [self.functions[i] for i in bpr]
        fq = [self.functions[i] for i in que]
        self._bpr = tuple(np.array([getattr(f, k) for f in fb], dtype=float)
                          for k in ("t0", "a", "b", "cap"))
        self._que = tuple(np.array([getattr(f, k) for f in fq], dtype=float)
                          for k in ("d0", "alpha", "beta", "s", "eps"))

    def _apply(self, z, bpr_kernel, queue_kernel):
        z = np.maximum(np.asarray(z, dtype=float), 0.0)
        out = np.empty_like(z)
        if self._bpr_idx.size:
            out[..., self._bpr_idx] = bpr_kernel(z[..., self._bpr_idx], *self._bpr)
        if self._que_idx.size:
            out[..., self._que_idx] = queue_kernel(z[..., self._que_idx], *self._que)
        return out

    def delay(self, z) -> np.ndarray:
        return self._apply(z, _bpr, _queue)

    def potential(self, z) -> np.ndarray:
        return self._apply(z, _bpr_potential, _queue_potential)

    def objective(self, z):
        """Sum of Beckmann potentials over the link axis."""
        return self.potential(z).sum(axis=-1)


# JSON helpers.  Keys ending in ``_s`` are seconds and converted to hours.

_BPR_KEYS = ("t0", "a", "b", "cap")
_QUEUE_KEYS = ("d0", "alpha", "beta", "s", "eps")
_TIME_KEYS = {"t0", "d0", "beta"}


def delay_from_dict(data: Mapping) -> DelayFunction:
    data = dict(data)
    kind = data.pop("type", None)
    params = {}
    for key, value in data.items():
        if key == "s" and value is None:
            params["s"] = math.inf
        elif key.endswith("_s"):
            base = key[:-2]
            if base in _TIME_KEYS or base == "alpha":
                params[base] = float(value) / SECONDS_PER_HOUR
            else:
                raise ValueError(f"unknown seconds-valued key {key!r}")
        else:
            params[key] = float(value)
    if kind == "bpr":
        unknown = set(params) - set(_BPR_KEYS)
        if unknown:
            raise ValueError(f"unknown BPR parameters: {sorted(unknown)}")
        return BPRDelay(**params)
    if kind == "queue":
        unknown = set(params) - set(_QUEUE_KEYS)
        if unknown:
            raise ValueError(f"unknown queue parameters: {sorted(unknown)}")
        return QueueDelay(**params)
    raise ValueError(f"delay type must be 'bpr' or 'queue', got {kind!r}")


def delay_to_dict(fn: DelayFunction) -> dict:
    if isinstance(fn, BPRDelay):
        return {"type": "bpr", **{k: getattr(fn, k) for k in _BPR_KEYS}}
    if isinstance(fn, QueueDelay):
        out = {"type": "queue", **{k: getattr(fn, k) for k in _QUEUE_KEYS}}
        if not math.isfinite(fn.s):
            out["s"] = None
        return out
    raise TypeError(f"not a delay function: {fn!r}")
