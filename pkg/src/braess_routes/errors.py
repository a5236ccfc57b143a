"""Exception hierarchy shared by all modules."""

from __future__ import annotations


class BraessError(Exception):
    """Base class for every error raised by this package."""


class NetworkError(BraessError, ValueError):
    """Malformed network: bad ids, disconnected routes, missing metadata."""


class UnknownLinkError(NetworkError, KeyError):
    def __str__(self) -> str:  # KeyError would repr() the message
        return str(self.args[0]) if self.args else ""


class ConnectivityViolation(BraessError):
    """A removal would leave an OD pair with no route."""

    def __init__(self, od_ids):
        self.od_ids = tuple(sorted(od_ids))
        super().__init__(f"OD pairs left without a route: {', '.join(self.od_ids)}")


class NoRouteForDemand(BraessError):
    def __init__(self, od_ids):
        self.od_ids = tuple(sorted(od_ids))
        super().__init__(f"positive demand but no route for: {', '.join(self.od_ids)}")


class NonConvergence(BraessError):
    """Raised on request when a solve stops at max_iters above tolerance."""

    def __init__(self, gap: float, iterations: int):
        self.gap = gap
        self.iterations = iterations
        super().__init__(f"relative gap {gap:.3e} after {iterations} iterations")


class InsufficientData(BraessError):
    pass


class BudgetExceeded(BraessError):
    def __init__(self, needed: int, budget: int):
        self.needed = needed
        self.budget = budget
        super().__init__(f"{needed} evaluations required, budget is {budget}")


class SpillbackDetected(BraessError):
    """Queue outgrew link storage; the simulation was aborted."""

    def __init__(self, link_id: str, time: float, queue: int, storage: float, result=None):
        self.link_id = link_id
        self.time = time
        self.queue = queue
        self.storage = storage
        self.result = result
        super().__init__(
            f"spillback on link {link_id} at t={time:.0f}s "
            f"(queue {queue} > storage {storage:.1f} veh)"
        )
