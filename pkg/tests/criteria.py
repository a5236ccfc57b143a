"""Pass/fail bookkeeping for the acceptance criteria.

Each criterion test runs inside ``criterion(...)``, which records one
line per criterion; conftest prints the lines at the end of the run.
"""

from __future__ import annotations

import time
from contextlib import contextmanager

RESULTS: list[str] = []


@contextmanager
def criterion(cid: str, title: str):
    start = time.perf_counter()
    notes: list[str] = []
    try:
        yield notes
    except BaseException as exc:
        first = str(exc).splitlines()[0] if str(exc) else ""
        RESULTS.append(f"FAIL  {cid:<4} {title}: {type(exc).__name__} {first}")
        raise
    detail = "; ".join(notes)
    elapsed = time.perf_counter() - start
    RESULTS.append(f"PASS  {cid:<4} {title} ({elapsed:.2f} s){': ' + detail if detail else ''}")
