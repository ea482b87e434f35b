"""Tagged byte and CPU-time accounting."""

from __future__ import annotations

import time
from collections import defaultdict
from contextlib import contextmanager

BASELINE = "baseline_payload"
OVERHEAD_TAGS = ("mask_compute", "keygen", "seal_ids", "pubkey_exchange", "unmask", "quantize")
TAGS = (BASELINE, *OVERHEAD_TAGS)


def _empty_region_cost(n: int = 2000) -> float:
    clock = time.process_time
    total = 0.0
    for _ in range(n):
        start = clock()
        total += clock() - start
    return total / n


class OverheadLedger:
    """Counters keyed by (party, tag).

    ``sent``/``received`` count framed message bytes; ``seconds`` counts
    process CPU time inside :meth:`timed` regions, minus the measured cost of
    an empty region.
    """

    def __init__(self):
        self.sent = defaultdict(int)
        self.received = defaultdict(int)
        self.seconds = defaultdict(float)
        self.rounds = 0
        self.snapshots: list[dict] = []
        self._empty = _empty_region_cost()

    def add_bytes(self, src: str, dst: str, tag: str, n: int) -> None:
        if tag not in TAGS:
            raise ValueError(f"unknown ledger tag {tag!r}")
        self.sent[(src, tag)] += n
        self.received[(dst, tag)] += n

    @contextmanager
    def timed(self, party: str, tag: str):
        if tag not in TAGS:
            raise ValueError(f"unknown ledger tag {tag!r}")
        start = time.process_time()
        try:
            yield
        finally:
            self.seconds[(party, tag)] += max(0.0, time.process_time() - start - self._empty)

    def end_round(self) -> None:
        self.rounds += 1
        self.snapshots.append(self.byte_totals())

    def parties(self) -> list[str]:
        keys = set(self.sent) | set(self.received) | set(self.seconds)
        return sorted({p for p, _ in keys})

    def bytes_for(self, party: str, tags=TAGS, direction: str = "both") -> int:
        total = 0
        if direction in ("both", "sent"):
            total += sum(self.sent.get((party, t), 0) for t in tags)
        if direction in ("both", "received"):
            total += sum(self.received.get((party, t), 0) for t in tags)
        return total

    def seconds_for(self, party: str, tags=TAGS) -> float:
        return sum(self.seconds.get((party, t), 0.0) for t in tags)

    def byte_totals(self) -> dict:
        """Deterministic view of the byte counters (no timings)."""
        return {
            "sent": {f"{p}/{t}": n for (p, t), n in sorted(self.sent.items())},
            "received": {f"{p}/{t}": n for (p, t), n in sorted(self.received.items())},
        }

