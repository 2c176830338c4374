"""Per-flow token-bucket policing and a round-robin FIFO link model.

Volumes are kbit, rates kbps, times seconds (kbps * s = kbit).
"""

from __future__ import annotations

DEFAULT_QUANTUM_KBIT = 12.0  # one ~1500-byte packet


class TokenBucket:
    """Enforces an assigned rate with a burst allowance.

    The bucket refills continuously at rate_kbps and holds at most
    burst_kbit tokens; by default the burst is one second's worth of the
    assigned rate.  Created empty: credit accrues from creation time.
    """

    def __init__(self, rate_kbps, burst_kbit=None, start_time=0.0):
        if rate_kbps < 0:
            raise ValueError("rate must be >= 0")
        self.rate_kbps = rate_kbps
        self.burst_kbit = rate_kbps * 1.0 if burst_kbit is None else burst_kbit
        self.tokens_kbit = 0.0
        self.last_update = start_time

    def admit(self, now, requested_kbit):
        """Grant min(requested, tokens) after refilling up to now."""
        if now < self.last_update:
            raise ValueError("time went backwards")
        if requested_kbit < 0:
            raise ValueError("request must be >= 0")
        self.tokens_kbit = min(self.burst_kbit, self.tokens_kbit + self.rate_kbps * (now - self.last_update))
        self.last_update = now
        granted = min(requested_kbit, self.tokens_kbit)
        self.tokens_kbit -= granted
        return granted

    def reconfigure(self, now, rate_kbps, burst_kbit=None):
        """Change the assigned rate, keeping accrued credit up to the new burst."""
        if now < self.last_update:
            raise ValueError("time went backwards")
        self.tokens_kbit = min(self.burst_kbit, self.tokens_kbit + self.rate_kbps * (now - self.last_update))
        self.last_update = now
        self.rate_kbps = rate_kbps
        self.burst_kbit = rate_kbps * 1.0 if burst_kbit is None else burst_kbit
        self.tokens_kbit = min(self.tokens_kbit, self.burst_kbit)


class LinkFifo:
    """A shared link serving per-tick demands round-robin in packet quanta.

    Work conserving: while budget and backlog remain, quanta keep being
    granted.  The rotation pointer persists across ticks so no flow gets a
    standing head-of-line advantage.
    """

    def __init__(self, capacity_kbps, quantum_kbit=DEFAULT_QUANTUM_KBIT):
        if capacity_kbps <= 0:
            raise ValueError("capacity must be > 0")
        if quantum_kbit <= 0:
            raise ValueError("quantum must be > 0")
        self.capacity_kbps = capacity_kbps
        self.quantum_kbit = quantum_kbit
        self._next = 0

    def serve(self, demands, tick_s):
        """Grant from a list of (flow_id, kbit) demands for one tick.

        Returns {flow_id: granted_kbit}.  Total granted never exceeds
        capacity * tick, and equals it whenever total demand does.
        """
        if tick_s <= 0:
            raise ValueError("tick must be > 0")
        grants = {flow_id: 0.0 for flow_id, _ in demands}
        remaining = [max(0.0, kbit) for _, kbit in demands]
        budget = self.capacity_kbps * tick_s
        if not demands:
            return grants
        i = self._next % len(demands)
        while budget > 0.0 and any(r > 0.0 for r in remaining):
            if remaining[i] > 0.0:
                q = min(self.quantum_kbit, remaining[i], budget)
                grants[demands[i][0]] += q
                remaining[i] -= q
                budget -= q
                self._next = (i + 1) % len(demands)
            i = (i + 1) % len(demands)
        return grants
