"""Tick-driven network simulator comparing shaped and unshaped sharing.

Flows are adaptive video players (buffer-driven pull) or bulk downloads
(greedy until done) competing for one bottleneck link.  In "unshaped" mode
the link serves per-tick demands round-robin.  In "shaped" mode a broker
reallocates rates from the flows' utility profiles whenever any flow turns
active or idle, and per-flow token buckets enforce the assigned rates.

A video flow pulls at up to twice its playback bitrate while its buffer is
below the cap, stops pulling at the cap and resumes once the buffer drains
back to the rebuffer threshold; the same threshold governs playback resume
after a stall.  These buffer-full/buffer-low events toggle the flow's
activity share between its configured value and zero, which in shaped mode
drives the broker.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

from .broker import BrokerState, RegisterMessage, handle_register
from .shaper import LinkFifo, TokenBucket
from .solver import AppDescriptor, default_rate_cap
from .utility import UtilityFunction

TICK_S_DEFAULT = 0.1
STARTUP_BUFFER_S_DEFAULT = 5.0
REBUFFER_THRESHOLD_S_DEFAULT = 2.0
BUFFER_CAP_S_DEFAULT = 30.0
PULL_FACTOR = 2.0  # video pull cap as a multiple of the playback bitrate

_EPS = 1e-9


@dataclass(frozen=True)
class StreamingModel:
    """Buffered video playback at a constant media bitrate."""

    bitrate_kbps: float
    duration_s: float  # seconds of media
    startup_buffer_s: float = STARTUP_BUFFER_S_DEFAULT
    rebuffer_threshold_s: float = REBUFFER_THRESHOLD_S_DEFAULT
    buffer_cap_s: float = BUFFER_CAP_S_DEFAULT


@dataclass(frozen=True)
class DownloadModel:
    """Bulk transfer of a fixed volume; demands greedily until delivered."""

    size_kbit: float
    completed: bool = False


TrafficModel = StreamingModel | DownloadModel


@dataclass(frozen=True)
class SimFlow:
    flow_id: str
    model: TrafficModel
    utility: UtilityFunction | None = None  # required in shaped mode
    alpha_share: float = 1.0
    rate_cap_kbps: float | None = None


@dataclass(frozen=True)
class SimUE:
    ue_id: str
    beta: float = 1.0
    flows: tuple[SimFlow, ...] = ()


@dataclass(frozen=True)
class Scenario:
    capacity_kbps: float
    duration_s: float
    ues: tuple[SimUE, ...]
    mode: str = "shaped"  # "shaped" | "unshaped"
    tick_s: float = TICK_S_DEFAULT
    tolerance_kbps: float = 1e-4
    seed: int = 0


@dataclass(frozen=True)
class TraceSample:
    time_s: float  # end of the sampled tick
    flow_id: str
    throughput_kbps: float
    buffer_s: float | None  # streaming flows only


@dataclass
class FlowQoE:
    flow_id: str
    avg_throughput_kbps: float = 0.0
    delivered_kbit: float = 0.0
    buffering_count: int = 0
    buffering_s: float = 0.0
    completion_s: float | None = None  # downloads; None while incomplete


@dataclass
class QoEReport:
    flows: dict[str, FlowQoE] = field(default_factory=dict)
    network_avg_throughput_kbps: float = 0.0


class _Player:
    """Playback state machine shared by the simulator and the trace fold."""

    def __init__(self, model: StreamingModel):
        self.model = model
        self.buffer_s = 0.0
        self.played_s = 0.0
        self.state = "waiting"  # waiting | playing | stalled | finished
        self.stall_count = 0
        self.stalled_s = 0.0

    def ingest(self, kbit):
        self.buffer_s += kbit / self.model.bitrate_kbps

    def advance(self, tick_s, download_done):
        m = self.model
        if self.state == "waiting":
            if self.buffer_s >= m.startup_buffer_s - _EPS or download_done:
                self.state = "playing"
        elif self.state == "stalled":
            self.stalled_s += tick_s
            if self.buffer_s >= m.rebuffer_threshold_s - _EPS or download_done:
                self.state = "playing"
                return
        if self.state != "playing":
            return
        take = min(self.buffer_s, tick_s)
        self.buffer_s -= take
        self.played_s += take
        if self.played_s >= m.duration_s - 1e-6:
            self.state = "finished"
        elif take < tick_s - _EPS:
            self.state = "stalled"
            self.stall_count += 1
            self.stalled_s += tick_s - take


class _FlowRun:
    def __init__(self, ue: SimUE, flow: SimFlow, capacity_kbps):
        self.ue_id = ue.ue_id
        self.flow = flow
        self.delivered_kbit = 0.0
        if isinstance(flow.model, StreamingModel):
            self.kind = "streaming"
            self.player = _Player(flow.model)
            self.remaining_kbit = flow.model.bitrate_kbps * flow.model.duration_s
            self.filling = True
        else:
            self.kind = "download"
            self.player = None
            self.remaining_kbit = flow.model.size_kbit
            self.filling = True
        self.completion_s = None
        if flow.utility is not None:
            cap = flow.rate_cap_kbps
            if cap is None:
                cap = default_rate_cap(flow.utility, capacity_kbps)
            self.descriptor = AppDescriptor(app_id=flow.flow_id, utility=flow.utility,
                                            alpha=flow.alpha_share, rate_cap=cap)
        else:
            self.descriptor = None

    def update_fill_state(self):
        # Resume side of the fill hysteresis: pulling restarts once playback
        # drains the buffer to the rebuffer threshold.  The stop side lives
        # in absorb, at the instant the buffer fills; checking here would
        # miss it because playback has already taken its slice by the time
        # the next tick starts.  Downloads simply pull until done.
        if self.kind == "download":
            self.filling = self.remaining_kbit > _EPS
            return
        m = self.flow.model
        if self.remaining_kbit <= _EPS:
            self.filling = False
        elif not self.filling and self.player.buffer_s <= m.rebuffer_threshold_s + _EPS:
            self.filling = True

    def demand_kbit(self, tick_s):
        if not self.filling:
            return 0.0
        if self.kind == "download":
            return self.remaining_kbit
        m = self.flow.model
        room_kbit = max(0.0, (m.buffer_cap_s - self.player.buffer_s) * m.bitrate_kbps)
        return min(PULL_FACTOR * m.bitrate_kbps * tick_s, self.remaining_kbit, room_kbit)

    def absorb(self, kbit, t_end):
        self.delivered_kbit += kbit
        self.remaining_kbit -= kbit
        if self.kind == "streaming":
            self.player.ingest(kbit)
            # Stop side of the fill hysteresis: a full buffer idles the
            # flow, so its share drops to zero at the next reallocation.
            if self.player.buffer_s >= self.flow.model.buffer_cap_s - _EPS:
                self.filling = False
        elif self.completion_s is None and self.remaining_kbit <= _EPS:
            self.completion_s = t_end


def run(scenario: Scenario) -> tuple[list[TraceSample], QoEReport]:
    """Simulate a scenario; returns the per-tick trace and its QoE summary.

    The trace carries one sample per flow per tick plus a synthetic
    "network" row with the per-tick total.  Deterministic: identical
    scenarios produce identical traces.
    """
    _validate_scenario(scenario)
    flows = [_FlowRun(ue, f, scenario.capacity_kbps) for ue in scenario.ues for f in ue.flows]
    shaped = scenario.mode == "shaped"
    trace: list[TraceSample] = []
    if not flows:
        return trace, qoe_report(trace, scenario)

    if shaped:
        broker = BrokerState(capacity_kbps=scenario.capacity_kbps,
                             tolerance_kbps=scenario.tolerance_kbps)
        buckets: dict[str, TokenBucket] = {}
        link = None
    else:
        broker = None
        buckets = {}
        link = LinkFifo(scenario.capacity_kbps)

    ticks = int(round(scenario.duration_s / scenario.tick_s))
    prev_active: dict[str, bool] | None = None
    for i in range(ticks):
        t0 = i * scenario.tick_s
        t1 = (i + 1) * scenario.tick_s
        for f in flows:
            f.update_fill_state()
        active = {f.flow.flow_id: f.filling for f in flows}

        if shaped and active != prev_active:
            _reallocate(broker, buckets, scenario, flows, active, t0)
            prev_active = active

        demands = [(f.flow.flow_id, f.demand_kbit(scenario.tick_s)) for f in flows]
        if shaped:
            grants = {fid: buckets[fid].admit(t1, kbit) for fid, kbit in demands}
        else:
            grants = link.serve(demands, scenario.tick_s)

        total = 0.0
        for f in flows:
            g = grants[f.flow.flow_id]
            f.absorb(g, t1)
            total += g
            if f.kind == "streaming":
                f.player.advance(scenario.tick_s, download_done=f.remaining_kbit <= 1e-6)
                buffer_s = f.player.buffer_s
            else:
                buffer_s = None
            trace.append(TraceSample(t1, f.flow.flow_id, g / scenario.tick_s, buffer_s))
        trace.append(TraceSample(t1, "network", total / scenario.tick_s, None))

    return trace, qoe_report(trace, scenario)


def _reallocate(broker, buckets, scenario, flows, active, now):
    for ue in scenario.ues:
        descriptors = []
        share_sum = sum(f.alpha_share for f in ue.flows if active.get(f.flow_id, False))
        for f in flows:
            if f.ue_id != ue.ue_id:
                continue
            if f.descriptor is None:
                raise ValueError(f"{f.flow.flow_id}: shaped mode needs a utility profile")
            # Active shares are renormalized so each non-idle user's alphas
            # still sum to 1; a fully idle user registers all zeros.
            if active[f.flow.flow_id] and share_sum > 0.0:
                alpha = f.flow.alpha_share / share_sum
            else:
                alpha = 0.0
            descriptors.append(replace(f.descriptor, alpha=alpha))
        ack, _ = handle_register(broker, RegisterMessage(ue_id=ue.ue_id, beta=ue.beta,
                                                         apps=tuple(descriptors)))
        if ack.status != "ok":
            raise ValueError(f"broker rejected {ue.ue_id}: {ack.reason}")
    rates = broker.epoch_log[-1].rates if broker.epoch_log else {}
    for f in flows:
        rate = rates.get(f.flow.flow_id, 0.0)
        bucket = buckets.get(f.flow.flow_id)
        if bucket is None:
            buckets[f.flow.flow_id] = TokenBucket(rate, start_time=now)
        else:
            bucket.reconfigure(now, rate)


def qoe_report(trace: list[TraceSample], scenario: Scenario) -> QoEReport:
    """Fold a trace into per-flow and network quality measures.

    Streaming stall statistics are recomputed by replaying the playback
    state machine over each flow's ingest series, so a report derived from
    a stored trace matches the one returned by run().
    """
    models: dict[str, TrafficModel] = {}
    for ue in scenario.ues:
        for f in ue.flows:
            models[f.flow_id] = f.model
    report = QoEReport(flows={fid: FlowQoE(flow_id=fid) for fid in models})
    duration = scenario.duration_s

    players = {fid: _Player(m) for fid, m in models.items() if isinstance(m, StreamingModel)}
    media_total = {fid: m.bitrate_kbps * m.duration_s for fid, m in models.items()
                   if isinstance(m, StreamingModel)}
    for sample in trace:
        q = report.flows.get(sample.flow_id)
        if q is None:
            continue  # the synthetic network row
        kbit = sample.throughput_kbps * scenario.tick_s
        q.delivered_kbit += kbit
        model = models[sample.flow_id]
        if isinstance(model, DownloadModel):
            if q.completion_s is None and q.delivered_kbit >= model.size_kbit - 1e-6:
                q.completion_s = sample.time_s
        else:
            player = players[sample.flow_id]
            player.ingest(kbit)
            done = q.delivered_kbit >= media_total[sample.flow_id] - 1e-6
            player.advance(scenario.tick_s, download_done=done)
            q.buffering_count = player.stall_count
            q.buffering_s = player.stalled_s

    total = 0.0
    for q in report.flows.values():
        q.avg_throughput_kbps = q.delivered_kbit / duration if duration > 0 else 0.0
        total += q.delivered_kbit
    report.network_avg_throughput_kbps = total / duration if duration > 0 else 0.0
    return report


def _validate_scenario(scenario: Scenario) -> None:
    if scenario.mode not in ("shaped", "unshaped"):
        raise ValueError(f"unknown mode {scenario.mode!r}")
    if scenario.capacity_kbps <= 0:
        raise ValueError("capacity_kbps must be > 0")
    if scenario.tick_s <= 0:
        raise ValueError("tick_s must be > 0")
    if scenario.duration_s < 0:
        raise ValueError("duration_s must be >= 0")
    seen = set()
    for ue in scenario.ues:
        for f in ue.flows:
            if f.flow_id == "network":
                raise ValueError("flow_id 'network' is reserved for the trace total")
            if f.flow_id in seen:
                raise ValueError(f"duplicate flow_id {f.flow_id!r}")
            seen.add(f.flow_id)
            if isinstance(f.model, StreamingModel):
                m = f.model
                if m.bitrate_kbps <= 0 or m.duration_s <= 0:
                    raise ValueError(f"{f.flow_id}: bitrate and duration must be > 0")
                if not (0 < m.rebuffer_threshold_s <= m.startup_buffer_s <= m.buffer_cap_s):
                    raise ValueError(f"{f.flow_id}: need 0 < threshold <= startup <= cap")
            else:
                if f.model.size_kbit <= 0:
                    raise ValueError(f"{f.flow_id}: size_kbit must be > 0")


def write_trace_csv(trace: list[TraceSample], path) -> None:
    """time_s,flow_id,throughput_kbps,buffer_s (buffer blank for downloads)."""
    with open(path, "w", encoding="utf-8", newline="") as f:
        f.write("time_s,flow_id,throughput_kbps,buffer_s\n")
        for s in trace:
            buf = f"{s.buffer_s:.10g}" if s.buffer_s is not None else ""
            f.write(f"{s.time_s:.10g},{s.flow_id},{s.throughput_kbps:.10g},{buf}\n")


def write_qoe_csv(report: QoEReport, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        f.write("flow_id,avg_throughput_kbps,delivered_kbit,buffering_count,buffering_s,completion_s\n")
        for q in report.flows.values():
            completion = f"{q.completion_s:.10g}" if q.completion_s is not None else ""
            f.write(f"{q.flow_id},{q.avg_throughput_kbps:.10g},{q.delivered_kbit:.10g},"
                    f"{q.buffering_count},{q.buffering_s:.10g},{completion}\n")
        f.write(f"network,{report.network_avg_throughput_kbps:.10g},,,,\n")
