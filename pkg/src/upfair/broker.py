"""Rate broker: registration protocol, allocation epochs and a TCP service.

User equipment registers its application utility profiles; every registry
mutation triggers a reallocation of the link and a rate message per
registered user.  The wire format is one JSON object per line (UTF-8,
newline-terminated).  Field order is fixed by the encoder so that encoding
is canonical; decoders ignore unknown fields.

Message shapes:

  register   {"type": "register", "ue_id", "beta", "apps": [
                 {"app_id", "utility": "sigmoidal", "a", "b", "alpha", "rate_cap"}
               | {"app_id", "utility": "logarithmic", "k", "r_max", "alpha", "rate_cap"}]}
  unregister {"type": "unregister", "ue_id"}
  ack        {"type": "ack", "ue_id", "status": "ok"|"rejected", "reason"}
  rates      {"type": "rates", "ue_id", "epoch", "shadow_price",
              "apps": [{"app_id", "rate_kbps"}]}
"""

from __future__ import annotations

import json
import logging
import socket
import socketserver
import threading
from dataclasses import dataclass, field

from .solver import (
    AllocationProblem,
    AllocationResult,
    AppDescriptor,
    SolverError,
    UserProfile,
    ValidationError,
    solve,
    validate_problem,
)
from .utility import LogarithmicUtility, SigmoidalUtility

log = logging.getLogger(__name__)


class DecodeError(ValueError):
    """A wire frame is not a valid message; the message names the bad field."""


@dataclass(frozen=True)
class RegisterMessage:
    ue_id: str
    beta: float
    apps: tuple[AppDescriptor, ...]


@dataclass(frozen=True)
class UnregisterMessage:
    ue_id: str


@dataclass(frozen=True)
class AckMessage:
    ue_id: str
    status: str  # "ok" | "rejected"
    reason: str | None = None


@dataclass(frozen=True)
class RateMessage:
    ue_id: str
    epoch: int
    shadow_price: float
    rates: tuple[tuple[str, float], ...]  # (app_id, rate_kbps)


Message = RegisterMessage | UnregisterMessage | AckMessage | RateMessage


def encode_message(msg: Message) -> str:
    """Serialize a message to its canonical single-line form."""
    if isinstance(msg, RegisterMessage):
        apps = []
        for a in msg.apps:
            if isinstance(a.utility, SigmoidalUtility):
                apps.append({"app_id": a.app_id, "utility": "sigmoidal", "a": a.utility.a,
                             "b": a.utility.b, "alpha": a.alpha, "rate_cap": a.rate_cap})
            else:
                apps.append({"app_id": a.app_id, "utility": "logarithmic", "k": a.utility.k,
                             "r_max": a.utility.r_max, "alpha": a.alpha, "rate_cap": a.rate_cap})
        body = {"type": "register", "ue_id": msg.ue_id, "beta": msg.beta, "apps": apps}
    elif isinstance(msg, UnregisterMessage):
        body = {"type": "unregister", "ue_id": msg.ue_id}
    elif isinstance(msg, AckMessage):
        body = {"type": "ack", "ue_id": msg.ue_id, "status": msg.status, "reason": msg.reason}
    elif isinstance(msg, RateMessage):
        body = {"type": "rates", "ue_id": msg.ue_id, "epoch": msg.epoch,
                "shadow_price": msg.shadow_price,
                "apps": [{"app_id": app_id, "rate_kbps": rate} for app_id, rate in msg.rates]}
    else:
        raise TypeError(f"cannot encode {type(msg).__name__}")
    return json.dumps(body, separators=(", ", ": ")) + "\n"


def _field(obj: dict, name: str, kind, where: str):
    if name not in obj:
        raise DecodeError(f"{where}: missing field {name!r}")
    value = obj[name]
    if kind is float and isinstance(value, (int, float)) and not isinstance(value, bool):
        return float(value)
    if kind is int and isinstance(value, int) and not isinstance(value, bool):
        return value
    if kind is str and isinstance(value, str):
        return value
    if kind is list and isinstance(value, list):
        return value
    raise DecodeError(f"{where}: field {name!r} has wrong type")


def decode_message(line: str) -> Message:
    """Parse one wire line back into a message; unknown fields are ignored."""
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as e:
        raise DecodeError(f"frame is not valid JSON: {e}") from None
    if not isinstance(obj, dict):
        raise DecodeError("frame is not an object")
    kind = _field(obj, "type", str, "frame")
    if kind == "register":
        ue_id = _field(obj, "ue_id", str, "register")
        beta = _field(obj, "beta", float, "register")
        apps = []
        for entry in _field(obj, "apps", list, "register"):
            if not isinstance(entry, dict):
                raise DecodeError("register: field 'apps' must hold objects")
            app_id = _field(entry, "app_id", str, "app")
            variant = _field(entry, "utility", str, "app")
            if variant == "sigmoidal":
                utility = SigmoidalUtility(a=_field(entry, "a", float, "app"),
                                           b=_field(entry, "b", float, "app"))
            elif variant == "logarithmic":
                utility = LogarithmicUtility(k=_field(entry, "k", float, "app"),
                                             r_max=_field(entry, "r_max", float, "app"))
            else:
                raise DecodeError(f"app: field 'utility' has unknown variant {variant!r}")
            apps.append(AppDescriptor(app_id=app_id, utility=utility,
                                      alpha=_field(entry, "alpha", float, "app"),
                                      rate_cap=_field(entry, "rate_cap", float, "app")))
        return RegisterMessage(ue_id=ue_id, beta=beta, apps=tuple(apps))
    if kind == "unregister":
        return UnregisterMessage(ue_id=_field(obj, "ue_id", str, "unregister"))
    if kind == "ack":
        reason = obj.get("reason")
        if reason is not None and not isinstance(reason, str):
            raise DecodeError("ack: field 'reason' has wrong type")
        return AckMessage(ue_id=_field(obj, "ue_id", str, "ack"),
                          status=_field(obj, "status", str, "ack"), reason=reason)
    if kind == "rates":
        rates = []
        for entry in _field(obj, "apps", list, "rates"):
            if not isinstance(entry, dict):
                raise DecodeError("rates: field 'apps' must hold objects")
            rates.append((_field(entry, "app_id", str, "rates"),
                          _field(entry, "rate_kbps", float, "rates")))
        return RateMessage(ue_id=_field(obj, "ue_id", str, "rates"),
                           epoch=_field(obj, "epoch", int, "rates"),
                           shadow_price=_field(obj, "shadow_price", float, "rates"),
                           rates=tuple(rates))
    raise DecodeError(f"frame: field 'type' has unknown value {kind!r}")


@dataclass
class EpochRecord:
    epoch: int
    shadow_price: float
    rates: dict[str, float]


@dataclass
class BrokerState:
    """Registry plus allocation history for one shared link."""

    capacity_kbps: float
    tolerance_kbps: float = 1e-4
    registry: dict[str, UserProfile] = field(default_factory=dict)
    epoch: int = 0
    last_result: AllocationResult | None = None
    epoch_log: list[EpochRecord] = field(default_factory=list)


def _check_register(state: BrokerState, msg: RegisterMessage) -> str | None:
    """Returns a rejection reason, or None when the profile is acceptable."""
    profile = UserProfile(ue_id=msg.ue_id, beta=msg.beta, apps=msg.apps)
    trial = dict(state.registry)
    trial[msg.ue_id] = profile
    try:
        validate_users(tuple(trial.values()), state.capacity_kbps, state.tolerance_kbps)
    except ValidationError as e:
        return str(e)
    return None


def validate_users(users: tuple[UserProfile, ...], capacity_kbps: float, tolerance_kbps: float) -> None:
    validate_problem(AllocationProblem(users=users, capacity_kbps=capacity_kbps,
                                       tolerance_kbps=tolerance_kbps))


def handle_register(state: BrokerState, msg: RegisterMessage) -> tuple[AckMessage, list[RateMessage]]:
    """Upsert a user profile; on success a reallocation runs immediately."""
    reason = _check_register(state, msg)
    if reason is not None:
        return AckMessage(ue_id=msg.ue_id, status="rejected", reason=reason), []
    state.registry[msg.ue_id] = UserProfile(ue_id=msg.ue_id, beta=msg.beta, apps=msg.apps)
    return AckMessage(ue_id=msg.ue_id, status="ok"), reallocate(state)


def handle_unregister(state: BrokerState, msg: UnregisterMessage) -> tuple[AckMessage, list[RateMessage]]:
    """Drop a user; its flows are excluded from the next epoch."""
    if msg.ue_id not in state.registry:
        return AckMessage(ue_id=msg.ue_id, status="rejected", reason="unknown ue_id"), []
    del state.registry[msg.ue_id]
    return AckMessage(ue_id=msg.ue_id, status="ok"), reallocate(state)


def reallocate(state: BrokerState) -> list[RateMessage]:
    """Solve for the current registry and emit one rate message per user.

    With every registered app idle (alpha = 0) the epoch carries all-zero
    rates.  On a solver failure the previous rates stay in force.
    """
    if not state.registry:
        return []
    users = tuple(state.registry.values())
    any_active = any(a.alpha > 0.0 for u in users for a in u.apps)
    if not any_active:
        state.epoch += 1
        rates = {a.app_id: 0.0 for u in users for a in u.apps}
        state.epoch_log.append(EpochRecord(state.epoch, 0.0, rates))
        return [RateMessage(ue_id=u.ue_id, epoch=state.epoch, shadow_price=0.0,
                            rates=tuple((a.app_id, 0.0) for a in u.apps)) for u in users]
    problem = AllocationProblem(users=users, capacity_kbps=state.capacity_kbps,
                                tolerance_kbps=state.tolerance_kbps)
    try:
        result = solve(problem)
    except SolverError as e:
        log.error("reallocation failed, keeping previous rates: %s", e)
        return []
    state.epoch += 1
    state.last_result = result
    state.epoch_log.append(EpochRecord(state.epoch, result.shadow_price, dict(result.rates)))
    return [RateMessage(ue_id=u.ue_id, epoch=state.epoch, shadow_price=result.shadow_price,
                        rates=tuple((a.app_id, result.rates[a.app_id]) for a in u.apps))
            for u in users]


def write_epoch_log(state: BrokerState, path) -> None:
    """Dump the allocation history as CSV (one row per app per epoch)."""
    with open(path, "w", encoding="utf-8", newline="") as f:
        f.write("epoch,shadow_price_per_kbps,app_id,rate_kbps\n")
        for rec in state.epoch_log:
            for app_id, rate in rec.rates.items():
                f.write(f"{rec.epoch},{rec.shadow_price:.10g},{app_id},{rate:.10g}\n")


class BrokerService:
    """Line-oriented TCP front end over a BrokerState.

    Registry mutations and reallocation run under one lock; after each
    accepted mutation every connected user receives its new rate line.
    Closing a connection unregisters the users it registered.
    """

    def __init__(self, capacity_kbps, tolerance_kbps=1e-4, host="127.0.0.1", port=0,
                 log_path=None):
        self.state = BrokerState(capacity_kbps=capacity_kbps, tolerance_kbps=tolerance_kbps)
        self._lock = threading.Lock()
        self._writers: dict[str, socket.socket] = {}
        self._log_path = log_path
        service = self

        class Handler(socketserver.StreamRequestHandler):
            def handle(self):
                mine: set[str] = set()
                try:
                    for raw in self.rfile:
                        line = raw.decode("utf-8")
                        try:
                            msg = decode_message(line)
                        except DecodeError as e:
                            self._send(AckMessage(ue_id="", status="rejected", reason=str(e)))
                            continue
                        service._dispatch(msg, self.request, mine, self._send)
                finally:
                    service._drop(mine)

            def _send(self, msg):
                try:
                    self.request.sendall(encode_message(msg).encode("utf-8"))
                except OSError:
                    pass

        self._server = socketserver.ThreadingTCPServer((host, port), Handler, bind_and_activate=True)
        self._server.daemon_threads = True
        self._thread: threading.Thread | None = None

    @property
    def address(self):
        return self._server.server_address

    def _dispatch(self, msg, conn, mine, send):
        with self._lock:
            if isinstance(msg, RegisterMessage):
                ack, updates = handle_register(self.state, msg)
                if ack.status == "ok":
                    mine.add(msg.ue_id)
                    self._writers[msg.ue_id] = conn
            elif isinstance(msg, UnregisterMessage):
                ack, updates = handle_unregister(self.state, msg)
                if ack.status == "ok":
                    mine.discard(msg.ue_id)
                    self._writers.pop(msg.ue_id, None)
            else:
                ack, updates = AckMessage(ue_id="", status="rejected",
                                          reason="frame: field 'type' not accepted here"), []
            send(ack)
            self._fan_out(updates)
            if updates and self._log_path:
                write_epoch_log(self.state, self._log_path)

    def _fan_out(self, updates):
        for rate_msg in updates:
            writer = self._writers.get(rate_msg.ue_id)
            if writer is None:
                continue
            try:
                writer.sendall(encode_message(rate_msg).encode("utf-8"))
            except OSError:
                pass

    def _drop(self, mine):
        with self._lock:
            updates = []
            for ue_id in list(mine):
                if ue_id in self.state.registry:
                    _, updates = handle_unregister(self.state, UnregisterMessage(ue_id))
                self._writers.pop(ue_id, None)
            self._fan_out(updates)

    def start(self):
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)
        self._thread.start()

    def serve_forever(self):
        self._server.serve_forever()

    def shutdown(self):
        self._server.shutdown()
        self._server.server_close()
