"""INI scenario/problem configuration.

Layout (kbps/kbit/seconds units as in the rest of the package):

    [network]
    capacity_kbps = 1000
    delta_kbps = 0.0001          ; clearing tolerance, optional
    mode = shaped                ; shaped | unshaped, simulation only

    [sim]
    tick_s = 0.1
    duration_s = 1260
    seed = 0

    [output]
    dir = out

    [ue:phone1]
    beta = 1.0

    [app:phone1:video]
    utility = sigmoidal          ; sigmoidal (a, b) | logarithmic (k, r_max)
    a = 0.148
    b = 470
    alpha = 1.0                  ; optional, default 1
    rate_cap_kbps = 4700         ; optional, defaulted from the utility
    traffic = streaming          ; streaming | download | none (solve-only)
    bitrate_kbps = 460           ; streaming fields
    media_duration_s = 1800
    size_kbit = 520000           ; download field

A [ue:<id>] section is optional (beta defaults to 1).  Unknown sections and
keys are warned about, never fatal.
"""

from __future__ import annotations

import configparser
import logging
from dataclasses import dataclass

from .simnet import (
    BUFFER_CAP_S_DEFAULT,
    REBUFFER_THRESHOLD_S_DEFAULT,
    STARTUP_BUFFER_S_DEFAULT,
    TICK_S_DEFAULT,
    DownloadModel,
    Scenario,
    SimFlow,
    SimUE,
    StreamingModel,
)
from .solver import AllocationProblem, AppDescriptor, UserProfile, default_rate_cap
from .utility import LogarithmicUtility, SigmoidalUtility

log = logging.getLogger(__name__)

_NETWORK_KEYS = {"capacity_kbps", "delta_kbps", "mode"}
_SIM_KEYS = {"tick_s", "duration_s", "seed"}
_OUTPUT_KEYS = {"dir"}
_UE_KEYS = {"beta"}
_APP_KEYS = {"utility", "a", "b", "k", "r_max", "alpha", "rate_cap_kbps", "traffic",
             "bitrate_kbps", "media_duration_s", "startup_buffer_s",
             "rebuffer_threshold_s", "buffer_cap_s", "size_kbit"}


class ConfigError(ValueError):
    """A configuration value is missing or malformed; names the field."""


@dataclass(frozen=True)
class AppConfig:
    ue_id: str
    app_id: str
    utility: SigmoidalUtility | LogarithmicUtility
    alpha: float
    rate_cap_kbps: float | None
    traffic: str  # streaming | download | none
    streaming: StreamingModel | None
    download: DownloadModel | None


@dataclass(frozen=True)
class ConfigFile:
    capacity_kbps: float
    delta_kbps: float
    mode: str
    tick_s: float
    duration_s: float | None
    seed: int
    output_dir: str
    betas: dict[str, float]  # ue_id -> beta, registration order
    apps: tuple[AppConfig, ...]


def _get(section, key, convert, where, default=None, required=False):
    if key not in section:
        if required:
            raise ConfigError(f"{where}: missing key {key!r}")
        return default
    raw = section[key]
    try:
        return convert(raw)
    except ValueError:
        raise ConfigError(f"{where}: key {key!r} has invalid value {raw!r}") from None


def _warn_unknown(section, known, where):
    for key in section:
        if key not in known:
            log.warning("%s: ignoring unknown key %r", where, key)


def load_config(path) -> ConfigFile:
    parser = configparser.ConfigParser(interpolation=None,
                                       inline_comment_prefixes=(";", "#"))
    parser.optionxform = str  # keep key case as written
    read = parser.read(path)
    if not read:
        raise ConfigError(f"cannot read config file {path!r}")

    network = parser["network"] if parser.has_section("network") else {}
    if not parser.has_section("network"):
        raise ConfigError("[network]: section is required")
    _warn_unknown(network, _NETWORK_KEYS, "[network]")
    capacity = _get(network, "capacity_kbps", float, "[network]", required=True)
    if capacity <= 0:
        raise ConfigError("[network]: key 'capacity_kbps' must be > 0")
    delta = _get(network, "delta_kbps", float, "[network]", default=1e-4)
    mode = _get(network, "mode", str, "[network]", default="shaped")
    if mode not in ("shaped", "unshaped"):
        raise ConfigError(f"[network]: key 'mode' must be shaped or unshaped, got {mode!r}")

    tick, duration, seed = TICK_S_DEFAULT, None, 0
    if parser.has_section("sim"):
        sim = parser["sim"]
        _warn_unknown(sim, _SIM_KEYS, "[sim]")
        tick = _get(sim, "tick_s", float, "[sim]", default=TICK_S_DEFAULT)
        duration = _get(sim, "duration_s", float, "[sim]")
        seed = _get(sim, "seed", int, "[sim]", default=0)

    output_dir = "out"
    if parser.has_section("output"):
        _warn_unknown(parser["output"], _OUTPUT_KEYS, "[output]")
        output_dir = _get(parser["output"], "dir", str, "[output]", default="out")

    betas: dict[str, float] = {}
    apps: list[AppConfig] = []
    for name in parser.sections():
        if name in ("network", "sim", "output"):
            continue
        parts = name.split(":")
        if parts[0] == "ue" and len(parts) == 2:
            _warn_unknown(parser[name], _UE_KEYS, f"[{name}]")
            betas[parts[1]] = _get(parser[name], "beta", float, f"[{name}]", default=1.0)
        elif parts[0] == "app" and len(parts) == 3:
            apps.append(_parse_app(parser[name], parts[1], parts[2], f"[{name}]"))
        else:
            log.warning("ignoring unknown section [%s]", name)

    for app in apps:
        betas.setdefault(app.ue_id, 1.0)
    if not apps:
        raise ConfigError("config declares no [app:<ue>:<id>] sections")
    ids = [a.app_id for a in apps]
    if len(set(ids)) != len(ids):
        raise ConfigError("app ids must be unique across the config")
    return ConfigFile(capacity_kbps=capacity, delta_kbps=delta, mode=mode, tick_s=tick,
                      duration_s=duration, seed=seed, output_dir=output_dir,
                      betas=betas, apps=tuple(apps))


def _parse_app(section, ue_id, app_id, where) -> AppConfig:
    _warn_unknown(section, _APP_KEYS, where)
    variant = _get(section, "utility", str, where, required=True)
    if variant == "sigmoidal":
        utility = SigmoidalUtility(a=_get(section, "a", float, where, required=True),
                                   b=_get(section, "b", float, where, required=True))
    elif variant == "logarithmic":
        utility = LogarithmicUtility(k=_get(section, "k", float, where, required=True),
                                     r_max=_get(section, "r_max", float, where, required=True))
    else:
        raise ConfigError(f"{where}: key 'utility' must be sigmoidal or logarithmic, got {variant!r}")
    alpha = _get(section, "alpha", float, where, default=1.0)
    rate_cap = _get(section, "rate_cap_kbps", float, where)
    traffic = _get(section, "traffic", str, where, default="none")
    streaming = download = None
    if traffic == "streaming":
        streaming = StreamingModel(
            bitrate_kbps=_get(section, "bitrate_kbps", float, where, required=True),
            duration_s=_get(section, "media_duration_s", float, where, required=True),
            startup_buffer_s=_get(section, "startup_buffer_s", float, where,
                                  default=STARTUP_BUFFER_S_DEFAULT),
            rebuffer_threshold_s=_get(section, "rebuffer_threshold_s", float, where,
                                      default=REBUFFER_THRESHOLD_S_DEFAULT),
            buffer_cap_s=_get(section, "buffer_cap_s", float, where,
                              default=BUFFER_CAP_S_DEFAULT))
    elif traffic == "download":
        download = DownloadModel(size_kbit=_get(section, "size_kbit", float, where, required=True))
    elif traffic != "none":
        raise ConfigError(f"{where}: key 'traffic' must be streaming, download or none, got {traffic!r}")
    return AppConfig(ue_id=ue_id, app_id=app_id, utility=utility, alpha=alpha,
                     rate_cap_kbps=rate_cap, traffic=traffic, streaming=streaming,
                     download=download)


def build_problem(cfg: ConfigFile) -> AllocationProblem:
    """Allocation problem over every configured app (traffic models ignored)."""
    users = []
    for ue_id, beta in cfg.betas.items():
        descriptors = tuple(
            AppDescriptor(app_id=a.app_id, utility=a.utility, alpha=a.alpha,
                          rate_cap=a.rate_cap_kbps if a.rate_cap_kbps is not None
                          else default_rate_cap(a.utility, cfg.capacity_kbps))
            for a in cfg.apps if a.ue_id == ue_id)
        users.append(UserProfile(ue_id=ue_id, beta=beta, apps=descriptors))
    return AllocationProblem(users=tuple(users), capacity_kbps=cfg.capacity_kbps,
                             tolerance_kbps=cfg.delta_kbps)


def build_scenario(cfg: ConfigFile, mode: str | None = None, seed: int | None = None,
                   duration_s: float | None = None) -> Scenario:
    """Simulation scenario; every app needs a streaming or download model."""
    duration = duration_s if duration_s is not None else cfg.duration_s
    if duration is None:
        raise ConfigError("[sim]: missing key 'duration_s'")
    ues = []
    for ue_id, beta in cfg.betas.items():
        flows = []
        for a in cfg.apps:
            if a.ue_id != ue_id:
                continue
            if a.traffic == "none":
                raise ConfigError(f"[app:{a.ue_id}:{a.app_id}]: missing key 'traffic' for simulation")
            model = a.streaming if a.streaming is not None else a.download
            flows.append(SimFlow(flow_id=a.app_id, model=model, utility=a.utility,
                                 alpha_share=a.alpha, rate_cap_kbps=a.rate_cap_kbps))
        ues.append(SimUE(ue_id=ue_id, beta=beta, flows=tuple(flows)))
    return Scenario(capacity_kbps=cfg.capacity_kbps, duration_s=duration, ues=tuple(ues),
                    mode=mode if mode is not None else cfg.mode, tick_s=cfg.tick_s,
                    tolerance_kbps=cfg.delta_kbps, seed=seed if seed is not None else cfg.seed)
