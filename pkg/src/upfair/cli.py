"""Command line front end.

Subcommands:

  solve      one-shot allocation for a config, or a capacity sweep
  simulate   run the shaped/unshaped scenario and write trace + QoE CSVs
  broker     serve the registration protocol over TCP
  fit        fit a sigmoidal utility to two (rate_cap, satisfaction) points

Every flag can also be supplied through an environment variable named
UPFAIR_<FLAG> (e.g. UPFAIR_MODE=unshaped, UPFAIR_OUT=/tmp/run); explicit
flags win over the environment.  Exit status is 0 only on success.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from . import broker as broker_mod
from . import simnet
from .config import ConfigError, build_problem, build_scenario, load_config
from .solver import SolverError, ValidationError, solve, sweep
from .utility import QoEObservation, fit_sigmoidal

ENV_PREFIX = "UPFAIR_"


def _env_default(flag: str):
    return os.environ.get(ENV_PREFIX + flag.upper())


def _add_common(parser):
    parser.add_argument("--config", default=_env_default("config"),
                        help="path to the INI configuration")
    parser.add_argument("--out", default=_env_default("out"),
                        help="output directory (default: [output] dir from the config)")


def _out_dir(args, cfg) -> Path:
    out = Path(args.out if args.out is not None else cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _require_config(args):
    if not args.config:
        raise ConfigError("--config is required (or set UPFAIR_CONFIG)")
    return load_config(args.config)


def _fmt(x: float) -> str:
    return format(x, ".10g")


def cmd_solve(args) -> int:
    cfg = _require_config(args)
    problem = build_problem(cfg)
    out = _out_dir(args, cfg)
    if args.sweep:
        lo, hi, step = _parse_sweep(args.sweep)
        capacities = []
        r = lo
        while r <= hi + 1e-9:
            capacities.append(r)
            r += step
        points = sweep(problem.users, capacities, problem.tolerance_kbps)
        app_ids = list(points[0].rates)
        path = out / "sweep.csv"
        with open(path, "w", encoding="utf-8", newline="") as f:
            f.write("capacity_kbps," + ",".join(app_ids) + ",total_kbps\n")
            for p in points:
                rates = [p.rates[a] for a in app_ids]
                f.write(",".join([_fmt(p.capacity_kbps)] + [_fmt(r) for r in rates]
                                 + [_fmt(sum(rates))]) + "\n")
        print(f"wrote {len(points)} sweep rows to {path}")
        return 0
    result = solve(problem)
    path = out / "allocation.csv"
    with open(path, "w", encoding="utf-8", newline="") as f:
        f.write("app_id,rate_kbps\n")
        for app_id, rate in result.rates.items():
            f.write(f"{app_id},{_fmt(rate)}\n")
    print(f"shadow price {_fmt(result.shadow_price)} /kbps after "
          f"{result.iterations} bisections, residual {_fmt(result.residual_kbps)} kbps")
    for app_id, rate in result.rates.items():
        print(f"  {app_id}: {_fmt(rate)} kbps")
    print(f"wrote {path}")
    return 0


def cmd_simulate(args) -> int:
    cfg = _require_config(args)
    scenario = build_scenario(cfg, mode=args.mode, seed=args.seed)
    trace, report = simnet.run(scenario)
    out = _out_dir(args, cfg)
    trace_path = out / f"trace_{scenario.mode}.csv"
    qoe_path = out / f"qoe_{scenario.mode}.csv"
    simnet.write_trace_csv(trace, trace_path)
    simnet.write_qoe_csv(report, qoe_path)
    print(f"{scenario.mode} run, {_fmt(scenario.duration_s)} s at tick {_fmt(scenario.tick_s)} s")
    for q in report.flows.values():
        completion = f"completed {_fmt(q.completion_s)} s" if q.completion_s is not None else "incomplete"
        print(f"  {q.flow_id}: avg {_fmt(q.avg_throughput_kbps)} kbps, "
              f"{q.buffering_count} stalls ({_fmt(q.buffering_s)} s), {completion}")
    print(f"  network: avg {_fmt(report.network_avg_throughput_kbps)} kbps")
    print(f"wrote {trace_path} and {qoe_path}")
    return 0


def cmd_broker(args) -> int:
    cfg = _require_config(args) if args.config else None
    if args.capacity is None and cfg is None:
        raise ConfigError("--capacity or --config is required")
    capacity = args.capacity if args.capacity is not None else cfg.capacity_kbps
    tolerance = cfg.delta_kbps if cfg is not None else 1e-4
    host, port = _parse_listen(args.listen)
    log_path = None
    if args.out or cfg is not None:
        out = Path(args.out) if args.out else Path(cfg.output_dir)
        out.mkdir(parents=True, exist_ok=True)
        log_path = out / "epochs.csv"
    service = broker_mod.BrokerService(capacity_kbps=capacity, tolerance_kbps=tolerance,
                                       host=host, port=port, log_path=log_path)
    print(f"broker listening on {service.address[0]}:{service.address[1]}, "
          f"capacity {_fmt(capacity)} kbps")
    try:
        service.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        service.shutdown()
    return 0


def cmd_fit(args) -> int:
    low = _parse_observation(args.low)
    high = _parse_observation(args.high)
    u = fit_sigmoidal(low, high)
    print(f"a = {_fmt(u.a)}")
    print(f"b = {_fmt(u.b)}")
    return 0


def _parse_sweep(text: str):
    parts = text.split(":")
    if len(parts) != 3:
        raise ConfigError(f"--sweep expects LO:HI:STEP, got {text!r}")
    try:
        lo, hi, step = (float(p) for p in parts)
    except ValueError:
        raise ConfigError(f"--sweep expects numbers LO:HI:STEP, got {text!r}") from None
    if step <= 0 or hi < lo or lo <= 0:
        raise ConfigError("--sweep needs 0 < LO <= HI and STEP > 0")
    return lo, hi, step


def _parse_listen(text: str):
    host, _, port = text.rpartition(":")
    try:
        return (host or "127.0.0.1"), int(port)
    except ValueError:
        raise ConfigError(f"--listen expects HOST:PORT, got {text!r}") from None


def _parse_observation(text: str) -> QoEObservation:
    try:
        rate, _, sat = text.partition(":")
        return QoEObservation(rate_cap=float(rate), satisfaction=float(sat))
    except ValueError as e:
        raise ConfigError(f"observation expects RATE:SATISFACTION, got {text!r} ({e})") from None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="upfair",
        description="Utility proportional-fair bandwidth allocation tools",
        epilog=f"Flags may be set via {ENV_PREFIX}<FLAG> environment variables.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("solve", help="allocate the configured link once, or sweep capacities")
    _add_common(p)
    p.add_argument("--sweep", default=_env_default("sweep"),
                   help="capacity sweep LO:HI:STEP in kbps")
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("simulate", help="run the configured scenario")
    _add_common(p)
    p.add_argument("--mode", choices=["shaped", "unshaped"], default=_env_default("mode"))
    seed_env = _env_default("seed")
    p.add_argument("--seed", type=int, default=int(seed_env) if seed_env else None)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("broker", help="serve the registration protocol")
    _add_common(p)
    p.add_argument("--listen", default=_env_default("listen") or "127.0.0.1:7315",
                   help="HOST:PORT to bind (default 127.0.0.1:7315)")
    p.add_argument("--capacity", type=float, default=None, help="link capacity in kbps")
    p.set_defaults(func=cmd_broker)

    p = sub.add_parser("fit", help="fit a sigmoidal utility from two observations")
    p.add_argument("--low", required=True, help="RATE:SATISFACTION of the poor experience")
    p.add_argument("--high", required=True, help="RATE:SATISFACTION of the good experience")
    p.set_defaults(func=cmd_fit)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ValidationError, SolverError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
