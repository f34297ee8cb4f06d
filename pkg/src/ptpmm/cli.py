"""Command-line front end.

Subcommands: simulate-delays, fit-model, generate-exchange, estimate,
run-experiment.  Exit codes: 0 success, 1 usage error, 2 runtime error.
All randomness is controlled by --seed flags.  Times cross the CLI boundary
in microseconds; files and the internal API use seconds.
"""

from __future__ import annotations

import argparse
import sys

import numpy as np

from .delay_models import fit_empirical, load_delay_model, save_delay_model
from .errors import PtpmmError
from .estimators import gmle, lmle, minimax_k, minimax_s
from .exchange import (
    ClockParams,
    DelayTrace,
    ExchangeSchedule,
    generate_exchange,
    load_timestamps,
    save_timestamps,
)
from .harness import ExperimentConfig, emit_csv, make_sources, run_experiment
from .netsim import (
    DEFAULT_PROBE_INTERVAL,
    NetworkConfig,
    collect_training_trace,
    load_trace,
    save_trace,
    traffic_model_by_name,
)
from .quadrature import QuadConfig

_US = 1e-6


class _Parser(argparse.ArgumentParser):
    """argparse defaults to exit code 2 on usage errors; we reserve 2 for
    runtime failures and use 1 for usage problems."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _add_network_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--traffic", choices=["tm1", "tm2", "eg-tm1"], default="tm1")
    p.add_argument("--load", type=float, default=0.4, help="background load fraction")
    p.add_argument("--switches", type=int, default=10)
    p.add_argument("--rate-bps", type=float, default=1e9)
    p.add_argument("--sync-bytes", type=int, default=64)
    p.add_argument("--warmup", type=float, default=50e-3, help="seconds of warm-up traffic")


def _network_config(args, load: float | None = None) -> NetworkConfig:
    return NetworkConfig(
        traffic=traffic_model_by_name(args.traffic),
        load=args.load if load is None else load,
        rate_bps=args.rate_bps,
        switches=args.switches,
        sync_bytes=args.sync_bytes,
        warmup=args.warmup,
        seed=args.seed,
    )


def _quad_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--grid", type=int, default=None, help="quadrature grid points per axis")
    p.add_argument("--refine", type=int, default=None, help="quadrature refinement passes")
    p.add_argument("--quad-tol", type=float, default=None, help="quadrature relative tolerance")


def _quad_config(args, base: QuadConfig) -> QuadConfig | None:
    if args.grid is None and args.refine is None and args.quad_tol is None:
        return None
    return QuadConfig(
        grid_points=base.grid_points if args.grid is None else args.grid,
        refine_passes=base.refine_passes if args.refine is None else args.refine,
        rel_tol=base.rel_tol if args.quad_tol is None else args.quad_tol,
    )


def _cmd_simulate_delays(args) -> int:
    config = _network_config(args)
    rng = np.random.default_rng(args.seed)
    delays = collect_training_trace(config, args.n, rng, probe_interval=args.interval)
    if args.output:
        save_trace(delays, config, args.output, n=args.n)
    else:
        for d in delays:
            print("%.17g" % d)
    return 0


def _cmd_fit_model(args) -> int:
    samples, _ = load_trace(args.input)
    model = fit_empirical(samples, method=args.method, resolution=args.resolution)
    save_delay_model(model, args.output)
    return 0


def _cmd_generate_exchange(args) -> int:
    params = ClockParams(
        phi=args.phi,
        delta=args.delta * _US,
        d_ms=(args.d_ms if args.d_ms is not None else args.d) * _US,
        d_sm=(args.d_sm if args.d_sm is not None else args.d) * _US,
    )
    if args.model:
        model = load_delay_model(args.model)
        rng = np.random.default_rng(args.seed)
        w1 = model.sample(args.rounds, rng)
        w2 = model.sample(args.rounds, rng)
    elif args.trace:
        delays, _ = load_trace(args.trace)
        if delays.size < 2 * args.rounds:
            raise PtpmmError("trace too short for the requested number of rounds")
        w1 = delays[: args.rounds]
        w2 = delays[args.rounds: 2 * args.rounds]
    else:
        w1 = np.zeros(args.rounds)
        w2 = np.zeros(args.rounds)
    trace = DelayTrace(w1=w1, w2=w2)
    schedule = ExchangeSchedule.regular(args.rounds, interval=args.interval * _US,
                                        t3_offset=args.t3_offset * _US)
    ts = generate_exchange(params, trace, schedule)
    save_timestamps(ts, args.output, params=params)
    return 0


def _cmd_estimate(args) -> int:
    ts = load_timestamps(args.input)
    model = load_delay_model(args.model) if args.model else None
    rev = load_delay_model(args.rev_model) if args.rev_model else model
    d_ms = args.d_ms * _US
    d_sm = args.d_sm * _US
    if args.scheme == "gmle":
        mean_delay = args.mean_delay * _US if args.mean_delay is not None else (
            model.mean() if model is not None else 0.0
        )
        est = gmle(ts, d_ms, d_sm, mean_delay)
    else:
        if model is None:
            raise PtpmmError(f"--model is required for scheme {args.scheme}")
        if args.scheme == "lmle":
            est = lmle(ts, d_ms, d_sm, model, rev)
        elif args.scheme == "minimax-k":
            est = minimax_k(ts, d_ms, d_sm, model, rev, _quad_config(args, QuadConfig()))
        else:
            est = minimax_s(ts, model, rev, _quad_config(args, QuadConfig(grid_points=65, rel_tol=1e-5)))
    print("phi_hat=%.17g" % est.phi_hat)
    print("delta_hat=%.17g" % est.delta_hat)
    print(f"scheme={est.scheme}")
    print(f"converged={str(est.converged).lower()}")
    print(f"evaluations={est.evaluations}")
    if est.quad_rel_err is not None:
        print("quad_rel_err=%.3g" % est.quad_rel_err)
    return 0


def _read_config_file(path) -> dict[str, str]:
    out = {}
    with open(path, "r", encoding="ascii") as fh:
        for ln in fh:
            ln = ln.strip()
            if not ln or ln.startswith("#"):
                continue
            if "=" not in ln:
                raise ValueError(f"bad config line: {ln!r}")
            key, val = ln.split("=", 1)
            out[key.strip()] = val.strip()
    return out


def _cmd_run_experiment(args) -> int:
    if args.config:
        overrides = _read_config_file(args.config)
        known = {a.dest for a in args._parser._actions}  # type: ignore[attr-defined]
        for key, val in overrides.items():
            dest = key.replace("-", "_")
            if dest not in known:
                raise PtpmmError(f"unknown config key {key!r}")
            default = args._parser.get_default(dest)  # type: ignore[attr-defined]
            current = getattr(args, dest)
            if current == default:  # CLI flags win over the config file
                if isinstance(default, bool):
                    val = val.lower() in ("1", "true", "yes")
                elif isinstance(default, int) and default is not None:
                    val = int(val)
                elif isinstance(default, float) and default is not None:
                    val = float(val)
                setattr(args, dest, val)

    if args.model:
        sources = make_sources(load_delay_model(args.model))
    else:
        loads = [float(x) for x in str(args.load).split(",")]
        configs = [_network_config(args, load=ld) for ld in loads]
        sources = make_sources(configs)
    p_sweep = tuple(int(x) for x in str(args.p).split(","))
    schemes = tuple(str(args.schemes).split(","))
    cfg = ExperimentConfig(
        sources=sources,
        true_params=ClockParams(phi=args.phi, delta=args.delta * _US,
                                d_ms=args.d * _US, d_sm=args.d * _US),
        p_sweep=p_sweep,
        trials=args.trials,
        schemes=schemes,
        train_seed=args.seed,
        test_seed=args.seed + 1,
        train_size=args.train_size,
        quad_k=_quad_config(args, QuadConfig()),
        quad_s=_quad_config(args, QuadConfig(grid_points=65, rel_tol=1e-5)),
    )
    table = run_experiment(cfg)
    emit_csv(table, args.output)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ptpmm", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate-delays", parents=[], help="simulate queuing delays")
    _add_network_flags(p)
    p.add_argument("-n", type=int, required=True, help="number of probes")
    p.add_argument("--interval", type=float, default=DEFAULT_PROBE_INTERVAL,
                   help="probe spacing in seconds")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("-o", "--output", default=None, help="trace file (stdout if omitted)")
    p.set_defaults(func=_cmd_simulate_delays)

    p = sub.add_parser("fit-model", help="fit an empirical delay density to a trace")
    p.add_argument("--input", required=True, help="netsim trace file")
    p.add_argument("--method", choices=["kde", "histogram"], default="kde")
    p.add_argument("--resolution", type=int, default=None)
    p.add_argument("-o", "--output", required=True, help="delay-model file")
    p.set_defaults(func=_cmd_fit_model)

    p = sub.add_parser("generate-exchange", help="generate two-way exchange timestamps")
    p.add_argument("--phi", type=float, default=1.0)
    p.add_argument("--delta", type=float, default=2.0, help="offset in microseconds")
    p.add_argument("--d", type=float, default=2.0, help="fixed path delay in microseconds")
    p.add_argument("--d-ms", type=float, default=None, help="forward fixed delay (us)")
    p.add_argument("--d-sm", type=float, default=None, help="reverse fixed delay (us)")
    p.add_argument("-P", "--rounds", type=int, required=True)
    p.add_argument("--interval", type=float, default=40.0, help="t1 spacing (us)")
    p.add_argument("--t3-offset", type=float, default=20.0, help="t3 offset (us)")
    p.add_argument("--model", default=None, help="delay-model file to draw delays from")
    p.add_argument("--trace", default=None, help="netsim trace file to take delays from")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=_cmd_generate_exchange)

    p = sub.add_parser("estimate", help="estimate skew and offset from timestamps")
    p.add_argument("--scheme", choices=["gmle", "lmle", "minimax-k", "minimax-s"], required=True)
    p.add_argument("--input", required=True, help="timestamp file")
    p.add_argument("--model", default=None, help="delay-model file (forward path)")
    p.add_argument("--rev-model", default=None, help="reverse-path model (defaults to --model)")
    p.add_argument("--d-ms", type=float, default=0.0, help="forward fixed delay (us)")
    p.add_argument("--d-sm", type=float, default=0.0, help="reverse fixed delay (us)")
    p.add_argument("--mean-delay", type=float, default=None,
                   help="gmle mean compensation (us); defaults to the model mean")
    _quad_flags(p)
    p.set_defaults(func=_cmd_estimate)

    p = sub.add_parser("run-experiment", help="Monte-Carlo RMSE sweep")
    _add_network_flags(p)
    p.add_argument("--model", default=None, help="parametric delay-model file instead of netsim")
    p.add_argument("--p", default="4,8,16,32,64", help="comma-separated round counts")
    p.add_argument("--trials", type=int, default=1000)
    p.add_argument("--schemes", default=",".join(("gmle", "lmle", "minimax-k", "minimax-s")))
    p.add_argument("--phi", type=float, default=1.0)
    p.add_argument("--delta", type=float, default=2.0, help="true offset (us)")
    p.add_argument("--d", type=float, default=2.0, help="true fixed path delay (us)")
    p.add_argument("--train-size", type=int, default=100_000)
    p.add_argument("--seed", type=int, default=0)
    _quad_flags(p)
    p.add_argument("--config", default=None, help="key=value config file")
    p.add_argument("-o", "--output", required=True, help="CSV output path")
    p.set_defaults(func=_cmd_run_experiment)
    return parser


def cli_main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    args._parser = parser
    try:
        return args.func(args)
    except (PtpmmError, OSError, ValueError) as exc:
        print(f"ptpmm: error: {exc}", file=sys.stderr)
        return 2


def main() -> None:  # console-script entry point
    raise SystemExit(cli_main())
