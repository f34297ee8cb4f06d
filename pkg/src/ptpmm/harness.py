"""Monte-Carlo RMSE experiments over exchange rounds and traffic loads.

One experiment sweeps round counts (and optionally several delay sources),
fits the delay density on a training trace, then runs every configured
scheme on identical per-trial timestamp sets drawn from an independent test
stream.  Results are RMSE tables with delta-method standard errors,
deterministic for fixed seeds.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .delay_models import DelayModel, fit_empirical
from .errors import ExperimentError, PtpmmError
from .estimators import Estimate, gmle, lmle, minimax_k, minimax_s
from .exchange import ClockParams, DelayTrace, ExchangeSchedule, TimestampSet, generate_exchange
from .netsim import DEFAULT_PROBE_INTERVAL, NetworkConfig, simulate_path_delays
from .quadrature import QuadConfig

ALL_SCHEMES = ("gmle", "lmle", "minimax-k", "minimax-s")


@dataclass(frozen=True)
class ExperimentConfig:
    """Full description of one Monte-Carlo experiment."""

    sources: tuple  # (label, NetworkConfig | DelayModel) pairs
    true_params: ClockParams = ClockParams.symmetric(1.0, 2e-6, 2e-6)
    p_sweep: tuple[int, ...] = (4, 8, 16, 32, 64)
    trials: int = 1000
    schemes: tuple[str, ...] = ALL_SCHEMES
    train_seed: int = 1
    test_seed: int = 2
    train_size: int = 100_000
    fit_method: str = "kde"
    fit_resolution: int | None = None
    probe_interval: float = DEFAULT_PROBE_INTERVAL
    t3_offset: float = 20e-6
    quad_k: QuadConfig | None = None
    quad_s: QuadConfig | None = None
    max_failure_rate: float = 0.01

    def __post_init__(self):
        if self.trials < 1:
            raise ValueError("trials must be >= 1")
        if self.train_seed == self.test_seed:
            raise ValueError("train and test seeds must be distinct")
        if not self.p_sweep or any(p < 2 for p in self.p_sweep):
            raise ValueError("p_sweep entries must be >= 2")
        unknown = set(self.schemes) - set(ALL_SCHEMES)
        if unknown:
            raise ValueError(f"unknown schemes: {sorted(unknown)}")


def make_sources(source, labels=None) -> tuple:
    """Normalize a source or list of sources into (label, source) pairs."""
    if isinstance(source, (NetworkConfig, DelayModel)):
        source = [source]
    out = []
    for i, src in enumerate(source):
        if isinstance(src, tuple):
            out.append(src)
            continue
        if labels is not None:
            label = labels[i]
        elif isinstance(src, NetworkConfig):
            label = f"{src.traffic.name}@{src.load:g}"
        else:
            label = src.kind
        out.append((label, src))
    return tuple(out)


@dataclass(frozen=True)
class RmseRow:
    scheme: str
    p: int
    load: str
    rmse_delta: float
    rmse_phi: float
    stderr_delta: float
    stderr_phi: float
    trials: int


@dataclass
class RmseTable:
    rows: list[RmseRow] = field(default_factory=list)

    def get(self, scheme: str, p: int, load: str | None = None) -> RmseRow:
        for row in self.rows:
            if row.scheme == scheme and row.p == p and (load is None or row.load == load):
                return row
        raise KeyError((scheme, p, load))


def _rng(*entropy) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(entropy))


def _training_samples(source, cfg: ExperimentConfig, src_idx: int) -> np.ndarray:
    rng = _rng(cfg.train_seed, src_idx, 0)
    if isinstance(source, NetworkConfig):
        return simulate_path_delays(source, cfg.train_size, cfg.probe_interval, rng)
    return source.sample(cfg.train_size, rng)


def _test_pool(source, cfg: ExperimentConfig, src_idx: int, p: int, direction: int):
    """All test-stream delays for one (source, P) sweep point, one direction."""
    rng = _rng(cfg.test_seed, src_idx, p, direction)
    n = cfg.trials * p
    if isinstance(source, NetworkConfig):
        return simulate_path_delays(source, n, cfg.probe_interval, rng)
    return source.sample(n, rng)


def _run_schemes(ts: TimestampSet, cfg: ExperimentConfig, fitted: DelayModel,
                 truth: ClockParams) -> dict[str, Estimate]:
    out = {}
    for scheme in cfg.schemes:
        if scheme == "gmle":
            out[scheme] = gmle(ts, truth.d_ms, truth.d_sm, fitted.mean())
        elif scheme == "lmle":
            out[scheme] = lmle(ts, truth.d_ms, truth.d_sm, fitted, fitted)
        elif scheme == "minimax-k":
            out[scheme] = minimax_k(ts, truth.d_ms, truth.d_sm, fitted, fitted, cfg.quad_k)
        elif scheme == "minimax-s":
            out[scheme] = minimax_s(ts, fitted, fitted, cfg.quad_s)
    return out


def run_experiment(cfg: ExperimentConfig) -> RmseTable:
    """Run the full sweep and return the RMSE table.

    Every scheme inside a trial sees the same timestamp set (common random
    numbers).  A hard estimator error aborts that trial for all schemes and
    is counted; more than ``max_failure_rate`` failed trials fails the
    experiment.  Trials may run on ``PTPMM_THREADS`` threads; aggregation
    order is fixed by trial index either way.
    """
    table = RmseTable()
    n_threads = max(1, int(os.environ.get("PTPMM_THREADS", "1")))
    truth = cfg.true_params
    test_tag = f"test:{cfg.test_seed}"
    for src_idx, (label, source) in enumerate(cfg.sources):
        samples = _training_samples(source, cfg, src_idx)
        fitted = fit_empirical(samples, method=cfg.fit_method, resolution=cfg.fit_resolution)
        fitted_stream = f"train:{cfg.train_seed}"
        assert fitted_stream != test_tag, "empirical model must never see test draws"
        for p in cfg.p_sweep:
            schedule = ExchangeSchedule.regular(p, interval=cfg.probe_interval,
                                                t3_offset=cfg.t3_offset)
            pool_w1 = _test_pool(source, cfg, src_idx, p, 1)
            pool_w2 = _test_pool(source, cfg, src_idx, p, 2)

            def one_trial(trial: int):
                w1 = pool_w1[trial * p:(trial + 1) * p]
                w2 = pool_w2[trial * p:(trial + 1) * p]
                trace = DelayTrace(w1=w1, w2=w2, stream=test_tag)
                ts = generate_exchange(truth, trace, schedule)
                try:
                    return _run_schemes(ts, cfg, fitted, truth)
                except PtpmmError:
                    return None

            if n_threads > 1:
                with ThreadPoolExecutor(max_workers=n_threads) as pool:
                    results = list(pool.map(one_trial, range(cfg.trials)))
            else:
                results = [one_trial(t) for t in range(cfg.trials)]

            failures = sum(1 for r in results if r is None)
            if failures > cfg.max_failure_rate * cfg.trials:
                raise ExperimentError(
                    f"{failures}/{cfg.trials} trials failed for source {label!r}, P={p}"
                )
            ok = [r for r in results if r is not None]
            for scheme in cfg.schemes:
                sq_d = np.array([(r[scheme].delta_hat - truth.delta) ** 2 for r in ok])
                sq_p = np.array([(r[scheme].phi_hat - truth.phi) ** 2 for r in ok])
                table.rows.append(_rmse_row(scheme, p, label, sq_d, sq_p))
    return table


def _rmse_row(scheme: str, p: int, label: str, sq_d: np.ndarray, sq_p: np.ndarray) -> RmseRow:
    n = sq_d.size
    mse_d = float(sq_d.mean())
    mse_p = float(sq_p.mean())
    rmse_d = float(np.sqrt(mse_d))
    rmse_p = float(np.sqrt(mse_p))
    # delta method: se(rmse) = se(mse) / (2 rmse)
    se_d = float(sq_d.std(ddof=1) / np.sqrt(n) / (2.0 * rmse_d)) if n > 1 and rmse_d > 0 else 0.0
    se_p = float(sq_p.std(ddof=1) / np.sqrt(n) / (2.0 * rmse_p)) if n > 1 and rmse_p > 0 else 0.0
    return RmseRow(scheme=scheme, p=p, load=label, rmse_delta=rmse_d, rmse_phi=rmse_p,
                   stderr_delta=se_d, stderr_phi=se_p, trials=n)


CSV_HEADER = "scheme,P,load,rmse_delta_s,rmse_phi,stderr_delta,stderr_phi,trials"
_CSV_FMT = "%.10g"


def emit_csv(table: RmseTable, path) -> None:
    """Write the RMSE table; 10 significant digits per numeric field."""
    lines = [CSV_HEADER]
    for r in table.rows:
        lines.append(
            ",".join(
                [
                    r.scheme,
                    str(r.p),
                    r.load,
                    _CSV_FMT % r.rmse_delta,
                    _CSV_FMT % r.rmse_phi,
                    _CSV_FMT % r.stderr_delta,
                    _CSV_FMT % r.stderr_phi,
                    str(r.trials),
                ]
            )
        )
    with open(path, "w", encoding="ascii") as fh:
        fh.write("\n".join(lines) + "\n")


def load_rmse_csv(path) -> RmseTable:
    """Parse a CSV written by :func:`emit_csv`."""
    table = RmseTable()
    with open(path, "r", encoding="ascii") as fh:
        header = fh.readline().strip()
        if header != CSV_HEADER:
            raise ValueError("unexpected CSV header")
        for ln in fh:
            ln = ln.strip()
            if not ln:
                continue
            parts = ln.split(",")
            table.rows.append(
                RmseRow(
                    scheme=parts[0],
                    p=int(parts[1]),
                    load=parts[2],
                    rmse_delta=float(parts[3]),
                    rmse_phi=float(parts[4]),
                    stderr_delta=float(parts[5]),
                    stderr_phi=float(parts[6]),
                    trials=int(parts[7]),
                )
            )
    return table
