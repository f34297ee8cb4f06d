"""Discrete-event simulation of sync probes crossing a switch cascade.

Each switch is a single-server, non-preemptive priority queue at the line
rate.  Background traffic is injected fresh at every switch (cross-traffic
exits at the next hop), so the switches are statistically independent given
the shared probe stream and each one can be simulated as a separate pass:
the probes' departure times from switch k are their arrival times at k+1.

Two traffic families are supported:

* TM-1 / TM-2: two classes, high-priority probes over Poisson background
  with the standard packet-size mixes (shares are fractions of carried
  load, not of packet count).
* EG-TM1: three classes, event-driven (probes) over Poisson public-user
  traffic with TM-1 composition over periodic fixed-schedule batches
  (512-byte packets, 1 s period, batch size uniform on 1..100).

Only the random queuing wait is emitted per probe; the deterministic
store-and-forward time belongs to the fixed path delay handled elsewhere.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ._validation import check_positive, check_rng
from .errors import UnstableLoadError

DEFAULT_PROBE_INTERVAL = 40e-6


@dataclass(frozen=True)
class TrafficModel:
    """Background traffic composition at one switch."""

    name: str
    sizes_bytes: tuple[int, ...]
    load_shares: tuple[float, ...]
    fs_period: float | None = None
    fs_bytes: int = 512
    fs_max_batch: int = 100
    ed_extra_load: float = 0.0

    def __post_init__(self):
        if len(self.sizes_bytes) != len(self.load_shares):
            raise ValueError("sizes and load shares must align")
        if any(s <= 0 for s in self.sizes_bytes):
            raise ValueError("packet sizes must be positive")
        if any(s < 0.0 for s in self.load_shares):
            raise ValueError("load shares must be non-negative")
        if abs(sum(self.load_shares) - 1.0) > 1e-12:
            raise ValueError("load shares must sum to 1 within 1e-12")
        if self.fs_period is not None and self.fs_period <= 0.0:
            raise ValueError("FS period must be positive")

    @classmethod
    def tm1(cls) -> "TrafficModel":
        return cls(name="tm1", sizes_bytes=(64, 576, 1518), load_shares=(0.80, 0.05, 0.15))

    @classmethod
    def tm2(cls) -> "TrafficModel":
        return cls(name="tm2", sizes_bytes=(64, 576, 1518), load_shares=(0.30, 0.10, 0.60))

    @classmethod
    def eg_tm1(cls, ed_extra_load: float = 0.0) -> "TrafficModel":
        # PU traffic reuses the TM-1 composition; probes ride the ED class.
        return cls(
            name="eg-tm1",
            sizes_bytes=(64, 576, 1518),
            load_shares=(0.80, 0.05, 0.15),
            fs_period=1.0,
            fs_bytes=512,
            fs_max_batch=100,
            ed_extra_load=ed_extra_load,
        )


def traffic_model_by_name(name: str) -> TrafficModel:
    key = name.lower().replace("_", "-")
    if key == "tm1":
        return TrafficModel.tm1()
    if key == "tm2":
        return TrafficModel.tm2()
    if key == "eg-tm1":
        return TrafficModel.eg_tm1()
    raise ValueError(f"unknown traffic model {name!r}")


@dataclass(frozen=True)
class NetworkConfig:
    """Cascade parameters for one simulated path."""

    traffic: TrafficModel
    load: float
    rate_bps: float = 1e9
    switches: int = 10
    sync_bytes: int = 64
    warmup: float = 50e-3
    seed: int = 0
    max_queue_delay: float = 1.0

    def __post_init__(self):
        check_positive(self.rate_bps, "rate_bps")
        if not (0.0 <= self.load < 1.0):
            raise ValueError("load must lie in [0, 1)")
        if self.switches < 1:
            raise ValueError("need at least one switch")
        if self.sync_bytes <= 0:
            raise ValueError("sync packet size must be positive")
        if self.warmup < 0.0:
            raise ValueError("warmup must be non-negative")


@dataclass
class SwitchStats:
    """Per-switch bookkeeping for validity checks."""

    offered_load: float
    bg_packets: int
    fs_batch_times: np.ndarray


@dataclass
class SimStats:
    switches: list = field(default_factory=list)


def _poisson_stream(rng, rate: float, horizon: float) -> np.ndarray:
    """Arrival instants of a Poisson process on [0, horizon]."""
    if rate <= 0.0 or horizon <= 0.0:
        return np.empty(0)
    n_est = int(rate * horizon + 6.0 * math.sqrt(rate * horizon) + 16.0)
    times = np.cumsum(rng.exponential(1.0 / rate, n_est))
    while times.size and times[-1] < horizon:
        extra = np.cumsum(rng.exponential(1.0 / rate, max(16, n_est // 8)))
        times = np.concatenate([times, times[-1] + extra])
    return times[times <= horizon]


def _run_switch(ed_times, ed_svc, ed_is_probe, bg_times, bg_svc,
                fs_times, fs_svc, max_queue_delay) -> np.ndarray:
    """Serve one switch and return the queuing wait of every probe.

    Non-preemptive single server: when it frees, the highest-priority
    packet already present starts service (FIFO within class); an idle
    server jumps to the next arrival.  Nothing in-service is ever requeued.
    """
    n_probe = int(np.count_nonzero(ed_is_probe))
    waits = np.empty(n_probe)
    et = ed_times.tolist()
    es = ed_svc.tolist() if np.ndim(ed_svc) else [float(ed_svc)] * len(et)
    ep = ed_is_probe.tolist()
    bt = bg_times.tolist()
    bs = bg_svc.tolist()
    ft = fs_times.tolist()
    fsv = fs_svc.tolist()
    ne, nb, nf = len(et), len(bt), len(ft)
    ie = ib = ifs = 0
    served_probes = 0
    free = 0.0
    inf = math.inf
    while served_probes < n_probe:
        te = et[ie] if ie < ne else inf
        tb = bt[ib] if ib < nb else inf
        tf = ft[ifs] if ifs < nf else inf
        if te <= free:
            wait = free - te
            if wait > max_queue_delay:
                raise UnstableLoadError(
                    f"queuing wait exceeded {max_queue_delay} s; load too high"
                )
            if ep[ie]:
                waits[served_probes] = wait
                served_probes += 1
            free += es[ie]
            ie += 1
            continue
        if tb <= free:
            free += bs[ib]
            ib += 1
            continue
        if tf <= free:
            free += fsv[ifs]
            ifs += 1
            continue
        nxt = min(te, tb, tf)
        assert nxt > free, "work conservation: server idle only between arrivals"
        free = nxt
    return waits


def simulate_path_delays(config: NetworkConfig, n_probes: int, probe_interval: float,
                         rng, with_stats: bool = False):
    """End-to-end random queuing delay of each probe through the cascade.

    Background traffic runs from time zero; probes start after the warm-up.
    The returned delays are the summed per-switch queuing waits, excluding
    the deterministic store-and-forward component.
    """
    rng = check_rng(rng)
    n_probes = int(n_probes)
    if n_probes < 0:
        raise ValueError("n_probes must be >= 0")
    if n_probes == 0:
        return (np.empty(0), SimStats()) if with_stats else np.empty(0)
    check_positive(probe_interval, "probe_interval")

    tm = config.traffic
    rate = config.rate_bps
    probe_svc = config.sync_bytes * 8.0 / rate
    sizes = np.asarray(tm.sizes_bytes, dtype=float)
    svc_by_class = sizes * 8.0 / rate
    # Load shares are fractions of carried bits, so per-class packet rates
    # scale the share by the per-packet transmission time.
    class_rates = np.array(
        [config.load * s / t for s, t in zip(tm.load_shares, svc_by_class)]
    )
    bg_rate = float(class_rates.sum())
    class_probs = class_rates / bg_rate if bg_rate > 0.0 else None

    arrivals = config.warmup + probe_interval * np.arange(n_probes)
    total_waits = np.zeros(n_probes)
    stats = SimStats()
    for _ in range(config.switches):
        horizon = float(arrivals[-1])
        bg_t = _poisson_stream(rng, bg_rate, horizon)
        if bg_t.size and class_probs is not None:
            bg_svc = svc_by_class[rng.choice(len(sizes), size=bg_t.size, p=class_probs)]
        else:
            bg_svc = np.empty(0)
            bg_t = np.empty(0)

        if tm.fs_period is not None:
            n_batches = int(horizon // tm.fs_period)
            batch_times = tm.fs_period * np.arange(1, n_batches + 1)
            batch_sizes = rng.integers(1, tm.fs_max_batch + 1, size=n_batches)
            fs_t = np.repeat(batch_times, batch_sizes)
            fs_svc = np.full(fs_t.size, tm.fs_bytes * 8.0 / rate)
        else:
            batch_times = np.empty(0)
            fs_t = np.empty(0)
            fs_svc = np.empty(0)

        if tm.ed_extra_load > 0.0:
            ed_rate = tm.ed_extra_load * rate / (64.0 * 8.0)
            extra_t = _poisson_stream(rng, ed_rate, horizon)
            ed_t = np.concatenate([arrivals, extra_t])
            ed_svc = np.concatenate(
                [np.full(n_probes, probe_svc), np.full(extra_t.size, 64.0 * 8.0 / rate)]
            )
            ed_probe = np.concatenate(
                [np.ones(n_probes, dtype=bool), np.zeros(extra_t.size, dtype=bool)]
            )
            order = np.argsort(ed_t, kind="stable")
            ed_t, ed_svc, ed_probe = ed_t[order], ed_svc[order], ed_probe[order]
        else:
            ed_t = arrivals
            ed_svc = np.full(n_probes, probe_svc)
            ed_probe = np.ones(n_probes, dtype=bool)

        waits = _run_switch(ed_t, ed_svc, ed_probe, bg_t, bg_svc, fs_t, fs_svc,
                            config.max_queue_delay)
        total_waits += waits
        arrivals = arrivals + waits + probe_svc
        stats.switches.append(
            SwitchStats(
                offered_load=float(bg_svc.sum() / horizon) if horizon > 0 else 0.0,
                bg_packets=int(bg_t.size),
                fs_batch_times=batch_times,
            )
        )

    assert np.all(total_waits >= 0.0), "queuing delays must be non-negative"
    if with_stats:
        return total_waits, stats
    return total_waits


def collect_training_trace(config: NetworkConfig, n: int, rng,
                           probe_interval: float = DEFAULT_PROBE_INTERVAL) -> np.ndarray:
    """Delay trace for density fitting, ordered by probe index."""
    return simulate_path_delays(config, n, probe_interval, rng)


_FMT = "%.17g"


def save_trace(delays, config: NetworkConfig, path, n: int | None = None) -> None:
    """Write one delay per line with the configuration echoed in comments."""
    delays = np.asarray(delays, dtype=float)
    meta = {
        "traffic": config.traffic.name,
        "load": _FMT % config.load,
        "switches": str(config.switches),
        "rate_bps": _FMT % config.rate_bps,
        "sync_bytes": str(config.sync_bytes),
        "warmup": _FMT % config.warmup,
        "seed": str(config.seed),
        "n": str(delays.size if n is None else n),
    }
    with open(path, "w", encoding="ascii") as fh:
        fh.write("# netsim v1\n")
        for key, val in meta.items():
            fh.write(f"# {key}={val}\n")
        for d in delays:
            fh.write((_FMT % d) + "\n")


def load_trace(path):
    """Read a delay trace written by :func:`save_trace`.

    Returns (delays, meta) where meta is the echoed key=value mapping.
    """
    meta = {}
    values = []
    with open(path, "r", encoding="ascii") as fh:
        first = fh.readline()
        if not first.startswith("# netsim v1"):
            raise ValueError("not a netsim v1 trace file")
        for ln in fh:
            ln = ln.strip()
            if not ln:
                continue
            if ln.startswith("#"):
                body = ln[1:].strip()
                if "=" in body:
                    key, val = body.split("=", 1)
                    meta[key.strip()] = val.strip()
                continue
            values.append(float(ln))
    return np.asarray(values), meta
