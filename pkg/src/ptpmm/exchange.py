"""Two-way message-exchange timestamp generation and log-likelihoods.

A round of the exchange produces four timestamps: the master sends at t1,
the slave receives at t2 and replies at t3, the master receives at t4.
The slave clock runs at rate ``phi`` with offset ``delta`` relative to the
master, so

    t2 = (t1 + d_ms + w1) * phi + delta
    t3 = (t4 - d_sm - w2) * phi + delta

with fixed path delays d_ms / d_sm and random queuing delays w1 / w2.
Likelihoods are exposed in the log domain only; raw densities underflow for
realistic round counts.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ._validation import as_float_array, check_non_negative, check_positive
from .delay_models import DelayModel


@dataclass(frozen=True)
class ClockParams:
    """Ground-truth clock state: skew, offset and fixed path delays."""

    phi: float
    delta: float
    d_ms: float = 0.0
    d_sm: float = 0.0

    def __post_init__(self):
        check_positive(self.phi, "phi")
        check_non_negative(self.d_ms, "d_ms")
        check_non_negative(self.d_sm, "d_sm")

    @classmethod
    def symmetric(cls, phi: float, delta: float, d: float) -> "ClockParams":
        """Equal fixed path delays in both directions."""
        return cls(phi=phi, delta=delta, d_ms=d, d_sm=d)


@dataclass(frozen=True)
class DelayTrace:
    """Paired forward/reverse queuing-delay vectors for one exchange run."""

    w1: np.ndarray
    w2: np.ndarray
    stream: str = ""

    def __post_init__(self):
        w1 = as_float_array(self.w1, "w1", allow_empty=True)
        w2 = as_float_array(self.w2, "w2", allow_empty=True)
        if w1.size != w2.size:
            raise ValueError("w1 and w2 must have equal length")
        if np.any(w1 < 0.0) or np.any(w2 < 0.0):
            raise ValueError("queuing delays must be non-negative")
        w1.setflags(write=False)
        w2.setflags(write=False)
        object.__setattr__(self, "w1", w1)
        object.__setattr__(self, "w2", w2)

    def __len__(self) -> int:
        return self.w1.size


@dataclass(frozen=True)
class TimestampSet:
    """The P-round record of (t1, t2, t3, t4) vectors."""

    t1: np.ndarray
    t2: np.ndarray
    t3: np.ndarray
    t4: np.ndarray

    def __post_init__(self):
        arrays = {}
        for name in ("t1", "t2", "t3", "t4"):
            arr = as_float_array(getattr(self, name), name)
            arr.setflags(write=False)
            arrays[name] = arr
        sizes = {a.size for a in arrays.values()}
        if len(sizes) != 1:
            raise ValueError("timestamp vectors must have equal length")
        if arrays["t1"].size < 1:
            raise ValueError("need at least one exchange round")
        if np.any(np.diff(arrays["t1"]) <= 0.0):
            raise ValueError("t1 must be strictly increasing")
        for name, arr in arrays.items():
            object.__setattr__(self, name, arr)

    @property
    def p(self) -> int:
        """Number of exchange rounds."""
        return self.t1.size


@dataclass(frozen=True)
class ExchangeSchedule:
    """Transmission schedule: t1 instants plus the reply offset for t3."""

    t1: np.ndarray
    t3_offset: float = 20e-6

    def __post_init__(self):
        t1 = as_float_array(self.t1, "t1")
        if np.any(np.diff(t1) <= 0.0):
            raise ValueError("t1 schedule must be strictly increasing")
        t1.setflags(write=False)
        object.__setattr__(self, "t1", t1)

    @classmethod
    def regular(cls, p: int, interval: float = 40e-6, start: float = 0.0,
                t3_offset: float = 20e-6) -> "ExchangeSchedule":
        if p < 1:
            raise ValueError("need at least one round")
        return cls(t1=start + interval * np.arange(p), t3_offset=t3_offset)


def generate_exchange(params: ClockParams, trace: DelayTrace,
                      schedule: ExchangeSchedule) -> TimestampSet:
    """Produce the four timestamp vectors for given clock state and delays."""
    p = len(schedule.t1)
    if len(trace) != p:
        raise ValueError(f"trace length {len(trace)} != schedule length {p}")
    t1 = schedule.t1
    t3 = t1 + schedule.t3_offset
    t2 = (t1 + params.d_ms + trace.w1) * params.phi + params.delta
    t4 = (t3 - params.delta) / params.phi + params.d_sm + trace.w2
    return TimestampSet(t1=t1, t2=t2, t3=t3, t4=t4)


def implied_delays(ts: TimestampSet, phi, delta, d_ms: float, d_sm: float):
    """Invert the exchange equations for the queuing delays.

    ``phi`` and ``delta`` may be scalars or broadcastable arrays; the
    returned pair has shape ``broadcast_shape + (P,)``.
    """
    phi = np.asarray(phi, dtype=float)
    delta = np.asarray(delta, dtype=float)
    w1 = (ts.t2 - delta[..., None]) / phi[..., None] - d_ms - ts.t1
    w2 = (delta[..., None] - ts.t3) / phi[..., None] + ts.t4 - d_sm
    return w1, w2


def log_likelihood_k(ts: TimestampSet, phi, delta, d_ms: float, d_sm: float,
                     fwd: DelayModel, rev: DelayModel):
    """Joint log-likelihood of the slave timestamps with known path delays.

    Vectorized over ``phi``/``delta``.  Returns ``-inf`` whenever an implied
    delay falls outside the support of its density.
    """
    phi_arr = np.asarray(phi, dtype=float)
    if np.any(phi_arr <= 0.0):
        raise ValueError("phi must be positive")
    w1, w2 = implied_delays(ts, phi, delta, d_ms, d_sm)
    ll = fwd.log_density(w1).sum(axis=-1) + rev.log_density(w2).sum(axis=-1)
    ll = ll - 2.0 * ts.p * np.log(phi_arr)
    if phi_arr.ndim == 0 and np.ndim(delta) == 0:
        return float(ll)
    return ll


def log_likelihood_s(ts: TimestampSet, phi, d, delta,
                     fwd: DelayModel, rev: DelayModel):
    """Joint log-likelihood with a single unknown symmetric path delay."""
    phi_arr = np.asarray(phi, dtype=float)
    if np.any(phi_arr <= 0.0):
        raise ValueError("phi must be positive")
    d = np.asarray(d, dtype=float)
    delta = np.asarray(delta, dtype=float)
    w1 = (ts.t2 - delta[..., None]) / phi_arr[..., None] - d[..., None] - ts.t1
    w2 = (delta[..., None] - ts.t3) / phi_arr[..., None] + ts.t4 - d[..., None]
    ll = fwd.log_density(w1).sum(axis=-1) + rev.log_density(w2).sum(axis=-1)
    ll = ll - 2.0 * ts.p * np.log(phi_arr)
    if phi_arr.ndim == 0 and d.ndim == 0 and delta.ndim == 0:
        return float(ll)
    return ll


def transform_k(ts: TimestampSet, a: float, b: float) -> TimestampSet:
    """Map the slave-clock observations through y -> a*y + b.

    Applies to t2 and t3 only; the master-side timestamps t1 and t4 are the
    known constants of the observation model.  A set generated with
    (phi, delta) maps to a valid draw for (a*phi, a*delta + b).
    """
    check_positive(a, "a")
    return TimestampSet(t1=ts.t1, t2=a * ts.t2 + b, t3=a * ts.t3 + b, t4=ts.t4)


def transform_s(ts: TimestampSet, a: float, b: float, c: float) -> TimestampSet:
    """Map the slave-clock observations through y -> a*(y + h*b) + c.

    ``h`` is +1 on the forward rows (t2) and -1 on the reverse rows (t3).
    A set generated with (phi, d, delta) maps to a valid draw for
    (a*phi, d + b/phi, a*delta + c).
    """
    check_positive(a, "a")
    return TimestampSet(t1=ts.t1, t2=a * (ts.t2 + b) + c, t3=a * (ts.t3 - b) + c, t4=ts.t4)


_FMT = "%.17g"


def save_timestamps(ts: TimestampSet, path, params: ClockParams | None = None) -> None:
    """Write four-column timestamp text (t1 t2 t3 t4, one row per round)."""
    lines = ["# exchange v1"]
    if params is not None:
        lines.append(
            "# phi=%s delta=%s d_ms=%s d_sm=%s"
            % (_FMT % params.phi, _FMT % params.delta, _FMT % params.d_ms, _FMT % params.d_sm)
        )
    for row in zip(ts.t1, ts.t2, ts.t3, ts.t4):
        lines.append(" ".join(_FMT % v for v in row))
    with open(path, "w", encoding="ascii") as fh:
        fh.write("\n".join(lines) + "\n")


def load_timestamps(path) -> TimestampSet:
    """Read a timestamp file written by :func:`save_timestamps`."""
    rows = []
    with open(path, "r", encoding="ascii") as fh:
        first = fh.readline()
        if not first.startswith("# exchange v1"):
            raise ValueError("not an exchange v1 file")
        for ln in fh:
            ln = ln.strip()
            if not ln or ln.startswith("#"):
                continue
            vals = [float(x) for x in ln.split()]
            if len(vals) != 4:
                raise ValueError("expected four columns per row")
            rows.append(vals)
    if not rows:
        raise ValueError("timestamp file contains no rows")
    arr = np.array(rows)
    return TimestampSet(t1=arr[:, 0], t2=arr[:, 1], t3=arr[:, 2], t4=arr[:, 3])
