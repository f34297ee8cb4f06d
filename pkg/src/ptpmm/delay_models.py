"""Queuing-delay density models used by the likelihood-based estimators.

Parametric one-sided families (exponential, gamma), a two-sided shifted
Gaussian, and empirical densities fitted from delay traces (Gaussian-kernel
KDE and normalized histogram).  Every model exposes vectorized log-density
evaluation, seeded sampling, support bounds and basic moments so likelihood
and quadrature code can treat all kinds uniformly.

All times are seconds.  Log densities return ``-inf`` outside the support;
there is no density floor.
"""

from __future__ import annotations

import math
from typing import NamedTuple

import numpy as np
from scipy import signal, special, stats

from ._validation import as_float_array, check_positive, check_rng
from .errors import DegenerateFitError


class SupportInterval(NamedTuple):
    """Closed interval outside which a density is exactly zero."""

    lo: float
    hi: float


def _eval_elementwise(func, w):
    """Apply ``func`` to ``w`` preserving scalar-in scalar-out semantics."""
    arr = np.asarray(w, dtype=float)
    out = func(arr)
    if arr.ndim == 0:
        return float(out)
    return out


class DelayModel:
    """Base class for one-dimensional queuing-delay densities."""

    kind: str = "base"

    def log_density(self, w):
        """Log density at ``w`` (scalar or array); ``-inf`` outside support."""
        raise NotImplementedError

    def sample(self, n: int, rng) -> np.ndarray:
        """Draw ``n`` i.i.d. delays; deterministic given the generator state."""
        raise NotImplementedError

    def support(self) -> SupportInterval:
        """Smallest interval outside which ``log_density`` is ``-inf``."""
        raise NotImplementedError

    def finite_support(self, tail: float = 1e-14) -> SupportInterval:
        """Finite interval carrying all but ~``tail`` of the mass.

        Equals :meth:`support` when that is already bounded; otherwise the
        infinite ends are replaced by extreme quantiles.  Quadrature uses
        this to bound integration regions.
        """
        lo, hi = self.support()
        if np.isinf(lo):
            lo = self._quantile(tail)
        if np.isinf(hi):
            hi = self._quantile(1.0 - tail)
        return SupportInterval(float(lo), float(hi))

    def _quantile(self, q: float) -> float:
        raise NotImplementedError

    def cdf(self, w):
        raise NotImplementedError

    def mean(self) -> float:
        raise NotImplementedError

    def stddev(self) -> float:
        raise NotImplementedError

    def median(self) -> float:
        raise NotImplementedError

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        return f"<{type(self).__name__} kind={self.kind}>"


class ExponentialDelay(DelayModel):
    """Exponential delays with the given rate (1/seconds)."""

    kind = "exponential"

    def __init__(self, rate: float):
        self.rate = check_positive(rate, "rate")

    def log_density(self, w):
        def f(arr):
            with np.errstate(invalid="ignore"):
                out = np.where(arr >= 0.0, math.log(self.rate) - self.rate * arr, -np.inf)
            return out

        return _eval_elementwise(f, w)

    def sample(self, n, rng):
        rng = check_rng(rng)
        return rng.exponential(1.0 / self.rate, size=int(n))

    def support(self):
        return SupportInterval(0.0, np.inf)

    def cdf(self, w):
        return _eval_elementwise(lambda a: np.where(a < 0, 0.0, -np.expm1(-self.rate * np.maximum(a, 0.0))), w)

    def mean(self):
        return 1.0 / self.rate

    def stddev(self):
        return 1.0 / self.rate

    def median(self):
        return math.log(2.0) / self.rate

    def _quantile(self, q):
        return -math.log1p(-q) / self.rate


class GammaDelay(DelayModel):
    """Gamma delays with shape (dimensionless) and scale (seconds)."""

    kind = "gamma"

    def __init__(self, shape: float, scale: float):
        self.shape = check_positive(shape, "shape")
        self.scale = check_positive(scale, "scale")

    def log_density(self, w):
        return _eval_elementwise(lambda a: stats.gamma.logpdf(a, self.shape, scale=self.scale), w)

    def sample(self, n, rng):
        rng = check_rng(rng)
        return rng.gamma(self.shape, self.scale, size=int(n))

    def support(self):
        return SupportInterval(0.0, np.inf)

    def cdf(self, w):
        return _eval_elementwise(lambda a: stats.gamma.cdf(a, self.shape, scale=self.scale), w)

    def mean(self):
        return self.shape * self.scale

    def stddev(self):
        return math.sqrt(self.shape) * self.scale

    def median(self):
        return float(stats.gamma.ppf(0.5, self.shape, scale=self.scale))

    def _quantile(self, q):
        return float(stats.gamma.ppf(q, self.shape, scale=self.scale))


class GaussianDelay(DelayModel):
    """Shifted Gaussian delays; the one two-sided family."""

    kind = "gaussian"

    def __init__(self, mean: float, stddev: float):
        self.loc = float(mean)
        self.sigma = check_positive(stddev, "stddev")

    def log_density(self, w):
        c = -0.5 * math.log(2.0 * math.pi) - math.log(self.sigma)

        def f(arr):
            z = (arr - self.loc) / self.sigma
            return c - 0.5 * z * z

        return _eval_elementwise(f, w)

    def sample(self, n, rng):
        rng = check_rng(rng)
        return rng.normal(self.loc, self.sigma, size=int(n))

    def support(self):
        return SupportInterval(-np.inf, np.inf)

    def cdf(self, w):
        return _eval_elementwise(lambda a: special.ndtr((a - self.loc) / self.sigma), w)

    def mean(self):
        return self.loc

    def stddev(self):
        return self.sigma

    def median(self):
        return self.loc

    def _quantile(self, q):
        return self.loc + self.sigma * float(special.ndtri(q))


class KdeDelay(DelayModel):
    """Gaussian-kernel density estimate, truncated to its support and
    renormalized.

    The density is materialized once on a dense grid (linear binning plus an
    FFT convolution with the kernel) and evaluated by linear interpolation,
    which keeps likelihood evaluation cheap inside quadrature loops.  The
    support is the sample range padded by six bandwidths, clipped below at
    zero.
    """

    kind = "kde"

    def __init__(self, points, bandwidth: float, table_size: int = 8193):
        self.points = as_float_array(points, "points")
        self.bandwidth = check_positive(bandwidth, "bandwidth")
        if table_size < 16:
            raise ValueError("table_size must be >= 16")
        self.table_size = int(table_size)
        self._build_table()

    def _build_table(self):
        h = self.bandwidth
        lo = max(0.0, float(self.points.min()) - 6.0 * h)
        hi = float(self.points.max()) + 6.0 * h
        grid = np.linspace(lo, hi, self.table_size)
        step = grid[1] - grid[0]

        # Linear binning onto a padded grid, then convolve with the kernel.
        # Padding avoids circular bleed from the FFT convolution.
        pad = int(math.ceil(8.0 * h / step)) + 2
        n_pad = self.table_size + 2 * pad
        pos = (self.points - (lo - pad * step)) / step
        idx = np.floor(pos).astype(int)
        frac = pos - idx
        counts = np.zeros(n_pad)
        np.add.at(counts, np.clip(idx, 0, n_pad - 1), 1.0 - frac)
        np.add.at(counts, np.clip(idx + 1, 0, n_pad - 1), frac)
        half = int(math.ceil(7.0 * h / step))
        offsets = np.arange(-half, half + 1) * step
        kernel = np.exp(-0.5 * (offsets / h) ** 2)
        kernel /= kernel.sum()
        density = signal.fftconvolve(counts, kernel, mode="same")[pad:pad + self.table_size]
        density = np.maximum(density, 0.0) / (len(self.points) * step)

        # Truncation at the support edges loses kernel mass; renormalize so
        # the piecewise-linear interpolant integrates to exactly one.
        z = np.trapezoid(density, grid)
        if not np.isfinite(z) or z <= 0.0:
            raise DegenerateFitError("KDE density table is degenerate")
        density /= z

        self._grid = grid
        self._density = density
        self._cdf_table = np.concatenate(
            ([0.0], np.cumsum(0.5 * (density[1:] + density[:-1]) * np.diff(grid)))
        )
        self._cdf_table /= self._cdf_table[-1]
        self._lo = lo
        self._hi = hi
        m1 = np.trapezoid(density * grid, grid)
        m2 = np.trapezoid(density * grid * grid, grid)
        self._mean = float(m1)
        self._std = float(math.sqrt(max(m2 - m1 * m1, 0.0)))

    def log_density(self, w):
        def f(arr):
            dens = np.interp(arr, self._grid, self._density, left=0.0, right=0.0)
            with np.errstate(divide="ignore"):
                out = np.log(dens)
            out = np.where((arr < self._lo) | (arr > self._hi), -np.inf, out)
            return out

        return _eval_elementwise(f, w)

    def sample(self, n, rng):
        rng = check_rng(rng)
        n = int(n)
        out = np.empty(n)
        filled = 0
        while filled < n:
            m = n - filled
            draws = rng.choice(self.points, size=m) + self.bandwidth * rng.standard_normal(m)
            ok = draws[(draws >= self._lo) & (draws <= self._hi)]
            out[filled:filled + ok.size] = ok
            filled += ok.size
        return out

    def support(self):
        return SupportInterval(self._lo, self._hi)

    def cdf(self, w):
        return _eval_elementwise(
            lambda a: np.interp(a, self._grid, self._cdf_table, left=0.0, right=1.0), w
        )

    def mean(self):
        return self._mean

    def stddev(self):
        return self._std

    def median(self):
        return float(np.interp(0.5, self._cdf_table, self._grid))


class HistogramDelay(DelayModel):
    """Piecewise-constant density from bin edges and bin masses."""

    kind = "histogram"

    def __init__(self, edges, masses):
        edges = as_float_array(edges, "edges")
        masses = as_float_array(masses, "masses", allow_empty=True)
        if edges.size < 2 or masses.size != edges.size - 1:
            raise ValueError("need n+1 edges for n bin masses, n >= 1")
        if np.any(np.diff(edges) <= 0.0):
            raise ValueError("edges must be strictly increasing")
        if edges[0] < 0.0:
            raise ValueError("histogram delay support must start at >= 0")
        if np.any(masses < 0.0):
            raise ValueError("masses must be non-negative")
        total = masses.sum()
        if abs(total - 1.0) > 1e-12:
            raise ValueError(f"masses must sum to 1 within 1e-12, got {total!r}")
        self.edges = edges
        self.masses = masses / total
        self._widths = np.diff(edges)
        self._heights = self.masses / self._widths

    def log_density(self, w):
        def f(arr):
            idx = np.searchsorted(self.edges, arr, side="right") - 1
            # the right-most edge belongs to the last bin
            idx = np.where(arr == self.edges[-1], len(self.masses) - 1, idx)
            valid = (idx >= 0) & (idx < len(self.masses))
            heights = np.where(valid, self._heights[np.clip(idx, 0, len(self.masses) - 1)], 0.0)
            with np.errstate(divide="ignore"):
                return np.where(heights > 0.0, np.log(np.maximum(heights, 1e-300)), -np.inf)

        return _eval_elementwise(f, w)

    def sample(self, n, rng):
        if len(self.masses) == 0:
            raise ValueError("cannot sample from an empty histogram")
        rng = check_rng(rng)
        n = int(n)
        bins = rng.choice(len(self.masses), size=n, p=self.masses)
        u = rng.random(n)
        return self.edges[bins] + u * self._widths[bins]

    def support(self):
        return SupportInterval(float(self.edges[0]), float(self.edges[-1]))

    def cdf(self, w):
        cum = np.concatenate(([0.0], np.cumsum(self.masses)))

        def f(arr):
            return np.interp(arr, self.edges, cum, left=0.0, right=1.0)

        return _eval_elementwise(f, w)

    def mean(self):
        centers = 0.5 * (self.edges[:-1] + self.edges[1:])
        return float(np.sum(self.masses * centers))

    def stddev(self):
        centers = 0.5 * (self.edges[:-1] + self.edges[1:])
        m = self.mean()
        var = np.sum(self.masses * (centers**2 + self._widths**2 / 12.0)) - m * m
        return float(math.sqrt(max(var, 0.0)))

    def median(self):
        cum = np.concatenate(([0.0], np.cumsum(self.masses)))
        return float(np.interp(0.5, cum, self.edges))


def silverman_bandwidth(samples: np.ndarray) -> float:
    """Rule-of-thumb kernel bandwidth, 0.9 * min(std, IQR/1.34) * n^(-1/5).

    Falls back to the standard deviation when the IQR is zero (heavily
    zero-inflated traces at low load), and signals a degenerate fit when
    both spread measures vanish.
    """
    samples = np.asarray(samples, dtype=float)
    n = samples.size
    if n < 2:
        raise DegenerateFitError("need at least two samples for a KDE fit")
    std = float(np.std(samples, ddof=1))
    q75, q25 = np.percentile(samples, [75.0, 25.0])
    iqr = float(q75 - q25)
    scale = min(std, iqr / 1.34) if iqr > 0.0 else std
    if scale <= 0.0:
        raise DegenerateFitError("samples have zero spread; KDE bandwidth is degenerate")
    return 0.9 * scale * n ** (-0.2)


def fit_empirical(samples, method: str = "kde", resolution: int | None = None) -> DelayModel:
    """Fit an empirical delay density to a trace.

    ``kde`` fits a Gaussian-kernel estimate with Silverman's bandwidth
    (``resolution`` sets the density-table size); ``histogram`` uses
    ``resolution`` equal-width bins spanning [min, max] with relative
    frequencies as masses.
    """
    samples = as_float_array(samples, "samples")
    if method == "kde":
        bandwidth = silverman_bandwidth(samples)
        table_size = 8193 if resolution is None else int(resolution)
        return KdeDelay(samples, bandwidth, table_size=table_size)
    if method == "histogram":
        bins = 200 if resolution is None else int(resolution)
        if bins < 2:
            raise ValueError("histogram resolution must be >= 2")
        lo, hi = float(samples.min()), float(samples.max())
        if lo == hi:
            raise DegenerateFitError("all samples identical; histogram bins are degenerate")
        counts, edges = np.histogram(samples, bins=bins, range=(lo, hi))
        masses = counts / counts.sum()
        return HistogramDelay(edges, masses)
    raise ValueError(f"unknown fit method {method!r}")


_FMT = "%.17g"


def save_delay_model(model: DelayModel, path) -> None:
    """Write a model to the plain-text columnar format.

    The stored decimal representation uses 17 significant digits so a
    save/load round trip is bit exact.
    """
    lines = [f"# delay-model v1 {model.kind}"]
    if isinstance(model, ExponentialDelay):
        lines.append(f"rate {_FMT % model.rate}")
    elif isinstance(model, GammaDelay):
        lines.append(f"shape {_FMT % model.shape}")
        lines.append(f"scale {_FMT % model.scale}")
    elif isinstance(model, GaussianDelay):
        lines.append(f"mean {_FMT % model.loc}")
        lines.append(f"stddev {_FMT % model.sigma}")
    elif isinstance(model, KdeDelay):
        lines.extend(_FMT % x for x in model.points)
        lines.append(f"bandwidth {_FMT % model.bandwidth}")
        lines.append(f"table_size {model.table_size}")
    elif isinstance(model, HistogramDelay):
        for edge, mass in zip(model.edges[:-1], model.masses):
            lines.append(f"{_FMT % edge},{_FMT % mass}")
        lines.append(f"edge {_FMT % model.edges[-1]}")
    else:
        raise ValueError(f"cannot serialize model kind {model.kind!r}")
    with open(path, "w", encoding="ascii") as fh:
        fh.write("\n".join(lines) + "\n")


def load_delay_model(path) -> DelayModel:
    """Read a model written by :func:`save_delay_model`."""
    with open(path, "r", encoding="ascii") as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    if not lines or not lines[0].startswith("# delay-model v1 "):
        raise ValueError("not a delay-model v1 file")
    kind = lines[0].split()[-1]
    body = lines[1:]
    fields = {}
    records = []
    for ln in body:
        if ln.startswith("#"):
            continue
        parts = ln.split()
        if len(parts) == 2 and parts[0].replace("_", "").isalpha():
            fields[parts[0]] = parts[1]
        else:
            records.append(ln)
    if kind == "exponential":
        return ExponentialDelay(rate=float(fields["rate"]))
    if kind == "gamma":
        return GammaDelay(shape=float(fields["shape"]), scale=float(fields["scale"]))
    if kind == "gaussian":
        return GaussianDelay(mean=float(fields["mean"]), stddev=float(fields["stddev"]))
    if kind == "kde":
        points = np.array([float(x) for x in records])
        table_size = int(fields.get("table_size", 8193))
        return KdeDelay(points, float(fields["bandwidth"]), table_size=table_size)
    if kind == "histogram":
        edges = []
        masses = []
        for rec in records:
            edge, mass = rec.split(",")
            edges.append(float(edge))
            masses.append(float(mass))
        edges.append(float(fields["edge"]))
        return HistogramDelay(np.array(edges), np.array(masses))
    raise ValueError(f"unknown delay-model kind {kind!r}")
