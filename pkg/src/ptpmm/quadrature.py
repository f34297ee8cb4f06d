"""Log-domain tensor-grid quadrature for ratios of posterior integrals.

The integrands here are posterior-like: a log-density over a 2-D or 3-D box
that is sharply peaked, possibly with hard support edges (``-inf`` regions).
Integration uses an iterated trapezoid rule on a tensor grid, accumulated
after factoring out the running density maximum so nothing under- or
overflows.  Refinement passes locate the cells carrying the bulk of the
posterior mass and overlay a finer grid there, subtracting the coarse
contribution of the refined region so no tail mass is ever discarded.

Callables receive an ``(m, dim)`` array of points and must return ``m``
values (vectorized).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .delay_models import SupportInterval
from .errors import EmptyPosteriorError, UnboundedPosteriorError

_CHUNK = 1 << 16
# Refinement grids are capped per axis so a 3-D pass stays affordable.
_MAX_FINE_AXIS = {1: 8193, 2: 2049, 3: 257}


@dataclass
class QuadConfig:
    """Knobs for posterior-box location and grid refinement."""

    grid_points: int = 129
    refine_passes: int = 2
    mass_tol: float = 1e-8
    rel_tol: float = 1e-6
    initial_box: tuple[SupportInterval, ...] | None = None
    probe_points: int = 33
    max_expand: int = 80

    def __post_init__(self):
        if self.grid_points < 9 or self.grid_points % 2 == 0:
            raise ValueError("grid_points must be odd and >= 9")
        if not (0.0 < self.mass_tol < 1.0):
            raise ValueError("mass_tol must lie in (0, 1)")
        if not (0.0 < self.rel_tol < 1.0):
            raise ValueError("rel_tol must lie in (0, 1)")
        if self.refine_passes < 0:
            raise ValueError("refine_passes must be >= 0")
        if self.probe_points < 5:
            raise ValueError("probe_points must be >= 5")


@dataclass
class RatioResult:
    """Outcome of one ratio-of-integrals evaluation."""

    value: float
    log_num_mass: float  # log of |numerator| mass; the sign lives in value
    log_den_mass: float
    rel_err: float
    evaluations: int
    converged: bool


@dataclass
class PosteriorMeans:
    """Posterior expectations of several weight functions over one box."""

    values: np.ndarray
    scales: np.ndarray
    rel_errs: np.ndarray
    log_den_mass: float
    evaluations: int
    converged: bool
    history: list = field(default_factory=list)


def _trapz_weights(x: np.ndarray) -> np.ndarray:
    w = np.empty_like(x)
    d = np.diff(x)
    w[0] = 0.5 * d[0]
    w[-1] = 0.5 * d[-1]
    if x.size > 2:
        w[1:-1] = 0.5 * (d[1:] + d[:-1])
    return w


def _iter_grid_chunks(axes, chunk=_CHUNK):
    ns = [len(a) for a in axes]
    total = int(np.prod(ns))
    for start in range(0, total, chunk):
        idx = np.arange(start, min(start + chunk, total))
        unravel = np.unravel_index(idx, ns)
        pts = np.stack([axes[d][unravel[d]] for d in range(len(axes))], axis=1)
        yield start, pts


def _eval_on_grid(log_f, axes) -> tuple[np.ndarray, int]:
    """Evaluate ``log_f`` on the tensor grid; non-finite values (NaN or +inf
    point singularities the trapezoid rule cannot represent) map to -inf."""
    ns = [len(a) for a in axes]
    total = int(np.prod(ns))
    out = np.empty(total)
    for start, pts in _iter_grid_chunks(axes):
        vals = np.asarray(log_f(pts), dtype=float).reshape(-1)
        vals[np.isnan(vals) | (vals == np.inf)] = -np.inf
        out[start:start + len(pts)] = vals
    return out.reshape(ns), total


def _weighted_sums(L, axes, ref, fns) -> np.ndarray:
    """Trapezoid sums of exp(L - ref) times 1, each fn, and each fn squared."""
    mass = np.exp(L - ref)
    for d, a in enumerate(axes):
        shape = [1] * len(axes)
        shape[d] = -1
        mass = mass * _trapz_weights(a).reshape(shape)
    flat = mass.reshape(-1)
    sums = np.zeros(1 + 2 * len(fns))
    sums[0] = flat.sum()
    if fns:
        for start, pts in _iter_grid_chunks(axes):
            seg = flat[start:start + len(pts)]
            for k, g in enumerate(fns):
                gv = np.asarray(g(pts), dtype=float).reshape(-1)
                sums[1 + 2 * k] += float(seg @ gv)
                sums[2 + 2 * k] += float(seg @ (gv * gv))
    return sums


def _cell_masses(L, axes, ref) -> np.ndarray:
    """Per-cell posterior mass (corner average times cell volume)."""
    E = np.exp(L - ref)
    dim = len(axes)
    acc = np.zeros([len(a) - 1 for a in axes])
    for corner in range(2 ** dim):
        slicer = tuple(
            slice(1, None) if corner >> d & 1 else slice(None, -1) for d in range(dim)
        )
        acc += E[slicer]
    acc /= 2 ** dim
    for d, a in enumerate(axes):
        shape = [1] * dim
        shape[d] = -1
        acc = acc * np.diff(a).reshape(shape)
    return acc


def _select_refine_bbox(cellmass: np.ndarray) -> tuple[tuple[int, ...], tuple[int, ...]] | None:
    """Index bounds (per axis) of the cells holding the top 99.9% of mass.

    Selection is by a mass threshold so exactly tied cells are kept or
    dropped together; the bounding box is then grown by one cell per side.
    """
    flat = cellmass.reshape(-1)
    total = flat.sum()
    if not np.isfinite(total) or total <= 0.0:
        return None
    order = np.argsort(flat, kind="stable")[::-1]
    csum = np.cumsum(flat[order])
    k = int(np.searchsorted(csum, 0.999 * total))
    k = min(k, flat.size - 1)
    cut = flat[order[k]]
    selected = flat >= cut * (1.0 - 1e-12)
    coords = np.argwhere(selected.reshape(cellmass.shape))
    los = tuple(int(max(c - 1, 0)) for c in coords.min(axis=0))
    his = tuple(
        int(min(c + 1, n - 1)) for c, n in zip(coords.max(axis=0), cellmass.shape)
    )
    return los, his


def _combine(pieces) -> tuple[np.ndarray, float]:
    refmax = max(ref for _, ref, _ in pieces)
    total = np.zeros_like(pieces[0][2])
    for sign, ref, sums in pieces:
        total += sign * math.exp(ref - refmax) * sums
    return total, refmax


class _AxisMap:
    """Exponential node grading toward one edge of an axis.

    Posterior slices often carry a thin boundary layer (density piled
    against a support edge) whose width is far below the axis span; uniform
    nodes cannot resolve it.  The map x(u) compresses nodes geometrically
    toward the hot edge so the layer holds a fixed share of nodes.
    """

    def __init__(self, lo: float, hi: float, gamma: float = 0.0, toward_hi: bool = True):
        self.lo = lo
        self.hi = hi
        self.gamma = gamma
        self.toward_hi = toward_hi

    def x(self, u):
        span = self.hi - self.lo
        if self.gamma == 0.0:
            return self.lo + span * u
        g = self.gamma
        if self.toward_hi:
            tau = 1.0 - np.expm1(g * (1.0 - u)) / math.expm1(g)
        else:
            tau = np.expm1(g * u) / math.expm1(g)
        return self.lo + span * tau

    def log_jac(self, u):
        span = self.hi - self.lo
        if self.gamma == 0.0:
            return np.full(np.shape(u), math.log(span))
        g = self.gamma
        scale = math.log(span) + math.log(g) - math.log(math.expm1(g))
        arg = (1.0 - u) if self.toward_hi else u
        return scale + g * arg


def _solve_gamma(r: float) -> float:
    """Solve gamma / (exp(gamma) - 1) = r for the grading strength."""
    if r >= 0.95:
        return 0.0
    lo, hi = 1e-6, 60.0
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        val = mid / math.expm1(mid)
        if val > r:
            lo = mid
        else:
            hi = mid
    return min(0.5 * (lo + hi), 40.0)


def _plan_axis_maps(log_f, box, cfg) -> list[_AxisMap]:
    """Probe each axis for an edge boundary layer and size the grading.

    The layer scale is the distance from the hot edge at which the density
    drops by one e-fold along that axis (other coordinates held at the
    probe-grid peak); the grading is chosen so the smallest cell is about a
    third of that scale.
    """
    dim = len(box)
    m = cfg.probe_points
    axes = [np.linspace(iv.lo, iv.hi, m) for iv in box]
    L, _ = _eval_on_grid(log_f, axes)
    if not np.any(L > -np.inf):
        raise EmptyPosteriorError("density is -inf everywhere in the integration box")
    peak_idx = np.unravel_index(int(np.argmax(L)), L.shape)
    peak_val = float(L[peak_idx])
    peak_pt = np.array([axes[d][peak_idx[d]] for d in range(dim)])
    n = cfg.grid_points
    maps = []
    for d in range(dim):
        lo, hi = float(box[d].lo), float(box[d].hi)
        span = hi - lo
        best = _AxisMap(lo, hi)
        best_edge_val = -np.inf
        for toward_hi in (False, True):
            edge = hi if toward_hi else lo
            direction = -1.0 if toward_hi else 1.0
            dists = span * 2.0 ** -np.arange(1, 31)
            pts = np.tile(peak_pt, (len(dists) + 1, 1))
            pts[0, d] = edge
            pts[1:, d] = edge + direction * dists
            vals = np.asarray(log_f(pts), dtype=float)
            edge_val = vals[0]
            if not np.isfinite(edge_val) or edge_val < peak_val - 2.0:
                continue  # edge is cold; no layer on this side
            finite = np.isfinite(vals[1:])
            drops = np.where(finite, edge_val - vals[1:], -1.0)
            hit = np.flatnonzero(drops >= 1.0)
            if hit.size == 0:
                continue  # flat along this axis
            scale = float(dists[hit[-1]])
            gamma = _solve_gamma((n - 1) * scale / (3.0 * span))
            if gamma > 0.0 and edge_val > best_edge_val:
                best = _AxisMap(lo, hi, gamma, toward_hi)
                best_edge_val = float(edge_val)
        maps.append(best)
    return maps


def _apply_maps(maps: list[_AxisMap], pts: np.ndarray) -> np.ndarray:
    out = np.empty_like(pts)
    for d, mp in enumerate(maps):
        out[:, d] = mp.x(pts[:, d])
    return out


def integrate_posterior_means(log_f, weight_fns, box, cfg: QuadConfig) -> PosteriorMeans:
    """Expectations of ``weight_fns`` under the density ``exp(log_f)`` on ``box``.

    This is the shared core: per-axis grading is planned first (boundary
    layers get geometrically compressed nodes), then a coarse pass over the
    full box is followed by composite refinement passes that halve the grid
    spacing around the high-mass cells.  The coarse contribution of each
    refined region is subtracted, so tail mass outside it is retained at
    coarse resolution rather than discarded.
    """
    box = list(box)
    dim = len(box)
    cap = _MAX_FINE_AXIS.get(dim, 257)
    maps = _plan_axis_maps(log_f, box, cfg)
    evals = cfg.probe_points ** dim + 2 * 31 * dim

    def log_f_u(pts):
        vals = np.asarray(log_f(_apply_maps(maps, pts)), dtype=float).reshape(-1)
        for d, mp in enumerate(maps):
            vals = vals + mp.log_jac(pts[:, d])
        return vals

    fns_u = [(lambda pts, g=g: g(_apply_maps(maps, pts))) for g in weight_fns]
    axes = [np.linspace(0.0, 1.0, cfg.grid_points) for _ in range(dim)]
    L, ev = _eval_on_grid(log_f_u, axes)
    evals += ev
    if not np.any(L > -np.inf):
        raise EmptyPosteriorError("density is -inf everywhere in the integration box")
    ref = float(L.max())
    pieces = [(1, ref, _weighted_sums(L, axes, ref, fns_u))]
    history = []

    def snapshot():
        total, refmax = _combine(pieces)
        if total[0] <= 0.0:
            raise EmptyPosteriorError("posterior mass vanished during integration")
        vals = total[1::2] / total[0]
        scales = np.sqrt(np.maximum(total[2::2] / total[0], 0.0))
        history.append((vals, scales, math.log(total[0]) + refmax))
        return vals

    snapshot()
    cur_axes, cur_L, cur_ref = axes, L, ref
    for _ in range(cfg.refine_passes):
        cells = _cell_masses(cur_L, cur_axes, cur_ref)
        sel = _select_refine_bbox(cells)
        if sel is None:
            break
        los, his = sel
        slicer = tuple(slice(i0, i1 + 2) for i0, i1 in zip(los, his))
        sub_axes = [a[s] for a, s in zip(cur_axes, slicer)]
        if any(len(a) < 2 for a in sub_axes):
            break
        fine_counts = [min(2 * (len(a) - 1) + 1, cap) for a in sub_axes]
        if all(nf <= len(a) for nf, a in zip(fine_counts, sub_axes)):
            break  # per-axis cap reached; further passes cannot refine
        pieces.append((-1, cur_ref, _weighted_sums(cur_L[slicer], sub_axes, cur_ref, fns_u)))
        fine_axes = [
            np.linspace(a[0], a[-1], nf) for a, nf in zip(sub_axes, fine_counts)
        ]
        fine_L, ev = _eval_on_grid(log_f_u, fine_axes)
        evals += ev
        fine_ref = float(fine_L.max()) if np.any(fine_L > -np.inf) else cur_ref
        pieces.append((1, fine_ref, _weighted_sums(fine_L, fine_axes, fine_ref, fns_u)))
        cur_axes, cur_L, cur_ref = fine_axes, fine_L, fine_ref
        snapshot()
        vals_now, scales_now, _ = history[-1]
        vals_prev = history[-2][0]
        denom = np.maximum(np.maximum(np.abs(vals_now), scales_now), 1e-300)
        if np.all(np.abs(vals_now - vals_prev) / denom <= cfg.rel_tol):
            break  # successive passes agree within tolerance already

    vals, scales, log_den = history[-1]
    if len(history) >= 2:
        prev = history[-2][0]
        denom = np.maximum(np.maximum(np.abs(vals), scales), 1e-300)
        rel_errs = np.abs(vals - prev) / denom
    else:
        rel_errs = np.full(len(weight_fns), np.inf)
    converged = bool(np.all(rel_errs <= 100.0 * cfg.rel_tol))
    return PosteriorMeans(
        values=vals,
        scales=scales,
        rel_errs=rel_errs,
        log_den_mass=log_den,
        evaluations=evals,
        converged=converged,
        history=history,
    )


def integrate_ratio(log_f, num_weight, den_weight, box, cfg: QuadConfig | None = None) -> RatioResult:
    """Evaluate (integral of num*exp(log_f)) / (integral of den*exp(log_f)).

    ``den_weight`` must be positive wherever ``log_f`` is finite; the ratio
    is then the posterior mean of ``num/den`` under the den-tilted density,
    which is how it is computed.
    """
    cfg = cfg or QuadConfig()

    def tilted(pts):
        lf = np.asarray(log_f(pts), dtype=float).reshape(-1)
        dv = np.asarray(den_weight(pts), dtype=float).reshape(-1)
        bad = (dv <= 0.0) & (lf > -np.inf)
        if np.any(bad):
            raise ValueError("den_weight must be positive wherever log_f is finite")
        with np.errstate(divide="ignore"):
            return lf + np.where(dv > 0.0, np.log(np.maximum(dv, 1e-300)), 0.0)

    def ratio_fn(pts):
        return np.asarray(num_weight(pts), dtype=float).reshape(-1) / np.asarray(
            den_weight(pts), dtype=float
        ).reshape(-1)

    res = integrate_posterior_means(tilted, [ratio_fn], box, cfg)
    value = float(res.values[0])
    log_num = (math.log(abs(value)) + res.log_den_mass) if value != 0.0 else -np.inf
    return RatioResult(
        value=value,
        log_num_mass=log_num,
        log_den_mass=res.log_den_mass,
        rel_err=float(res.rel_errs[0]),
        evaluations=res.evaluations,
        converged=res.converged,
    )


def locate_posterior_box(log_f, seed_box, cfg: QuadConfig | None = None,
                         limits=None) -> list[SupportInterval]:
    """Grow/shrink a box until the density at its boundary is negligible.

    Starting from ``seed_box``, each side whose boundary face still carries
    density above ``mass_tol`` times the peak is pushed outward
    geometrically; once no face is hot the box is tightened to the bounding
    box of the above-threshold probe nodes plus a one-cell margin.
    Tightening repeats while it still shrinks the box appreciably, which
    resolves narrow boundary layers far below the seed scale.

    ``limits`` optionally caps expansion per axis with (lo, hi) pairs (or
    None for unbounded); a face pressed against its limit is never treated
    as a growth request.
    """
    cfg = cfg or QuadConfig()
    box = [[float(iv.lo), float(iv.hi)] for iv in seed_box]
    dim = len(box)
    if limits is None:
        limits = [None] * dim
    m = cfg.probe_points
    log_thr = math.log(cfg.mass_tol)
    blind_rounds = 0
    grow_rounds = 0
    tighten_rounds = 0
    while True:
        axes = [np.linspace(lo, hi, m) for lo, hi in box]
        L, _ = _eval_on_grid(log_f, axes)
        if not np.any(L > -np.inf):
            blind_rounds += 1
            if blind_rounds > cfg.max_expand:
                raise EmptyPosteriorError(
                    "no finite-density point found after bounded box expansion"
                )
            for d, b in enumerate(box):
                center = 0.5 * (b[0] + b[1])
                half = b[1] - b[0]  # doubles the half-width
                b[0] = center - half
                b[1] = center + half
                if limits[d] is not None:
                    b[0] = max(b[0], limits[d][0])
                    b[1] = min(b[1], limits[d][1])
            continue
        peak = float(L.max())
        thr = peak + log_thr
        grew = False
        for d in range(dim):
            face_lo = float(np.max(np.take(L, 0, axis=d)))
            face_hi = float(np.max(np.take(L, -1, axis=d)))
            span = box[d][1] - box[d][0]
            lim = limits[d]
            if face_lo > thr and (lim is None or box[d][0] > lim[0]):
                box[d][0] -= span
                if lim is not None:
                    box[d][0] = max(box[d][0], lim[0])
                grew = True
            if face_hi > thr and (lim is None or box[d][1] < lim[1]):
                box[d][1] += span
                if lim is not None:
                    box[d][1] = min(box[d][1], lim[1])
                grew = True
        if grew:
            grow_rounds += 1
            if grow_rounds > cfg.max_expand:
                raise UnboundedPosteriorError(
                    "posterior mass region could not be bounded by expansion"
                )
            continue
        hot = np.argwhere(L >= thr)
        new_box = []
        shrink = 1.0
        for d in range(dim):
            i0 = int(hot[:, d].min())
            i1 = int(hot[:, d].max())
            lo = float(axes[d][max(i0 - 1, 0)])
            hi = float(axes[d][min(i1 + 1, m - 1)])
            span_old = box[d][1] - box[d][0]
            if span_old > 0.0:
                shrink = min(shrink, (hi - lo) / span_old)
            new_box.append([lo, hi])
        box = new_box
        tighten_rounds += 1
        if shrink > 0.6 or tighten_rounds >= 8:
            return [SupportInterval(lo, hi) for lo, hi in box]
