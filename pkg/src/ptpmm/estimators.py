"""Clock skew/offset estimators for two-way exchange timestamp sets.

Four schemes, all exposed both as sklearn-style estimators (``fit`` on a
timestamp set, fitted attributes ``phi_`` and ``delta_``) and as plain
functions returning an :class:`Estimate`:

* ``gmle``        least-squares fit with mean-delay compensation,
* ``lmle``        local likelihood maximization started at the GMLE,
* ``minimax_k``   minimum-risk invariant estimate, path delays known,
* ``minimax_s``   minimum-risk invariant estimate, one unknown symmetric
                  path delay (marginalized).

The minimax estimates are ratios of parameter-space integrals of the joint
likelihood; they are computed by quadrature over (log phi, sheared delta)
coordinates so the narrow, tilted support wedge of limited-support delay
densities stays resolved on a tensor grid.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator

from .delay_models import DelayModel, SupportInterval
from .errors import DegenerateDesignError, EmptyPosteriorError, InfeasibleStartError
from .exchange import TimestampSet, implied_delays, log_likelihood_k, log_likelihood_s
from .quadrature import QuadConfig, integrate_posterior_means, locate_posterior_box

_SEARCH_EVAL_CAP = 50_000


@dataclass
class Estimate:
    """One scheme's output on one timestamp set."""

    phi_hat: float
    delta_hat: float
    scheme: str
    converged: bool = True
    evaluations: int = 0
    quad_rel_err: float | None = None


def as_timestamp_set(X) -> TimestampSet:
    """Coerce fit input to a TimestampSet.

    Accepts a TimestampSet or an array of shape (P, 4) with columns
    t1, t2, t3, t4.
    """
    if isinstance(X, TimestampSet):
        return X
    arr = np.asarray(X, dtype=float)
    if arr.ndim != 2 or arr.shape[1] != 4:
        raise ValueError("expected a TimestampSet or an array of shape (P, 4)")
    return TimestampSet(t1=arr[:, 0], t2=arr[:, 1], t3=arr[:, 2], t4=arr[:, 3])


def _ols_solve(x: np.ndarray, y: np.ndarray) -> tuple[float, float]:
    """Slope/intercept least squares with a rank guard, in centered form."""
    xm = x.mean()
    ym = y.mean()
    xc = x - xm
    sxx = float(xc @ xc)
    scale = float(x @ x) + 1e-300
    if sxx <= 0.0 or sxx < 1e-24 * scale:
        raise DegenerateDesignError("regressors have no spread; cannot fit slope")
    slope = float(xc @ (y - ym)) / sxx
    intercept = ym - slope * xm
    return slope, float(intercept)


def _gmle_solve(ts: TimestampSet, d_ms: float, d_sm: float,
                mean_fwd: float, mean_rev: float) -> tuple[float, float]:
    x = np.concatenate([ts.t1 + d_ms + mean_fwd, ts.t4 - d_sm - mean_rev])
    y = np.concatenate([ts.t2, ts.t3])
    return _ols_solve(x, y)


def gmle(ts: TimestampSet, d_ms: float, d_sm: float, mean_delay: float) -> Estimate:
    """Least-squares skew/offset fit with the delay mean compensated.

    Regressor rows are (t1 + d_ms + mean_delay) for the forward equations
    and (t4 - d_sm - mean_delay) for the reverse ones; the closed-form 2x2
    normal equations give the fit.
    """
    ts = as_timestamp_set(ts)
    if ts.p < 2:
        raise ValueError("gmle needs at least two exchange rounds")
    phi, delta = _gmle_solve(ts, d_ms, d_sm, mean_delay, mean_delay)
    return Estimate(phi_hat=phi, delta_hat=delta, scheme="gmle")


def _repair_start(ts, d_ms, d_sm, fwd, rev, phi0, delta0, objective):
    """Pull the implied delays toward the model medians until the
    likelihood is finite, re-solving (phi, delta) by least squares against
    the shrunk delays each time."""
    med_f = fwd.median()
    med_r = rev.median()
    w1, w2 = implied_delays(ts, phi0, delta0, d_ms, d_sm)
    for k in range(1, 61):
        shrink = 0.5 ** k if k < 60 else 0.0
        w1t = med_f + shrink * (w1 - med_f)
        w2t = med_r + shrink * (w2 - med_r)
        x = np.concatenate([ts.t1 + d_ms + w1t, ts.t4 - d_sm - w2t])
        y = np.concatenate([ts.t2, ts.t3])
        try:
            phi, delta = _ols_solve(x, y)
        except DegenerateDesignError:
            continue
        if phi <= 0.0:
            continue
        if np.isfinite(objective(math.log(phi), delta)):
            return math.log(phi), delta
    raise InfeasibleStartError(
        "no finite-likelihood starting point found after delay shrinkage"
    )


def lmle(ts: TimestampSet, d_ms: float, d_sm: float,
         fwd: DelayModel, rev: DelayModel) -> Estimate:
    """Local likelihood maximization by compass search over (log phi, delta).

    Starts at the GMLE solution; if that point has zero likelihood a
    feasibility repair shrinks the implied delays toward the model medians
    first.  Initial steps are 0.1 in log phi and five delay standard
    deviations in delta, halved whenever no move improves, stopping at
    1e-12 relative steps.
    """
    ts = as_timestamp_set(ts)
    if ts.p < 2:
        raise ValueError("lmle needs at least two exchange rounds")
    evals = 0

    def objective(s, delta):
        nonlocal evals
        evals += 1
        return log_likelihood_k(ts, math.exp(s), delta, d_ms, d_sm, fwd, rev)

    phi0, delta0 = _gmle_solve(ts, d_ms, d_sm, fwd.mean(), rev.mean())
    if phi0 <= 0.0:
        phi0 = 1.0
    s, delta = math.log(phi0), delta0
    f_cur = objective(s, delta)
    if not np.isfinite(f_cur):
        s, delta = _repair_start(ts, d_ms, d_sm, fwd, rev, phi0, delta0, objective)
        f_cur = objective(s, delta)

    sigma = max(0.5 * (fwd.stddev() + rev.stddev()), 1e-15)
    h_s = 0.1
    h_d = 5.0 * sigma * math.exp(s)
    h_d_floor = 1e-12 * max(abs(delta), h_d)
    converged = False
    while evals < _SEARCH_EVAL_CAP:
        moves = ((s + h_s, delta), (s - h_s, delta), (s, delta + h_d), (s, delta - h_d))
        best_val = f_cur
        best_move = None
        for cand in moves:
            val = objective(*cand)
            if val > best_val:
                best_val = val
                best_move = cand
        if best_move is not None:
            s, delta = best_move
            f_cur = best_val
            continue
        h_s *= 0.5
        h_d *= 0.5
        if h_s <= 1e-12 and h_d <= h_d_floor:
            converged = True
            break
    return Estimate(phi_hat=math.exp(s), delta_hat=delta, scheme="lmle",
                    converged=converged, evaluations=evals)


def _seed_k(ts, d_ms, d_sm, fwd, rev):
    try:
        phi0, delta0 = _gmle_solve(ts, d_ms, d_sm, fwd.mean(), rev.mean())
    except DegenerateDesignError:
        phi0 = -1.0
        delta0 = 0.0
    if not np.isfinite(phi0) or phi0 <= 0.0:
        phi0 = 1.0
        delta0 = 0.5 * (
            float(np.mean(ts.t2 - ts.t1)) - d_ms - fwd.mean()
            + float(np.mean(ts.t3 - ts.t4)) + d_sm + rev.mean()
        )
    return phi0, delta0


def _seed_s(ts, fwd, rev):
    """Per-direction least-squares seed for the unknown-path-delay scheme.

    Fitting t2 against t1 and t3 against t4 separately keeps the seed
    exactly covariant under the scheme's invariance group, which the
    combined fit is not.
    """
    try:
        b1, _ = _ols_solve(ts.t1, ts.t2)
        b2, _ = _ols_solve(ts.t4, ts.t3)
        phi0 = 0.5 * (b1 + b2)
        if not np.isfinite(phi0) or phi0 <= 0.0:
            raise DegenerateDesignError("non-positive seed slope")
    except DegenerateDesignError:
        phi0 = 1.0
    return phi0


_S_MASK = 600.0  # |log phi| beyond this is treated as zero density
# Relative inset applied to mapped support intervals.  Unit coordinates
# then land strictly inside the support, so float cancellation in the
# implied delays can never produce a spurious -1e-22 outside it.
_EDGE_INSET = 1e-12


def _inset(lo, hi):
    margin = _EDGE_INSET * (hi - lo)
    return lo + margin, hi - margin


def _delta_bounds_k(ts, phi, d_ms, d_sm, fsup, rsup):
    """Feasible offset interval per skew value, known path delays.

    Each implied forward delay constrains delta to a half-line (or interval
    for bounded supports) that is affine in phi; intersecting all 2P of
    them gives the interval.
    """
    lo1 = np.max(ts.t2[None, :] - phi[:, None] * (fsup.hi + d_ms + ts.t1)[None, :], axis=1)
    hi1 = np.min(ts.t2[None, :] - phi[:, None] * (fsup.lo + d_ms + ts.t1)[None, :], axis=1)
    lo2 = np.max(ts.t3[None, :] + phi[:, None] * (rsup.lo + d_sm - ts.t4)[None, :], axis=1)
    hi2 = np.min(ts.t3[None, :] + phi[:, None] * (rsup.hi + d_sm - ts.t4)[None, :], axis=1)
    return _inset(np.maximum(lo1, lo2), np.minimum(hi1, hi2))


def _q_bounds_s(ts, phi, fsup):
    """Feasible interval of q = delta + phi*d from the forward rows."""
    lo = np.max(ts.t2[None, :] - phi[:, None] * (fsup.hi + ts.t1)[None, :], axis=1)
    hi = np.min(ts.t2[None, :] - phi[:, None] * (fsup.lo + ts.t1)[None, :], axis=1)
    return _inset(lo, hi)


def _r_bounds_s(ts, phi, rsup):
    """Feasible interval of r = delta - phi*d from the reverse rows."""
    lo = np.max(ts.t3[None, :] + phi[:, None] * (rsup.lo - ts.t4)[None, :], axis=1)
    hi = np.min(ts.t3[None, :] + phi[:, None] * (rsup.hi - ts.t4)[None, :], axis=1)
    return _inset(lo, hi)


def _feasible_s_interval(width_of, s0, cfg) -> SupportInterval:
    """Log-skew interval on which the feasible-offset region is non-empty.

    Scans outward from the seed; the feasible set can be far narrower than
    any fixed box when many rounds pin the skew tightly.
    """
    for half in (0.75, 3.0, 12.0, 48.0):
        s = np.linspace(s0 - half, s0 + half, 4001)
        w = width_of(np.exp(s))
        ok = np.where(w > 0.0)[0]
        if ok.size:
            step = s[1] - s[0]
            return SupportInterval(s[ok[0]] - step, s[ok[-1]] + step)
    raise EmptyPosteriorError("no skew value admits feasible delays for this data")


def _minimax_core(ts, log_f, delta_fn, cfg, scheme, s_seed) -> Estimate:
    """Shared quadrature driver: bound the mass region, then take posterior
    means of delta and phi over (log skew) x unit-mapped support axes."""
    dim = 2 if scheme == "minimax-k" else 3
    if cfg.initial_box is not None:
        box = list(cfg.initial_box)
    else:
        seed = [s_seed] + [SupportInterval(0.0, 1.0)] * (dim - 1)
        limits = [None] + [(0.0, 1.0)] * (dim - 1)
        box = locate_posterior_box(log_f, seed, cfg, limits=limits)

    def g_phi(pts):
        return np.exp(np.clip(pts[:, 0], -_S_MASK, _S_MASK))

    res = integrate_posterior_means(log_f, [delta_fn, g_phi], box, cfg)
    phi_hat = float(res.values[1])
    assert phi_hat > 0.0, "minimax skew estimate must be positive"
    return Estimate(
        phi_hat=phi_hat,
        delta_hat=float(res.values[0]),
        scheme=scheme,
        converged=res.converged,
        evaluations=res.evaluations,
        quad_rel_err=float(np.max(res.rel_errs)),
    )


def _minimax_k_estimate(ts, d_ms, d_sm, fwd, rev, cfg: QuadConfig) -> Estimate:
    fsup = fwd.finite_support()
    rsup = rev.finite_support()
    phi0, _ = _seed_k(ts, d_ms, d_sm, fwd, rev)

    def bounds(phi):
        return _delta_bounds_k(ts, phi, d_ms, d_sm, fsup, rsup)

    def delta_fn(pts):
        s = np.clip(pts[:, 0], -_S_MASK, _S_MASK)
        lo, hi = bounds(np.exp(s))
        return np.where(hi > lo, lo + pts[:, 1] * (hi - lo), 0.0)

    def log_f(pts):
        # den-folded density over (s, tau): the 1/phi^3 weight, the
        # dphi = e^s ds Jacobian and the interval width all fold in here.
        s = pts[:, 0]
        out = np.full(s.shape, -np.inf)
        ok = np.abs(s) < _S_MASK
        if not np.any(ok):
            return out
        phi = np.exp(s[ok])
        lo, hi = bounds(phi)
        width = hi - lo
        feas = width > 0.0
        if np.any(feas):
            idx = np.flatnonzero(ok)[feas]
            delta = lo[feas] + pts[idx, 1] * width[feas]
            ll = log_likelihood_k(ts, phi[feas], delta, d_ms, d_sm, fwd, rev)
            out[idx] = ll + np.log(width[feas]) - 2.0 * s[idx]
        return out

    seed = _feasible_s_interval(lambda phi: np.diff(bounds(phi), axis=0)[0], math.log(phi0), cfg)
    return _minimax_core(ts, log_f, delta_fn, cfg, "minimax-k", seed)


def _minimax_s_estimate(ts, fwd, rev, cfg: QuadConfig) -> Estimate:
    fsup = fwd.finite_support()
    rsup = rev.finite_support()
    phi0 = _seed_s(ts, fwd, rev)

    # q = delta + phi*d and r = delta - phi*d decouple the forward and
    # reverse support constraints into independent intervals per skew.
    def delta_fn(pts):
        s = np.clip(pts[:, 0], -_S_MASK, _S_MASK)
        phi = np.exp(s)
        qlo, qhi = _q_bounds_s(ts, phi, fsup)
        rlo, rhi = _r_bounds_s(ts, phi, rsup)
        q = qlo + pts[:, 1] * (qhi - qlo)
        r = rlo + pts[:, 2] * (rhi - rlo)
        good = (qhi > qlo) & (rhi > rlo)
        return np.where(good, 0.5 * (q + r), 0.0)

    def log_f(pts):
        s = pts[:, 0]
        out = np.full(s.shape, -np.inf)
        ok = np.abs(s) < _S_MASK
        if not np.any(ok):
            return out
        phi = np.exp(s[ok])
        qlo, qhi = _q_bounds_s(ts, phi, fsup)
        rlo, rhi = _r_bounds_s(ts, phi, rsup)
        wq = qhi - qlo
        wr = rhi - rlo
        feas = (wq > 0.0) & (wr > 0.0)
        if np.any(feas):
            idx = np.flatnonzero(ok)[feas]
            phif = phi[feas]
            q = qlo[feas] + pts[idx, 1] * wq[feas]
            r = rlo[feas] + pts[idx, 2] * wr[feas]
            delta = 0.5 * (q + r)
            d = (q - r) / (2.0 * phif)
            ll = log_likelihood_s(ts, phif, d, delta, fwd, rev)
            # 1/phi^2 weight * dd ddelta dphi Jacobian = e^{-2s} Wq Wr / 2
            out[idx] = ll + np.log(wq[feas]) + np.log(wr[feas]) - math.log(2.0) - 2.0 * s[idx]
        return out

    def s_width(phi):
        qlo, qhi = _q_bounds_s(ts, phi, fsup)
        rlo, rhi = _r_bounds_s(ts, phi, rsup)
        return np.minimum(qhi - qlo, rhi - rlo)

    seed = _feasible_s_interval(s_width, math.log(phi0), cfg)
    return _minimax_core(ts, log_f, delta_fn, cfg, "minimax-s", seed)


def minimax_k(ts: TimestampSet, d_ms: float, d_sm: float, fwd: DelayModel,
              rev: DelayModel, cfg: QuadConfig | None = None) -> Estimate:
    """Minimum-risk invariant skew/offset estimate with known path delays.

    The offset estimate is the ratio of the (delta/phi^3)- and
    (1/phi^3)-weighted likelihood integrals over phi > 0, delta real; the
    skew estimate uses (1/phi^2) in the numerator.  Both are evaluated with
    the same quadrature pass.
    """
    ts = as_timestamp_set(ts)
    return _minimax_k_estimate(ts, d_ms, d_sm, fwd, rev, cfg or QuadConfig())


def minimax_s(ts: TimestampSet, fwd: DelayModel, rev: DelayModel,
              cfg: QuadConfig | None = None) -> Estimate:
    """Minimum-risk invariant estimate with one unknown symmetric path delay.

    As :func:`minimax_k` but with weights (delta/phi^2, 1/phi^2, 1/phi) and
    an extra integration of the likelihood over the path delay, taken over
    the whole real line.
    """
    ts = as_timestamp_set(ts)
    if ts.p < 2:
        raise ValueError("minimax_s needs at least two exchange rounds")
    return _minimax_s_estimate(ts, fwd, rev, cfg or QuadConfig(grid_points=65, rel_tol=1e-5))


class _FittedMixin:
    """Shared fitted-attribute handling for the estimator classes."""

    def _finish(self, est: Estimate):
        self.estimate_ = est
        self.phi_ = est.phi_hat
        self.delta_ = est.delta_hat
        return self

    def predict(self, t_master):
        """Map master-clock instants through the fitted slave clock."""
        if not hasattr(self, "phi_"):
            raise RuntimeError("estimator is not fitted yet; call fit first")
        return self.phi_ * np.asarray(t_master, dtype=float) + self.delta_


class GmleEstimator(BaseEstimator, _FittedMixin):
    """Least-squares clock fit with mean-delay compensation."""

    def __init__(self, d_ms: float = 0.0, d_sm: float = 0.0, mean_delay: float = 0.0):
        self.d_ms = d_ms
        self.d_sm = d_sm
        self.mean_delay = mean_delay

    def fit(self, X, y=None):
        return self._finish(gmle(as_timestamp_set(X), self.d_ms, self.d_sm, self.mean_delay))


class LmleEstimator(BaseEstimator, _FittedMixin):
    """Local maximum-likelihood clock fit started from the least squares."""

    def __init__(self, fwd=None, rev=None, d_ms: float = 0.0, d_sm: float = 0.0):
        self.fwd = fwd
        self.rev = rev
        self.d_ms = d_ms
        self.d_sm = d_sm

    def fit(self, X, y=None):
        if self.fwd is None or self.rev is None:
            raise ValueError("fwd and rev delay models are required")
        return self._finish(lmle(as_timestamp_set(X), self.d_ms, self.d_sm, self.fwd, self.rev))


class MinimaxKEstimator(BaseEstimator, _FittedMixin):
    """Minimum-risk invariant clock fit, fixed path delays known."""

    def __init__(self, fwd=None, rev=None, d_ms: float = 0.0, d_sm: float = 0.0,
                 quad: QuadConfig | None = None):
        self.fwd = fwd
        self.rev = rev
        self.d_ms = d_ms
        self.d_sm = d_sm
        self.quad = quad

    def fit(self, X, y=None):
        if self.fwd is None or self.rev is None:
            raise ValueError("fwd and rev delay models are required")
        return self._finish(
            minimax_k(as_timestamp_set(X), self.d_ms, self.d_sm, self.fwd, self.rev, self.quad)
        )


class MinimaxSEstimator(BaseEstimator, _FittedMixin):
    """Minimum-risk invariant clock fit, symmetric unknown path delay."""

    def __init__(self, fwd=None, rev=None, quad: QuadConfig | None = None):
        self.fwd = fwd
        self.rev = rev
        self.quad = quad

    def fit(self, X, y=None):
        if self.fwd is None or self.rev is None:
            raise ValueError("fwd and rev delay models are required")
        return self._finish(minimax_s(as_timestamp_set(X), self.fwd, self.rev, self.quad))
