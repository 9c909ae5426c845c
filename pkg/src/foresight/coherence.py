"""Temporal-decoherence model and its per-pixel least-squares inversion.

Repeat-pass coherence over vegetation decays with temporal baseline
toward a stable floor. The two-parameter model

    gamma(t) = (1 - rho_inf) * exp(-t / tau) + rho_inf

is fitted per pixel by damped Gauss-Newton (Levenberg-Marquardt) with
bound projection inside the box tau in [0.5, 365] days, rho_inf in
[0, 1]. Fits run from two starts, the fixed default start and the best
point of a coarse profile over tau with the conditionally-optimal
rho_inf; the lower-cost solution wins. The second start makes the solver
at least as good as an exhaustive grid search at the profile resolution.

All pixels of a map are fitted simultaneously with array-shaped solver
state, so maps invert in seconds rather than hours. `grid_oracle` is the
slow brute-force reference the solver is audited against.
"""

import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, DataError, DimensionError, UsageError

TAU_BOUNDS = (0.5, 365.0)
RHO_BOUNDS = (0.0, 1.0)
TAU_INIT = 30.0

MAX_ITER = 100
STEP_TOL = 1e-8
COST_TOL = 1e-12
BOUND_TOL = 1e-9
DEGENERATE_RANGE = 1e-3

STATUS_CONVERGED = 0
STATUS_DEGENERATE = 1
STATUS_BOUND_HIT = 2
STATUS_INVALID = 255  # map pixels excluded by the validity mask
STATUS_NAMES = {
    STATUS_CONVERGED: "converged",
    STATUS_DEGENERATE: "degenerate_constant",
    STATUS_BOUND_HIT: "bound_hit",
    STATUS_INVALID: "invalid",
}

# profile start: tau sweep at half-day spacing across the full box
_PROFILE_TAUS = 0.5 + 0.5 * np.arange(730)


@dataclass
class FitResult:
    """Per-series inversion outcome; residual is the RMS misfit."""

    tau: float
    rho_inf: float
    residual: float
    status: str
    iterations: int


def decay_model(t, tau, rho_inf):
    """Coherence after a temporal baseline of t days."""
    t = np.asarray(t, dtype=np.float64)
    return (1.0 - rho_inf) * np.exp(-t / tau) + rho_inf


def _check_series(lags, values):
    lags = np.asarray(lags, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    if lags.ndim != 1:
        raise DimensionError(f"lags must be 1-D, got shape {lags.shape}")
    if values.shape[-1] != lags.shape[0]:
        raise DimensionError(
            f"series length {values.shape[-1]} != number of lags {lags.shape[0]}"
        )
    if lags.shape[0] < 3:
        raise UsageError(
            "need at least three samples to fit two decay parameters"
        )
    if not np.all(np.isfinite(lags)) or np.any(lags <= 0):
        raise DataError("temporal baselines must be finite and positive")
    if np.unique(lags).size != lags.size:
        raise DataError("temporal baselines must be distinct")
    if not np.all(np.isfinite(values)):
        raise DataError("coherence series contains non-finite values")
    if np.any(values < 0.0) or np.any(values > 1.0):
        raise DataError("coherence values must lie in [0, 1]")
    order = np.argsort(lags)
    return lags[order], values[..., order]


def _cost(t, y, tau, rho):
    # y: (P, L); tau, rho: (P,)
    f = (1.0 - rho[:, None]) * np.exp(-t[None, :] / tau[:, None]) + rho[:, None]
    r = y - f
    return np.einsum("pl,pl->p", r, r)


def _lm_run(t, y, tau0, rho0):
    """Box-projected LM from given per-pixel starts.

    Returns (tau, rho, cost, iterations), all shaped like tau0. Steps are
    only ever accepted when they do not increase the cost, so the final
    cost is bounded by the cost at the start point.
    """
    n = y.shape[0]
    tau = np.clip(tau0.astype(np.float64), *TAU_BOUNDS)
    rho = np.clip(rho0.astype(np.float64), *RHO_BOUNDS)
    cost = _cost(t, y, tau, rho)
    lam = np.full(n, 1e-3)
    iterations = np.zeros(n, dtype=np.int32)
    active = np.arange(n)

    for _ in range(MAX_ITER):
        if active.size == 0:
            break
        ta, ra = tau[active], rho[active]
        ya = y[active]
        e = np.exp(-t[None, :] / ta[:, None])
        f = (1.0 - ra[:, None]) * e + ra[:, None]
        r = ya - f
        j_tau = (1.0 - ra[:, None]) * e * (t[None, :] / (ta[:, None] ** 2))
        j_rho = 1.0 - e
        a11 = np.einsum("pl,pl->p", j_tau, j_tau)
        a12 = np.einsum("pl,pl->p", j_tau, j_rho)
        a22 = np.einsum("pl,pl->p", j_rho, j_rho)
        g1 = np.einsum("pl,pl->p", j_tau, r)
        g2 = np.einsum("pl,pl->p", j_rho, r)
        la = lam[active]
        d11 = a11 * (1.0 + la) + 1e-300
        d22 = a22 * (1.0 + la) + 1e-300
        det = d11 * d22 - a12 * a12
        det = np.where(np.abs(det) < 1e-300, 1e-300, det)
        step_tau = (d22 * g1 - a12 * g2) / det
        step_rho = (d11 * g2 - a12 * g1) / det

        new_tau = np.clip(ta + step_tau, *TAU_BOUNDS)
        new_rho = np.clip(ra + step_rho, *RHO_BOUNDS)
        # convergence is judged on the movement actually available
        moved = np.hypot(new_tau - ta, new_rho - ra)
        new_cost = _cost(t, ya, new_tau, new_rho)
        old_cost = cost[active]
        accept = new_cost <= old_cost

        tau[active] = np.where(accept, new_tau, ta)
        rho[active] = np.where(accept, new_rho, ra)
        cost[active] = np.where(accept, new_cost, old_cost)
        lam[active] = np.where(accept, np.maximum(la / 10.0, 1e-12),
                               np.minimum(la * 10.0, 1e12))
        iterations[active] += 1

        done = (moved < STEP_TOL) | (accept & (old_cost - new_cost < COST_TOL))
        active = active[~done]

    return tau, rho, cost, iterations


def _profile_start(t, y, block=4096):
    """Best (tau, rho) over a tau sweep with rho chosen in closed form.

    For fixed tau the model is affine in rho_inf, so the box-constrained
    optimum is the unconstrained least-squares rho clipped to [0, 1].
    Pixels are processed in blocks to bound the (pixels x taus) temporaries.
    """
    e = np.exp(-t[None, :] / _PROFILE_TAUS[:, None])  # (G, L)
    basis = 1.0 - e                                   # d f / d rho
    denom = np.einsum("gl,gl->g", basis, basis)
    denom = np.where(denom < 1e-300, 1e-300, denom)
    e2 = np.einsum("gl,gl->g", e, e)
    eb = np.einsum("gl,gl->g", basis, e)
    n = y.shape[0]
    tau_out = np.empty(n)
    rho_out = np.empty(n)
    for a in range(0, n, block):
        yc = y[a:a + block]
        y2 = np.einsum("pl,pl->p", yc, yc)
        ye = yc @ e.T
        yb = yc @ basis.T
        # rho*(p, g) = sum_l basis * (y - e) / sum_l basis^2
        rho = np.clip((yb - eb[None, :]) / denom[None, :], *RHO_BOUNDS)
        # cost(p, g) = sum_l (y - e - rho * basis)^2, expanded
        cost = (
            y2[:, None] + e2[None, :] - 2.0 * ye
            + rho ** 2 * denom[None, :]
            - 2.0 * rho * (yb - eb[None, :])
        )
        best = np.argmin(cost, axis=1)
        rows = np.arange(yc.shape[0])
        tau_out[a:a + block] = _PROFILE_TAUS[best]
        rho_out[a:a + block] = rho[rows, best]
    return tau_out, rho_out


def _fit_batch(lags, series):
    """Fit every row of series (P, L); returns value arrays + status codes."""
    t = lags
    y = series
    n = y.shape[0]
    tau = np.empty(n)
    rho = np.empty(n)
    residual = np.empty(n)
    status = np.empty(n, dtype=np.uint8)
    iterations = np.zeros(n, dtype=np.int32)

    rng_vals = y.max(axis=1) - y.min(axis=1) if n else np.empty(0)
    degen = rng_vals < DEGENERATE_RANGE
    if np.any(degen):
        tau[degen] = TAU_BOUNDS[0]
        rho[degen] = y[degen].mean(axis=1)
        residual[degen] = np.sqrt(_cost(t, y[degen], tau[degen], rho[degen])
                                  / t.size)
        status[degen] = STATUS_DEGENERATE

    live = ~degen
    if np.any(live):
        yl = y[live]
        m = yl.shape[0]
        tau_a, rho_a, cost_a, it_a = _lm_run(
            t, yl, np.full(m, TAU_INIT), yl.min(axis=1))
        tau_b0, rho_b0 = _profile_start(t, yl)
        tau_b, rho_b, cost_b, it_b = _lm_run(t, yl, tau_b0, rho_b0)
        use_b = cost_b < cost_a
        tau_l = np.where(use_b, tau_b, tau_a)
        rho_l = np.where(use_b, rho_b, rho_a)
        cost_l = np.where(use_b, cost_b, cost_a)
        it_l = np.where(use_b, it_b, it_a)

        st = np.full(m, STATUS_CONVERGED, dtype=np.uint8)
        at_bound = (
            (np.abs(tau_l - TAU_BOUNDS[0]) < BOUND_TOL)
            | (np.abs(tau_l - TAU_BOUNDS[1]) < BOUND_TOL)
            | (np.abs(rho_l - RHO_BOUNDS[0]) < BOUND_TOL)
            | (np.abs(rho_l - RHO_BOUNDS[1]) < BOUND_TOL)
        )
        st[at_bound] = STATUS_BOUND_HIT
        tau[live] = tau_l
        rho[live] = rho_l
        residual[live] = np.sqrt(cost_l / t.size)
        status[live] = st
        iterations[live] = it_l

    return tau, rho, residual, status, iterations


def fit_decay(lags, values):
    """Fit the decay model to one coherence series.

    The series may arrive in any lag order; ordering does not change the
    result. Returns a FitResult with the RMS residual at the solution.
    """
    lags, values = _check_series(lags, values)
    if values.ndim != 1:
        raise DimensionError(f"expected a single series, got shape {values.shape}")
    tau, rho, residual, status, iterations = _fit_batch(lags, values[None, :])
    return FitResult(
        tau=float(tau[0]),
        rho_inf=float(rho[0]),
        residual=float(residual[0]),
        status=STATUS_NAMES[int(status[0])],
        iterations=int(iterations[0]),
    )


def grid_oracle(lags, values, taus=None, rhos=None):
    """Exhaustive reference fit over a fixed parameter grid.

    Sweeps tau in half-day steps across the full box and rho_inf in
    steps of 0.005, returning the global grid minimizer. Model-agnostic:
    no degenerate short-circuit, any in-range series is accepted. Slow by
    design; exists to audit the iterative solver.
    """
    lags, values = _check_series(lags, values)
    if values.ndim != 1:
        raise DimensionError(f"expected a single series, got shape {values.shape}")
    if taus is None:
        taus = 0.5 + 0.5 * np.arange(730)
    if rhos is None:
        rhos = np.linspace(0.0, 1.0, 201)
    taus = np.asarray(taus, dtype=np.float64)
    rhos = np.asarray(rhos, dtype=np.float64)
    e = np.exp(-lags[None, :] / taus[:, None])
    f = (1.0 - rhos[None, :, None]) * e[:, None, :] + rhos[None, :, None]
    r = values[None, None, :] - f
    cost = np.einsum("trl,trl->tr", r, r)
    ti, ri = np.unravel_index(np.argmin(cost), cost.shape)
    tau, rho = float(taus[ti]), float(rhos[ri])
    at_bound = (
        abs(tau - TAU_BOUNDS[0]) < BOUND_TOL
        or abs(tau - TAU_BOUNDS[1]) < BOUND_TOL
        or abs(rho - RHO_BOUNDS[0]) < BOUND_TOL
        or abs(rho - RHO_BOUNDS[1]) < BOUND_TOL
    )
    return FitResult(
        tau=tau,
        rho_inf=rho,
        residual=float(np.sqrt(cost[ti, ri] / lags.size)),
        status="bound_hit" if at_bound else "converged",
        iterations=0,
    )


def median_aggregate(pairs):
    """Collapse repeated-lag coherence pairs into one median map per lag.

    pairs is a sequence of (lag_days, 2-D array) with NaN marking nodata.
    Returns (lags, stack): strictly increasing distinct lags and the
    (L, H, W) per-pixel median over all pairs sharing each lag. A pixel
    that is nodata in every pair of a lag stays nodata; even pair counts
    take the mean of the two middle values.
    """
    if not pairs:
        raise DataError("median_aggregate needs at least one coherence pair")
    shape = np.asarray(pairs[0][1]).shape
    groups = {}
    for lag, arr in pairs:
        arr = np.asarray(arr, dtype=np.float64)
        if arr.ndim != 2:
            raise DimensionError(f"coherence pair must be 2-D, got {arr.shape}")
        if arr.shape != shape:
            raise ConfigurationError(
                f"coherence pair grids differ: {arr.shape} vs {shape}"
            )
        groups.setdefault(float(lag), []).append(arr)
    lags = np.array(sorted(groups))
    stack = np.empty((lags.size,) + shape)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)  # all-NaN slices
        for i, lag in enumerate(lags):
            stack[i] = np.nanmedian(np.stack(groups[lag]), axis=0)
    return lags, stack


def fit_decay_map(lags, stack, mask=None, workers=1):
    """Fit the decay model at every valid pixel of a coherence stack.

    stack is (L, H, W) with one band per temporal baseline; lags must be
    strictly increasing. mask marks valid pixels (nonzero = fit); masked
    pixels come back as NaN with status code STATUS_INVALID. Returns a
    dict of (H, W) arrays: tau, rho_inf, residual (float64) and status
    (uint8, coded per STATUS_NAMES). The result does not depend on the
    worker count.
    """
    stack = np.asarray(stack, dtype=np.float64)
    if stack.ndim != 3:
        raise DimensionError(f"stack must be (L, H, W), got {stack.shape}")
    lags = np.asarray(lags, dtype=np.float64)
    if np.any(np.diff(lags) <= 0):
        raise DataError("stack lags must be strictly increasing")
    if workers < 1:
        raise UsageError(f"workers must be >= 1, got {workers}")
    h, w = stack.shape[1:]
    if mask is None:
        valid = np.ones(h * w, dtype=bool)
    else:
        mask = np.asarray(mask)
        if mask.shape != (h, w):
            raise DimensionError(
                f"mask shape {mask.shape} != stack grid {(h, w)}"
            )
        valid = (mask.reshape(-1) != 0) & np.isfinite(mask.reshape(-1))

    tau = np.full(h * w, np.nan)
    rho = np.full(h * w, np.nan)
    residual = np.full(h * w, np.nan)
    status = np.full(h * w, STATUS_INVALID, dtype=np.uint8)

    if np.any(valid):
        _, series = _check_series(lags, stack.reshape(stack.shape[0], -1).T[valid])
        n = series.shape[0]
        chunk = 65536  # bounds solver temporaries to a few hundred MB
        starts = list(range(0, n, chunk))

        def run(a):
            return _fit_batch(lags, series[a:a + chunk])

        if workers == 1 or len(starts) == 1:
            parts = [run(a) for a in starts]
        else:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                parts = list(pool.map(run, starts))
        tau[valid] = np.concatenate([p[0] for p in parts])
        rho[valid] = np.concatenate([p[1] for p in parts])
        residual[valid] = np.concatenate([p[2] for p in parts])
        status[valid] = np.concatenate([p[3] for p in parts])

    return {
        "tau": tau.reshape(h, w),
        "rho_inf": rho.reshape(h, w),
        "residual": residual.reshape(h, w),
        "status": status.reshape(h, w),
    }
