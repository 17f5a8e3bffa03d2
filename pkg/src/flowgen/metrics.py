"""Probabilistic evaluation metrics for ensembles on a common grid.

Ensembles are plain arrays of shape (members, ..., channels); statistics
and errors are reported per channel.  Norms are grid-normalized L2 norms
(sqrt of the spatial mean of squares), so values are resolution-independent.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import optimize as _opt

CRPS_PAPER_SQUARED = "paper_squared"
CRPS_ABSOLUTE = "absolute"


def _validate_pair(reference, candidate):
    reference = np.asarray(reference, dtype=np.float64)
    candidate = np.asarray(candidate, dtype=np.float64)
    if reference.shape[1:] != candidate.shape[1:]:
        raise ValueError(
            f"grid mismatch: {reference.shape[1:]} vs {candidate.shape[1:]}"
        )
    return reference, candidate


def _l2(x):
    """Grid-normalized L2 norm over all axes except the trailing channel."""
    axes = tuple(range(x.ndim - 1))
    return np.sqrt(np.mean(x**2, axis=axes) if axes else x**2)


def mean_error(reference, candidate, relative=True):
    """L2 distance between ensemble means, per channel.

    ``relative`` (default) divides by the norm of the reference mean.
    """
    reference, candidate = _validate_pair(reference, candidate)
    mu_ref = reference.mean(axis=0)
    mu_cand = candidate.mean(axis=0)
    err = _l2(mu_ref - mu_cand)
    if relative:
        denom = _l2(mu_ref)
        if np.any(denom == 0):
            raise ZeroDivisionError("reference mean has zero norm")
        err = err / denom
    return err


def std_error(reference, candidate):
    """Relative L2 distance between pointwise population standard deviations.

    A candidate collapsed onto its mean scores exactly 1.
    """
    reference, candidate = _validate_pair(reference, candidate)
    if len(reference) < 2 or len(candidate) < 2:
        raise ValueError("std_error needs at least two members on both sides")
    s_ref = reference.std(axis=0)
    s_cand = candidate.std(axis=0)
    denom = _l2(s_ref)
    if np.any(denom == 0):
        raise ZeroDivisionError("reference standard deviation has zero norm")
    return _l2(s_ref - s_cand) / denom


# ---------------------------------------------------------------------------
# one-dimensional Wasserstein machinery


def w1_1d(a, b):
    """W1 between two empirical 1D distributions (quantile representation).

    Equal sample counts reduce to the mean absolute difference of sorted
    samples; unequal counts integrate the piecewise-constant quantile
    functions exactly.
    """
    a = np.sort(np.asarray(a, dtype=np.float64).ravel())
    b = np.sort(np.asarray(b, dtype=np.float64).ravel())
    if a.size == 0 or b.size == 0:
        raise ValueError("empty sample set")
    if a.size == b.size:
        return float(np.mean(np.abs(a - b)))
    # common refinement of the two quantile partitions
    qa = np.arange(1, a.size + 1) / a.size
    qb = np.arange(1, b.size + 1) / b.size
    qs = np.union1d(qa, qb)
    widths = np.diff(np.concatenate([[0.0], qs]))
    # left-continuous inverse CDF: value on (q_{i-1}, q_i] is the ceil sample
    ia = np.ceil(qs * a.size - 1e-12).astype(int) - 1
    ib = np.ceil(qs * b.size - 1e-12).astype(int) - 1
    return float(np.sum(widths * np.abs(a[ia] - b[ib])))


def wasserstein1_pointwise(reference, candidate, points=None, reduce="mean"):
    """Average 1-point W1 between marginal distributions, per channel.

    ``points``: optional flat spatial indices selecting grid points
    (default: all).  ``reduce``: "mean" (default) or "sum" over points.
    """
    reference, candidate = _validate_pair(reference, candidate)
    c = reference.shape[-1]
    ref = reference.reshape(len(reference), -1, c)
    cand = candidate.reshape(len(candidate), -1, c)
    if points is None:
        points = np.arange(ref.shape[1])
    else:
        points = np.asarray(points, dtype=int)
        if points.size == 0:
            raise ValueError("empty point selection")
    out = np.zeros(c)
    for ch in range(c):
        vals = [w1_1d(ref[:, p, ch], cand[:, p, ch]) for p in points]
        out[ch] = np.sum(vals) if reduce == "sum" else np.mean(vals)
    return out


def wasserstein1_assignment(x, y):
    """Exact empirical W1 between two equal-size point clouds in R^d
    (Euclidean ground metric) via minimum-cost assignment."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.atleast_2d(np.asarray(y, dtype=np.float64))
    if x.shape != y.shape:
        raise ValueError("point clouds must have identical shapes")
    cost = np.sqrt(((x[:, None, :] - y[None, :, :]) ** 2).sum(-1))
    rows, cols = _opt.linear_sum_assignment(cost)
    return float(cost[rows, cols].mean())


def w1_sample_vs_uniform(samples, a, b):
    """Exact W1 between an empirical distribution and U[a, b].

    Integrates |F_emp - F_uniform| in closed form on each CDF segment.
    """
    if not a < b:
        raise ValueError("need a < b")
    x = np.sort(np.asarray(samples, dtype=np.float64).ravel())
    n = x.size
    if n == 0:
        raise ValueError("empty sample set")
    # segment endpoints: sorted samples clipped into [a, b] plus the interval ends
    knots = np.concatenate([[min(a, x[0])], x, [max(b, x[-1])]])
    total = 0.0
    for i in range(n + 1):
        lo, hi = knots[i], knots[i + 1]
        if hi <= lo:
            continue
        f_emp = i / n
        # integral of |f_emp - F_U(t)| over [lo, hi] with F_U piecewise linear
        seg = np.clip([lo, hi], a, b)
        # parts outside [a, b]: F_U is 0 (left) or 1 (right)
        if lo < a:
            total += (min(hi, a) - lo) * abs(f_emp - 0.0)
        if hi > b:
            total += (hi - max(lo, b)) * abs(f_emp - 1.0)
        lo2, hi2 = seg
        if hi2 > lo2:
            # F_U(t) = (t - a) / (b - a); integral of |f_emp - F_U| analytically
            w = b - a
            t0 = a + f_emp * w  # crossing point
            if t0 <= lo2 or t0 >= hi2:
                v0 = abs(f_emp - (lo2 - a) / w)
                v1 = abs(f_emp - (hi2 - a) / w)
                total += 0.5 * (v0 + v1) * (hi2 - lo2)
            else:
                v0 = abs(f_emp - (lo2 - a) / w)
                v1 = abs(f_emp - (hi2 - a) / w)
                total += 0.5 * v0 * (t0 - lo2) + 0.5 * v1 * (hi2 - t0)
    return float(total)


def w1_circular_to_uniform(angles):
    """W1 on the unit circumference between sample angles and the uniform law.

    Uses the classical reduction: min over rotations c of the integral of
    |F_emp(t) - t - c|, minimized by the median of F_emp(t) - t.  Angles are
    taken mod 2 pi and mapped to circumference coordinates in [0, 1).
    """
    t = np.sort(np.mod(np.asarray(angles, dtype=np.float64).ravel(), 2 * np.pi)) / (
        2 * np.pi
    )
    n = t.size
    if n == 0:
        raise ValueError("empty sample set")
    # evaluate G(t) = F_emp(t) - t on a fine grid (exact enough at 1/(8n) step)
    grid = np.linspace(0.0, 1.0, max(8 * n, 512), endpoint=False)
    f_emp = np.searchsorted(t, grid, side="right") / n
    g = f_emp - grid
    c = np.median(g)
    return float(np.mean(np.abs(g - c)))


# ---------------------------------------------------------------------------
# CRPS


def _pairwise_abs_mean(x):
    """(1/M^2) sum_{m,j} |x_m - x_j| along axis 0, via the sorted identity."""
    m = x.shape[0]
    xs = np.sort(x, axis=0)
    coef = (2.0 * np.arange(m) - m + 1.0).reshape((m,) + (1,) * (x.ndim - 1))
    return 2.0 * np.sum(coef * xs, axis=0) / (m * m)


def _cross_abs_mean(x, y, block=1 << 22):
    """(1/(M N)) sum_{m,n} |x_m - y_n| along axis 0, blocked over the grid."""
    m, n = x.shape[0], y.shape[0]
    flat_x = x.reshape(m, -1)
    flat_y = y.reshape(n, -1)
    p = flat_x.shape[1]
    out = np.empty(p)
    step = max(1, block // (m * n))
    for lo in range(0, p, step):
        hi = min(p, lo + step)
        diff = np.abs(flat_x[:, None, lo:hi] - flat_y[None, :, lo:hi])
        out[lo:hi] = diff.mean(axis=(0, 1))
    return out.reshape(x.shape[1:])


def crps(ensemble, observations, mode=CRPS_PAPER_SQUARED):
    """Pointwise CRPS field, averaged over an ensemble of observations.

    mode=CRPS_PAPER_SQUARED uses squared distances in both terms; the pair
    sums telescope, so it equals (ensemble mean - observation)^2 averaged
    over observations and is nonnegative up to floating error.
    mode=CRPS_ABSOLUTE is the standard energy form: nonnegative and zero
    iff the ensemble is a point mass at the observation.
    """
    ensemble, observations = _validate_pair(ensemble, observations)
    if mode == CRPS_PAPER_SQUARED:
        ex = ensemble.mean(axis=0)
        ex2 = (ensemble**2).mean(axis=0)
        oy = observations.mean(axis=0)
        oy2 = (observations**2).mean(axis=0)
        term1 = ex2 - 2.0 * ex * oy + oy2
        term2 = ex2 - ex**2
        return term1 - term2
    if mode == CRPS_ABSOLUTE:
        term1 = _cross_abs_mean(ensemble, observations)
        term2 = 0.5 * _pairwise_abs_mean(ensemble)
        return term1 - term2
    raise ValueError(f"unknown CRPS mode {mode!r}")


def crps_global(ensemble, observations, mode=CRPS_PAPER_SQUARED, relative=True):
    """L2 norm of the pointwise CRPS over the grid, per channel.

    ``relative`` normalizes by the RMS norm of the observation ensemble.
    """
    field = crps(ensemble, observations, mode)
    out = _l2(field)
    if relative:
        obs = np.asarray(observations, dtype=np.float64)
        denom = np.sqrt(np.mean(obs**2, axis=tuple(range(obs.ndim - 1))))
        if np.any(denom == 0):
            raise ZeroDivisionError("observation ensemble has zero norm")
        out = out / denom
    return out


# ---------------------------------------------------------------------------
# energy spectra


@dataclass
class SpectrumResult:
    """Kinetic energy aggregated over L1 wavenumber shells."""

    k: np.ndarray
    energy: np.ndarray

    def total(self):
        return float(self.energy.sum())


def energy_spectrum(values, sum_channels=True):
    """Shell-binned spectrum E_k = 0.5 sum_{|xi|_1 = k} |u_hat(xi)|^2.

    The DFT is normalized by 1/n^d so that sum_k E_k equals half the grid
    mean of |u|^2 exactly (Parseval).  ``values``: (n, n, c) or (n, c) or a
    Field-like object with a ``values`` attribute.
    """
    if hasattr(values, "values"):
        values = values.values
    v = np.asarray(values, dtype=np.float64)
    if v.ndim == 1:
        v = v[:, None]
    spatial = v.shape[:-1]
    c = v.shape[-1]
    axes = tuple(range(len(spatial)))
    vhat = np.fft.fftn(v, axes=axes) / np.prod(spatial)
    freqs = [np.fft.fftfreq(n, d=1.0 / n).astype(int) for n in spatial]
    shells = np.zeros(spatial, dtype=int)
    for ax, f in enumerate(freqs):
        shape = [1] * len(spatial)
        shape[ax] = spatial[ax]
        shells = shells + np.abs(f).reshape(shape)
    kmax = int(shells.max())
    energy = np.zeros(kmax + 1)
    dens = 0.5 * (np.abs(vhat) ** 2)
    if sum_channels:
        dens = dens.sum(axis=-1)
        np.add.at(energy, shells.ravel(), dens.ravel())
        return SpectrumResult(np.arange(kmax + 1), energy)
    out = np.zeros((kmax + 1, c))
    for ch in range(c):
        np.add.at(out[:, ch], shells.ravel(), dens[..., ch].ravel())
    return SpectrumResult(np.arange(kmax + 1), out)


def relative_l2(candidate, reference):
    """Relative L2 error ||cand - ref|| / ||ref|| over full arrays."""
    candidate = np.asarray(candidate, dtype=np.float64)
    reference = np.asarray(reference, dtype=np.float64)
    denom = np.linalg.norm(reference.ravel())
    if denom == 0:
        raise ZeroDivisionError("reference has zero norm")
    return float(np.linalg.norm((candidate - reference).ravel()) / denom)
