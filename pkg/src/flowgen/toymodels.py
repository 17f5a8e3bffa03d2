"""Two solvable toy problems with closed-form optimal denoisers.

Toy problem 1 is a scalar map: a smooth mean function plus a 1-periodic hat
oscillation at scale Delta = 1/N.  As Delta -> 0 the map has no pointwise
limit, but its conditional law converges to the uniform distribution on
[m(u_bar)-1, m(u_bar)+1]; the optimal denoiser for that limit is the
truncated-normal posterior mean, degenerating to a clamp as sigma -> 0.

Toy problem 2 maps a phase h to a point on the unit circle at winding
number k; the large-k limit law is uniform on the circle and the optimal
denoiser is radial with gain I1(r/sigma^2)/I0(r/sigma^2).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import special as _sp

from .diffusion import TrainSet

# ---------------------------------------------------------------------------
# mean-function catalog (the oscillation rides on top of one of these)

MEAN_FUNCTIONS = {
    "zero": lambda amp: (lambda u: np.zeros_like(np.asarray(u, dtype=np.float64))),
    "sine": lambda amp: (lambda u: amp * np.sin(2.0 * np.pi * np.asarray(u, dtype=np.float64))),
}


@dataclass
class Toy1Config:
    delta: float = 0.002
    mean_kind: str = "sine"
    mean_amplitude: float = 0.5
    eps_tilde: float = 1.0 / 16.0
    n_samples: int = 2048

    def __post_init__(self):
        if not (0 < self.delta <= 1):
            raise ValueError("delta must be in (0, 1]")
        n = 1.0 / self.delta
        if abs(n - round(n)) > 1e-9:
            raise ValueError("1/delta must be an integer")
        if self.eps_tilde <= 0:
            raise ValueError("eps_tilde must be positive")
        if self.mean_kind not in MEAN_FUNCTIONS:
            raise ValueError(f"unknown mean function {self.mean_kind!r}")

    @property
    def n_oscillations(self):
        return int(round(1.0 / self.delta))

    def mean(self, u_bar):
        return MEAN_FUNCTIONS[self.mean_kind](self.mean_amplitude)(u_bar)

    def to_json(self):
        return {
            "delta": self.delta,
            "mean_kind": self.mean_kind,
            "mean_amplitude": self.mean_amplitude,
            "eps_tilde": self.eps_tilde,
            "n_samples": self.n_samples,
        }

    @classmethod
    def from_json(cls, d):
        return cls(**d)


@dataclass
class Toy2Config:
    k: int = 30
    n_samples: int = 2048

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("wavenumber k must be >= 1")

    def to_json(self):
        return {"k": self.k, "n_samples": self.n_samples}

    @classmethod
    def from_json(cls, d):
        return cls(**d)


# ---------------------------------------------------------------------------
# the maps


def hat_lambda(x):
    """1-periodic hat: -1 at integers, +1 at half-integers, slope +/-4."""
    frac = np.mod(np.asarray(x, dtype=np.float64), 1.0)
    return 1.0 - 4.0 * np.abs(frac - 0.5)


def s_delta(u_bar, config):
    """m(u_bar) + hat(N * u_bar): the oscillatory scalar map."""
    u_bar = np.asarray(u_bar, dtype=np.float64)
    return config.mean(u_bar) + hat_lambda(config.n_oscillations * u_bar)


def s_k(h, config):
    """Point on the unit circle at winding number k: (cos, sin)(2 pi k h)."""
    h = np.asarray(h, dtype=np.float64)
    ang = 2.0 * np.pi * config.k * h
    return np.stack([np.cos(ang), np.sin(ang)], axis=-1)


# ---------------------------------------------------------------------------
# limit measures


def toy1_limit_sampler(u_bar, config, rng, n=1):
    """Draws from the Delta -> 0 conditional law U[m(u_bar)-1, m(u_bar)+1]."""
    m = float(config.mean(u_bar))
    return rng.uniform(m - 1.0, m + 1.0, (n,))


def nu_delta_sampler(u_bar, config, rng, n=1):
    """Law of m(u_bar) + hat(N (u_bar + du)) with du ~ U[-eps, eps].

    When N * eps_tilde is an integer the perturbation covers whole hat
    periods and the pushforward is exactly uniform on the limit interval.
    """
    du = rng.uniform(-config.eps_tilde, config.eps_tilde, (n,))
    m = float(config.mean(u_bar))
    return m + hat_lambda(config.n_oscillations * (u_bar + du))


# ---------------------------------------------------------------------------
# closed-form optimal denoisers


def _phi(x):
    return np.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)


def uniform_interval_denoiser(w, a, b, sigma):
    """Posterior mean E[u | u + noise = w] for u ~ U[a, b], noise N(0, s^2).

    The truncated-normal mean w + sigma*(phi(alpha) - phi(beta)) / Z with
    alpha = (a-w)/sigma, beta = (b-w)/sigma, evaluated in scaled form
    (erfcx) when w sits far outside [a, b] so the tails cancel stably.
    """
    if not a < b:
        raise ValueError("need a < b")
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    w = np.asarray(w, dtype=np.float64)
    scalar = w.ndim == 0
    w = np.atleast_1d(w)
    alpha = (a - w) / sigma
    beta = (b - w) / sigma
    out = np.empty_like(w)

    # far below the interval (w << a): both tail args are large positive
    hi = alpha > 6.0
    # far above (w >> b): mirror image
    lo = beta < -6.0
    mid = ~(hi | lo)

    if np.any(mid):
        al, be = alpha[mid], beta[mid]
        z = _sp.ndtr(be) - _sp.ndtr(al)
        out[mid] = w[mid] + sigma * (_phi(al) - _phi(be)) / z

    if np.any(hi):
        al, be = alpha[hi], beta[hi]
        # common factor exp(-al^2/2) cancels between numerator and denominator
        damp = np.exp(-0.5 * (be * be - al * al))
        num = (1.0 - damp) / math.sqrt(2.0 * math.pi)
        den = 0.5 * (_sp.erfcx(al / math.sqrt(2.0)) - damp * _sp.erfcx(be / math.sqrt(2.0)))
        out[hi] = w[hi] + sigma * num / den

    if np.any(lo):
        al, be = -beta[lo], -alpha[lo]
        damp = np.exp(-0.5 * (be * be - al * al))
        num = (1.0 - damp) / math.sqrt(2.0 * math.pi)
        den = 0.5 * (_sp.erfcx(al / math.sqrt(2.0)) - damp * _sp.erfcx(be / math.sqrt(2.0)))
        out[lo] = w[lo] - sigma * num / den

    return float(out[0]) if scalar else out


def clamp_limit_denoiser(u, m_val):
    """sigma -> 0 limit of the interval denoiser: clamp to [m-1, m+1]."""
    u = np.asarray(u, dtype=np.float64)
    return m_val + np.clip(u - m_val, -1.0, 1.0)


def bessel_i(order, z):
    """Modified Bessel I_0 or I_1 via power series (z <= 30) or the
    asymptotic expansion of exp(-z) I(z) for larger arguments."""
    if order not in (0, 1):
        raise ValueError("only orders 0 and 1 are supported")
    z = float(z)
    if z < 0:
        raise ValueError("z must be nonnegative")
    if z <= 30.0:
        return _bessel_series(order, z)
    return math.exp(z) * _bessel_scaled_asymptotic(order, z)


def _bessel_series(order, z, max_terms=200):
    half = z / 2.0
    term = half**order / math.factorial(order)
    total = term
    for m in range(1, max_terms):
        term *= half * half / (m * (m + order))
        total += term
        if term < 1e-17 * total:
            break
    return total


def _bessel_scaled_asymptotic(order, z, max_terms=20):
    """exp(-z) I_order(z) ~ (1/sqrt(2 pi z)) sum_k (-1)^k prod_j (mu-(2j-1)^2)/(k! (8z)^k)."""
    mu = 4.0 * order * order
    term = 1.0
    total = 1.0
    for k in range(1, max_terms):
        term *= -(mu - (2 * k - 1) ** 2) / (k * 8.0 * z)
        total += term
        if abs(term) < 1e-16 * abs(total):
            break
    return total / math.sqrt(2.0 * math.pi * z)


def bessel_ratio_i1_i0(z):
    """I_1(z) / I_0(z), stable for arbitrarily large z."""
    z = float(z)
    if z < 0:
        raise ValueError("z must be nonnegative")
    if z <= 30.0:
        return _bessel_series(1, z) / _bessel_series(0, z)
    return _bessel_scaled_asymptotic(1, z) / _bessel_scaled_asymptotic(0, z)


def circle_denoiser(u, sigma):
    """Optimal denoiser for the uniform circle law: radial gain times u/|u|.

    Continuous extension sends the origin to the origin; as sigma -> 0 the
    map approaches radial projection onto the circle.
    """
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    u = np.asarray(u, dtype=np.float64)
    single = u.ndim == 1
    pts = np.atleast_2d(u)
    r = np.linalg.norm(pts, axis=-1)
    out = np.zeros_like(pts)
    nz = r > 0
    if np.any(nz):
        gains = np.array([bessel_ratio_i1_i0(t / sigma**2) for t in r[nz]])
        out[nz] = pts[nz] * (gains / r[nz])[:, None]
    return out[0] if single else out


# ---------------------------------------------------------------------------
# datasets


def generate_toy1_dataset(config, rng):
    """(u_bar, S_Delta(u_bar)) pairs with u_bar uniform on [0, 1]."""
    u_bar = rng.uniform(0.0, 1.0, (config.n_samples,))
    u = s_delta(u_bar, config)
    return TrainSet(u_bar[:, None], u[:, None])


def generate_toy2_dataset(config, rng):
    """(h, S_k(h)) pairs with h uniform on [0, 1]."""
    h = rng.uniform(0.0, 1.0, (config.n_samples,))
    u = s_k(h, config)
    return TrainSet(h[:, None], u)


def generate_toy_dataset(config, rng):
    if isinstance(config, Toy1Config):
        return generate_toy1_dataset(config, rng)
    if isinstance(config, Toy2Config):
        return generate_toy2_dataset(config, rng)
    raise TypeError(f"unsupported config type {type(config)!r}")
