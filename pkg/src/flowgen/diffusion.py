"""Denoising-diffusion machinery: preconditioning, training losses, sigma
schedules, reverse-time samplers (variance-exploding Euler-Maruyama and
variance-preserving cosine ancestral), all-to-all pair construction,
autoregressive rollout, and the Adam training loop.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import nn
from . import tensor as T
from .optim import AdamState, adam_step
from .tensor import Tensor, as_tensor, value_and_grad

VE_EXPONENTIAL = "ve_exponential"
VP_COSINE = "vp_cosine"


@dataclass
class DiffusionSchedule:
    sigma_min: float = 1e-3
    sigma_max: float = 80.0
    sigma_data: float = 0.5
    rho: float = 7.0
    steps: int = 128
    kind: str = VE_EXPONENTIAL

    def __post_init__(self):
        if not (0 < self.sigma_min < self.sigma_max):
            raise ValueError("need 0 < sigma_min < sigma_max")
        if self.sigma_data <= 0 or self.rho <= 0:
            raise ValueError("sigma_data and rho must be positive")
        if self.steps < 2:
            raise ValueError("need at least 2 steps")
        if self.kind not in (VE_EXPONENTIAL, VP_COSINE):
            raise ValueError(f"unknown schedule kind {self.kind!r}")

    def to_json(self):
        return {
            "sigma_min": self.sigma_min,
            "sigma_max": self.sigma_max,
            "sigma_data": self.sigma_data,
            "rho": self.rho,
            "steps": self.steps,
            "kind": self.kind,
        }

    @classmethod
    def from_json(cls, d):
        return cls(**d)


@dataclass(frozen=True)
class PreconditionCoeffs:
    c_in: np.ndarray
    c_out: np.ndarray
    c_skip: np.ndarray
    c_noise: np.ndarray
    lam: np.ndarray


def precondition_coeffs(sigma, sigma_data=0.5):
    """Input/output/skip scalings and the loss weight at noise level sigma.

    These are the unique coefficients with Var[c_in*(u+eta)] = 1 and
    Var[F_target] = 1 for data of standard deviation sigma_data, which also
    make lam(sigma) * c_out(sigma)^2 = 1 exactly.
    """
    sigma = np.asarray(sigma, dtype=np.float64)
    if np.any(sigma <= 0):
        raise ValueError("sigma must be positive")
    s2 = sigma**2 + sigma_data**2
    c_in = 1.0 / np.sqrt(s2)
    c_skip = sigma_data**2 / s2
    c_out = sigma * sigma_data / np.sqrt(s2)
    c_noise = 0.25 * np.log(sigma)
    lam = s2 / (sigma * sigma_data) ** 2
    return PreconditionCoeffs(c_in, c_out, c_skip, c_noise, lam)


# ---------------------------------------------------------------------------
# denoiser models (raw networks F; preconditioning is applied on top)


class MlpDenoiser:
    """Dense denoiser for low-dimensional states.

    Raw network input is [u_noisy, cond, c_noise(sigma)] (plus lead time
    when enabled), output has state dimension.
    """

    kind = "mlp_denoiser"

    def __init__(self, state_dim, cond_dim, width=512, hidden_layers=3,
                 activation="relu", use_lead=False):
        self.state_dim = state_dim
        self.cond_dim = cond_dim
        self.width = width
        self.hidden_layers = hidden_layers
        self.activation = activation
        self.use_lead = use_lead
        in_dim = state_dim + cond_dim + 1 + (1 if use_lead else 0)
        self.desc = nn.MlpDescriptor(
            (in_dim,) + (width,) * hidden_layers + (state_dim,), activation
        )
        self.state_shape = (state_dim,)
        self.cond_shape = (cond_dim,)

    def layout(self):
        return self.desc.layout()

    def init_params(self, rng, dtype=np.float64):
        return self.layout().init_params(rng, dtype)

    def raw(self, params, u_noisy, cond, sigma, lead_time=None):
        u_noisy = as_tensor(u_noisy)
        dt = u_noisy.dtype
        sig = np.atleast_1d(np.asarray(as_tensor(sigma).data, dtype=np.float64))
        feats = [u_noisy, as_tensor(cond),
                 Tensor((0.25 * np.log(sig))[:, None].astype(dt))]
        if self.use_lead:
            lead = np.atleast_1d(np.asarray(as_tensor(lead_time).data))
            feats.append(Tensor(lead[:, None].astype(dt)))
        return nn.mlp_forward(params, self.desc, T.concat(feats, axis=-1))

    def to_json(self):
        return {
            "kind": self.kind,
            "state_dim": self.state_dim,
            "cond_dim": self.cond_dim,
            "width": self.width,
            "hidden_layers": self.hidden_layers,
            "activation": self.activation,
            "use_lead": self.use_lead,
        }

    @classmethod
    def from_json(cls, d):
        return cls(**{k: v for k, v in d.items() if k != "kind"})


class UvitDenoiser:
    """Field denoiser backed by the mini UViT."""

    kind = "uvit_denoiser"

    def __init__(self, desc):
        self.desc = desc
        self.state_shape = (desc.grid, desc.grid, desc.state_channels)
        self.cond_shape = (desc.grid, desc.grid, desc.cond_channels)

    def layout(self):
        return self.desc.layout()

    def init_params(self, rng, dtype=np.float64):
        return self.layout().init_params(rng, dtype)

    def raw(self, params, u_noisy, cond, sigma, lead_time=None):
        lead = 0.0 if lead_time is None else lead_time
        return nn.mini_uvit_forward(params, self.desc, u_noisy, cond, sigma, lead)

    def to_json(self):
        return {"kind": self.kind, "uvit": self.desc.to_json()}

    @classmethod
    def from_json(cls, d):
        return cls(nn.MiniUvitDescriptor.from_json(d["uvit"]))


def _expand(arr, ndim, dtype=np.float64):
    """Reshape a per-sample vector (B,) for broadcasting against (B, ...)."""
    arr = np.atleast_1d(np.asarray(arr, dtype=dtype))
    return arr.reshape(arr.shape + (1,) * (ndim - 1))


def denoiser_apply(model, params, u_noisy, cond, sigma, lead_time, schedule):
    """Preconditioned denoiser D = c_skip*(u+eta) + c_out*F(c_in*(u+eta))."""
    u_noisy = as_tensor(u_noisy)
    sig = np.atleast_1d(np.asarray(sigma, dtype=np.float64))
    if np.any(sig < schedule.sigma_min - 1e-12) or np.any(sig > schedule.sigma_max + 1e-12):
        raise ValueError(
            f"sigma outside schedule range [{schedule.sigma_min}, {schedule.sigma_max}]"
        )
    c = precondition_coeffs(sig, schedule.sigma_data)
    nd, dt = u_noisy.ndim, u_noisy.dtype
    f = model.raw(params, u_noisy * _expand(c.c_in, nd, dt), cond, sig, lead_time)
    return u_noisy * _expand(c.c_skip, nd, dt) + f * _expand(c.c_out, nd, dt)


# ---------------------------------------------------------------------------
# training data and losses


@dataclass
class TrainSet:
    """Paired (condition, target) states with lead times."""

    cond: np.ndarray
    target: np.ndarray
    lead: np.ndarray = None

    def __post_init__(self):
        self.cond = np.asarray(self.cond)
        self.target = np.asarray(self.target)
        if len(self.cond) != len(self.target):
            raise ValueError("condition/target counts differ")
        if self.lead is None:
            self.lead = np.zeros(len(self.cond))
        self.lead = np.asarray(self.lead, dtype=np.float64)

    def __len__(self):
        return len(self.target)

    def subset(self, idx):
        return TrainSet(self.cond[idx], self.target[idx], self.lead[idx])


def all_to_all_pairs(times):
    """All ordered index pairs (l, n) with t_n > t_l from a sorted time list."""
    times = list(times)
    if any(b <= a for a, b in zip(times, times[1:])):
        raise ValueError("times must be strictly increasing")
    n = len(times)
    return [(l, m) for l in range(n) for m in range(l + 1, n)]


def pairs_from_trajectory(times, snapshots):
    """Expand one trajectory into the all-to-all training set."""
    pairs = all_to_all_pairs(times)
    times = np.asarray(times, dtype=np.float64)
    snaps = np.asarray(snapshots)
    cond = snaps[[l for l, _ in pairs]]
    target = snaps[[m for _, m in pairs]]
    lead = np.array([times[m] - times[l] for l, m in pairs])
    return TrainSet(cond, target, lead)


def sample_sigma_train(rng, schedule, n=1):
    """Noise levels with log(sigma) uniform on [log s_min, log s_max]."""
    lo, hi = math.log(schedule.sigma_min), math.log(schedule.sigma_max)
    return np.exp(rng.uniform(lo, hi, (n,)))


def diffusion_loss(model, params, batch, rng, schedule, lam_sq=0.0, space="d"):
    """Preconditioned denoising score-matching loss on one batch.

    space="d": lam(sigma)-weighted MSE on the denoiser output, plus the
    optional variance-capturing term weighted by lam_sq.  space="f":
    mathematically equivalent unit-weight MSE on the raw network against
    F_target (lam_sq must be 0); kept as a cross-check path.
    """
    if len(batch) == 0:
        raise ValueError("empty batch")
    if lam_sq < 0:
        raise ValueError("lam_sq must be nonnegative")
    u = as_tensor(batch.target)
    b = u.shape[0]
    nd, dt = u.ndim, u.dtype
    sig = sample_sigma_train(rng, schedule, b)
    eta = rng.normal(u.shape, dtype=dt.type) * _expand(sig, nd, dt)
    u_noisy = u + Tensor(eta)
    c = precondition_coeffs(sig, schedule.sigma_data)
    lead = batch.lead
    if space == "f":
        if lam_sq != 0.0:
            raise ValueError("variance-capturing term is defined in D-space only")
        f = model.raw(params, u_noisy * _expand(c.c_in, nd, dt), batch.cond, sig, lead)
        f_target = (u - u_noisy * _expand(c.c_skip, nd, dt)) * _expand(1.0 / c.c_out, nd, dt)
        resid = f - f_target
        return (resid * resid).sum() * (1.0 / (b * _state_size(u)))
    d = denoiser_apply(model, params, u_noisy, batch.cond, sig, lead, schedule)
    resid = d - u
    w = _expand(c.lam, nd, dt)
    loss = ((resid * resid) * Tensor(w)).sum() * (1.0 / (b * _state_size(u)))
    if lam_sq > 0.0:
        sq = d * d - u * u
        loss = loss + (sq * sq).sum() * (lam_sq / (b * _state_size(u)))
    return loss


def _state_size(u):
    return int(np.prod(u.shape[1:])) if u.ndim > 1 else 1


# ---------------------------------------------------------------------------
# VE sampling


def karras_grid(schedule):
    """Decreasing noise grid sigma_0 = sigma_max ... sigma_{N-1} = sigma_min."""
    n, rho = schedule.steps, schedule.rho
    if n < 2:
        raise ValueError("need at least 2 grid points")
    i = np.arange(n)
    grid = (
        schedule.sigma_max ** (1 / rho)
        + i / (n - 1) * (schedule.sigma_min ** (1 / rho) - schedule.sigma_max ** (1 / rho))
    ) ** rho
    grid[0] = schedule.sigma_max
    grid[-1] = schedule.sigma_min
    return grid


def em_sample_ve_batched(model, params, cond_rows, lead_rows, schedule, rng,
                         deterministic=False, denoiser=None):
    """One VE Euler-Maruyama sample per condition row (see em_sample_ve)."""
    if schedule.kind != VE_EXPONENTIAL:
        raise ValueError("em_sample_ve requires a VE_EXPONENTIAL schedule")
    cond_rows = np.asarray(cond_rows)
    dt = cond_rows.dtype if cond_rows.dtype in (np.float32, np.float64) else np.float64
    b = cond_rows.shape[0]
    state_shape = tuple(model.state_shape) if model is not None else cond_rows.shape[1:]
    grid = karras_grid(schedule)
    u = rng.normal((b,) + state_shape, dtype=dt) * grid[0]
    for i in range(len(grid) - 1):
        sig_i = grid[i]
        dtau = math.log(grid[i] / grid[i + 1])
        if denoiser is not None:
            d_val = np.asarray(denoiser(u, sig_i))
        else:
            d_val = denoiser_apply(
                model, params, Tensor(u), Tensor(cond_rows),
                np.full(b, sig_i), lead_rows, schedule,
            ).data
        drift = u - d_val
        if deterministic:
            u = u - drift * dtau
        else:
            u = u - 2.0 * drift * dtau
            if i < len(grid) - 2:
                u = u + math.sqrt(2.0 * sig_i**2 * dtau) * rng.normal(u.shape, dtype=dt)
    return u


def em_sample_ve(model, params, cond, lead_time, schedule, rng, n_samples=1,
                 deterministic=False, denoiser=None):
    """Reverse-time Euler-Maruyama sampling under the VE schedule.

    Uses the exponential scheduler, so each step i has pseudo-time increment
    dtau_i = log(sigma_i / sigma_{i+1}) and drift 2*(u - D(u; sigma_i)).
    The final step adds no noise; with ``deterministic`` the probability-flow
    variant (half drift, no noise) is integrated instead.  ``denoiser``
    overrides the model with an analytic D(u, sigma) -> u_hat callable.
    """
    cond = np.asarray(cond)
    cond_rows = np.broadcast_to(cond[None], (n_samples,) + cond.shape).copy()
    leads = None if lead_time is None else np.full(n_samples, float(lead_time))
    return em_sample_ve_batched(
        model, params, cond_rows, leads, schedule, rng,
        deterministic=deterministic, denoiser=denoiser,
    )


def rollout(model, params, u0, times, schedule, rng, prev_time=0.0):
    """Autoregressive sampling along strictly increasing times.

    Returns an array of shape (len(times),) + state_shape; each step
    conditions on the previous sample with the corresponding lead time.
    """
    times = list(times)
    if any(b <= a for a, b in zip([prev_time] + times, times)):
        raise ValueError("times must be strictly increasing and after prev_time")
    state = np.asarray(u0)
    out = []
    t_prev = prev_time
    for t in times:
        state = em_sample_ve(
            model, params, state, t - t_prev, schedule, rng, n_samples=1
        )[0]
        out.append(state)
        t_prev = t
    return np.stack(out)


# ---------------------------------------------------------------------------
# VP cosine sampling (DDPM-style ancestral updates)


def vp_cosine_alpha_bar(steps, s=0.008):
    """Cumulative signal fraction of the cosine schedule, indices 0..steps."""
    t = np.arange(steps + 1) / steps
    f = np.cos(((t + s) / (1 + s)) * np.pi / 2.0) ** 2
    return f / f[0]


class MlpEpsModel:
    """Epsilon-prediction MLP for the VP parameterization.

    Input is [x_t, cond, t/T]; output predicts the standard normal noise.
    """

    kind = "mlp_eps"

    def __init__(self, state_dim, cond_dim, width=512, hidden_layers=3,
                 activation="relu"):
        self.state_dim = state_dim
        self.cond_dim = cond_dim
        self.width = width
        self.hidden_layers = hidden_layers
        self.activation = activation
        self.desc = nn.MlpDescriptor(
            (state_dim + cond_dim + 1,) + (width,) * hidden_layers + (state_dim,),
            activation,
        )
        self.state_shape = (state_dim,)
        self.cond_shape = (cond_dim,)

    def layout(self):
        return self.desc.layout()

    def init_params(self, rng, dtype=np.float64):
        return self.layout().init_params(rng, dtype)

    def eps(self, params, x_t, cond, t_frac):
        x_t = as_tensor(x_t)
        t_col = Tensor(
            np.atleast_1d(np.asarray(t_frac))[:, None].astype(x_t.dtype)
        )
        return nn.mlp_forward(
            params, self.desc, T.concat([x_t, as_tensor(cond), t_col], axis=-1)
        )

    def to_json(self):
        return {
            "kind": self.kind,
            "state_dim": self.state_dim,
            "cond_dim": self.cond_dim,
            "width": self.width,
            "hidden_layers": self.hidden_layers,
            "activation": self.activation,
        }

    @classmethod
    def from_json(cls, d):
        return cls(**{k: v for k, v in d.items() if k != "kind"})


def vp_cosine_loss(model, params, batch, rng, steps=200):
    """Simple epsilon-matching loss for the VP cosine parameterization."""
    if len(batch) == 0:
        raise ValueError("empty batch")
    u = np.asarray(batch.target)
    b = len(batch)
    dt = u.dtype
    abar = vp_cosine_alpha_bar(steps)
    t_idx = rng.integers(1, steps + 1, (b,))
    a = _expand(abar[t_idx], u.ndim, dt)
    eps = rng.normal(u.shape, dtype=dt.type)
    x_t = np.sqrt(a) * u + np.sqrt(1.0 - a) * eps
    pred = model.eps(params, Tensor(x_t), batch.cond, t_idx / steps)
    resid = pred - Tensor(eps)
    return (resid * resid).sum() * (1.0 / (b * _state_size(pred)))


def vp_cosine_sample_batched(model, params, cond_rows, rng, steps=200, eps_fn=None):
    """One VP-cosine ancestral sample per condition row."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    cond_rows = np.asarray(cond_rows)
    dt = cond_rows.dtype if cond_rows.dtype in (np.float32, np.float64) else np.float64
    b = cond_rows.shape[0]
    state_shape = tuple(model.state_shape) if model is not None else cond_rows.shape[1:]
    abar = vp_cosine_alpha_bar(steps)
    x = rng.normal((b,) + state_shape, dtype=dt)
    for t in range(steps, 0, -1):
        ab_t, ab_prev = abar[t], abar[t - 1]
        beta_t = min(1.0 - ab_t / ab_prev, 0.999)
        alpha_t = 1.0 - beta_t
        if eps_fn is not None:
            eps_hat = np.asarray(eps_fn(x, t))
        else:
            eps_hat = model.eps(
                params, Tensor(x), Tensor(cond_rows), np.full(b, t / steps)
            ).data
        # epsilon-form posterior mean; stays bounded even where abar
        # underflows at the noisiest steps (the x0-form divides by sqrt(abar))
        mean = (x - beta_t / math.sqrt(1.0 - ab_t) * eps_hat) / math.sqrt(alpha_t)
        if t > 1:
            var = (1.0 - ab_prev) / (1.0 - ab_t) * beta_t
            x = mean + math.sqrt(var) * rng.normal(x.shape, dtype=dt)
        else:
            x = mean
    return x


def vp_cosine_sample(model, params, cond, rng, steps=200, n_samples=1,
                     eps_fn=None):
    """Ancestral sampling of the VP cosine process with an eps-predictor.

    ``eps_fn`` optionally replaces the model with an analytic callable
    (x_t, t_idx) -> eps_hat for oracle-driven tests.
    """
    cond = np.asarray(cond)
    cond_rows = np.broadcast_to(cond[None], (n_samples,) + cond.shape).copy()
    return vp_cosine_sample_batched(model, params, cond_rows, rng, steps, eps_fn)


# ---------------------------------------------------------------------------
# training loop


@dataclass
class OptimizerConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 256
    epochs: int = 10000

    def to_json(self):
        return {
            "lr": self.lr, "beta1": self.beta1, "beta2": self.beta2,
            "eps": self.eps, "batch_size": self.batch_size, "epochs": self.epochs,
        }

    @classmethod
    def from_json(cls, d):
        return cls(**d)


@dataclass
class TrainResult:
    params: np.ndarray
    loss_history: list = field(default_factory=list)
    adam_state: AdamState = None
    epochs_run: int = 0


def train(model, params0, dataset, loss_fn, opt, rng, callback=None,
          adam_state=None, start_epoch=0):
    """Minibatch Adam loop.

    loss_fn(params_tensor, batch, rng) must return a scalar Tensor.  The
    optional callback(epoch, params, mean_loss) may return True to stop
    early (checkpoint cadence and convergence probes hook in here).  All
    randomness is drawn from ``rng`` in a fixed order, so identical seeds
    reproduce bit-identical histories in single-threaded mode; passing the
    saved ``adam_state``/``start_epoch``/rng state resumes a run exactly.
    """
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    params = np.array(params0, copy=True)
    state = adam_state or AdamState.init(
        params.size, lr=opt.lr, beta1=opt.beta1, beta2=opt.beta2, eps=opt.eps,
        dtype=params.dtype,
    )
    history = []
    n = len(dataset)
    bs = min(opt.batch_size, n)
    epoch = start_epoch
    for epoch in range(start_epoch, opt.epochs):
        order = rng.permutation(n)
        epoch_losses = []
        for start in range(0, n, bs):
            batch = dataset.subset(order[start : start + bs])
            value, grad = value_and_grad(
                lambda p: loss_fn(p, batch, rng), Tensor(params)
            )
            new_p, state = adam_step(Tensor(params), grad, state)
            params = new_p.data
            epoch_losses.append(value)
        mean_loss = float(np.mean(epoch_losses))
        if not np.isfinite(mean_loss):
            raise FloatingPointError(f"non-finite loss at epoch {epoch}")
        history.append(mean_loss)
        if callback is not None and callback(epoch, params, mean_loss):
            break
    return TrainResult(params=params, loss_history=history, adam_state=state,
                       epochs_run=epoch + 1 if history else start_epoch)


MODEL_KINDS = {
    MlpDenoiser.kind: MlpDenoiser,
    UvitDenoiser.kind: UvitDenoiser,
    MlpEpsModel.kind: MlpEpsModel,
    nn.MlpRegressor.kind: nn.MlpRegressor,
    nn.UvitRegressor.kind: nn.UvitRegressor,
}


def model_from_json(d):
    return MODEL_KINDS[d["kind"]].from_json(d)
