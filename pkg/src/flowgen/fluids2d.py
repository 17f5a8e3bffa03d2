"""2D incompressible Navier-Stokes in vorticity-streamfunction form.

Pseudo-spectral on a periodic square, 2/3-rule dealiasing, integrating
factor for viscosity + spectral hyperviscosity, RK4 in time.  Provides the
perturbed shear-layer initial data and the macro/micro ensemble scheme used
to approximate conditional ground-truth measures with a classical solver.
"""

from __future__ import annotations

import concurrent.futures
import math
from dataclasses import dataclass, field, replace

import numpy as np


class CflError(RuntimeError):
    """Advective CFL bound violated; results would be unreliable."""


class EnergyGrowthError(RuntimeError):
    """Kinetic energy grew on a dissipative run; the integration is unstable."""


@dataclass
class Field:
    """Channels-last values on a uniform periodic square grid."""

    values: np.ndarray  # (n, n, c)
    domain: float = 1.0
    names: tuple = ()

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim == 2:
            self.values = self.values[:, :, None]
        n = self.values.shape[0]
        if self.values.shape[1] != n:
            raise ValueError("grid must be square")
        if n < 16 or n & (n - 1):
            raise ValueError("grid extent must be a power of two >= 16")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("field contains non-finite values")

    @property
    def grid_n(self):
        return self.values.shape[0]

    @property
    def channels(self):
        return self.values.shape[2]


@dataclass
class Trajectory:
    times: np.ndarray
    fields: np.ndarray  # (t, n, n, c)
    domain: float = 1.0


@dataclass
class SolverConfig:
    grid_n: int = 64
    domain: float = 1.0
    nu: float = 1e-4
    hyper_order: int = 2
    hyper_coeff: float = None  # None: damping time of top retained mode = 10 dt
    dt: float = 2e-3
    cfl_limit: float = 0.5

    def to_json(self):
        return {
            "grid_n": self.grid_n,
            "domain": self.domain,
            "nu": self.nu,
            "hyper_order": self.hyper_order,
            "hyper_coeff": self.hyper_coeff,
            "dt": self.dt,
            "cfl_limit": self.cfl_limit,
        }

    @classmethod
    def from_json(cls, d):
        return cls(**d)


@dataclass
class ShearLayerParams:
    """Sinusoidal interface perturbation: base modes k = 1..p scaled by an
    overall amplitude, plus absolute-amplitude micro modes at k = p+1...."""

    alphas: np.ndarray  # (p,) in [0, 1]
    phases: np.ndarray  # (p,) in [0, 2 pi)
    delta: float = 0.1
    rho: float = 0.1
    micro_amplitudes: np.ndarray = field(default_factory=lambda: np.zeros(0))
    micro_phases: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        self.alphas = np.asarray(self.alphas, dtype=np.float64)
        self.phases = np.asarray(self.phases, dtype=np.float64)
        self.micro_amplitudes = np.asarray(self.micro_amplitudes, dtype=np.float64)
        self.micro_phases = np.asarray(self.micro_phases, dtype=np.float64)
        if self.alphas.shape != self.phases.shape:
            raise ValueError("alphas/phases length mismatch")
        if self.micro_amplitudes.shape != self.micro_phases.shape:
            raise ValueError("micro amplitude/phase length mismatch")
        if len(self.alphas) < 1:
            raise ValueError("need at least one perturbation mode")
        if self.rho <= 0:
            raise ValueError("smoothing width rho must be positive")

    @property
    def n_modes(self):
        return len(self.alphas) + len(self.micro_amplitudes)

    def interface(self, x):
        """sigma(x): signed interface displacement."""
        x = np.asarray(x, dtype=np.float64)
        out = np.zeros_like(x)
        for k, (a, b) in enumerate(zip(self.alphas, self.phases), start=1):
            out += self.delta * a * np.sin(2.0 * np.pi * k * x - b)
        k0 = len(self.alphas)
        for j, (a, b) in enumerate(
            zip(self.micro_amplitudes, self.micro_phases), start=1
        ):
            out += a * np.sin(2.0 * np.pi * (k0 + j) * x - b)
        return out

    def to_json(self):
        return {
            "alphas": self.alphas.tolist(),
            "phases": self.phases.tolist(),
            "delta": self.delta,
            "rho": self.rho,
            "micro_amplitudes": self.micro_amplitudes.tolist(),
            "micro_phases": self.micro_phases.tolist(),
        }

    @classmethod
    def from_json(cls, d):
        return cls(
            alphas=np.array(d["alphas"]),
            phases=np.array(d["phases"]),
            delta=d["delta"],
            rho=d["rho"],
            micro_amplitudes=np.array(d["micro_amplitudes"]),
            micro_phases=np.array(d["micro_phases"]),
        )


def random_shear_layer_params(rng, n_modes=10, delta=0.1, rho=0.1):
    """Macro draw: i.i.d. amplitudes on [0,1] and phases on [0, 2 pi)."""
    return ShearLayerParams(
        alphas=rng.uniform(0.0, 1.0, (n_modes,)),
        phases=rng.uniform(0.0, 2.0 * np.pi, (n_modes,)),
        delta=delta,
        rho=rho,
    )


def micro_perturb(params, grid_n, rng, extra_modes=3, coeff=1.0):
    """Append ``extra_modes`` interface modes of amplitude coeff/grid_n with
    fresh phases; base modes are untouched (the Dirac center is preserved)."""
    amp = coeff / float(grid_n)
    new_amp = np.concatenate([params.micro_amplitudes, np.full(extra_modes, amp)])
    new_phase = np.concatenate(
        [params.micro_phases, rng.uniform(0.0, 2.0 * np.pi, (extra_modes,))]
    )
    return replace(params, micro_amplitudes=new_amp, micro_phases=new_phase)


def shear_layer_init(params, grid_n, domain=1.0):
    """Planar shear layer: u_x = tanh(2 pi (|y - 1/2 + sigma(x)| - 1/4)/rho)."""
    x = np.arange(grid_n) * (domain / grid_n)
    y = np.arange(grid_n) * (domain / grid_n)
    xx, yy = np.meshgrid(x, y, indexing="ij")
    r = np.abs(yy - 0.5 * domain + params.interface(xx / domain) * domain)
    ux = np.tanh(2.0 * np.pi * (r - 0.25 * domain) / (params.rho * domain))
    uy = np.zeros_like(ux)
    return Field(np.stack([ux, uy], axis=-1), domain=domain, names=("u_x", "u_y"))


def taylor_green_2d_init(grid_n):
    """u = (cos x sin y, -sin x cos y) on [0, 2 pi]^2; exact NS decay mode."""
    h = 2.0 * np.pi / grid_n
    x = np.arange(grid_n) * h
    xx, yy = np.meshgrid(x, x, indexing="ij")
    ux = np.cos(xx) * np.sin(yy)
    uy = -np.sin(xx) * np.cos(yy)
    return Field(np.stack([ux, uy], axis=-1), domain=2.0 * np.pi, names=("u_x", "u_y"))


# ---------------------------------------------------------------------------
# spectral operators


class Spectral2D:
    """Wavenumber bookkeeping and the vorticity-form right-hand side."""

    def __init__(self, config):
        self.config = config
        n = config.grid_n
        L = config.domain
        k1d = 2.0 * np.pi / L * np.fft.fftfreq(n, d=1.0 / n)
        # derivative wavenumbers zero the unpaired Nyquist mode so real
        # fields keep exact conjugate symmetry under d/dx (otherwise the
        # reconstructed velocity picks up a spurious divergence there)
        kd = k1d.copy()
        kd[n // 2] = 0.0
        self.kx = kd[:, None]
        self.ky = kd[None, :]
        self.k2 = k1d[:, None] ** 2 + k1d[None, :] ** 2
        self.inv_k2 = np.where(self.k2 > 0, 1.0 / np.where(self.k2 > 0, self.k2, 1.0), 0.0)
        kmax = np.abs(k1d).max()
        self.dealias = (np.abs(self.kx) < (2.0 / 3.0) * kmax) & (
            np.abs(self.ky) < (2.0 / 3.0) * kmax
        )
        q = config.hyper_order
        if config.hyper_coeff is None:
            k_cut = 2.0 * np.pi / L * (n // 3)
            self.hyper_coeff = 1.0 / (10.0 * config.dt * k_cut ** (2 * q))
        else:
            self.hyper_coeff = config.hyper_coeff
        self.lin = -(config.nu * self.k2 + self.hyper_coeff * self.k2**q)

    def velocity_hat(self, w_hat):
        psi_hat = w_hat * self.inv_k2
        return 1j * self.ky * psi_hat, -1j * self.kx * psi_hat

    def velocity(self, w_hat):
        ux_hat, uy_hat = self.velocity_hat(w_hat)
        return np.real(np.fft.ifft2(ux_hat)), np.real(np.fft.ifft2(uy_hat))

    def vorticity_hat_from_velocity(self, ux, uy):
        return 1j * self.kx * np.fft.fft2(uy) - 1j * self.ky * np.fft.fft2(ux)

    def nonlinear(self, w_hat):
        """-dealias(FFT(u . grad omega))."""
        ux, uy = self.velocity(w_hat)
        wx = np.real(np.fft.ifft2(1j * self.kx * w_hat))
        wy = np.real(np.fft.ifft2(1j * self.ky * w_hat))
        adv = np.fft.fft2(ux * wx + uy * wy)
        return -adv * self.dealias

    def check_cfl(self, w_hat, dt):
        ux, uy = self.velocity(w_hat)
        umax = max(np.abs(ux).max(), np.abs(uy).max())
        dx = self.config.domain / self.config.grid_n
        if umax * dt / dx > self.config.cfl_limit + 1e-12:
            raise CflError(
                f"advective CFL {umax * dt / dx:.3f} exceeds limit "
                f"{self.config.cfl_limit} (dt={dt}, umax={umax:.3f})"
            )

    def step(self, w_hat, dt):
        """One integrating-factor RK4 step of the dissipative vorticity equation."""
        e_half = np.exp(self.lin * (dt / 2.0))
        e_full = e_half * e_half
        n1 = self.nonlinear(w_hat)
        n2 = self.nonlinear(e_half * (w_hat + (dt / 2.0) * n1))
        n3 = self.nonlinear(e_half * w_hat + (dt / 2.0) * n2)
        n4 = self.nonlinear(e_full * w_hat + dt * e_half * n3)
        return e_full * w_hat + (dt / 6.0) * (
            e_full * n1 + 2.0 * e_half * (n2 + n3) + n4
        )


def step_spectral_ns(omega, dt, nu, hyper_order=2, hyper_coeff=0.0, domain=2.0 * np.pi,
                     cfl_limit=0.5):
    """Advance a vorticity Field by one RK4 step; raises CflError when the
    advective CFL bound is exceeded."""
    cfg = SolverConfig(
        grid_n=omega.grid_n, domain=domain, nu=nu, hyper_order=hyper_order,
        hyper_coeff=hyper_coeff, dt=dt, cfl_limit=cfl_limit,
    )
    op = Spectral2D(cfg)
    w_hat = np.fft.fft2(omega.values[:, :, 0])
    op.check_cfl(w_hat, dt)
    out = np.real(np.fft.ifft2(op.step(w_hat, dt)))
    return Field(out[:, :, None], domain=domain, names=("vorticity",))


def project_field(velocity_field, config=None):
    """Solenoidal projection: velocity -> spectral vorticity -> velocity."""
    cfg = config or SolverConfig(
        grid_n=velocity_field.grid_n, domain=velocity_field.domain
    )
    op = Spectral2D(cfg)
    w_hat = op.vorticity_hat_from_velocity(
        velocity_field.values[:, :, 0], velocity_field.values[:, :, 1]
    )
    ux, uy = op.velocity(w_hat)
    return Field(np.stack([ux, uy], axis=-1), velocity_field.domain, ("u_x", "u_y"))


def run_trajectory(ic, times, config):
    """Integrate a velocity Field and record snapshots at the given times.

    Times must be nondecreasing from 0; t = 0 records the solenoidal
    projection of the initial condition.  Kinetic energy is verified to be
    non-increasing across snapshots whenever nu > 0.
    """
    times = [float(t) for t in times]
    if times and times[0] < 0:
        raise ValueError("times must start at or after 0")
    if any(b < a for a, b in zip(times, times[1:])):
        raise ValueError("times must be nondecreasing")
    op = Spectral2D(config)
    w_hat = op.vorticity_hat_from_velocity(ic.values[:, :, 0], ic.values[:, :, 1])
    snaps = []
    energies = []
    t_now = 0.0
    for t_target in times:
        span = t_target - t_now
        if span > 1e-14:
            n_steps = max(1, int(math.ceil(span / config.dt - 1e-12)))
            dt = span / n_steps
            op.check_cfl(w_hat, dt)
            for _ in range(n_steps):
                w_hat = op.step(w_hat, dt)
            t_now = t_target
        ux, uy = op.velocity(w_hat)
        snaps.append(np.stack([ux, uy], axis=-1))
        energies.append(0.5 * float(np.mean(ux**2 + uy**2)))
    if config.nu > 0:
        for e_prev, e_next in zip(energies, energies[1:]):
            if e_next > e_prev * (1.0 + 1e-10) + 1e-14:
                raise EnergyGrowthError(
                    f"kinetic energy grew from {e_prev:.6e} to {e_next:.6e}"
                )
    return Trajectory(
        times=np.array(times), fields=np.stack(snaps) if snaps else
        np.zeros((0, config.grid_n, config.grid_n, 2)), domain=config.domain,
    )


# ---------------------------------------------------------------------------
# pointwise diagnostics


def kinetic_energy(f):
    """Pointwise kinetic energy 0.5 |u|^2 as a one-channel Field."""
    if f.channels != 2:
        raise ValueError("kinetic_energy expects a two-channel velocity field")
    ke = 0.5 * (f.values[:, :, 0] ** 2 + f.values[:, :, 1] ** 2)
    return Field(ke[:, :, None], f.domain, ("kinetic_energy",))


def vorticity(f):
    """Spectral curl (scalar in 2D) as a one-channel Field."""
    if f.channels != 2:
        raise ValueError("vorticity expects a two-channel velocity field")
    cfg = SolverConfig(grid_n=f.grid_n, domain=f.domain)
    op = Spectral2D(cfg)
    w_hat = op.vorticity_hat_from_velocity(f.values[:, :, 0], f.values[:, :, 1])
    return Field(np.real(np.fft.ifft2(w_hat))[:, :, None], f.domain, ("vorticity",))


def spectral_divergence(f):
    """Max-norm spectral divergence of a velocity field (diagnostic)."""
    cfg = SolverConfig(grid_n=f.grid_n, domain=f.domain)
    op = Spectral2D(cfg)
    div_hat = 1j * op.kx * np.fft.fft2(f.values[:, :, 0]) + 1j * op.ky * np.fft.fft2(
        f.values[:, :, 1]
    )
    return float(np.abs(np.real(np.fft.ifft2(div_hat))).max())


# ---------------------------------------------------------------------------
# ensemble generation


@dataclass
class EnsembleMember:
    macro_id: int
    micro_id: int
    params: ShearLayerParams
    trajectory: Trajectory


@dataclass
class EnsembleSpec:
    m_macro: int = 4
    m_micro: int = 16
    micro_coeff: float = 1.0  # micro amplitude = micro_coeff / grid_n
    micro_modes: int = 3
    snapshot_times: tuple = (0.0, 0.5, 1.0)
    n_base_modes: int = 10
    delta: float = 0.1
    rho: float = 0.1
    solver: SolverConfig = field(default_factory=SolverConfig)

    def __post_init__(self):
        if self.m_macro < 1 or self.m_micro < 1:
            raise ValueError("need at least one macro and one micro member")

    def to_json(self):
        return {
            "m_macro": self.m_macro,
            "m_micro": self.m_micro,
            "micro_coeff": self.micro_coeff,
            "micro_modes": self.micro_modes,
            "snapshot_times": list(self.snapshot_times),
            "n_base_modes": self.n_base_modes,
            "delta": self.delta,
            "rho": self.rho,
            "solver": self.solver.to_json(),
        }

    @classmethod
    def from_json(cls, d):
        d = dict(d)
        d["solver"] = SolverConfig.from_json(d["solver"])
        d["snapshot_times"] = tuple(d["snapshot_times"])
        return cls(**d)


def ensemble_ground_truth(spec, rng, threads=1):
    """Macro/micro conditional ground truth via the classical solver.

    Macro draws sample the interface prior; each macro gets ``m_micro``
    members whose interfaces carry tiny extra modes (amplitude proportional
    to the mesh width), so the chaotic evolution spreads the near-Dirac
    conditional measure.  Members are returned ordered by (macro, micro)
    regardless of scheduling.
    """
    jobs = []
    for i in range(spec.m_macro):
        macro_rng = rng.child(i)
        base = random_shear_layer_params(
            macro_rng, spec.n_base_modes, spec.delta, spec.rho
        )
        for j in range(spec.m_micro):
            member_rng = macro_rng.child(j + 1)
            params = micro_perturb(
                base, spec.solver.grid_n, member_rng, spec.micro_modes, spec.micro_coeff
            )
            jobs.append((i, j, params))

    def run(job):
        i, j, params = job
        ic = shear_layer_init(params, spec.solver.grid_n, spec.solver.domain)
        traj = run_trajectory(ic, spec.snapshot_times, spec.solver)
        return EnsembleMember(i, j, params, traj)

    if threads > 1:
        with concurrent.futures.ThreadPoolExecutor(max_workers=threads) as pool:
            members = list(pool.map(run, jobs))
    else:
        members = [run(job) for job in jobs]
    return members
