"""Benchmark dynamical systems: Lorenz 96 and Kuramoto-Sivashinsky.

Provides right-hand sides, time integrators (Heun RK2 for L96, ETDRK4 in
Fourier space for KSE), initial-condition sampling, quantity-of-interest
evaluation and trajectory recording.  All state-level functions accept
arrays with arbitrary leading batch dimensions so that whole ensembles can
be advanced in one call.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable

import numpy as np

from .errors import ConfigurationError, IntegrationBlowupError

__all__ = [
    "SystemKind",
    "SystemSpec",
    "Trajectory",
    "InitialConditionSampler",
    "ETDRK4Coefficients",
    "l96_rhs",
    "rk2_step",
    "kse_etdrk4_precompute",
    "kse_etdrk4_step",
    "qoi",
    "sample_initial",
    "integrate",
    "make_model",
    "OdeModel",
    "KseModel",
    "trajectory_to_csv",
]


class SystemKind(Enum):
    L96 = "l96"
    KSE = "kse"


@dataclass(frozen=True)
class SystemSpec:
    """Configuration of one benchmark system.

    ``rk2_variant`` selects the explicit second-order scheme for L96:
    "heun" (explicit trapezoidal, default) or "midpoint".
    """

    kind: SystemKind
    dimension: int
    dt: float
    final_time: float
    forcing: float = 0.0
    domain_length: float = 0.0
    stationary_onset: float = 0.0
    rk2_variant: str = "heun"

    def __post_init__(self):
        if self.dt <= 0 or self.final_time <= 0:
            raise ConfigurationError("dt and final_time must be positive")
        n_steps = self.final_time / self.dt
        if abs(n_steps - round(n_steps)) > 1e-9 * max(1.0, n_steps):
            raise ConfigurationError(
                f"final_time/dt = {n_steps} is not an integer step count"
            )
        if self.rk2_variant not in ("heun", "midpoint"):
            raise ConfigurationError(f"unknown rk2 variant {self.rk2_variant!r}")

    @property
    def n_steps(self) -> int:
        return round(self.final_time / self.dt)

    @staticmethod
    def l96_default(**overrides) -> "SystemSpec":
        """L96 benchmark case: 32 variables, forcing 256, dt=0.001, T=1.27."""
        kw = dict(
            kind=SystemKind.L96,
            dimension=32,
            dt=0.001,
            final_time=1.27,
            forcing=256.0,
            stationary_onset=0.0,
        )
        kw.update(overrides)
        return SystemSpec(**kw)

    @staticmethod
    def kse_default(**overrides) -> "SystemSpec":
        """KSE benchmark case: 128 modes on [0, 32*pi], dt=0.25, T=150."""
        kw = dict(
            kind=SystemKind.KSE,
            dimension=128,
            dt=0.25,
            final_time=150.0,
            domain_length=32.0 * math.pi,
            stationary_onset=50.0,
        )
        kw.update(overrides)
        return SystemSpec(**kw)


@dataclass
class Trajectory:
    """States and QoI recorded at every integration step."""

    times: np.ndarray
    states: np.ndarray  # (n_times, dimension)
    qoi_series: np.ndarray

    def __post_init__(self):
        if not (len(self.times) == len(self.states) == len(self.qoi_series)):
            raise ConfigurationError("trajectory arrays must have equal length")


@dataclass
class InitialConditionSampler:
    """Gaussian perturbations around a fixed mean profile.

    Draws come from a private generator seeded by ``rng_seed``; repeated
    calls walk a reproducible sequence.
    """

    mean_profile: np.ndarray
    noise_std: float
    rng_seed: int

    def __post_init__(self):
        self.mean_profile = np.asarray(self.mean_profile, dtype=float)
        self._rng = np.random.default_rng(self.rng_seed)

    def sample(self) -> np.ndarray:
        return sample_initial(self)

    def sample_batch(self, n: int) -> np.ndarray:
        """n sequential draws stacked into an (n, d) array."""
        d = self.mean_profile.shape[0]
        noise = self._rng.standard_normal((n, d))
        return self.mean_profile[None, :] + self.noise_std * noise

    def reset(self):
        self._rng = np.random.default_rng(self.rng_seed)

    @staticmethod
    def for_spec(spec: SystemSpec, seed: int, noise_std: float | None = None) -> "InitialConditionSampler":
        if spec.kind is SystemKind.L96:
            mean = np.zeros(spec.dimension)
            std = 1.0 if noise_std is None else noise_std
        else:
            x = kse_grid(spec)
            mean = np.cos(x / 16.0) * (1.0 + np.sin(x / 16.0))
            std = 0.1 if noise_std is None else noise_std
        return InitialConditionSampler(mean, std, seed)


def sample_initial(sampler: InitialConditionSampler) -> np.ndarray:
    """One draw: mean profile plus i.i.d. Gaussian noise per component."""
    noise = sampler._rng.standard_normal(sampler.mean_profile.shape[0])
    return sampler.mean_profile + sampler.noise_std * noise


def kse_grid(spec: SystemSpec) -> np.ndarray:
    """Physical grid points x_j = j * L / d on the periodic domain."""
    return spec.domain_length * np.arange(spec.dimension) / spec.dimension


# ---------------------------------------------------------------------------
# Lorenz 96
# ---------------------------------------------------------------------------

def l96_rhs(state: np.ndarray, forcing: float) -> np.ndarray:
    """dx_i/dt = x_{i-1} (x_{i+1} - x_{i-2}) + forcing - x_i, cyclic indices.

    Works on any array whose last axis is the 32 state variables.
    """
    x = np.asarray(state, dtype=float)
    if x.shape[-1] != 32:
        raise ConfigurationError(f"L96 state must have 32 components, got {x.shape[-1]}")
    xm1 = np.roll(x, 1, axis=-1)
    xp1 = np.roll(x, -1, axis=-1)
    xm2 = np.roll(x, 2, axis=-1)
    return xm1 * (xp1 - xm2) + forcing - x


def rk2_step(state: np.ndarray, rhs: Callable[[np.ndarray], np.ndarray],
             dt: float, variant: str = "heun") -> np.ndarray:
    """One explicit second-order Runge-Kutta step.

    "heun": predictor x + dt*k1, update dt*(k1+k2)/2.
    "midpoint": half-step predictor, full step on the midpoint slope.
    """
    if dt <= 0:
        raise ConfigurationError("dt must be positive")
    k1 = rhs(state)
    if variant == "heun":
        k2 = rhs(state + dt * k1)
        out = state + 0.5 * dt * (k1 + k2)
    elif variant == "midpoint":
        k2 = rhs(state + 0.5 * dt * k1)
        out = state + dt * k2
    else:
        raise ConfigurationError(f"unknown rk2 variant {variant!r}")
    return out


# ---------------------------------------------------------------------------
# Kuramoto-Sivashinsky, ETDRK4 in Fourier space
# ---------------------------------------------------------------------------

@dataclass
class ETDRK4Coefficients:
    """Precomputed per-mode factors for the ETDRK4 scheme.

    ``linear_symbol`` is k'^2 - k'^4 per retained rfft mode; the phi
    coefficients come from contour-integral averaging, which handles the
    removable singularity at L=0 without special-casing.
    """

    dt: float
    wavenumbers: np.ndarray          # physical wavenumbers k' (rfft layout)
    linear_symbol: np.ndarray        # L_k = k'^2 - k'^4
    exp_full: np.ndarray             # e^{L dt}
    exp_half: np.ndarray             # e^{L dt/2}
    phi_half: np.ndarray             # dt * phi_1(L dt / 2)
    f1: np.ndarray
    f2: np.ndarray
    f3: np.ndarray
    dealias_mask: np.ndarray
    deriv_factor: np.ndarray         # -i k' with dealiasing applied
    n_grid: int


def kse_etdrk4_precompute(spec: SystemSpec, n_contour: int = 32) -> ETDRK4Coefficients:
    """Coefficients for dxi/dt = -(d4 + d2) xi - d(xi^2) on a periodic grid.

    Phi-function coefficients are averaged over ``n_contour`` points on a
    unit-radius complex contour around each L*dt, the standard cure for
    the 0/0 limits at small |L*dt|.
    """
    if spec.kind is not SystemKind.KSE:
        raise ConfigurationError("ETDRK4 coefficients are specific to the KSE system")
    n = spec.dimension
    dt = spec.dt
    k = np.arange(n // 2 + 1)
    kp = 2.0 * np.pi * k / spec.domain_length
    lin = kp**2 - kp**4

    exp_full = np.exp(dt * lin)
    exp_half = np.exp(0.5 * dt * lin)

    roots = np.exp(1j * np.pi * (np.arange(n_contour) + 0.5) / n_contour)
    lr = dt * lin[:, None] + roots[None, :]
    phi_half = dt * ((np.expm1(lr / 2.0) / lr).mean(axis=1)).real
    f1 = dt * (((-4 - lr + np.exp(lr) * (4 - 3 * lr + lr**2)) / lr**3).mean(axis=1)).real
    f2 = dt * (((2 + lr + np.exp(lr) * (lr - 2)) / lr**3).mean(axis=1)).real
    f3 = dt * (((-4 - 3 * lr - lr**2 + np.exp(lr) * (4 - lr)) / lr**3).mean(axis=1)).real

    # 2/3-rule dealiasing for the quadratic term: keep |k| <= floor(2/3 * n/2)
    cutoff = (2 * (n // 2)) // 3
    dealias = (k <= cutoff).astype(float)
    deriv = -1j * kp * dealias
    # Nyquist mode carries no meaningful odd derivative on an even grid
    deriv[-1] = 0.0

    return ETDRK4Coefficients(
        dt=dt, wavenumbers=kp, linear_symbol=lin,
        exp_full=exp_full, exp_half=exp_half,
        phi_half=phi_half, f1=f1, f2=f2, f3=f3,
        dealias_mask=dealias, deriv_factor=deriv, n_grid=n,
    )


def _kse_nonlinear(state_hat: np.ndarray, coeffs: ETDRK4Coefficients) -> np.ndarray:
    """Spectral nonlinear term -d/dx (xi^2), evaluated pseudo-spectrally."""
    u = np.fft.irfft(state_hat, n=coeffs.n_grid, axis=-1)
    return coeffs.deriv_factor * np.fft.rfft(u * u, axis=-1)


def kse_etdrk4_step(state_hat: np.ndarray, coeffs: ETDRK4Coefficients,
                    nonlinear: bool = True) -> np.ndarray:
    """Advance rfft coefficients of a real field by one ETDRK4 step.

    ``nonlinear=False`` reduces the scheme to the exact exponential
    propagator of the linear subproblem (used by verification tests).
    """
    v = np.asarray(state_hat)
    if nonlinear:
        nv = _kse_nonlinear(v, coeffs)
    else:
        nv = np.zeros_like(v)
    a = coeffs.exp_half * v + coeffs.phi_half * nv
    na = _kse_nonlinear(a, coeffs) if nonlinear else np.zeros_like(v)
    b = coeffs.exp_half * v + coeffs.phi_half * na
    nb = _kse_nonlinear(b, coeffs) if nonlinear else np.zeros_like(v)
    c = coeffs.exp_half * a + coeffs.phi_half * (2.0 * nb - nv)
    nc = _kse_nonlinear(c, coeffs) if nonlinear else np.zeros_like(v)
    return (coeffs.exp_full * v + coeffs.f1 * nv
            + 2.0 * coeffs.f2 * (na + nb) + coeffs.f3 * nc)


# ---------------------------------------------------------------------------
# Quantity of interest
# ---------------------------------------------------------------------------

_QOI_NORM = {SystemKind.L96: 64.0, SystemKind.KSE: 128.0}
_QOI_DIM = {SystemKind.L96: 32, SystemKind.KSE: 128}


def qoi(state: np.ndarray, kind: SystemKind) -> np.ndarray | float:
    """Q = (1/64) sum xi_i^2 for L96, (1/128) sum xi_i^2 for KSE.

    Batched over leading axes; returns a scalar for a single state.
    """
    x = np.asarray(state, dtype=float)
    if x.shape[-1] != _QOI_DIM[kind]:
        raise ConfigurationError(
            f"{kind.value} state must have {_QOI_DIM[kind]} components, got {x.shape[-1]}"
        )
    q = np.sum(x * x, axis=-1) / _QOI_NORM[kind]
    return float(q) if q.ndim == 0 else q


# ---------------------------------------------------------------------------
# Ensemble models: uniform advance/qoi interface over batched states
# ---------------------------------------------------------------------------

class OdeModel:
    """Explicit RK2 time stepping of an arbitrary ODE right-hand side."""

    def __init__(self, rhs: Callable[[np.ndarray], np.ndarray], dimension: int,
                 dt: float, variant: str = "heun",
                 qoi_fn: Callable[[np.ndarray], np.ndarray] | None = None):
        self.rhs = rhs
        self.dimension = dimension
        self.dt = dt
        self.variant = variant
        self._qoi_fn = qoi_fn

    def _n_steps(self, t0: float, t1: float) -> int:
        if t1 < t0:
            raise ConfigurationError("t_end must not precede t_start")
        n = (t1 - t0) / self.dt
        if abs(n - round(n)) > 1e-6:
            raise ConfigurationError(f"interval ({t0}, {t1}) is not a multiple of dt={self.dt}")
        return round(n)

    def advance(self, states: np.ndarray, t0: float, t1: float) -> np.ndarray:
        x = np.asarray(states, dtype=float)
        for i in range(self._n_steps(t0, t1)):
            x = rk2_step(x, self.rhs, self.dt, self.variant)
            if not np.all(np.isfinite(x)):
                raise IntegrationBlowupError(i + 1)
        return x

    def advance_recording(self, state: np.ndarray, t0: float, t1: float):
        x = np.asarray(state, dtype=float)
        out = [x.copy()]
        for i in range(self._n_steps(t0, t1)):
            x = rk2_step(x, self.rhs, self.dt, self.variant)
            if not np.all(np.isfinite(x)):
                raise IntegrationBlowupError(i + 1)
            out.append(x.copy())
        return np.array(out)

    def qoi(self, states: np.ndarray):
        if self._qoi_fn is None:
            raise ConfigurationError("model has no QoI function")
        return self._qoi_fn(states)


class KseModel:
    """KSE ensemble stepping; states live on the physical grid at call
    boundaries, the integrator works in rfft space internally."""

    def __init__(self, spec: SystemSpec, n_contour: int = 32):
        self.spec = spec
        self.dimension = spec.dimension
        self.dt = spec.dt
        self.coeffs = kse_etdrk4_precompute(spec, n_contour)

    def _n_steps(self, t0: float, t1: float) -> int:
        if t1 < t0:
            raise ConfigurationError("t_end must not precede t_start")
        n = (t1 - t0) / self.dt
        if abs(n - round(n)) > 1e-6:
            raise ConfigurationError(f"interval ({t0}, {t1}) is not a multiple of dt={self.dt}")
        return round(n)

    def advance(self, states: np.ndarray, t0: float, t1: float) -> np.ndarray:
        v = np.fft.rfft(np.asarray(states, dtype=float), axis=-1)
        for i in range(self._n_steps(t0, t1)):
            v = kse_etdrk4_step(v, self.coeffs)
            if not np.all(np.isfinite(v)):
                raise IntegrationBlowupError(i + 1)
        return np.fft.irfft(v, n=self.dimension, axis=-1)

    def advance_recording(self, state: np.ndarray, t0: float, t1: float):
        v = np.fft.rfft(np.asarray(state, dtype=float), axis=-1)
        out = [np.fft.irfft(v, n=self.dimension, axis=-1)]
        for i in range(self._n_steps(t0, t1)):
            v = kse_etdrk4_step(v, self.coeffs)
            if not np.all(np.isfinite(v)):
                raise IntegrationBlowupError(i + 1)
            out.append(np.fft.irfft(v, n=self.dimension, axis=-1))
        return np.array(out)

    def qoi(self, states: np.ndarray):
        return qoi(states, SystemKind.KSE)


def make_model(spec: SystemSpec):
    """Ensemble model (advance/qoi/dimension/dt) for a SystemSpec."""
    if spec.kind is SystemKind.L96:
        forcing = spec.forcing
        return OdeModel(
            rhs=lambda x: l96_rhs(x, forcing),
            dimension=spec.dimension,
            dt=spec.dt,
            variant=spec.rk2_variant,
            qoi_fn=lambda x: qoi(x, SystemKind.L96),
        )
    return KseModel(spec)


def integrate(state: np.ndarray, spec: SystemSpec, t_start: float, t_end: float) -> Trajectory:
    """Integrate one state, recording state and QoI at every step."""
    model = make_model(spec)
    states = model.advance_recording(np.asarray(state, dtype=float), t_start, t_end)
    n = states.shape[0]
    times = t_start + spec.dt * np.arange(n)
    return Trajectory(times=times, states=states, qoi_series=model.qoi(states))


def trajectory_to_csv(traj: Trajectory, path) -> None:
    """CSV export: header t,q,x0,...,x{d-1}, 17 significant digits."""
    d = traj.states.shape[1]
    header = "t,q," + ",".join(f"x{i}" for i in range(d))
    data = np.column_stack([traj.times, traj.qoi_series, traj.states])
    np.savetxt(path, data, delimiter=",", header=header, comments="", fmt="%.17g")
