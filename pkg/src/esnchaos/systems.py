"""Lorenz 63 and non-dimensional Chua vector fields, integration, noise, perturbed pairs."""
from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import solve_ivp

from .timeseries import TimeSeries

STATE_CHANNELS = ("x", "y", "z")

# Integration tolerances: the sampling step of a dataset is a grid choice, not
# a stability-safe fixed step, so the solver runs adaptively under these.
DEFAULT_RTOL = 1e-9
DEFAULT_ATOL = 1e-11


class IntegrationError(RuntimeError):
    """Adaptive integration failed; carries the last time reached."""

    def __init__(self, message: str, last_time: float):
        super().__init__(message)
        self.last_time = last_time


class SystemKind(enum.Enum):
    LORENZ63 = "lorenz63"
    CHUA = "chua"


@dataclass(frozen=True)
class LorenzParams:
    sigma: float = 10.0
    rho: float = 28.0
    beta: float = 8.0 / 3.0


@dataclass(frozen=True)
class ChuaParams:
    alpha: float = 10.0
    beta: float = 9.77
    gamma: float = 0.58
    m0: float = -0.735
    m1: float = -1.301


#: Slope assignment that keeps Chua trajectories bounded. With the default
#: slopes above, the outer segments of the piecewise-linear element are
#: steeper than the inner one and almost every initial condition escapes to
#: infinity in finite time; swapping them folds trajectories back between
#: the two outer equilibria and yields the classic bounded double-scroll
#: attractor. Dataset generation uses this variant.
DOUBLE_SCROLL_CHUA = ChuaParams(m0=-1.301, m1=-0.735)

_PARAM_TYPES = {SystemKind.LORENZ63: LorenzParams, SystemKind.CHUA: ChuaParams}


@dataclass(frozen=True)
class SystemSpec:
    """Which system to run, its parameters, and the output sampling grid."""

    kind: SystemKind
    params: LorenzParams | ChuaParams | None = None
    dt: float = 0.01
    n_steps: int = 1000

    def __post_init__(self):
        if self.params is None:
            object.__setattr__(self, "params", _PARAM_TYPES[self.kind]())
        if not isinstance(self.params, _PARAM_TYPES[self.kind]):
            raise ValueError(
                f"{self.kind} expects {_PARAM_TYPES[self.kind].__name__}, "
                f"got {type(self.params).__name__}"
            )
        if not self.dt > 0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        if self.n_steps < 1:
            raise ValueError(f"n_steps must be >= 1, got {self.n_steps}")


def default_initial_condition(kind: SystemKind) -> np.ndarray:
    """On-ramp points that reach the attractor after a short transient."""
    if kind is SystemKind.LORENZ63:
        return np.array([1.0, 1.0, 1.0])
    return np.array([0.1, 0.0, 0.0])


def _check_state(state) -> np.ndarray:
    state = np.asarray(state, dtype=float)
    if state.shape != (3,):
        raise ValueError(f"state must be a 3-vector, got shape {state.shape}")
    if not np.all(np.isfinite(state)):
        raise ValueError(f"state must be finite, got {state}")
    return state


def lorenz_rhs(state, params: LorenzParams = LorenzParams()) -> np.ndarray:
    x, y, z = _check_state(state)
    return np.array(
        [
            params.sigma * (y - x),
            x * (params.rho - z) - y,
            x * y - params.beta * z,
        ]
    )


def chua_phi(x: float, m0: float = ChuaParams.m0, m1: float = ChuaParams.m1) -> float:
    """Piecewise-linear element: odd, continuous, slope m0 inside |x|<=1, m1 outside."""
    if not np.isfinite(x):
        raise ValueError(f"x must be finite, got {x}")
    return m1 * x + 0.5 * (m0 - m1) * (abs(x + 1.0) - abs(x - 1.0))


def chua_rhs(state, params: ChuaParams = ChuaParams()) -> np.ndarray:
    x, y, z = _check_state(state)
    return np.array(
        [
            params.alpha * (y - x - chua_phi(x, params.m0, params.m1)),
            x - y + z,
            -params.beta * y - params.gamma * z,
        ]
    )


def _batch_rhs(kind: SystemKind, params):
    """RHS acting on a flat (3*K,) stack of K independent states."""
    if kind is SystemKind.LORENZ63:
        sigma, rho, beta = params.sigma, params.rho, params.beta

        def fun(t, s):
            s = s.reshape(-1, 3)
            x, y, z = s[:, 0], s[:, 1], s[:, 2]
            out = np.empty_like(s)
            out[:, 0] = sigma * (y - x)
            out[:, 1] = x * (rho - z) - y
            out[:, 2] = x * y - beta * z
            return out.ravel()

    else:
        alpha, beta, gamma = params.alpha, params.beta, params.gamma
        m0, m1 = params.m0, params.m1

        def fun(t, s):
            s = s.reshape(-1, 3)
            x, y, z = s[:, 0], s[:, 1], s[:, 2]
            phi = m1 * x + 0.5 * (m0 - m1) * (np.abs(x + 1.0) - np.abs(x - 1.0))
            out = np.empty_like(s)
            out[:, 0] = alpha * (y - x - phi)
            out[:, 1] = x - y + z
            out[:, 2] = -beta * y - gamma * z
            return out.ravel()

    return fun


def integrate_batch(
    spec: SystemSpec,
    ics: np.ndarray,
    rtol: float = DEFAULT_RTOL,
    atol: float = DEFAULT_ATOL,
) -> np.ndarray:
    """Integrate K initial conditions under one adaptive solve; returns (K, T, 3).

    All trajectories share the step sequence, so members of an ensemble are
    treated identically by the error control.
    """
    ics = np.atleast_2d(np.asarray(ics, dtype=float))
    if ics.shape[1] != 3:
        raise ValueError(f"initial conditions must be (K, 3), got {ics.shape}")
    if not np.all(np.isfinite(ics)):
        raise ValueError("initial conditions must be finite")
    grid = spec.dt * np.arange(spec.n_steps)
    sol = solve_ivp(
        _batch_rhs(spec.kind, spec.params),
        (0.0, grid[-1] if spec.n_steps > 1 else spec.dt),
        ics.ravel(),
        method="RK45",
        t_eval=grid,
        rtol=rtol,
        atol=atol,
    )
    if not sol.success:
        last = float(sol.t[-1]) if sol.t.size else 0.0
        raise IntegrationError(f"integration failed at t={last}: {sol.message}", last)
    # y is (3K, T) -> (K, T, 3)
    return sol.y.T.reshape(spec.n_steps, -1, 3).transpose(1, 0, 2)


def integrate(
    spec: SystemSpec,
    ic,
    rtol: float = DEFAULT_RTOL,
    atol: float = DEFAULT_ATOL,
    t0: float = 0.0,
) -> TimeSeries:
    """Sample one trajectory of the system on the spec's uniform grid.

    The first sample is the initial condition itself; the solver steps
    adaptively between grid points.
    """
    ic = _check_state(ic)
    traj = integrate_batch(spec, ic[None, :], rtol=rtol, atol=atol)[0]
    return TimeSeries(traj, spec.dt, STATE_CHANNELS, t0=t0)


def add_noise(series: TimeSeries, sigma_rel: float, seed: int) -> TimeSeries:
    """Add zero-mean Gaussian noise scaled per channel by sigma_rel * std(channel)."""
    if sigma_rel < 0:
        raise ValueError(f"sigma_rel must be >= 0, got {sigma_rel}")
    if sigma_rel == 0:
        return TimeSeries(series.values, series.dt, series.channels, series.t0)
    rng = np.random.default_rng(seed)
    scale = sigma_rel * series.values.std(axis=0)
    noisy = series.values + rng.normal(size=series.values.shape) * scale
    return TimeSeries(noisy, series.dt, series.channels, series.t0)


def perturbed_pair(
    spec: SystemSpec,
    ic,
    delta0: float,
    seed: int,
    rtol: float = DEFAULT_RTOL,
    atol: float = DEFAULT_ATOL,
) -> tuple[TimeSeries, TimeSeries]:
    """Trajectory pair whose starts differ by delta0 along a random unit direction."""
    ic = _check_state(ic)
    if delta0 < 0:
        raise ValueError(f"delta0 must be >= 0, got {delta0}")
    if delta0 == 0:
        ts = integrate(spec, ic, rtol=rtol, atol=atol)
        return ts, ts
    rng = np.random.default_rng(seed)
    v = rng.normal(size=3)
    norm = np.linalg.norm(v)
    while norm < 1e-12:
        v = rng.normal(size=3)
        norm = np.linalg.norm(v)
    ic2 = ic + delta0 * (v / norm)
    pair = integrate_batch(spec, np.stack([ic, ic2]), rtol=rtol, atol=atol)
    a = TimeSeries(pair[0], spec.dt, STATE_CHANNELS)
    b = TimeSeries(pair[1], spec.dt, STATE_CHANNELS)
    return a, b
