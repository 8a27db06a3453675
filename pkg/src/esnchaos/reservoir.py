"""Echo state network: construction, driving, ridge readout training, closed-loop prediction.

State update: x(t) = (1-a) x(t-1) + a tanh(W_in (1, u(t)) + W x(t-1))
Readout:      y(t) = W_out (1, u(t), x(t))
Training solves min ||W_out X - Y||^2 + b ||W_out||^2 via the normal equations
W_out = Y X^T (X X^T + b I)^(-1), factorized, never inverted explicitly.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg
from scipy.linalg import cho_factor, cho_solve

from .timeseries import TimeSeries

DEFAULT_DIVERGENCE_BOUND = 1e6
_INIT_ATTEMPTS = 8
_DRIVE_CHUNK = 4096


class ConvergenceError(RuntimeError):
    """Iteration budget exhausted; carries the best estimate so far."""

    def __init__(self, message: str, best_estimate: float):
        super().__init__(message)
        self.best_estimate = best_estimate


class ReservoirInitError(RuntimeError):
    pass


class TrainingError(RuntimeError):
    pass


class NotTrainedError(RuntimeError):
    pass


class PredictionDivergedError(RuntimeError):
    """Autonomous loop exceeded the output bound; carries completed steps."""

    def __init__(self, message: str, steps_completed: int, partial: np.ndarray):
        super().__init__(message)
        self.steps_completed = steps_completed
        self.partial = partial


@dataclass(frozen=True)
class EsnHyperParams:
    n_nodes: int = 500
    spectral_radius: float = 0.9
    leak: float = 0.3
    density: float = 0.02
    ridge: float = 1e-7
    input_dim: int = 1
    output_dim: int = 3
    washout: int = 200
    seed: int = 0

    def __post_init__(self):
        if self.n_nodes < 1:
            raise ValueError(f"n_nodes must be >= 1, got {self.n_nodes}")
        if not 0 < self.leak <= 1:
            raise ValueError(f"leak must be in (0, 1], got {self.leak}")
        if not self.spectral_radius > 0:
            raise ValueError(f"spectral_radius must be > 0, got {self.spectral_radius}")
        if not 0 < self.density <= 1:
            raise ValueError(f"density must be in (0, 1], got {self.density}")
        if self.ridge < 0:
            raise ValueError(f"ridge must be >= 0, got {self.ridge}")
        if self.input_dim < 1 or self.output_dim < 1:
            raise ValueError("input_dim and output_dim must be >= 1")
        if self.input_dim > self.output_dim:
            raise ValueError(
                f"input_dim ({self.input_dim}) must not exceed "
                f"output_dim ({self.output_dim}): fed-back inputs are read "
                "from the front of the output vector"
            )
        if self.washout < 0:
            raise ValueError(f"washout must be >= 0, got {self.washout}")


@dataclass(frozen=True)
class EsnWeights:
    """Fixed random input/recurrent weights plus the trained readout (if any)."""

    w_in: np.ndarray
    w: sp.csr_matrix
    w_out: np.ndarray | None = None

    def __post_init__(self):
        w_in = np.array(self.w_in, dtype=float)
        w_in.setflags(write=False)
        object.__setattr__(self, "w_in", w_in)
        w = sp.csr_matrix(self.w, dtype=float)
        w.data.setflags(write=False)
        object.__setattr__(self, "w", w)
        n = w_in.shape[0]
        if w.shape != (n, n):
            raise ValueError(f"W must be {n}x{n}, got {w.shape}")
        if self.w_out is not None:
            w_out = np.array(self.w_out, dtype=float)
            w_out.setflags(write=False)
            if w_out.ndim != 2 or w_out.shape[1] != 1 + self.input_dim + n:
                raise ValueError(
                    f"W_out must be (l, {1 + self.input_dim + n}), got {w_out.shape}"
                )
            object.__setattr__(self, "w_out", w_out)

    @property
    def n_nodes(self) -> int:
        return self.w_in.shape[0]

    @property
    def input_dim(self) -> int:
        return self.w_in.shape[1] - 1

    @property
    def output_dim(self) -> int:
        if self.w_out is None:
            raise NotTrainedError("readout not trained yet")
        return self.w_out.shape[0]

    @property
    def is_trained(self) -> bool:
        return self.w_out is not None

    def with_readout(self, w_out: np.ndarray) -> "EsnWeights":
        return dataclasses.replace(self, w_out=w_out)


@dataclass(frozen=True)
class TrainResult:
    weights: EsnWeights
    training_mse: float
    n_samples: int


@dataclass(frozen=True)
class EsnModel:
    """Hyperparameters plus the weights they produced; unit of persistence."""

    hp: EsnHyperParams
    weights: EsnWeights
    training_mse: float | None = None


def _eig2(h: np.ndarray) -> tuple[float, float | None, np.ndarray | None]:
    """Eigen-structure of a real 2x2 matrix, closed form.

    Returns (largest eigenvalue modulus, the dominant eigenvalue itself when
    real else None, its eigenvector when real else None).
    """
    tr = h[0, 0] + h[1, 1]
    det = h[0, 0] * h[1, 1] - h[0, 1] * h[1, 0]
    disc = tr * tr - 4.0 * det
    if disc < 0:
        # complex pair: |lambda|^2 = det
        return float(np.sqrt(det)), None, None
    s = np.sqrt(disc)
    theta = (tr + s) / 2.0 if abs(tr + s) >= abs(tr - s) else (tr - s) / 2.0
    g = np.array([h[0, 1], theta - h[0, 0]])
    alt = np.array([theta - h[1, 1], h[1, 0]])
    if np.linalg.norm(alt) > np.linalg.norm(g):
        g = alt
    nrm = np.linalg.norm(g)
    g = np.array([1.0, 0.0]) if nrm < 1e-300 else g / nrm
    return float(abs(theta)), float(theta), g


def _eig2_moduli(h: np.ndarray) -> float:
    return _eig2(h)[0]


def spectral_radius(
    w, tol: float = 1e-8, max_iter: int = 10_000, seed: int = 0
) -> float:
    """Dominant eigenvalue modulus by two-column orthogonal iteration.

    A single power vector stalls when the dominant eigenvalues are a complex
    conjugate pair, which is the typical case for random recurrent matrices;
    iterating a two-dimensional subspace with a Rayleigh-Ritz extraction
    handles pairs and real-dominant spectra alike. When the modulus gap below
    the dominant pair is tiny the iteration is restarted on a power of the
    matrix (the gap squares with each power, so the stall dissolves); genuine
    modulus ties never converge at any power and raise instead.
    """
    if sp.issparse(w):
        n = w.shape[0]
        if w.shape[0] != w.shape[1]:
            raise ValueError(f"square matrix required, got shape {w.shape}")
    else:
        w = np.asarray(w, dtype=float)
        if w.ndim != 2 or w.shape[0] != w.shape[1]:
            raise ValueError(f"square matrix required, got shape {w.shape}")
        n = w.shape[0]
    if n == 1:
        return float(abs(w[0, 0]))
    if n == 2:
        return _eig2_moduli(np.asarray(w.todense() if sp.issparse(w) else w))

    # normalize so powered applications cannot overflow (inf-norm >= radius)
    scale = float(np.max(np.abs(w).sum(axis=1)))
    if scale == 0.0 or not np.isfinite(scale):
        if not np.isfinite(scale):
            raise ValueError("matrix entries must be finite")
        return 0.0
    ws = w / scale

    rng = np.random.default_rng(seed)
    v = np.linalg.qr(rng.normal(size=(n, 2)))[0]
    best = 0.0
    budgets = ((1, int(0.4 * max_iter)), (2, int(0.3 * max_iter)), (4, int(0.3 * max_iter)))
    for power, budget in budgets:
        for _ in range(budget):
            av = v
            for _ in range(power):
                av = ws @ av
            h = v.T @ av
            rho_p, theta, g = _eig2(h)
            rho = scale * (float(rho_p) ** (1.0 / power)) if rho_p > 0 else 0.0
            best = rho
            if theta is None:
                # complex conjugate pair: its invariant object is the plane
                resid = np.linalg.norm(av - v @ h)
            else:
                # real dominant eigenvalue: only its Ritz vector must settle,
                # the companion column may keep chasing a complex pair below
                resid = np.linalg.norm(av @ g - theta * (v @ g))
            if resid <= tol * max(rho_p, 1e-30):
                return rho
            q, r = np.linalg.qr(av)
            if abs(r[1, 1]) <= 1e-14 * max(abs(r[0, 0]), 1e-300):
                # collapsed second direction: re-seed it and reorthogonalize
                q[:, 1] = rng.normal(size=n)
                q[:, 1] -= q[:, 0] * (q[:, 0] @ q[:, 1])
                nrm = np.linalg.norm(q[:, 1])
                if nrm > 0:
                    q[:, 1] /= nrm
            v = q
    raise ConvergenceError(
        f"spectral radius did not converge within {max_iter} iterations "
        f"(best estimate {best:.6g})",
        best,
    )


def largest_singular_value(w) -> float:
    """Optional stability diagnostic; an upper bound proxy for the radius."""
    if sp.issparse(w):
        return float(sp.linalg.svds(w.astype(float), k=1, return_singular_vectors=False)[0])
    return float(np.linalg.norm(np.asarray(w, dtype=float), 2))


def init_weights(hp: EsnHyperParams) -> EsnWeights:
    """Random W_in and sparse W, W rescaled to the requested spectral radius.

    Entries are uniform on (-0.5, 0.5). A draw whose spectral radius is
    numerically zero (possible for very sparse small matrices) is retried
    with a derived sub-seed.
    """
    n, m = hp.n_nodes, hp.input_dim
    for attempt in range(_INIT_ATTEMPTS):
        rng = np.random.default_rng([hp.seed, attempt])
        w_in = rng.uniform(-0.5, 0.5, size=(n, 1 + m))
        w = sp.random(
            n,
            n,
            density=hp.density,
            random_state=rng,
            data_rvs=lambda k: rng.uniform(-0.5, 0.5, size=k),
            format="csr",
        )
        try:
            rho = spectral_radius(w, seed=hp.seed)
        except ConvergenceError:
            # near-tied top moduli: the radius cannot be certified, so the
            # rescale cannot be trusted; treat the draw as degenerate
            continue
        if rho > 1e-12:
            w = w * (hp.spectral_radius / rho)
            return EsnWeights(w_in=w_in, w=w)
    raise ReservoirInitError(
        f"{_INIT_ATTEMPTS} consecutive draws had zero or uncertifiable "
        f"spectral radius (n_nodes={n}, density={hp.density})"
    )


def _as_input_array(inputs, m: int) -> np.ndarray:
    vals = inputs.values if isinstance(inputs, TimeSeries) else np.asarray(inputs, float)
    if vals.ndim == 1:
        vals = vals[:, None]
    if vals.ndim != 2 or vals.shape[1] != m:
        raise ValueError(f"inputs must be (T, {m}), got {vals.shape}")
    return vals


def update_state(
    x: np.ndarray,
    u,
    weights: EsnWeights,
    leak: float,
    activation=np.tanh,
) -> np.ndarray:
    """One step of the leaky reservoir map."""
    x = np.asarray(x, dtype=float)
    u = np.atleast_1d(np.asarray(u, dtype=float))
    n, m = weights.n_nodes, weights.input_dim
    if x.shape != (n,):
        raise ValueError(f"state must have shape ({n},), got {x.shape}")
    if u.shape != (m,):
        raise ValueError(f"input must have shape ({m},), got {u.shape}")
    pre = weights.w_in[:, 0] + weights.w_in[:, 1:] @ u + weights.w @ x
    return (1.0 - leak) * x + leak * activation(pre)


def _drive_chunks(weights, u_vals, x0, leak, activation, chunk=_DRIVE_CHUNK):
    """Yield (start_index, states_chunk); states row t is x after input t."""
    n = weights.n_nodes
    x = np.zeros(n) if x0 is None else np.asarray(x0, dtype=float).copy()
    if x.shape != (n,):
        raise ValueError(f"x0 must have shape ({n},), got {x.shape}")
    w, w_in = weights.w, weights.w_in
    for start in range(0, len(u_vals), chunk):
        block = u_vals[start : start + chunk]
        # W_in @ (1, u(t)) for the whole block in one product
        pre_in = w_in[:, 0] + block @ w_in[:, 1:].T
        out = np.empty((len(block), n))
        for i in range(len(block)):
            x = (1.0 - leak) * x + leak * activation(pre_in[i] + w @ x)
            out[i] = x
        yield start, out


def drive(
    weights: EsnWeights,
    inputs,
    x0: np.ndarray | None = None,
    *,
    leak: float,
    activation=np.tanh,
) -> np.ndarray:
    """Run the reservoir over a teacher sequence; returns all T states, (T, N)."""
    u_vals = _as_input_array(inputs, weights.input_dim)
    if len(u_vals) == 0:
        raise ValueError("inputs must be nonempty")
    states = np.empty((len(u_vals), weights.n_nodes))
    for start, block in _drive_chunks(weights, u_vals, x0, leak, activation):
        states[start : start + len(block)] = block
    return states


def washout_init(weights: EsnWeights, warmup, *, leak: float) -> np.ndarray:
    """Forget the arbitrary zero start by driving through a warmup segment."""
    u_vals = _as_input_array(warmup, weights.input_dim)
    if len(u_vals) < 1:
        raise ValueError("warmup must contain at least one sample")
    last = None
    for _, block in _drive_chunks(weights, u_vals, None, leak, np.tanh):
        last = block[-1]
    return last


def train(
    weights: EsnWeights,
    inputs,
    targets,
    hp: EsnHyperParams,
    x0: np.ndarray | None = None,
) -> TrainResult:
    """Fit the readout by ridge regression over the driven state sequence.

    Accumulates the Gram system chunkwise, solves the symmetric positive
    definite system by Cholesky factorization, then re-drives once more for
    an exact (cancellation-free) training MSE.
    """
    u_vals = _as_input_array(inputs, weights.input_dim)
    y_vals = targets.values if isinstance(targets, TimeSeries) else np.asarray(targets, float)
    if y_vals.ndim == 1:
        y_vals = y_vals[:, None]
    if len(u_vals) != len(y_vals):
        raise ValueError(
            f"inputs and targets must have equal length, got {len(u_vals)} != {len(y_vals)}"
        )
    if y_vals.shape[1] != hp.output_dim:
        raise ValueError(
            f"targets must have {hp.output_dim} channels, got {y_vals.shape[1]}"
        )
    T = len(u_vals)
    k = 1 + weights.input_dim + weights.n_nodes
    if hp.ridge == 0.0 and T < k:
        raise TrainingError(
            f"normal equations are singular with {T} samples for {k} "
            "features; set ridge > 0"
        )

    # Accumulate per output row (not one matrix product over all rows) so a
    # given target channel sees the same arithmetic whatever l is; the first
    # readout row then agrees exactly between full- and partial-output fits.
    a = np.zeros((k, k))
    b = np.zeros((hp.output_dim, k))
    for start, block in _drive_chunks(weights, u_vals, x0, hp.leak, np.tanh):
        xc = np.empty((len(block), k))
        xc[:, 0] = 1.0
        xc[:, 1 : 1 + weights.input_dim] = u_vals[start : start + len(block)]
        xc[:, 1 + weights.input_dim :] = block
        a += xc.T @ xc
        for j in range(hp.output_dim):
            b[j] += y_vals[start : start + len(block), j] @ xc
    a[np.diag_indices_from(a)] += hp.ridge

    try:
        factor = cho_factor(a, lower=True)
    except np.linalg.LinAlgError as exc:
        raise TrainingError(
            f"normal equations are singular ({exc}); set ridge > 0"
        ) from None
    w_out = np.stack([cho_solve(factor, b[j]) for j in range(hp.output_dim)])

    sse = 0.0
    for start, block in _drive_chunks(weights, u_vals, x0, hp.leak, np.tanh):
        xc = np.empty((len(block), k))
        xc[:, 0] = 1.0
        xc[:, 1 : 1 + weights.input_dim] = u_vals[start : start + len(block)]
        xc[:, 1 + weights.input_dim :] = block
        resid = xc @ w_out.T - y_vals[start : start + len(block)]
        sse += float(np.sum(resid * resid))
    mse = sse / (T * hp.output_dim)
    return TrainResult(weights.with_readout(w_out), mse, T)


def readout(weights: EsnWeights, u, x: np.ndarray) -> np.ndarray:
    """One readout evaluation, y = W_out (1, u, x)."""
    if weights.w_out is None:
        raise NotTrainedError("readout weights absent; train the model first")
    u = np.atleast_1d(np.asarray(u, dtype=float))
    x = np.asarray(x, dtype=float)
    feat = np.concatenate(([1.0], u, x))
    if feat.shape[0] != weights.w_out.shape[1]:
        raise ValueError(
            f"feature vector length {feat.shape[0]} does not match readout "
            f"width {weights.w_out.shape[1]}"
        )
    return weights.w_out @ feat


def predict_autonomous(
    weights: EsnWeights,
    u_start,
    x_start: np.ndarray,
    n_steps: int,
    *,
    leak: float,
    bound: float = DEFAULT_DIVERGENCE_BOUND,
    dt: float = 1.0,
    channels: tuple[str, ...] | None = None,
    t0: float = 0.0,
) -> TimeSeries:
    """Closed-loop rollout: the first m readout components become the next input.

    No external data is consumed after the start pair (u_start, x_start).
    """
    if weights.w_out is None:
        raise NotTrainedError("cannot predict with an untrained model")
    if n_steps < 1:
        raise ValueError(f"n_steps must be >= 1, got {n_steps}")
    m = weights.input_dim
    l = weights.w_out.shape[0]
    if l < m:
        raise ValueError(
            f"readout produces {l} channels but the loop must feed back {m}"
        )
    u = np.atleast_1d(np.asarray(u_start, dtype=float)).copy()
    if u.shape != (m,):
        raise ValueError(f"u_start must have shape ({m},), got {u.shape}")
    x = np.asarray(x_start, dtype=float).copy()
    w, w_in, w_out = weights.w, weights.w_in, weights.w_out
    out = np.empty((n_steps, l))
    for t in range(n_steps):
        x = (1.0 - leak) * x + leak * np.tanh(w_in[:, 0] + w_in[:, 1:] @ u + w @ x)
        y = w_out[:, 0] + w_out[:, 1 : 1 + m] @ u + w_out[:, 1 + m :] @ x
        if not np.all(np.isfinite(y)) or np.max(np.abs(y)) > bound:
            raise PredictionDivergedError(
                f"prediction exceeded bound {bound:g} at step {t}",
                steps_completed=t,
                partial=out[:t].copy(),
            )
        out[t] = y
        u = y[:m]
    if channels is None:
        channels = tuple(f"y{i + 1}" for i in range(l))
    return TimeSeries(out, dt, channels, t0=t0)

