"""Comparison measures for chaotic time series.

Cumulative mean-squared-error curves and the prediction horizons derived
from them, the Rosenstein largest-Lyapunov-exponent estimator, the 0-1
test for chaos, sample entropy, Gaussian kernel density estimates, and
divergence times between trajectory pairs.

All operations are pure functions of their inputs; nothing here mutates
a TimeSeries or keeps hidden state, so everything is safe to call from
worker processes.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .timeseries import TimeSeries

#: Marker value for a horizon/divergence threshold that is never exceeded.
NEVER_CROSSED = math.inf


class MetricError(RuntimeError):
    """A metric could not be computed from the data supplied."""


class InsufficientDataError(MetricError):
    """The series is too short for the requested computation."""


class NoValidNeighborsError(MetricError):
    """No embedded point has a neighbor outside the temporal exclusion window."""


class UndefinedEntropyError(MetricError):
    """Sample entropy is undefined because no template pairs matched."""


class DegenerateSeriesError(MetricError):
    """The series is constant (zero variance) where variation is required."""


def _single_channel(series: TimeSeries, what: str) -> np.ndarray:
    if series.n_channels != 1:
        raise ValueError(
            f"{what} needs a single-channel series, got {series.n_channels} channels"
        )
    return series.values[:, 0]


# ---------------------------------------------------------------------------
# Cumulative MSE and prediction horizons
# ---------------------------------------------------------------------------


def mse_curve(target: TimeSeries, pred: TimeSeries) -> TimeSeries:
    """Cumulative mean squared error between two equally sampled series.

    The value at step T' (1-indexed) is the squared error summed over all
    samples up to and including T', divided by T' times the channel count.
    Returned as a single-channel series on the target's time grid.
    """
    if len(target) != len(pred):
        raise ValueError(f"length mismatch: target {len(target)}, pred {len(pred)}")
    if target.n_channels != pred.n_channels:
        raise ValueError(
            f"channel count mismatch: target {target.n_channels}, "
            f"pred {pred.n_channels}"
        )
    if not math.isclose(target.dt, pred.dt, rel_tol=1e-9):
        raise ValueError(f"dt mismatch: target {target.dt}, pred {pred.dt}")
    diff = target.values - pred.values
    sq = np.einsum("ij,ij->i", diff, diff)
    t_norm = np.arange(1, len(target) + 1, dtype=float) * target.n_channels
    curve = np.cumsum(sq) / t_norm
    return TimeSeries(values=curve, dt=target.dt, channels=("mse",), t0=target.t0)


@dataclass(frozen=True)
class PhSample:
    """One prediction-horizon measurement for one test initial condition.

    ``value`` is the horizon in Lyapunov-time units, or ``math.inf`` when
    the error curve never exceeds the threshold.
    """

    value: float
    threshold: float
    ic_index: int = 0

    def __post_init__(self):
        if not self.threshold > 0:
            raise ValueError(f"threshold must be positive, got {self.threshold}")
        if math.isnan(self.value) or not self.value > 0:
            raise ValueError(f"horizon must be positive or inf, got {self.value}")

    @property
    def crossed(self) -> bool:
        return math.isfinite(self.value)


def prediction_horizon(
    target: TimeSeries,
    pred: TimeSeries,
    r: float,
    *,
    mle: float,
    ic_index: int = 0,
) -> PhSample:
    """First time the cumulative MSE exceeds ``r``, in Lyapunov units.

    The crossing step is converted to Lyapunov time via the supplied
    largest Lyapunov exponent ``mle`` (time unit: 1/mle). Only the first
    exceedance counts, even if the cumulative curve later dips back below
    the threshold. Returns a never-crossed sample when no step exceeds r.
    """
    if not r > 0:
        raise ValueError(f"threshold r must be positive, got {r}")
    if not mle > 0:
        raise ValueError(f"mle must be positive, got {mle}")
    curve = mse_curve(target, pred).values[:, 0]
    above = np.nonzero(curve > r)[0]
    if above.size == 0:
        return PhSample(value=NEVER_CROSSED, threshold=r, ic_index=ic_index)
    steps = int(above[0]) + 1  # curve index 0 is step 1
    return PhSample(value=steps * target.dt * mle, threshold=r, ic_index=ic_index)


def count_never_crossed(samples) -> int:
    """Number of samples whose threshold was never exceeded."""
    return sum(1 for s in samples if not s.crossed)


def median_ph(samples) -> float:
    """Median horizon over an ensemble, never-crossed samples counted as +inf.

    Infinite samples can only raise the median; the caller reports their
    count separately via count_never_crossed.
    """
    values = [s.value for s in samples]
    if not values:
        raise ValueError("median_ph needs at least one sample")
    if not any(math.isfinite(v) for v in values):
        raise ValueError("median_ph needs at least one finite sample")
    return float(np.median(values))


def divergence_time(a: TimeSeries, b: TimeSeries, r: float, *, mle: float) -> float:
    """First time the cumulative mean squared distance between two
    trajectories exceeds ``r``, in Lyapunov units.

    Applies the same cumulative functional as mse_curve to the pair, so
    the result is directly comparable with prediction horizons. Returns
    ``math.inf`` when the threshold is never exceeded.
    """
    return prediction_horizon(a, b, r, mle=mle).value


# ---------------------------------------------------------------------------
# Largest Lyapunov exponent (Rosenstein estimator)
# ---------------------------------------------------------------------------


def _delay_embed(x: np.ndarray, embed_dim: int, delay: int) -> np.ndarray:
    """Rows are (x[i], x[i+delay], ..., x[i+(embed_dim-1)*delay])."""
    n_points = x.size - (embed_dim - 1) * delay
    if n_points < 2:
        raise InsufficientDataError(
            f"series of length {x.size} too short to embed with "
            f"embed_dim={embed_dim}, delay={delay}"
        )
    return np.stack([x[k * delay : k * delay + n_points] for k in range(embed_dim)], axis=1)


def autocorr_decay_lag(x: np.ndarray, threshold: float = 1.0 / math.e) -> int:
    """Smallest lag at which the autocorrelation drops below ``threshold``."""
    x = np.asarray(x, dtype=float)
    x = x - x.mean()
    denom = float(x @ x)
    if denom == 0.0:
        raise DegenerateSeriesError("autocorrelation undefined for a constant series")
    n_fft = 1 << int(np.ceil(np.log2(2 * x.size)))
    spec = np.fft.rfft(x, n_fft)
    acf = np.fft.irfft(spec * np.conj(spec), n_fft)[: x.size] / denom
    below = np.nonzero(acf < threshold)[0]
    if below.size == 0:
        return max(1, x.size // 10)
    return max(1, int(below[0]))


def mean_period_steps(x: np.ndarray) -> int:
    """Mean period of the signal in sample steps.

    Reciprocal of the power-weighted mean frequency of the spectrum
    (DC excluded), the usual temporal-exclusion window for
    nearest-neighbor Lyapunov estimators.
    """
    x = np.asarray(x, dtype=float)
    x = x - x.mean()
    power = np.abs(np.fft.rfft(x)) ** 2
    freqs = np.fft.rfftfreq(x.size)
    total = float(power[1:].sum())
    if total == 0.0:
        raise DegenerateSeriesError("mean period undefined for a constant series")
    f_mean = float((freqs[1:] * power[1:]).sum()) / total
    return max(1, int(round(1.0 / f_mean)))


def _nearest_excluded(points: np.ndarray, exclusion: int) -> tuple[np.ndarray, np.ndarray]:
    """Nearest neighbor of each point with index separation > exclusion.

    Returns (indices, neighbor) arrays restricted to the points for which
    such a neighbor exists; raises if none do.
    """
    n = points.shape[0]
    tree = cKDTree(points)
    neighbor = np.full(n, -1, dtype=np.int64)
    unresolved = np.arange(n)
    k = 2
    while unresolved.size and k <= 4096:
        k = min(k, n)
        _, idx = tree.query(points[unresolved], k=k)
        separation = np.abs(idx - unresolved[:, None])
        idx = np.where(separation > exclusion, idx, -1)
        first_ok = np.argmax(idx >= 0, axis=1)
        found = idx[np.arange(unresolved.size), first_ok]
        ok = found >= 0
        neighbor[unresolved[ok]] = found[ok]
        unresolved = unresolved[~ok]
        if k == n:
            break
        k *= 4
    resolved = np.nonzero(neighbor >= 0)[0]
    if resolved.size == 0:
        raise NoValidNeighborsError(
            f"no neighbor pairs with temporal separation > {exclusion} steps"
        )
    return resolved, neighbor[resolved]


def divergence_curve(
    x: np.ndarray,
    *,
    embed_dim: int,
    delay: int,
    mean_period: int,
    n_steps: int,
) -> np.ndarray:
    """Mean log separation of nearest-neighbor pairs after 0..n_steps steps.

    The workhorse of the Rosenstein estimator, exposed separately so the
    fit window can be inspected and calibrated. Entry i is the average of
    ln ||Y(j+i) - Y(nn(j)+i)|| over all tracked pairs still inside the
    series; pairs at exactly zero separation are excluded from the mean.
    """
    points = _delay_embed(x, embed_dim, delay)
    n_points = points.shape[0]
    if n_steps >= n_points - 1:
        raise InsufficientDataError(
            f"divergence over {n_steps} steps needs more than {n_steps + 1} "
            f"embedded points, have {n_points}"
        )
    ref, nn = _nearest_excluded(points, exclusion=mean_period)
    curve = np.empty(n_steps + 1)
    for i in range(n_steps + 1):
        keep = (ref + i < n_points) & (nn + i < n_points)
        if not np.any(keep):
            raise InsufficientDataError(
                f"all neighbor pairs leave the series before step {i}"
            )
        gap = points[ref[keep] + i] - points[nn[keep] + i]
        dist = np.sqrt(np.einsum("ij,ij->i", gap, gap))
        dist = dist[dist > 0.0]
        if dist.size == 0:
            raise NoValidNeighborsError(
                f"all neighbor pairs at zero separation at step {i}"
            )
        curve[i] = float(np.mean(np.log(dist)))
    return curve


def _fit_slope(times: np.ndarray, values: np.ndarray) -> float:
    t = times - times.mean()
    return float((t @ (values - values.mean())) / (t @ t))


def mle_rosenstein(
    series: TimeSeries,
    embed_dim: int = 3,
    delay: int | None = None,
    mean_period: int | None = None,
    fit_window: int | None = None,
) -> float:
    """Largest Lyapunov exponent of a scalar series, in 1/time units.

    Delay-embeds the signal, pairs each point with its nearest neighbor
    outside a temporal exclusion window, and fits a line to the mean log
    separation over the fit window; the slope is the exponent.

    Unspecified parameters fall back to standard choices: delay = first
    1/e autocorrelation crossing, mean_period = mean period of the power
    spectrum, fit_window = the first 1.5 Lyapunov times of the divergence
    curve (found self-consistently).
    """
    x = _single_channel(series, "mle_rosenstein")
    if np.std(x) == 0.0:
        raise DegenerateSeriesError("Lyapunov exponent undefined for a constant series")
    if delay is None:
        delay = autocorr_decay_lag(x)
    if mean_period is None:
        mean_period = mean_period_steps(x)
    if delay < 1 or mean_period < 1:
        raise ValueError("delay and mean_period must be >= 1 step")
    n_points = x.size - (embed_dim - 1) * delay
    max_steps = max(8, n_points // 4) if fit_window is None else int(fit_window)
    max_steps = min(max_steps, 1000, n_points - 2)
    if fit_window is not None and fit_window > max_steps:
        raise InsufficientDataError(
            f"fit_window={fit_window} exceeds usable curve length {max_steps}"
        )
    if max_steps < 2:
        raise InsufficientDataError("series too short for a divergence fit")
    curve = divergence_curve(
        x, embed_dim=embed_dim, delay=delay, mean_period=mean_period, n_steps=max_steps
    )
    times = np.arange(max_steps + 1) * series.dt

    if fit_window is not None:
        return _fit_slope(times[: fit_window + 1], curve[: fit_window + 1])

    # Self-consistent window, seeded where the curve reaches half of its
    # total rise (the saturated tail would otherwise flatten the fit):
    # fit, infer 1.5 Lyapunov times, refit until the window is stable.
    rise = float(curve.max() - curve[0])
    if rise <= 0.0:
        return _fit_slope(times, curve)
    window = int(np.argmax(curve >= curve[0] + 0.5 * rise))
    window = min(max(window, 4), max_steps)
    for _ in range(10):
        lam = _fit_slope(times[: window + 1], curve[: window + 1])
        if lam <= 0.0:
            return _fit_slope(times, curve)
        new_window = int(round(1.5 / (lam * series.dt)))
        new_window = min(max(new_window, 4), max_steps)
        if new_window == window:
            return lam
        window = new_window
    return _fit_slope(times[: window + 1], curve[: window + 1])


# ---------------------------------------------------------------------------
# 0-1 test for chaos
# ---------------------------------------------------------------------------


def _msd_curve(phi: np.ndarray, c: float, n_cut: int) -> np.ndarray:
    """Mean square displacement of the (p_c, q_c) translation variables
    for displacements n = 1..n_cut, with the oscillatory term removed."""
    t = phi.size
    steps = np.arange(1, t + 1, dtype=float)
    p = np.cumsum(phi * np.cos(steps * c))
    q = np.cumsum(phi * np.sin(steps * c))

    # sum_j p_j * p_{j+n} for all n at once, via FFT autocorrelation.
    n_fft = 1 << int(np.ceil(np.log2(2 * t)))
    cross = np.zeros(n_cut + 1)
    sq_tail = np.zeros((2, n_cut + 1))
    sq_head = np.zeros((2, n_cut + 1))
    for row, series in enumerate((p, q)):
        spec = np.fft.rfft(series, n_fft)
        cross += np.fft.irfft(spec * np.conj(spec), n_fft)[: n_cut + 1]
        csum = np.concatenate(([0.0], np.cumsum(series * series)))
        n = np.arange(n_cut + 1)
        sq_tail[row] = csum[t] - csum[n]   # sum of series[j]^2 for j > n
        sq_head[row] = csum[t - n]         # sum of series[j]^2 for j <= t-n
    n = np.arange(1, n_cut + 1)
    total = (
        sq_tail[0, 1:] + sq_head[0, 1:] + sq_tail[1, 1:] + sq_head[1, 1:]
        - 2.0 * cross[1:]
    )
    msd = total / (t - n)
    osc = float(phi.mean()) ** 2 * (1.0 - np.cos(n * c)) / (1.0 - math.cos(c))
    return msd - osc


def k_statistic(phi: np.ndarray, c: float, n_cut: int | None = None) -> float:
    """Growth-rate score K(c) for one frequency: the correlation between
    the displacement index n and the modified mean square displacement."""
    phi = np.asarray(phi, dtype=float)
    if n_cut is None:
        n_cut = phi.size // 10
    if n_cut < 2:
        raise InsufficientDataError("0-1 test needs at least 20 samples")
    msd = _msd_curve(phi, c, n_cut)
    n = np.arange(1, n_cut + 1, dtype=float)
    dn = n - n.mean()
    dm = msd - msd.mean()
    denom = math.sqrt(float(dn @ dn) * float(dm @ dm))
    if denom == 0.0:
        raise DegenerateSeriesError("mean square displacement has zero variance")
    return float(dn @ dm) / denom


def zero_one_test(series: TimeSeries, n_c: int = 100, seed: int = 0) -> float:
    """0-1 test for chaos: median growth rate K_c of the mean square
    displacement over n_c random frequencies c in (pi/5, 4*pi/5).

    Values near 1 indicate chaotic dynamics, near 0 regular dynamics.
    """
    if n_c < 10:
        raise ValueError(f"n_c must be >= 10, got {n_c}")
    phi = _single_channel(series, "zero_one_test")
    if np.std(phi) == 0.0:
        raise DegenerateSeriesError("0-1 test undefined for a constant series")
    rng = np.random.default_rng(seed)
    cs = rng.uniform(math.pi / 5.0, 4.0 * math.pi / 5.0, size=n_c)
    ks = [k_statistic(phi, c) for c in cs]
    return float(np.median(ks))


# ---------------------------------------------------------------------------
# Sample entropy
# ---------------------------------------------------------------------------


def sample_entropy(series: TimeSeries, m_len: int = 2, r_tol: float = 0.2) -> float:
    """Sample entropy: -ln of the conditional probability that template
    sequences matching for m_len points still match at the next point.

    A match is a Chebyshev distance within r_tol times the series standard
    deviation; self-matches are excluded. Both template lengths use the
    same number of templates (the canonical estimator).
    """
    if m_len < 1:
        raise ValueError(f"m_len must be >= 1, got {m_len}")
    if not r_tol > 0:
        raise ValueError(f"r_tol must be positive, got {r_tol}")
    x = _single_channel(series, "sample_entropy")
    if x.size <= m_len + 1:
        raise InsufficientDataError(
            f"sample entropy with m_len={m_len} needs more than {m_len + 1} samples"
        )
    radius = r_tol * float(np.std(x))
    n_templates = x.size - m_len

    def matched_pairs(length: int) -> int:
        templates = np.stack(
            [x[k : k + n_templates] for k in range(length)], axis=1
        )
        tree = cKDTree(templates)
        ordered = tree.count_neighbors(tree, radius, p=np.inf)
        return (int(ordered) - n_templates) // 2

    b = matched_pairs(m_len)
    if b == 0:
        raise UndefinedEntropyError("no template pairs match at length m_len")
    a = matched_pairs(m_len + 1)
    if a == 0:
        raise UndefinedEntropyError("no template pairs match at length m_len + 1")
    return -math.log(a / b)


# ---------------------------------------------------------------------------
# Kernel density estimation
# ---------------------------------------------------------------------------


def silverman_bandwidth(x: np.ndarray) -> float:
    """Silverman's rule of thumb: 0.9 min(std, IQR/1.34) n^(-1/5)."""
    x = np.asarray(x, dtype=float)
    std = float(np.std(x))
    q75, q25 = np.percentile(x, [75.0, 25.0])
    iqr = float(q75 - q25)
    scale = min(std, iqr / 1.34) if iqr > 0 else std
    if scale == 0.0:
        raise DegenerateSeriesError(
            "automatic bandwidth undefined for a zero-variance series"
        )
    return 0.9 * scale * x.size ** (-0.2)


def kde_grid(series: TimeSeries, n_points: int = 512, pad: float = 4.0) -> np.ndarray:
    """Evaluation grid spanning the data range plus ``pad`` bandwidths on
    each side, wide enough for the density to integrate to one."""
    x = _single_channel(series, "kde_grid")
    h = silverman_bandwidth(x)
    return np.linspace(float(x.min()) - pad * h, float(x.max()) + pad * h, n_points)


def kde(
    series: TimeSeries,
    grid: np.ndarray,
    bandwidth: float | str = "auto",
) -> np.ndarray:
    """Gaussian kernel density of a scalar series evaluated on ``grid``.

    bandwidth "auto" applies Silverman's rule. The density is nonnegative
    by construction; on a grid that covers the data with a few bandwidths
    of margin, it integrates to one.
    """
    x = _single_channel(series, "kde")
    grid = np.asarray(grid, dtype=float)
    if grid.ndim != 1 or grid.size < 2:
        raise ValueError("grid must be a 1-D array with at least two points")
    if isinstance(bandwidth, str):
        if bandwidth != "auto":
            raise ValueError(f"bandwidth must be a positive scalar or 'auto', got {bandwidth!r}")
        h = silverman_bandwidth(x)
    else:
        h = float(bandwidth)
        if not h > 0:
            raise ValueError(f"bandwidth must be positive, got {bandwidth}")
    norm = 1.0 / (x.size * h * math.sqrt(2.0 * math.pi))
    density = np.zeros(grid.size)
    chunk = max(1, 8_000_000 // max(grid.size, 1))
    for start in range(0, x.size, chunk):
        z = (grid[None, :] - x[start : start + chunk, None]) / h
        density += np.exp(-0.5 * z * z).sum(axis=0)
    return norm * density


# ---------------------------------------------------------------------------
# Report container
# ---------------------------------------------------------------------------

#: Tolerance on the trapezoid integral of every stored KDE curve.
KDE_NORMALIZATION_TOL = 1e-3


@dataclass(frozen=True)
class KdeCurve:
    """Density curve for one channel: density[i] estimated at grid[i]."""

    channel: str
    grid: np.ndarray
    density: np.ndarray

    def __post_init__(self):
        grid = np.asarray(self.grid, dtype=float)
        density = np.asarray(self.density, dtype=float)
        if grid.ndim != 1 or grid.shape != density.shape or grid.size < 2:
            raise ValueError("grid and density must be equal-length 1-D arrays")
        if np.any(density < 0):
            raise ValueError(f"kde density for {self.channel!r} has negative values")
        integral = float(np.trapezoid(density, grid))
        if abs(integral - 1.0) > KDE_NORMALIZATION_TOL:
            raise ValueError(
                f"kde density for {self.channel!r} integrates to {integral}, "
                f"expected 1 +/- {KDE_NORMALIZATION_TOL}"
            )
        grid.setflags(write=False)
        density.setflags(write=False)
        object.__setattr__(self, "grid", grid)
        object.__setattr__(self, "density", density)

    @property
    def integral(self) -> float:
        return float(np.trapezoid(self.density, self.grid))


@dataclass(frozen=True)
class MetricsReport:
    """Bundle of long-run statistics for one series, plus any
    prediction-horizon samples collected against it."""

    mle: float
    sample_entropy: float
    k_c: float
    kde: tuple[KdeCurve, ...] = ()
    ph_samples: tuple[PhSample, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "kde", tuple(self.kde))
        object.__setattr__(self, "ph_samples", tuple(self.ph_samples))
        for curve in self.kde:
            if not isinstance(curve, KdeCurve):
                raise TypeError("kde entries must be KdeCurve instances")
        for sample in self.ph_samples:
            if not isinstance(sample, PhSample):
                raise TypeError("ph_samples entries must be PhSample instances")

    def to_dict(self) -> dict:
        return {
            "mle": self.mle,
            "sample_entropy": self.sample_entropy,
            "k_c": self.k_c,
            "kde": [
                {
                    "channel": c.channel,
                    "grid": c.grid.tolist(),
                    "density": c.density.tolist(),
                }
                for c in self.kde
            ],
            "ph_samples": [
                {
                    "value": s.value if s.crossed else "never-crossed",
                    "threshold": s.threshold,
                    "ic_index": s.ic_index,
                }
                for s in self.ph_samples
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, doc: dict) -> "MetricsReport":
        kde_curves = tuple(
            KdeCurve(
                channel=entry["channel"],
                grid=np.asarray(entry["grid"], dtype=float),
                density=np.asarray(entry["density"], dtype=float),
            )
            for entry in doc.get("kde", ())
        )
        samples = tuple(
            PhSample(
                value=NEVER_CROSSED if entry["value"] == "never-crossed" else float(entry["value"]),
                threshold=float(entry["threshold"]),
                ic_index=int(entry["ic_index"]),
            )
            for entry in doc.get("ph_samples", ())
        )
        return cls(
            mle=float(doc["mle"]),
            sample_entropy=float(doc["sample_entropy"]),
            k_c=float(doc["k_c"]),
            kde=kde_curves,
            ph_samples=samples,
        )

    @classmethod
    def from_json(cls, text: str) -> "MetricsReport":
        return cls.from_dict(json.loads(text))


def write_kde_csv(curves, path) -> None:
    """One file per call: channel,grid,density rows for every curve."""
    with open(path, "w", newline="") as handle:
        handle.write("channel,grid,density\n")
        for curve in curves:
            for g, d in zip(curve.grid, curve.density):
                handle.write(f"{curve.channel},{g:.17g},{d:.17g}\n")


def write_ph_csv(samples, path) -> None:
    """Rows of ic_index,r,ph_lyapunov; never-crossed written as inf."""
    with open(path, "w", newline="") as handle:
        handle.write("ic_index,r,ph_lyapunov\n")
        for s in samples:
            handle.write(f"{s.ic_index},{s.threshold:.17g},{s.value:.17g}\n")
