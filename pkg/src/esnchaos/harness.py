"""Experiment orchestration: config files, end-to-end runs, ensembles.

A single ExperimentConfig describes data source, ESN hyperparameters,
train/test split, evaluation thresholds, and metric settings. From it,
run_experiment produces an ExperimentReport: short-term prediction-horizon
distributions over an ensemble of test initial conditions, and long-run
statistical comparisons (Lyapunov exponent, sample entropy, 0-1 test,
kernel densities) between true and ESN-predicted dynamics.

Reports serialize deterministically: the same config and seed produce a
byte-identical JSON document apart from the timestamp field.
"""
from __future__ import annotations

import dataclasses
import enum
import json
import math
import os
from dataclasses import dataclass, field
from datetime import datetime, timezone

import numpy as np

from . import metrics as met
from .data import (
    DataSource,
    Dataset,
    SplitSpec,
    load_csv,
    simulate_dataset,
    split,
    surrogate_recording,
)
from .metrics import KdeCurve, MetricsReport, PhSample, median_ph, count_never_crossed
from .reservoir import (
    EsnHyperParams,
    EsnModel,
    EsnWeights,
    PredictionDivergedError,
    init_weights,
    predict_autonomous,
    train,
    washout_init,
)
from .systems import (
    ChuaParams,
    LorenzParams,
    SystemKind,
    SystemSpec,
    add_noise,
    integrate_batch,
)
from .timeseries import TimeSeries, write_csv


class ConfigError(ValueError):
    """The experiment configuration document is invalid."""


class ExperimentError(RuntimeError):
    """A pipeline stage failed; carries the stage name for reporting."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"stage {stage!r}: {message}")
        self.stage = stage


class IoMode(enum.Enum):
    """Which state channels the ESN reads and writes.

    Inputs are always the first m channels; outputs the first l; the
    fed-back input channels sit at the front of the output vector.
    """

    PARTIAL_IN_FULL_OUT = "PartialIn-FullOut"
    FULL_IN_FULL_OUT = "FullIn-FullOut"
    PARTIAL_IN_PARTIAL_OUT = "PartialIn-PartialOut"

    def dims(self, n_channels: int) -> tuple[int, int]:
        if self is IoMode.PARTIAL_IN_FULL_OUT:
            return 1, n_channels
        if self is IoMode.FULL_IN_FULL_OUT:
            return n_channels, n_channels
        return 1, 1


# ---------------------------------------------------------------------------
# Metric parameter bundles
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RosensteinParams:
    embed_dim: int = 3
    delay: int | None = None
    mean_period: int | None = None
    fit_window: int | None = None
    stride: int = 1
    max_points: int | None = None


@dataclass(frozen=True)
class ZeroOneParams:
    stride: int = 1
    max_points: int | None = None
    n_c: int = 100
    seed: int = 0


@dataclass(frozen=True)
class SampEnParams:
    m_len: int = 2
    r_tol: float = 0.2
    stride: int = 1
    max_points: int | None = None


@dataclass(frozen=True)
class SurrogateParams:
    """Measurement-chain emulation applied to a simulated source: relative
    sensor noise followed by finite-resolution quantization."""

    noise_rel: float = 0.01
    n_bits: int = 10

    def __post_init__(self):
        if self.noise_rel < 0:
            raise ConfigError(f"noise_rel must be >= 0, got {self.noise_rel}")
        if self.n_bits < 1:
            raise ConfigError(f"n_bits must be >= 1, got {self.n_bits}")


@dataclass(frozen=True)
class MetricParams:
    """How to evaluate the comparison measures for one system.

    lyapunov_ref is the reference largest Lyapunov exponent used to express
    horizons in Lyapunov-time units; stride/max_points resample a series
    before a measure that is sampling-sensitive.
    """

    lyapunov_ref: float
    rosenstein: RosensteinParams = field(default_factory=RosensteinParams)
    zero_one: ZeroOneParams = field(default_factory=ZeroOneParams)
    sample_entropy: SampEnParams = field(default_factory=SampEnParams)
    kde_points: int = 512

    def __post_init__(self):
        if not self.lyapunov_ref > 0:
            raise ConfigError(
                f"lyapunov_ref must be positive, got {self.lyapunov_ref}"
            )
        if self.kde_points < 2:
            raise ConfigError(f"kde_points must be >= 2, got {self.kde_points}")


def _resample(series: TimeSeries, stride: int, max_points: int | None) -> TimeSeries:
    if stride < 1:
        raise ConfigError(f"stride must be >= 1, got {stride}")
    values = series.values[::stride]
    if max_points is not None:
        values = values[:max_points]
    return TimeSeries(values, series.dt * stride, series.channels, series.t0)


def scalar_metrics(series: TimeSeries, params: MetricParams) -> tuple[float, float, float]:
    """MLE, sample entropy, and K_c of one scalar series under the
    configured resampling."""
    ros = params.rosenstein
    mle = met.mle_rosenstein(
        _resample(series, ros.stride, ros.max_points),
        embed_dim=ros.embed_dim,
        delay=ros.delay,
        mean_period=ros.mean_period,
        fit_window=ros.fit_window,
    )
    sen = params.sample_entropy
    sampen = met.sample_entropy(
        _resample(series, sen.stride, sen.max_points),
        m_len=sen.m_len,
        r_tol=sen.r_tol,
    )
    zo = params.zero_one
    k_c = met.zero_one_test(
        _resample(series, zo.stride, zo.max_points), n_c=zo.n_c, seed=zo.seed
    )
    return mle, sampen, k_c


def union_kde_grids(
    series_pairs: dict[str, tuple[np.ndarray, np.ndarray]], n_points: int
) -> dict[str, np.ndarray]:
    """One evaluation grid per channel covering both samples, padded by a
    few bandwidths so each density integrates to one on it."""
    grids = {}
    for channel, (a, b) in series_pairs.items():
        h = max(met.silverman_bandwidth(a), met.silverman_bandwidth(b))
        lo = min(float(a.min()), float(b.min())) - 4.0 * h
        hi = max(float(a.max()), float(b.max())) + 4.0 * h
        grids[channel] = np.linspace(lo, hi, n_points)
    return grids


def metrics_report(
    series: TimeSeries,
    params: MetricParams,
    kde_grids: dict[str, np.ndarray],
    ph_samples=(),
) -> MetricsReport:
    """Table-style metrics for one series: scalar measures on the first
    channel, a density curve per channel on the supplied grids."""
    first = series.select(series.channels[:1])
    mle, sampen, k_c = scalar_metrics(first, params)
    curves = []
    for channel in series.channels:
        grid = kde_grids[channel]
        density = met.kde(series.select((channel,)), grid)
        curves.append(KdeCurve(channel=channel, grid=grid, density=density))
    return MetricsReport(
        mle=mle,
        sample_entropy=sampen,
        k_c=k_c,
        kde=tuple(curves),
        ph_samples=tuple(ph_samples),
    )


def kde_l1_distance(a: KdeCurve, b: KdeCurve) -> float:
    """L1 distance between two densities evaluated on the same grid."""
    if a.grid.shape != b.grid.shape or not np.array_equal(a.grid, b.grid):
        raise ValueError("KDE curves must share a grid for an L1 distance")
    return float(np.trapezoid(np.abs(a.density - b.density), a.grid))


# ---------------------------------------------------------------------------
# Experiment configuration
# ---------------------------------------------------------------------------

DEFAULT_THRESHOLDS = (0.01, 0.1, 0.3)
DEFAULT_NOISE_LEVELS = (0.0, 0.01, 0.05, 0.1, 0.2)

_SYSTEM_PARAM_TYPES = {SystemKind.LORENZ63: LorenzParams, SystemKind.CHUA: ChuaParams}


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything an end-to-end run needs, mirroring the config document."""

    metrics: MetricParams
    system: SystemSpec | None = None
    transient_steps: int = 0
    ic: tuple[float, float, float] | None = None
    surrogate: SurrogateParams | None = None
    dataset_path: str | None = None
    esn: EsnHyperParams = field(default_factory=EsnHyperParams)
    split: SplitSpec = field(default_factory=SplitSpec)
    thresholds: tuple[float, ...] = DEFAULT_THRESHOLDS
    ensemble_size: int = 1000
    noise_levels: tuple[float, ...] = DEFAULT_NOISE_LEVELS
    io_mode: IoMode = IoMode.PARTIAL_IN_FULL_OUT
    seed: int = 0
    prediction_steps: int = 2000
    longrun_steps: int | None = None
    description: str = ""

    def __post_init__(self):
        if (self.system is None) == (self.dataset_path is None):
            raise ConfigError(
                "config must name exactly one data source: a system to "
                "simulate or a dataset path"
            )
        thresholds = tuple(float(r) for r in self.thresholds)
        if not thresholds:
            raise ConfigError("thresholds must be non-empty")
        if any(r <= 0 for r in thresholds):
            raise ConfigError(f"thresholds must be positive, got {thresholds}")
        if list(thresholds) != sorted(thresholds) or len(set(thresholds)) != len(
            thresholds
        ):
            raise ConfigError(f"thresholds must be strictly ascending, got {thresholds}")
        object.__setattr__(self, "thresholds", thresholds)
        if self.ensemble_size < 1:
            raise ConfigError(f"ensemble_size must be >= 1, got {self.ensemble_size}")
        noise = tuple(float(s) for s in self.noise_levels)
        if any(s < 0 for s in noise):
            raise ConfigError(f"noise levels must be >= 0, got {noise}")
        object.__setattr__(self, "noise_levels", noise)
        if self.transient_steps < 0:
            raise ConfigError(
                f"transient_steps must be >= 0, got {self.transient_steps}"
            )
        if self.prediction_steps < 1:
            raise ConfigError(
                f"prediction_steps must be >= 1, got {self.prediction_steps}"
            )
        if self.longrun_steps is not None and self.longrun_steps < 2:
            raise ConfigError(f"longrun_steps must be >= 2, got {self.longrun_steps}")
        if self.ic is not None:
            ic = tuple(float(v) for v in self.ic)
            if len(ic) != 3:
                raise ConfigError(f"ic must have three components, got {self.ic}")
            object.__setattr__(self, "ic", ic)
        if self.surrogate is not None and self.system is None:
            raise ConfigError("surrogate emulation requires a simulated system")


def _require_keys(doc: dict, allowed: set, where: str) -> None:
    unknown = set(doc) - allowed
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")


def _system_from_dict(doc: dict) -> tuple[SystemSpec, tuple | None]:
    _require_keys(doc, {"kind", "dt", "n_steps", "params", "ic"}, "system")
    try:
        kind = SystemKind(doc["kind"])
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"system.kind must be one of "
                          f"{[k.value for k in SystemKind]}: {exc}") from exc
    params = None
    if "params" in doc:
        params_type = _SYSTEM_PARAM_TYPES[kind]
        try:
            params = params_type(**doc["params"])
        except TypeError as exc:
            raise ConfigError(f"system.params invalid for {kind.value}: {exc}") from exc
    try:
        spec = SystemSpec(
            kind=kind,
            params=params,
            dt=float(doc.get("dt", 0.01)),
            n_steps=int(doc.get("n_steps", 1000)),
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    ic = tuple(doc["ic"]) if "ic" in doc else None
    return spec, ic


def _metrics_from_dict(doc: dict) -> MetricParams:
    _require_keys(
        doc,
        {"lyapunov_ref", "rosenstein", "zero_one", "sample_entropy", "kde_points"},
        "metrics",
    )
    if "lyapunov_ref" not in doc:
        raise ConfigError("metrics.lyapunov_ref is required")
    kwargs = {"lyapunov_ref": float(doc["lyapunov_ref"])}
    for name, cls in (
        ("rosenstein", RosensteinParams),
        ("zero_one", ZeroOneParams),
        ("sample_entropy", SampEnParams),
    ):
        if name in doc:
            sub = doc[name]
            _require_keys(
                sub, {f.name for f in dataclasses.fields(cls)}, f"metrics.{name}"
            )
            try:
                kwargs[name] = cls(**sub)
            except TypeError as exc:
                raise ConfigError(f"metrics.{name} invalid: {exc}") from exc
    if "kde_points" in doc:
        kwargs["kde_points"] = int(doc["kde_points"])
    return MetricParams(**kwargs)


_CONFIG_KEYS = {
    "description",
    "system",
    "transient_steps",
    "surrogate",
    "dataset",
    "esn",
    "split",
    "thresholds",
    "ensemble_size",
    "noise_levels",
    "io_mode",
    "seed",
    "prediction_steps",
    "longrun_steps",
    "metrics",
}


def config_from_dict(doc: dict) -> ExperimentConfig:
    """Build a config from a parsed document, rejecting unknown keys so a
    typo cannot silently fall back to a default."""
    if not isinstance(doc, dict):
        raise ConfigError("config document must be a key-value mapping")
    _require_keys(doc, _CONFIG_KEYS, "config")
    if "metrics" not in doc:
        raise ConfigError("config.metrics is required")
    metrics_params = _metrics_from_dict(doc["metrics"])
    system = None
    ic = None
    if "system" in doc:
        system, ic = _system_from_dict(doc["system"])
    surrogate = None
    if "surrogate" in doc:
        _require_keys(doc["surrogate"], {"noise_rel", "n_bits"}, "surrogate")
        try:
            surrogate = SurrogateParams(**doc["surrogate"])
        except TypeError as exc:
            raise ConfigError(f"surrogate: {exc}") from exc
    esn = EsnHyperParams()
    if "esn" in doc:
        _require_keys(
            doc["esn"], {f.name for f in dataclasses.fields(EsnHyperParams)}, "esn"
        )
        try:
            esn = EsnHyperParams(**doc["esn"])
        except ValueError as exc:
            raise ConfigError(f"esn: {exc}") from exc
    split_spec = SplitSpec()
    if "split" in doc:
        _require_keys(doc["split"], {"train_fraction"}, "split")
        try:
            split_spec = SplitSpec(**doc["split"])
        except ValueError as exc:
            raise ConfigError(f"split: {exc}") from exc
    io_mode = IoMode.PARTIAL_IN_FULL_OUT
    if "io_mode" in doc:
        try:
            io_mode = IoMode(doc["io_mode"])
        except ValueError as exc:
            raise ConfigError(
                f"io_mode must be one of {[m.value for m in IoMode]}"
            ) from exc
    try:
        return ExperimentConfig(
            metrics=metrics_params,
            system=system,
            transient_steps=int(doc.get("transient_steps", 0)),
            ic=ic,
            surrogate=surrogate,
            dataset_path=doc.get("dataset"),
            esn=esn,
            split=split_spec,
            thresholds=tuple(doc.get("thresholds", DEFAULT_THRESHOLDS)),
            ensemble_size=int(doc.get("ensemble_size", 1000)),
            noise_levels=tuple(doc.get("noise_levels", DEFAULT_NOISE_LEVELS)),
            io_mode=io_mode,
            seed=int(doc.get("seed", 0)),
            prediction_steps=int(doc.get("prediction_steps", 2000)),
            longrun_steps=(
                int(doc["longrun_steps"]) if doc.get("longrun_steps") is not None else None
            ),
            description=str(doc.get("description", "")),
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def config_to_dict(cfg: ExperimentConfig) -> dict:
    doc: dict = {"description": cfg.description}
    if cfg.system is not None:
        doc["system"] = {
            "kind": cfg.system.kind.value,
            "dt": cfg.system.dt,
            "n_steps": cfg.system.n_steps,
            "params": dataclasses.asdict(cfg.system.params),
        }
        if cfg.ic is not None:
            doc["system"]["ic"] = list(cfg.ic)
    if cfg.surrogate is not None:
        doc["surrogate"] = dataclasses.asdict(cfg.surrogate)
    if cfg.dataset_path is not None:
        doc["dataset"] = cfg.dataset_path
    doc.update(
        {
            "transient_steps": cfg.transient_steps,
            "esn": dataclasses.asdict(cfg.esn),
            "split": {"train_fraction": cfg.split.train_fraction},
            "thresholds": list(cfg.thresholds),
            "ensemble_size": cfg.ensemble_size,
            "noise_levels": list(cfg.noise_levels),
            "io_mode": cfg.io_mode.value,
            "seed": cfg.seed,
            "prediction_steps": cfg.prediction_steps,
            "longrun_steps": cfg.longrun_steps,
            "metrics": {
                "lyapunov_ref": cfg.metrics.lyapunov_ref,
                "rosenstein": dataclasses.asdict(cfg.metrics.rosenstein),
                "zero_one": dataclasses.asdict(cfg.metrics.zero_one),
                "sample_entropy": dataclasses.asdict(cfg.metrics.sample_entropy),
                "kde_points": cfg.metrics.kde_points,
            },
        }
    )
    return doc


def load_config(path) -> ExperimentConfig:
    with open(path) as handle:
        try:
            doc = json.load(handle)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
    return config_from_dict(doc)


PRESET_DIR = os.path.join(os.path.dirname(__file__), "presets")


def preset_names() -> list[str]:
    return sorted(
        name[:-5] for name in os.listdir(PRESET_DIR) if name.endswith(".json")
    )


def load_preset(name: str) -> ExperimentConfig:
    path = os.path.join(PRESET_DIR, f"{name}.json")
    if not os.path.exists(path):
        raise ConfigError(f"no preset {name!r}; available: {preset_names()}")
    return load_config(path)


# ---------------------------------------------------------------------------
# Pipeline stages
# ---------------------------------------------------------------------------


def load_dataset(cfg: ExperimentConfig) -> Dataset:
    if cfg.dataset_path is not None:
        return load_csv(cfg.dataset_path)
    if cfg.surrogate is not None:
        return surrogate_recording(
            cfg.system,
            noise_rel=cfg.surrogate.noise_rel,
            n_bits=cfg.surrogate.n_bits,
            seed=cfg.seed,
            ic=cfg.ic,
            transient_steps=cfg.transient_steps,
        )
    return simulate_dataset(cfg.system, ic=cfg.ic, transient_steps=cfg.transient_steps)


def effective_hyperparams(cfg: ExperimentConfig, n_channels: int) -> EsnHyperParams:
    """The configured hyperparameters with input/output widths set by io_mode."""
    m, l = cfg.io_mode.dims(n_channels)
    return dataclasses.replace(cfg.esn, input_dim=m, output_dim=l)


def train_model(cfg: ExperimentConfig, train_series: TimeSeries) -> EsnModel:
    hp = effective_hyperparams(cfg, train_series.n_channels)
    weights = init_weights(hp)
    inputs = train_series.values[:-1, : hp.input_dim]
    targets = train_series.values[1:, : hp.output_dim]
    result = train(weights, inputs, targets, hp)
    return EsnModel(hp=hp, weights=result.weights, training_mse=result.training_mse)


def _ph_start_indices(
    n_test: int, washout: int, prediction_steps: int, ensemble_size: int, seed: int
) -> np.ndarray:
    """Evenly strided prediction-start indices with a seed-dependent phase.

    Every start has a full washout prefix and prediction window inside the
    test set; starts are distinct.
    """
    first = washout
    last = n_test - prediction_steps - 1
    span = last - first
    if span < ensemble_size - 1:
        raise met.InsufficientDataError(
            f"test set of {n_test} samples cannot carve {ensemble_size} windows "
            f"(washout {washout} + prediction {prediction_steps})"
        )
    # stride >= 1 makes consecutive floored indices distinct, and a phase
    # below one stride keeps the last index within range
    stride = (span + 1) / ensemble_size
    phase = float(np.random.default_rng(seed).uniform(0.0, stride))
    return first + np.floor(phase + stride * np.arange(ensemble_size)).astype(int)


def predict_window(
    model: EsnModel, series: TimeSeries, start: int, n_steps: int
) -> TimeSeries:
    """Closed-loop prediction of series[start+1 .. start+n_steps] after a
    washout on the true samples preceding `start`."""
    hp = model.hp
    warmup = series.values[start - hp.washout : start, : hp.input_dim]
    if warmup.shape[0] < 1:
        x0 = np.zeros(hp.n_nodes)
    else:
        x0 = washout_init(model.weights, warmup, leak=hp.leak)
    u0 = series.values[start, : hp.input_dim]
    channels = series.channels[: hp.output_dim]
    return predict_autonomous(
        model.weights,
        u0,
        x0,
        n_steps,
        leak=hp.leak,
        dt=series.dt,
        channels=channels,
        t0=series.t0 + (start + 1) * series.dt,
    )


def ph_distribution(
    model: EsnModel,
    test_data: Dataset,
    r_list,
    ensemble_size: int,
    seed: int = 0,
    *,
    prediction_steps: int,
    lyapunov_ref: float,
) -> list[PhSample]:
    """One prediction-horizon sample per (initial condition, threshold).

    Initial conditions are evenly strided test-set points, each preceded by
    its own washout window of true data. A prediction that diverges past
    the numeric guard is scored as crossing at the step it diverged.
    """
    series = test_data.series
    hp = model.hp
    r_list = tuple(float(r) for r in r_list)
    starts = _ph_start_indices(
        len(series), hp.washout, prediction_steps, ensemble_size, seed
    )
    samples: list[PhSample] = []
    for ic_index, start in enumerate(starts):
        target = TimeSeries(
            series.values[start + 1 : start + 1 + prediction_steps, : hp.output_dim],
            series.dt,
            series.channels[: hp.output_dim],
        )
        try:
            pred = predict_window(model, series, int(start), prediction_steps)
            n_valid = len(pred)
        except PredictionDivergedError as exc:
            n_valid = exc.steps_completed
            pred = None if n_valid == 0 else TimeSeries(
                exc.partial, series.dt, series.channels[: hp.output_dim]
            )
        for r in r_list:
            if pred is None:
                # diverged on the very first step: the error is beyond any
                # threshold from the start
                samples.append(
                    PhSample(series.dt * lyapunov_ref, r, ic_index=ic_index)
                )
                continue
            sample = met.prediction_horizon(
                TimeSeries(target.values[:n_valid], series.dt, target.channels),
                pred,
                r,
                mle=lyapunov_ref,
                ic_index=ic_index,
            )
            if not sample.crossed and n_valid < prediction_steps:
                # diverged mid-window without crossing yet: the diverging
                # step itself exceeds every threshold
                sample = PhSample(
                    (n_valid + 1) * series.dt * lyapunov_ref, r, ic_index=ic_index
                )
            samples.append(sample)
    return samples


def ph_summary(samples, r_list) -> tuple[dict, dict]:
    """Median horizon and never-crossed count per threshold."""
    medians = {}
    counts = {}
    for r in r_list:
        per_r = [s for s in samples if s.threshold == r]
        medians[r] = median_ph(per_r)
        counts[r] = count_never_crossed(per_r)
    return medians, counts


# ---------------------------------------------------------------------------
# Experiment report
# ---------------------------------------------------------------------------


def _float_key(r: float) -> str:
    # repr is the shortest string that parses back to exactly this float
    return repr(float(r))


@dataclass(frozen=True)
class ExperimentReport:
    """Everything a run produced, serializable as one JSON document."""

    config: dict
    timestamp: str
    training_mse: float
    true_metrics: MetricsReport
    pred_metrics: MetricsReport
    ph_samples: tuple[PhSample, ...]
    ph_medians: dict
    ph_never_crossed: dict
    kde_l1: dict
    longrun_steps: int

    def to_dict(self) -> dict:
        return {
            "config": self.config,
            "timestamp": self.timestamp,
            "training_mse": self.training_mse,
            "true_metrics": self.true_metrics.to_dict(),
            "pred_metrics": self.pred_metrics.to_dict(),
            "ph_samples": [
                {
                    "value": s.value if s.crossed else "never-crossed",
                    "threshold": s.threshold,
                    "ic_index": s.ic_index,
                }
                for s in self.ph_samples
            ],
            "ph_medians": {_float_key(r): v for r, v in self.ph_medians.items()},
            "ph_never_crossed": {
                _float_key(r): n for r, n in self.ph_never_crossed.items()
            },
            "kde_l1": dict(self.kde_l1),
            "longrun_steps": self.longrun_steps,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentReport":
        samples = tuple(
            PhSample(
                value=(
                    math.inf if s["value"] == "never-crossed" else float(s["value"])
                ),
                threshold=float(s["threshold"]),
                ic_index=int(s["ic_index"]),
            )
            for s in doc["ph_samples"]
        )
        return cls(
            config=doc["config"],
            timestamp=doc["timestamp"],
            training_mse=float(doc["training_mse"]),
            true_metrics=MetricsReport.from_dict(doc["true_metrics"]),
            pred_metrics=MetricsReport.from_dict(doc["pred_metrics"]),
            ph_samples=samples,
            ph_medians={float(k): float(v) for k, v in doc["ph_medians"].items()},
            ph_never_crossed={
                float(k): int(v) for k, v in doc["ph_never_crossed"].items()
            },
            kde_l1={k: float(v) for k, v in doc["kde_l1"].items()},
            longrun_steps=int(doc["longrun_steps"]),
        )

    @classmethod
    def from_json(cls, text: str) -> "ExperimentReport":
        return cls.from_dict(json.loads(text))


@dataclass(frozen=True)
class LongRunComparison:
    """Long-run rollout of one trained model against the true attractor."""

    true_metrics: MetricsReport
    pred_metrics: MetricsReport
    kde_l1: dict
    longrun_steps: int
    true_series: TimeSeries
    pred_series: TimeSeries


def evaluate_model(
    cfg: ExperimentConfig,
    model: EsnModel,
    dataset: Dataset,
    test_series: TimeSeries,
) -> LongRunComparison:
    """Roll the model out closed-loop from the start of the test set and
    compare its long-run statistics against the full true series.

    The rollout needs true data only for the washout window, so its length
    defaults to the full dataset length, giving both sides the same amount
    of data; cfg.longrun_steps overrides it.
    """
    try:
        hp = model.hp
        if len(test_series) < hp.washout + 1:
            raise met.InsufficientDataError(
                f"test set of {len(test_series)} samples leaves no room for a "
                f"long-run window after a washout of {hp.washout}"
            )
        longrun_steps = len(dataset.series) - hp.washout - 1
        if cfg.longrun_steps is not None:
            longrun_steps = cfg.longrun_steps
        pred_series = predict_window(model, test_series, hp.washout, longrun_steps)
        # Long-run statistics describe the attractor, not one window, so the
        # reference side uses the whole dataset.
        true_series = dataset.series.select(
            dataset.series.channels[: hp.output_dim]
        )
    except ExperimentError:
        raise
    except Exception as exc:
        raise ExperimentError("longrun", str(exc)) from exc

    try:
        pairs = {
            ch: (true_series.channel(ch), pred_series.channel(ch))
            for ch in pred_series.channels
        }
        grids = union_kde_grids(pairs, cfg.metrics.kde_points)
        true_report = metrics_report(true_series, cfg.metrics, grids)
        pred_report = metrics_report(pred_series, cfg.metrics, grids)
        l1 = {
            ch: kde_l1_distance(a, b)
            for ch, a, b in zip(
                pred_series.channels, true_report.kde, pred_report.kde
            )
        }
    except Exception as exc:
        raise ExperimentError("metrics", str(exc)) from exc
    return LongRunComparison(
        true_metrics=true_report,
        pred_metrics=pred_report,
        kde_l1=l1,
        longrun_steps=longrun_steps,
        true_series=true_series,
        pred_series=pred_series,
    )


def run_experiment(cfg: ExperimentConfig, out_dir=None) -> ExperimentReport:
    """The full pipeline: data, split, train, PH ensemble, long-run
    comparison, report. With out_dir set, also writes plot-ready CSVs."""
    try:
        dataset = load_dataset(cfg)
    except Exception as exc:
        raise ExperimentError("data", str(exc)) from exc
    try:
        train_ds, test_ds = split(dataset, cfg.split)
    except Exception as exc:
        raise ExperimentError("split", str(exc)) from exc
    try:
        model = train_model(cfg, train_ds.series)
    except Exception as exc:
        raise ExperimentError("train", str(exc)) from exc
    try:
        samples = ph_distribution(
            model,
            test_ds,
            cfg.thresholds,
            cfg.ensemble_size,
            cfg.seed,
            prediction_steps=cfg.prediction_steps,
            lyapunov_ref=cfg.metrics.lyapunov_ref,
        )
        medians, never_crossed = ph_summary(samples, cfg.thresholds)
    except Exception as exc:
        raise ExperimentError("ph-ensemble", str(exc)) from exc

    comparison = evaluate_model(cfg, model, dataset, test_ds.series)

    report = ExperimentReport(
        config=config_to_dict(cfg),
        timestamp=datetime.now(timezone.utc).isoformat(),
        training_mse=model.training_mse,
        true_metrics=comparison.true_metrics,
        pred_metrics=comparison.pred_metrics,
        ph_samples=tuple(samples),
        ph_medians=medians,
        ph_never_crossed=never_crossed,
        kde_l1=comparison.kde_l1,
        longrun_steps=comparison.longrun_steps,
    )
    if out_dir is not None:
        test_series = test_ds.series
        hp = model.hp
        n_aligned = min(
            comparison.longrun_steps, len(test_series) - hp.washout - 1
        )
        aligned_truth = test_series.slice(
            hp.washout + 1, hp.washout + 1 + n_aligned
        ).select(test_series.channels[: hp.output_dim])
        write_report_outputs(report, out_dir, aligned_truth, comparison.pred_series)
    return report


def write_report_outputs(
    report: ExperimentReport,
    out_dir,
    true_series: TimeSeries | None = None,
    pred_series: TimeSeries | None = None,
    max_csv_rows: int = 20_000,
) -> None:
    """Write the report JSON and plot-ready CSVs into a directory."""
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "report.json"), "w") as handle:
        handle.write(report.to_json())
        handle.write("\n")
    met.write_ph_csv(report.ph_samples, os.path.join(out_dir, "ph_samples.csv"))
    met.write_kde_csv(report.true_metrics.kde, os.path.join(out_dir, "kde_true.csv"))
    met.write_kde_csv(report.pred_metrics.kde, os.path.join(out_dir, "kde_pred.csv"))
    if true_series is not None and pred_series is not None:
        n = min(len(true_series), len(pred_series), max_csv_rows)
        write_csv(true_series.slice(0, n), os.path.join(out_dir, "attractor_true.csv"))
        write_csv(pred_series.slice(0, n), os.path.join(out_dir, "attractor_pred.csv"))
        curve = met.mse_curve(true_series.slice(0, n), pred_series.slice(0, n))
        write_csv(curve, os.path.join(out_dir, "mse_curve.csv"))


# ---------------------------------------------------------------------------
# Noise sweep
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class NoiseLevelResult:
    sigma_rel: float
    training_mse: float
    ph_medians: dict
    ph_never_crossed: dict


@dataclass(frozen=True)
class NoiseSweepReport:
    config: dict
    timestamp: str
    levels: tuple[NoiseLevelResult, ...]

    def to_dict(self) -> dict:
        return {
            "config": self.config,
            "timestamp": self.timestamp,
            "levels": [
                {
                    "sigma_rel": lv.sigma_rel,
                    "training_mse": lv.training_mse,
                    "ph_medians": {
                        _float_key(r): v for r, v in lv.ph_medians.items()
                    },
                    "ph_never_crossed": {
                        _float_key(r): n for r, n in lv.ph_never_crossed.items()
                    },
                }
                for lv in self.levels
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def noise_sweep(cfg: ExperimentConfig) -> NoiseSweepReport:
    """Retrain on noise-corrupted training data, one model per level, and
    evaluate each against the clean test set."""
    if not cfg.noise_levels:
        raise ConfigError("noise_sweep needs at least one noise level")
    try:
        dataset = load_dataset(cfg)
        train_ds, test_ds = split(dataset, cfg.split)
    except Exception as exc:
        raise ExperimentError("data", str(exc)) from exc
    results = []
    for index, sigma in enumerate(cfg.noise_levels):
        try:
            noisy = add_noise(train_ds.series, sigma, seed=cfg.seed + 1000 * index)
            model = train_model(cfg, noisy)
            samples = ph_distribution(
                model,
                test_ds,
                cfg.thresholds,
                cfg.ensemble_size,
                cfg.seed,
                prediction_steps=cfg.prediction_steps,
                lyapunov_ref=cfg.metrics.lyapunov_ref,
            )
            medians, counts = ph_summary(samples, cfg.thresholds)
        except Exception as exc:
            raise ExperimentError(f"noise-level-{sigma:g}", str(exc)) from exc
        results.append(
            NoiseLevelResult(
                sigma_rel=sigma,
                training_mse=model.training_mse,
                ph_medians=medians,
                ph_never_crossed=counts,
            )
        )
    return NoiseSweepReport(
        config=config_to_dict(cfg),
        timestamp=datetime.now(timezone.utc).isoformat(),
        levels=tuple(results),
    )


# ---------------------------------------------------------------------------
# Perturbed-pair divergence study
# ---------------------------------------------------------------------------


def divergence_study(
    spec: SystemSpec,
    delta0: float,
    r: float,
    n_pairs: int,
    seed: int = 0,
    *,
    lyapunov_ref: float,
    n_steps: int,
    transient_steps: int = 0,
    batch_pairs: int = 250,
) -> list[float]:
    """Divergence time of n_pairs perturbed trajectory pairs, in Lyapunov
    units; directly comparable with a prediction-horizon distribution.

    Base points are strided samples of one attractor run; each partner
    starts delta0 away in a random direction.
    """
    if not delta0 > 0:
        raise ValueError(f"delta0 must be positive, got {delta0}")
    if n_pairs < 1:
        raise ValueError(f"n_pairs must be >= 1, got {n_pairs}")
    base_run = simulate_dataset(
        spec, transient_steps=transient_steps
    ).series.values
    if len(base_run) < n_pairs:
        raise ValueError(
            f"reference run of {len(base_run)} samples cannot seed {n_pairs} pairs"
        )
    stride = len(base_run) // n_pairs
    bases = base_run[:: stride][:n_pairs]
    rng = np.random.default_rng(seed)
    direction = rng.standard_normal(bases.shape)
    direction /= np.linalg.norm(direction, axis=1, keepdims=True)
    partners = bases + delta0 * direction

    window = SystemSpec(
        kind=spec.kind, params=spec.params, dt=spec.dt, n_steps=n_steps
    )
    times: list[float] = []
    channels = ("c1", "c2", "c3")
    for lo in range(0, n_pairs, batch_pairs):
        hi = min(lo + batch_pairs, n_pairs)
        ics = np.concatenate([bases[lo:hi], partners[lo:hi]], axis=0)
        traj = integrate_batch(window, ics)
        half = hi - lo
        for j in range(half):
            a = TimeSeries(traj[j], spec.dt, channels)
            b = TimeSeries(traj[half + j], spec.dt, channels)
            times.append(met.divergence_time(a, b, r, mle=lyapunov_ref))
    return times
