"""Dataset ingestion, train/test splitting, and model persistence.

Datasets wrap a TimeSeries with its origin (simulated or loaded from a
recording file) so experiment reports can say where their numbers came
from. Splitting is always contiguous in time: the train set is a prefix,
the test set the remaining suffix.

Models are stored as a single self-describing JSON document. Values pass
through JSON's shortest-round-trip float representation, so weights are
restored bit-exactly.
"""
from __future__ import annotations

import enum
import json
import os
from dataclasses import asdict, dataclass

import numpy as np
import scipy.sparse as sp

from .reservoir import EsnHyperParams, EsnModel, EsnWeights
from .systems import SystemSpec, add_noise, default_initial_condition, integrate
from .timeseries import TimeSeries, read_csv, write_csv

MODEL_FORMAT = "esn-model"
MODEL_FORMAT_VERSION = 1

DATASET_SIDECAR_SUFFIX = ".meta.json"


class PersistenceError(RuntimeError):
    """A stored document is malformed or has an unsupported version."""


class DataSource(enum.Enum):
    SIMULATED = "simulated"
    EXPERIMENTAL_CSV = "experimental-csv"


@dataclass(frozen=True)
class Dataset:
    """A time series plus a record of where it came from."""

    series: TimeSeries
    source: DataSource
    provenance: str

    def __post_init__(self):
        if len(self.series) < 1:
            raise ValueError("dataset series must be non-empty")
        if not self.provenance:
            raise ValueError("dataset provenance must be non-empty")


@dataclass(frozen=True)
class SplitSpec:
    """Contiguous train/test split: train = prefix, test = suffix."""

    train_fraction: float = 0.8

    def __post_init__(self):
        if not 0.0 < self.train_fraction < 1.0:
            raise ValueError(
                f"train_fraction must be in (0, 1), got {self.train_fraction}"
            )


def split(ds: Dataset, spec: SplitSpec) -> tuple[Dataset, Dataset]:
    """Partition a dataset in time: first floor(fraction*T) samples train,
    the rest test. No shuffling — order is what a forecaster must respect."""
    n_total = len(ds.series)
    n_train = int(spec.train_fraction * n_total)
    if n_train < 1 or n_train >= n_total:
        raise ValueError(
            f"split of {n_total} samples at fraction {spec.train_fraction} "
            "leaves an empty train or test set"
        )
    train = Dataset(
        series=ds.series.slice(0, n_train),
        source=ds.source,
        provenance=f"{ds.provenance} [train 0:{n_train}]",
    )
    test = Dataset(
        series=ds.series.slice(n_train),
        source=ds.source,
        provenance=f"{ds.provenance} [test {n_train}:{n_total}]",
    )
    return train, test


# ---------------------------------------------------------------------------
# CSV ingestion with optional metadata sidecar
# ---------------------------------------------------------------------------


def _sidecar_path(path) -> str:
    return f"{path}{DATASET_SIDECAR_SUFFIX}"


def save_dataset(ds: Dataset, path) -> None:
    """Write the series as CSV plus a JSON sidecar with dt/channels/source."""
    write_csv(ds.series, path)
    meta = {
        "dt": ds.series.dt,
        "t0": ds.series.t0,
        "channels": list(ds.series.channels),
        "source": ds.source.value,
        "provenance": ds.provenance,
    }
    with open(_sidecar_path(path), "w") as handle:
        json.dump(meta, handle, indent=2, sort_keys=True)
        handle.write("\n")


def load_csv(path, expected_channels=None) -> Dataset:
    """Load a recording from CSV, using the metadata sidecar if present.

    ``expected_channels`` may be a channel count or a sequence of channel
    names; a mismatch is rejected so experiments fail before training
    rather than after.
    """
    sidecar = _sidecar_path(path)
    dt = None
    source = DataSource.EXPERIMENTAL_CSV
    provenance = str(path)
    if os.path.exists(sidecar):
        with open(sidecar) as handle:
            try:
                meta = json.load(handle)
            except json.JSONDecodeError as exc:
                raise PersistenceError(f"{sidecar}: invalid JSON sidecar: {exc}") from exc
        dt = float(meta["dt"]) if "dt" in meta else None
        if "source" in meta:
            source = DataSource(meta["source"])
        provenance = str(meta.get("provenance", provenance))
    series = read_csv(path, dt=dt)
    if expected_channels is not None:
        if isinstance(expected_channels, int):
            if series.n_channels != expected_channels:
                raise ValueError(
                    f"{path}: expected {expected_channels} channels, "
                    f"got {series.n_channels}"
                )
        else:
            expected = tuple(str(c) for c in expected_channels)
            if series.channels != expected:
                raise ValueError(
                    f"{path}: expected channels {expected}, got {series.channels}"
                )
    return Dataset(series=series, source=source, provenance=provenance)


# ---------------------------------------------------------------------------
# Dataset generation
# ---------------------------------------------------------------------------


def simulate_dataset(
    spec: SystemSpec,
    ic=None,
    transient_steps: int = 0,
    t0: float = 0.0,
) -> Dataset:
    """Integrate a system and keep n_steps samples after a discarded
    transient, so the dataset starts on the attractor."""
    if transient_steps < 0:
        raise ValueError(f"transient_steps must be >= 0, got {transient_steps}")
    if ic is None:
        ic = default_initial_condition(spec.kind)
    ic = np.asarray(ic, dtype=float)
    full_spec = SystemSpec(
        kind=spec.kind,
        params=spec.params,
        dt=spec.dt,
        n_steps=spec.n_steps + transient_steps,
    )
    full = integrate(full_spec, ic, t0=t0 - transient_steps * spec.dt)
    series = full.slice(transient_steps)
    provenance = (
        f"{spec.kind.value} dt={spec.dt:g} n_steps={spec.n_steps} "
        f"transient={transient_steps} ic=({ic[0]:g},{ic[1]:g},{ic[2]:g}) "
        f"params={spec.params}"
    )
    return Dataset(series=series, source=DataSource.SIMULATED, provenance=provenance)


def quantize(series: TimeSeries, n_bits: int) -> TimeSeries:
    """Round each channel onto a uniform grid of 2**n_bits levels spanning
    its own range, imitating a fixed-resolution acquisition card."""
    if n_bits < 1:
        raise ValueError(f"n_bits must be >= 1, got {n_bits}")
    values = series.values.copy()
    levels = (1 << n_bits) - 1
    for col in range(values.shape[1]):
        lo = values[:, col].min()
        span = values[:, col].max() - lo
        if span == 0.0:
            continue
        step = span / levels
        values[:, col] = lo + np.round((values[:, col] - lo) / step) * step
    return TimeSeries(values, series.dt, series.channels, series.t0)


def surrogate_recording(
    spec: SystemSpec,
    noise_rel: float = 0.01,
    n_bits: int = 10,
    seed: int = 0,
    ic=None,
    transient_steps: int = 0,
) -> Dataset:
    """Simulated stand-in for a lab recording: an ODE run degraded by
    relative Gaussian noise and fixed-bit quantization.

    Clearly labeled as a surrogate in its provenance; it exists so the
    experimental-data pipeline stays executable without recordings. The
    channels are named like the instrument channels such a recording would
    come from (two voltages and a current) rather than as state variables.
    """
    clean = simulate_dataset(spec, ic=ic, transient_steps=transient_steps)
    noisy = add_noise(clean.series, noise_rel, seed=seed)
    series = quantize(noisy, n_bits)
    series = TimeSeries(series.values, series.dt, ("v1", "v2", "il"), series.t0)
    return Dataset(
        series=series,
        source=DataSource.SIMULATED,
        provenance=(
            f"surrogate recording: {clean.provenance} "
            f"+ noise_rel={noise_rel:g} + {n_bits}-bit quantization, seed={seed}"
        ),
    )


# ---------------------------------------------------------------------------
# Model persistence
# ---------------------------------------------------------------------------


def _matrix_to_triplets(w: sp.csr_matrix) -> dict:
    coo = w.tocoo()
    return {
        "shape": list(coo.shape),
        "rows": coo.row.tolist(),
        "cols": coo.col.tolist(),
        "values": coo.data.tolist(),
    }


def _matrix_from_triplets(doc: dict) -> sp.csr_matrix:
    shape = tuple(doc["shape"])
    return sp.coo_matrix(
        (doc["values"], (doc["rows"], doc["cols"])), shape=shape
    ).tocsr()


def save_model(model: EsnModel, path) -> None:
    """Write a model as a self-describing JSON document."""
    doc = {
        "format": MODEL_FORMAT,
        "format_version": MODEL_FORMAT_VERSION,
        "hyperparams": asdict(model.hp),
        "w_in": model.weights.w_in.tolist(),
        "w": _matrix_to_triplets(model.weights.w),
        "w_out": None if model.weights.w_out is None else model.weights.w_out.tolist(),
        "training_mse": model.training_mse,
    }
    with open(path, "w") as handle:
        json.dump(doc, handle, sort_keys=True)
        handle.write("\n")


def load_model(path) -> EsnModel:
    """Load a model document, checking format and version before use."""
    with open(path) as handle:
        try:
            doc = json.load(handle)
        except json.JSONDecodeError as exc:
            raise PersistenceError(f"{path}: not a valid model document: {exc}") from exc
    if not isinstance(doc, dict) or doc.get("format") != MODEL_FORMAT:
        raise PersistenceError(f"{path}: not a model document")
    version = doc.get("format_version")
    if version != MODEL_FORMAT_VERSION:
        raise PersistenceError(
            f"{path}: unsupported format version {version!r}, "
            f"this build reads version {MODEL_FORMAT_VERSION}"
        )
    try:
        hp = EsnHyperParams(**doc["hyperparams"])
        w_out = doc.get("w_out")
        weights = EsnWeights(
            w_in=np.asarray(doc["w_in"], dtype=float),
            w=_matrix_from_triplets(doc["w"]),
            w_out=None if w_out is None else np.asarray(w_out, dtype=float),
        )
        training_mse = doc.get("training_mse")
        return EsnModel(
            hp=hp,
            weights=weights,
            training_mse=None if training_mse is None else float(training_mse),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise PersistenceError(f"{path}: corrupted model document: {exc}") from exc
