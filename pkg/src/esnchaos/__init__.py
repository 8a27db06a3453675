"""Echo state networks for autonomous prediction of chaotic systems."""
from .data import Dataset, SplitSpec, load_csv, load_model, save_dataset, save_model, split
from .harness import (
    ExperimentConfig,
    ExperimentReport,
    IoMode,
    MetricParams,
    load_config,
    load_preset,
    noise_sweep,
    ph_distribution,
    preset_names,
    run_experiment,
)
from .reservoir import EsnHyperParams, EsnModel, EsnWeights
from .systems import ChuaParams, LorenzParams, SystemKind, SystemSpec
from .timeseries import TimeSeries, read_csv, write_csv

__all__ = [
    "ChuaParams",
    "Dataset",
    "EsnHyperParams",
    "EsnModel",
    "EsnWeights",
    "ExperimentConfig",
    "ExperimentReport",
    "IoMode",
    "LorenzParams",
    "MetricParams",
    "SplitSpec",
    "SystemKind",
    "SystemSpec",
    "TimeSeries",
    "load_config",
    "load_csv",
    "load_model",
    "load_preset",
    "noise_sweep",
    "ph_distribution",
    "preset_names",
    "read_csv",
    "run_experiment",
    "save_dataset",
    "save_model",
    "split",
    "write_csv",
]

__version__ = "0.1.0"
