"""Command-line front end for the experiment pipeline.

Subcommands
    simulate     integrate the configured system (or surrogate recording)
                 and write the dataset as CSV
    train        fit the readout on the training split, save the model
    predict      closed-loop rollout from the start of the test split
    evaluate     long-run statistics of a rollout vs the true series
    ph-dist      prediction-horizon distribution over an ensemble of
                 test-set initial conditions
    noise-sweep  retrain at each configured noise level, summarize horizons
    diverge      divergence times of perturbed true-trajectory pairs
    report       full pipeline; writes the report JSON plus plot-ready CSVs

Every subcommand takes --config (a JSON file or a named preset), --seed
(overrides the config seed), --out-dir (where files go, default '.'), and
--threads (caps linear-algebra worker threads).

Exit codes: 0 success, 2 configuration error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import math
import os
import sys

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3

# Keeps the threadpoolctl limiter alive for the life of the process.
_THREAD_LIMITER = None


def _limit_threads(n: int | None) -> None:
    global _THREAD_LIMITER
    if n is None:
        return
    if n < 1:
        from .harness import ConfigError

        raise ConfigError(f"--threads must be >= 1, got {n}")
    for var in (
        "OMP_NUM_THREADS",
        "OPENBLAS_NUM_THREADS",
        "MKL_NUM_THREADS",
        "NUMEXPR_NUM_THREADS",
    ):
        os.environ[var] = str(n)
    try:
        import threadpoolctl
    except ImportError:
        return
    _THREAD_LIMITER = threadpoolctl.threadpool_limits(limits=n)


def _json_ready(value: float):
    """JSON has no inf; mirror the report convention for absent crossings."""
    if value is None or not math.isfinite(value):
        return "never-crossed"
    return value


def _load_config(args):
    """--config is a JSON file path, or the name of a bundled preset."""
    from .harness import ConfigError, load_config, load_preset, preset_names

    if args.config is None:
        raise ConfigError(
            f"--config is required (a JSON file or one of {preset_names()})"
        )
    if os.path.exists(args.config):
        cfg = load_config(args.config)
    elif args.config in preset_names():
        cfg = load_preset(args.config)
    else:
        raise ConfigError(
            f"config {args.config!r} is neither a file nor one of "
            f"{preset_names()}"
        )
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    return cfg


def _out_path(args, name: str) -> str:
    os.makedirs(args.out_dir, exist_ok=True)
    return os.path.join(args.out_dir, name)


def _write_json(path: str, doc: dict) -> None:
    with open(path, "w") as handle:
        json.dump(doc, handle, indent=2, sort_keys=True)
        handle.write("\n")


def _split_or_whole(cfg):
    """Train/test datasets for a config; loading errors count as data stage."""
    from . import harness
    from .data import split

    dataset = harness.load_dataset(cfg)
    train_ds, test_ds = split(dataset, cfg.split)
    return dataset, train_ds, test_ds


def _load_or_train(cfg, args, train_series):
    from .data import load_model
    from .harness import train_model

    if getattr(args, "model", None):
        return load_model(args.model)
    return train_model(cfg, train_series)


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_simulate(args) -> int:
    from . import harness
    from .timeseries import write_csv

    cfg = _load_config(args)
    dataset = harness.load_dataset(cfg)
    path = _out_path(args, "dataset.csv")
    write_csv(dataset.series, path)
    print(
        f"simulate: wrote {len(dataset.series)} samples x "
        f"{dataset.series.n_channels} channels (dt={dataset.series.dt:g}) "
        f"to {path}"
    )
    return EXIT_OK


def cmd_train(args) -> int:
    from .data import save_model
    from .harness import train_model

    cfg = _load_config(args)
    dataset, train_ds, test_ds = _split_or_whole(cfg)
    model = train_model(cfg, train_ds.series)
    path = args.model or _out_path(args, "model.json")
    save_model(model, path)
    _write_json(
        _out_path(args, "train_summary.json"),
        {
            "model_path": path,
            "training_mse": model.training_mse,
            "n_nodes": model.hp.n_nodes,
            "input_dim": model.hp.input_dim,
            "output_dim": model.hp.output_dim,
            "train_samples": len(train_ds.series),
            "test_samples": len(test_ds.series),
        },
    )
    print(f"train: mse={model.training_mse:.6g}, model saved to {path}")
    return EXIT_OK


def cmd_predict(args) -> int:
    from .harness import predict_window
    from .timeseries import write_csv

    cfg = _load_config(args)
    dataset, train_ds, test_ds = _split_or_whole(cfg)
    model = _load_or_train(cfg, args, train_ds.series)
    steps = args.steps or cfg.prediction_steps
    pred = predict_window(model, test_ds.series, model.hp.washout, steps)
    pred_path = _out_path(args, "predicted.csv")
    write_csv(pred, pred_path)
    start = model.hp.washout + 1
    truth = test_ds.series.slice(start, start + len(pred)).select(
        test_ds.series.channels[: model.hp.output_dim]
    )
    truth_path = _out_path(args, "truth.csv")
    write_csv(truth, truth_path)
    print(
        f"predict: rolled out {len(pred)} steps "
        f"({len(pred) * pred.dt * cfg.metrics.lyapunov_ref:.2f} Lyapunov times); "
        f"wrote {pred_path} and {truth_path}"
    )
    return EXIT_OK


def cmd_evaluate(args) -> int:
    from .harness import evaluate_model

    cfg = _load_config(args)
    dataset, train_ds, test_ds = _split_or_whole(cfg)
    model = _load_or_train(cfg, args, train_ds.series)
    comparison = evaluate_model(cfg, model, dataset, test_ds.series)
    doc = {
        "longrun_steps": comparison.longrun_steps,
        "training_mse": model.training_mse,
        "true_metrics": comparison.true_metrics.to_dict(),
        "pred_metrics": comparison.pred_metrics.to_dict(),
        "kde_l1": comparison.kde_l1,
    }
    path = _out_path(args, "metrics.json")
    _write_json(path, doc)
    t, p = comparison.true_metrics, comparison.pred_metrics
    print(
        "evaluate: "
        f"mle {t.mle:.4f} -> {p.mle:.4f}, "
        f"sample entropy {t.sample_entropy:.4f} -> {p.sample_entropy:.4f}, "
        f"K_c {t.k_c:.4f} -> {p.k_c:.4f}; wrote {path}"
    )
    return EXIT_OK


def cmd_ph_dist(args) -> int:
    from . import metrics as met
    from .harness import _float_key, ph_distribution, ph_summary

    cfg = _load_config(args)
    dataset, train_ds, test_ds = _split_or_whole(cfg)
    model = _load_or_train(cfg, args, train_ds.series)
    samples = ph_distribution(
        model,
        test_ds,
        cfg.thresholds,
        cfg.ensemble_size,
        cfg.seed,
        prediction_steps=cfg.prediction_steps,
        lyapunov_ref=cfg.metrics.lyapunov_ref,
    )
    medians, never = ph_summary(samples, cfg.thresholds)
    csv_path = _out_path(args, "ph_samples.csv")
    met.write_ph_csv(samples, csv_path)
    _write_json(
        _out_path(args, "ph_summary.json"),
        {
            "ensemble_size": cfg.ensemble_size,
            "medians": {_float_key(r): _json_ready(m) for r, m in medians.items()},
            "never_crossed": {_float_key(r): n for r, n in never.items()},
        },
    )
    for r in cfg.thresholds:
        print(
            f"ph-dist: r={r:g} median={medians[r]:.4f} Ly "
            f"({never[r]} of {cfg.ensemble_size} never crossed)"
        )
    print(f"ph-dist: wrote {csv_path}")
    return EXIT_OK


def cmd_noise_sweep(args) -> int:
    from .harness import noise_sweep

    cfg = _load_config(args)
    report = noise_sweep(cfg)
    path = _out_path(args, "noise_sweep.json")
    with open(path, "w") as handle:
        handle.write(report.to_json())
        handle.write("\n")
    csv_path = _out_path(args, "noise_sweep.csv")
    with open(csv_path, "w") as handle:
        handle.write("sigma_rel,threshold,median_ph,never_crossed,training_mse\n")
        for level in report.levels:
            for r in cfg.thresholds:
                handle.write(
                    f"{level.sigma_rel:.17g},{r:.17g},"
                    f"{level.ph_medians[r]:.17g},{level.ph_never_crossed[r]},"
                    f"{level.training_mse:.17g}\n"
                )
    for level in report.levels:
        first = cfg.thresholds[0]
        print(
            f"noise-sweep: sigma={level.sigma_rel:g} "
            f"median_ph(r={first:g})={level.ph_medians[first]:.4f} Ly"
        )
    print(f"noise-sweep: wrote {path} and {csv_path}")
    return EXIT_OK


def cmd_diverge(args) -> int:
    import numpy as np

    from .harness import ConfigError, divergence_study

    cfg = _load_config(args)
    if cfg.system is None:
        raise ConfigError("diverge needs a config with a simulated system")
    r = args.threshold if args.threshold is not None else cfg.thresholds[0]
    lyap = cfg.metrics.lyapunov_ref
    steps = args.steps or int(math.ceil(25.0 / (lyap * cfg.system.dt)))
    times = divergence_study(
        cfg.system,
        args.delta0,
        r,
        args.pairs,
        cfg.seed,
        lyapunov_ref=lyap,
        n_steps=steps,
        transient_steps=cfg.transient_steps,
    )
    csv_path = _out_path(args, "divergence_times.csv")
    with open(csv_path, "w") as handle:
        handle.write("pair,divergence_time_ly\n")
        for index, value in enumerate(times):
            handle.write(f"{index},{value:.17g}\n")
    finite = [v for v in times if math.isfinite(v)]
    quartiles = (
        np.percentile(finite, [25, 50, 75]).tolist() if finite else [None] * 3
    )
    doc = {
        "delta0": args.delta0,
        "threshold": r,
        "pairs": args.pairs,
        "window_steps": steps,
        "median": _json_ready(float(np.median(times))),
        "q25": _json_ready(quartiles[0]),
        "q75": _json_ready(quartiles[2]),
        "min": _json_ready(min(times)),
        "max": _json_ready(max(finite) if finite else None),
        "never_crossed": len(times) - len(finite),
    }
    _write_json(_out_path(args, "divergence_summary.json"), doc)
    median = doc["median"]
    median_text = median if isinstance(median, str) else f"{median:.4f}"
    print(
        f"diverge: {args.pairs} pairs at delta0={args.delta0:g}, r={r:g}: "
        f"median {median_text} Ly; wrote {csv_path}"
    )
    return EXIT_OK


def cmd_report(args) -> int:
    from .harness import run_experiment

    cfg = _load_config(args)
    report = run_experiment(cfg, out_dir=args.out_dir)
    for r in cfg.thresholds:
        median = report.ph_medians[r]
        print(f"report: r={r:g} median PH = {median:.4f} Ly")
    t, p = report.true_metrics, report.pred_metrics
    print(
        f"report: mle {t.mle:.4f} -> {p.mle:.4f}, "
        f"sample entropy {t.sample_entropy:.4f} -> {p.sample_entropy:.4f}, "
        f"K_c {t.k_c:.4f} -> {p.k_c:.4f}"
    )
    l1 = ", ".join(f"{ch}={v:.4f}" for ch, v in report.kde_l1.items())
    print(f"report: KDE L1 by channel: {l1}")
    print(f"report: files written to {args.out_dir}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="esnchaos",
        description="Echo state networks for forecasting chaotic systems.",
    )
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument(
        "--config",
        help="experiment config: a JSON file path or a bundled preset name",
    )
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument(
        "--out-dir", default=".", help="directory for output files (default: .)"
    )
    common.add_argument(
        "--threads", type=int, help="cap linear-algebra worker threads"
    )

    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser(
        "simulate", parents=[common], help="integrate the system, write CSV"
    )
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser(
        "train", parents=[common], help="train the readout, save the model"
    )
    p.add_argument("--model", help="model output path (default: OUT_DIR/model.json)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser(
        "predict", parents=[common], help="closed-loop rollout on the test split"
    )
    p.add_argument("--model", help="saved model to use (default: train afresh)")
    p.add_argument("--steps", type=int, help="rollout length in steps")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser(
        "evaluate", parents=[common], help="long-run statistics, true vs predicted"
    )
    p.add_argument("--model", help="saved model to use (default: train afresh)")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser(
        "ph-dist", parents=[common], help="prediction-horizon distribution"
    )
    p.add_argument("--model", help="saved model to use (default: train afresh)")
    p.set_defaults(func=cmd_ph_dist)

    p = sub.add_parser(
        "noise-sweep", parents=[common], help="retrain across noise levels"
    )
    p.set_defaults(func=cmd_noise_sweep)

    p = sub.add_parser(
        "diverge", parents=[common], help="perturbed-pair divergence times"
    )
    p.add_argument(
        "--delta0", type=float, default=2.22e-3, help="initial separation"
    )
    p.add_argument("--pairs", type=int, default=1000, help="number of pairs")
    p.add_argument(
        "--threshold",
        type=float,
        help="divergence threshold (default: first config threshold)",
    )
    p.add_argument("--steps", type=int, help="window length in steps")
    p.set_defaults(func=cmd_diverge)

    p = sub.add_parser(
        "report", parents=[common], help="full pipeline with plot-ready CSVs"
    )
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    from . import metrics as met
    from .data import PersistenceError
    from .harness import ConfigError, ExperimentError

    try:
        _limit_threads(args.threads)
        return args.func(args)
    except (ConfigError, PersistenceError) as exc:
        print(f"esnchaos: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (json.JSONDecodeError, OSError) as exc:
        print(f"esnchaos: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ExperimentError, met.MetricError) as exc:
        print(f"esnchaos: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (RuntimeError, ArithmeticError) as exc:
        print(f"esnchaos: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"esnchaos: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
