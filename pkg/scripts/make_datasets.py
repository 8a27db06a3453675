#!/usr/bin/env python3
"""Regenerate the standard benchmark datasets as CSV files.

Writes three recordings, each long enough for the long-run statistics to
converge: the Lorenz system sampled at dt=0.01, the double-scroll Chua
oscillator at dt=0.05, and a noisy 10-bit-quantized Chua recording at
dt=0.057 standing in for unpublished lab measurements.
"""
import argparse
import os
import time

from esnchaos.data import save_dataset, simulate_dataset, surrogate_recording
from esnchaos.systems import DOUBLE_SCROLL_CHUA, SystemKind, SystemSpec

RECIPES = {
    "lorenz63": dict(
        spec=SystemSpec(SystemKind.LORENZ63, dt=0.01, n_steps=100_000),
        transient_steps=1027,
    ),
    "chua_ode": dict(
        spec=SystemSpec(
            SystemKind.CHUA, params=DOUBLE_SCROLL_CHUA, dt=0.05, n_steps=75_000
        ),
        transient_steps=1905,
    ),
    "chua_surrogate": dict(
        spec=SystemSpec(
            SystemKind.CHUA, params=DOUBLE_SCROLL_CHUA, dt=0.057, n_steps=120_000
        ),
        transient_steps=1671,
        surrogate=dict(noise_rel=0.01, n_bits=10, seed=0),
    ),
}


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument(
        "--out-dir", default="datasets", help="directory for the CSV files"
    )
    parser.add_argument(
        "--only", nargs="*", choices=sorted(RECIPES), help="subset to generate"
    )
    args = parser.parse_args()
    os.makedirs(args.out_dir, exist_ok=True)

    for name, recipe in RECIPES.items():
        if args.only and name not in args.only:
            continue
        start = time.time()
        if "surrogate" in recipe:
            dataset = surrogate_recording(
                recipe["spec"],
                transient_steps=recipe["transient_steps"],
                **recipe["surrogate"],
            )
        else:
            dataset = simulate_dataset(
                recipe["spec"], transient_steps=recipe["transient_steps"]
            )
        path = os.path.join(args.out_dir, f"{name}.csv")
        save_dataset(dataset, path)
        print(
            f"{name}: {len(dataset.series)} samples x "
            f"{dataset.series.n_channels} channels -> {path} "
            f"({time.time() - start:.1f}s)"
        )


if __name__ == "__main__":
    main()
