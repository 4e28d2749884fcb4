#!/usr/bin/env python3
"""Train one recommender per epsilon and tabulate P@1 / R@1 / MAR.

A thin experiment runner over the library pipeline; emits a plot-ready CSV.
The wait forecaster is trained once and shared across the grid.
"""

import argparse
from pathlib import Path

from evrac.config import load_config
from evrac.evaluation import epsilon_sweep, write_sweep_csv
from evrac.pipeline import (
    evaluation_environment,
    load_data_bundle,
    sweep_runner,
    train_reward_model,
    training_environment,
)


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--config", required=True)
    parser.add_argument("--grid", default="0,0.25,0.5,0.75,1.0")
    parser.add_argument("--out", default="sweep.csv")
    parser.add_argument("--skip-reward-net", action="store_true",
                        help="use per-station mean waits instead of the forecaster")
    args = parser.parse_args()

    config = load_config(args.config)
    bundle = load_data_bundle(config)
    net = None
    if not args.skip_reward_net:
        net, report = train_reward_model(bundle)
        print(f"wait forecaster: train_mse={report['train_mse']:.2f} "
              f"val_mse={report['val_mse']:.2f} over {report['samples']} samples")

    grid = [float(v) for v in args.grid.split(",") if v.strip()]
    run = sweep_runner(bundle, training_environment(bundle, net),
                       evaluation_environment(bundle, net), ks=(1,))
    rows = epsilon_sweep(run, grid)
    write_sweep_csv(rows, args.out)

    print(f"{'eps':>6} {'P@1':>8} {'R@1':>8} {'MAR':>10}")
    for row in rows:
        print(f"{row['eps']:>6.2f} {row['p1']:>8.3f} {row['r1']:>8.3f} {row['mar']:>10.2f}")
    print(f"wrote {Path(args.out).resolve()}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
