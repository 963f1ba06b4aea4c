"""Train every ablation arm over a seed range and print per-arm medians.

    python scripts/run_ablation_sweep.py --seeds 1..5 --out runs/sweep
"""
import argparse
from pathlib import Path

import numpy as np

from atm_lab import cli, pipeline
from atm_lab.serialization import atomic_write, table_csv
from atm_lab.synthbench import MetricReport


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--config", help="flat key = value config (defaults to the desk preset)")
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    parser.add_argument("--arms", default=",".join(pipeline.ARMS))
    parser.add_argument("--seeds", default="1..5")
    parser.add_argument("--out", default="runs/sweep")
    args = parser.parse_args()

    config = cli.build_config("desk", args.config, args.set)
    arms, seeds = cli.parse_arms(args.arms), cli.parse_seeds(args.seeds)
    reports = cli.run_ablation_table(config, arms, seeds)
    path = atomic_write(Path(args.out) / "ablation.csv",
                        table_csv("ablation", MetricReport.CSV_COLUMNS, [r.csv_row() for r in reports]))

    print(f"{'arm':<11} {'final_loss':>11} {'gate_acc':>9} {'sep_raw':>8} {'sep_ret':>8} {'struc_sim':>9}")
    for arm in arms:
        rows = [r for r in reports if r.arm == arm]
        med = {k: float(np.median([getattr(r, k) for r in rows]))
               for k in ("final_loss", "gate_accuracy", "separation_ratio_raw",
                         "separation_ratio_retrieved", "struc_sim")}
        print(f"{arm:<11} {med['final_loss']:>11.5f} {med['gate_accuracy']:>9.3f} "
              f"{med['separation_ratio_raw']:>8.2f} {med['separation_ratio_retrieved']:>8.2f} "
              f"{med['struc_sim']:>9.4f}")
    print(f"medians over seeds {seeds}; rows in {path}")


if __name__ == "__main__":
    main()
