"""Sweep the memory EMA coefficient and report loss and task separation.

alpha = 0 leaves memory to the gradient channel alone, which is the
comparison the EMA write has to win.
"""
import argparse
from dataclasses import replace

import numpy as np

from atm_lab import cli, pipeline


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--alphas", default="0,0.03,0.1,0.3,1")
    parser.add_argument("--seeds", default="1..3")
    args = parser.parse_args()

    base = pipeline.preset("desk")
    base.report_arms = ()
    seeds = cli.parse_seeds(args.seeds)
    print(f"{'alpha':>6} {'final_loss':>11} {'sep_raw':>8} {'sep_ret':>8}")
    for alpha in (float(a) for a in args.alphas.split(",")):
        metrics = [pipeline.run(replace(base, alpha=alpha, seed=s)).metrics for s in seeds]
        loss, raw, ret = (float(np.median([getattr(m, key) for m in metrics]))
                          for key in ("final_loss", "separation_ratio_raw", "separation_ratio_retrieved"))
        print(f"{alpha:>6.2f} {loss:>11.5f} {raw:>8.2f} {ret:>8.2f}")


if __name__ == "__main__":
    main()
