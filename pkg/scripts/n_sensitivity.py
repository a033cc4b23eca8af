"""Test R2 with clouds resampled to N_min versus N_max, over several training seeds."""
from dataclasses import replace
from pathlib import Path

import numpy as np
from _common import parser, prepare

from pcperm.harness import run_eval, run_training


def main():
    p = parser(__doc__)
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    args = p.parse_args()
    config, data = prepare(args)
    scores = {"min": [], "max": []}
    for seed in args.seeds:
        for mode in scores:
            cfg = replace(config.with_training_seed(seed), n_points=mode)
            run = Path(args.out) / f"N{mode}_seed{seed}"
            run_training(cfg, data, run)
            r2 = run_eval(run, data, "test").r2
            scores[mode].append(r2)
            print(f"seed {seed} N_{mode}: R2 {r2:.4f}", flush=True)
    for mode, values in scores.items():
        print(f"N_{mode}: mean R2 {np.mean(values):.4f} (std {np.std(values):.4f})")


if __name__ == "__main__":
    main()
