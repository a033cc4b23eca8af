"""Desk-scale pipeline: generate the dataset, train once, report test-split metrics."""
import time
from pathlib import Path

from _common import parser, prepare

from pcperm.harness import dataset_stats, format_stats, make_split, load_dataset, read_manifest, run_eval, run_training


def main():
    args = parser(__doc__).parse_args()
    t0 = time.time()
    config, data = prepare(args)
    print(f"dataset ready in {time.time() - t0:.0f} s")
    dataset = load_dataset(data)
    print(format_stats(dataset_stats(read_manifest(data), make_split(config, dataset))))
    run = Path(args.out) / "run"
    t1 = time.time()
    result = run_training(config, data, run)
    print(f"trained {len(result.history)} epochs in {time.time() - t1:.0f} s")
    m = run_eval(run, data, "test")
    print(f"test R2 {m.r2:.4f} on {m.n_samples} samples; relative error "
          f"min {m.min_rel_err:.3g} max {m.max_rel_err:.3g}; total {time.time() - t0:.0f} s")


if __name__ == "__main__":
    main()
