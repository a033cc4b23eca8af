"""Test R2 against the size of the global feature vector (and its matching decoder)."""
from dataclasses import replace
from pathlib import Path

from _common import parser, prepare

from pcperm.harness import run_eval, run_training
from pcperm.net import DECODER_FOR_GLOBAL, param_count


def main():
    p = parser(__doc__)
    p.add_argument("--sizes", type=int, nargs="+", default=sorted(DECODER_FOR_GLOBAL))
    args = p.parse_args()
    config, data = prepare(args)
    for g in args.sizes:
        cfg = replace(config, model=replace(config.model, global_feature_size=g))
        run = Path(args.out) / f"global{g}"
        run_training(cfg, data, run)
        m = run_eval(run, data, "test")
        print(f"global {g:5d}: {param_count(cfg.model):9d} parameters, test R2 {m.r2:.4f}", flush=True)


if __name__ == "__main__":
    main()
