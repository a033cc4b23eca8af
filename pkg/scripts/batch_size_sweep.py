"""Effect of batch size: train one model per batch size and report validation loss and test R2."""
from pathlib import Path

from _common import parser, prepare

from pcperm.harness import gridsearch, run_eval


def main():
    p = parser(__doc__)
    p.add_argument("--batch-size", type=int, nargs="+", default=[8, 16, 32, 64, 128, 256])
    p.add_argument("--lr", type=float, nargs="+", help="learning rates (default: the config's)")
    args = p.parse_args()
    config, data = prepare(args)
    out = Path(args.out) / "batch_sweep"
    rows = gridsearch(config, data, out, args.lr or [config.train.lr0], args.batch_size)
    for r in sorted(rows, key=lambda r: (r["lr0"], r["batch_size"])):
        r2 = run_eval(out / r["run"], data, "test").r2
        print(f"lr {r['lr0']:g} batch {r['batch_size']:5d}: best val loss {r['best_val_loss']:.5f}, test R2 {r2:.4f}")


if __name__ == "__main__":
    main()
