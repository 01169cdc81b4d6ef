"""State-dimension sweep: final test loss and per-epoch curves for d_state in {1, 2, 4, 6, 8}."""

from pathlib import Path

from _common import parser, seed_list, write_rows
from mambamotion import evaluator as ev


def main():
    p = parser(__doc__)
    p.add_argument("--task", default="cup-placing")
    args = p.parse_args()
    over = {"epochs": args.epochs} if args.epochs else None
    cells = ev.sweep_d_state(args.task, seed_list(args.seeds), train_cfg=over)
    write_rows(Path(args.out) / "sweep_dim.csv", ev.cells_to_rows(cells))
    write_rows(Path(args.out) / "sweep_dim_curves.csv",
               [{"d_state": c.extra["d_state"], "seed": c.seed, "epoch": e, "train_loss": a, "test_loss": b}
                for c in cells for e, (a, b) in enumerate(zip(c.curve_train, c.curve_test))])
    for d in sorted({c.extra["d_state"] for c in cells}):
        v = ev.median(c.final_test_loss for c in cells if c.extra["d_state"] == d)
        print(f"d_state {d} median final test loss {v:.5f}")


if __name__ == "__main__":
    main()
