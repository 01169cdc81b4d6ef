"""Fixed-A ladder sweep plus the learned-A reference, with state-trace statistics."""

from pathlib import Path

from _common import parser, seed_list, write_rows
from mambamotion import evaluator as ev


def main():
    p = parser(__doc__)
    p.add_argument("--task", default="cup-placing")
    args = p.parse_args()
    over = {"epochs": args.epochs} if args.epochs else None
    cells = ev.sweep_fixed_a(args.task, seed_list(args.seeds), train_cfg=over)
    write_rows(Path(args.out) / "sweep_a.csv", ev.cells_to_rows(cells))
    for label in [str(a) for a in ev.FIXED_A_GRID] + ["learned"]:
        group = [c for c in cells if (c.extra["a_mode"] == "learned") == (label == "learned")
                 and (label == "learned" or c.extra["a_min"] == float(label))]
        print(f"a_min {label:>8s} median rmse {ev.median(c.rmse for c in group):.4f} "
              f"between-trial state variance {ev.median(c.extra['state_dispersion'] for c in group):.2e}")


if __name__ == "__main__":
    main()
