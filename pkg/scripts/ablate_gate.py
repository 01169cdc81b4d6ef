"""Gated against gateless Mamba blocks on the 16/8 cup-placing split."""

from pathlib import Path

from _common import parser, seed_list, write_rows
from mambamotion import evaluator as ev


def main():
    args = parser(__doc__).parse_args()
    over = {"epochs": args.epochs} if args.epochs else None
    seeds = seed_list(args.seeds)
    cells = ev.ablate_gate(seeds, train_cfg=over)
    write_rows(Path(args.out) / "ablate_gate.csv", ev.cells_to_rows(cells))
    for d in sorted({c.extra["d_state"] for c in cells}):
        loss = {(c.extra["gate"], c.seed): c.final_test_loss for c in cells if c.extra["d_state"] == d}
        wins = sum(loss[(False, s)] < loss[(True, s)] for s in seeds)
        print(f"d_state {d}: gateless lower in {wins}/{len(seeds)} seeds")


if __name__ == "__main__":
    main()
