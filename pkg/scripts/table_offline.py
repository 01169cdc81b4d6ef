"""Offline RMSE table on the up-and-down tasks: Mamba (w=20) against full and windowed Transformers."""

from pathlib import Path

from _common import parser, seed_list, write_rows
from mambamotion import evaluator as ev

CELLS = [("updown-twice", "mamba"), ("updown-twice", "transformer-full"), ("updown-twice", "transformer-w20"),
         ("updown-repetitive", "transformer-full"), ("updown-repetitive", "transformer-w20")]


def main():
    p = parser(__doc__)
    p.add_argument("--with-lstm", action="store_true")
    args = p.parse_args()
    cells = CELLS + ([(t, "lstm") for t in ("updown-twice", "updown-repetitive")] if args.with_lstm else [])
    over = {"epochs": args.epochs} if args.epochs else None
    results = []
    for seed in seed_list(args.seeds):
        for task, name in cells:
            c = ev.run_cell(name, task, seed, over)
            print(f"seed {seed} {task:18s} {name:17s} rmse {c.rmse:.4f}", flush=True)
            results.append(c)
    write_rows(Path(args.out) / "table_offline.csv", ev.cells_to_rows(results))
    med = {(t, n): ev.median(c.rmse for c in results if (c.task, c.model) == (t, n)) for t, n in cells}
    for (t, n), v in med.items():
        print(f"median {t:18s} {n:17s} {v:.4f}")
    deg = {t: med[(t, "transformer-w20")] / med[(t, "transformer-full")] for t in ("updown-twice", "updown-repetitive")}
    print("windowed/full degradation:", {k: round(v, 3) for k, v in deg.items()})


if __name__ == "__main__":
    main()
