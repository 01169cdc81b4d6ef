"""Closed-loop rollouts: success tallies and vibration for each model, LPF and 25 ms variants."""

from pathlib import Path

import numpy as np

from _common import parser, write_rows
from mambamotion import evaluator as ev

VARIANTS = [("mamba", 0.1, None), ("mamba", 0.025, None), ("transformer-w20", 0.1, None),
            ("transformer-full", 0.1, None), ("transformer-full", 0.1, 0.3)]


def main():
    p = parser(__doc__, seeds="0")
    p.add_argument("--task", default="cup-placing")
    p.add_argument("--rollouts", type=int, default=20)
    args = p.parse_args()
    seed = int(args.seeds.split(",")[0])
    over = {"epochs": args.epochs} if args.epochs else None
    refs = ev.reference_trials(args.task, args.rollouts, seed)
    crit = ev.DEFAULT_CRITERIA[args.task]
    models = {n: ev.run_cell(n, args.task, seed, over, return_model=True)[1] for n in {v[0] for v in VARIANTS}}
    rows = []
    for name, cycle, tau in VARIANTS:
        r, ros = ev.evaluate_online(models[name], name, refs, crit, cycle, tau)
        rows += r
        lat = max(max(ro.latencies) for ro in ros)
        print(f"{name:17s} cycle {cycle * 1000:4.0f} ms lpf {tau or 0:.1f}: "
              f"success {sum(x['success'] for x in r)}/{len(r)}, "
              f"median vibration {np.median([x['vibration'] for x in r]):.2f}, max latency {1000 * lat:.2f} ms")
    write_rows(Path(args.out) / f"online_{args.task}.csv", rows)


if __name__ == "__main__":
    main()
