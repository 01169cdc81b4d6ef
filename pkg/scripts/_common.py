"""Shared helpers for the experiment runners."""

import argparse
import csv
from pathlib import Path


def parser(description: str, seeds: str = "0,1,2,3,4") -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(description=description)
    p.add_argument("--seeds", default=seeds, help="comma-separated seed list")
    p.add_argument("--out", default="results", help="directory for CSV output")
    p.add_argument("--epochs", type=int, help="override every training budget")
    return p


def seed_list(text: str) -> list[int]:
    return [int(s) for s in text.split(",") if s]


def write_rows(path: Path, rows: list[dict]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    keys = list(dict.fromkeys(k for r in rows for k in r))
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, keys, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: format(v, ".17g") if isinstance(v, float) else v for k, v in r.items()})
    print(f"wrote {path}")
