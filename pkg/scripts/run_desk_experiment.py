"""Desk-scale end-to-end run: synthesize, train hierarchy + flat baseline, evaluate.

    python3 scripts/run_desk_experiment.py --out runs/desk [--epochs 10] [--seed 0]

Writes the usual run directory (data/, models/, eval/) and prints the timing
split and the hierarchical-vs-flat comparison.
"""

from __future__ import annotations

import argparse
import os
import sys
import time
from pathlib import Path

from fdqa.cli import EXIT_OK, main


def run(out: Path, epochs: int, seed: int, workers: int) -> int:
    out.mkdir(parents=True, exist_ok=True)
    cfg = out / "desk.cfg"
    cfg.write_text(
        "data.resolution = 64\n"
        "synth.train_per_class = 300\n"
        "synth.test_per_class = 100\n"
        f"train.epochs = {epochs}\n"
        f"train.workers = {workers}\n"
        f"eval.workers = {workers}\n"
    )
    args = ["--config", str(cfg), "--out", str(out), "--seed", str(seed)]
    times = {}
    for cmd in ("synth", "train", "eval"):
        t0 = time.perf_counter()
        code = main([cmd, *args])
        times[cmd] = time.perf_counter() - t0
        if code != EXIT_OK:
            return code
    print("")
    print(" ".join(f"{k}={v:.1f}s" for k, v in times.items()), f"total={sum(times.values()):.1f}s")
    print((out / "eval" / "comparison.txt").read_text(), end="")
    return EXIT_OK


def parse_args(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", type=Path, default=Path("runs/desk"))
    ap.add_argument("--epochs", type=int, default=10)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--workers", type=int, default=min(3, os.cpu_count() or 1))
    return ap.parse_args(argv)


if __name__ == "__main__":
    a = parse_args()
    sys.exit(run(a.out, a.epochs, a.seed, a.workers))
