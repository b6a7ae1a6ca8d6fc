"""Scenario selection over the two published EyeQ confusion matrices.

    python3 scripts/table3_scenarios.py [--out runs/scenarios]

Reconstructs counts from the row-normalised percentages and the test-split
class totals, prints accuracy / recall per candidate, then runs
``fdqa scenario`` on them for each accuracy family.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from fdqa.cli import EXIT_OK, main
from fdqa.metrics import accuracy, counts_from_normalized, recall_macro

TEST_TOTALS = (8471, 4558, 3220)

# rows: true Good / Usable / Unusable, percent
FAMILIES = {
    "88.76": {
        "C_1": [[94.73, 5.19, 0.07], [10.93, 75.80, 13.27], [0.62, 8.11, 91.27]],
        "C_2": [[92.41, 7.54, 0.05], [8.89, 83.41, 7.70], [0.56, 12.58, 86.86]],
    },
    "89.03": {
        "C_1": [[94.70, 5.23, 0.07], [10.68, 77.56, 11.76], [0.62, 9.10, 90.28]],
        "C_2": [[93.38, 6.47, 0.15], [9.79, 82.16, 8.05], [0.40, 12.40, 87.20]],
    },
}


def run(out: Path) -> int:
    out.mkdir(parents=True, exist_ok=True)
    totals = ",".join(map(str, TEST_TOTALS))
    for fam, mats in FAMILIES.items():
        print(f"== family {fam}")
        rows = ["name," + ",".join(f"c{i}{j}" for i in range(3) for j in range(3))]
        for name, m in mats.items():
            C = counts_from_normalized(np.array(m), TEST_TOTALS)
            print(f"{name}: accuracy {accuracy(C):.4f} recall {recall_macro(C):.4f}")
            rows.append(name + "," + ",".join(f"{v:.2f}" for v in np.ravel(m)))
        cand = out / f"candidates_{fam}.csv"
        cand.write_text("\n".join(rows) + "\n")
        cfg = out / f"scenario_{fam}.cfg"
        cfg.write_text(f"scenario.candidates = {cand}\nscenario.totals = {totals}\n")
        code = main(["scenario", "--config", str(cfg), "--out", str(out / fam)])
        if code != EXIT_OK:
            return code
    return EXIT_OK


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", type=Path, default=Path("runs/scenarios"))
    sys.exit(run(ap.parse_args().out))
