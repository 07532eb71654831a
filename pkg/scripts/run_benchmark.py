"""Head-to-head benchmark: the full method against plain averaging.

Runs the 20-client, 4-class, heavily skewed reference setup for both
variants over three seeds, then prints the summary table. Round CSVs and
summary.json land in the output directory. Expect roughly a positive
one-point gap for the full method; takes a few minutes on one core.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from disue.cli import main as cli_main


def print_table(summary: dict) -> None:
    variants = summary["variants"]
    seeds = sorted(next(iter(variants.values()))["per_seed_final_acc"])
    header = ["variant"] + [f"seed {s}" for s in seeds] + ["mean", "std"]
    rows = []
    for name, entry in sorted(variants.items(), key=lambda kv: -kv[1]["final_acc_mean"]):
        cells = [name]
        cells += [f"{entry['per_seed_final_acc'][s]:.4f}" for s in seeds]
        cells += [f"{entry['final_acc_mean']:.4f}", f"{entry['final_acc_std']:.4f}"]
        rows.append(cells)
    widths = [max(len(r[i]) for r in [header] + rows) for i in range(len(header))]
    for row in [header] + rows:
        print("  ".join(cell.ljust(w) for cell, w in zip(row, widths)))


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out-dir", default="runs/benchmark")
    ap.add_argument("--rounds", type=int, default=50)
    ap.add_argument("--seeds", default="0,1,2", help="comma separated")
    args = ap.parse_args()

    argv = ["compare", "disue", "fedavg",
            "--clients", "20", "--act", "0.5", "--epsilon", "0.05",
            "--rounds", str(args.rounds), "--out-dir", args.out_dir]
    for seed in args.seeds.split(","):
        argv += ["--seed", seed.strip()]
    code = cli_main(argv)
    if code != 0:
        return code

    summary = json.loads((Path(args.out_dir) / "summary.json").read_text())
    print(f"\nfinal accuracy, mean of last {summary['window']} rounds:")
    print_table(summary)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
