"""Run every shipped config and print the verdict table.

Usage: python3 scripts/continuity_sweep.py [--out out/sweep] [--threads 4]
"""
import argparse
from pathlib import Path

from flowtopo.config import ExperimentConfig
from flowtopo.harness import run_all

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="out/sweep")
    ap.add_argument("--threads", type=int, default=1)
    args = ap.parse_args()
    for path in sorted(CONFIGS.glob("*.json")):
        cfg = ExperimentConfig.load(path)
        res = run_all(cfg, Path(args.out) / path.stem, args.threads)
        cells = "  ".join(f"{k}={v}" for k, v in res.verdicts.items())
        print(f"{path.stem:<14} {cells}")


if __name__ == "__main__":
    main()
