"""Flow semimetric of the exponential family under compact-set refinement.

Shows the sampled sup converging as the grid on K is refined.
"""
import argparse
import csv
import math
from pathlib import Path

from flowtopo.geometry import ChartManifold
from flowtopo.jets import VectorFieldExpr
from flowtopo.flows import LocalFlowNum, flow_semimetric
from flowtopo.seminorms import CompactSample, SeminormSpec


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="out/scripts")
    ap.add_argument("--p", type=float, default=1.25)
    args = ap.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    man = ChartManifold.euclidean(1, 10.0)
    X = VectorFieldExpr.parse(["p1*x1 + 0.3*sin(3*x1)"], 1, 1)
    f = VectorFieldExpr.scalar("sin(2*x1)", 1)
    a, b = LocalFlowNum(man, X, (args.p,)), LocalFlowNum(man, X, (1.0,))
    rows = []
    for res in (5, 9, 17, 33, 65, 129, 257):
        K = CompactSample.grid([[-0.7, 1.1]], res)
        d0 = flow_semimetric(a, b, 1.0, 0.0, K, f)
        d1 = flow_semimetric(a, b, 1.0, 0.0, K, f, SeminormSpec("m", 1))
        d2 = flow_semimetric(a, b, 1.0, 0.0, K, f, SeminormSpec("m", 2))
        rows.append((res, K.mesh, d0, d1, d2))
        print(f"res={res:4d} mesh={K.mesh:.4f}  d0={d0:.6f}  d1={d1:.6f}  d2={d2:.6f}")
    with open(out / "mesh_refinement.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["resolution", "mesh", "d0", "d1", "d2"])
        w.writerows([[r[0], *map(repr, r[1:])] for r in rows])


if __name__ == "__main__":
    main()
