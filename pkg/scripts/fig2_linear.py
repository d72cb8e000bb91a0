"""Linear model: final EIG at the checkpoint design for growing design dimension D.

    python scripts/fig2_linear.py --seeds 0 1 2 --D 1 5 10
"""

import argparse
import csv
from pathlib import Path

import numpy as np

from infodesign import experiments as E


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    ap.add_argument("--D", type=int, nargs="+", default=[1, 5, 10])
    ap.add_argument("--steps", type=int, default=2000)
    ap.add_argument("--lam", type=float, default=0.0)
    ap.add_argument("--out", default="runs/fig2")
    args = ap.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for seed in args.seeds:
        for D in args.D:
            r = E.linear_dimension_run(seed, D, steps=args.steps, lam=args.lam)
            rows.append({"seed": seed, "D": D, "eig": r["eig"], "eig_se": r["eig_se"],
                         "eig_star": r["checkpoint"].eig_star, "step_star": r["checkpoint"].step})
            r["record"].write_csv(out / f"metrics_D{D}_seed{seed}.csv")
            print(f"seed {seed} D {D:2d}: EIG {r['eig']:.3f} +- {r['eig_se']:.3f}", flush=True)
    with open(out / "final_eig.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    for D in args.D:
        v = np.array([r["eig"] for r in rows if r["D"] == D])
        se = v.std(ddof=1) / np.sqrt(v.size) if v.size > 1 else float("nan")
        print(f"D {D:2d}: {v.mean():.3f} +- {se:.3f}")


if __name__ == "__main__":
    main()
