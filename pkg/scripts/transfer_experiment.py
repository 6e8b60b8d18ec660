"""Run the transfer comparison and print mean target accuracy per plan."""

import argparse
import csv
import sys
from pathlib import Path

import numpy as np

from nora import config as cfgmod
from nora.experiment import run_experiment

HERE = Path(__file__).resolve().parent


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config", default=str(HERE / "configs" / "transfer.yaml"))
    ap.add_argument("--out", default="runs/transfer")
    ap.add_argument("--seeds", type=int, help="use only the first N seeds")
    args = ap.parse_args(argv)

    cfg = cfgmod.load(args.config)
    if args.seeds:
        matrix = dict(cfg.adaptation.matrix)
        matrix["seed"] = list(matrix.get("seed", [0]))[: args.seeds]
        cfg = cfgmod.override(cfg, "adaptation.matrix", matrix)
    runner = run_experiment(cfg, args.out)

    acc, params = {}, {}
    for r in runner.report["runs"]:
        plan = r["run_id"].split("/")[0]
        acc.setdefault(plan, []).append(100.0 * r["final"]["eval_acc"])
        params[plan] = r["trainable_params"]
    rows = [
        {"plan": p, "mean_acc": round(float(np.mean(v)), 3), "std_acc": round(float(np.std(v)), 3), "seeds": len(v), "trainable_params": params[p]}
        for p, v in acc.items()
    ]
    out = Path(args.out) / "plans.csv"
    with out.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    print(f"{'plan':<12}{'acc':>8}{'std':>8}{'params':>9}")
    for r in rows:
        print(f"{r['plan']:<12}{r['mean_acc']:>8.2f}{r['std_acc']:>8.2f}{r['trainable_params']:>9}")
    print(f"wrote {out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
