"""CE vs MbLS over several seeds: mean test ECE and DSC on the synthetic task.

    python3 scripts/calibration_trend.py --seeds 0 1 2 3 4
"""
import argparse
import json
import time

import numpy as np

from calmargin.losses import LossConfig
from calmargin.trainer import SyntheticTask, evaluate_split, fit_model, generate_dataset

METHODS = {
    "CE": LossConfig("CE"),
    "MBLS_m8": LossConfig("MBLS_L1", margin=8.0, lam=0.1, name="MBLS_m8"),
}


def run(seeds):
    rows = {name: [] for name in METHODS}
    for seed in seeds:
        task = SyntheticTask(seed=seed)
        data = generate_dataset(task)
        for name, loss in METHODS.items():
            res = fit_model(seed, loss, task, data=data)
            d, e = evaluate_split(res.model, data.test)
            rows[name].append((d, e))
    return {name: np.array(v) for name, v in rows.items()}


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    ap.add_argument("--json", action="store_true")
    args = ap.parse_args()
    t0 = time.perf_counter()
    res = run(args.seeds)
    summary = {n: {"dsc": float(v[:, 0].mean()), "ece": float(v[:, 1].mean()),
                   "per_seed_ece": v[:, 1].tolist()} for n, v in res.items()}
    if args.json:
        print(json.dumps(summary, indent=2))
    else:
        for n, s in summary.items():
            print(f"{n:10s} DSC {s['dsc']:.4f}  ECE {s['ece']:.4f}")
        print(f"({time.perf_counter() - t0:.1f} s)")


if __name__ == "__main__":
    main()
