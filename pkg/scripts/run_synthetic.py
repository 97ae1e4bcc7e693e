"""Synthetic two-stage experiment: does web image/tag adaptation teach unseen visual concepts?

Prints held-out retrieval for Stage I alone and for Stage I+II, per seed and
averaged. Usage: python scripts/run_synthetic.py [--seeds 0 1 2] [--json out.json]
"""

import argparse
import json
import logging
import time

import numpy as np

from webvse.experiment import TOY_CONFIG, run_synthetic_seed


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--json", default=None)
    ap.add_argument("-v", "--verbose", action="store_true")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)

    rows = []
    t0 = time.time()
    for seed in args.seeds:
        res = run_synthetic_seed(seed, TOY_CONFIG)
        rows.append(res)
        print(
            f"seed {seed}: stageI t2i R@1 {res['stage1_r1_t2i']:.1f} web {res['stage1_web_r1_t2i']:.1f} "
            f"rsum {res['stage1_rsum']:.1f} | I+II t2i R@1 {res['stage2_r1_t2i']:.1f} "
            f"web {res['stage2_web_r1_t2i']:.1f} rsum {res['stage2_rsum']:.1f}"
        )
    mean = {k: float(np.mean([r[k] for r in rows])) for k in rows[0]}
    print("mean:", json.dumps({k: round(v, 2) for k, v in mean.items()}))
    print(f"elapsed {time.time() - t0:.1f}s")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump({"seeds": rows, "mean": mean}, fh, indent=2)


if __name__ == "__main__":
    main()
