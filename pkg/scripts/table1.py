"""Replicate the point and variance recovery study for one design.

usage: python scripts/table1.py flocking [--seeds 20] [--n 100] [--out results]
"""
import argparse
import json
import logging
from pathlib import Path

from clsna.experiments import REFERENCE, run_table, summarize_table


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("design", choices=["flocking", "polarization"])
    ap.add_argument("--seeds", type=int, default=20)
    ap.add_argument("--n", type=int, default=100)
    ap.add_argument("--out", default="results")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    path = Path(args.out) / f"table1_{args.design}_n{args.n}.json"
    doc = run_table(args.design, range(args.seeds), path, n=args.n)
    summary = summarize_table(doc)
    summary["reference"] = REFERENCE[args.design]
    print(json.dumps(summary, indent=2))


if __name__ == "__main__":
    main()
