"""Change-point recovery: BIC scan on data with a between-group sign flip at t=6, and on stationary data.

usage: python scripts/changepoint.py change|null [--seeds 20] [--n 100] [--out results]
"""
import argparse
import json
import logging
from pathlib import Path

from clsna.experiments import run_changepoint, summarize_changepoint


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("kind", choices=["change", "null"])
    ap.add_argument("--seeds", type=int, default=20)
    ap.add_argument("--n", type=int, default=100)
    ap.add_argument("--out", default="results")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    path = Path(args.out) / f"changepoint_{args.kind}_n{args.n}.json"
    doc = run_changepoint(args.kind, range(args.seeds), path, n=args.n)
    print(json.dumps(summarize_changepoint(doc), indent=2))


if __name__ == "__main__":
    main()
