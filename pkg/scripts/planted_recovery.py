"""Planted-root-cause recovery over the 20-bundle application corpus.

    python scripts/planted_recovery.py [--n 20] [--out results.csv]
"""
import argparse
import time

from edgerca import evaluator as ev
from edgerca.experiments import PLANTED_BASE_SEED, planted_cases, planted_corpus, run_planted


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--n", type=int, default=20)
    ap.add_argument("--seed", type=int, default=PLANTED_BASE_SEED)
    ap.add_argument("--out", default=None, help="optional results CSV")
    args = ap.parse_args()
    t0 = time.perf_counter()
    corpus = planted_corpus(args.n, args.seed)
    print(f"generated {len(corpus)} bundles in {time.perf_counter() - t0:.1f}s", flush=True)

    def log(r):
        print(f"seed={r.seed} kind={r.kind:<11} target={r.target:<16} rank={r.rank} "
              f"epochs={r.epochs} {r.seconds:.1f}s", flush=True)

    results = run_planted(corpus, log=log)
    cases = planted_cases(results)
    top1, top3 = ev.hits(cases, 1).sum(), ev.hits(cases, 3).sum()
    print(f"top-1 {top1}/{len(cases)}  top-3 {top3}/{len(cases)}  total {time.perf_counter() - t0:.1f}s")
    if args.out:
        ev.write_results(args.out, [ev.summary_row("edgerca", "synthetic-planted", cases)])


if __name__ == "__main__":
    main()
