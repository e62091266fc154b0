"""Wall time of one localization on the ~100-node, 3-interval bundle.

    python scripts/efficiency.py [--seed 11] [--max-epochs 1000]
"""
import argparse
import time

from edgerca import localizer as lz
from edgerca import metricdetect as md
from edgerca import synth
from edgerca import topostack as ts
from edgerca.experiments import big_spec


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--seed", type=int, default=11)
    ap.add_argument("--max-epochs", type=int, default=1000)
    args = ap.parse_args()
    gen = synth.generate_bundle(big_spec(args.seed))
    b = gen.bundle
    t0 = time.perf_counter()
    f = md.assemble_features(b.metrics)
    an = md.detect_anomalies(f)
    stack = ts.build_stack(b.snapshots, f, an, b.window)
    nodes = len(lz.prepare(stack, an).universe)
    r = lz.train_localize(stack, an, lz.TrainConfig(max_epochs=args.max_epochs))
    total = time.perf_counter() - t0
    print(f"nodes={nodes} intervals={len(stack)} anomalous={len(an)} epochs={r.epochs} "
          f"per-epoch={r.wall_time_s / r.epochs * 1000:.0f}ms total={total:.1f}s "
          f"truth rank={r.rank_of(gen.truth.target)}")


if __name__ == "__main__":
    main()
