"""Kernel-level detection for each failure kind at rate 0.3, plus clean bundles.

    python scripts/kernel_matrix.py
"""
from edgerca.experiments import culprit_name, kernel_matrix


def main():
    ok = 0
    rows = kernel_matrix()
    for kind, target, verdict in rows:
        if target is None:
            good = not verdict.failure
            print(f"{kind:<12} failure={verdict.failure}")
        else:
            good = verdict.failure and culprit_name(verdict) == target
            top = culprit_name(verdict) if verdict.culprits else "-"
            print(f"{kind:<12} failure={verdict.failure} top={top} truth={target}")
        ok += bool(good)
    print(f"{ok}/{len(rows)} correct")


if __name__ == "__main__":
    main()
