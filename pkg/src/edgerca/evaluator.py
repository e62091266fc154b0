"""Top-K accuracy, its running average, and a Welch t-test on per-case hits."""
from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import stats

KS = (1, 2, 3, 5, 10)
CSV_COLUMNS = (["approach", "dataset"] + [f"ACC@{k}" for k in KS] + [f"AVG@{k}" for k in KS]
               + ["p_value"])


class EvalError(ValueError):
    pass


@dataclass(frozen=True)
class LabeledCase:
    ranking: tuple  # node ids, best first
    truth: str
    failure_class: str = ""

    @classmethod
    def of(cls, ranking, truth, failure_class=""):
        ids = ranking.ids if hasattr(ranking, "ids") else ranking
        truth = getattr(truth, "id", truth)
        return cls(tuple(ids), truth, failure_class)

    def rank(self):
        """1-based rank of the truth, or None when it is absent."""
        try:
            return self.ranking.index(self.truth) + 1
        except ValueError:
            return None


def _check(cases, k, name):
    if not cases:
        raise EvalError("no cases to evaluate")
    if int(k) != k or k < 1:
        raise EvalError(f"{name} must be a positive integer, got {k!r}")


def hits(cases, k):
    """Per-case 0/1 indicator of the truth being in the top ``k``."""
    _check(cases, k, "k")
    out = []
    for c in cases:
        r = c.rank()
        out.append(1 if r is not None and r <= k else 0)
    return np.array(out, dtype=np.int64)


def acc_at_k(cases, k):
    return float(hits(cases, k).sum()) / len(cases)


def avg_at_n(cases, n):
    _check(cases, n, "n")
    return sum(acc_at_k(cases, k) for k in range(1, n + 1)) / n


def t_test(hits_a, hits_b):
    """Two-sided Welch test on two hit vectors; p = 1 when both are constant and equal."""
    a = np.asarray(hits_a, dtype=np.float64)
    b = np.asarray(hits_b, dtype=np.float64)
    if a.size < 2 or b.size < 2:
        raise EvalError("t_test needs at least 2 cases per sample")
    va, vb = a.var(ddof=1), b.var(ddof=1)
    if va == 0 and vb == 0:
        return 1.0 if a.mean() == b.mean() else 0.0
    with warnings.catch_warnings():
        # scipy flags a constant sample as "nearly identical"; 0/1 data has an exact zero variance
        warnings.simplefilter("ignore", RuntimeWarning)
        res = stats.ttest_ind(a, b, equal_var=False)
    p = float(res.pvalue)
    return 1.0 if math.isnan(p) else p


def summary_row(approach, dataset, cases, baseline=None, k_for_test=1):
    """One results row; the p-value compares against ``baseline`` cases when given."""
    row = {"approach": approach, "dataset": dataset}
    for k in KS:
        row[f"ACC@{k}"] = acc_at_k(cases, k)
    for k in KS:
        row[f"AVG@{k}"] = avg_at_n(cases, k)
    if baseline is not None:
        row["p_value"] = t_test(hits(cases, k_for_test), hits(baseline, k_for_test))
    else:
        row["p_value"] = ""
    return row


def write_results(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CSV_COLUMNS, lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in row.items()})
