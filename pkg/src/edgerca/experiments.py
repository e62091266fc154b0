"""Fixed synthetic workloads shared by the scripts and the acceptance suite."""
from __future__ import annotations

import time
from dataclasses import dataclass, field

from . import evaluator as ev
from . import synth
from .pipeline import PipelineConfig, kernel_stage, localize_incident
from .synth import FailureSpec, ScaleEvent, ScenarioSpec, SystemSpec

PLANTED_BASE_SEED = 1000
APP_MATRIX = tuple(("application", k) for k in synth.APP_KINDS)


def planted_corpus(n=20, base_seed=PLANTED_BASE_SEED):
    """Application failures on two hybrid systems over a cloud and two edge segments."""
    return synth.generate_corpus(ScenarioSpec(seed=base_seed), n, matrix=APP_MATRIX)


def big_spec(seed=11):
    """About 100 nodes, with two scale-ups that split the window into 3 intervals."""
    return ScenarioSpec(systems=[SystemSpec("shop", 15), SystemSpec("books", 15)],
                        servers_per_segment={"cloud": 6, "edge-1": 2, "edge-2": 2}, max_replicas=3,
                        scale_events=[ScaleEvent(200.0, "shop-svc1"), ScaleEvent(420.0, "books-svc2")],
                        failure=FailureSpec("application", "net_latency", delta=200.0), seed=seed)


@dataclass
class CaseResult:
    seed: int
    kind: str
    target: str
    rank: int | None
    epochs: int
    seconds: float
    ids: list = field(default_factory=list)


def run_planted(corpus, config=None, log=None):
    config = config or PipelineConfig()
    out = []
    for gen in corpus:
        t0 = time.perf_counter()
        rep = localize_incident(gen.bundle, config)
        ids = rep.ranking.ids if rep.ranking is not None else []
        res = CaseResult(gen.spec.seed, gen.truth.kind, gen.truth.target,
                         rep.ranking.rank_of(gen.truth.target) if rep.ranking is not None else None,
                         rep.epochs, time.perf_counter() - t0, ids)
        out.append(res)
        if log:
            log(res)
    return out


def planted_cases(results):
    return [ev.LabeledCase(tuple(r.ids), r.target, f"application:{r.kind}") for r in results]


def kernel_matrix(seed=200, rate=0.3):
    """(kind, truth target, verdict) per kernel failure kind, plus clean bundles."""
    config = PipelineConfig()
    rows = []
    for i, kind in enumerate(synth.KERNEL_KINDS):
        gen = synth.generate_bundle(ScenarioSpec(seed=seed + i, failure=FailureSpec("kernel", kind, rate=rate)))
        verdict, _, _ = kernel_stage(gen.bundle, config)
        rows.append((kind, gen.truth.target, verdict))
    for j in range(3):
        gen = synth.generate_bundle(ScenarioSpec(seed=seed + 50 + j))
        verdict, _, _ = kernel_stage(gen.bundle, config)
        rows.append(("clean", None, verdict))
    return rows


def culprit_name(verdict, index=0):
    k = verdict.culprits[index][0]
    return f"{k.src}|{k.dst}"

