"""End-to-end incident localization over one telemetry bundle.

Kernel evidence is checked first; a kernel verdict short-circuits the
metric-driven model unless ``force_app_level`` is set.
"""
from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field

from . import kerneldetect as kd
from . import logparse as lp
from . import metricdetect as md
from . import topostack as ts
from .localizer import LocalizeError, TrainConfig, train_localize


class PipelineError(RuntimeError):
    def __init__(self, stage, cause):
        super().__init__(f"[{stage}] {cause}")
        self.stage = stage
        self.cause = cause


@dataclass
class PipelineConfig:
    beta: float = 0.07
    rtt_limit: float = 1.0
    fail_threshold: float = 0.9
    force_app_level: bool = False
    min_support: int = 3
    bucket_s: float = 60.0  # kernel health is judged on the worst bucket of this width
    min_bucket_packets: int = 10
    train: TrainConfig = field(default_factory=TrainConfig)

    def to_dict(self):
        return asdict(self)


@dataclass
class IncidentReport:
    level: str  # kernel | application | none
    verdict: object
    anomalous: object = None
    ranking: object = None
    stack: object = None
    templates: int = 0
    packets_source: str = ""
    timings: dict = field(default_factory=dict)
    config: PipelineConfig = None

    @property
    def epochs(self):
        return self.ranking.epochs if self.ranking is not None else 0

    @property
    def wall_time_s(self):
        return sum(self.timings.values())

    @property
    def top(self):
        """Best candidate: a node id, or ``src|dst`` of the worst traffic key."""
        if self.level == "kernel":
            k = self.verdict.culprits[0][0]
            return f"{k.src}|{k.dst}"
        if self.ranking is not None:
            return self.ranking.ids[0]
        return None

    def to_dict(self, window=None, timings=False):
        d = {
            "level": self.level,
            "verdict": self.verdict.to_dict() if self.verdict is not None else None,
            "anomalous": self.anomalous.to_dict(window)["nodes"] if self.anomalous is not None else [],
            "ranking": self.ranking.to_list() if self.ranking is not None else [],
            "epochs": self.epochs,
            "templates": self.templates,
            "packets_source": self.packets_source,
            "config": self.config.to_dict() if self.config is not None else None,
        }
        if self.stack is not None:
            d["stack"] = self.stack.dump()
        if timings:
            d["wall_time_s"] = round(self.wall_time_s, 3)
            d["timings"] = {k: round(v, 3) for k, v in self.timings.items()}
        return d


def _stage(name, timings, fn, *args, **kwargs):
    t0 = time.perf_counter()
    try:
        return fn(*args, **kwargs)
    except PipelineError:
        raise
    except Exception as exc:  # tag and re-raise with the failing stage
        raise PipelineError(name, exc) from exc
    finally:
        timings[name] = timings.get(name, 0.0) + time.perf_counter() - t0


def kernel_stage(bundle, config, timings=None):
    """(verdict, template count, packet source) for one bundle."""
    timings = {} if timings is None else timings
    packets, source, n_templates = bundle.packets, "packets", 0
    if bundle.logs:
        corpus = _stage("logparse", timings, lp.parse_corpus, bundle.logs, None, config.min_support)
        n_templates = len(corpus.tree.clusters)
        parsed = [p for p in corpus.packets() if bundle.window.contains(p.ts)]
        if parsed:
            packets, source = parsed, "logs"

    def detect():
        reports = kd.match_all(packets, config.rtt_limit)
        worst = [kd.worst_window(r, config.bucket_s, config.min_bucket_packets) for r in reports]
        return kd.detect_kernel_failure(worst, config.fail_threshold, bundle.window)

    verdict = _stage("kerneldetect", timings, detect)
    return verdict, n_templates, source


def localize_incident(bundle, config=None):
    config = config or PipelineConfig()
    timings = {}
    verdict, n_templates, source = kernel_stage(bundle, config, timings)
    report = IncidentReport("kernel" if verdict.failure else "none", verdict, templates=n_templates,
                            packets_source=source, timings=timings, config=config)
    if verdict.failure and not config.force_app_level:
        return report
    features = _stage("metricdetect", timings, md.assemble_features, bundle.metrics, bundle.window)
    anomalies = _stage("metricdetect", timings, md.detect_anomalies, features, config.beta)
    report.anomalous = anomalies
    stack = _stage("topostack", timings, ts.build_stack, bundle.snapshots, features, anomalies, bundle.window)
    report.stack = stack
    if not len(anomalies):
        if verdict.failure:
            return report
        raise PipelineError("localizer", LocalizeError("no anomalous nodes: localization cannot start"))
    report.ranking = _stage("localizer", timings, train_localize, stack, anomalies, config.train)
    if not verdict.failure:
        report.level = "application"
    return report
