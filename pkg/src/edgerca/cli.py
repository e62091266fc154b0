"""``edgerca`` command line: parse-logs, localize, evaluate, synth.

Exit codes: 0 success, 1 internal error, 2 bad input.
"""
from __future__ import annotations

import json
import os
import platform
import sys
import tempfile
import time
from pathlib import Path

import click
import numpy as np

from . import __version__
from . import evaluator as ev
from . import logparse as lp
from . import synth
from . import telemetry as tm
from .localizer import TrainConfig
from .pipeline import PipelineConfig, PipelineError, localize_incident


class InputError(click.ClickException):
    exit_code = 2


def _atomic_write(path, text):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _dump(obj):
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def write_manifest(output, subcommand, inputs, config, seed, timings):
    """RunManifest JSON written next to ``output`` as ``<name>.manifest.json``."""
    output = Path(output)
    target = (output / "run.manifest.json") if output.is_dir() else output.with_name(output.name + ".manifest.json")
    manifest = {
        "subcommand": subcommand,
        "inputs": [str(p) for p in inputs],
        "config": config,
        "seed": seed,
        "versions": {"edgerca": __version__, "python": platform.python_version(), "numpy": np.__version__},
        "timings": {k: round(v, 3) for k, v in timings.items()},
    }
    _atomic_write(target, _dump(manifest))
    return target


def _load_config_file(path):
    if path is None:
        return {}
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise InputError(f"cannot read config {path}: {exc}") from None


@click.group()
@click.version_option(__version__)
def main():
    """Root-cause localization for cloud-edge microservice incidents."""


@main.command("parse-logs")
@click.argument("infile", type=click.Path(dir_okay=False))
@click.argument("outdir", type=click.Path(file_okay=False))
@click.option("--min-support", default=3, show_default=True, help="Clusters below this support are pruned.")
def cmd_parse_logs(infile, outdir, min_support):
    """Mine templates from INFILE; write templates.jsonl and content.jsonl to OUTDIR."""
    t0 = time.perf_counter()
    if not Path(infile).is_file():
        raise InputError(f"missing log file: {infile}")
    lines = tm.load_logs(infile)
    if not lines:
        raise InputError(f"log file is empty: {infile}")
    try:
        corpus = lp.parse_corpus(lines, min_support=min_support)
    except (lp.ExtractionError, ValueError) as exc:
        raise InputError(f"parse error: {exc}") from None
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    _atomic_write(out / "templates.jsonl", "".join(json.dumps(r, sort_keys=True) + "\n" for r in corpus.tree.dump()))
    rows = []
    for line, cid, vc in corpus.assignments:
        rows.append(json.dumps({"ts": line.ts, "cluster": cid, "content": vc.to_dict() if vc else None},
                               sort_keys=True))
    _atomic_write(out / "content.jsonl", "".join(r + "\n" for r in rows))
    write_manifest(out, "parse-logs", [infile], {"min_support": min_support}, None,
                   {"total": time.perf_counter() - t0})
    click.echo(f"{len(corpus.tree.clusters)} templates from {len(lines)} lines")


@main.command("localize")
@click.argument("bundle", type=click.Path())
@click.option("--out", "out", type=click.Path(dir_okay=False), default=None,
              help="Report path (default: BUNDLE/report.json).")
@click.option("--config", "config_file", type=click.Path(dir_okay=False), default=None)
@click.option("--beta", type=float, default=None)
@click.option("--gamma", type=float, default=None)
@click.option("--hidden", type=int, default=None)
@click.option("--lr", type=float, default=None)
@click.option("--seed", type=int, default=None)
@click.option("--max-epochs", type=int, default=None)
@click.option("--rtt-limit", type=float, default=None)
@click.option("--fail-threshold", type=float, default=None)
@click.option("--force-app-level", is_flag=True, default=None)
@click.option("--timings", is_flag=True, help="Also put wall-clock timings in the report.")
def cmd_localize(bundle, out, config_file, timings, **flags):
    """Localize the root cause of the incident in BUNDLE."""
    file_cfg = _load_config_file(config_file)
    merged = {**file_cfg, **{k: v for k, v in flags.items() if v is not None}}
    try:
        train = TrainConfig(lr0=merged.get("lr", 0.01), gamma=merged.get("gamma", 1e-5),
                            hidden=merged.get("hidden", 64), seed=merged.get("seed", 0),
                            max_epochs=merged.get("max_epochs", 1000))
        cfg = PipelineConfig(beta=merged.get("beta", 0.07), rtt_limit=merged.get("rtt_limit", 1.0),
                             fail_threshold=merged.get("fail_threshold", 0.9),
                             force_app_level=bool(merged.get("force_app_level", False)), train=train)
    except (ValueError, TypeError) as exc:
        raise InputError(f"bad configuration: {exc}") from None
    try:
        b = tm.load_bundle(bundle)
    except tm.BundleError as exc:
        raise InputError(str(exc)) from None
    except tm.TelemetryError as exc:
        raise InputError(f"bad bundle: {exc}") from None
    try:
        report = localize_incident(b, cfg)
    except PipelineError as exc:
        if exc.stage == "localizer" and "no anomalous" in str(exc):
            raise InputError(str(exc)) from None
        click.echo(f"error: {exc}", err=True)
        sys.exit(1)
    out = Path(out) if out else Path(bundle) / "report.json"
    _atomic_write(out, _dump(report.to_dict(b.window, timings=timings)))
    write_manifest(out, "localize", [bundle], cfg.to_dict(), cfg.train.seed, report.timings)
    click.echo(f"{report.level}: {report.top}")


def _report_case(path):
    d = json.loads(Path(path).read_text())
    if d.get("level") == "kernel":
        ids = [f"{c['src']}|{c['dst']}" for c in d["verdict"]["culprits"]]
    else:
        ids = [r["id"] for r in d.get("ranking", [])]
    return ids


@main.command("evaluate")
@click.argument("reports", type=click.Path(file_okay=False))
@click.argument("truths", type=click.Path(file_okay=False))
@click.argument("out", type=click.Path(dir_okay=False))
@click.option("--approach", default="edgerca", show_default=True)
@click.option("--dataset", default="synthetic", show_default=True)
@click.option("--baseline", type=click.Path(file_okay=False), default=None,
              help="Reports of a second approach for the per-case t-test.")
def cmd_evaluate(reports, truths, out, approach, dataset, baseline):
    """Score REPORTS/<case>.json against TRUTHS/<case>/ground_truth.json into a results CSV."""
    t0 = time.perf_counter()

    def load_cases(rdir):
        paths = sorted(Path(rdir).glob("*.json")) if Path(rdir).is_dir() else []
        paths = [p for p in paths if not p.name.endswith(".manifest.json")]
        if not paths:
            raise InputError(f"no reports in {rdir}")
        cases = []
        for p in paths:
            truth_file = Path(truths) / p.stem / "ground_truth.json"
            if not truth_file.is_file():
                raise InputError(f"report {p.name} has no ground truth at {truth_file}")
            truth = json.loads(truth_file.read_text())
            cases.append(ev.LabeledCase.of(_report_case(p), truth["target"], f"{truth['level']}:{truth['kind']}"))
        return cases

    cases = load_cases(reports)
    base = load_cases(baseline) if baseline else None
    row = ev.summary_row(approach, dataset, cases, base)
    ev.write_results(out, [row])
    write_manifest(out, "evaluate", [reports, truths], {"approach": approach, "dataset": dataset}, None,
                   {"total": time.perf_counter() - t0})
    click.echo(f"ACC@1={row['ACC@1']:.3f} over {len(cases)} cases")


@main.command("synth")
@click.argument("spec_file", type=click.Path(dir_okay=False))
@click.argument("outdir", type=click.Path(file_okay=False))
@click.option("-n", "n", type=int, default=1, show_default=True, help="Corpus size.")
def cmd_synth(spec_file, outdir, n):
    """Generate N labelled bundles from the scenario in SPEC_FILE (JSON)."""
    t0 = time.perf_counter()
    try:
        raw = json.loads(Path(spec_file).read_text())
        spec = synth.spec_from_dict(raw)
        if n == 1 and spec.failure is not None:
            gens = [synth.generate_bundle(spec)]
        else:
            gens = synth.generate_corpus(spec, n)
    except (OSError, json.JSONDecodeError, synth.SpecError, ValueError) as exc:
        raise InputError(f"invalid spec {spec_file}: {exc}") from None
    out = Path(outdir)
    width = max(3, len(str(len(gens) - 1)))
    for i, g in enumerate(gens):
        synth.write_bundle(g, out / f"case{i:0{width}d}")
    write_manifest(out, "synth", [spec_file], synth.spec_to_dict(spec), spec.seed,
                   {"total": time.perf_counter() - t0})
    click.echo(f"{len(gens)} bundles in {out}")


if __name__ == "__main__":
    main()
