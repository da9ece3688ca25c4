"""``mpq`` command line: fixtures, calibration, AdaRound, sensitivity, search.

Every subcommand reads and writes artifacts inside ``--out DIR``::

    specs.json        mpq calibrate
    adaround_cache/   mpq adaround
    sensitivity.csv   mpq sensitivity
    pareto.csv        mpq pareto
    result.json       mpq search
    eval.json         mpq eval

Exit codes: 0 success, 2 budget not met, 1 any error.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Optional

from . import __version__
from .adaround import AdaRoundCache, AdaRoundConfig, adaround_network
from .fixtures import KINDS, make_fixture, write_fixture
from .graph import load_dataset, load_model
from .metrics import EvalReport, assignment_digest
from .quant import (
    Candidate,
    baseline_candidate,
    calibrate,
    check_assignment,
    derive_quantizer_groups,
    load_specs,
    parse_candidates,
    save_specs,
)
from .search import STRATEGIES, BopsModel, BudgetSpec, Evaluator, pareto_curve, phase2
from .sensitivity import METRICS, SensitivityList, build_sensitivity_list, sensitivity_report

log = logging.getLogger("mpq")

EXIT_OK, EXIT_ERROR, EXIT_BUDGET_UNMET = 0, 1, 2

SPECS, CACHE, SENS, PARETO, RESULT, EVAL = (
    "specs.json", "adaround_cache", "sensitivity.csv", "pareto.csv", "result.json", "eval.json")


class PipelineError(RuntimeError):
    pass


@dataclass
class RunConfig:
    candidates: str = "W4A8,W8A8,W8A16"
    metric: str = "sqnr"
    eval_metric: str = "accuracy"
    budget_kind: str = "efficiency"
    target: float = 0.5
    strategy: str = "sequential"
    weights: str = "nearest"
    seed: int = 0
    workers: int = 1
    mse_grid: int = 100
    pin_input_to_baseline: bool = False
    sqnr_mode: str = "ratio"
    adaround_iters: int = 1000

    def __post_init__(self):
        cands = self.candidate_list()
        if not cands:
            raise ValueError("candidate set is empty")
        if self.metric not in METRICS:
            raise ValueError(f"unknown metric {self.metric!r}; choose from {METRICS}")
        if self.eval_metric not in METRICS:
            raise ValueError(f"unknown eval metric {self.eval_metric!r}")
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}")
        if self.weights not in ("nearest", "adaround"):
            raise ValueError(f"unknown weights {self.weights!r}")
        if self.workers < 1 or self.mse_grid < 1 or self.adaround_iters < 1:
            raise ValueError("workers, mse_grid and adaround_iters must be positive")
        self.budget()

    def candidate_list(self):
        return parse_candidates(self.candidates)

    def budget(self) -> BudgetSpec:
        return BudgetSpec(self.budget_kind, float(self.target), self.eval_metric)

    @classmethod
    def from_json(cls, doc: dict) -> "RunConfig":
        doc = dict(doc)
        budget = doc.pop("budget", None)
        if isinstance(budget, dict):
            doc.setdefault("budget_kind", budget.get("kind", cls.budget_kind))
            doc.setdefault("target", budget.get("target", cls.target))
            if "eval_metric" in budget:
                doc.setdefault("eval_metric", budget["eval_metric"])
        if isinstance(doc.get("candidates"), list):
            doc["candidates"] = ",".join(doc["candidates"])
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(doc) - known)
        if unknown:
            raise ValueError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**doc)


# --------------------------------------------------------------------------
# helpers


def _write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def _require(path: Path, producer: str) -> Path:
    if not path.exists():
        raise PipelineError(f"missing {path} (run `mpq {producer}` first)")
    return path


class _Ctx:
    """Resolved paths and config for one invocation."""

    def __init__(self, args, cfg: RunConfig):
        self.cfg = cfg
        self.out = Path(args.out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.model_dir = Path(args.model) if args.model else self.out / "model"
        self.calib_path = Path(args.calib) if args.calib else self.out / "calib"
        self.eval_path = Path(args.eval) if args.eval else self.out / "eval"
        self._graph = None

    @property
    def graph(self):
        if self._graph is None:
            self._graph = load_model(self.model_dir)
        return self._graph

    def groups(self):
        return derive_quantizer_groups(self.graph)

    def specs(self):
        return load_specs(_require(self.out / SPECS, "calibrate"))

    def weight_source(self, weights: Optional[str] = None):
        if (weights or self.cfg.weights) == "nearest":
            return None
        return AdaRoundCache.load(_require(self.out / CACHE / "manifest.json", "adaround").parent)

    def slist(self) -> SensitivityList:
        return SensitivityList.load(_require(self.out / SENS, "sensitivity"))


# --------------------------------------------------------------------------
# subcommands


def cmd_fixture(args, cfg: RunConfig) -> int:
    fx = make_fixture(args.kind, cfg.seed)
    paths = write_fixture(fx, args.out)
    _write_json(Path(args.out) / "fixture.json",
                {"kind": args.kind, "seed": cfg.seed, "sensitive_layer": fx.sensitive})
    log.info("fixture %s written to %s", args.kind, paths["model"].parent)
    return EXIT_OK


def cmd_calibrate(ctx: _Ctx) -> int:
    calib = load_dataset(ctx.calib_path)
    specs = calibrate(ctx.graph, calib, ctx.cfg.candidate_list(), method="mse", grid=ctx.cfg.mse_grid)
    save_specs(specs, ctx.out / SPECS)
    return EXIT_OK


def cmd_adaround(ctx: _Ctx) -> int:
    specs = ctx.specs()
    calib = load_dataset(ctx.calib_path)
    w_bits = sorted({c.w_bits for c in ctx.cfg.candidate_list()})
    config = AdaRoundConfig(iters=ctx.cfg.adaround_iters, seed=ctx.cfg.seed)
    cache = adaround_network(ctx.graph, specs, calib, w_bits, config)
    cache.save(ctx.out / CACHE)
    return EXIT_OK


def cmd_sensitivity(ctx: _Ctx) -> int:
    cfg = ctx.cfg
    slist = build_sensitivity_list(
        ctx.graph, ctx.specs(), ctx.groups(), cfg.candidate_list(), load_dataset(ctx.calib_path),
        cfg.metric, ctx.weight_source(), cfg.workers,
        pin_input=cfg.pin_input_to_baseline, sqnr_mode=cfg.sqnr_mode, seed=cfg.seed,
    )
    slist.metadata["weights"] = cfg.weights
    slist.save(ctx.out / SENS)
    return EXIT_OK


def cmd_report(ctx: _Ctx) -> int:
    report = sensitivity_report(ctx.slist())
    _write_json(ctx.out / "report.json", report)
    print(json.dumps(report, indent=1, sort_keys=True))
    return EXIT_OK


def cmd_pareto(ctx: _Ctx) -> int:
    cfg = ctx.cfg
    points = pareto_curve(ctx.graph, ctx.specs(), ctx.groups(), ctx.slist(), load_dataset(ctx.eval_path),
                          ctx.weight_source(), cfg.eval_metric, cfg.pin_input_to_baseline)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["k", "relative_bops", "performance", "assignment_digest"])
    for p in points:
        w.writerow([p.k, repr(p.relative_bops), repr(p.performance), p.assignment_digest])
    (ctx.out / PARETO).write_text(buf.getvalue())
    return EXIT_OK


def cmd_search(ctx: _Ctx) -> int:
    cfg = ctx.cfg
    groups = ctx.groups()
    slist = ctx.slist()
    res = phase2(ctx.graph, ctx.specs(), groups, slist, cfg.budget(), load_dataset(ctx.eval_path),
                 ctx.weight_source(), cfg.strategy, cfg.pin_input_to_baseline)
    model = BopsModel(ctx.graph, groups)
    baseline = {g.id: slist.baseline for g in groups}
    exact = model.relative(res.assignment, baseline, exact=True)
    doc = res.to_json()
    doc.update(
        r_exact=f"{exact.numerator}/{exact.denominator}",
        bops=model.bops(res.assignment),
        baseline=slist.baseline.name,
        candidates=[c.name for c in slist.candidates],
        budget={"kind": cfg.budget_kind, "target": cfg.target, "eval_metric": cfg.eval_metric},
        strategy=cfg.strategy,
        weights=cfg.weights,
        pin_input_to_baseline=cfg.pin_input_to_baseline,
        assignment_digest=assignment_digest(res.assignment),
        trace=[asdict(p) for p in res.trace],
    )
    _write_json(ctx.out / RESULT, doc)
    if not res.budget_met:
        log.warning("budget not met: %s", ", ".join(res.flags))
        return EXIT_BUDGET_UNMET
    return EXIT_OK


def cmd_eval(ctx: _Ctx, args) -> int:
    result_path = Path(args.result) if args.result else ctx.out / RESULT
    doc = json.loads(_require(result_path, "search").read_text())
    cands = [Candidate.parse(c) for c in doc["candidates"]]
    assignment = {int(g): Candidate.parse(c) for g, c in doc["assignment"].items()}
    groups = ctx.groups()
    check_assignment(groups, assignment, cands)
    # replay with the settings the result was produced under unless overridden
    metric = args.eval_metric or doc["budget"]["eval_metric"]
    weights = args.weights or doc.get("weights", "nearest")
    pin = baseline_candidate(cands).a_bits if doc.get("pin_input_to_baseline") else None
    data = load_dataset(ctx.eval_path)
    ev = Evaluator(ctx.graph, ctx.specs(), groups, data, metric, ctx.weight_source(weights), pin,
                   ctx.cfg.sqnr_mode)
    value = ev(assignment)
    model = BopsModel(ctx.graph, groups)
    baseline = {g.id: baseline_candidate(cands) for g in groups}
    exact = model.relative(assignment, baseline, exact=True)
    report = EvalReport(metric, value, len(data), assignment_digest(assignment)).to_json()
    report.update(relative_bops=float(exact), r_exact=f"{exact.numerator}/{exact.denominator}")
    _write_json(ctx.out / EVAL, report)
    return EXIT_OK


def cmd_run(ctx: _Ctx, args) -> int:
    cmd_calibrate(ctx)
    if ctx.cfg.weights == "adaround":
        cmd_adaround(ctx)
    cmd_sensitivity(ctx)
    cmd_pareto(ctx)
    code = cmd_search(ctx)
    cmd_eval(ctx, args)
    return code


# --------------------------------------------------------------------------
# argument handling


def _common(p: argparse.ArgumentParser) -> None:
    # defaults are None so that only flags given explicitly override --config
    p.add_argument("--out", required=True, help="artifact directory")
    p.add_argument("--config", help="JSON RunConfig; explicit flags take precedence")
    p.add_argument("--seed", type=int)
    p.add_argument("--candidates", help="comma-separated WxAy list, e.g. W4A8,W8A8,W8A16")


def _data(p: argparse.ArgumentParser) -> None:
    p.add_argument("--model", help="model directory (default: OUT/model)")
    p.add_argument("--calib", help="calibration dataset (default: OUT/calib)")
    p.add_argument("--eval", help="evaluation dataset (default: OUT/eval)")
    p.add_argument("--weights", choices=("nearest", "adaround"))
    p.add_argument("--pin-input", dest="pin_input_to_baseline", action="store_const", const=True,
                   help="keep the graph-input quantizer at the baseline activation width")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mpq", description="Post-training mixed-precision search.")
    ap.add_argument("--version", action="version", version=f"mpq {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fixture", help="write a random-weight fixture network and datasets")
    p.add_argument("--kind", choices=KINDS, default="mlp")
    _common(p)

    p = sub.add_parser("calibrate", help="fit quantizer ranges -> specs.json")
    _common(p), _data(p)
    p.add_argument("--mse-grid", dest="mse_grid", type=int)

    p = sub.add_parser("adaround", help="AdaRound every weight layer per width -> adaround_cache/")
    _common(p), _data(p)
    p.add_argument("--iters", dest="adaround_iters", type=int)

    p = sub.add_parser("sensitivity", help="Phase 1 -> sensitivity.csv")
    _common(p), _data(p)
    p.add_argument("--metric", choices=METRICS)
    p.add_argument("--workers", type=int)
    p.add_argument("--sqnr-mode", dest="sqnr_mode", choices=("ratio", "db"))

    p = sub.add_parser("report", help="summarize sensitivity.csv -> report.json")
    _common(p), _data(p)

    p = sub.add_parser("pareto", help="evaluate every flip prefix -> pareto.csv")
    _common(p), _data(p)
    p.add_argument("--eval-metric", dest="eval_metric", choices=METRICS)

    def search_flags(p):
        p.add_argument("--eval-metric", dest="eval_metric", choices=METRICS)
        p.add_argument("--budget-kind", dest="budget_kind", choices=("efficiency", "performance"))
        p.add_argument("--target", type=float)
        p.add_argument("--strategy", choices=STRATEGIES)

    p = sub.add_parser("search", help="Phase 2 under a budget -> result.json")
    _common(p), _data(p), search_flags(p)

    p = sub.add_parser("eval", help="replay result.json -> eval.json")
    _common(p), _data(p)
    p.add_argument("--eval-metric", dest="eval_metric", choices=METRICS)
    p.add_argument("--result", help="result.json to replay (default: OUT/result.json)")

    p = sub.add_parser("run", help="calibrate, [adaround], sensitivity, pareto, search, eval")
    _common(p), _data(p), search_flags(p)
    p.add_argument("--metric", choices=METRICS)
    p.add_argument("--workers", type=int)
    p.add_argument("--mse-grid", dest="mse_grid", type=int)
    p.add_argument("--iters", dest="adaround_iters", type=int)
    p.add_argument("--sqnr-mode", dest="sqnr_mode", choices=("ratio", "db"))
    p.add_argument("--result", help=argparse.SUPPRESS)
    return ap


def resolve_config(args) -> RunConfig:
    doc = {}
    if getattr(args, "config", None):
        doc = asdict(RunConfig.from_json(json.loads(Path(args.config).read_text())))
    for f in fields(RunConfig):
        v = getattr(args, f.name, None)
        if v is not None:
            doc[f.name] = v
    return RunConfig(**doc)


def _setup_logging() -> None:
    level = os.environ.get("MPQ_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")


def main(argv=None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
        if args.command == "fixture":
            return cmd_fixture(args, cfg)
        ctx = _Ctx(args, cfg)
        handlers = {
            "calibrate": lambda: cmd_calibrate(ctx),
            "adaround": lambda: cmd_adaround(ctx),
            "sensitivity": lambda: cmd_sensitivity(ctx),
            "report": lambda: cmd_report(ctx),
            "pareto": lambda: cmd_pareto(ctx),
            "search": lambda: cmd_search(ctx),
            "eval": lambda: cmd_eval(ctx, args),
            "run": lambda: cmd_run(ctx, args),
        }
        return handlers[args.command]()
    except (OSError, ValueError, KeyError, RuntimeError, json.JSONDecodeError) as e:
        print(f"mpq: error: {e}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
