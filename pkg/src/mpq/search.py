"""Phase 2: BOPs cost model and greedy bit-width search along the flip trace.

The trace starts with every group at the baseline candidate and applies the
sensitivity list in order; an entry only takes effect when it strictly lowers
its group's ``w_bits * a_bits``. Prefix ``k`` of the trace is the assignment
after the first ``k`` effective flips. Performance budgets search for the
largest ``k`` whose performance stays at or above the target.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .graph import Dataset, Graph, Node
from .metrics import assignment_digest, cross_entropy_divergence, sqnr_db, top1_accuracy
from .quant import (
    Assignment,
    Candidate,
    QuantizerGroup,
    SpecTable,
    group_of,
    input_quantizer,
    quantized_forward,
    QuantizerId,
    WEIGHT,
)

log = logging.getLogger(__name__)

BUDGET_UNMET = "budget_unmet"
BUDGET_UNMET_AT_BASELINE = "budget_unmet_at_baseline"
NONMONOTONE = "nonmonotone_curve"

STRATEGIES = ("sequential", "binary", "hybrid")


# --------------------------------------------------------------------------
# cost model


def macs(node: Node, out_shape: Sequence[int]) -> int:
    p = node.params
    if node.kind == "dense":
        return int(p["in_features"]) * int(p["out_features"])
    if node.kind == "conv2d":
        k = int(p["kernel"])
        return k * k * int(p["in_ch"]) * int(p["out_ch"]) * int(out_shape[1]) * int(out_shape[2])
    return 0


class BopsModel:
    """Precomputed (macs, weight group, input-activation group) per MAC node."""

    def __init__(self, graph: Graph, groups: Sequence[QuantizerGroup]):
        owner = group_of(groups)
        self.terms: List[Tuple[str, int, int, int]] = []
        for nid in graph.order:
            node = graph.nodes[nid]
            m = macs(node, graph.shapes[nid])
            if m:
                self.terms.append(
                    (nid, m, owner[QuantizerId(nid, WEIGHT)], owner[input_quantizer(graph, nid)])
                )
        self.group_ids = sorted(g.id for g in groups)

    def bops(self, assignment: Mapping[int, Candidate]) -> int:
        total = 0
        for _, m, wg, ag in self.terms:
            total += assignment[wg].w_bits * assignment[ag].a_bits * m
        return total

    def relative(self, assignment, baseline, exact: bool = False):
        base = self.bops(baseline)
        if base == 0:
            raise ValueError("baseline has zero BOPs: graph contains no MAC-bearing nodes")
        r = Fraction(self.bops(assignment), base)
        return r if exact else float(r)


def bops(graph: Graph, groups: Sequence[QuantizerGroup], assignment: Mapping[int, Candidate]) -> int:
    return BopsModel(graph, groups).bops(assignment)


def relative_bops(graph, groups, assignment, baseline_assignment, exact: bool = False):
    return BopsModel(graph, groups).relative(assignment, baseline_assignment, exact)


# --------------------------------------------------------------------------
# flips


def apply_flip(assignment: Mapping[int, Candidate], entry) -> Assignment:
    """Move ``entry.group`` to ``entry.candidate`` if that strictly lowers its
    w*a product; otherwise return an unchanged copy."""
    out = dict(assignment)
    if entry.candidate.product < out[entry.group].product:
        out[entry.group] = entry.candidate
    return out


def flip_trace(entries, baseline: Mapping[int, Candidate]) -> List[Assignment]:
    """Assignments after 0, 1, ..., K effective flips."""
    trace = [dict(baseline)]
    for e in entries:
        nxt = apply_flip(trace[-1], e)
        if nxt != trace[-1]:
            trace.append(nxt)
    return trace


# --------------------------------------------------------------------------
# evaluation


def score_logits(metric: str, fp: np.ndarray, q: np.ndarray, labels, sqnr_mode: str = "ratio") -> float:
    """Uniform higher-is-better score of perturbed logits ``q``."""
    if metric == "sqnr":
        return sqnr_db(fp, q, sqnr_mode)
    if metric == "accuracy":
        return top1_accuracy(q, labels)
    if metric in ("xent", "cross-entropy"):
        return -cross_entropy_divergence(fp, q)
    if metric == "mse":
        return -float(np.mean((np.asarray(fp, np.float64) - np.asarray(q, np.float64)) ** 2))
    raise ValueError(f"unknown metric {metric!r}")


class Evaluator:
    """Performance of an assignment on a fixed dataset; counts its calls."""

    def __init__(
        self,
        graph: Graph,
        specs: SpecTable,
        groups: Sequence[QuantizerGroup],
        data: Dataset,
        metric: str = "accuracy",
        weight_source=None,
        pin_input: Optional[int] = None,
        sqnr_mode: str = "ratio",
    ):
        from .graph import logits

        if len(data) == 0:
            raise ValueError("empty evaluation data")
        self.graph, self.specs, self.groups = graph, specs, list(groups)
        self.data, self.metric, self.weight_source = data, metric, weight_source
        self.pin_input, self.sqnr_mode = pin_input, sqnr_mode
        self.fp_logits = logits(graph, data.samples)
        self.labels = data.labels if data.labels is not None else np.argmax(self.fp_logits, axis=1)
        self.calls = 0
        score_logits(metric, self.fp_logits, self.fp_logits, self.labels, sqnr_mode)

    def logits(self, assignment) -> np.ndarray:
        return quantized_forward(
            self.graph, assignment, self.specs, self.data.samples,
            self.weight_source, self.groups, self.pin_input,
        )

    def __call__(self, assignment) -> float:
        self.calls += 1
        q = self.logits(assignment)
        return score_logits(self.metric, self.fp_logits, q, self.labels, self.sqnr_mode)


# --------------------------------------------------------------------------
# prefix search over an abstract curve


class _Curve:
    def __init__(self, perf: Callable[[int], float]):
        self.perf = perf
        self.seen: Dict[int, float] = {}

    def __call__(self, k: int) -> float:
        if k not in self.seen:
            self.seen[k] = float(self.perf(k))
        return self.seen[k]

    @property
    def evaluations(self) -> int:
        return len(self.seen)

    def monotone(self) -> bool:
        ks = sorted(self.seen)
        return all(self.seen[a] >= self.seen[b] for a, b in zip(ks, ks[1:]))


@dataclass
class PrefixResult:
    k: int
    evaluations: int
    flags: List[str]
    seen: Dict[int, float]


def _finish(curve: _Curve, k: int, flags: List[str]) -> PrefixResult:
    if not curve.monotone():
        flags.append(NONMONOTONE)
    return PrefixResult(k, curve.evaluations, flags, dict(curve.seen))


def _bracket(curve: _Curve, K: int, gamma: float):
    """Endpoint checks shared by binary and hybrid; returns a result or None."""
    if curve(0) < gamma:
        return _finish(curve, 0, [BUDGET_UNMET_AT_BASELINE])
    if K == 0 or curve(K) >= gamma:
        return _finish(curve, K, [])
    return None


def prefix_sequential(perf, K: int, gamma: float) -> PrefixResult:
    curve = _Curve(perf)
    if curve(0) < gamma:
        return _finish(curve, 0, [BUDGET_UNMET_AT_BASELINE])
    for k in range(1, K + 1):
        if curve(k) < gamma:
            return _finish(curve, k - 1, [])
    return _finish(curve, K, [])


def prefix_binary(perf, K: int, gamma: float) -> PrefixResult:
    curve = _Curve(perf)
    done = _bracket(curve, K, gamma)
    if done:
        return done
    lo, hi = 0, K  # perf(lo) >= gamma > perf(hi)
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if curve(mid) >= gamma:
            lo = mid
        else:
            hi = mid
    return _finish(curve, lo, [])


def prefix_hybrid(perf, K: int, gamma: float, splits: int = 2) -> PrefixResult:
    """Two bisection probes narrow the curve to a quarter; interpolation
    search finishes inside it."""
    curve = _Curve(perf)
    done = _bracket(curve, K, gamma)
    if done:
        return done
    lo, hi = 0, K
    for _ in range(splits):
        if hi - lo <= 1:
            break
        mid = (lo + hi) // 2
        if curve(mid) >= gamma:
            lo = mid
        else:
            hi = mid
    while hi - lo > 1:
        plo, phi = curve(lo), curve(hi)
        if phi == plo:
            nxt = (lo + hi) // 2
        else:
            nxt = lo + math.floor((gamma - plo) * (hi - lo) / (phi - plo) + 0.5)
            nxt = min(max(nxt, lo + 1), hi - 1)
        if curve(nxt) >= gamma:
            lo = nxt
        else:
            hi = nxt
    return _finish(curve, lo, [])


PREFIX_SEARCH = {"sequential": prefix_sequential, "binary": prefix_binary, "hybrid": prefix_hybrid}


# --------------------------------------------------------------------------
# budgets and results


@dataclass(frozen=True)
class BudgetSpec:
    kind: str  # "efficiency" | "performance"
    target: float
    eval_metric: str = "accuracy"

    def __post_init__(self):
        if self.kind not in ("efficiency", "performance"):
            raise ValueError(f"unknown budget kind {self.kind!r}")
        if not math.isfinite(self.target):
            raise ValueError("budget target must be finite")
        if self.kind == "efficiency" and not 0 < self.target <= 1:
            raise ValueError("efficiency target must lie in (0, 1]")


@dataclass
class ParetoPoint:
    k: int
    relative_bops: float
    performance: Optional[float]
    assignment_digest: str


@dataclass
class SearchResult:
    assignment: Assignment
    r: float
    performance: float
    evaluations_used: int
    trace: List[ParetoPoint]
    k: int = 0
    flags: List[str] = field(default_factory=list)

    @property
    def budget_met(self) -> bool:
        return not any(f.startswith(BUDGET_UNMET) for f in self.flags)

    def to_json(self) -> dict:
        return {
            "assignment": {str(g): c.name for g, c in sorted(self.assignment.items())},
            "r": self.r,
            "performance": self.performance,
            "evaluations_used": self.evaluations_used,
            "k": self.k,
            "flags": list(self.flags),
        }


class _Setup:
    """Everything a Phase-2 run derives from its inputs."""

    def __init__(self, graph, specs, groups, slist, eval_set, weight_source, metric, pin_input):
        self.model = BopsModel(graph, groups)
        base = slist.baseline
        self.baseline = {g.id: base for g in groups}
        self.trace = flip_trace(slist.entries, self.baseline)
        self.K = len(self.trace) - 1
        self.evaluator = None
        if eval_set is not None:
            pin = base.a_bits if pin_input else None
            self.evaluator = Evaluator(graph, specs, groups, eval_set, metric, weight_source, pin)

    def r(self, k: int) -> float:
        return self.model.relative(self.trace[k], self.baseline)

    def point(self, k: int, perf: Optional[float]) -> ParetoPoint:
        return ParetoPoint(k, self.r(k), perf, assignment_digest(self.trace[k]))

    def perf(self, k: int) -> float:
        return self.evaluator(self.trace[k])


def _efficiency(setup: _Setup, budget: BudgetSpec) -> SearchResult:
    k = next((i for i in range(setup.K + 1) if setup.r(i) <= budget.target), None)
    flags = []
    if k is None:
        k = setup.K
        flags.append(BUDGET_UNMET)
    perf = setup.perf(k) if setup.evaluator is not None else float("nan")
    trace = [setup.point(i, perf if i == k else None) for i in range(k + 1)]
    return SearchResult(dict(setup.trace[k]), setup.r(k), perf, 1 if setup.evaluator else 0,
                        trace, k, flags)


def _performance(setup: _Setup, budget: BudgetSpec, strategy: str) -> SearchResult:
    res = PREFIX_SEARCH[strategy](setup.perf, setup.K, budget.target)
    trace = [setup.point(k, v) for k, v in sorted(res.seen.items())]
    return SearchResult(dict(setup.trace[res.k]), setup.r(res.k), res.seen[res.k],
                        res.evaluations, trace, res.k, list(res.flags))


def phase2(graph, specs, groups, slist, budget: BudgetSpec, eval_set, weight_source=None,
           strategy: str = "sequential", pin_input: bool = False) -> SearchResult:
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r}")
    setup = _Setup(graph, specs, groups, slist, eval_set, weight_source, budget.eval_metric, pin_input)
    if budget.kind == "efficiency":
        return _efficiency(setup, budget)
    return _performance(setup, budget, strategy)


def phase2_sequential(graph, specs, groups, slist, budget, eval_set, weight_source=None, **kw):
    return phase2(graph, specs, groups, slist, budget, eval_set, weight_source, "sequential", **kw)


def phase2_binary(graph, specs, groups, slist, budget, eval_set, weight_source=None, **kw):
    if budget.kind != "performance":
        raise ValueError("binary search needs a performance budget")
    return phase2(graph, specs, groups, slist, budget, eval_set, weight_source, "binary", **kw)


def phase2_hybrid(graph, specs, groups, slist, budget, eval_set, weight_source=None, **kw):
    if budget.kind != "performance":
        raise ValueError("hybrid search needs a performance budget")
    return phase2(graph, specs, groups, slist, budget, eval_set, weight_source, "hybrid", **kw)


def pareto_curve(graph, specs, groups, slist, eval_set, weight_source=None,
                 metric: str = "accuracy", pin_input: bool = False) -> List[ParetoPoint]:
    setup = _Setup(graph, specs, groups, slist, eval_set, weight_source, metric, pin_input)
    return [setup.point(k, setup.perf(k)) for k in range(setup.K + 1)]


def trace_assignments(groups, slist) -> List[Assignment]:
    base = slist.baseline
    return flip_trace(slist.entries, {g.id: base for g in groups})
