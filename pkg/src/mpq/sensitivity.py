"""Phase 1: per-group quantization sensitivity and the sorted sensitivity list."""
from __future__ import annotations

import csv
import io
import json
import logging
import multiprocessing
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from .graph import Dataset, Graph, logits
from .quant import Candidate, QuantizerGroup, SpecTable, baseline_candidate, quantized_forward
from .search import BopsModel, score_logits

log = logging.getLogger(__name__)

METRICS = ("sqnr", "accuracy", "xent", "mse")


@dataclass(frozen=True)
class SensitivityEntry:
    group: int
    candidate: Candidate
    score: float
    bops_delta: int

    def sort_key(self):
        return (-self.score, -self.bops_delta, self.group, self.candidate.name)


@dataclass
class SensitivityList:
    entries: List[SensitivityEntry]
    metric: str
    candidates: List[Candidate]
    metadata: Dict[str, object] = field(default_factory=dict)

    @property
    def baseline(self) -> Candidate:
        return baseline_candidate(self.candidates)

    def items(self):
        """(group, candidate name) pairs in list order."""
        return [(e.group, e.candidate.name) for e in self.entries]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["rank", "group_id", "candidate", "score", "bops_delta", "metric"])
        for i, e in enumerate(self.entries, 1):
            w.writerow([i, e.group, e.candidate.name, repr(float(e.score)), e.bops_delta, self.metric])
        return buf.getvalue()

    def save(self, path) -> None:
        path = Path(path)
        path.write_text(self.to_csv())
        meta = dict(self.metadata, metric=self.metric, candidates=[c.name for c in self.candidates])
        path.with_suffix(".meta.json").write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path, candidates: Optional[Sequence[Candidate]] = None) -> "SensitivityList":
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"sensitivity list not found: {path} (run `mpq sensitivity` first)")
        rows = list(csv.DictReader(path.read_text().splitlines()))
        entries = [
            SensitivityEntry(int(r["group_id"]), Candidate.parse(r["candidate"]),
                             float(r["score"]), int(r["bops_delta"]))
            for r in rows
        ]
        meta_path = path.with_suffix(".meta.json")
        meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
        if candidates is None:
            if "candidates" not in meta:
                raise ValueError(f"{path}: candidate set unknown; pass candidates explicitly")
            candidates = [Candidate.parse(c) for c in meta["candidates"]]
        metric = rows[0]["metric"] if rows else meta.get("metric", "sqnr")
        return cls(entries, metric, sorted(set(candidates)), meta)


def score_candidate(
    graph: Graph,
    specs: SpecTable,
    groups: Sequence[QuantizerGroup],
    group_id: int,
    candidate: Candidate,
    calib: Dataset,
    metric: str = "sqnr",
    weight_source=None,
    *,
    pin_input: Optional[int] = None,
    sqnr_mode: str = "ratio",
    fp_logits: Optional[np.ndarray] = None,
) -> float:
    """Score the network with only ``group_id`` quantized to ``candidate``."""
    if metric not in METRICS and metric != "cross-entropy":
        raise ValueError(f"unknown metric {metric!r}")
    if fp_logits is None:
        fp_logits = logits(graph, calib.samples)
    labels = calib.labels
    if labels is None:
        labels = np.argmax(fp_logits, axis=1)
    q = quantized_forward(graph, {group_id: candidate}, specs, calib.samples,
                          weight_source, groups, pin_input)
    return score_logits(metric, fp_logits, q, labels, sqnr_mode)


# worker state for process pools; set once per worker by _init_worker
_WORKER: dict = {}


def _init_worker(ctx):
    _WORKER.clear()
    _WORKER.update(ctx)


def _score_job(job):
    gid, cand = job
    c = _WORKER
    return score_candidate(
        c["graph"], c["specs"], c["groups"], gid, cand, c["calib"], c["metric"],
        c["weight_source"], pin_input=c["pin_input"], sqnr_mode=c["sqnr_mode"],
        fp_logits=c["fp_logits"],
    )


def build_sensitivity_list(
    graph: Graph,
    specs: SpecTable,
    groups: Sequence[QuantizerGroup],
    candidates: Sequence[Candidate],
    calib: Dataset,
    metric: str = "sqnr",
    weight_source=None,
    workers: int = 1,
    *,
    pin_input: bool = False,
    sqnr_mode: str = "ratio",
    seed: int = 0,
) -> SensitivityList:
    """Score every (group, non-baseline candidate) pair and sort the result.

    Ordering: score descending, then larger BOPs saving, then group id. The
    output does not depend on ``workers``.
    """
    if len(calib) == 0:
        raise ValueError("empty calibration data")
    candidates = sorted(set(candidates))
    base = baseline_candidate(candidates)
    others = [c for c in candidates if c != base]
    fp = logits(graph, calib.samples)
    ctx = dict(
        graph=graph, specs=specs, groups=list(groups), calib=calib, metric=metric,
        weight_source=weight_source, pin_input=base.a_bits if pin_input else None,
        sqnr_mode=sqnr_mode, fp_logits=fp,
    )
    jobs = [(g.id, c) for g in groups for c in others]
    if workers > 1 and len(jobs) > 1:
        mp = multiprocessing.get_context("fork")
        with ProcessPoolExecutor(workers, mp_context=mp, initializer=_init_worker,
                                 initargs=(ctx,)) as pool:
            scores = list(pool.map(_score_job, jobs))
    else:
        _init_worker(ctx)
        scores = [_score_job(j) for j in jobs]
        _WORKER.clear()

    model = BopsModel(graph, groups)
    baseline = {g.id: base for g in groups}
    base_bops = model.bops(baseline)
    entries = []
    for (gid, cand), score in zip(jobs, scores):
        flipped = dict(baseline)
        flipped[gid] = cand
        entries.append(SensitivityEntry(gid, cand, float(score), base_bops - model.bops(flipped)))
    entries.sort(key=SensitivityEntry.sort_key)
    meta = {
        "calibration_fingerprint": calib.fingerprint(),
        "num_calibration_samples": len(calib),
        "seed": int(seed),
        "weights": "nearest" if weight_source is None else type(weight_source).__name__,
    }
    return SensitivityList(entries, metric, candidates, meta)


def kendall_tau(order_a: Sequence, order_b: Sequence) -> float:
    """Tau-a between two rankings of the same distinct items."""
    pos_a = {item: i for i, item in enumerate(order_a)}
    pos_b = {item: i for i, item in enumerate(order_b)}
    if len(pos_a) != len(order_a) or len(pos_b) != len(order_b):
        raise ValueError("rankings contain duplicate items")
    if pos_a.keys() != pos_b.keys():
        raise ValueError("rankings cover different item sets")
    n = len(order_a)
    if n < 2:
        raise ValueError("need at least two items")
    items = list(order_a)
    rb = np.array([pos_b[it] for it in items])
    concordant = discordant = 0
    for i in range(n):
        d = np.sign(rb[i + 1:] - rb[i])  # a-order is i < j by construction
        concordant += int(np.sum(d > 0))
        discordant += int(np.sum(d < 0))
    return (concordant - discordant) / (n * (n - 1) / 2)


def sensitivity_report(slist: SensitivityList, threshold_db: float = 20.0) -> dict:
    """Per-group min/max score, network-wide range, groups below threshold."""
    if not slist.entries:
        raise ValueError("empty sensitivity list")
    by_group: Dict[int, List[float]] = {}
    for e in slist.entries:
        by_group.setdefault(e.group, []).append(e.score)
    rows = []
    for gid in sorted(by_group):
        s = by_group[gid]
        rows.append({"group": gid, "min": min(s), "max": max(s), "flagged": min(s) < threshold_db})
    all_scores = [e.score for e in slist.entries]
    return {
        "metric": slist.metric,
        "groups": rows,
        "min": min(all_scores),
        "max": max(all_scores),
        "range": max(all_scores) - min(all_scores),
        "threshold": threshold_db,
        "flagged": [r["group"] for r in rows if r["flagged"]],
    }
