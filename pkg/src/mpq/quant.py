"""Simulated uniform affine quantization over a :class:`~mpq.graph.Graph`.

A quantizer maps ``t`` to ``s * (clip(round(t / s) + z, n, p) - z)`` with
round-half-to-even. Weights are quantized symmetric per output channel,
activations asymmetric per tensor. Quantizers are gathered into hardware
groups that always share one ``W{w}A{a}`` candidate.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from . import kernels
from .graph import INPUT_ID, Dataset, Graph, GraphError, apply_node, check_batch

log = logging.getLogger(__name__)

SCALE_FLOOR = 1e-8
WEIGHT, ACT = "weight", "act"


@dataclass(frozen=True, order=True)
class QuantizerId:
    owner: str
    role: str  # WEIGHT or ACT

    def __str__(self) -> str:
        return f"{self.owner}:{self.role}"

    @classmethod
    def parse(cls, text: str) -> "QuantizerId":
        owner, _, role = text.rpartition(":")
        if role not in (WEIGHT, ACT) or not owner:
            raise ValueError(f"bad quantizer id {text!r}")
        return cls(owner, role)


@dataclass(frozen=True, order=True)
class Candidate:
    w_bits: int
    a_bits: int

    @property
    def name(self) -> str:
        return f"W{self.w_bits}A{self.a_bits}"

    @property
    def product(self) -> int:
        return self.w_bits * self.a_bits

    def __str__(self) -> str:
        return self.name

    @classmethod
    def parse(cls, text: str) -> "Candidate":
        t = text.strip().upper()
        if not t.startswith("W") or "A" not in t:
            raise ValueError(f"bad candidate {text!r}, expected e.g. W8A16")
        w, a = t[1:].split("A", 1)
        cand = cls(int(w), int(a))
        if cand.w_bits < 2 or cand.a_bits < 2:
            raise ValueError(f"candidate {text!r}: bit-widths must be >= 2")
        return cand


def parse_candidates(text: str) -> List[Candidate]:
    cands = [Candidate.parse(t) for t in text.split(",") if t.strip()]
    if not cands:
        raise ValueError("empty candidate set")
    return sorted(set(cands))


def baseline_candidate(cands: Iterable[Candidate]) -> Candidate:
    """Highest w*a product; ties go to the larger activation width."""
    return max(cands, key=lambda c: (c.product, c.a_bits))


def int_range(bits: int, symmetric: bool) -> Tuple[int, int]:
    if symmetric:
        return -(2 ** (bits - 1)), 2 ** (bits - 1) - 1
    return 0, 2 ** bits - 1


@dataclass(frozen=True)
class QuantizerSpec:
    bits: int
    symmetric: bool
    axis: Optional[int]
    scale: np.ndarray  # float64, one entry per channel (or a single entry)
    zero_point: np.ndarray  # int64, same length as scale
    n: int
    p: int

    def __post_init__(self):
        scale = np.atleast_1d(np.asarray(self.scale, dtype=np.float64))
        zp = np.atleast_1d(np.asarray(self.zero_point, dtype=np.int64))
        object.__setattr__(self, "scale", scale)
        object.__setattr__(self, "zero_point", zp)
        if scale.shape != zp.shape:
            raise ValueError("scale and zero_point lengths differ")

    @classmethod
    def make(cls, bits, symmetric, scale, zero_point=0, axis=None) -> "QuantizerSpec":
        n, p = int_range(bits, symmetric)
        scale = np.atleast_1d(np.asarray(scale, dtype=np.float64))
        zp = np.broadcast_to(np.asarray(zero_point, dtype=np.int64), scale.shape)
        return cls(int(bits), bool(symmetric), axis, scale, zp.copy(), n, p)

    def to_json(self) -> dict:
        return {
            "scale": [float(v) for v in self.scale],
            "zero_point": [int(v) for v in self.zero_point],
            "n": self.n,
            "p": self.p,
            "symmetric": self.symmetric,
            "axis": self.axis,
            "bits": self.bits,
        }

    @classmethod
    def from_json(cls, d: dict, bits: Optional[int] = None) -> "QuantizerSpec":
        return cls(
            int(d.get("bits", bits)),
            bool(d["symmetric"]),
            d["axis"],
            np.asarray(d["scale"], dtype=np.float64),
            np.asarray(d["zero_point"], dtype=np.int64),
            int(d["n"]),
            int(d["p"]),
        )


def _broadcast(vec: np.ndarray, ndim: int, axis: Optional[int]) -> np.ndarray:
    if axis is None:
        return vec.reshape(()) if vec.size == 1 else vec
    shape = [1] * ndim
    shape[axis] = vec.size
    return vec.reshape(shape)


def _check_axis(t: np.ndarray, spec: QuantizerSpec) -> None:
    if spec.axis is None:
        if spec.scale.size != 1:
            raise ValueError("per-tensor spec must carry exactly one scale")
        return
    if not -t.ndim <= spec.axis < t.ndim:
        raise ValueError(f"axis {spec.axis} out of range for tensor of rank {t.ndim}")
    if t.shape[spec.axis] != spec.scale.size:
        raise ValueError(
            f"{spec.scale.size} scales for axis {spec.axis} of length {t.shape[spec.axis]}"
        )


def quantize(t, spec: QuantizerSpec) -> np.ndarray:
    """Integer grid indices ``clip(round(t/s) + z, n, p)`` as int64."""
    t = np.asarray(t, dtype=np.float32)
    _check_axis(t, spec)
    if np.any(spec.scale <= 0):
        raise ValueError("scale must be strictly positive")
    s = _broadcast(spec.scale, t.ndim, spec.axis)
    z = _broadcast(spec.zero_point, t.ndim, spec.axis)
    q = np.rint(t.astype(np.float64) / s) + z
    return np.clip(q, spec.n, spec.p).astype(np.int64)


def dequantize(q, spec: QuantizerSpec) -> np.ndarray:
    q = np.asarray(q)
    s = _broadcast(spec.scale, q.ndim, spec.axis)
    z = _broadcast(spec.zero_point, q.ndim, spec.axis)
    return (s * (q - z)).astype(np.float32)


def quantize_dequantize(t, spec: QuantizerSpec) -> np.ndarray:
    """Same bits as ``dequantize(quantize(t, spec), spec)``, in one fused pass."""
    t = np.ascontiguousarray(t, dtype=np.float32)
    _check_axis(t, spec)
    if np.any(spec.scale <= 0):
        raise ValueError("scale must be strictly positive")
    if spec.axis is None:
        view = t.reshape(1, 1, -1)
    else:
        axis = spec.axis % t.ndim
        view = t.reshape(int(np.prod(t.shape[:axis])), t.shape[axis], -1)
    out = kernels.qdq(view, spec.scale, spec.zero_point, spec.n, spec.p)
    return out.reshape(t.shape)


qdq = quantize_dequantize


# --------------------------------------------------------------------------
# range setting


def _reduce_axes(t: np.ndarray, axis: Optional[int]) -> Optional[Tuple[int, ...]]:
    if axis is None:
        return None
    axis = axis % t.ndim
    return tuple(i for i in range(t.ndim) if i != axis)


def _spec_from_range(bits, symmetric, axis, lo, hi) -> QuantizerSpec:
    """Spec covering [lo, hi] (arrays, one per channel)."""
    n, p = int_range(bits, symmetric)
    if symmetric:
        scale = np.maximum(np.maximum(np.abs(lo), np.abs(hi)) / p, SCALE_FLOOR)
        zp = np.zeros_like(scale, dtype=np.int64)
    else:
        lo = np.minimum(lo, 0.0)
        hi = np.maximum(hi, 0.0)
        scale = np.maximum((hi - lo) / (2 ** bits - 1), SCALE_FLOOR)
        zp = np.rint(-lo / scale).astype(np.int64)
    return QuantizerSpec(int(bits), bool(symmetric), axis, scale, zp, n, p)


def _channel_minmax(t: np.ndarray, axis: Optional[int]):
    t64 = t.astype(np.float64)
    red = _reduce_axes(t64, axis)
    lo = np.atleast_1d(t64.min(axis=red))
    hi = np.atleast_1d(t64.max(axis=red))
    return lo, hi


def fit_range_minmax(t, bits: int, symmetric: bool, axis: Optional[int] = None) -> QuantizerSpec:
    t = np.asarray(t, dtype=np.float32)
    if t.size == 0:
        raise ValueError("cannot fit a quantizer to an empty tensor")
    lo, hi = _channel_minmax(t, axis)
    return _spec_from_range(bits, symmetric, axis, lo, hi)


def _channel_sq_error(t: np.ndarray, spec: QuantizerSpec) -> np.ndarray:
    err = (t.astype(np.float64) - quantize_dequantize(t, spec).astype(np.float64)) ** 2
    red = _reduce_axes(err, spec.axis)
    return np.atleast_1d(err.sum(axis=red))


def fit_range_mse(
    t, bits: int, symmetric: bool, axis: Optional[int] = None, grid: int = 100
) -> QuantizerSpec:
    """Shrink the min-max range by alpha in {1/grid, ..., 1}; keep the alpha
    with the lowest reconstruction error, per channel when ``axis`` is set.
    Ties keep the larger alpha, so alpha = 1 reproduces the min-max spec."""
    if grid < 2:
        raise ValueError("grid must be >= 2")
    t = np.asarray(t, dtype=np.float32)
    if t.size == 0:
        raise ValueError("cannot fit a quantizer to an empty tensor")
    lo, hi = _channel_minmax(t, axis)
    best = _spec_from_range(bits, symmetric, axis, lo, hi)
    best_err = _channel_sq_error(t, best)
    scale, zp = best.scale.copy(), best.zero_point.copy()
    for k in range(grid - 1, 0, -1):
        alpha = k / grid
        cand = _spec_from_range(bits, symmetric, axis, lo * alpha, hi * alpha)
        err = _channel_sq_error(t, cand)
        better = err < best_err
        if np.any(better):
            best_err = np.where(better, err, best_err)
            scale = np.where(better, cand.scale, scale)
            zp = np.where(better, cand.zero_point, zp)
    return QuantizerSpec(best.bits, best.symmetric, axis, scale, zp, best.n, best.p)


def reconstruction_mse(t, spec: QuantizerSpec) -> float:
    t = np.asarray(t, dtype=np.float32)
    return float(_channel_sq_error(t, spec).sum() / t.size)


# --------------------------------------------------------------------------
# quantizers, calibration, groups

SpecTable = Dict[QuantizerId, Dict[int, QuantizerSpec]]


def quantizer_ids(graph: Graph) -> List[QuantizerId]:
    ids = [QuantizerId(INPUT_ID, ACT)]
    for nid in graph.order:
        if graph.nodes[nid].has_weight:
            ids.append(QuantizerId(nid, WEIGHT))
        ids.append(QuantizerId(nid, ACT))
    return ids


def input_quantizer(graph: Graph, node_id: str) -> QuantizerId:
    """Activation quantizer feeding a single-input node."""
    return QuantizerId(graph.nodes[node_id].sources()[0], ACT)


def _gather_activations(graph: Graph, data: Dataset, batch_size: int = 256):
    from .graph import forward

    chunks: Dict[str, List[np.ndarray]] = {INPUT_ID: []}
    for start in range(0, len(data), batch_size):
        batch = data.samples[start:start + batch_size]
        acts, _ = forward(graph, batch)
        chunks[INPUT_ID].append(np.asarray(batch, dtype=np.float32))
        for nid, a in acts.items():
            chunks.setdefault(nid, []).append(a)
    return {k: np.concatenate(v, axis=0) for k, v in chunks.items()}


def calibrate(
    graph: Graph,
    calib: Dataset,
    candidates: Sequence[Candidate],
    method: str = "mse",
    grid: int = 100,
) -> SpecTable:
    """Fit one spec per quantizer and per bit-width used by ``candidates``."""
    if calib is None or len(calib) == 0:
        raise ValueError("empty calibration data")
    if method not in ("mse", "minmax"):
        raise ValueError(f"unknown range method {method!r}")
    w_bits = sorted({c.w_bits for c in candidates})
    a_bits = sorted({c.a_bits for c in candidates})

    def fit(t, b, symmetric, axis):
        if method == "mse":
            return fit_range_mse(t, b, symmetric, axis, grid)
        return fit_range_minmax(t, b, symmetric, axis)

    acts = _gather_activations(graph, calib)
    table: SpecTable = {}
    for qid in quantizer_ids(graph):
        if qid.role == WEIGHT:
            w = graph.weights[qid.owner]
            table[qid] = {b: fit(w, b, True, 0) for b in w_bits}
        else:
            a = acts[qid.owner]
            table[qid] = {b: fit(a, b, False, None) for b in a_bits}
    return table


def save_specs(table: SpecTable, path) -> None:
    doc = {
        str(qid): {str(b): spec.to_json() for b, spec in sorted(by_bits.items())}
        for qid, by_bits in sorted(table.items(), key=lambda kv: str(kv[0]))
    }
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def load_specs(path) -> SpecTable:
    doc = json.loads(Path(path).read_text())
    return {
        QuantizerId.parse(k): {int(b): QuantizerSpec.from_json(d, int(b)) for b, d in v.items()}
        for k, v in doc.items()
    }


@dataclass(frozen=True)
class QuantizerGroup:
    id: int
    weight_quantizers: Tuple[QuantizerId, ...]
    activation_quantizers: Tuple[QuantizerId, ...]

    @property
    def members(self) -> Tuple[QuantizerId, ...]:
        return self.weight_quantizers + self.activation_quantizers

    @property
    def weight_nodes(self) -> Tuple[str, ...]:
        return tuple(q.owner for q in self.weight_quantizers)


class _UnionFind:
    def __init__(self, items):
        self.parent = {i: i for i in items}

    def find(self, x):
        while self.parent[x] != x:
            self.parent[x] = self.parent[self.parent[x]]
            x = self.parent[x]
        return x

    def union(self, a, b):
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            self.parent[max(ra, rb)] = min(ra, rb)


def derive_quantizer_groups(graph: Graph) -> List[QuantizerGroup]:
    """Partition all quantizers into groups that share one candidate.

    A weight node's weight and output quantizers form a group; MAC-free
    single-input nodes join their producer's group; add/concat unify all of
    their inputs with their output; the graph input joins its first consumer.
    Group ids follow the topological position of each group's first member.
    """
    ids = quantizer_ids(graph)
    rank = {q: i for i, q in enumerate(ids)}
    uf = _UnionFind(ids)
    for nid in graph.order:
        node = graph.nodes[nid]
        out = QuantizerId(nid, ACT)
        if node.has_weight:
            uf.union(QuantizerId(nid, WEIGHT), out)
        elif node.kind in ("add", "concat"):
            for src in node.sources():
                uf.union(QuantizerId(src, ACT), out)
        else:
            uf.union(QuantizerId(node.sources()[0], ACT), out)
    first = next((n for n in graph.order if INPUT_ID in graph.nodes[n].sources()), None)
    if first is not None:
        uf.union(QuantizerId(INPUT_ID, ACT), QuantizerId(first, ACT))

    buckets: Dict[QuantizerId, List[QuantizerId]] = {}
    for q in ids:
        buckets.setdefault(uf.find(q), []).append(q)
    ordered = sorted(buckets.values(), key=lambda qs: min(rank[q] for q in qs))
    groups = []
    for gid, qs in enumerate(ordered):
        qs = sorted(qs, key=rank.__getitem__)
        groups.append(
            QuantizerGroup(
                gid,
                tuple(q for q in qs if q.role == WEIGHT),
                tuple(q for q in qs if q.role == ACT),
            )
        )
    return groups


def group_of(groups: Sequence[QuantizerGroup]) -> Dict[QuantizerId, int]:
    return {q: g.id for g in groups for q in g.members}


# --------------------------------------------------------------------------
# simulated execution

Assignment = Dict[int, Candidate]


def uniform_assignment(groups: Sequence[QuantizerGroup], cand: Candidate) -> Assignment:
    return {g.id: cand for g in groups}


class NearestWeights:
    """Weight source that rounds each weight tensor to nearest on its grid."""

    def __init__(self, graph: Graph, specs: SpecTable):
        self.graph = graph
        self.specs = specs
        self._cache: Dict[Tuple[str, int], np.ndarray] = {}

    def weight(self, node_id: str, bits: int) -> np.ndarray:
        key = (node_id, bits)
        if key not in self._cache:
            spec = _lookup(self.specs, QuantizerId(node_id, WEIGHT), bits)
            w = quantize_dequantize(self.graph.weights[node_id], spec)
            w.setflags(write=False)
            self._cache[key] = w
        return self._cache[key]


class MissingSpecError(KeyError):
    def __str__(self) -> str:
        return str(self.args[0])


def _lookup(specs: SpecTable, qid: QuantizerId, bits: int) -> QuantizerSpec:
    try:
        return specs[qid][bits]
    except KeyError:
        raise MissingSpecError(f"no {bits}-bit spec for quantizer {qid}") from None


def resolve(
    graph: Graph,
    groups: Sequence[QuantizerGroup],
    assignment: Mapping[int, Optional[Candidate]],
    specs: SpecTable,
    weight_source=None,
    pin_input: Optional[int] = None,
):
    """Turn a group assignment into (activation specs, quantized weights).

    Groups missing from ``assignment`` or mapped to ``None`` stay in full
    precision. ``pin_input`` forces the graph-input quantizer to that width.
    """
    if weight_source is None:
        weight_source = NearestWeights(graph, specs)
    act_specs: Dict[str, QuantizerSpec] = {}
    weights: Dict[str, np.ndarray] = {}
    for g in groups:
        cand = assignment.get(g.id)
        if cand is None:
            continue
        for q in g.weight_quantizers:
            weights[q.owner] = weight_source.weight(q.owner, cand.w_bits)
        for q in g.activation_quantizers:
            bits = cand.a_bits
            if q.owner == INPUT_ID and pin_input is not None:
                bits = pin_input
            act_specs[q.owner] = _lookup(specs, q, bits)
    return act_specs, weights


def simulate(
    graph: Graph,
    batch: np.ndarray,
    act_specs: Mapping[str, QuantizerSpec],
    weights: Mapping[str, np.ndarray],
) -> np.ndarray:
    """Forward pass with the given activation quantizers and weight overrides."""
    x = check_batch(graph, batch)
    if INPUT_ID in act_specs:
        x = quantize_dequantize(x, act_specs[INPUT_ID])
    acts: Dict[str, np.ndarray] = {}
    for nid in graph.order:
        node = graph.nodes[nid]
        args = [x if s == INPUT_ID else acts[s] for s in node.sources()]
        w = weights.get(nid, graph.weights.get(nid))
        out = apply_node(node, args, w)
        if nid in act_specs:
            out = quantize_dequantize(out, act_specs[nid])
        acts[nid] = out
    return acts[graph.output]


def quantized_forward(
    graph: Graph,
    assignment: Mapping[int, Optional[Candidate]],
    specs: SpecTable,
    batch: np.ndarray,
    weight_source=None,
    groups: Optional[Sequence[QuantizerGroup]] = None,
    pin_input: Optional[int] = None,
) -> np.ndarray:
    if groups is None:
        groups = derive_quantizer_groups(graph)
    act_specs, weights = resolve(graph, groups, assignment, specs, weight_source, pin_input)
    return simulate(graph, batch, act_specs, weights)


def check_assignment(
    groups: Sequence[QuantizerGroup], assignment: Mapping[int, Candidate], cands: Sequence[Candidate]
) -> None:
    allowed = set(cands)
    for g in groups:
        if g.id not in assignment:
            raise GraphError(f"assignment has no candidate for group {g.id}")
        if assignment[g.id] not in allowed:
            raise GraphError(f"group {g.id}: {assignment[g.id]} is not a configured candidate")
