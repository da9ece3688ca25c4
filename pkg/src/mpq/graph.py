"""Small feed-forward graph runtime: model/dataset I/O, validation, shape
inference and deterministic full-precision execution.

Model directory layout::

    graph.json    {"nodes": [...], "input_shape": [...], "output": "<id>"}
    weights.bin   concatenated little-endian float32 blob

Each node is ``{"id", "kind", "params", "inputs", "weight_offset",
"weight_len"}``; offsets and lengths count float32 elements. A node with an
empty ``inputs`` list reads the graph input. Tensors are channel-first
(``[C, H, W]`` per sample) and dense weights are laid out ``[out, in]``,
conv weights ``[out_ch, in_ch, k, k]``.
"""
from __future__ import annotations

import hashlib
import heapq
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import kernels

INPUT_ID = "input"

NODE_KINDS = ("dense", "conv2d", "relu", "add", "concat", "global-avg-pool", "flatten")
WEIGHT_KINDS = ("dense", "conv2d")
MULTI_INPUT_KINDS = ("add", "concat")


class GraphError(ValueError):
    """Raised for malformed models; the message names the offending node."""


class CycleError(GraphError):
    pass


@dataclass(frozen=True)
class Node:
    id: str
    kind: str
    params: dict = field(default_factory=dict)
    inputs: Tuple[str, ...] = ()
    weight_offset: Optional[int] = None
    weight_len: Optional[int] = None

    @property
    def has_weight(self) -> bool:
        return self.kind in WEIGHT_KINDS

    def weight_shape(self) -> Tuple[int, ...]:
        p = self.params
        if self.kind == "dense":
            return (int(p["out_features"]), int(p["in_features"]))
        if self.kind == "conv2d":
            k = int(p["kernel"])
            return (int(p["out_ch"]), int(p["in_ch"]), k, k)
        raise GraphError(f"node {self.id!r}: kind {self.kind} has no weight")

    def sources(self) -> Tuple[str, ...]:
        """Producer ids, with the graph input spelled ``INPUT_ID``."""
        return self.inputs if self.inputs else (INPUT_ID,)


@dataclass
class Graph:
    nodes: Dict[str, Node]
    input_shape: Tuple[int, ...]
    output: str
    weights: Dict[str, np.ndarray]
    shapes: Dict[str, Tuple[int, ...]] = field(default_factory=dict)
    order: List[str] = field(default_factory=list)

    def consumers(self, node_id: str) -> List[str]:
        return [n for n in self.order if node_id in self.nodes[n].sources()]

    def weight_nodes(self) -> List[str]:
        return [n for n in self.order if self.nodes[n].has_weight]

    def shape_of(self, node_id: str) -> Tuple[int, ...]:
        if node_id == INPUT_ID:
            return self.input_shape
        return self.shapes[node_id]


@dataclass
class Dataset:
    samples: np.ndarray
    labels: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return int(self.samples.shape[0])

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        labels = None if self.labels is None else self.labels[idx]
        return Dataset(self.samples[idx], labels)

    def fingerprint(self) -> str:
        h = hashlib.sha256(np.ascontiguousarray(self.samples, dtype="<f4").tobytes())
        if self.labels is not None:
            h.update(np.asarray(self.labels, dtype="<i8").tobytes())
        return h.hexdigest()[:16]


# --------------------------------------------------------------------------
# structure


def topo_order(nodes: Dict[str, Node]) -> List[str]:
    """Kahn's algorithm; ready nodes are released in lexicographic id order."""
    indeg = {nid: 0 for nid in nodes}
    users: Dict[str, List[str]] = {nid: [] for nid in nodes}
    for nid, node in nodes.items():
        for src in node.inputs:
            if src not in nodes:
                raise GraphError(f"node {nid!r} references unknown input {src!r}")
            indeg[nid] += 1
            users[src].append(nid)
    ready = [nid for nid, d in indeg.items() if d == 0]
    heapq.heapify(ready)
    order = []
    while ready:
        nid = heapq.heappop(ready)
        order.append(nid)
        for u in users[nid]:
            indeg[u] -= 1
            if indeg[u] == 0:
                heapq.heappush(ready, u)
    if len(order) != len(nodes):
        stuck = sorted(nid for nid, d in indeg.items() if d > 0)
        raise CycleError(f"cycle detected through node {stuck[0]!r}")
    return order


def _infer_shape(node: Node, in_shapes: List[Tuple[int, ...]]) -> Tuple[int, ...]:
    kind, p = node.kind, node.params

    def fail(msg):
        raise GraphError(f"node {node.id!r} ({kind}): {msg}")

    if kind == "dense":
        if in_shapes[0] != (int(p["in_features"]),):
            fail(f"expects input ({p['in_features']},), got {in_shapes[0]}")
        return (int(p["out_features"]),)
    if kind == "conv2d":
        s = in_shapes[0]
        if len(s) != 3 or s[0] != int(p["in_ch"]):
            fail(f"expects input ({p['in_ch']}, H, W), got {s}")
        k, stride, pad = int(p["kernel"]), int(p.get("stride", 1)), int(p.get("padding", 0))
        if stride < 1 or k < 1 or pad < 0:
            fail("kernel/stride must be >= 1 and padding >= 0")
        ho = (s[1] + 2 * pad - k) // stride + 1
        wo = (s[2] + 2 * pad - k) // stride + 1
        if ho < 1 or wo < 1:
            fail(f"kernel {k} does not fit input {s}")
        return (int(p["out_ch"]), ho, wo)
    if kind == "relu":
        return in_shapes[0]
    if kind == "add":
        if any(s != in_shapes[0] for s in in_shapes):
            fail(f"operand shapes differ: {in_shapes}")
        return in_shapes[0]
    if kind == "concat":
        rest = in_shapes[0][1:]
        if any(len(s) != len(in_shapes[0]) or s[1:] != rest for s in in_shapes):
            fail(f"operands disagree beyond the channel axis: {in_shapes}")
        return (sum(s[0] for s in in_shapes),) + rest
    if kind == "global-avg-pool":
        if len(in_shapes[0]) != 3:
            fail(f"expects (C, H, W), got {in_shapes[0]}")
        return (in_shapes[0][0],)
    if kind == "flatten":
        return (int(np.prod(in_shapes[0])),)
    fail("unknown kind")


def build_graph(
    nodes: Sequence[Node], input_shape: Sequence[int], output: str, blob: np.ndarray
) -> Graph:
    """Validate nodes against ``blob`` and return a shape-inferred Graph."""
    by_id: Dict[str, Node] = {}
    for node in nodes:
        if node.id in by_id:
            raise GraphError(f"duplicate node id {node.id!r}")
        if node.id == INPUT_ID:
            raise GraphError(f"node id {INPUT_ID!r} is reserved for the graph input")
        if node.kind not in NODE_KINDS:
            raise GraphError(f"node {node.id!r}: unknown kind {node.kind!r}")
        n_in = len(node.inputs)
        if node.kind in MULTI_INPUT_KINDS:
            if n_in < 2:
                raise GraphError(f"node {node.id!r}: {node.kind} needs at least 2 inputs")
        elif n_in > 1:
            raise GraphError(f"node {node.id!r}: {node.kind} takes one input, got {n_in}")
        has_ref = node.weight_offset is not None or node.weight_len is not None
        full_ref = node.weight_offset is not None and node.weight_len is not None
        if node.has_weight and not full_ref:
            raise GraphError(f"node {node.id!r}: {node.kind} requires a weight reference")
        if not node.has_weight and has_ref:
            raise GraphError(f"node {node.id!r}: {node.kind} must not carry weights")
        by_id[node.id] = node
    if output not in by_id:
        raise GraphError(f"output node {output!r} does not exist")

    order = topo_order(by_id)
    blob = np.asarray(blob, dtype=np.float32)
    weights: Dict[str, np.ndarray] = {}
    shapes: Dict[str, Tuple[int, ...]] = {}
    input_shape = tuple(int(d) for d in input_shape)
    if not input_shape or any(d < 1 for d in input_shape):
        raise GraphError(f"invalid input_shape {input_shape}")
    for nid in order:
        node = by_id[nid]
        in_shapes = [input_shape if s == INPUT_ID else shapes[s] for s in node.sources()]
        shapes[nid] = _infer_shape(node, in_shapes)
        if node.has_weight:
            wshape = node.weight_shape()
            size = int(np.prod(wshape))
            off, length = int(node.weight_offset), int(node.weight_len)
            if length != size:
                raise GraphError(
                    f"node {nid!r}: weight_len {length} does not match shape {wshape} ({size})"
                )
            if off < 0 or off + length > blob.size:
                raise GraphError(
                    f"node {nid!r}: weight range [{off}, {off + length}) exceeds blob of {blob.size}"
                )
            weights[nid] = blob[off:off + length].reshape(wshape).copy()
            weights[nid].setflags(write=False)
    return Graph(by_id, input_shape, output, weights, shapes, order)


def load_model(model_dir) -> Graph:
    model_dir = Path(model_dir)
    gpath = model_dir / "graph.json"
    try:
        spec = json.loads(gpath.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise GraphError(f"{gpath}: malformed JSON: {exc}") from exc
    try:
        nodes = [
            Node(
                id=str(d["id"]),
                kind=str(d["kind"]),
                params=dict(d.get("params") or {}),
                inputs=tuple(d.get("inputs") or ()),
                weight_offset=d.get("weight_offset"),
                weight_len=d.get("weight_len"),
            )
            for d in spec["nodes"]
        ]
        input_shape, output = spec["input_shape"], spec["output"]
    except (KeyError, TypeError) as exc:
        raise GraphError(f"{gpath}: missing or malformed field: {exc}") from exc
    blob = np.fromfile(model_dir / "weights.bin", dtype="<f4")
    used = sum(int(n.weight_len) for n in nodes if n.weight_len is not None)
    graph = build_graph(nodes, input_shape, output, blob)
    if used != blob.size:
        raise GraphError(
            f"weights.bin holds {blob.size} floats but nodes reference {used}"
        )
    return graph


def save_model(graph: Graph, model_dir) -> None:
    """Write ``graph`` as graph.json + weights.bin, packing weights in topo order."""
    model_dir = Path(model_dir)
    model_dir.mkdir(parents=True, exist_ok=True)
    chunks, offset, records = [], 0, []
    for nid in graph.order:
        node = graph.nodes[nid]
        rec = {"id": nid, "kind": node.kind, "params": node.params, "inputs": list(node.inputs)}
        if node.has_weight:
            w = np.ascontiguousarray(graph.weights[nid], dtype="<f4").ravel()
            rec["weight_offset"], rec["weight_len"] = offset, int(w.size)
            chunks.append(w)
            offset += w.size
        records.append(rec)
    doc = {"nodes": records, "input_shape": list(graph.input_shape), "output": graph.output}
    (model_dir / "graph.json").write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    blob = np.concatenate(chunks) if chunks else np.zeros(0, dtype="<f4")
    blob.astype("<f4").tofile(model_dir / "weights.bin")


def load_dataset(path) -> Dataset:
    """Read a dataset given its directory or its meta.json path."""
    path = Path(path)
    meta_path = path / "meta.json" if path.is_dir() else path
    if not meta_path.exists():
        raise FileNotFoundError(f"dataset metadata not found: {meta_path}")
    meta = json.loads(meta_path.read_text())
    root = meta_path.parent
    shape = (int(meta["num_samples"]),) + tuple(int(d) for d in meta["sample_shape"])
    data = np.fromfile(root / meta.get("data_file", "data.bin"), dtype="<f4")
    if data.size != int(np.prod(shape)):
        raise GraphError(f"{root}/data.bin holds {data.size} floats, meta implies {shape}")
    labels = None
    if meta.get("labels_file"):
        lines = (root / meta["labels_file"]).read_text().split()
        labels = np.array([int(v) for v in lines], dtype=np.int64)
        if labels.size != shape[0]:
            raise GraphError(f"{root}: {labels.size} labels for {shape[0]} samples")
    return Dataset(data.reshape(shape).astype(np.float32), labels)


def save_dataset(ds: Dataset, out_dir) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    np.ascontiguousarray(ds.samples, dtype="<f4").tofile(out_dir / "data.bin")
    meta = {"num_samples": len(ds), "sample_shape": list(ds.samples.shape[1:])}
    if ds.labels is not None:
        meta["labels_file"] = "labels.txt"
        (out_dir / "labels.txt").write_text("".join(f"{int(v)}\n" for v in ds.labels))
    (out_dir / "meta.json").write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")


# --------------------------------------------------------------------------
# execution


def apply_node(node: Node, args: List[np.ndarray], weight: Optional[np.ndarray]) -> np.ndarray:
    kind = node.kind
    if kind == "dense":
        return kernels.dense(args[0], weight)
    if kind == "conv2d":
        p = node.params
        return kernels.conv2d(args[0], weight, int(p.get("stride", 1)), int(p.get("padding", 0)))
    if kind == "relu":
        return np.maximum(args[0], np.float32(0))
    if kind == "add":
        out = args[0].copy()
        for a in args[1:]:
            out += a
        return out
    if kind == "concat":
        return np.concatenate(args, axis=1)
    if kind == "global-avg-pool":
        return kernels.global_avg_pool(args[0])
    if kind == "flatten":
        return np.ascontiguousarray(args[0]).reshape(args[0].shape[0], -1)
    raise GraphError(f"node {node.id!r}: unknown kind {kind!r}")


def check_batch(graph: Graph, batch: np.ndarray) -> np.ndarray:
    batch = np.ascontiguousarray(batch, dtype=np.float32)
    if batch.ndim != len(graph.input_shape) + 1 or tuple(batch.shape[1:]) != graph.input_shape:
        raise GraphError(
            f"input: batch shape {batch.shape} does not match input_shape {graph.input_shape}"
        )
    return batch


def forward(graph: Graph, batch: np.ndarray) -> Tuple[Dict[str, np.ndarray], np.ndarray]:
    """Full-precision forward pass; returns (node id -> activation, logits)."""
    batch = check_batch(graph, batch)
    acts: Dict[str, np.ndarray] = {}
    for nid in graph.order:
        node = graph.nodes[nid]
        args = [batch if s == INPUT_ID else acts[s] for s in node.sources()]
        out = apply_node(node, args, graph.weights.get(nid))
        if out.shape[1:] != graph.shapes[nid]:
            raise GraphError(f"node {nid!r}: produced {out.shape[1:]}, expected {graph.shapes[nid]}")
        acts[nid] = out
    return acts, acts[graph.output]


def logits(graph: Graph, batch: np.ndarray) -> np.ndarray:
    return forward(graph, batch)[1]
