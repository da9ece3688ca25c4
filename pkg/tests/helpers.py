"""Small graph builders shared by the unit tests."""
import json
from pathlib import Path

import numpy as np

from mpq.graph import Node, build_graph


def dense(nid, src, fin, fout, offset):
    return Node(nid, "dense", {"in_features": fin, "out_features": fout}, tuple(src), offset, fin * fout)


def conv(nid, src, cin, cout, k, offset, stride=1, padding=0):
    params = {"in_ch": cin, "out_ch": cout, "kernel": k, "stride": stride, "padding": padding}
    return Node(nid, "conv2d", params, tuple(src), offset, cout * cin * k * k)


def op(nid, kind, src):
    return Node(nid, kind, {}, tuple(src))


def chain_mlp(sizes, seed=0):
    """dense/relu chain with random weights; returns a Graph."""
    rng = np.random.default_rng(seed)
    nodes, chunks, off = [], [], 0
    prev = []
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        nodes.append(dense(f"fc{i}", prev, a, b, off))
        chunks.append(rng.standard_normal(a * b) / np.sqrt(a))
        off += a * b
        prev = [f"fc{i}"]
        if i < len(sizes) - 2:
            nodes.append(op(f"relu{i}", "relu", prev))
            prev = [f"relu{i}"]
    return build_graph(nodes, [sizes[0]], prev[0], np.concatenate(chunks))


def write_model(dirpath: Path, doc: dict, blob) -> Path:
    dirpath.mkdir(parents=True, exist_ok=True)
    (dirpath / "graph.json").write_text(json.dumps(doc))
    np.asarray(blob, dtype="<f4").tofile(dirpath / "weights.bin")
    return dirpath
