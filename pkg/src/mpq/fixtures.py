"""Deterministic random-weight fixture networks and self-labeled datasets.

Every fixture has one designated layer whose weights carry heavy-tailed
outlier channels (scaled x8 or more). The consumer of that layer damps those
channels by the square of the gain, so they barely move the logits but still
set a wide activation range. An 8-bit per-tensor activation quantizer then
resolves the informative channels poorly, while 16 bits is unaffected.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Tuple

import numpy as np

from .graph import Dataset, Graph, Node, build_graph, logits, save_dataset, save_model

KINDS = ("mlp", "convnet", "branchy")
OUTLIER_SCALE = 8.0

CALIB_SIZE = 256
EVAL_SIZE = 1024
# out-of-domain calibration inputs: same spread, mean moved by half a std
OOD_SHIFT = 0.5


@dataclass
class Fixture:
    graph: Graph
    calib: Dataset
    eval: Dataset
    calib_ood: Dataset
    train: Dataset
    sensitive: str


class _Builder:
    def __init__(self, rng: np.random.Generator):
        self.rng = rng
        self.nodes: List[Node] = []
        self.offset = 0
        self.weights: Dict[str, np.ndarray] = {}

    def _weight(self, nid: str, shape, fan_in: int) -> np.ndarray:
        w = self.rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)
        self.weights[nid] = w
        return w

    def dense(self, nid, src, fin, fout):
        self._weight(nid, (fout, fin), fin)
        self._add(Node(nid, "dense", {"in_features": fin, "out_features": fout},
                       tuple(src), self.offset, fin * fout))

    def conv(self, nid, src, cin, cout, k=3, stride=1, padding=1):
        self._weight(nid, (cout, cin, k, k), cin * k * k)
        params = {"in_ch": cin, "out_ch": cout, "kernel": k, "stride": stride, "padding": padding}
        self._add(Node(nid, "conv2d", params, tuple(src), self.offset, cout * cin * k * k))

    def op(self, nid, kind, src):
        self.nodes.append(Node(nid, kind, {}, tuple(src)))

    def _add(self, node):
        self.nodes.append(node)
        self.offset += node.weight_len

    def make_outliers(self, nid: str, consumers, frac: float = 0.25, damp: float = 2.0):
        """Scale a fraction of the output channels of ``nid`` by OUTLIER_SCALE
        times a heavy-tailed draw; divide the matching consumer input channels
        by ``gain ** damp``."""
        w = self.weights[nid]
        n_out = w.shape[0]
        n_hot = max(1, int(round(frac * n_out)))
        hot = np.sort(self.rng.choice(n_out, size=n_hot, replace=False))
        tail = np.abs(self.rng.standard_t(3, size=n_hot)) + 1.0
        gain = OUTLIER_SCALE * tail
        w[hot] *= gain.reshape((-1,) + (1,) * (w.ndim - 1))
        gain = gain ** damp
        for consumer in ([consumers] if isinstance(consumers, str) else consumers):
            c = self.weights[consumer]
            if c.ndim == 2 and c.shape[1] != n_out:  # consumer behind a flatten
                per = c.shape[1] // n_out
                for h, g in zip(hot, gain):
                    c[:, h * per:(h + 1) * per] /= g
            else:
                c[:, hot] /= gain.reshape((-1,) + (1,) * (c.ndim - 2))

    def graph(self, input_shape, output) -> Graph:
        blob = np.concatenate([
            self.weights[n.id].astype(np.float32).ravel() for n in self.nodes if n.kind in ("dense", "conv2d")
        ])
        return build_graph(self.nodes, input_shape, output, blob)


def _mlp(b: _Builder) -> Tuple[Graph, str]:
    b.dense("fc1", [], 16, 32)
    b.op("fc1_relu", "relu", ["fc1"])
    b.dense("fc2", ["fc1_relu"], 32, 32)
    b.op("fc2_relu", "relu", ["fc2"])
    b.dense("fc3", ["fc2_relu"], 32, 10)
    b.make_outliers("fc2", "fc3")
    return b.graph([16], "fc3"), "fc2"


def _convnet(b: _Builder) -> Tuple[Graph, str]:
    b.conv("conv1", [], 3, 8)
    b.op("conv1_relu", "relu", ["conv1"])
    b.conv("conv2", ["conv1_relu"], 8, 16, stride=2)
    b.op("conv2_relu", "relu", ["conv2"])
    b.op("flat", "flatten", ["conv2_relu"])
    b.dense("fc1", ["flat"], 256, 32)
    b.op("fc1_relu", "relu", ["fc1"])
    b.dense("fc2", ["fc1_relu"], 32, 10)
    b.make_outliers("conv2", "fc1")
    return b.graph([3, 8, 8], "fc2"), "conv2"


def _branchy(b: _Builder) -> Tuple[Graph, str]:
    b.dense("stem", [], 16, 32)
    b.op("stem_relu", "relu", ["stem"])
    b.dense("branch_a", ["stem_relu"], 32, 32)
    b.op("branch_a_relu", "relu", ["branch_a"])
    b.dense("branch_b", ["stem_relu"], 32, 32)
    b.op("merge", "add", ["branch_a_relu", "branch_b"])
    b.op("merge_relu", "relu", ["merge"])
    b.dense("head", ["merge_relu"], 32, 10)
    b.make_outliers("stem", ["branch_a", "branch_b"])
    return b.graph([16], "head"), "stem"


_BUILDERS = {"mlp": _mlp, "convnet": _convnet, "branchy": _branchy}


def _inputs(rng, n, shape, shift=0.0, spread=1.0) -> np.ndarray:
    return (rng.standard_normal((n,) + tuple(shape)) * spread + shift).astype(np.float32)


def self_label(graph: Graph, samples: np.ndarray) -> Dataset:
    return Dataset(samples, np.argmax(logits(graph, samples), axis=1).astype(np.int64))


def make_fixture(kind: str, seed: int = 0, calib_size: int = CALIB_SIZE,
                 eval_size: int = EVAL_SIZE) -> Fixture:
    if kind not in _BUILDERS:
        raise ValueError(f"unknown fixture kind {kind!r}; choose from {KINDS}")
    rng = np.random.default_rng(seed)
    graph, sensitive = _BUILDERS[kind](_Builder(rng))
    shape = graph.input_shape
    calib = self_label(graph, _inputs(rng, calib_size, shape))
    evals = self_label(graph, _inputs(rng, eval_size, shape))
    ood = self_label(graph, _inputs(rng, calib_size, shape, shift=OOD_SHIFT))
    # nothing is trained; the split exists so fixture directories have the usual layout
    train = self_label(graph, _inputs(rng, eval_size, shape))
    return Fixture(graph, calib, evals, ood, train, sensitive)


def write_fixture(fx: Fixture, out_dir) -> Dict[str, Path]:
    out_dir = Path(out_dir)
    paths = {
        "model": out_dir / "model",
        "train": out_dir / "train",
        "calib": out_dir / "calib",
        "eval": out_dir / "eval",
        "calib_ood": out_dir / "calib_ood",
    }
    save_model(fx.graph, paths["model"])
    save_dataset(fx.train, paths["train"])
    save_dataset(fx.calib, paths["calib"])
    save_dataset(fx.eval, paths["eval"])
    save_dataset(fx.calib_ood, paths["calib_ood"])
    return paths
