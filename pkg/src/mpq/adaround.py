"""Layer-local adaptive rounding and per-bit-width rounding caches.

Each weight-bearing layer is flattened to a ``[out, fan_in]`` matrix ``W``
and its full-precision inputs to rows ``X`` (im2col patches for conv2d). The
output error of a weight perturbation ``E`` is ``trace(E G E^T) / M`` with
``G = X^T X``, so only the Gram matrix is kept during optimization.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, Mapping, Optional, Sequence, Tuple

import numpy as np

from .graph import INPUT_ID, Dataset, Graph, Node, forward
from .quant import (
    QuantizerGroup,
    QuantizerId,
    QuantizerSpec,
    SpecTable,
    WEIGHT,
    dequantize,
    quantize,
)

log = logging.getLogger(__name__)

ZETA, GAMMA = 1.1, -0.1


class CacheMissError(KeyError):
    def __str__(self) -> str:
        return str(self.args[0])


@dataclass
class AdaRoundConfig:
    iters: int = 1000
    reg_weight: float = 0.3
    beta_start: float = 20.0
    beta_end: float = 2.0
    warmup: float = 0.2
    lr: float = 1e-2
    seed: int = 0
    polish: bool = True


def rectified_sigmoid(v: np.ndarray) -> np.ndarray:
    return np.clip(1.0 / (1.0 + np.exp(-v)) * (ZETA - GAMMA) + GAMMA, 0.0, 1.0)


def _inverse_rectified_sigmoid(h: np.ndarray) -> np.ndarray:
    p = np.clip((h - GAMMA) / (ZETA - GAMMA), 1e-6, 1 - 1e-6)
    return np.log(p / (1 - p))


def layer_rows(node: Node, x: np.ndarray) -> np.ndarray:
    """Layer inputs as rows matching the flattened weight's fan-in order."""
    x = np.asarray(x, dtype=np.float64)
    if node.kind == "dense":
        return x.reshape(x.shape[0], -1)
    if node.kind == "conv2d":
        p = node.params
        k, stride, pad = int(p["kernel"]), int(p.get("stride", 1)), int(p.get("padding", 0))
        xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
        win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
        win = win[:, :, ::stride, ::stride]  # [N, C, Ho, Wo, k, k]
        return win.transpose(0, 2, 3, 1, 4, 5).reshape(-1, x.shape[1] * k * k)
    raise ValueError(f"node {node.id!r}: AdaRound supports dense and conv2d, not {node.kind}")


def _flat_scale(spec: QuantizerSpec, rows: int) -> np.ndarray:
    s = spec.scale.reshape(-1, 1)
    return s if s.shape[0] == rows else np.broadcast_to(s, (rows, 1))


def output_error(delta: np.ndarray, gram: np.ndarray, m: int) -> float:
    """Mean squared layer-output error for flattened weight error ``delta``."""
    return float(np.einsum("od,de,oe->", delta, gram, delta) / (m * delta.shape[0]))


def polish_rounding(q, w, s, floor, gram, n, p, max_steps=None) -> np.ndarray:
    """Best-improvement single flips between floor and floor + 1 on the exact
    quadratic objective; stops at a 1-flip local optimum."""
    q = np.asarray(q, dtype=np.float64).copy()
    err = s * q - w
    eg = err @ gram
    diag = np.diag(gram)
    for _ in range(max_steps or q.size):
        alt = np.clip(np.where(q == floor, floor + 1, floor), n, p)
        d = (alt - q) * s
        gain = 2.0 * d * eg + d * d * diag[None, :]
        o, j = np.unravel_index(np.argmin(gain), gain.shape)
        if not gain[o, j] < -1e-12 * max(1.0, float(np.abs(eg).max())):
            break
        q[o, j] = alt[o, j]
        err[o, j] += d[o, j]
        eg[o] += d[o, j] * gram[j]
    return q


def adaround_layer(
    node: Node,
    weight: np.ndarray,
    w_spec: QuantizerSpec,
    fp_inputs: np.ndarray,
    config: Optional[AdaRoundConfig] = None,
) -> np.ndarray:
    """Learn up/down rounding for one layer; returns clipped integer weights
    shaped like ``weight``. Never worse than nearest rounding on ``fp_inputs``."""
    cfg = config or AdaRoundConfig()
    if node.kind not in ("dense", "conv2d"):
        raise ValueError(f"node {node.id!r}: AdaRound supports dense and conv2d, not {node.kind}")
    if w_spec.zero_point.any():
        raise ValueError("AdaRound expects a symmetric weight quantizer")
    if len(fp_inputs) == 0:
        raise ValueError("empty calibration data")
    rows = layer_rows(node, fp_inputs)
    shape = weight.shape
    w = np.asarray(weight, dtype=np.float64).reshape(shape[0], -1)
    s = _flat_scale(w_spec, w.shape[0])
    n, p = w_spec.n, w_spec.p
    gram = rows.T @ rows
    m = rows.shape[0]

    floor = np.floor(w / s)
    nearest = np.clip(np.rint(w / s), n, p)
    nearest_err = output_error(s * nearest - w, gram, m)

    rng = np.random.default_rng(cfg.seed)
    frac = w / s - floor
    v = _inverse_rectified_sigmoid(frac) + rng.normal(0.0, 1e-3, size=frac.shape)
    # loss is measured in squared integer steps so reg_weight is scale free
    norm = float(np.mean(s ** 2) * max(np.mean(np.diag(gram)) / m, 1e-30))
    m1 = np.zeros_like(v)
    m2 = np.zeros_like(v)
    b1, b2, eps = 0.9, 0.999, 1e-8
    warm = int(cfg.warmup * cfg.iters)
    for it in range(cfg.iters):
        sig = 1.0 / (1.0 + np.exp(-v))
        h_raw = sig * (ZETA - GAMMA) + GAMMA
        h = np.clip(h_raw, 0.0, 1.0)
        w_soft = s * np.clip(floor + h, n, p)
        # d(rec)/dW_soft; the [n, p] clip is passed straight through
        grad_w = 2.0 * ((w_soft - w) @ gram) / (m * w.shape[0] * norm)
        grad_h = grad_w * s
        if it >= warm:
            t = (it - warm) / max(cfg.iters - warm - 1, 1)
            beta = cfg.beta_end + 0.5 * (cfg.beta_start - cfg.beta_end) * (1 + np.cos(np.pi * t))
            u = 2.0 * h - 1.0
            grad_h = grad_h - 2.0 * cfg.reg_weight * beta * np.abs(u) ** (beta - 1) * np.sign(u)
        inside = (h_raw > 0.0) & (h_raw < 1.0)
        grad_v = grad_h * inside * sig * (1.0 - sig) * (ZETA - GAMMA)
        m1 = b1 * m1 + (1 - b1) * grad_v
        m2 = b2 * m2 + (1 - b2) * grad_v ** 2
        mh = m1 / (1 - b1 ** (it + 1))
        vh = m2 / (1 - b2 ** (it + 1))
        v = v - cfg.lr * mh / (np.sqrt(vh) + eps)

    h = rectified_sigmoid(v)
    ada = np.clip(floor + (h >= 0.5), n, p)
    if cfg.polish:
        ada = polish_rounding(ada, w, s, floor, gram, n, p)
    ada_err = output_error(s * ada - w, gram, m)
    if ada_err > nearest_err:
        log.debug("%s: adaround %.3g worse than nearest %.3g; keeping nearest", node.id, ada_err, nearest_err)
        ada = nearest
    return ada.reshape(shape).astype(np.int64)


class AdaRoundCache:
    """(node id, weight bits) -> AdaRounded integer weights and their spec."""

    def __init__(self, entries: Optional[Dict[Tuple[str, int], Tuple[np.ndarray, QuantizerSpec]]] = None):
        self.entries = dict(entries or {})

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, key) -> bool:
        return key in self.entries

    def integers(self, node_id: str, bits: int) -> np.ndarray:
        try:
            return self.entries[(node_id, bits)][0]
        except KeyError:
            raise CacheMissError(f"AdaRound cache has no entry for node {node_id!r} at w={bits}") from None

    def weight(self, node_id: str, bits: int) -> np.ndarray:
        q = self.integers(node_id, bits)
        return dequantize(q, self.entries[(node_id, bits)][1])

    def save(self, out_dir) -> None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        manifest = []
        for (nid, bits), (q, spec) in sorted(self.entries.items()):
            fname = f"{nid}.w{bits}.bin"
            np.ascontiguousarray(q, dtype="<i4").tofile(out_dir / fname)
            manifest.append({"node": nid, "bits": bits, "file": fname,
                             "shape": list(q.shape), "spec": spec.to_json()})
        (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")

    @classmethod
    def load(cls, cache_dir) -> "AdaRoundCache":
        cache_dir = Path(cache_dir)
        mpath = cache_dir / "manifest.json"
        if not mpath.exists():
            raise FileNotFoundError(f"AdaRound cache not found: {mpath} (run `mpq adaround` first)")
        entries = {}
        for rec in json.loads(mpath.read_text()):
            q = np.fromfile(cache_dir / rec["file"], dtype="<i4").astype(np.int64)
            entries[(rec["node"], int(rec["bits"]))] = (
                q.reshape(rec["shape"]), QuantizerSpec.from_json(rec["spec"], int(rec["bits"])))
        return cls(entries)


def adaround_network(
    graph: Graph,
    specs: SpecTable,
    calib: Dataset,
    weight_bitwidths: Iterable[int],
    config: Optional[AdaRoundConfig] = None,
) -> AdaRoundCache:
    """Round every weight layer at every requested width using full-precision
    layer inputs, so each entry is independent of any bit-width assignment."""
    if calib is None or len(calib) == 0:
        raise ValueError("empty calibration data")
    cfg = config or AdaRoundConfig()
    acts, _ = forward(graph, calib.samples)
    acts[INPUT_ID] = np.asarray(calib.samples, dtype=np.float32)
    cache = AdaRoundCache()
    for idx, nid in enumerate(graph.weight_nodes()):
        node = graph.nodes[nid]
        x = acts[node.sources()[0]]
        for bits in sorted(set(weight_bitwidths)):
            spec = specs[QuantizerId(nid, WEIGHT)][bits]
            layer_cfg = AdaRoundConfig(**{**cfg.__dict__, "seed": cfg.seed + 1000 * idx + bits})
            q = adaround_layer(node, graph.weights[nid], spec, x, layer_cfg)
            cache.entries[(nid, bits)] = (q, spec)
            log.info("adaround %s w=%d done", nid, bits)
    return cache


class StitchedWeights:
    """Weights for one assignment, assembled from per-bit-width cache slices."""

    def __init__(self, per_node: Mapping[str, Tuple[int, np.ndarray]]):
        self.per_node = dict(per_node)

    def weight(self, node_id: str, bits: int) -> np.ndarray:
        have_bits, w = self.per_node[node_id]
        if have_bits != bits:
            raise CacheMissError(f"stitched weights hold node {node_id!r} at w={have_bits}, not {bits}")
        return w


def stitch(cache: AdaRoundCache, assignment, groups: Sequence[QuantizerGroup]) -> StitchedWeights:
    per_node = {}
    for g in groups:
        cand = assignment[g.id]
        for nid in g.weight_nodes:
            per_node[nid] = (cand.w_bits, cache.weight(nid, cand.w_bits))
    return StitchedWeights(per_node)
