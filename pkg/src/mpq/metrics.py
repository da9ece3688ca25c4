"""Task-performance and divergence metrics on logits."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from typing import Mapping, Sequence

import numpy as np

SQNR_RATIO_CAP = 1e10
SQNR_DB_CAP = 100.0
SQNR_DB_FLOOR = -100.0


def _same_shape(a, b, what):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"{what}: shape mismatch {a.shape} vs {b.shape}")
    return a, b


def top1_accuracy(logits, labels) -> float:
    logits = np.asarray(logits)
    labels = np.asarray(labels)
    if logits.ndim != 2 or logits.shape[0] != labels.shape[0]:
        raise ValueError(f"top1: {logits.shape[0]} rows but {labels.shape[0]} labels")
    if labels.size == 0:
        raise ValueError("top1: no samples")
    # np.argmax returns the first maximal index, i.e. the lowest class on ties
    return float(np.mean(np.argmax(logits, axis=1) == labels))


def softmax(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def cross_entropy_divergence(fp_logits, q_logits) -> float:
    """Mean over rows of ``-sum softmax(fp) * log softmax(q)``."""
    fp, q = _same_shape(fp_logits, q_logits, "cross-entropy")
    return float(np.mean(-(softmax(fp) * log_softmax(q)).sum(axis=-1)))


def output_mse(fp_logits, q_logits) -> float:
    fp, q = _same_shape(fp_logits, q_logits, "mse")
    return float(np.mean((fp - q) ** 2))


def sqnr_db(fp_out, q_out, mode: str = "ratio") -> float:
    """Average output SQNR in dB over the leading (sample) axis.

    ``mode="ratio"`` averages per-sample energy ratios and takes the log of
    the mean; ``mode="db"`` averages per-sample dB values instead. Ratios are
    capped at 1e10 (zero error) and the result is clamped to [-100, 100] dB.
    """
    fp, q = _same_shape(fp_out, q_out, "sqnr")
    n = fp.shape[0]
    fp = fp.reshape(n, -1)
    err = fp - q.reshape(n, -1)
    sig = np.mean(fp * fp, axis=1)
    noise = np.mean(err * err, axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(noise > 0, sig / noise, SQNR_RATIO_CAP)
    ratio = np.minimum(ratio, SQNR_RATIO_CAP)
    if mode == "ratio":
        mean = float(np.mean(ratio))
        db = 10.0 * np.log10(mean) if mean > 0 else -np.inf
    elif mode == "db":
        with np.errstate(divide="ignore"):
            db = float(np.mean(10.0 * np.log10(ratio)))
    else:
        raise ValueError(f"unknown sqnr mode {mode!r}")
    return float(min(max(db, SQNR_DB_FLOOR), SQNR_DB_CAP))


def assignment_digest(assignment: Mapping[int, object]) -> str:
    doc = {str(k): str(v) for k, v in sorted(assignment.items())}
    return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class EvalReport:
    metric: str
    value: float
    num_samples: int
    assignment_digest: str

    def to_json(self) -> dict:
        return asdict(self)
