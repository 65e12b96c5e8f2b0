"""Hierarchy-aware evaluation: per-level accuracy, error decomposition, path consistency."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import write_ppm
from .taxonomy import Taxonomy


def _as_paths(a, name: str) -> np.ndarray:
    a = np.asarray(a, dtype=np.int64)
    if a.ndim == 1:
        a = a[:, None]
    if a.ndim != 2:
        raise ValueError(f"{name} must be [N, L], got shape {a.shape}")
    return a


def per_level_accuracy(predictions, labels) -> np.ndarray:
    """Fraction of exact matches at each level."""
    P, Y = _as_paths(predictions, "predictions"), _as_paths(labels, "labels")
    if P.shape != Y.shape:
        raise ValueError(f"predictions {P.shape} and labels {Y.shape} differ in shape")
    if len(P) == 0:
        return np.zeros(P.shape[1])
    return np.mean(P == Y, axis=0)


def error_decomposition(taxonomy: Taxonomy, level: int, predictions, labels) -> tuple[int, int]:
    """Split the wrong predictions at ``level`` into (inter, intra) superclass errors.

    ``predictions`` and ``labels`` are indices at ``level``. A mistake is an
    inter-superclass error when the predicted category and the truth have
    different parents.
    """
    if level < 2 or level > taxonomy.level_count:
        raise ValueError(f"error decomposition needs a level in 2..{taxonomy.level_count}, got {level}")
    p = np.asarray(predictions, dtype=np.int64).ravel()
    y = np.asarray(labels, dtype=np.int64).ravel()
    if p.shape != y.shape:
        raise ValueError(f"{len(p)} predictions for {len(y)} labels")
    parent = taxonomy.parent_map(level)
    wrong = p != y
    inter = int(np.sum(wrong & (parent[p] != parent[y])))
    return inter, int(np.sum(wrong)) - inter


def consistency_rate(taxonomy: Taxonomy, predictions) -> float:
    """Fraction of samples whose per-level predictions form a path in the taxonomy."""
    P = _as_paths(predictions, "predictions")
    if P.shape[1] != taxonomy.level_count:
        raise ValueError(f"need predictions for {taxonomy.level_count} levels, got {P.shape[1]}")
    if len(P) == 0:
        return 1.0
    ok = np.ones(len(P), dtype=bool)
    for level in range(2, taxonomy.level_count + 1):
        ok &= taxonomy.parent_map(level)[P[:, level - 1]] == P[:, level - 2]
    return float(np.mean(ok))


@dataclass
class MetricsReport:
    accuracy: list[float]
    inter_superclass_errors: list[int | None]
    intra_superclass_errors: list[int | None]
    consistency_rate: float
    n_samples: int
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = {
            "accuracy": [float(a) for a in self.accuracy],
            "accuracy_percent": [round(100.0 * float(a), 1) for a in self.accuracy],
            "inter_superclass_errors": list(self.inter_superclass_errors),
            "intra_superclass_errors": list(self.intra_superclass_errors),
            "consistency_rate": float(self.consistency_rate),
            "n_samples": int(self.n_samples),
        }
        d.update(self.extra)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)


def evaluate(taxonomy: Taxonomy, predictions, labels, **extra) -> MetricsReport:
    """Build the full report from [N, L] predictions and label paths."""
    P, Y = _as_paths(predictions, "predictions"), _as_paths(labels, "labels")
    acc = per_level_accuracy(P, Y)
    inter: list[int | None] = [None]
    intra: list[int | None] = [None]
    for level in range(2, taxonomy.level_count + 1):
        a, b = error_decomposition(taxonomy, level, P[:, level - 1], Y[:, level - 1])
        inter.append(a)
        intra.append(b)
    return MetricsReport(list(acc), inter, intra, consistency_rate(taxonomy, P), len(P), dict(extra))


def relative_reduction(before: float, after: float) -> float:
    """Percentage by which ``after`` is below ``before`` (0 when ``before`` is 0)."""
    return 0.0 if before == 0 else 100.0 * (before - after) / before


def attention_heatmap(weights: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Channel mean of normalized attention [C, H, W] and its 8-bit rendering.

    A flat map renders as constant mid gray.
    """
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim != 3:
        raise ValueError(f"attention weights must be [C, H, W], got shape {w.shape}")
    heat = w.mean(axis=0)
    lo, hi = heat.min(), heat.max()
    if hi - lo <= 1e-12 * max(abs(hi), 1e-300):
        img = np.full(heat.shape, 128, dtype=np.uint8)
    else:
        img = np.round(255 * (heat - lo) / (hi - lo)).astype(np.uint8)
    return heat, img


def write_heatmap(weights: np.ndarray, out_file) -> tuple[Path, Path]:
    """Write the heatmap as a P5 image and the raw values next to it (``.txt``)."""
    heat, img = attention_heatmap(weights)
    out = Path(out_file)
    write_ppm(out, img)
    raw = out.with_suffix(".txt")
    np.savetxt(raw, heat, fmt="%.17g")
    return out, raw
