"""Ablation runner: train each model variant over several seeds on one dataset."""
from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import Dataset, load_dataset_dir
from .estimator import VARIANTS, HSEClassifier
from .metrics import evaluate

# small enough that a full run takes about a minute on one core
DESK_PARAMS = dict(trunk_widths=(8, 16, 32, 32), feature_dim=32, semantic_dim=16,
                   attention_hidden=16, lr=0.01, stage1_epochs=8, stage2_epochs=4,
                   batch_size=8, dtype="float32")


@dataclass
class RunResult:
    variant: str
    seed: int
    report: dict
    metrics_log: str
    seconds: float

    @property
    def finest_accuracy(self) -> float:
        return self.report["accuracy"][-1]

    @property
    def finest_inter_errors(self) -> int:
        return self.report["inter_superclass_errors"][-1]


@dataclass
class AblationResult:
    runs: list[RunResult] = field(default_factory=list)

    def by_variant(self, variant: str) -> list[RunResult]:
        return [r for r in self.runs if r.variant == variant]

    def median(self, variant: str, key: str) -> float:
        return float(np.median([getattr(r, key) for r in self.by_variant(variant)]))

    def summary(self) -> dict:
        out = {}
        for v in dict.fromkeys(r.variant for r in self.runs):
            runs = self.by_variant(v)
            out[v] = {
                "median_finest_accuracy": self.median(v, "finest_accuracy"),
                "median_finest_inter_errors": self.median(v, "finest_inter_errors"),
                "median_consistency_rate": float(np.median([r.report["consistency_rate"] for r in runs])),
                "accuracy": [r.report["accuracy"] for r in runs],
                "seeds": [r.seed for r in runs],
                "seconds": [round(r.seconds, 1) for r in runs],
            }
        return out


def run_variant(variant: str, seed: int, train: Dataset, val: Dataset | None, test: Dataset,
                **params) -> tuple[RunResult, HSEClassifier]:
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; choose from {sorted(VARIANTS)}")
    kw = {**DESK_PARAMS, **params, **VARIANTS[variant], "random_state": seed}
    X, Y = train.arrays()
    Xv, Yv = val.arrays() if val is not None and len(val) else (None, None)
    Xt, Yt = test.arrays()
    t0 = time.perf_counter()
    est = HSEClassifier(train.taxonomy, **kw).fit(X, Y, Xv, Yv)
    P = est.predict_levels(Xt)
    report = evaluate(train.taxonomy, P, Yt, variant=variant, seed=seed).to_dict()
    return RunResult(variant, seed, report, est.log_.to_jsonl(), time.perf_counter() - t0), est


def run_ablation(data_dir, variants: Sequence[str] = ("baseline", "no-serl", "no-sglr", "full"),
                 seeds: Sequence[int] = (0, 1, 2), out_dir=None, **params) -> AblationResult:
    """Train every (variant, seed) pair on ``data_dir`` and evaluate on its test split.

    With ``out_dir``, each run's metrics log and report are written to
    ``<out_dir>/<variant>_seed<k>.{jsonl,json}``.
    """
    _, splits = load_dataset_dir(data_dir)
    result = AblationResult()
    for variant in variants:
        for seed in seeds:
            run, _ = run_variant(variant, seed, splits["train"], splits["val"], splits["test"], **params)
            result.runs.append(run)
            if out_dir is not None:
                d = Path(out_dir)
                d.mkdir(parents=True, exist_ok=True)
                (d / f"{variant}_seed{seed}.jsonl").write_text(run.metrics_log)
                (d / f"{variant}_seed{seed}.json").write_text(json.dumps(run.report, sort_keys=True, indent=2))
    return result
