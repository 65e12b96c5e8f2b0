"""scikit-learn compatible estimator wrapping the hierarchical network."""
from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from . import checkpoint
from . import tensor as T
from .model import HSENetwork, ModelConfig
from .taxonomy import Taxonomy, derive_label_path, format_taxonomy, parse_taxonomy
from .tensor import Tensor, softmax_array
from .training import MetricsLog, StagePlan, augment_batch, predict_scores, train_stage1, train_stage2
from .validation import check_consistent_length, check_images, check_label_paths

VARIANTS = {
    "full": dict(enable_serl=True, enable_sglr=True),
    "baseline": dict(enable_serl=False, enable_sglr=False),
    "no-serl": dict(enable_serl=False, enable_sglr=True),
    "no-sglr": dict(enable_serl=True, enable_sglr=False),
}


class HSEClassifier(ClassifierMixin, BaseEstimator):
    """Hierarchical classifier trained with guided attention and label regularization.

    ``fit`` takes raw images ``X`` of shape [N, 3, H, W] with values in [0, 1]
    and labels ``y`` given either as finest-level indices or as [N, L] label
    paths. Training runs the level-wise stage followed by joint fine tuning.
    ``predict`` returns finest-level indices; :meth:`predict_levels` returns one
    prediction per level.

    Parameters
    ----------
    taxonomy : Taxonomy
        The category hierarchy; its level sizes fix the output layers.
    enable_serl, enable_sglr : bool
        Switch the guided attention pathway and the KL label regularizer.
    lr : float
        Stage-1 learning rate. Stage 2 uses ``stage2_lr`` or ``lr / 10``.
    stage1_epochs : int
        Epochs per level in stage 1.
    resize, crop : int
        Images are resized to ``resize`` and cropped to ``crop`` (random crop
        and flips while training, centre crop otherwise).
    """

    def __init__(self, taxonomy: Taxonomy | None = None, *, trunk_widths=(16, 32, 64, 64),
                 feature_dim=64, semantic_dim=32, attention_hidden=32, branch_kernel=3,
                 enable_serl=True, enable_sglr=True, detach_guidance=True, temperature=4.0,
                 gamma=None, lr=0.001, stage2_lr=None, momentum=0.9, weight_decay=5e-5,
                 batch_size=8, stage1_epochs=10, stage2_epochs=5, patience=5, max_drops=2,
                 resize=64, crop=56, augment=True, standardize=True, dtype="float32",
                 random_state=0):
        self.taxonomy = taxonomy
        self.trunk_widths = trunk_widths
        self.feature_dim = feature_dim
        self.semantic_dim = semantic_dim
        self.attention_hidden = attention_hidden
        self.branch_kernel = branch_kernel
        self.enable_serl = enable_serl
        self.enable_sglr = enable_sglr
        self.detach_guidance = detach_guidance
        self.temperature = temperature
        self.gamma = gamma
        self.lr = lr
        self.stage2_lr = stage2_lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.batch_size = batch_size
        self.stage1_epochs = stage1_epochs
        self.stage2_epochs = stage2_epochs
        self.patience = patience
        self.max_drops = max_drops
        self.resize = resize
        self.crop = crop
        self.augment = augment
        self.standardize = standardize
        self.dtype = dtype
        self.random_state = random_state

    # -- configuration --------------------------------------------------------------

    def _model_config(self, taxonomy: Taxonomy) -> ModelConfig:
        return ModelConfig(
            level_sizes=taxonomy.level_sizes, trunk_widths=tuple(self.trunk_widths),
            feature_dim=self.feature_dim, branch_kernel=self.branch_kernel,
            semantic_dim=self.semantic_dim, attention_hidden=self.attention_hidden,
            enable_serl=self.enable_serl, enable_sglr=self.enable_sglr,
            detach_guidance=self.detach_guidance, temperature=self.temperature,
            gamma=self.gamma, dtype=self.dtype)

    def _plan(self, stage: int) -> StagePlan:
        if stage == 1:
            lr, epochs = self.lr, self.stage1_epochs
        else:
            lr = self.stage2_lr if self.stage2_lr is not None else self.lr / 10
            epochs = self.stage2_epochs
        return StagePlan(stage=stage, lr=lr, epochs=epochs, batch_size=self.batch_size,
                         momentum=self.momentum, weight_decay=self.weight_decay,
                         patience=self.patience, max_drops=self.max_drops,
                         seed=self.random_state, resize=self.resize, crop=self.crop,
                         augment=self.augment)

    def _taxonomy(self) -> Taxonomy:
        if self.taxonomy is None:
            raise ValueError("HSEClassifier needs a taxonomy")
        if isinstance(self.taxonomy, (str, os.PathLike)):
            return parse_taxonomy(Path(self.taxonomy).read_text(encoding="utf-8"))
        return self.taxonomy

    # -- fitting ------------------------------------------------------------------------

    def fit(self, X, y, X_val=None, y_val=None, stages=(1, 2)):
        """Train on images ``X`` and labels ``y``; the plateau rule watches ``X_val``."""
        tax = self._taxonomy()
        X = check_images(X, 3, self.dtype)
        Y = check_label_paths(y, tax)
        check_consistent_length(X, Y)
        if X_val is not None:
            X_val = check_images(X_val, 3, self.dtype)
            y_val = check_label_paths(y_val, tax)
            check_consistent_length(X_val, y_val)

        self.taxonomy_ = tax
        self.n_levels_ = tax.level_count
        self.classes_ = np.arange(tax.level_sizes[-1])
        if self.standardize:
            self.mean_ = X.mean(axis=(0, 2, 3)).astype(self.dtype)
            self.scale_ = X.std(axis=(0, 2, 3)).astype(self.dtype)
            self.scale_[self.scale_ == 0] = 1
        else:
            self.mean_ = np.zeros(3, dtype=self.dtype)
            self.scale_ = np.ones(3, dtype=self.dtype)
        self.network_ = HSENetwork(self._model_config(tax), tax, seed=self.random_state)
        self.log_ = MetricsLog()
        Xs = self._standardize(X)
        Xv = None if X_val is None else self._standardize(X_val)
        if 1 in stages:
            train_stage1(self.network_, Xs, Y, self._plan(1), Xv, y_val, self.log_)
        if 2 in stages:
            train_stage2(self.network_, Xs, Y, self._plan(2), Xv, y_val, self.log_)
        return self

    def _standardize(self, X: np.ndarray) -> np.ndarray:
        return ((X - self.mean_[None, :, None, None]) / self.scale_[None, :, None, None]).astype(
            self.dtype, copy=False)

    @property
    def metrics_log_(self) -> list[dict]:
        check_is_fitted(self, "log_")
        return self.log_.records

    # -- inference --------------------------------------------------------------------------

    def level_scores(self, X, batch_size: int = 64) -> list[np.ndarray]:
        """Final score vectors of every level, coarsest first: a list of [N, n_i] arrays."""
        check_is_fitted(self, "network_")
        X = self._standardize(check_images(X, 3, self.dtype))
        return predict_scores(self.network_, X, self.resize, self.crop, batch_size)

    def decision_function(self, X) -> np.ndarray:
        return self.level_scores(X)[-1]

    def predict_proba(self, X) -> np.ndarray:
        return softmax_array(self.decision_function(X).astype(np.float64), axis=1)

    def predict(self, X) -> np.ndarray:
        # ties go to the lowest index (np.argmax)
        return np.argmax(self.decision_function(X), axis=1)

    def predict_levels(self, X, mode: str = "hierarchical") -> np.ndarray:
        """[N, L] predictions: per-level argmax, or ancestors of the leaf argmax (``backtrack``)."""
        scores = self.level_scores(X)
        if mode == "hierarchical":
            return np.stack([np.argmax(s, axis=1) for s in scores], axis=1)
        if mode == "backtrack":
            leaves = np.argmax(scores[-1], axis=1)
            return np.array([derive_label_path(self.taxonomy_, int(k)) for k in leaves],
                            dtype=np.int64).reshape(len(leaves), self.n_levels_)
        raise ValueError(f"unknown prediction mode {mode!r}")

    def attention_maps(self, X, level: int) -> np.ndarray:
        """Normalized attention [N, C, h, w] of the guided pathway at ``level``."""
        check_is_fitted(self, "network_")
        cfg = self.network_.config
        if not cfg.guided(level):
            raise ValueError(f"level {level} has no guided attention (needs level >= 2 and SERL)")
        X = self._standardize(check_images(X, 3, self.dtype))
        xb = augment_batch(X, None, False, self.resize, self.crop, self.dtype)
        with T.no_grad():
            scores = self.network_.forward(Tensor(xb), levels=level)
        return scores[-1].attention.normalized.data

    def score_levels(self, X, y) -> list[float]:
        Y = check_label_paths(y, self.taxonomy_)
        P = self.predict_levels(X)
        return [float(np.mean(P[:, i] == Y[:, i])) for i in range(self.n_levels_)]

    # -- persistence ---------------------------------------------------------------------------

    def save(self, directory) -> Path:
        """Write ``model.ntc`` (NTC1 parameters), ``model.json`` and ``taxonomy.tsv``."""
        check_is_fitted(self, "network_")
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        tensors = dict(self.network_.state_dict())
        tensors["input.mean"] = self.mean_
        tensors["input.scale"] = self.scale_
        checkpoint.save(d / "model.ntc", tensors)
        params = {k: (list(v) if isinstance(v, tuple) else v)
                  for k, v in self.get_params().items() if k != "taxonomy"}
        (d / "model.json").write_text(json.dumps({"params": params}, indent=2, sort_keys=True))
        (d / "taxonomy.tsv").write_text(format_taxonomy(self.taxonomy_), encoding="utf-8")
        (d / "metrics.jsonl").write_text(self.log_.to_jsonl())
        return d

    @classmethod
    def load(cls, directory) -> "HSEClassifier":
        d = Path(directory)
        meta = json.loads((d / "model.json").read_text())
        tax = parse_taxonomy((d / "taxonomy.tsv").read_text(encoding="utf-8"))
        params = dict(meta["params"])
        params["trunk_widths"] = tuple(params["trunk_widths"])
        est = cls(taxonomy=tax, **params)
        tensors = checkpoint.load(d / "model.ntc")
        est.taxonomy_ = tax
        est.n_levels_ = tax.level_count
        est.classes_ = np.arange(tax.level_sizes[-1])
        est.mean_ = tensors.pop("input.mean")
        est.scale_ = tensors.pop("input.scale")
        est.network_ = HSENetwork(est._model_config(tax), tax, seed=est.random_state)
        est.network_.load_state_dict(tensors)
        est.log_ = MetricsLog()
        log_file = d / "metrics.jsonl"
        if log_file.exists():
            est.log_.records = [json.loads(line) for line in log_file.read_text().splitlines() if line]
        return est

    def __sklearn_tags__(self):
        tags = super().__sklearn_tags__()
        tags.input_tags.three_d_array = True
        return tags
