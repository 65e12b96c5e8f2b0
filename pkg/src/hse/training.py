"""Two-stage optimisation: level-wise branch training, then joint fine tuning."""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from . import tensor as T
from .data import batch_iterator
from .losses import cross_entropy, kl_regularizer, level_loss
from .model import HSENetwork, LevelScores
from .tensor import Tensor

logger = logging.getLogger(__name__)


# -- optimiser ------------------------------------------------------------------

@dataclass
class OptimizerState:
    lr: float
    momentum: float = 0.9
    weight_decay: float = 5e-5
    velocity: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError(f"learning rate must be positive, got {self.lr}")


def sgd_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray],
             state: OptimizerState) -> None:
    """In-place momentum SGD with L2 weight decay on the named parameters.

    ``g' = g + wd * p``, ``v = momentum * v + g'``, ``p = p - lr * v``. Parameters
    without an entry in ``grads`` are left untouched.
    """
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.shape:
            raise ValueError(f"{name}: gradient shape {g.shape} does not match parameter {p.shape}")
        if state.weight_decay:
            g = g + state.weight_decay * p.data
        v = state.velocity.get(name)
        v = g.astype(p.dtype, copy=True) if v is None else state.momentum * v + g
        state.velocity[name] = v
        p.data = p.data - state.lr * v


class PlateauSchedule:
    """Divide the learning rate by ``factor`` when validation accuracy stalls.

    A stall is ``patience`` consecutive epochs whose accuracy does not beat the
    best so far by more than ``min_delta``. At most ``max_drops`` reductions.
    """

    def __init__(self, lr: float, patience: int = 5, min_delta: float = 1e-4,
                 max_drops: int = 2, factor: float = 10.0):
        self.lr = lr
        self.patience = patience
        self.min_delta = min_delta
        self.max_drops = max_drops
        self.factor = factor
        self.best = -np.inf
        self.bad_epochs = 0
        self.drops = 0

    def step(self, accuracy: float) -> float:
        if accuracy > self.best + self.min_delta:
            self.best = accuracy
            self.bad_epochs = 0
            return self.lr
        self.bad_epochs += 1
        if self.bad_epochs >= self.patience and self.drops < self.max_drops:
            self.lr /= self.factor
            self.drops += 1
            self.bad_epochs = 0
        return self.lr


def plateau_lr(history: Sequence[float], lr: float, patience: int = 5, min_delta: float = 1e-4,
               max_drops: int = 2) -> float:
    """Learning rate after replaying a validation-accuracy history through the schedule."""
    if not history:
        raise ValueError("plateau_lr needs at least one recorded epoch")
    sched = PlateauSchedule(lr, patience, min_delta, max_drops)
    for acc in history:
        sched.step(acc)
    return sched.lr


# -- augmentation -----------------------------------------------------------------

def resize_bilinear(image: np.ndarray, size: int) -> np.ndarray:
    """Resize a [C, H, W] image to [C, size, size] (half-pixel centres, edge clamped)."""
    c, h, w = image.shape
    if h == size and w == size:
        return image.copy()

    def axis(n_in):
        src = (np.arange(size) + 0.5) * n_in / size - 0.5
        src = np.clip(src, 0, n_in - 1)
        lo = np.floor(src).astype(np.intp)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, src - lo

    y0, y1, fy = axis(h)
    x0, x1, fx = axis(w)
    top = image[:, y0][:, :, x0] * (1 - fx) + image[:, y0][:, :, x1] * fx
    bottom = image[:, y1][:, :, x0] * (1 - fx) + image[:, y1][:, :, x1] * fx
    return top * (1 - fy)[:, None] + bottom * fy[:, None]


def hflip(image: np.ndarray) -> np.ndarray:
    return image[..., ::-1].copy()


def augment_sample(image: np.ndarray, rng: np.random.Generator | None, train_mode: bool,
                   resize: int = 64, crop: int = 56) -> np.ndarray:
    """Resize to ``resize``; random crop + 50% horizontal flip (train) or centre crop (eval)."""
    if crop > resize:
        raise ValueError(f"crop {crop} larger than resize {resize}")
    image = np.asarray(image)
    if image.ndim != 3 or min(image.shape[1:]) < crop:
        raise ValueError(f"image of shape {image.shape} smaller than crop {crop}")
    image = resize_bilinear(image, resize)
    if train_mode:
        top = int(rng.integers(0, resize - crop + 1))
        left = int(rng.integers(0, resize - crop + 1))
        out = image[:, top:top + crop, left:left + crop]
        if rng.random() < 0.5:
            out = out[:, :, ::-1]
        return np.ascontiguousarray(out)
    off = (resize - crop) // 2
    return np.ascontiguousarray(image[:, off:off + crop, off:off + crop])


def augment_batch(images: np.ndarray, rng, train_mode: bool, resize: int, crop: int,
                  dtype="float64") -> np.ndarray:
    out = np.stack([augment_sample(im, rng, train_mode, resize, crop) for im in images])
    return out.astype(dtype, copy=False)


# -- plans and losses ---------------------------------------------------------------

@dataclass
class StagePlan:
    stage: int
    lr: float
    epochs: int
    batch_size: int = 8
    momentum: float = 0.9
    weight_decay: float = 5e-5
    patience: int = 5
    min_delta: float = 1e-4
    max_drops: int = 2
    seed: int = 0
    resize: int = 64
    crop: int = 56
    augment: bool = True

    def __post_init__(self):
        if self.stage not in (1, 2):
            raise ValueError(f"stage must be 1 or 2, got {self.stage}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")

    def trainable(self, net: HSENetwork, level: int | None = None) -> list[str]:
        """Stage 1 trains one branch (trunk frozen); stage 2 trains everything."""
        if self.stage == 1:
            return net.branch_params(level)
        return list(net.params)


def level_objective(net: HSENetwork, scores: Sequence[LevelScores], labels: np.ndarray,
                    level: int) -> tuple[Tensor, float, float | None]:
    """Combined loss of one level: its classification terms plus the weighted regularizer.

    Returns the loss tensor, the classification part and the regularizer value
    (``None`` when the level has no regularizer).
    """
    cfg = net.config
    s = scores[level - 1]
    target = labels[:, level - 1]
    outputs = s.classifier_outputs
    if len(outputs) > 1:
        outputs = outputs + [s.s_final]
    ce = [cross_entropy(o, target) for o in outputs]
    cls_value = float(np.sum([c.item() for c in ce]))
    reg = None
    if level >= 2 and cfg.enable_sglr:
        if s.s_extended_from_parent is None:
            raise ValueError("regularizer needs the extended parent scores (attach a taxonomy)")
        reg = kl_regularizer(s.s_extended_from_parent, s.s_final, cfg.temperature,
                             detach_target=cfg.detach_guidance)
    loss = level_loss(ce, reg, cfg.balance)
    return loss, cls_value, (None if reg is None else reg.item())


# -- evaluation helpers ---------------------------------------------------------------

def predict_scores(net: HSENetwork, X: np.ndarray, resize: int, crop: int,
                   batch_size: int = 64) -> list[np.ndarray]:
    """Final per-level scores for raw images, using the deterministic eval transform."""
    chunks: list[list[np.ndarray]] = [[] for _ in range(net.config.level_count)]
    with T.no_grad():
        for start in range(0, len(X), batch_size):
            xb = augment_batch(X[start:start + batch_size], None, False, resize, crop, net.config.dtype)
            for lvl, s in enumerate(net.forward(Tensor(xb))):
                chunks[lvl].append(s.s_final.data)
    return [np.concatenate(c) if c else np.zeros((0, n)) for c, n in zip(chunks, net.config.level_sizes)]


def level_accuracy(scores: Sequence[np.ndarray], labels: np.ndarray) -> list[float]:
    if len(labels) == 0:
        return [0.0] * len(scores)
    return [float(np.mean(np.argmax(s, axis=1) == labels[:, i])) for i, s in enumerate(scores)]


# -- stages ----------------------------------------------------------------------------

@dataclass
class MetricsLog:
    records: list[dict] = field(default_factory=list)
    sink: Callable[[dict], None] | None = None

    def append(self, record: dict) -> None:
        self.records.append(record)
        if self.sink is not None:
            self.sink(record)

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.records)


def _fit_epochs(net, X, Y, plan: StagePlan, names: list[str], X_val, Y_val, log: MetricsLog,
                level: int | None, step_fn) -> None:
    opt = OptimizerState(plan.lr, plan.momentum, plan.weight_decay)
    sched = PlateauSchedule(plan.lr, plan.patience, plan.min_delta, plan.max_drops)
    L = net.config.level_count
    key = level if level is not None else 0
    for epoch in range(plan.epochs):
        rng = np.random.default_rng([plan.seed, plan.stage, key, epoch])
        cls_sum, reg_sum, tot_sum, seen = np.zeros(L), np.zeros(L), 0.0, 0
        correct = np.zeros(L)
        for idx in batch_iterator(len(X), plan.batch_size, seed=plan.seed, epoch=epoch):
            xb = augment_batch(X[idx], rng, plan.augment, plan.resize, plan.crop, net.config.dtype)
            yb = Y[idx]
            net.zero_grad()
            loss, cls, reg, scores = step_fn(Tensor(xb), yb)
            loss.check_finite()
            T.backward(loss)
            sgd_step(net.params, {n: net.params[n].grad for n in names if net.params[n].grad is not None}, opt)
            n = len(idx)
            seen += n
            tot_sum += loss.item() * n
            for lvl, v in cls.items():
                cls_sum[lvl - 1] += v * n
            for lvl, v in reg.items():
                reg_sum[lvl - 1] += v * n
            for lvl, s in scores.items():
                correct[lvl - 1] += np.sum(np.argmax(s, axis=1) == yb[:, lvl - 1])
        net.zero_grad()
        if X_val is not None and len(X_val):
            val_acc = level_accuracy(predict_scores(net, X_val, plan.resize, plan.crop), Y_val)
        else:
            val_acc = list(correct / max(seen, 1))
        monitor = val_acc[(level or L) - 1]
        lr_used = opt.lr
        opt.lr = sched.step(monitor)
        levels = [level] if level is not None else list(range(1, L + 1))
        log.append({
            "stage": plan.stage,
            "level": level,
            "epoch": epoch,
            "cls_loss": [float(cls_sum[i - 1] / seen) if i in levels else None for i in range(1, L + 1)],
            "reg_loss": [float(reg_sum[i - 1] / seen) if i in levels and i >= 2 and net.config.enable_sglr
                         else None for i in range(1, L + 1)],
            "total_loss": float(tot_sum / seen),
            "val_accuracy": [float(a) for a in val_acc],
            "lr": lr_used,
            "seed": plan.seed,
        })
        logger.info("stage %d level %s epoch %d loss %.4f val %s", plan.stage, level, epoch,
                    tot_sum / seen, ["%.3f" % a for a in val_acc])


def train_stage1(net: HSENetwork, X: np.ndarray, Y: np.ndarray, plan: StagePlan,
                 X_val: np.ndarray | None = None, Y_val: np.ndarray | None = None,
                 log: MetricsLog | None = None) -> MetricsLog:
    """Train the branches one level at a time, coarsest first, with the trunk frozen.

    Branches above the current level run in inference mode to supply the parent
    scores; only the current branch's parameters are updated.
    """
    if plan.stage != 1:
        raise ValueError("train_stage1 needs a stage-1 plan")
    _check_labels(net, Y)
    log = log if log is not None else MetricsLog()
    for level in range(1, net.config.level_count + 1):
        names = plan.trainable(net, level)

        def step(xb, yb, level=level):
            with T.no_grad():
                f_I = net.trunk_forward(xb)
                prev = net.forward(None, levels=level - 1, f_I=f_I) if level > 1 else []
            scores = prev + [net.level_forward(f_I, level, prev[-1] if prev else None)]
            loss, cls, reg = level_objective(net, scores, yb, level)
            return loss, {level: cls}, ({} if reg is None else {level: reg}), \
                {level: scores[-1].s_final.data}

        _fit_epochs(net, X, Y, plan, names, X_val, Y_val, log, level, step)
    return log


def train_stage2(net: HSENetwork, X: np.ndarray, Y: np.ndarray, plan: StagePlan,
                 X_val: np.ndarray | None = None, Y_val: np.ndarray | None = None,
                 log: MetricsLog | None = None) -> MetricsLog:
    """Fine-tune every parameter on the sum of all level objectives."""
    if plan.stage != 2:
        raise ValueError("train_stage2 needs a stage-2 plan")
    _check_labels(net, Y)
    log = log if log is not None else MetricsLog()
    names = plan.trainable(net)
    L = net.config.level_count

    def step(xb, yb):
        scores = net.forward(xb)
        total, cls, reg = None, {}, {}
        for level in range(1, L + 1):
            loss, c, r = level_objective(net, scores, yb, level)
            total = loss if total is None else total + loss
            cls[level] = c
            if r is not None:
                reg[level] = r
        return total, cls, reg, {lvl: s.s_final.data for lvl, s in enumerate(scores, 1)}

    _fit_epochs(net, X, Y, plan, names, X_val, Y_val, log, None, step)
    return log


def _check_labels(net: HSENetwork, Y: np.ndarray) -> None:
    Y = np.asarray(Y)
    if Y.ndim != 2 or Y.shape[1] != net.config.level_count:
        raise ValueError(f"labels must be [N, {net.config.level_count}] label paths, got {Y.shape}")
    if len(Y) and np.any(Y.max(axis=0) >= np.asarray(net.config.level_sizes)):
        raise ValueError("label index outside the taxonomy")


def plan_to_dict(plan: StagePlan) -> dict:
    return asdict(plan)
