"""The hierarchical network: shared trunk plus one branch per hierarchy level.

Level 1 is predicted from unguided features only. Each finer level ``i``
conditions a per-location attention map on the level ``i - 1`` score vector,
pools its guided feature maps with that attention, and averages three linear
classifiers (guided, unguided, concatenated). With ``enable_serl`` off every
level uses the unguided pathway and a single classifier.

Parameter names follow ``trunk.<block>.{weight|bias}`` and
``branch<i>.{phi|psi|varphi|attn1|attn2|cls_g|cls_u|cls_c}.{weight|bias}``.
"""
from __future__ import annotations

from collections import OrderedDict
from dataclasses import asdict, dataclass, field, fields
from typing import Mapping

import numpy as np

from . import tensor as T
from .taxonomy import Taxonomy
from .tensor import Tensor


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    level_sizes: tuple[int, ...]
    in_channels: int = 3
    trunk_widths: tuple[int, ...] = (16, 32, 64, 64)
    trunk_kernel: int = 3
    feature_dim: int = 64
    branch_kernel: int = 3
    semantic_dim: int = 32
    attention_hidden: int = 32
    enable_serl: bool = True
    enable_sglr: bool = True
    detach_guidance: bool = True
    temperature: float = 4.0
    gamma: float | None = None
    dtype: str = "float64"

    def __post_init__(self):
        self.level_sizes = tuple(int(n) for n in self.level_sizes)
        self.trunk_widths = tuple(int(w) for w in self.trunk_widths)
        dims = (self.in_channels, self.trunk_kernel, self.feature_dim, self.branch_kernel,
                self.semantic_dim, self.attention_hidden)
        if not self.level_sizes or any(n < 1 for n in self.level_sizes):
            raise ConfigError(f"level sizes must be positive, got {self.level_sizes}")
        if not self.trunk_widths or any(w < 1 for w in self.trunk_widths) or any(d < 1 for d in dims):
            raise ConfigError("all dimensions must be positive")
        if self.temperature <= 0:
            raise ConfigError("temperature must be positive")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")

    @property
    def level_count(self) -> int:
        return len(self.level_sizes)

    @property
    def trunk_channels(self) -> int:
        return self.trunk_widths[-1]

    @property
    def balance(self) -> float:
        return self.temperature ** 2 if self.gamma is None else float(self.gamma)

    def trunk_output_size(self, height: int, width: int | None = None) -> tuple[int, int]:
        """Spatial extent of the trunk feature maps for a given input size."""
        width = height if width is None else width
        for _ in self.trunk_widths:
            height, width = height // 2, width // 2
        return height, width

    def guided(self, level: int) -> bool:
        return self.enable_serl and level >= 2

    def to_dict(self) -> dict:
        d = asdict(self)
        d["level_sizes"] = list(self.level_sizes)
        d["trunk_widths"] = list(self.trunk_widths)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class AttentionField:
    raw: Tensor
    normalized: Tensor


@dataclass
class LevelScores:
    s_final: Tensor
    s_unguided: Tensor
    s_guided: Tensor | None = None
    s_concat: Tensor | None = None
    s_extended_from_parent: Tensor | None = None
    attention: AttentionField | None = field(default=None, repr=False)

    @property
    def classifier_outputs(self) -> list[Tensor]:
        outs = [self.s_guided, self.s_unguided, self.s_concat]
        return [s for s in outs if s is not None]


def _xavier(rng, shape, fan_in, fan_out):
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


def _fan_in_uniform(rng, shape, fan_in):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class HSENetwork:
    """Parameters and forward computation of the hierarchical network."""

    def __init__(self, config: ModelConfig, taxonomy: Taxonomy | None = None, seed: int = 0):
        if taxonomy is not None and taxonomy.level_sizes != config.level_sizes:
            raise ConfigError(
                f"config level sizes {config.level_sizes} do not match taxonomy {taxonomy.level_sizes}")
        self.config = config
        self.taxonomy = taxonomy
        self.seed = seed
        self.params: OrderedDict[str, Tensor] = OrderedDict()
        self._init_params(np.random.default_rng(seed))

    # -- parameters -----------------------------------------------------------

    def _add(self, name: str, value: np.ndarray) -> None:
        self.params[name] = Tensor(np.asarray(value, dtype=self.config.dtype),
                                   requires_grad=True, name=name)

    def _add_conv(self, prefix, c_out, c_in, k, rng, trunk):
        shape = (c_out, c_in, k, k)
        w = _fan_in_uniform(rng, shape, c_in * k * k) if trunk else \
            _xavier(rng, shape, c_in * k * k, c_out * k * k)
        self._add(f"{prefix}.weight", w)
        self._add(f"{prefix}.bias", np.zeros(c_out))

    def _add_linear(self, prefix, d_out, d_in, rng):
        self._add(f"{prefix}.weight", _xavier(rng, (d_out, d_in), d_in, d_out))
        self._add(f"{prefix}.bias", np.zeros(d_out))

    def _init_params(self, rng) -> None:
        cfg = self.config
        c_in = cfg.in_channels
        for b, width in enumerate(cfg.trunk_widths):
            self._add_conv(f"trunk.{b}", width, c_in, cfg.trunk_kernel, rng, trunk=True)
            c_in = width
        C, k = cfg.feature_dim, cfg.branch_kernel
        for i, n_i in enumerate(cfg.level_sizes, 1):
            p = f"branch{i}"
            if cfg.guided(i):
                self._add_conv(f"{p}.phi", C, cfg.trunk_channels, k, rng, trunk=False)
            self._add_conv(f"{p}.psi", C, cfg.trunk_channels, k, rng, trunk=False)
            if cfg.guided(i):
                self._add_linear(f"{p}.varphi", cfg.semantic_dim, cfg.level_sizes[i - 2], rng)
                self._add_linear(f"{p}.attn1", cfg.attention_hidden, C + cfg.semantic_dim, rng)
                self._add_linear(f"{p}.attn2", C, cfg.attention_hidden, rng)
                self._add_linear(f"{p}.cls_g", n_i, C, rng)
            self._add_linear(f"{p}.cls_u", n_i, C, rng)
            if cfg.guided(i):
                self._add_linear(f"{p}.cls_c", n_i, 2 * C, rng)

    def trunk_params(self) -> list[str]:
        return [n for n in self.params if n.startswith("trunk.")]

    def branch_params(self, level: int) -> list[str]:
        return [n for n in self.params if n.startswith(f"branch{level}.")]

    def state_dict(self) -> OrderedDict[str, np.ndarray]:
        return OrderedDict((n, p.data.copy()) for n, p in self.params.items())

    def load_state_dict(self, state: Mapping[str, np.ndarray]) -> None:
        missing = set(self.params) - set(state)
        extra = set(state) - set(self.params)
        if missing or extra:
            raise ConfigError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for name, p in self.params.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape or arr.dtype != p.dtype:
                raise ConfigError(f"{name}: expected {p.shape}/{p.dtype}, got {arr.shape}/{arr.dtype}")
            p.data = arr.copy()
            p.grad = None

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def _p(self, name: str) -> Tensor:
        return self.params[name]

    # -- building blocks --------------------------------------------------------

    def trunk_forward(self, images: Tensor) -> Tensor:
        """Shared feature maps f_I of shape [N, C', H', W']."""
        cfg = self.config
        if images.ndim != 4 or images.shape[1] != cfg.in_channels:
            raise ConfigError(f"expected images [N, {cfg.in_channels}, H, W], got {images.shape}")
        x = images
        pad = cfg.trunk_kernel // 2
        for b in range(len(cfg.trunk_widths)):
            x = T.conv2d(x, self._p(f"trunk.{b}.weight"), self._p(f"trunk.{b}.bias"), pad=pad)
            x = T.avg_pool2d(T.relu(x), 2)
        return x

    def _branch_conv(self, f_I: Tensor, level: int, which: str) -> Tensor:
        p = f"branch{level}.{which}"
        x = T.conv2d(f_I, self._p(f"{p}.weight"), self._p(f"{p}.bias"), pad=self.config.branch_kernel // 2)
        return T.relu(x)

    def branch_phi(self, f_I: Tensor, level: int) -> Tensor:
        return self._branch_conv(f_I, level, "phi")

    def branch_psi_pool(self, f_I: Tensor, level: int) -> Tensor:
        return T.global_avg_pool(self._branch_conv(f_I, level, "psi"))

    def semantic_map(self, s_prev: Tensor, level: int) -> Tensor:
        p = f"branch{level}.varphi"
        return T.linear(s_prev, self._p(f"{p}.weight"), self._p(f"{p}.bias"))

    def attention_scores(self, guided_map: Tensor, semantic: Tensor, level: int) -> Tensor:
        """Raw per-location, per-channel attention from one shared two-layer map."""
        n, c, h, w = guided_map.shape
        loc = T.reshape(T.transpose(guided_map, (0, 2, 3, 1)), (n * h * w, c))
        sem = T.reshape(T.broadcast_to(T.reshape(semantic, (n, 1, semantic.shape[1])),
                                       (n, h * w, semantic.shape[1])), (n * h * w, semantic.shape[1]))
        p = f"branch{level}"
        hidden = T.tanh(T.linear(T.concat([loc, sem], axis=1),
                                 self._p(f"{p}.attn1.weight"), self._p(f"{p}.attn1.bias")))
        raw = T.linear(hidden, self._p(f"{p}.attn2.weight"), self._p(f"{p}.attn2.bias"))
        return T.transpose(T.reshape(raw, (n, h, w, c)), (0, 3, 1, 2))

    @staticmethod
    def normalize_attention(raw: Tensor) -> Tensor:
        return normalize_attention(raw)

    @staticmethod
    def attend_aggregate(guided_map: Tensor, weights: Tensor) -> Tensor:
        return attend_aggregate(guided_map, weights)

    def classify_fuse(self, f_guided: Tensor | None, f_unguided: Tensor, level: int) -> LevelScores:
        p = f"branch{level}"
        s_u = T.linear(f_unguided, self._p(f"{p}.cls_u.weight"), self._p(f"{p}.cls_u.bias"))
        if f_guided is None:
            return LevelScores(s_final=s_u, s_unguided=s_u)
        s_g = T.linear(f_guided, self._p(f"{p}.cls_g.weight"), self._p(f"{p}.cls_g.bias"))
        s_c = T.linear(T.concat([f_guided, f_unguided], axis=1),
                       self._p(f"{p}.cls_c.weight"), self._p(f"{p}.cls_c.bias"))
        return LevelScores(s_final=fuse_scores(s_g, s_u, s_c), s_unguided=s_u, s_guided=s_g, s_concat=s_c)

    # -- full forward -------------------------------------------------------------

    def _guidance(self, s_prev: Tensor) -> Tensor:
        return s_prev.detach() if self.config.detach_guidance else s_prev

    def level_forward(self, f_I: Tensor, level: int, prev: LevelScores | None) -> LevelScores:
        """Scores of one level given the trunk features and the parent level's scores."""
        cfg = self.config
        f_u = self.branch_psi_pool(f_I, level)
        attention = None
        f_g = None
        if cfg.guided(level):
            if prev is None:
                raise ConfigError(f"level {level} needs the scores of level {level - 1}")
            guided_map = self.branch_phi(f_I, level)
            semantic = self.semantic_map(self._guidance(prev.s_final), level)
            raw = self.attention_scores(guided_map, semantic, level)
            e = normalize_attention(raw)
            f_g = attend_aggregate(guided_map, e)
            attention = AttentionField(raw, e)
        scores = self.classify_fuse(f_g, f_u, level)
        scores.attention = attention
        if level >= 2 and prev is not None and self.taxonomy is not None:
            scores.s_extended_from_parent = T.index_select(
                self._guidance(prev.s_final), self.taxonomy.parent_map(level), axis=1)
        return scores

    def forward(self, images, levels: int | None = None, f_I: Tensor | None = None) -> list[LevelScores]:
        """Per-level scores for levels 1..``levels`` (default: all), coarsest first."""
        if f_I is None:
            images = images if isinstance(images, Tensor) else Tensor(images, dtype=self.config.dtype)
            f_I = self.trunk_forward(images)
        h, w = f_I.shape[2:]
        if self.config.enable_serl and self.config.level_count > 1 and h * w < 2:
            raise ConfigError(f"trunk output {h}x{w} too small for spatial attention")
        out: list[LevelScores] = []
        for level in range(1, (levels or self.config.level_count) + 1):
            out.append(self.level_forward(f_I, level, out[-1] if out else None))
        return out

    __call__ = forward


def normalize_attention(raw: Tensor) -> Tensor:
    """Softmax over all spatial locations, separately for every (sample, channel)."""
    n, c, h, w = raw.shape
    return T.reshape(T.softmax(T.reshape(raw, (n, c, h * w)), axis=-1), (n, c, h, w))


def attend_aggregate(guided_map: Tensor, weights: Tensor) -> Tensor:
    """Attention-weighted sum over locations: [N, C, H, W] x [N, C, H, W] -> [N, C]."""
    if guided_map.shape != weights.shape:
        raise ValueError(f"shape mismatch: features {guided_map.shape} vs attention {weights.shape}")
    return T.sum(T.mul(weights, guided_map), axis=(2, 3))


def fuse_scores(*outputs: Tensor) -> Tensor:
    total = outputs[0]
    for s in outputs[1:]:
        total = T.add(total, s)
    return T.div(total, float(len(outputs)))


def hse_forward(images, model: HSENetwork, taxonomy: Taxonomy) -> list[LevelScores]:
    if taxonomy.level_sizes != model.config.level_sizes:
        raise ConfigError(
            f"model level sizes {model.config.level_sizes} do not match taxonomy {taxonomy.level_sizes}")
    if model.taxonomy is None:
        model.taxonomy = taxonomy
    return model.forward(images)
