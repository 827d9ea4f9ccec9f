"""Embedding networks, angular-margin classification and the passport decoder.

The backbone follows the 20-layer residual design: four stages, each a
stride-2 3x3 convolution followed by residual blocks of two 3x3
convolutions, PReLU everywhere, no normalisation layers.  Global average
pooling and a linear layer produce the embedding.
"""

from __future__ import annotations

import enum
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .nn import BatchNorm, Conv2d, Linear, Module, PReLU
from .tensor import Tensor


@dataclass(frozen=True)
class ModelConfig:
    input_channels: int = 6
    stage_filters: tuple[int, ...] = (8, 16, 32, 64)
    blocks_per_stage: tuple[int, ...] = (1, 2, 4, 1)
    embed_dim: int = 64
    input_size: int = 32
    pool: str = "avg"      # "avg" (global average pooling) or "flatten" the final map
    norm: str = "none"     # "none" (PReLU-only blocks) or "batch" normalisation after each conv

    def __post_init__(self):
        if self.norm not in ("batch", "none"):
            raise ConfigError(f"norm must be batch or none, got {self.norm!r}")
        if self.pool not in ("flatten", "avg"):
            raise ConfigError(f"pool must be flatten or avg, got {self.pool!r}")
        if self.input_channels not in (1, 2, 6):
            raise ConfigError(f"input_channels must be 1, 2 or 6, got {self.input_channels}")
        if self.embed_dim <= 0 or len(self.stage_filters) != len(self.blocks_per_stage):
            raise ConfigError("invalid model configuration")
        if self.input_size % (2 ** len(self.stage_filters)):
            raise ConfigError("input_size must be divisible by 2**stages")
        object.__setattr__(self, "stage_filters", tuple(self.stage_filters))
        object.__setattr__(self, "blocks_per_stage", tuple(self.blocks_per_stage))

    @classmethod
    def paper(cls, input_channels: int = 6) -> "ModelConfig":
        return cls(input_channels, (64, 128, 256, 512), (1, 2, 4, 1), 512, 128)

    @property
    def feature_size(self) -> int:
        return self.input_size // 2 ** len(self.stage_filters)

    def to_json(self) -> dict:
        return asdict(self)


class Margin(str, enum.Enum):
    COSFACE = "cosface"
    ARCFACE = "arcface"


@dataclass(frozen=True)
class MarginConfig:
    variant: Margin = Margin.COSFACE
    scale: float = 16.0
    margin: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "variant", Margin(self.variant))
        if self.margin is None:
            object.__setattr__(self, "margin", 0.35 if self.variant is Margin.COSFACE else 0.5)
        if self.scale <= 1 or self.margin < 0:
            raise ConfigError("scale must exceed 1 and margin be non-negative")


@dataclass(frozen=True)
class AuxConfig:
    alpha: float = 50.0
    beta: float = 1.0

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ConfigError("alpha and beta must be non-negative")

    @property
    def enabled(self) -> bool:
        return self.beta > 0


def _norm(ch: int, kind: str):
    return BatchNorm(ch) if kind == "batch" else None


def _apply(layer, x):
    return x if layer is None else layer(x)


class ResBlock(Module):
    def __init__(self, rng, ch: int, norm: str = "none"):
        self.conv1 = Conv2d(rng, ch, ch)
        self.bn1 = _norm(ch, norm)
        self.act1 = PReLU(ch)
        # zero-initialised branch: every block starts as the identity, which keeps
        # activations bounded in a network without normalisation layers
        self.conv2 = Conv2d(rng, ch, ch, gain=0.0)
        self.bn2 = _norm(ch, norm)
        self.act2 = PReLU(ch)

    def __call__(self, x: Tensor) -> Tensor:
        h = self.act1(_apply(self.bn1, self.conv1(x)))
        return T.add(x, self.act2(_apply(self.bn2, self.conv2(h))))


class Stage(Module):
    def __init__(self, rng, cin: int, cout: int, blocks: int, norm: str = "none"):
        self.down = Conv2d(rng, cin, cout, stride=2)
        self.bn = _norm(cout, norm)
        self.act = PReLU(cout)
        self.blocks = [ResBlock(rng, cout, norm) for _ in range(blocks)]

    def __call__(self, x: Tensor) -> Tensor:
        x = self.act(_apply(self.bn, self.down(x)))
        for b in self.blocks:
            x = b(x)
        return x


class EmbeddingNet(Module):
    """Residual backbone mapping an N x C x S x S input to N x embed_dim."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator | int = 0):
        rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
        self.cfg = cfg
        chans = (cfg.input_channels,) + cfg.stage_filters
        self.stages = [Stage(rng, chans[i], chans[i + 1], n, cfg.norm) for i, n in enumerate(cfg.blocks_per_stage)]
        flat = cfg.stage_filters[-1] * (cfg.feature_size ** 2 if cfg.pool == "flatten" else 1)
        self.head = Linear(rng, flat, cfg.embed_dim)
        self.head_bn = _norm(cfg.embed_dim, cfg.norm)
        self.trained = False

    def _check(self, x: Tensor) -> None:
        c, s = self.cfg.input_channels, self.cfg.input_size
        if x.data.ndim != 4 or x.shape[1:] != (c, s, s):
            raise ShapeError(f"model expects N x {c} x {s} x {s} input, got {x.shape}")

    def deep_features(self, x) -> Tensor:
        """Output of the last residual stage, before pooling."""
        x = T.as_tensor(x)
        self._check(x)
        for st in self.stages:
            x = st(x)
        return x

    def embed_features(self, feats: Tensor) -> Tensor:
        if self.cfg.pool == "avg":
            flat = T.global_avg_pool(feats)
        else:
            flat = T.reshape(feats, (feats.shape[0], -1))
        return _apply(self.head_bn, self.head(flat))

    def __call__(self, x) -> Tensor:
        return self.embed_features(self.deep_features(x))

    embed = __call__


class ClassHead(Module):
    """Per-class direction vectors (C x D); only their directions matter."""

    def __init__(self, rng, n_classes: int, dim: int):
        rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
        self.weight = Tensor(rng.normal(0, 1, (n_classes, dim)), requires_grad=True)

    @property
    def n_classes(self) -> int:
        return self.weight.shape[0]


def angular_logits(e: Tensor, class_weights: Tensor, mc: MarginConfig, labels=None) -> Tensor:
    """Scaled cosine logits with the margin applied to the target class.

    CosFace: s * (cos(theta_y) - m); ArcFace: s * cos(theta_y + m) with
    theta_y + m capped at pi.  Without labels (inference) every class gets
    s * cos(theta).
    """
    e, class_weights = T.as_tensor(e), T.as_tensor(class_weights)
    if e.data.ndim != 2 or class_weights.data.ndim != 2 or e.shape[1] != class_weights.shape[1]:
        raise ShapeError(f"embedding {e.shape} and class weights {class_weights.shape} disagree")
    cos = T.linear(T.l2_normalize(e, 1), T.transpose(T.l2_normalize(class_weights, 1)))
    if labels is None or mc.margin == 0:
        return T.mul(cos, mc.scale)
    labels = np.asarray(labels, dtype=np.int64)
    n, c = cos.shape
    if labels.shape != (n,) or labels.min() < 0 or labels.max() >= c:
        raise ShapeError(f"labels out of range for {c} classes")
    onehot = np.zeros((n, c), dtype=cos.data.dtype)
    onehot[np.arange(n), labels] = 1
    m = float(mc.margin)
    if mc.variant is Margin.COSFACE:
        adjusted = T.sub(cos, T.Tensor(onehot * m))
    else:
        cc = T.clip(cos, -1 + 1e-7, 1 - 1e-7)
        sin = T.sqrt(T.sub(1.0, T.square(cc)))
        target = T.sub(T.mul(cc, math.cos(m)), T.mul(sin, math.sin(m)))
        past_pi = cc.data < math.cos(math.pi - m)
        target = T.where(past_pi, T.Tensor(np.full(cos.shape, -1.0)), target)
        adjusted = T.add(cos, T.mul(T.Tensor(onehot), T.sub(target, cos)))
    return T.mul(adjusted, mc.scale)


def class_loss(logits: Tensor, labels) -> Tensor:
    return T.cross_entropy(logits, labels)


def similarity(e1, e2) -> float:
    """Cosine of the angle between two embeddings."""
    a = np.asarray(getattr(e1, "data", e1), dtype=np.float64).ravel()
    b = np.asarray(getattr(e2, "data", e2), dtype=np.float64).ravel()
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ValueError("similarity of a zero embedding is undefined")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def similarity_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na = np.linalg.norm(a, axis=1, keepdims=True)
    nb = np.linalg.norm(b, axis=1, keepdims=True)
    if np.any(na == 0) or np.any(nb == 0):
        raise ValueError("zero embedding in similarity matrix")
    return np.clip((a / na) @ (b / nb).T, -1.0, 1.0)


FUSIONS = ("mean", "concat", "left", "right")


def fuse_mono(e_left, e_right, how: str = "mean") -> np.ndarray:
    e_left, e_right = np.asarray(e_left, dtype=np.float64), np.asarray(e_right, dtype=np.float64)
    if e_left.shape != e_right.shape:
        raise ShapeError("left and right embeddings differ in shape")
    if how == "mean":
        return (e_left + e_right) / 2
    if how == "concat":
        return np.concatenate([e_left, e_right], axis=-1)
    if how == "left":
        return e_left
    if how == "right":
        return e_right
    raise ConfigError(f"unknown fusion {how!r}; choose from {FUSIONS}")


class AuxDecoder(Module):
    """Mirror of the backbone: residual block then 2x upscale per stage, ending in one channel."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator | int = 0):
        rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
        self.cfg = cfg
        filters = cfg.stage_filters[::-1]
        outs = filters[1:] + (filters[-1],)
        self.blocks = [ResBlock(rng, f, cfg.norm) for f in filters]
        self.convs = [Conv2d(rng, f, o) for f, o in zip(filters, outs)]
        self.bns = [_norm(o, cfg.norm) for o in outs]
        self.acts = [PReLU(o) for o in outs]
        # small output gain: the estimate starts near mid-gray, clear of tanh saturation
        self.out = Conv2d(rng, outs[-1], 1, gain=0.1)

    @property
    def passport_size(self) -> int:
        return self.cfg.feature_size * 2 ** len(self.cfg.stage_filters)

    def __call__(self, feats: Tensor) -> Tensor:
        c, s = self.cfg.stage_filters[-1], self.cfg.feature_size
        if feats.data.ndim != 4 or feats.shape[1:] != (c, s, s):
            raise ShapeError(f"decoder expects N x {c} x {s} x {s} features, got {feats.shape}")
        x = feats
        for blk, conv, bn, act in zip(self.blocks, self.convs, self.bns, self.acts):
            x = act(_apply(bn, conv(T.upsample2x(blk(x)))))
        return T.mul(T.tanh(self.out(x)), 0.5)


aux_decode = AuxDecoder.__call__


def aux_loss(estimate: Tensor, passport, mono: EmbeddingNet | None, alpha: float):
    """Mean absolute error to the passport plus ``alpha`` times the mean
    squared error between the unit-normalised frozen mono embeddings of
    estimate and passport.  Both norms are averaged over their elements, so
    the embedding term is the squared distance divided by the embedding size.

    Returns ``(loss, l1_term, embedding_term)``; the last is 0.0 when alpha is 0.
    """
    passport = T.as_tensor(passport)
    if estimate.shape != passport.shape:
        raise ShapeError(f"estimate {estimate.shape} vs passport {passport.shape}")
    l1 = T.mean(T.absolute(T.sub(estimate, passport)))
    if alpha == 0:
        return l1, l1, 0.0
    if mono is None or not mono.trained:
        raise ConfigError("the embedding term needs a trained mono model")
    if any(t.requires_grad for t in mono.parameters()):
        raise ConfigError("the mono reference model must be frozen")
    # compared on the unit sphere, the space similarity() scores in
    with T.no_grad():
        target = T.l2_normalize(mono.embed(passport), 1)
    diff = T.sub(T.l2_normalize(mono.embed(estimate), 1), target)
    emb = T.mean(T.square(diff))
    return T.add(l1, T.mul(emb, alpha)), l1, emb


def total_loss(l_ang: Tensor, l_aux: Tensor | None, beta: float) -> Tensor:
    """L = L_ang + beta * L_aux; beta == 0 returns ``l_ang`` itself."""
    if beta == 0 or l_aux is None:
        return l_ang
    return T.add(l_ang, T.mul(l_aux, beta))


@dataclass
class RecogModel:
    """Everything trained together in one run."""

    net: EmbeddingNet
    head: ClassHead
    decoder: AuxDecoder | None = None
    meta: dict = field(default_factory=dict)

    def trainable(self):
        yield from self.net.decay_flags("net.")
        yield from self.head.decay_flags("head.")
        if self.decoder is not None:
            yield from self.decoder.decay_flags("decoder.")

    def state(self) -> dict[str, np.ndarray]:
        out = {f"net.{k}": v for k, v in self.net.state_dict().items()}
        out.update({f"head.{k}": v for k, v in self.head.state_dict().items()})
        if self.decoder is not None:
            out.update({f"decoder.{k}": v for k, v in self.decoder.state_dict().items()})
        return out
