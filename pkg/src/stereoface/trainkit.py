"""Two-stage training: mono pretraining, then stereo with optional passport decoder."""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import tensor as T
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import ConfigError, DataError, NumericError
from .facegen.dataset import Dataset, stream
from .optim import OptimState, clip_grad_norm, lr_at_epoch, sgd_step
from .pipeline import DEPTH_OFFSET, DEPTH_SCALE, CropSpec, InputMode, passport_target, prepare_mono, prepare_stereo
from .recognet import (AuxConfig, AuxDecoder, ClassHead, EmbeddingNet, MarginConfig, ModelConfig, RecogModel,
                       angular_logits, aux_loss, class_loss, fuse_mono, total_loss)

log = logging.getLogger(__name__)

_TAG_ORDER, _TAG_AUG, _TAG_INIT = 10, 11, 12


@dataclass
class TrainConfig:
    mode: InputMode = InputMode.STEREO
    epochs: int = 30
    batch: int | None = None          # default: 64 mono, 32 otherwise
    base_lr: float = 0.01
    drop_every: int = 20
    factor: float = 0.1
    weight_decay: float = 0.0005
    momentum: float = 0.9
    seed: int = 0
    margin: MarginConfig = field(default_factory=MarginConfig)
    aux: AuxConfig | None = None
    stage_filters: tuple[int, ...] = (8, 16, 32, 64)
    blocks_per_stage: tuple[int, ...] = (1, 2, 4, 1)
    embed_dim: int = 64
    norm: str = "none"
    pool: str = "avg"
    crop: CropSpec = field(default_factory=CropSpec)
    clip_norm: float | None = 10.0    # global gradient-norm ceiling; None disables
    max_steps: int | None = None      # stop early after this many optimizer steps (tests)

    def __post_init__(self):
        self.mode = InputMode(self.mode)
        if self.epochs < 1 or self.base_lr <= 0 or self.drop_every < 1:
            raise ConfigError("epochs, base_lr and drop_every must be positive")
        if self.clip_norm is not None and not self.clip_norm > 0:
            raise ConfigError("clip_norm must be positive or None")

    @classmethod
    def paper(cls, mode=InputMode.STEREO, **kw) -> "TrainConfig":
        base = dict(epochs=100, drop_every=20, stage_filters=(64, 128, 256, 512), embed_dim=512,
                    crop=CropSpec.paper(), margin=MarginConfig(scale=30.0))
        base.update(kw)
        return cls(mode=mode, **base)

    @property
    def batch_size(self) -> int:
        if self.batch is not None:
            return self.batch
        return 64 if self.mode is InputMode.MONO else 32

    def model_config(self) -> ModelConfig:
        return ModelConfig(self.mode.channels, self.stage_filters, self.blocks_per_stage, self.embed_dim,
                           self.crop.train_crop, pool=self.pool, norm=self.norm)

    def to_json(self) -> dict:
        d = asdict(self)
        d["mode"] = self.mode.value
        d["margin"] = {"variant": self.margin.variant.value, "scale": self.margin.scale,
                       "margin": self.margin.margin}
        d["batch"] = self.batch_size
        return d


@dataclass
class EpochRecord:
    epoch: int
    l_ang: float
    l_aux: float
    lr: float
    wall: float


@dataclass
class RunRecord:
    epochs: list[EpochRecord] = field(default_factory=list)
    checkpoint: str | None = None
    samples_per_epoch: int = 0
    steps: int = 0
    clipped: int = 0                  # optimizer steps whose gradient norm hit the ceiling

    def losses(self) -> list[float]:
        return [e.l_ang + e.l_aux for e in self.epochs]

    def write(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "run.json").write_text(json.dumps(
            {"checkpoint": self.checkpoint, "samples_per_epoch": self.samples_per_epoch, "steps": self.steps,
             "clipped": self.clipped,
             "epochs": [asdict(e) for e in self.epochs]}, indent=1) + "\n")
        with open(out / "loss.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "l_ang", "l_aux", "lr"])
            for e in self.epochs:
                w.writerow([e.epoch, repr(e.l_ang), repr(e.l_aux), repr(e.lr)])


# ---------------------------------------------------------------- data


class TrainData:
    """Train-split samples with contiguous class labels."""

    def __init__(self, dataset: Dataset, split: str = "train"):
        self.ds = dataset
        self.entries = dataset.samples(split, attack=False)
        if not self.entries:
            raise DataError(f"dataset has no {split} samples")
        subjects = sorted({e["subject"] for e in self.entries})
        self.label_of = {s: i for i, s in enumerate(subjects)}
        self.subjects = subjects
        self.n_classes = len(subjects)

    def stereo_batch(self, idx, mode: InputMode, spec: CropSpec, seed: int, epoch: int, train: bool = True):
        xs, ys = [], []
        for i in idx:
            e = self.entries[i]
            rng = stream(seed, _TAG_AUG, epoch, i) if train else None
            depth = self.ds.depth(e["depth_left"]) if mode is InputMode.DEPTH_TEXTURE else None
            prep = prepare_stereo(self.ds.image(e["left"]), self.ds.image(e["right"]), e["landmarks_left"],
                                  e["landmarks_right"], spec, rng, train, depth=depth)
            xs.append(prep.net_input(mode))
            ys.append(self.label_of[e["subject"]])
        return np.stack(xs), np.asarray(ys)

    def mono_batch(self, items, spec: CropSpec, seed: int, epoch: int, train: bool = True):
        xs, ys = [], []
        for item in items:
            i, view = divmod(int(item), 2)
            e = self.entries[i]
            rng = stream(seed, _TAG_AUG, epoch, i, view) if train else None
            key = "left" if view == 0 else "right"
            xs.append(prepare_mono(self.ds.image(e[key]), e[f"landmarks_{key}"], spec, rng, train))
            ys.append(self.label_of[e["subject"]])
        return np.stack(xs), np.asarray(ys)

    def passports(self, spec: CropSpec) -> dict[int, np.ndarray]:
        out = {}
        for s in self.subjects:
            subj = self.ds.subject(s)
            out[s] = passport_target(self.ds.image(subj["passport"]), subj["passport_landmarks"], spec)[None]
        return out


# ---------------------------------------------------------------- model i/o


def build_model(cfg: TrainConfig, n_classes: int, with_decoder: bool) -> RecogModel:
    mcfg = cfg.model_config()
    net = EmbeddingNet(mcfg, stream(cfg.seed, _TAG_INIT, 0))
    head = ClassHead(stream(cfg.seed, _TAG_INIT, 1), n_classes, mcfg.embed_dim)
    decoder = AuxDecoder(mcfg, stream(cfg.seed, _TAG_INIT, 2)) if with_decoder else None
    return RecogModel(net, head, decoder)


def checkpoint_meta(cfg: TrainConfig, model: RecogModel, extra: dict | None = None) -> dict:
    meta = {
        "kind": "recog", "mode": cfg.mode.value, "model": model.net.cfg.to_json(),
        "n_classes": model.head.n_classes, "train": cfg.to_json(),
        "crop": asdict(cfg.crop), "depth_norm": {"offset": DEPTH_OFFSET, "scale": DEPTH_SCALE},
    }
    meta.update(extra or {})
    return meta


def save_model(path, model: RecogModel, meta: dict) -> Path:
    return save_checkpoint(path, model.state(), meta)


def load_model(path) -> tuple[RecogModel, dict]:
    tensors, meta = load_checkpoint(path)
    if meta.get("kind") != "recog":
        raise DataError(f"{path}: not a recognition checkpoint")
    mcfg = ModelConfig(**meta["model"])
    net = EmbeddingNet(mcfg, 0)
    net.load_state_dict({k[4:]: v for k, v in tensors.items() if k.startswith("net.")})
    net.trained = True
    net.eval()
    head = None
    if any(k.startswith("head.") for k in tensors):
        n_out, dim = tensors["head.weight"].shape
        head = ClassHead(0, n_out, dim)
        head.load_state_dict({k[5:]: v for k, v in tensors.items() if k.startswith("head.")})
    decoder = None
    if any(k.startswith("decoder.") for k in tensors):
        decoder = AuxDecoder(mcfg, 0)
        decoder.load_state_dict({k[8:]: v for k, v in tensors.items() if k.startswith("decoder.")})
        decoder.eval()
    return RecogModel(net, head, decoder, meta), meta


def load_mono_reference(path) -> EmbeddingNet:
    model, meta = load_model(path)
    if meta.get("mode") != InputMode.MONO.value:
        raise ConfigError(f"{path} is a {meta.get('mode')} checkpoint, the embedding term needs a mono model")
    model.net.freeze()
    return model.net


# ---------------------------------------------------------------- training


def _classify(model: RecogModel, x, y, cfg: TrainConfig):
    feats = model.net.deep_features(x)
    emb = model.net.embed_features(feats)
    l_ang = class_loss(angular_logits(emb, model.head.weight, cfg.margin, y), y)
    return feats, l_ang


def train(cfg: TrainConfig, dataset: Dataset, out_dir=None, mono_checkpoint=None,
          mono_model: EmbeddingNet | None = None) -> tuple[RecogModel, RunRecord]:
    """Train one model; writes ``model.ckpt``, ``run.json`` and ``loss.csv`` when ``out_dir`` is set.

    Runs are deterministic given ``cfg.seed``: iteration order and every
    augmentation draw come from seeded per-sample streams.
    """
    data = TrainData(dataset)
    aux = cfg.aux
    if aux is not None and cfg.mode is InputMode.MONO:
        raise ConfigError("the passport decoder applies to stereo-family models only")
    if aux is not None and aux.alpha > 0 and aux.beta > 0 and mono_model is None:
        if mono_checkpoint is None:
            raise ConfigError("alpha > 0 needs a stage-1 mono checkpoint")
        mono_model = load_mono_reference(mono_checkpoint)
    model = build_model(cfg, data.n_classes, with_decoder=aux is not None)
    model.net.train()
    if model.decoder is not None:
        model.decoder.train()
    passports = data.passports(cfg.crop) if aux is not None else None

    params = [p for p in model.trainable() if not (p[0].startswith("decoder.") and not aux.enabled)]
    state = OptimState(lr=cfg.base_lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    rec = RunRecord()
    mono = cfg.mode is InputMode.MONO
    n_items = 2 * len(data.entries) if mono else len(data.entries)
    rec.samples_per_epoch = n_items
    bs = cfg.batch_size
    steps = clipped = 0
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        state.lr = lr_at_epoch(epoch, cfg.base_lr, cfg.drop_every, cfg.factor)
        order = stream(cfg.seed, _TAG_ORDER, epoch).permutation(n_items)
        sums, nb = np.zeros(2, dtype=np.float64), 0
        for start in range(0, n_items, bs):
            idx = order[start:start + bs]
            if mono:
                x, y = data.mono_batch(idx, cfg.crop, cfg.seed, epoch)
            else:
                x, y = data.stereo_batch(idx, cfg.mode, cfg.crop, cfg.seed, epoch)
            feats, l_ang = _classify(model, x, y, cfg)
            l_aux = None
            if aux is not None:
                targets = np.stack([passports[data.subjects[k]] for k in y])
                est = model.decoder(feats)
                l_aux, _, _ = aux_loss(est, targets, mono_model, aux.alpha if aux.beta > 0 else 0.0)
            loss = total_loss(l_ang, l_aux, aux.beta if aux is not None else 0.0)
            if not math.isfinite(loss.item()):
                raise NumericError(f"non-finite loss at epoch {epoch}, step {steps} "
                                   f"(l_ang={l_ang.item()}, l_aux={None if l_aux is None else l_aux.item()})")
            loss.backward()
            if cfg.clip_norm is not None:
                gnorm = clip_grad_norm(params, cfg.clip_norm)
                clipped += gnorm > cfg.clip_norm
            sgd_step(params, state)
            model.net.zero_grad()
            if model.decoder is not None:
                model.decoder.zero_grad()
            sums += (l_ang.item(), 0.0 if l_aux is None else l_aux.item())
            nb += 1
            steps += 1
            if cfg.max_steps is not None and steps >= cfg.max_steps:
                break
        rec.epochs.append(EpochRecord(epoch, float(sums[0] / nb), float(sums[1] / nb), state.lr,
                                      time.perf_counter() - t0))
        log.info("epoch %d lr %.4g l_ang %.4f l_aux %.4f (%.1fs)", epoch, state.lr, rec.epochs[-1].l_ang,
                 rec.epochs[-1].l_aux, rec.epochs[-1].wall)
        if cfg.max_steps is not None and steps >= cfg.max_steps:
            break
    rec.steps = steps
    rec.clipped = int(clipped)
    model.net.trained = True
    model.net.eval()
    if model.decoder is not None:
        model.decoder.eval()
    if aux is not None and not aux.enabled:
        model.decoder = None  # never updated; the beta = 0 run is the core method
    model.meta = checkpoint_meta(cfg, model, {"aux": None if aux is None else asdict(aux)})
    if out_dir is not None:
        out = Path(out_dir)
        rec.checkpoint = str(save_model(out / "model.ckpt", model, model.meta))
        rec.write(out)
    return model, rec


def pretrain_mono(cfg: TrainConfig, dataset: Dataset, out_dir=None) -> tuple[RecogModel, RunRecord]:
    """Stage 1: every left and right image is an independent single-channel sample."""
    cfg = replace(cfg, mode=InputMode.MONO, aux=None)
    return train(cfg, dataset, out_dir)


# ---------------------------------------------------------------- inference


def embed_entries(net: EmbeddingNet, mode: InputMode | str, dataset: Dataset, entries: list[dict],
                  spec: CropSpec, fusion: str = "mean", batch: int = 128) -> np.ndarray:
    """Test-time embeddings (centre crop, no noise); mono fuses left/right views."""
    mode = InputMode(mode)
    views = []
    was_training = net.training
    net.eval()
    with T.no_grad():
        for start in range(0, len(entries), batch):
            chunk = entries[start:start + batch]
            if mode is InputMode.MONO:
                xl = np.stack([prepare_mono(dataset.image(e["left"]), e["landmarks_left"], spec) for e in chunk])
                xr = np.stack([prepare_mono(dataset.image(e["right"]), e["landmarks_right"], spec) for e in chunk])
                el, er = net(xl).data, net(xr).data
                views.append(fuse_mono(el, er, fusion))
            else:
                xs = []
                for e in chunk:
                    depth = dataset.depth(e["depth_left"]) if mode is InputMode.DEPTH_TEXTURE else None
                    prep = prepare_stereo(dataset.image(e["left"]), dataset.image(e["right"]),
                                          e["landmarks_left"], e["landmarks_right"], spec, depth=depth)
                    xs.append(prep.net_input(mode))
                views.append(net(np.stack(xs)).data.astype(np.float64))
    net.train(was_training)
    return np.concatenate(views) if views else np.zeros((0, net.cfg.embed_dim))


def decoder_l1(model: RecogModel, dataset: Dataset, split: str = "test", spec: CropSpec | None = None,
               batch: int = 128) -> dict:
    """Passport reconstruction error of the decoder on ``split`` next to constant predictors.

    ``mid_gray`` predicts 0 (gray level 0.5) everywhere; ``best_constant``
    predicts the median train-passport pixel, the L1-optimal single level.
    """
    if model.decoder is None:
        raise ConfigError("model has no passport decoder")
    meta = model.meta or {}
    spec = spec or (CropSpec(**meta["crop"]) if "crop" in meta else CropSpec())
    mode = InputMode(meta.get("mode", InputMode.STEREO.value))
    train_px = np.concatenate([v.ravel() for v in TrainData(dataset).passports(spec).values()])
    const = float(np.median(train_px))
    entries = dataset.samples(split, attack=False)
    if not entries:
        raise DataError(f"no samples in split {split!r}")
    targets = {s: passport_target(dataset.passport(s), dataset.subject(s)["passport_landmarks"], spec)
               for s in {e["subject"] for e in entries}}
    sums = np.zeros(3, dtype=np.float64)
    n = 0
    model.net.eval()
    model.decoder.eval()
    with T.no_grad():
        for start in range(0, len(entries), batch):
            chunk = entries[start:start + batch]
            xs = [prepare_stereo(dataset.image(e["left"]), dataset.image(e["right"]), e["landmarks_left"],
                                 e["landmarks_right"], spec).net_input(mode) for e in chunk]
            est = model.decoder(model.net.deep_features(np.stack(xs))).data[:, 0].astype(np.float64)
            tgt = np.stack([targets[e["subject"]] for e in chunk])
            sums += (np.abs(est - tgt).sum(), np.abs(tgt).sum(), np.abs(tgt - const).sum())
            n += tgt.size
    decoder, mid, best = sums / n
    return {"decoder": float(decoder), "mid_gray": float(mid), "best_constant": float(best),
            "constant": const, "n": len(entries)}
