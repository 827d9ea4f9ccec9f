"""Flat-reproduction attacks and a stereo liveness classifier.

An attack takes a rendered face image, lays it on a tilted plane at
natural size (one source pixel covers ``z_source / focal`` metres) and
re-images that plane with the stereo rig.  The left->right mapping of a
plane is a homography, which is what separates attacks from real faces.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import tensor as T
from .checkpoint import save_checkpoint
from .errors import ConfigError, DataError, NumericError
from .facegen import io
from .facegen.dataset import Dataset, sample_entry, stream, write_manifest
from .facegen.render import Background, CameraRig, FaceOutOfFrame, LightCondition, Pose, StereoSample, project
from .nn import Linear, Module
from .optim import OptimState, clip_grad_norm, lr_at_epoch, sgd_step
from .pipeline import CropSpec, InputMode, prepare_stereo
from .recognet import EmbeddingNet, ModelConfig

log = logging.getLogger(__name__)

_TAG_SPOOF, _TAG_LIVE_ORDER, _TAG_LIVE_AUG, _TAG_LIVE_INIT = 20, 21, 22, 23
PRINT_EXTENT = 2.2  # print side, in units of the landmark box side


@dataclass(frozen=True)
class SpoofPlane:
    pitch: float
    yaw: float
    distance: float
    scale: float  # metres per source pixel
    center_x: float = 0.0  # plane centre in the left camera frame, metres
    center_y: float = 0.0

    def rotation(self) -> np.ndarray:
        return Pose(pitch=self.pitch, yaw=self.yaw).rotation()

    def center(self) -> np.ndarray:
        return np.array([self.center_x, self.center_y, self.distance])

    def to_json(self) -> dict:
        return {k: float(v) for k, v in asdict(self).items()}


def project_eq(points, focal: float, baseline: float) -> np.ndarray:
    """(x_p, y_p) = (focal / z) * (x - baseline, y); scalar or batched points."""
    return project(points, focal, baseline)


@dataclass(frozen=True)
class PrintRegion:
    """Square region of the source image that is reproduced, in source pixels."""

    cx: float
    cy: float
    half: float


def print_region(landmarks: np.ndarray, shape) -> PrintRegion:
    lm = np.asarray(landmarks, float)
    lo, hi = lm.min(axis=0), lm.max(axis=0)
    half = PRINT_EXTENT * max(hi - lo) / 2
    c = (lo + hi) / 2
    return PrintRegion(float(c[0]), float(c[1]), float(half))


def plane_points(src_xy: np.ndarray, region: PrintRegion, plane: SpoofPlane) -> np.ndarray:
    """3-D points (left camera frame) of source pixel coordinates laid on the plane."""
    src_xy = np.asarray(src_xy, float)
    local = np.zeros(src_xy.shape[:-1] + (3,))
    local[..., 0] = (src_xy[..., 0] - region.cx) * plane.scale
    local[..., 1] = (src_xy[..., 1] - region.cy) * plane.scale
    return local @ plane.rotation().T + plane.center()


def _ray_cast(plane: SpoofPlane, region: PrintRegion, rig: CameraRig, right: bool):
    """Source coordinates and depth seen by every pixel; NaN outside the print."""
    origin = np.array([rig.baseline if right else 0.0, 0.0, 0.0])
    rot = plane.rotation()
    normal = rot[:, 2]
    cols, rows = np.meshgrid(np.arange(rig.scene_w), np.arange(rig.scene_h))
    dirs = np.stack([(cols - rig.cx) / rig.focal, (rows - rig.cy) / rig.focal, np.ones(cols.shape)], axis=-1)
    denom = dirs @ normal
    t = ((plane.center() - origin) @ normal) / denom
    pts = origin + t[..., None] * dirs
    local = (pts - plane.center()) @ rot
    sx = local[..., 0] / plane.scale + region.cx
    sy = local[..., 1] / plane.scale + region.cy
    inside = (t > 0) & (np.abs(sx - region.cx) <= region.half) & (np.abs(sy - region.cy) <= region.half)
    return np.where(inside, sx, np.nan), np.where(inside, sy, np.nan), np.where(inside, pts[..., 2], 0.0)


def flat_project(source: np.ndarray, landmarks: np.ndarray, plane: SpoofPlane, rig: CameraRig,
                 background: Background | np.random.Generator | None = None, subject: int = -1,
                 edge_margin: float = 2.0) -> StereoSample:
    """Re-image a flat print of ``source`` with both cameras.

    ``landmarks`` locate the face in ``source`` and fix the printed region.
    """
    if plane.distance <= 0:
        raise ConfigError("the plane must lie in front of the cameras")
    src = np.asarray(source)
    src = src / 255.0 if src.dtype == np.uint8 else src.astype(np.float64)
    region = print_region(landmarks, src.shape)
    lm3 = plane_points(landmarks, region, plane)
    if np.any(lm3[:, 2] <= 0):
        raise ConfigError("the plane lies behind the cameras")
    lm_left = project_eq(lm3, rig.focal, 0.0) + (rig.cx, rig.cy)
    lm_right = project_eq(lm3, rig.focal, rig.baseline) + (rig.cx, rig.cy)
    for lm in (lm_left, lm_right):
        if (np.any(lm < edge_margin) or np.any(lm[:, 0] > rig.scene_w - 1 - edge_margin)
                or np.any(lm[:, 1] > rig.scene_h - 1 - edge_margin)):
            raise FaceOutOfFrame("projected print leaves the frame")
    if background is None:
        background = Background.uniform()
    elif isinstance(background, np.random.Generator):
        background = Background.random(background)

    images, masks, depth_left = [], [], None
    for right in (False, True):
        sx, sy, depth = _ray_cast(plane, region, rig, right)
        hit = np.isfinite(sx)
        vals = ndimage.map_coordinates(src, [np.nan_to_num(sy), np.nan_to_num(sx)], order=1, mode="nearest")
        images.append(np.where(hit, vals, background.render(rig, right=right)))
        masks.append(hit)
        if not right:
            depth_left = depth
    bboxes = []
    for mask, lm in zip(masks, (lm_left, lm_right)):
        rows, cols = np.nonzero(mask)
        xs = np.concatenate([cols, lm[:, 0]])
        ys = np.concatenate([rows, lm[:, 1]])
        bboxes.append((int(max(np.floor(xs.min()), 0)), int(max(np.floor(ys.min()), 0)),
                       int(min(np.ceil(xs.max()), rig.scene_w - 1)), int(min(np.ceil(ys.max()), rig.scene_h - 1))))
    return StereoSample(images[0], images[1], depth_left, bboxes[0], bboxes[1], lm_left, lm_right, subject,
                        Pose(pitch=plane.pitch, yaw=plane.yaw, distance=plane.distance), LightCondition(),
                        landmarks3d_cam=lm3, face_mask_right=masks[1])


def sample_plane(rng: np.random.Generator, source_depth: float, landmarks: np.ndarray, rig: CameraRig) -> SpoofPlane:
    distance = float(rng.uniform(0.25, 1.0))
    region = print_region(landmarks, None)
    # keep the face roughly where it was in the source view
    cx = (region.cx - rig.cx) * distance / rig.focal
    cy = (region.cy - rig.cy) * distance / rig.focal
    return SpoofPlane(pitch=float(rng.uniform(0, 20)), yaw=float(rng.uniform(0, 20)), distance=distance,
                      scale=source_depth / rig.focal, center_x=float(cx), center_y=float(cy))


# ---------------------------------------------------------------- homography check


def fit_homography(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Least-squares homography src -> dst (reprojection-error refined)."""
    import cv2

    src = np.asarray(src, dtype=np.float64).reshape(-1, 1, 2)
    dst = np.asarray(dst, dtype=np.float64).reshape(-1, 1, 2)
    if len(src) < 4:
        raise ValueError("need at least 4 correspondences")
    h, _ = cv2.findHomography(src, dst, 0)
    if h is None:
        raise NumericError("homography fit failed")
    return h


def homography_residual(src: np.ndarray, dst: np.ndarray) -> float:
    """Max reprojection error (px) of the least-squares homography mapping src onto dst."""
    h = fit_homography(src, dst)
    p = np.column_stack([src, np.ones(len(src))]) @ h.T
    return float(np.max(np.linalg.norm(p[:, :2] / p[:, 2:3] - dst, axis=1)))


def attack_correspondences(landmarks, plane: SpoofPlane, rig: CameraRig, n: int = 64, rng=None) -> tuple:
    """Matched left/right pixel positions of points on the printed plane."""
    region = print_region(landmarks, None)
    rng = np.random.default_rng(0) if rng is None else rng
    xy = np.column_stack([rng.uniform(region.cx - region.half, region.cx + region.half, n),
                          rng.uniform(region.cy - region.half, region.cy + region.half, n)])
    pts = plane_points(xy, region, plane)
    return (project_eq(pts, rig.focal, 0.0) + (rig.cx, rig.cy),
            project_eq(pts, rig.focal, rig.baseline) + (rig.cx, rig.cy))


def face_correspondences(surface, pose: Pose, rig: CameraRig, n: int = 64, rng=None) -> tuple:
    """Matched left/right pixel positions of points on a real face surface."""
    from .facegen.render import to_camera

    rng = np.random.default_rng(0) if rng is None else rng
    pts = []
    while len(pts) < n:
        x = rng.uniform(-surface.half_w, surface.half_w)
        y = rng.uniform(-surface.half_h, surface.half_h)
        if surface.inside(x, y) and (x / surface.half_w) ** 2 + (y / surface.half_h) ** 2 < 0.85:
            pts.append((x, y, -float(surface.height(x, y))))
    cam = to_camera(np.array(pts), pose)
    return (project_eq(cam, rig.focal, 0.0) + (rig.cx, rig.cy),
            project_eq(cam, rig.focal, rig.baseline) + (rig.cx, rig.cy))


# ---------------------------------------------------------------- attack datasets


@dataclass
class SpoofConfig:
    seed: int = 0
    fraction: float = 1.0   # share of genuine samples that get an attack twin
    max_retries: int = 25


def gen_spoof_set(genuine: Dataset, out, cfg: SpoofConfig = SpoofConfig()) -> Path:
    """One flat attack per selected genuine sample, written in the dataset layout.

    Attack entries carry ``"attack": true`` and ``"source"`` (the genuine
    sample id); subjects and split are copied from the genuine set.
    """
    root = Path(out)
    try:
        root.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create {root}: {exc}") from exc
    rig = genuine.rig
    entries = []
    for k, src in enumerate(genuine.samples(attack=False)):
        rng = stream(cfg.seed, _TAG_SPOOF, src["subject"], src["index"])
        if rng.random() >= cfg.fraction:
            continue
        image = genuine.image(src["left"]).astype(np.float64) / 255.0
        lm = np.asarray(src["landmarks_left"], float)
        background = Background.random(rng)
        for _ in range(cfg.max_retries):
            plane = sample_plane(rng, src["pose"]["distance"], lm, rig)
            try:
                smp = flat_project(image, lm, plane, rig, background, subject=src["subject"])
                break
            except FaceOutOfFrame:
                continue
        else:
            raise DataError(f"could not place an attack for {src['id']}")
        stem = f"images/s{src['subject']:04d}/{src['index']:03d}_A"
        (root / stem).parent.mkdir(parents=True, exist_ok=True)
        io.write_pgm(root / f"{stem}_L.pgm", smp.left)
        io.write_pgm(root / f"{stem}_R.pgm", smp.right)
        io.write_depth(root / f"{stem}_D.dpth", smp.depth_left)
        entry = sample_entry(smp, f"{src['id']}_A", src["index"], stem, attack=True)
        entry["source"] = src["id"]
        entry["plane"] = plane.to_json()
        entries.append(entry)
    manifest = {
        "format": genuine.manifest.get("format"), "seed": cfg.seed, "rig": genuine.manifest["rig"],
        "split": genuine.manifest["split"], "subjects": genuine.manifest["subjects"], "samples": entries,
        "attack_of": str(genuine.root),
    }
    return write_manifest(root, manifest)


# ---------------------------------------------------------------- liveness classifier


class LivenessHead(Module):
    def __init__(self, rng, dim: int):
        rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
        self.fc = Linear(rng, dim, 1)

    def __call__(self, emb):
        return T.reshape(self.fc(emb), (emb.shape[0],))


@dataclass
class LivenessConfig:
    epochs: int = 12
    batch: int = 32
    base_lr: float = 0.01
    drop_every: int = 8
    factor: float = 0.1
    weight_decay: float = 0.0005
    momentum: float = 0.9
    seed: int = 0
    stage_filters: tuple[int, ...] = (8, 16, 32, 64)
    blocks_per_stage: tuple[int, ...] = (1, 2, 4, 1)
    embed_dim: int = 64
    crop: CropSpec = field(default_factory=CropSpec)
    threshold: float = 0.5
    clip_norm: float | None = 10.0


@dataclass
class LivenessModel:
    net: EmbeddingNet
    head: LivenessHead
    cfg: LivenessConfig

    def prob_real(self, x) -> np.ndarray:
        with T.no_grad():
            return T.sigmoid(self.head(self.net(x))).data.astype(np.float64)

    def state(self) -> dict:
        out = {f"net.{k}": v for k, v in self.net.state_dict().items()}
        out.update({f"liveness.{k}": v for k, v in self.head.state_dict().items()})
        return out


def _mixed_entries(real: Dataset, attacks: Dataset, split: str):
    items = [(real, e, 1.0) for e in real.samples(split, attack=False)]
    items += [(attacks, e, 0.0) for e in attacks.samples(split, attack=True)]
    return items


def _liveness_batch(items, spec, seed, epoch, train):
    xs, ys = [], []
    for k, (ds, e, y) in items:
        rng = stream(seed, _TAG_LIVE_AUG, epoch, k) if train else None
        prep = prepare_stereo(ds.image(e["left"]), ds.image(e["right"]), e["landmarks_left"],
                              e["landmarks_right"], spec, rng, train)
        xs.append(prep.net_input(InputMode.STEREO))
        ys.append(y)
    return np.stack(xs), np.asarray(ys)


def liveness_train(cfg: LivenessConfig, real: Dataset, attacks: Dataset, out_dir=None,
                   split: str = "train") -> tuple[LivenessModel, list[float]]:
    """Binary real (1) / attack (0) training of the 6-channel backbone with a one-logit head."""
    items = _mixed_entries(real, attacks, split)
    labels = {y for _, _, y in items}
    if labels != {0.0, 1.0}:
        raise DataError("liveness training needs both real and attack samples")
    mcfg = ModelConfig(6, cfg.stage_filters, cfg.blocks_per_stage, cfg.embed_dim, cfg.crop.train_crop)
    net = EmbeddingNet(mcfg, stream(cfg.seed, _TAG_LIVE_INIT, 0)).train()
    head = LivenessHead(stream(cfg.seed, _TAG_LIVE_INIT, 1), mcfg.embed_dim)
    params = list(net.decay_flags("net.")) + list(head.decay_flags("liveness."))
    state = OptimState(lr=cfg.base_lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    losses = []
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        state.lr = lr_at_epoch(epoch, cfg.base_lr, cfg.drop_every, cfg.factor)
        order = stream(cfg.seed, _TAG_LIVE_ORDER, epoch).permutation(len(items))
        total, nb = 0.0, 0
        for start in range(0, len(items), cfg.batch):
            chunk = [(int(k), items[k]) for k in order[start:start + cfg.batch]]
            x, y = _liveness_batch(chunk, cfg.crop, cfg.seed, epoch, True)
            loss = T.bce_with_logits(head(net(x)), y)
            if not math.isfinite(loss.item()):
                raise NumericError(f"non-finite liveness loss at epoch {epoch}")
            loss.backward()
            if cfg.clip_norm is not None:
                clip_grad_norm(params, cfg.clip_norm)
            sgd_step(params, state)
            total += loss.item()
            nb += 1
        losses.append(total / nb)
        log.info("liveness epoch %d loss %.4f (%.1fs)", epoch, losses[-1], time.perf_counter() - t0)
    net.trained = True
    net.eval()
    model = LivenessModel(net, head, cfg)
    if out_dir is not None:
        out = Path(out_dir)
        meta = {"kind": "liveness", "mode": InputMode.STEREO.value, "model": mcfg.to_json(),
                "crop": asdict(cfg.crop), "threshold": cfg.threshold}
        save_checkpoint(out / "liveness.ckpt", model.state(), meta)
        (out / "liveness_loss.json").write_text(json.dumps(losses) + "\n")
    return model, losses


def load_liveness(path) -> LivenessModel:
    from .checkpoint import load_checkpoint

    tensors, meta = load_checkpoint(path)
    if meta.get("kind") != "liveness":
        raise DataError(f"{path}: not a liveness checkpoint")
    mcfg = ModelConfig(**meta["model"])
    net = EmbeddingNet(mcfg, 0)
    net.load_state_dict({k[4:]: v for k, v in tensors.items() if k.startswith("net.")})
    net.trained = True
    net.eval()
    head = LivenessHead(0, mcfg.embed_dim)
    head.load_state_dict({k[9:]: v for k, v in tensors.items() if k.startswith("liveness.")})
    cfg = LivenessConfig(crop=CropSpec(**meta["crop"]), threshold=meta.get("threshold", 0.5),
                         stage_filters=mcfg.stage_filters, blocks_per_stage=mcfg.blocks_per_stage,
                         embed_dim=mcfg.embed_dim)
    return LivenessModel(net, head, cfg)


@dataclass
class SpoofReport:
    rows: list[dict]

    def rate(self, name: str) -> float:
        for r in self.rows:
            if r["set"] == name:
                return r["rate"]
        raise KeyError(name)

    def write_csv(self, path) -> None:
        import csv

        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["set", "n", "metric", "rate"])
            for r in self.rows:
                w.writerow([r["set"], r["n"], r["metric"], repr(r["rate"])])


def spoof_metrics(model: LivenessModel, real: Dataset, attacks: Dataset, split: str = "test",
                  threshold: float | None = None, batch: int = 128) -> SpoofReport:
    """Attack detection rate (p_real < threshold) and real acceptance rate (p_real >= threshold)."""
    thr = model.cfg.threshold if threshold is None else threshold
    rows = []
    for name, ds, attack in (("flat", attacks, True), ("real", real, False)):
        entries = ds.samples(split, attack=attack)
        if not entries:
            continue
        probs = []
        for start in range(0, len(entries), batch):
            chunk = [(i, (ds, e, 0.0)) for i, e in enumerate(entries[start:start + batch])]
            x, _ = _liveness_batch(chunk, model.cfg.crop, 0, 0, False)
            probs.append(model.prob_real(x))
        p = np.concatenate(probs)
        if attack:
            rows.append({"set": name, "n": len(p), "metric": "detection_rate", "rate": float(np.mean(p < thr))})
        else:
            rows.append({"set": name, "n": len(p), "metric": "acceptance_rate", "rate": float(np.mean(p >= thr))})
    return SpoofReport(rows)
