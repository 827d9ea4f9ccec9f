"""Face cropping, coordinate maps, augmentation and network-input assembly.

Stereo inputs stack six channels in the fixed order
``[left, right, left_x, left_y, right_x, right_y]``; depth+texture inputs
are ``[image, depth]`` and mono inputs a single image channel.  Image
channels are gray levels shifted to [-0.5, 0.5]; coordinate channels hold
each pixel's position in the uncropped scene, zero-centred and divided by
the scene diagonal.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import DataError, ShapeError

DEPTH_OFFSET = 0.5
DEPTH_SCALE = 1.0


class InputMode(str, enum.Enum):
    MONO = "mono"
    STEREO = "stereo"
    STEREO_NOCOORDS = "stereo-nocoords"
    DEPTH_TEXTURE = "depthtex"

    @property
    def channels(self) -> int:
        return {"mono": 1, "stereo": 6, "stereo-nocoords": 2, "depthtex": 2}[self.value]


@dataclass(frozen=True)
class CropSpec:
    frame: int = 36
    train_crop: int = 32
    margin: float = 0.35
    jitter_px: float = 1.0

    def __post_init__(self):
        if not self.train_crop < self.frame:
            raise ValueError("train_crop must be smaller than frame")

    @classmethod
    def paper(cls) -> "CropSpec":
        return cls(frame=144, train_crop=128)


@dataclass(frozen=True)
class AugmentConfig:
    noise_max: float = 0.02
    blur_prob: float = 0.2


@dataclass(frozen=True)
class BBox:
    """Square source window: top-left corner and side, in scene pixels."""

    x0: float
    y0: float
    side: float


def square_bbox(landmarks: np.ndarray, spec: CropSpec, scene_w: int, scene_h: int) -> BBox:
    lm = np.asarray(landmarks, dtype=np.float64)
    inside = (lm[:, 0] >= 0) & (lm[:, 0] <= scene_w - 1) & (lm[:, 1] >= 0) & (lm[:, 1] <= scene_h - 1)
    if inside.sum() < 3:
        raise DataError("fewer than 3 landmarks inside the scene")
    lo, hi = lm.min(axis=0), lm.max(axis=0)
    w, h = (hi - lo) * (1.0 + spec.margin)
    side = max(w, h)
    if side < 4:
        raise DataError(f"degenerate landmark box (side {side:.2f} px)")
    side = min(side, scene_w, scene_h)
    cx, cy = (lo + hi) / 2
    x0 = min(max(cx - side / 2, 0.0), scene_w - side)
    y0 = min(max(cy - side / 2, 0.0), scene_h - side)
    return BBox(float(x0), float(y0), float(side))


def source_positions(bbox: BBox, frame: int) -> np.ndarray:
    """Scene coordinate sampled by each of the ``frame`` output pixels along one axis."""
    return (np.arange(frame) + 0.5) * (bbox.side / frame) - 0.5


def resample(image: np.ndarray, bbox: BBox, frame: int) -> np.ndarray:
    """Bilinear resize of a square window of ``image`` to ``frame`` x ``frame``."""
    step = source_positions(bbox, frame)
    cols, rows = bbox.x0 + step, bbox.y0 + step
    rr, cc = np.meshgrid(rows, cols, indexing="ij")
    return ndimage.map_coordinates(np.asarray(image, dtype=np.float64), [rr, cc], order=1, mode="nearest")


def crop_face(image: np.ndarray, landmarks: np.ndarray, spec: CropSpec) -> tuple[np.ndarray, BBox]:
    h, w = image.shape
    bbox = square_bbox(landmarks, spec, w, h)
    return resample(image, bbox, spec.frame), bbox


def normalize_gray(image: np.ndarray) -> np.ndarray:
    """8-bit images map v -> v/255 - 0.5; float images in [0, 1] map v -> v - 0.5."""
    image = np.asarray(image)
    if image.dtype == np.uint8:
        return image.astype(np.float64) / 255.0 - 0.5
    return image.astype(np.float64) - 0.5


def coord_map(bbox: BBox, frame: int, scene_w: int, scene_h: int) -> np.ndarray:
    """Two channels (x, y) of normalised scene coordinates, shape (2, frame, frame).

    A scene pixel (i, j) maps to ``((i - W/2) / D, (j - H/2) / D)`` with
    ``D = sqrt(W**2 + H**2)``.
    """
    diag = math.sqrt(scene_w ** 2 + scene_h ** 2)
    step = source_positions(bbox, frame)
    xs = (bbox.x0 + step - scene_w / 2) / diag
    ys = (bbox.y0 + step - scene_h / 2) / diag
    out = np.empty((2, frame, frame))
    out[0] = xs[None, :]
    out[1] = ys[:, None]
    return out


def coords_to_pixels(cmap: np.ndarray, scene_w: int, scene_h: int) -> np.ndarray:
    """Invert `coord_map`: returns (2, h, w) scene pixel coordinates."""
    diag = math.sqrt(scene_w ** 2 + scene_h ** 2)
    return np.stack([cmap[0] * diag + scene_w / 2, cmap[1] * diag + scene_h / 2])


def box_blur(img: np.ndarray) -> np.ndarray:
    return ndimage.uniform_filter(img, size=3, mode="nearest")


def augment(texture: np.ndarray, coords: np.ndarray | None, depth: np.ndarray | None,
            rng: np.random.Generator | None, spec: CropSpec, cfg: AugmentConfig = AugmentConfig(),
            train: bool = True):
    """Cut a ``train_crop`` window out of frame-sized channels.

    ``texture`` is (k, F, F) gray channels, ``coords`` (c, F, F) coordinate
    channels, ``depth`` (F, F).  One offset is drawn per call and shared by
    every channel.  Noise and blur touch texture channels only.  With
    ``train=False`` (or no rng) the centre window is taken, unperturbed.
    """
    f, c = spec.frame, spec.train_crop
    if texture.shape[-1] != f or texture.shape[-2] != f:
        raise ShapeError(f"augment: expected {f}x{f} channels, got {texture.shape}")
    if train and rng is not None:
        oy, ox = (int(v) for v in rng.integers(0, f - c + 1, size=2))
    else:
        oy = ox = (f - c) // 2
    win = (slice(oy, oy + c), slice(ox, ox + c))
    tex = np.array(texture[(...,) + win], dtype=np.float64)
    if train and rng is not None:
        sigma = rng.uniform(0.0, cfg.noise_max)
        blur = rng.random() < cfg.blur_prob
        noise = rng.normal(0.0, 1.0, size=tex.shape) * sigma
        if blur:
            tex = np.stack([box_blur(t) for t in tex])
        tex = tex + noise
    out_coords = None if coords is None else np.array(coords[(...,) + win])
    out_depth = None if depth is None else np.array(depth[win])
    return tex, out_coords, out_depth, (oy, ox)


def normalize_depth(depth: np.ndarray) -> np.ndarray:
    return (np.asarray(depth, dtype=np.float64) - DEPTH_OFFSET) / DEPTH_SCALE


def assemble_input(mode: InputMode | str, left=None, right=None, coords_left=None, coords_right=None,
                   depth=None):
    """Stack crop-sized components into the channel layout of ``mode``.

    Mono given both images returns a pair of independent single-channel
    inputs (left, right).
    """
    mode = InputMode(mode)
    parts = {"left": left, "right": right, "coords_left": coords_left, "coords_right": coords_right,
             "depth": depth}
    need = {
        InputMode.MONO: ("left",),
        InputMode.STEREO: ("left", "right", "coords_left", "coords_right"),
        InputMode.STEREO_NOCOORDS: ("left", "right"),
        InputMode.DEPTH_TEXTURE: ("left", "depth"),
    }[mode]
    missing = [k for k in need if parts[k] is None]
    if missing:
        raise ShapeError(f"{mode.value} input needs {', '.join(missing)}")
    shapes = {np.shape(v)[-2:] for v in parts.values() if v is not None}
    if len(shapes) != 1:
        raise ShapeError(f"components differ in spatial size: {sorted(shapes)}")
    if mode is InputMode.MONO:
        if right is not None:
            return np.asarray(left)[None], np.asarray(right)[None]
        return np.asarray(left)[None]
    if mode is InputMode.STEREO:
        return np.stack([left, right, coords_left[0], coords_left[1], coords_right[0], coords_right[1]])
    if mode is InputMode.STEREO_NOCOORDS:
        return make_nocoords_input(left, right)
    return np.stack([left, normalize_depth(depth)])


def make_nocoords_input(left, right) -> np.ndarray:
    return np.stack([left, right])


# ---------------------------------------------------------------- dataset samples


@dataclass
class PreparedSample:
    """Crop-sized, normalised components of one stereo sample."""

    left: np.ndarray
    right: np.ndarray
    coords_left: np.ndarray
    coords_right: np.ndarray
    depth: np.ndarray | None
    bbox_left: BBox
    bbox_right: BBox

    def net_input(self, mode: InputMode | str):
        return assemble_input(mode, self.left, self.right, self.coords_left, self.coords_right, self.depth)


def prepare_stereo(left_img, right_img, lm_left, lm_right, spec: CropSpec,
                   rng: np.random.Generator | None = None, train: bool = False,
                   depth: np.ndarray | None = None, aug: AugmentConfig = AugmentConfig()) -> PreparedSample:
    """Crop both views independently around their own landmarks, then augment jointly."""
    h, w = left_img.shape
    lm_left, lm_right = np.asarray(lm_left, float), np.asarray(lm_right, float)
    if train and rng is not None and spec.jitter_px > 0:
        lm_left = lm_left + rng.normal(0, spec.jitter_px, lm_left.shape)
        lm_right = lm_right + rng.normal(0, spec.jitter_px, lm_right.shape)
    fl, bl = crop_face(left_img, lm_left, spec)
    fr, br = crop_face(right_img, lm_right, spec)
    scale = 255.0 if np.asarray(left_img).dtype == np.uint8 else 1.0
    tex = np.stack([fl / scale - 0.5, fr / scale - 0.5])
    coords = np.concatenate([coord_map(bl, spec.frame, w, h), coord_map(br, spec.frame, w, h)])
    dframe = None if depth is None else resample(depth, bl, spec.frame)
    tex, coords, dcrop, _ = augment(tex, coords, dframe, rng, spec, aug, train=train)
    return PreparedSample(tex[0], tex[1], coords[:2], coords[2:], dcrop, bl, br)


def prepare_mono(image, landmarks, spec: CropSpec, rng: np.random.Generator | None = None,
                 train: bool = False, aug: AugmentConfig = AugmentConfig()) -> np.ndarray:
    """One image as a (1, crop, crop) mono input."""
    lm = np.asarray(landmarks, float)
    if train and rng is not None and spec.jitter_px > 0:
        lm = lm + rng.normal(0, spec.jitter_px, lm.shape)
    frame, _ = crop_face(image, lm, spec)
    scale = 255.0 if np.asarray(image).dtype == np.uint8 else 1.0
    tex, _, _, _ = augment((frame / scale - 0.5)[None], None, None, rng, spec, aug, train=train)
    return tex


def passport_target(passport_img, landmarks, spec: CropSpec) -> np.ndarray:
    """Centre-cropped, normalised passport view used as the decoder target, (crop, crop)."""
    frame, _ = crop_face(passport_img, landmarks, spec)
    scale = 255.0 if np.asarray(passport_img).dtype == np.uint8 else 1.0
    tex, _, _, _ = augment((frame / scale - 0.5)[None], None, None, None, spec, train=False)
    return tex[0]
