"""Stereo rendering of procedural faces.

Camera frame: x right, y down, z forward.  The left camera sits at the
origin and the right camera at ``(baseline, 0, 0)``; both share the focal
length and principal point, so a point at depth z has disparity
``focal * baseline / z``.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace

import numpy as np

from ..errors import DataError
from .surface import GRID_HALF, FaceSurface

# a face's nose tip sits roughly at the pose distance
_NOSE_LEVEL = 0.08
PASSPORT_DISTANCE = 0.5
PASSPORT_GRAY = 0.5


@dataclass(frozen=True)
class CameraRig:
    focal: float = 140.0
    baseline: float = 0.030
    scene_w: int = 192
    scene_h: int = 108

    def __post_init__(self):
        if self.focal <= 0 or self.baseline < 0 or self.scene_w <= 0 or self.scene_h <= 0:
            raise ValueError(f"invalid rig {self}")

    @property
    def cx(self) -> float:
        return (self.scene_w - 1) / 2.0

    @property
    def cy(self) -> float:
        return (self.scene_h - 1) / 2.0

    @classmethod
    def paper(cls) -> "CameraRig":
        return cls(focal=1400.0, baseline=0.030, scene_w=1920, scene_h=1080)


class LightDir(str, enum.Enum):
    LEFT = "L"
    CENTER = "C"
    RIGHT = "R"


_LIGHT_ANGLE = math.radians(30.0)
LIGHT_VECTORS = {
    LightDir.LEFT: np.array([-math.sin(_LIGHT_ANGLE), 0.0, -math.cos(_LIGHT_ANGLE)]),
    LightDir.CENTER: np.array([0.0, 0.0, -1.0]),
    LightDir.RIGHT: np.array([math.sin(_LIGHT_ANGLE), 0.0, -math.cos(_LIGHT_ANGLE)]),
}


@dataclass(frozen=True)
class LightCondition:
    direction: LightDir = LightDir.CENTER
    diffuse: float = 0.7
    ambient: float = 0.2

    def __post_init__(self):
        object.__setattr__(self, "direction", LightDir(self.direction))
        if not (0 < self.diffuse <= 1 and 0 <= self.ambient < 1 and self.diffuse + self.ambient <= 1.2):
            raise ValueError(f"invalid light {self}")

    def to_json(self) -> dict:
        return {"direction": self.direction.value, "diffuse": self.diffuse, "ambient": self.ambient}


@dataclass(frozen=True)
class Pose:
    pitch: float = 0.0
    yaw: float = 0.0
    roll: float = 0.0
    distance: float = 0.5
    offset_x: float = 0.0
    offset_y: float = 0.0

    def is_genuine(self) -> bool:
        return abs(self.pitch) <= 25 and abs(self.yaw) <= 25 and 0.25 <= self.distance <= 1.0

    def rotation(self) -> np.ndarray:
        p, y, r = (math.radians(a) for a in (self.pitch, self.yaw, self.roll))
        rx = np.array([[1, 0, 0], [0, math.cos(p), -math.sin(p)], [0, math.sin(p), math.cos(p)]])
        ry = np.array([[math.cos(y), 0, math.sin(y)], [0, 1, 0], [-math.sin(y), 0, math.cos(y)]])
        rz = np.array([[math.cos(r), -math.sin(r), 0], [math.sin(r), math.cos(r), 0], [0, 0, 1]])
        return rz @ ry @ rx

    def translation(self) -> np.ndarray:
        return np.array([self.offset_x, self.offset_y, self.distance + _NOSE_LEVEL])

    def to_json(self) -> dict:
        return {k: float(v) for k, v in vars(self).items()}


def to_camera(points_local: np.ndarray, pose: Pose) -> np.ndarray:
    """Face-local points (..., 3) to left-camera coordinates."""
    return points_local @ pose.rotation().T + pose.translation()


def project(points: np.ndarray, focal: float, baseline: float = 0.0) -> np.ndarray:
    """Pinhole projection relative to the principal point.

    A camera displaced by ``baseline`` along x maps (x, y, z) to
    ``(focal / z) * (x - baseline, y)``; the left camera uses baseline 0.
    """
    points = np.asarray(points, dtype=np.float64)
    z = points[..., 2]
    return np.stack([focal * (points[..., 0] - baseline) / z, focal * points[..., 1] / z], axis=-1)


def to_pixels(points: np.ndarray, rig: CameraRig, right: bool = False) -> np.ndarray:
    uv = project(points, rig.focal, rig.baseline if right else 0.0)
    return uv + np.array([rig.cx, rig.cy])


@dataclass
class StereoSample:
    left: np.ndarray
    right: np.ndarray
    depth_left: np.ndarray
    bbox_left: tuple[int, int, int, int]
    bbox_right: tuple[int, int, int, int]
    landmarks2d_left: np.ndarray
    landmarks2d_right: np.ndarray
    subject: int
    pose: Pose
    light: LightCondition
    landmarks3d_cam: np.ndarray = field(default=None, repr=False)
    face_mask_right: np.ndarray = field(default=None, repr=False)


# ---------------------------------------------------------------- background


@dataclass(frozen=True)
class Background:
    """Random pattern far away plus a few flat shapes at 1-3 m.

    Every layer is a fronto-parallel plane, so each camera sees it shifted
    by that layer's own disparity.
    """

    pattern_depth: float
    waves: tuple          # (amp, kx, ky, phase)
    base: float
    shapes: tuple         # (kind, depth, cx, cy, size, gray, aspect)
    flat: float | None = None

    @classmethod
    def random(cls, rng: np.random.Generator) -> "Background":
        waves = tuple((float(rng.uniform(0.04, 0.12)), float(rng.uniform(-15, 15)),
                       float(rng.uniform(-15, 15)), float(rng.uniform(0, 2 * np.pi))) for _ in range(4))
        shapes = []
        for _ in range(int(rng.integers(1, 4))):
            depth = float(rng.uniform(1.0, 3.0))
            shapes.append((str(rng.choice(["disc", "rect", "tri"])), depth,
                           float(rng.uniform(-0.6, 0.6) * depth), float(rng.uniform(-0.35, 0.35) * depth),
                           float(rng.uniform(0.08, 0.25) * depth), float(rng.uniform(0.1, 0.9)),
                           float(rng.uniform(0.5, 2.0))))
        shapes.sort(key=lambda s: -s[1])
        return cls(pattern_depth=4.0, waves=waves, base=float(rng.uniform(0.3, 0.7)), shapes=tuple(shapes))

    @classmethod
    def uniform(cls, gray: float = PASSPORT_GRAY) -> "Background":
        return cls(pattern_depth=4.0, waves=(), base=gray, shapes=(), flat=gray)

    def render(self, rig: CameraRig, right: bool = False) -> np.ndarray:
        h, w = rig.scene_h, rig.scene_w
        if self.flat is not None:
            return np.full((h, w), self.flat)
        cam_x = rig.baseline if right else 0.0
        u = (np.arange(w) - rig.cx)[None, :] / rig.focal
        v = (np.arange(h) - rig.cy)[:, None] / rig.focal
        X, Y = u * self.pattern_depth + cam_x, v * self.pattern_depth
        img = np.full((h, w), self.base)
        for amp, kx, ky, ph in self.waves:
            img = img + amp * np.sin(kx * X + ky * Y + ph)
        for kind, depth, scx, scy, size, gray, aspect in self.shapes:
            X, Y = u * depth + cam_x - scx, v * depth - scy
            if kind == "disc":
                m = X ** 2 + (Y * aspect) ** 2 <= size ** 2
            elif kind == "rect":
                m = (np.abs(X) <= size) & (np.abs(Y) <= size / aspect)
            else:
                m = (Y <= size) & (Y >= -size) & (np.abs(X) <= (size - Y) / 2)
            img = np.where(m, gray, img)
        return np.clip(img, 0.0, 1.0)


# ---------------------------------------------------------------- face render


def _splat(pix: np.ndarray, depth: np.ndarray, values: np.ndarray, rig: CameraRig):
    """Z-buffer: nearest point per pixel wins.  Returns (image, depth, hit mask)."""
    col = np.rint(pix[:, 0]).astype(np.int64)
    row = np.rint(pix[:, 1]).astype(np.int64)
    ok = (col >= 0) & (col < rig.scene_w) & (row >= 0) & (row < rig.scene_h) & (depth > 0)
    flat = row[ok] * rig.scene_w + col[ok]
    d, val = depth[ok], values[ok]
    order = np.lexsort((d, flat))
    flat, d, val = flat[order], d[order], val[order]
    first = np.ones(flat.size, dtype=bool)
    first[1:] = flat[1:] != flat[:-1]
    n = rig.scene_w * rig.scene_h
    img = np.zeros(n)
    dep = np.zeros(n)
    hit = np.zeros(n, dtype=bool)
    img[flat[first]] = val[first]
    dep[flat[first]] = d[first]
    hit[flat[first]] = True
    shape = (rig.scene_h, rig.scene_w)
    return img.reshape(shape), dep.reshape(shape), hit.reshape(shape)


def _fill_holes(img, dep, hit):
    """Fill pixels missed by splatting that are surrounded by hits on all 4 sides."""
    pad_hit = np.pad(hit, 1)
    nb = pad_hit[:-2, 1:-1] & pad_hit[2:, 1:-1] & pad_hit[1:-1, :-2] & pad_hit[1:-1, 2:]
    hole = nb & ~hit
    if not hole.any():
        return img, dep, hit
    pi, pd = np.pad(img, 1), np.pad(dep, 1)
    avg = (pi[:-2, 1:-1] + pi[2:, 1:-1] + pi[1:-1, :-2] + pi[1:-1, 2:]) / 4
    avgd = (pd[:-2, 1:-1] + pd[2:, 1:-1] + pd[1:-1, :-2] + pd[1:-1, 2:]) / 4
    return np.where(hole, avg, img), np.where(hole, avgd, dep), hit | hole


def _surface_points(surface: FaceSurface, pose: Pose, rig: CameraRig, light: LightCondition):
    # density: local spacing at most ~0.4 px at the nearest point
    near = max(pose.distance - 0.02, 0.05)
    n = int(np.clip(np.ceil(2 * GRID_HALF * rig.focal / near / 0.4), 96, 1600))
    axis = np.linspace(-GRID_HALF, GRID_HALF, n)
    xx, yy = np.meshgrid(axis, axis)
    inside = surface.inside(xx, yy)
    x, y = xx[inside], yy[inside]
    h, hx, hy = surface.height_and_grad(x, y)
    local = np.column_stack([x, y, -h])
    normal = np.column_stack([-hx, -hy, -np.ones_like(hx)])
    normal /= np.linalg.norm(normal, axis=1, keepdims=True)
    rot = pose.rotation()
    cam = local @ rot.T + pose.translation()
    normal = normal @ rot.T
    shade = light.ambient + light.diffuse * np.clip(normal @ LIGHT_VECTORS[light.direction], 0.0, None)
    value = np.clip(surface.albedo_at(x, y) * shade, 0.0, 1.0)
    return cam, value


def _bbox(mask: np.ndarray, extra: np.ndarray, rig: CameraRig) -> tuple[int, int, int, int]:
    rows, cols = np.nonzero(mask)
    xs = np.concatenate([cols, np.floor(extra[:, 0]), np.ceil(extra[:, 0])])
    ys = np.concatenate([rows, np.floor(extra[:, 1]), np.ceil(extra[:, 1])])
    x0, x1 = int(max(xs.min(), 0)), int(min(xs.max(), rig.scene_w - 1))
    y0, y1 = int(max(ys.min(), 0)), int(min(ys.max(), rig.scene_h - 1))
    return x0, y0, x1, y1


class FaceOutOfFrame(DataError):
    pass


def render_stereo(surface: FaceSurface, pose: Pose, light: LightCondition, rig: CameraRig,
                  background: Background | np.random.Generator | None = None,
                  subject: int = -1, allow_any_pose: bool = False, edge_margin: float = 2.0) -> StereoSample:
    """Render a rectified stereo pair of ``surface`` seen at ``pose`` under ``light``.

    ``background`` is a `Background`, a generator to draw one from, or None
    for the flat passport gray.  Raises `FaceOutOfFrame` when any landmark
    falls outside either image.
    """
    if not allow_any_pose and not pose.is_genuine():
        raise ValueError(f"pose outside the genuine envelope: {pose}")
    if background is None:
        background = Background.uniform()
    elif isinstance(background, np.random.Generator):
        background = Background.random(background)

    cam, value = _surface_points(surface, pose, rig, light)
    lm_cam = to_camera(surface.landmarks3d, pose)
    lm_left = to_pixels(lm_cam, rig)
    lm_right = to_pixels(lm_cam, rig, right=True)
    for lm in (lm_left, lm_right):
        if (np.any(lm[:, 0] < edge_margin) or np.any(lm[:, 0] > rig.scene_w - 1 - edge_margin)
                or np.any(lm[:, 1] < edge_margin) or np.any(lm[:, 1] > rig.scene_h - 1 - edge_margin)):
            raise FaceOutOfFrame("face landmarks leave the frame")

    images, masks, depth_left = [], [], None
    for right in (False, True):
        pix = to_pixels(cam, rig, right=right)
        img, dep, hit = _fill_holes(*_splat(pix, cam[:, 2], value, rig))
        bg = background.render(rig, right=right)
        images.append(np.where(hit, img, bg))
        masks.append(hit)
        if not right:
            depth_left = np.where(hit, dep, 0.0)
    return StereoSample(
        left=images[0], right=images[1], depth_left=depth_left,
        bbox_left=_bbox(masks[0], lm_left, rig), bbox_right=_bbox(masks[1], lm_right, rig),
        landmarks2d_left=lm_left, landmarks2d_right=lm_right, subject=subject, pose=pose, light=light,
        landmarks3d_cam=lm_cam, face_mask_right=masks[1],
    )


PASSPORT_POSE = Pose(pitch=0.0, yaw=0.0, roll=0.0, distance=PASSPORT_DISTANCE)
PASSPORT_LIGHT = LightCondition(LightDir.CENTER, diffuse=0.7, ambient=0.2)


def render_passport(surface: FaceSurface, rig: CameraRig) -> StereoSample:
    """Frontal, centred, centre-lit render on a flat gray background.

    Returns the full sample; callers normally use ``.left`` and
    ``.landmarks2d_left``.
    """
    return render_stereo(surface, PASSPORT_POSE, PASSPORT_LIGHT, rig, background=None)


def with_baseline(rig: CameraRig, baseline: float) -> CameraRig:
    return replace(rig, baseline=baseline)
