"""Procedural face surfaces.

A face is a heightfield over a square patch in face-local metres: an
ellipsoidal cap plus Gaussian bumps (nose, brows, eye sockets, cheeks,
lips, chin).  ``IdentityParams.geo`` moves and scales those bumps and the
overall face size; ``IdentityParams.tex`` drives the albedo.  Height is
protrusion toward the camera, so the local 3-D point of ``(x, y)`` is
``(x, y, -h(x, y))`` with y pointing down.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

N_GEO = 16
N_TEX = 8
GRID_HALF = 0.12  # half side of the heightfield patch, metres
LANDMARK_NAMES = ("left_eye", "right_eye", "nose_tip", "mouth_left", "mouth_right")

# template geometry, metres
FACE_HALF_W = 0.075
FACE_HALF_H = 0.100
CAP_DEPTH = 0.055
NOSE_AMP = 0.022
NOSE_AMP_RANGE = 0.008  # nose amplitude = NOSE_AMP + NOSE_AMP_RANGE * geo[0]
SIZE_RANGE = 0.12
GEO_GAIN = 2.0  # scales every identity-dependent geometric deviation
TEX_GAIN = 1.0  # scales texture deviations about mid-range


@dataclass(frozen=True)
class IdentityParams:
    geo: tuple[float, ...]
    tex: tuple[float, ...]
    seed: int = 0

    def __post_init__(self):
        if len(self.geo) != N_GEO or len(self.tex) != N_TEX:
            raise ValueError(f"need {N_GEO} geo and {N_TEX} tex components")
        if any(not -1.0 <= g <= 1.0 for g in self.geo):
            raise ValueError("geo components must lie in [-1, 1]")
        if any(not 0.0 <= t <= 1.0 for t in self.tex):
            raise ValueError("tex components must lie in [0, 1]")

    @classmethod
    def template(cls) -> "IdentityParams":
        return cls(geo=(0.0,) * N_GEO, tex=(0.5,) * N_TEX, seed=0)

    def to_json(self) -> dict:
        return {"geo": list(self.geo), "tex": list(self.tex), "seed": self.seed}

    @classmethod
    def from_json(cls, d: dict) -> "IdentityParams":
        return cls(geo=tuple(d["geo"]), tex=tuple(d["tex"]), seed=int(d.get("seed", 0)))


def sample_identity(rng: np.random.Generator, seed: int = 0) -> IdentityParams:
    geo = rng.uniform(-1.0, 1.0, N_GEO)
    tex = rng.uniform(0.0, 1.0, N_TEX)
    return IdentityParams(geo=tuple(float(g) for g in geo), tex=tuple(float(t) for t in tex), seed=seed)


@dataclass(frozen=True)
class _Bump:
    amp: float
    cx: float
    cy: float
    sx: float
    sy: float


@dataclass
class FaceSurface:
    """Heightfield face with analytic evaluators for resampling at any density."""

    grid: np.ndarray          # G x G heights, metres (0 outside the face)
    albedo: np.ndarray        # G x G in [0, 1]
    mask: np.ndarray          # G x G bool, inside the face outline
    landmarks3d: np.ndarray   # 5 x 3 face-local points
    half_w: float
    half_h: float
    cap_depth: float
    bumps: tuple[_Bump, ...]
    patches: tuple[_Bump, ...]
    tone: float
    features: dict = field(default_factory=dict)

    @property
    def axis(self) -> np.ndarray:
        g = self.grid.shape[0]
        return np.linspace(-GRID_HALF, GRID_HALF, g)

    def inside(self, x, y):
        return (x / self.half_w) ** 2 + (y / self.half_h) ** 2 <= 1.0

    def height(self, x, y):
        return self.height_and_grad(x, y)[0]

    def height_and_grad(self, x, y):
        """Height and its x/y partial derivatives at face-local points."""
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        u, v = x / self.half_w, y / self.half_h
        q = np.clip(1.0 - u * u - v * v, 0.0, None)
        root = np.sqrt(q)
        h = self.cap_depth * root
        # slope capped near the rim where the cap derivative diverges
        safe = np.maximum(root, 0.05)
        hx = np.where(q > 0, -self.cap_depth * u / (self.half_w * safe), 0.0)
        hy = np.where(q > 0, -self.cap_depth * v / (self.half_h * safe), 0.0)
        for b in self.bumps:
            dx, dy = (x - b.cx) / b.sx, (y - b.cy) / b.sy
            e = b.amp * np.exp(-0.5 * (dx * dx + dy * dy))
            h = h + e
            hx = hx - e * dx / b.sx
            hy = hy - e * dy / b.sy
        out = self.inside(x, y)
        return np.where(out, h, 0.0), np.where(out, hx, 0.0), np.where(out, hy, 0.0)

    def albedo_at(self, x, y):
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        a = np.full(np.broadcast(x, y).shape, self.tone)
        for p in self.patches:
            a = a + p.amp * np.exp(-0.5 * (((x - p.cx) / p.sx) ** 2 + ((y - p.cy) / p.sy) ** 2))
        return np.clip(a, 0.0, 1.0)


def _scaled(params: IdentityParams):
    g = GEO_GAIN * np.asarray(params.geo, dtype=np.float64)
    size = 1.0 + SIZE_RANGE * g[9]
    aspect = 1.0 + 0.08 * g[10]
    sx, sy = size * aspect, size / aspect
    return g, size, sx, sy


def build_surface(params: IdentityParams, grid_size: int = 96) -> FaceSurface:
    """Deterministically build the heightfield, albedo and landmarks of one identity."""
    g, size, sx, sy = _scaled(params)
    t = 0.5 + TEX_GAIN * (np.asarray(params.tex, dtype=np.float64) - 0.5)

    eye_x = 0.031 * (1 + 0.12 * g[12]) * sx
    eye_y = -0.022 * sy
    nose_y = (0.010 + 0.004 * g[2]) * sy
    mouth_x = 0.022 * (1 + 0.15 * g[14]) * sx
    mouth_y = (0.045 + 0.006 * g[15]) * sy
    brow_y = (-0.037 + 0.005 * g[4]) * sy
    cheek_x = (0.040 + 0.006 * g[6]) * sx

    bumps = (
        _Bump((NOSE_AMP + NOSE_AMP_RANGE * g[0]) * size, 0.0, nose_y,
              0.010 * (1 + 0.25 * g[1]) * sx, 0.016 * (1 + 0.2 * g[2]) * sy),
        _Bump((0.008 + 0.004 * g[3]) * size, -0.030 * sx, brow_y, 0.016 * sx, 0.007 * sy),
        _Bump((0.008 + 0.004 * g[3]) * size, 0.030 * sx, brow_y, 0.016 * sx, 0.007 * sy),
        _Bump(-(0.008 + 0.004 * g[13]) * size, -eye_x, eye_y, 0.010 * sx, 0.008 * sy),
        _Bump(-(0.008 + 0.004 * g[13]) * size, eye_x, eye_y, 0.010 * sx, 0.008 * sy),
        _Bump((0.006 + 0.005 * g[5]) * size, -cheek_x, 0.016 * sy, 0.017 * sx, 0.016 * sy),
        _Bump((0.006 + 0.005 * g[5]) * size, cheek_x, 0.016 * sy, 0.017 * sx, 0.016 * sy),
        _Bump(0.004 * size, 0.0, mouth_y, mouth_x * 0.8, 0.006 * sy),
        _Bump((0.008 + 0.006 * g[7]) * size, 0.0, (0.076 + 0.008 * g[8]) * sy, 0.016 * sx, 0.012 * sy),
    )
    patches = (
        # brows, lips and eyes darken; the remaining patches are identity texture
        _Bump(-(0.10 + 0.25 * t[1]), -0.030 * sx, brow_y - 0.004 * sy, 0.014 * sx, 0.004 * sy),
        _Bump(-(0.10 + 0.25 * t[1]), 0.030 * sx, brow_y - 0.004 * sy, 0.014 * sx, 0.004 * sy),
        _Bump(-(0.05 + 0.20 * t[2]), 0.0, mouth_y, mouth_x * 0.8, 0.004 * sy),
        _Bump(-0.25, -eye_x, eye_y, 0.006 * sx, 0.0035 * sy),
        _Bump(-0.25, eye_x, eye_y, 0.006 * sx, 0.0035 * sy),
        _Bump((t[7] - 0.5) * 0.24, (t[3] - 0.5) * 0.10, (t[4] - 0.5) * 0.14, 0.02 + 0.02 * t[5], 0.02 + 0.02 * t[6]),
        _Bump((t[5] - 0.5) * 0.20, (t[6] - 0.5) * -0.10, (t[3] - 0.5) * -0.12, 0.015 + 0.02 * t[4], 0.025),
        _Bump((t[6] - 0.5) * 0.16, 0.0, (t[7] - 0.5) * 0.08, 0.05, 0.02 + 0.02 * t[3]),
    )
    half_w, half_h = FACE_HALF_W * sx, FACE_HALF_H * sy
    surf = FaceSurface(
        grid=np.empty(0), albedo=np.empty(0), mask=np.empty(0), landmarks3d=np.empty(0),
        half_w=half_w, half_h=half_h, cap_depth=CAP_DEPTH * (1 + 0.2 * g[11]) * size,
        bumps=bumps, patches=patches, tone=0.45 + 0.35 * t[0],
        features={"size": size},
    )
    axis = np.linspace(-GRID_HALF, GRID_HALF, grid_size)
    xx, yy = np.meshgrid(axis, axis)
    surf.grid = surf.height(xx, yy)
    surf.mask = surf.inside(xx, yy)
    surf.albedo = np.where(surf.mask, surf.albedo_at(xx, yy), 0.0)
    lm2 = np.array([[-eye_x, eye_y], [eye_x, eye_y], [0.0, nose_y], [-mouth_x, mouth_y], [mouth_x, mouth_y]])
    surf.landmarks3d = np.column_stack([lm2, -surf.height(lm2[:, 0], lm2[:, 1])])
    return surf


def nose_tip_height(surface: FaceSurface) -> float:
    return float(-surface.landmarks3d[2, 2])
