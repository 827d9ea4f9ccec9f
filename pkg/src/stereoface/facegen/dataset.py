"""Synthetic stereo face datasets on disk.

Directory layout::

    manifest.json
    passports/s0007.pgm
    images/s0007/012_L.pgm  012_R.pgm  012_D.dpth

``manifest.json`` (UTF-8, keys sorted) holds ``format``, ``seed``,
``rig`` {focal, baseline, scene_w, scene_h}, ``split`` {train, test}
subject ids, ``subjects`` (id, split, identity params, passport path and
landmarks) and ``samples``.  Each sample records id, subject, index,
left/right/depth_left paths, bbox_left/bbox_right as [x0, y0, x1, y1]
(inclusive), landmarks_left/landmarks_right as five [x, y] pixel
coordinates, pose {pitch, yaw, roll, distance, offset_x, offset_y}
(degrees, metres), light {direction L|C|R, diffuse, ambient} and
``attack`` (false for genuine renders).
"""

from __future__ import annotations

import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

from ..errors import DataError
from . import io
from .render import (Background, CameraRig, FaceOutOfFrame, LightCondition, LightDir, Pose,
                     StereoSample, render_passport, render_stereo)
from .surface import FaceSurface, IdentityParams, build_surface, sample_identity

FORMAT = "stereoface-dataset/1"
MAX_RETRIES = 25

_TAG_IDENTITY, _TAG_SAMPLE, _TAG_SPLIT, _TAG_COUNT = 1, 2, 3, 4


def stream(seed: int, *key: int) -> np.random.Generator:
    """Independent RNG stream for a (seed, key...) tuple."""
    return np.random.default_rng(np.random.SeedSequence([int(seed) & 0xFFFFFFFF, *[int(k) for k in key]]))


@dataclass
class GenConfig:
    subjects: int = 10
    samples_min: int = 20
    samples_max: int = 30
    seed: int = 0
    rig: CameraRig = field(default_factory=CameraRig)
    train_fraction: float = 0.75
    train_subjects: int | None = None
    grid_size: int = 96
    workers: int = 1

    def n_train(self) -> int:
        if self.train_subjects is not None:
            return int(self.train_subjects)
        return int(round(self.subjects * self.train_fraction))


def sample_pose(rng: np.random.Generator, rig: CameraRig) -> Pose:
    distance = float(rng.uniform(0.25, 1.0))
    half_x = rig.cx * distance / rig.focal
    half_y = rig.cy * distance / rig.focal
    ox = float(rng.uniform(-1, 1) * max(0.0, 0.75 * half_x - 0.07))
    oy = float(rng.uniform(-1, 1) * max(0.0, 0.75 * half_y - 0.05))
    return Pose(pitch=float(rng.uniform(-25, 25)), yaw=float(rng.uniform(-25, 25)),
                roll=float(rng.uniform(-8, 8)), distance=distance, offset_x=ox, offset_y=oy)


def sample_light(rng: np.random.Generator) -> LightCondition:
    direction = [LightDir.LEFT, LightDir.CENTER, LightDir.RIGHT][int(rng.integers(0, 3))]
    return LightCondition(direction, diffuse=float(rng.uniform(0.5, 0.9)), ambient=float(rng.uniform(0.1, 0.3)))


def render_random(surface: FaceSurface, rng: np.random.Generator, rig: CameraRig,
                  subject: int = -1) -> StereoSample:
    """Random pose, light and background; redraws the pose when the face leaves the frame."""
    light = sample_light(rng)
    background = Background.random(rng)
    for _ in range(MAX_RETRIES):
        pose = sample_pose(rng, rig)
        try:
            return render_stereo(surface, pose, light, rig, background, subject=subject)
        except FaceOutOfFrame:
            continue
    raise DataError(f"subject {subject}: face left the frame {MAX_RETRIES} times in a row")


def identity_for(seed: int, subject: int) -> IdentityParams:
    return sample_identity(stream(seed, _TAG_IDENTITY, subject), seed=seed)


def sample_count(cfg: GenConfig, subject: int) -> int:
    return int(stream(cfg.seed, _TAG_COUNT, subject).integers(cfg.samples_min, cfg.samples_max + 1))


def split_subjects(cfg: GenConfig) -> tuple[list[int], list[int]]:
    order = stream(cfg.seed, _TAG_SPLIT).permutation(cfg.subjects)
    n_train = cfg.n_train()
    return sorted(int(s) for s in order[:n_train]), sorted(int(s) for s in order[n_train:])


def _lm(a: np.ndarray) -> list:
    return [[round(float(x), 4), round(float(y), 4)] for x, y in a]


def _generate_subject(args) -> tuple[dict, list[dict]]:
    cfg, subject, split, root = args
    root = Path(root)
    params = identity_for(cfg.seed, subject)
    surface = build_surface(params, cfg.grid_size)
    sub_dir = root / "images" / f"s{subject:04d}"
    sub_dir.mkdir(parents=True, exist_ok=True)
    passport = render_passport(surface, cfg.rig)
    ppath = f"passports/s{subject:04d}.pgm"
    io.write_pgm(root / ppath, passport.left)
    subj = {"id": subject, "split": split, "identity": params.to_json(), "passport": ppath,
            "passport_landmarks": _lm(passport.landmarks2d_left)}
    samples = []
    for idx in range(sample_count(cfg, subject)):
        smp = render_random(surface, stream(cfg.seed, _TAG_SAMPLE, subject, idx), cfg.rig, subject)
        stem = f"images/s{subject:04d}/{idx:03d}"
        io.write_pgm(root / f"{stem}_L.pgm", smp.left)
        io.write_pgm(root / f"{stem}_R.pgm", smp.right)
        io.write_depth(root / f"{stem}_D.dpth", smp.depth_left)
        samples.append(sample_entry(smp, f"s{subject:04d}_{idx:03d}", idx, stem))
    return subj, samples


def sample_entry(smp: StereoSample, sid: str, idx: int, stem: str, attack: bool = False) -> dict:
    return {
        "id": sid, "subject": int(smp.subject), "index": idx,
        "left": f"{stem}_L.pgm", "right": f"{stem}_R.pgm", "depth_left": f"{stem}_D.dpth",
        "bbox_left": list(map(int, smp.bbox_left)), "bbox_right": list(map(int, smp.bbox_right)),
        "landmarks_left": _lm(smp.landmarks2d_left), "landmarks_right": _lm(smp.landmarks2d_right),
        "pose": {k: round(v, 6) for k, v in smp.pose.to_json().items()},
        "light": {"direction": smp.light.direction.value, "diffuse": round(smp.light.diffuse, 6),
                  "ambient": round(smp.light.ambient, 6)},
        "attack": bool(attack),
    }


def write_manifest(root, manifest: dict) -> Path:
    path = Path(root) / "manifest.json"
    path.write_text(json.dumps(manifest, sort_keys=True, indent=1) + "\n", encoding="utf-8")
    return path


def gen_dataset(cfg: GenConfig, out) -> Path:
    """Render ``cfg.subjects`` identities into ``out`` and write the manifest."""
    if cfg.subjects < 2:
        raise DataError("need at least 2 subjects")
    if not 1 <= cfg.samples_min <= cfg.samples_max:
        raise DataError("invalid samples-per-subject range")
    n_train = cfg.n_train()
    if not 0 < n_train < cfg.subjects:
        raise DataError(f"split leaves {n_train} of {cfg.subjects} subjects for training")
    root = Path(out)
    try:
        root.mkdir(parents=True, exist_ok=True)
        probe = root / ".write_probe"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as exc:
        raise DataError(f"output directory {root} is not writable: {exc}") from exc
    (root / "passports").mkdir(exist_ok=True)

    train, test = split_subjects(cfg)
    which = {s: "train" for s in train} | {s: "test" for s in test}
    jobs = [(cfg, s, which[s], str(root)) for s in range(cfg.subjects)]
    if cfg.workers > 1:
        with ProcessPoolExecutor(cfg.workers) as pool:
            results = list(pool.map(_generate_subject, jobs))
    else:
        results = [_generate_subject(j) for j in jobs]

    manifest = {
        "format": FORMAT, "seed": cfg.seed, "rig": asdict(cfg.rig),
        "split": {"train": train, "test": test},
        "subjects": [r[0] for r in results],
        "samples": [s for r in results for s in r[1]],
    }
    return write_manifest(root, manifest)


class Dataset:
    """Read access to a generated dataset directory."""

    def __init__(self, root):
        self.root = Path(root)
        path = self.root / "manifest.json"
        try:
            self.manifest = json.loads(path.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise DataError(f"cannot read dataset manifest {path}: {exc}") from exc
        for key in ("rig", "subjects", "samples", "split"):
            if key not in self.manifest:
                raise DataError(f"{path}: manifest lacks '{key}'")
        self.rig = CameraRig(**self.manifest["rig"])
        self._subjects = {s["id"]: s for s in self.manifest["subjects"]}

    def __repr__(self):
        return f"Dataset({str(self.root)!r}, {len(self.manifest['samples'])} samples)"

    def subjects(self, split: str | None = None) -> list[int]:
        if split is None:
            return sorted(self._subjects)
        return list(self.manifest["split"][split])

    def samples(self, split: str | None = None, attack: bool | None = None) -> list[dict]:
        keep = None if split is None else set(self.subjects(split))
        return [s for s in self.manifest["samples"]
                if (keep is None or s["subject"] in keep) and (attack is None or s.get("attack", False) == attack)]

    def subject(self, sid: int) -> dict:
        return self._subjects[sid]

    def image(self, rel: str) -> np.ndarray:
        return _cached_image(str(self.root / rel), _mtime(self.root / rel))

    def depth(self, rel: str) -> np.ndarray:
        return io.read_depth(self.root / rel)

    def passport(self, sid: int) -> np.ndarray:
        return self.image(self._subjects[sid]["passport"])


def _mtime(path: Path) -> float:
    try:
        return os.stat(path).st_mtime
    except OSError as exc:
        raise DataError(f"missing dataset file {path}") from exc


@lru_cache(maxsize=8192)
def _cached_image(path: str, mtime: float) -> np.ndarray:
    img = io.read_pgm(path)
    img.setflags(write=False)
    return img
