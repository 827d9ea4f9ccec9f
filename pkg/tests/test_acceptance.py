"""Acceptance criteria, one test each.

Every test records a ``criterion N: PASS|FAIL`` line (shown in the terminal
summary and printed with ``-s``) before asserting.  Criteria 8-12 train the
desk-scale model zoo (3 seeds x mono, stereo with and without coordinates,
and both auxiliary variants), roughly 1.5-2 h on one core.  Point
``STEREOFACE_ACCEPT_CACHE`` at a directory to keep the dataset and the trained
models between runs; delete it after changing any code.
"""

from __future__ import annotations

import json
import math
import os
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES, ROC_REPORTS
from stereoface import tensor as T
from stereoface.evalkit import (ablation_config, breakdown_fnr, evaluate_model, offdiagonal_gap, ordering_verdict,
                                threshold_at_fpr)
from stereoface.facegen.dataset import Dataset, GenConfig, gen_dataset, identity_for, render_random, sample_pose
from stereoface.facegen.render import Background, CameraRig
from stereoface.facegen.surface import build_surface
from stereoface.gradcheck import check_gradients
from stereoface.pipeline import BBox, coord_map
from stereoface.recognet import (EmbeddingNet, Margin, MarginConfig, ModelConfig, angular_logits, aux_loss,
                                 class_loss)
from stereoface.spoofkit import (LivenessConfig, SpoofConfig, flat_project, gen_spoof_set, homography_residual,
                                 liveness_train, sample_plane, spoof_metrics)
from stereoface.tensor import Tensor
from stereoface.trainkit import TrainConfig, decoder_l1, load_model, load_mono_reference, pretrain_mono, train

pytestmark = pytest.mark.acceptance

SEEDS = (0, 1, 2)
FPR = 1e-3
DESK = GenConfig(subjects=130, samples_min=20, samples_max=20, seed=0, train_subjects=100)
VARIANTS = ("Mono", "NoCoords", "WithCoords", "AuxL1", "AuxFull")


def record(n: int, ok: bool, detail: str) -> None:
    line = f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES[n] = line
    print(line)


# ---------------------------------------------------------------- shared desk artefacts


@pytest.fixture(scope="session")
def workdir(tmp_path_factory) -> Path:
    cache = os.environ.get("STEREOFACE_ACCEPT_CACHE")
    if cache:
        Path(cache).mkdir(parents=True, exist_ok=True)
        return Path(cache)
    return tmp_path_factory.mktemp("acceptance")


@pytest.fixture(scope="session")
def desk(workdir) -> Dataset:
    root = workdir / "desk"
    if not (root / "manifest.json").exists():
        gen_dataset(DESK, root)
    return Dataset(root)


class Zoo:
    """Lazily trained, checkpointed desk models with their test-set evaluations."""

    def __init__(self, root: Path, dataset: Dataset):
        self.root = root
        self.ds = dataset
        self._cache: dict = {}

    def config(self, variant: str, seed: int) -> TrainConfig:
        base = TrainConfig(seed=seed, epochs=30)
        return base if variant == "Mono" else ablation_config(variant, base)

    def get(self, variant: str, seed: int):
        key = (variant, seed)
        if key in self._cache:
            return self._cache[key]
        out = self.root / f"{variant}_seed{seed}"
        ckpt = out / "model.ckpt"
        if not ckpt.exists():
            cfg = self.config(variant, seed)
            if variant == "Mono":
                pretrain_mono(cfg, self.ds, out)
            else:
                mono = None
                if cfg.aux is not None and cfg.aux.alpha > 0:
                    self.get("Mono", seed)
                    mono = load_mono_reference(self.root / f"Mono_seed{seed}" / "model.ckpt")
                train(cfg, self.ds, out, mono_model=mono)
        model, meta = load_model(ckpt)
        run = json.loads((out / "run.json").read_text())
        wall = sum(e["wall"] for e in run["epochs"])
        res, _ = evaluate_model(model.net, meta["mode"], self.ds, self.config(variant, seed).crop, targets=(FPR,))
        self._cache[key] = (model, res, wall)
        return self._cache[key]

    def fnr(self, variant: str, seed: int) -> float:
        return self.get(variant, seed)[1].roc.fnr_at[FPR]


@pytest.fixture(scope="session")
def zoo(workdir, desk) -> Zoo:
    return Zoo(workdir / "models", desk)


# ---------------------------------------------------------------- 1


def _reference_coords(bbox, frame, w, h):
    diag = math.hypot(w, h)
    out = np.empty((2, frame, frame))
    for r in range(frame):
        for c in range(frame):
            i = bbox.x0 + (c + 0.5) * bbox.side / frame - 0.5
            j = bbox.y0 + (r + 0.5) * bbox.side / frame - 0.5
            out[0, r, c] = (i - w / 2) / diag
            out[1, r, c] = (j - h / 2) / diag
    return out


def test_criterion_01_coordinate_map_oracle():
    rng = np.random.default_rng(101)
    cases = []
    for _ in range(1000):
        w, h = int(rng.integers(16, 2000)), int(rng.integers(16, 1200))
        side = float(rng.uniform(1, min(w, h)))
        cases.append((BBox(float(rng.uniform(0, w - side)), float(rng.uniform(0, h - side)), side), w, h))
    refs = [_reference_coords(b, 12, w, h) for b, w, h in cases]
    t0 = time.perf_counter()
    worst = max(float(np.max(np.abs(coord_map(b, 12, w, h) - r))) for (b, w, h), r in zip(cases, refs))
    elapsed = time.perf_counter() - t0
    # a one-pixel window whose only sample lands on scene pixel (960, 540)
    zero = coord_map(BBox(960.0, 540.0, 1.0), 1, 1920, 1080)
    zero_ok = bool(np.all(zero == 0.0))
    ok = worst <= 1e-12 and zero_ok and elapsed < 1.0
    record(1, ok, f"max |err| {worst:.2e} over 1000 cases, centre maps to (0,0): {zero_ok}, {elapsed:.3f} s")
    assert ok


# ---------------------------------------------------------------- 2


def _leaf(a):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


def _grad_cases(rng):
    """(name, loss builder, inputs) for one trial."""
    cases = []
    x, k, b = _leaf(rng.normal(size=(2, 2, 5, 5))), _leaf(rng.normal(size=(3, 2, 3, 3))), _leaf(rng.normal(size=3))
    wc = rng.normal(size=(2, 3, 3, 3))
    cases.append(("conv2d", lambda: T.sum(T.mul(T.conv2d(x, k, b, stride=2, pad=1), Tensor(wc))), [x, k, b]))
    raw = rng.normal(size=(3, 4, 2, 2))
    xp = _leaf(np.sign(raw) * (np.abs(raw) + 0.05))  # keep clear of the kink at 0
    ap = _leaf(rng.uniform(0.05, 0.5, 4))
    wp = rng.normal(size=xp.shape)
    cases.append(("prelu", lambda: T.sum(T.mul(T.prelu(xp, ap), Tensor(wp))), [xp, ap]))
    xl, wl, bl = _leaf(rng.normal(size=(4, 5))), _leaf(rng.normal(size=(5, 3))), _leaf(rng.normal(size=3))
    gl = rng.normal(size=(4, 3))
    cases.append(("linear", lambda: T.sum(T.mul(T.linear(xl, wl, bl), Tensor(gl))), [xl, wl, bl]))
    labels = rng.integers(0, 3, 4)
    for variant in (Margin.COSFACE, Margin.ARCFACE):
        e, w = _leaf(rng.normal(size=(4, 5))), _leaf(rng.normal(size=(3, 5)))
        g = rng.normal(size=(4, 3))
        mc = MarginConfig(variant, 4.0)
        cases.append((f"angular_logits[{variant.value}]",
                      lambda e=e, w=w, g=g, mc=mc: T.sum(T.mul(angular_logits(e, w, mc, labels), Tensor(g))), [e, w]))
    z = _leaf(rng.normal(size=(4, 3)) * 3)
    cases.append(("class_loss", lambda: class_loss(z, labels), [z]))
    mono = EmbeddingNet(ModelConfig(1, (4, 4, 4, 4), (1, 1, 1, 1), 4, 16), int(rng.integers(1 << 31)))
    mono.trained = True
    mono.freeze()
    est0 = rng.uniform(-0.4, 0.4, (1, 1, 16, 16))
    passport = est0 + rng.choice([-1, 1], est0.shape) * rng.uniform(0.01, 0.1, est0.shape)
    est = _leaf(est0)
    cases.append(("aux_loss", lambda: aux_loss(est, passport, mono, 50.0)[0], [est]))
    return cases


def test_criterion_02_gradient_suite():
    t0 = time.perf_counter()
    worst: dict[str, float] = {}
    for trial in range(10):
        for name, fn, inputs in _grad_cases(np.random.default_rng(200 + trial)):
            # small steps keep the probes from straddling PReLU kinks inside the mono reference
            worst[name] = max(worst.get(name, 0.0), check_gradients(fn, inputs, eps=1e-5))
    elapsed = time.perf_counter() - t0
    ok = max(worst.values()) <= 1e-3 and elapsed < 60
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    record(2, ok, f"worst rel. error over 10 trials: {detail}; {elapsed:.1f} s")
    assert ok


# ---------------------------------------------------------------- 3


def test_criterion_03_margin_reduction():
    rng = np.random.default_rng(300)
    worst_logit = worst_loss = 0.0
    with T.precision(np.float64):
        for _ in range(20):
            e, w = rng.normal(size=(8, 6)), rng.normal(size=(5, 6))
            y = rng.integers(0, 5, 8)
            cos_l = angular_logits(Tensor(e), Tensor(w), MarginConfig(Margin.COSFACE, 16.0, 0.0), y)
            arc_l = angular_logits(Tensor(e), Tensor(w), MarginConfig(Margin.ARCFACE, 16.0, 0.0), y)
            worst_logit = max(worst_logit, float(np.max(np.abs(cos_l.data - arc_l.data))))
            cos = (e / np.linalg.norm(e, axis=1, keepdims=True)) @ (w / np.linalg.norm(w, axis=1, keepdims=True)).T
            z = 16.0 * cos
            zmax = z.max(axis=1, keepdims=True)
            ref = np.mean(np.log(np.exp(z - zmax).sum(axis=1)) + zmax[:, 0] - z[np.arange(8), y])
            for lg in (cos_l, arc_l):
                worst_loss = max(worst_loss, abs(class_loss(lg, y).item() - ref))
    ok = worst_logit == 0.0 and worst_loss <= 1e-6
    record(3, ok, f"max |CosFace-ArcFace| logit {worst_logit:.1e}, max loss gap to plain softmax {worst_loss:.1e}")
    assert ok


# ---------------------------------------------------------------- 4


def test_criterion_04_triangulation():
    rig = CameraRig()
    rng = np.random.default_rng(400)
    errs = []
    for k in range(50):
        smp = render_random(build_surface(identity_for(400, k)), rng, rig, subject=k)
        for (xl, yl), (xr, _) in zip(smp.landmarks2d_left, smp.landmarks2d_right):
            z = smp.depth_left[int(round(yl)), int(round(xl))]
            errs.append(abs((xl - xr) - rig.focal * rig.baseline / z) if z > 0 else math.inf)
    errs = np.array(errs)
    frac = float(np.mean(errs <= 0.5))
    ok = frac >= 0.99
    record(4, ok, f"{frac:.1%} of {errs.size} landmarks within 0.5 px (depth read from the rendered map), "
                  f"median error {np.median(errs):.3f} px")
    assert ok


# ---------------------------------------------------------------- 5


def _dense_matches(smp, rig, rng, n=200):
    """Left/right pixel pairs of face (or print) pixels, matched through the ground-truth depth."""
    rows, cols = np.nonzero(smp.depth_left > 0)
    pick = rng.choice(len(rows), size=min(n, len(rows)), replace=False)
    z = smp.depth_left[rows[pick], cols[pick]]
    left = np.column_stack([cols[pick], rows[pick]]).astype(np.float64)
    right = left - np.column_stack([rig.focal * rig.baseline / z, np.zeros(len(z))])
    return left, right


def test_criterion_05_flatness():
    rig = CameraRig()
    rng = np.random.default_rng(500)
    genuine, flat, dist = [], [], []
    for k in range(50):
        smp = render_random(build_surface(identity_for(500, k)), rng, rig, subject=k)
        genuine.append(homography_residual(*_dense_matches(smp, rig, rng)))
        dist.append(smp.pose.distance)
        for _ in range(25):
            plane = sample_plane(rng, smp.pose.distance, smp.landmarks2d_left, rig)
            try:
                attack = flat_project(smp.left, smp.landmarks2d_left, plane, rig, Background.random(rng))
                break
            except Exception:  # print left the frame; redraw the plane
                continue
        flat.append(homography_residual(*_dense_matches(attack, rig, rng)))
    genuine, flat, dist = np.array(genuine), np.array(flat), np.array(dist)
    flat_ok = bool(np.all(flat <= 0.5))
    gen_ok = bool(np.all(genuine > 1.0))
    ok = flat_ok and gen_ok
    near = genuine[dist < 0.4]
    record(5, ok, f"flat max residual {flat.max():.2e} px (<=0.5: {flat_ok}); genuine residual min "
                  f"{genuine.min():.2f} / median {np.median(genuine):.2f} px, {np.mean(genuine > 1):.0%} exceed 1 px "
                  f"({np.mean(near > 1):.0%} closer than 0.4 m); smallest genuine vs largest flat gap "
                  f"{genuine.min() - flat.max():.2f} px")
    assert ok


# ---------------------------------------------------------------- 6


def _brute_threshold(scores, target):
    """Exhaustive search over every candidate cut (each score and the next float above it)."""
    s = np.sort(np.asarray(scores, dtype=np.float64))
    cands = np.unique(np.concatenate([s, np.nextafter(s, np.inf)]))
    accepted = s.size - np.searchsorted(s, cands, side="left")  # count of score >= t
    return float(cands[accepted / s.size <= target].min())


def test_criterion_06_threshold_oracle_and_monotone_reports(zoo):
    rng = np.random.default_rng(600)
    mismatches = 0
    for k in range(100):
        n = int(rng.integers(1, 10_001))
        s = np.round(rng.uniform(-1, 1, n), int(rng.integers(1, 5)))  # coarse rounding forces ties
        target = float(rng.choice([1.0, 0.5, 0.1, 1e-2, 1e-3, 1e-4]))
        target = max(target, 1.0 / n)
        mismatches += threshold_at_fpr(s, target) != _brute_threshold(s, target)
    # make sure the zoo's reports exist before counting them
    for seed in SEEDS:
        for v in VARIANTS:
            zoo.get(v, seed)
    bad = sum(not r.check_monotone() for r in ROC_REPORTS)
    ok = mismatches == 0 and bad == 0 and len(ROC_REPORTS) > 0
    record(6, ok, f"{mismatches}/100 threshold mismatches vs brute force; "
                  f"{bad} non-monotone of {len(ROC_REPORTS)} ROC reports built this session")
    assert ok


# ---------------------------------------------------------------- 7


def test_criterion_07_core_method_equivalence(desk, tmp_path):
    from stereoface.checkpoint import load_checkpoint
    from stereoface.recognet import AuxConfig

    base = TrainConfig(seed=7, epochs=1, max_steps=10)
    ra = train(base, desk, tmp_path / "core")[1]
    rb = train(replace(base, aux=AuxConfig(alpha=50.0, beta=0.0)), desk, tmp_path / "beta0")[1]
    ta, _ = load_checkpoint(tmp_path / "core" / "model.ckpt")
    tb, _ = load_checkpoint(tmp_path / "beta0" / "model.ckpt")
    same = ta.keys() == tb.keys() and all(ta[k].tobytes() == tb[k].tobytes() for k in ta)
    ok = same and ra.steps == rb.steps == 10
    record(7, ok, f"{len(ta)} tensors bit-identical after {ra.steps} steps: {same}")
    assert ok


# ---------------------------------------------------------------- 8


def test_criterion_08_stereo_beats_mono(zoo):
    rows, walls = [], []
    for seed in SEEDS:
        m, s = zoo.fnr("Mono", seed), zoo.fnr("WithCoords", seed)
        rows.append((seed, s, m))
        walls += [zoo.get("Mono", seed)[2], zoo.get("WithCoords", seed)[2]]
    wins = all(s < m for _, s, m in rows)
    budget = max(walls) <= 1800
    ok = wins and budget
    detail = "; ".join(f"seed {k}: stereo {s:.3f} vs mono {m:.3f}" for k, s, m in rows)
    record(8, ok, f"FNR@1e-3 {detail}; slowest model {max(walls) / 60:.1f} min")
    assert ok


# ---------------------------------------------------------------- 9


def test_criterion_09_ablation_order(zoo):
    med = {v: float(np.median([zoo.fnr(v, s) for s in SEEDS])) for v in ("NoCoords", "WithCoords", "AuxL1", "AuxFull")}
    verdict = ordering_verdict(med["NoCoords"], med["WithCoords"], med["AuxFull"])
    ok = verdict in ("pass", "warn")
    detail = ", ".join(f"{k} {v:.3f}" for k, v in med.items())
    record(9, ok, f"median FNR@1e-3 {detail}; ordering {verdict}" + (" (soft warning)" if verdict == "warn" else ""))
    assert ok


# ---------------------------------------------------------------- 10


def _yaw_gap(zoo, variant, seed):
    _, res, _ = zoo.get(variant, seed)
    ya, yb = res.attrs("yaw")
    bd = breakdown_fnr(ya, yb, res.genuine_scores, "yaw", res.roc.threshold_at[FPR])
    return offdiagonal_gap(bd, far=30.0, near=5.0)


def test_criterion_10_yaw_breakdown(zoo):
    mono = [_yaw_gap(zoo, "Mono", s) for s in SEEDS]
    stereo = [_yaw_gap(zoo, "WithCoords", s) for s in SEEDS]
    m, s = float(np.median(mono)), float(np.median(stereo))
    ok = m > s
    record(10, ok, f"median far-minus-near yaw FNR gap: mono {m:.3f} vs stereo {s:.3f} "
                   f"(per seed mono {np.round(mono, 3).tolist()}, stereo {np.round(stereo, 3).tolist()})")
    assert ok


# ---------------------------------------------------------------- 11


def test_criterion_11_liveness(desk, workdir):
    t0 = time.perf_counter()
    attacks_root = workdir / "attacks"
    if not (attacks_root / "manifest.json").exists():
        gen_spoof_set(desk, attacks_root, SpoofConfig(seed=0))
    attacks = Dataset(attacks_root)
    model, _ = liveness_train(LivenessConfig(seed=0), desk, attacks)
    rep = spoof_metrics(model, desk, attacks, split="test")
    elapsed = time.perf_counter() - t0
    det, acc = rep.rate("flat"), rep.rate("real")
    ok = det >= 0.9 and acc >= 0.9 and elapsed <= 900
    record(11, ok, f"held-out attack detection {det:.1%}, real acceptance {acc:.1%} "
                   f"(full-scale reference rates 99.8/96.2/97.2% are not reproducible at desk scale); {elapsed / 60:.1f} min")
    assert ok


# ---------------------------------------------------------------- 12


def test_criterion_12_decoder_beats_gray(zoo, desk):
    gains, parts = [], []
    for seed in SEEDS:
        rep = decoder_l1(zoo.get("AuxFull", seed)[0], desk, split="test")
        gain = 1.0 - rep["decoder"] / rep["best_constant"]
        gains.append(gain)
        parts.append(f"seed {seed}: L1 {rep['decoder']:.4f} vs constant {rep['best_constant']:.4f} "
                     f"(mid-gray {rep['mid_gray']:.4f})")
    l1_only = decoder_l1(zoo.get("AuxL1", 0)[0], desk, split="test")
    ok = min(gains) >= 0.2
    record(12, ok, f"AuxFull held-out gain over best constant gray {min(gains):.1%} worst of 3; "
                   + "; ".join(parts) + f"; AuxL1 seed 0 L1 {l1_only['decoder']:.4f}")
    assert ok
