import json

import numpy as np
import pytest

from stereoface.errors import DataError
from stereoface.facegen import io
from stereoface.facegen.dataset import Dataset, GenConfig, gen_dataset, sample_pose, split_subjects
from stereoface.facegen.render import (CameraRig, LightCondition, LightDir, Pose, _NOSE_LEVEL, render_passport,
                                       render_stereo, with_baseline)
from stereoface.facegen.surface import (NOSE_AMP_RANGE, IdentityParams, build_surface, nose_tip_height,
                                        sample_identity)

RIG = CameraRig()


def _surface(seed):
    rng = np.random.default_rng(seed)
    return build_surface(sample_identity(rng, seed))


def _nose_at(surface, z):
    """Pose distance that puts the frontal nose tip at depth ``z``."""
    return z - _NOSE_LEVEL + nose_tip_height(surface)


class TestIdentity:
    def test_deterministic(self):
        a = sample_identity(np.random.default_rng(42))
        b = sample_identity(np.random.default_rng(42))
        assert a == b

    def test_ranges(self):
        rng = np.random.default_rng(0)
        draws = [sample_identity(rng) for _ in range(1000)]
        geo = np.array([d.geo for d in draws])
        tex = np.array([d.tex for d in draws])
        assert geo.min() >= -1 and geo.max() <= 1 and tex.min() >= 0 and tex.max() <= 1

    def test_validation(self):
        with pytest.raises(ValueError):
            IdentityParams(geo=(2.0,) + (0.0,) * 15, tex=(0.5,) * 8)

    def test_json_roundtrip(self):
        p = sample_identity(np.random.default_rng(3), seed=3)
        assert IdentityParams.from_json(json.loads(json.dumps(p.to_json()))) == p

    def test_distinct_identities_render_differently(self):
        imgs, masks = [], []
        for seed in (1, 2):
            smp = render_passport(_surface(seed), RIG)
            imgs.append(smp.left)
            masks.append(smp.depth_left > 0)
        face = masks[0] | masks[1]
        frac = np.mean(np.abs(imgs[0] - imgs[1])[face] > 0.05)
        assert frac >= 0.05


class TestSurface:
    def test_template_zero_case(self):
        a = build_surface(IdentityParams.template())
        b = build_surface(IdentityParams.template())
        np.testing.assert_array_equal(a.landmarks3d, b.landmarks3d)
        assert a.landmarks3d[0, 0] == -a.landmarks3d[1, 0]  # symmetric eyes
        assert a.landmarks3d[2, 0] == 0.0

    def test_bit_identical(self):
        p = sample_identity(np.random.default_rng(5))
        a, b = build_surface(p), build_surface(p)
        assert a.grid.tobytes() == b.grid.tobytes() and a.albedo.tobytes() == b.albedo.tobytes()

    def test_nose_amplitude_range(self):
        geo = [0.0] * 16
        geo[0] = 1.0
        hi = build_surface(IdentityParams(tuple(geo), (0.5,) * 8))
        geo[0] = -1.0
        lo = build_surface(IdentityParams(tuple(geo), (0.5,) * 8))
        from stereoface.facegen import surface as S

        expected = 2 * NOSE_AMP_RANGE * S.GEO_GAIN
        assert nose_tip_height(hi) - nose_tip_height(lo) == pytest.approx(expected, rel=1e-9)

    def test_nose_is_frontmost(self):
        s = _surface(7)
        smp = render_stereo(s, Pose(distance=0.5), LightCondition(), RIG)
        valid = smp.depth_left > 0
        assert smp.landmarks3d_cam[2, 2] <= smp.depth_left[valid].min() + 1e-3

    def test_finite(self):
        s = _surface(8)
        assert np.all(np.isfinite(s.grid)) and s.albedo.min() >= 0 and s.albedo.max() <= 1


class TestRender:
    def test_disparity_oracle(self):
        s = build_surface(IdentityParams.template())
        rig = CameraRig(focal=100.0)
        smp = render_stereo(s, Pose(distance=_nose_at(s, 0.5)), LightCondition(), rig)
        assert smp.landmarks3d_cam[2, 0] == 0.0 and smp.landmarks3d_cam[2, 2] == pytest.approx(0.5, abs=1e-12)
        disp = smp.landmarks2d_left[2, 0] - smp.landmarks2d_right[2, 0]
        assert disp == pytest.approx(6.0, abs=1e-9)

    def test_zero_baseline(self):
        s = _surface(3)
        rig = with_baseline(RIG, 0.0)
        smp = render_stereo(s, Pose(yaw=10, distance=0.6), LightCondition(LightDir.LEFT), rig,
                            np.random.default_rng(0))
        np.testing.assert_array_equal(smp.left, smp.right)

    def test_center_light_mirror_symmetry(self):
        s = build_surface(IdentityParams.template())
        rig = CameraRig(scene_w=191)  # odd width puts the principal point on a pixel centre
        smp = render_stereo(s, Pose(distance=0.5), LightCondition(LightDir.CENTER), rig)
        face = smp.depth_left > 0
        mirrored = smp.left[:, ::-1]
        both = face & face[:, ::-1]
        assert np.mean(np.abs(smp.left - mirrored)[both]) < 0.02

    def test_light_swap_mirrors_shading(self):
        s = build_surface(IdentityParams.template())
        rig = CameraRig(scene_w=191)
        a = render_stereo(s, Pose(distance=0.5), LightCondition(LightDir.LEFT), rig)
        b = render_stereo(s, Pose(distance=0.5), LightCondition(LightDir.RIGHT), rig)
        both = (a.depth_left > 0) & (b.depth_left > 0)[:, ::-1]
        assert np.mean(np.abs(a.left - b.left[:, ::-1])[both]) < 0.02

    def test_passport_matches_render(self):
        s = _surface(11)
        p = render_passport(s, RIG)
        r = render_stereo(s, Pose(distance=0.5), LightCondition(LightDir.CENTER, 0.7, 0.2), RIG,
                          np.random.default_rng(4))
        face = p.depth_left > 0
        assert np.max(np.abs(p.left - r.left)[face]) < 1e-6

    def test_triangulation(self):
        rng = np.random.default_rng(21)
        ok = total = 0
        for k in range(5):
            s = _surface(k)
            smp = render_stereo(s, sample_pose(rng, RIG), LightCondition(), RIG)
            disp = smp.landmarks2d_left[:, 0] - smp.landmarks2d_right[:, 0]
            expected = RIG.focal * RIG.baseline / smp.landmarks3d_cam[:, 2]
            ok += int(np.sum(np.abs(disp - expected) <= 0.5))
            total += len(disp)
        assert ok / total >= 0.99

    def test_depth_positivity_and_background_flag(self):
        s = _surface(4)
        smp = render_stereo(s, Pose(pitch=-10, yaw=15, distance=0.8), LightCondition(), RIG,
                            np.random.default_rng(1))
        face = smp.depth_left > 0
        assert 0.2 < smp.depth_left[face].min() and smp.depth_left[face].max() < 1.2
        assert np.all(smp.depth_left[~face] == 0)

    def test_bbox_contains_landmarks(self):
        smp = render_stereo(_surface(6), Pose(yaw=-20, distance=0.4), LightCondition(), RIG)
        for bb, lm in ((smp.bbox_left, smp.landmarks2d_left), (smp.bbox_right, smp.landmarks2d_right)):
            x0, y0, x1, y1 = bb
            assert np.all((lm[:, 0] >= x0) & (lm[:, 0] <= x1) & (lm[:, 1] >= y0) & (lm[:, 1] <= y1))

    def test_non_genuine_pose_rejected(self):
        with pytest.raises(ValueError):
            render_stereo(_surface(1), Pose(yaw=40), LightCondition(), RIG)

    def test_light_validation(self):
        with pytest.raises(ValueError):
            LightCondition(LightDir.LEFT, diffuse=1.0, ambient=0.5)


class TestIO:
    def test_pgm_roundtrip(self, tmp_path, rng):
        img = rng.uniform(size=(7, 9))
        io.write_pgm(tmp_path / "a.pgm", img)
        raw = (tmp_path / "a.pgm").read_bytes()
        assert raw.startswith(b"P5")
        back = io.read_pgm(tmp_path / "a.pgm")
        assert back.dtype == np.uint8 and back.shape == (7, 9)
        np.testing.assert_array_equal(back, np.round(img * 255).astype(np.uint8))

    def test_depth_roundtrip(self, tmp_path, rng):
        d = rng.uniform(0.2, 1.2, size=(5, 6)).astype(np.float32)
        io.write_depth(tmp_path / "d.dpth", d)
        raw = (tmp_path / "d.dpth").read_bytes()
        assert raw[:4] == b"DPTH" and len(raw) == 16 + 4 * d.size
        assert int.from_bytes(raw[4:8], "little") == 6 and int.from_bytes(raw[8:12], "little") == 5
        np.testing.assert_array_equal(io.read_depth(tmp_path / "d.dpth"), d)

    def test_bad_depth_magic(self, tmp_path):
        (tmp_path / "x.dpth").write_bytes(b"NOPE" + b"\0" * 12)
        with pytest.raises(DataError):
            io.read_depth(tmp_path / "x.dpth")


class TestDataset:
    def test_counts_and_split(self, tiny_dataset):
        ds = Dataset(tiny_dataset)
        m = ds.manifest
        assert len(m["subjects"]) == 8
        per = {}
        for e in ds.samples():
            per[e["subject"]] = per.get(e["subject"], 0) + 1
        assert all(3 <= n <= 4 for n in per.values())
        train, test = set(ds.subjects("train")), set(ds.subjects("test"))
        assert train and test and not train & test
        for s in m["subjects"]:
            assert (tiny_dataset / s["passport"]).is_file()

    def test_pose_bounds(self, tiny_dataset):
        for e in Dataset(tiny_dataset).samples():
            p = e["pose"]
            assert abs(p["pitch"]) <= 25 and abs(p["yaw"]) <= 25 and 0.25 <= p["distance"] <= 1.0

    def test_manifest_is_byte_identical_on_rerun(self, tmp_path):
        cfg = GenConfig(subjects=3, samples_min=2, samples_max=2, seed=5)
        a = gen_dataset(cfg, tmp_path / "a").read_bytes()
        b = gen_dataset(cfg, tmp_path / "b").read_bytes()
        assert a == b

    def test_worker_count_independent(self, tmp_path):
        cfg = GenConfig(subjects=3, samples_min=2, samples_max=2, seed=9)
        a = gen_dataset(cfg, tmp_path / "a")
        from dataclasses import replace

        b = gen_dataset(replace(cfg, workers=2), tmp_path / "b")
        assert a.read_bytes() == b.read_bytes()
        first = json.loads(a.read_text())["samples"][0]["left"]
        assert (tmp_path / "a" / first).read_bytes() == (tmp_path / "b" / first).read_bytes()

    def test_split_ratio(self):
        train, test = split_subjects(GenConfig(subjects=20, train_fraction=0.75))
        assert len(train) == 15 and len(test) == 5 and not set(train) & set(test)

    def test_unwritable(self, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("x")
        with pytest.raises(DataError):
            gen_dataset(GenConfig(subjects=1, samples_min=1, samples_max=1), blocker / "sub")

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(DataError):
            Dataset(tmp_path)
