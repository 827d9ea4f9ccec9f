import math

import numpy as np
import pytest

from stereoface import tensor as T
from stereoface.errors import ConfigError, ShapeError
from stereoface.gradcheck import check_gradients
from stereoface.optim import OptimState, sgd_step
from stereoface.recognet import (AuxConfig, AuxDecoder, ClassHead, EmbeddingNet, Margin, MarginConfig,
                                 ModelConfig, angular_logits, aux_loss, class_loss, fuse_mono, similarity,
                                 similarity_matrix, total_loss)
from stereoface.tensor import Tensor

SMALL = ModelConfig(input_channels=6, stage_filters=(4, 4, 8, 8), blocks_per_stage=(1, 1, 1, 1), embed_dim=8,
                    input_size=16)


def leaf(a):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


def _frozen_mono(cfg=None, seed=0):
    cfg = cfg or ModelConfig(input_channels=1, stage_filters=(4, 4, 4, 4), blocks_per_stage=(1, 1, 1, 1),
                             embed_dim=4, input_size=16)
    net = EmbeddingNet(cfg, seed)
    net.trained = True
    net.freeze()
    return net


class TestEmbeddingNet:
    def test_deterministic_and_dim(self, rng):
        net = EmbeddingNet(ModelConfig(), 0).eval()
        x = rng.uniform(-0.5, 0.5, size=(2, 6, 32, 32))
        a, b = net(x).data, net(x).data
        assert a.shape == (2, 64) and np.array_equal(a, b) and np.all(np.isfinite(a))

    def test_deep_feature_shape(self, rng):
        net = EmbeddingNet(ModelConfig(), 0).eval()
        x = rng.uniform(-0.5, 0.5, size=(2, 6, 32, 32))
        feats = net.deep_features(x)
        assert feats.shape == (2, 64, 2, 2)
        np.testing.assert_array_equal(net.embed_features(feats).data, net(x).data)

    def test_mismatch(self):
        net = EmbeddingNet(ModelConfig(input_channels=1), 0)
        with pytest.raises(ShapeError):
            net(np.zeros((1, 6, 32, 32)))

    def test_config_validation(self):
        with pytest.raises(ConfigError):
            ModelConfig(input_channels=3)
        with pytest.raises(ConfigError):
            ModelConfig(embed_dim=0)
        with pytest.raises(ConfigError):
            ModelConfig(input_size=20)

    def test_paper_scale(self):
        cfg = ModelConfig.paper()
        assert cfg.embed_dim == 512 and cfg.input_size == 128 and cfg.stage_filters[-1] == 512

    def test_seed_reproducible(self):
        a, b = EmbeddingNet(SMALL, 3).state_dict(), EmbeddingNet(SMALL, 3).state_dict()
        assert a.keys() == b.keys() and all(np.array_equal(a[k], b[k]) for k in a)

    @pytest.mark.parametrize("pool,norm", [("avg", "none"), ("flatten", "batch")])
    def test_variants_backprop(self, rng, pool, norm):
        from dataclasses import replace

        net = EmbeddingNet(replace(SMALL, pool=pool, norm=norm), 0)
        out = net(rng.normal(size=(3, 6, 16, 16)))
        T.sum(T.square(out)).backward()
        assert all(p.grad is not None and np.all(np.isfinite(p.grad)) for p in net.parameters())


class TestAngular:
    def test_margin_free_equivalence(self, rng):
        e, w = rng.normal(size=(5, 4)), rng.normal(size=(3, 4))
        labels = rng.integers(0, 3, 5)
        cos = angular_logits(e, w, MarginConfig(Margin.COSFACE, 16, 0.0), labels).data
        arc = angular_logits(e, w, MarginConfig(Margin.ARCFACE, 16, 0.0), labels).data
        np.testing.assert_allclose(cos, arc, atol=1e-6)
        en = e / np.linalg.norm(e, axis=1, keepdims=True)
        wn = w / np.linalg.norm(w, axis=1, keepdims=True)
        np.testing.assert_allclose(cos, 16 * en @ wn.T, atol=1e-5)

    def test_cosface_aligned(self):
        w = np.eye(3)
        out = angular_logits(np.array([[2.0, 0, 0]]), w, MarginConfig(), [0]).data
        assert out[0, 0] == pytest.approx(10.4, abs=1e-5)
        assert out[0, 1] == pytest.approx(0.0, abs=1e-6)

    def test_arcface_value(self):
        w = np.eye(2)
        e = np.array([[math.cos(0.3), math.sin(0.3)]])
        out = angular_logits(e, w, MarginConfig(Margin.ARCFACE, 10, 0.5), [0]).data
        assert out[0, 0] == pytest.approx(10 * math.cos(0.8), abs=1e-4)

    def test_arcface_cap(self):
        w = np.eye(2)
        e = np.array([[-1.0, 0.01]])  # theta close to pi
        out = angular_logits(e, w, MarginConfig(Margin.ARCFACE, 10, 0.5), [0]).data
        assert out[0, 0] == pytest.approx(-10.0)

    def test_inference_no_margin(self, rng):
        e, w = rng.normal(size=(2, 4)), rng.normal(size=(3, 4))
        a = angular_logits(e, w, MarginConfig()).data
        b = angular_logits(e, w, MarginConfig(margin=0.0), np.array([0, 1])).data
        np.testing.assert_allclose(a, b, atol=1e-6)

    def test_label_range(self, rng):
        with pytest.raises(ShapeError):
            angular_logits(rng.normal(size=(2, 4)), rng.normal(size=(3, 4)), MarginConfig(), [0, 3])

    @pytest.mark.parametrize("variant", [Margin.COSFACE, Margin.ARCFACE])
    def test_gradcheck(self, rng, variant):
        e, w = leaf(rng.normal(size=(4, 5))), leaf(rng.normal(size=(3, 5)))
        labels = np.array([0, 1, 2, 1])
        mc = MarginConfig(variant, 4.0)
        err = check_gradients(lambda: class_loss(angular_logits(e, w, mc, labels), labels), [e, w], eps=1e-5)
        assert err <= 1e-3

    def test_config(self):
        assert MarginConfig(Margin.ARCFACE).margin == 0.5 and MarginConfig().margin == 0.35
        with pytest.raises(ConfigError):
            MarginConfig(scale=1.0)


class TestClassLoss:
    def test_uniform(self):
        assert class_loss(Tensor(np.zeros((2, 7))), [1, 4]).item() == pytest.approx(math.log(7), abs=1e-6)

    def test_confident(self):
        logits = np.array([[50.0, 0, 0]])
        assert class_loss(Tensor(logits), [0]).item() < 1e-12

    def test_brute_force(self, rng):
        logits = rng.normal(size=(4, 3))
        labels = rng.integers(0, 3, 4)
        ref = np.mean([math.log(sum(math.exp(v) for v in row)) - row[y] for row, y in zip(logits, labels)])
        with T.precision(np.float64):
            got = class_loss(Tensor(logits), labels).item()
        assert got == pytest.approx(ref, abs=1e-6)


class TestSimilarity:
    def test_values(self):
        assert similarity([1.0, 2.0], [1.0, 2.0]) == pytest.approx(1.0)
        assert similarity([1.0, 0.0], [0.0, 3.0]) == 0.0
        assert similarity([1.0, 0.0], [1.0, 1.0]) == pytest.approx(0.7071067811865476)

    def test_properties(self, rng):
        a, b = rng.normal(size=8), rng.normal(size=8)
        assert similarity(a, b) == pytest.approx(similarity(b, a))
        assert similarity(3.5 * a, 0.2 * b) == pytest.approx(similarity(a, b))
        m = similarity_matrix(np.stack([a, b]), np.stack([b]))
        assert m[0, 0] == pytest.approx(similarity(a, b))

    def test_zero(self):
        with pytest.raises(ValueError):
            similarity([0.0, 0.0], [1.0, 0.0])

    def test_fusion(self):
        np.testing.assert_array_equal(fuse_mono([1.0, 2.0], [1.0, 2.0]), [1.0, 2.0])
        f = fuse_mono([1.0, 0.0], [0.0, 1.0])
        assert f.tolist() == [0.5, 0.5] and similarity(f, [1.0, 0.0]) == pytest.approx(0.70710678)
        assert fuse_mono([1.0], [2.0], "concat").tolist() == [1.0, 2.0]
        assert fuse_mono([1.0], [2.0], "left").tolist() == [1.0]
        assert fuse_mono([1.0], [2.0], "right").tolist() == [2.0]
        with pytest.raises(ConfigError):
            fuse_mono([1.0], [2.0], "max")


class TestAux:
    def test_decoder_shape_deterministic(self, rng):
        dec = AuxDecoder(SMALL, 0)
        feats = Tensor(rng.normal(size=(2, 8, 1, 1)))
        a, b = dec(feats).data, dec(feats).data
        assert a.shape == (2, 1, 16, 16) and np.array_equal(a, b) and np.abs(a).max() <= 0.5
        with pytest.raises(ShapeError):
            dec(Tensor(np.zeros((2, 4, 1, 1))))

    def test_perfect_reconstruction(self, rng):
        p = rng.uniform(-0.5, 0.5, size=(2, 1, 16, 16))
        loss, l1, emb = aux_loss(Tensor(p.copy()), p, _frozen_mono(), 50.0)
        assert loss.item() == 0.0 and l1.item() == 0.0

    def test_alpha_zero_is_l1(self, rng):
        est, p = rng.uniform(-0.5, 0.5, size=(2, 1, 4, 4)), rng.uniform(-0.5, 0.5, size=(2, 1, 4, 4))
        loss, _, _ = aux_loss(Tensor(est), p, None, 0.0)
        assert loss.item() == pytest.approx(np.mean(np.abs(est - p)), abs=1e-6)

    def test_two_pixel_hand_value(self):
        # mono stand-in: one linear layer on a flattened 2-pixel image
        class Tiny:
            trained = True

            def __init__(self):
                self.w = Tensor(np.array([[1.0, 0.0], [1.0, 2.0]]))

            def parameters(self):
                return [self.w]

            def embed(self, x):
                return T.linear(T.reshape(T.as_tensor(x), (x.shape[0], -1)), self.w)

        est, p = np.array([[[[0.1, 0.2]]]]), np.array([[[[0.3, -0.1]]]])
        with T.precision(np.float64):
            loss, _, _ = aux_loss(Tensor(est), p, Tiny(), 50.0)
        l1 = (0.2 + 0.3) / 2
        # embeddings: est -> (0.3, 0.4) -> (0.6, 0.8); p -> (0.2, -0.2) -> (1, -1)/sqrt(2)
        r = 1 / math.sqrt(2)
        emb = ((0.6 - r) ** 2 + (0.8 + r) ** 2) / 2
        assert loss.item() == pytest.approx(l1 + 50 * emb, abs=1e-9)

    def test_mono_required_and_frozen(self, rng):
        x = Tensor(np.zeros((1, 1, 16, 16)))
        with pytest.raises(ConfigError):
            aux_loss(x, np.zeros((1, 1, 16, 16)), None, 50.0)
        live = EmbeddingNet(_frozen_mono().cfg, 0)
        live.trained = True
        with pytest.raises(ConfigError):
            aux_loss(x, np.zeros((1, 1, 16, 16)), live, 50.0)

    def test_mono_untouched_by_step(self, rng):
        mono = _frozen_mono()
        before = {k: v.copy() for k, v in mono.state_dict().items()}
        dec = AuxDecoder(SMALL, 1)
        feats = Tensor(rng.normal(size=(2, 8, 1, 1)), requires_grad=True)
        loss, _, _ = aux_loss(dec(feats), rng.uniform(-0.5, 0.5, (2, 1, 16, 16)), mono, 50.0)
        loss.backward()
        sgd_step(list(dec.decay_flags()) + list(mono.decay_flags()), OptimState(lr=0.1))
        after = mono.state_dict()
        assert all(before[k].tobytes() == after[k].tobytes() for k in before)
        assert feats.grad is not None and np.any(feats.grad != 0)

    def test_total(self):
        a = Tensor(np.array(1.25))
        assert total_loss(a, Tensor(np.array(3.0)), 0.0) is a
        assert total_loss(a, None, 1.0) is a
        assert total_loss(a, Tensor(np.array(0.0)), 1.0).item() == 1.25
        assert total_loss(a, Tensor(np.array(2.0)), 1.0).item() == 3.25
        assert AuxConfig(beta=0).enabled is False
        with pytest.raises(ConfigError):
            AuxConfig(alpha=-1)


def test_class_head_shape():
    h = ClassHead(0, 5, 8)
    assert h.n_classes == 5 and h.weight.shape == (5, 8)
