import json

import numpy as np
import pytest

from stereoface.checkpoint import load_checkpoint
from stereoface.errors import ConfigError, DataError
from stereoface.facegen.dataset import Dataset, GenConfig, gen_dataset
from stereoface.optim import lr_at_epoch
from stereoface.pipeline import CropSpec, InputMode, passport_target
from stereoface.recognet import AuxConfig
from stereoface.trainkit import (TrainConfig, TrainData, decoder_l1, embed_entries, load_model, pretrain_mono,
                                 train)


@pytest.fixture(scope="module")
def toy(tmp_path_factory):
    """2 training subjects x 5 samples (plus one held-out subject)."""
    root = tmp_path_factory.mktemp("toy")
    gen_dataset(GenConfig(subjects=3, samples_min=5, samples_max=5, seed=2, train_fraction=0.67), root)
    return Dataset(root)


def _cfg(**kw):
    base = dict(mode="stereo", epochs=2, batch=4, seed=1)
    base.update(kw)
    return TrainConfig(**base)


def test_schedule():
    assert [lr_at_epoch(e, 0.01, 20, 0.1) for e in (0, 20, 40)] == pytest.approx([0.01, 0.001, 0.0001])
    assert TrainConfig().drop_every == 20 and TrainConfig().epochs == 30


def test_batch_defaults():
    assert TrainConfig(mode="mono").batch_size == 64 and TrainConfig().batch_size == 32
    assert TrainConfig(mode="mono").batch_size == 2 * TrainConfig(mode="stereo").batch_size


def test_toy_shape(toy):
    data = TrainData(toy)
    assert data.n_classes == 2 and len(data.entries) == 10


def test_smoke_loss_decreases(toy, tmp_path):
    _, rec = train(_cfg(epochs=5, batch=10), toy, tmp_path)
    losses = rec.losses()
    drops = sum(b < a for a, b in zip(losses, losses[1:]))
    assert drops >= 4, losses
    assert all(np.isfinite(losses))
    run = json.loads((tmp_path / "run.json").read_text())
    assert [e["epoch"] for e in run["epochs"]] == list(range(5))
    header = (tmp_path / "loss.csv").read_text().splitlines()[0]
    assert header == "epoch,l_ang,l_aux,lr"


def test_bitwise_reproducible(toy, tmp_path):
    train(_cfg(), toy, tmp_path / "a")
    train(_cfg(), toy, tmp_path / "b")
    assert (tmp_path / "a" / "model.ckpt").read_bytes() == (tmp_path / "b" / "model.ckpt").read_bytes()


def test_seed_changes_weights(toy):
    a, _ = train(_cfg(max_steps=1), toy)
    b, _ = train(_cfg(max_steps=1, seed=2), toy)
    assert not np.array_equal(a.state()["net.head.weight"], b.state()["net.head.weight"])


def test_beta_zero_is_core_method(toy, tmp_path):
    train(_cfg(), toy, tmp_path / "core")
    train(_cfg(aux=AuxConfig(alpha=50.0, beta=0.0)), toy, tmp_path / "beta0")
    ta, _ = load_checkpoint(tmp_path / "core" / "model.ckpt")
    tb, _ = load_checkpoint(tmp_path / "beta0" / "model.ckpt")
    assert ta.keys() == tb.keys()
    assert all(ta[k].tobytes() == tb[k].tobytes() for k in ta)


def test_aux_needs_mono(toy):
    with pytest.raises(ConfigError):
        train(_cfg(aux=AuxConfig(alpha=50.0, beta=1.0)), toy)


def test_aux_rejects_stereo_checkpoint_as_reference(toy, tmp_path):
    train(_cfg(max_steps=1), toy, tmp_path)
    with pytest.raises(ConfigError):
        train(_cfg(aux=AuxConfig()), toy, mono_checkpoint=tmp_path / "model.ckpt")


def test_full_aux_run(toy, tmp_path):
    pretrain_mono(_cfg(max_steps=2), toy, tmp_path / "mono")
    model, rec = train(_cfg(aux=AuxConfig()), toy, tmp_path / "full", mono_checkpoint=tmp_path / "mono" / "model.ckpt")
    assert model.decoder is not None and all(e.l_aux > 0 for e in rec.epochs)
    back, meta = load_model(tmp_path / "full" / "model.ckpt")
    assert back.decoder is not None and meta["aux"] == {"alpha": 50.0, "beta": 1.0}
    rep = decoder_l1(back, toy)
    spec = CropSpec(**meta["crop"])
    tgt = [passport_target(toy.passport(e["subject"]), toy.subject(e["subject"])["passport_landmarks"], spec)
           for e in toy.samples("test")]
    assert rep["n"] == len(tgt)
    assert rep["mid_gray"] == pytest.approx(np.mean(np.abs(tgt)), rel=1e-9)
    assert rep["best_constant"] == pytest.approx(np.mean(np.abs(np.array(tgt) - rep["constant"])), rel=1e-9)
    assert 0 < rep["decoder"] < 1


def test_decoder_l1_needs_decoder(toy):
    model, _ = train(_cfg(max_steps=1), toy)
    with pytest.raises(ConfigError):
        decoder_l1(model, toy)


def test_mono_two_samples_per_pair(toy, tmp_path):
    model, rec = pretrain_mono(_cfg(epochs=1), toy, tmp_path)
    assert rec.samples_per_epoch == 2 * 10
    assert model.net.cfg.input_channels == 1
    _, meta = load_model(tmp_path / "model.ckpt")
    assert meta["mode"] == "mono" and meta["depth_norm"] == {"offset": 0.5, "scale": 1.0}


def test_depth_texture_and_nocoords(toy):
    for mode in (InputMode.DEPTH_TEXTURE, InputMode.STEREO_NOCOORDS):
        model, rec = train(_cfg(mode=mode, max_steps=1), toy)
        assert model.net.cfg.input_channels == 2 and rec.steps == 1


def test_checkpoint_roundtrip_embeddings(toy, tmp_path):
    model, _ = train(_cfg(max_steps=2), toy, tmp_path)
    back, _ = load_model(tmp_path / "model.ckpt")
    entries = toy.samples("test")
    a = embed_entries(model.net, "stereo", toy, entries, _cfg().crop)
    b = embed_entries(back.net, "stereo", toy, entries, _cfg().crop)
    np.testing.assert_array_equal(a, b)
    assert a.shape == (5, 64)


def test_decay_excludes_slopes(toy):
    model, _ = train(_cfg(max_steps=1), toy)
    flags = {n: d for n, _, d in model.trainable()}
    assert not any(d for n, d in flags.items() if n.endswith("slope"))
    assert flags["head.weight"] and flags["net.head.weight"]


def test_wrong_kind(tmp_path):
    from stereoface.checkpoint import save_checkpoint

    save_checkpoint(tmp_path / "x.ckpt", {"a": np.zeros(2, np.float32)}, {"kind": "liveness"})
    with pytest.raises(DataError):
        load_model(tmp_path / "x.ckpt")


def test_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(epochs=0)
