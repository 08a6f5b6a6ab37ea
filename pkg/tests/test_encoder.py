import warnings

import numpy as np
import pytest

from permfree import autodiff as ad
from permfree.encoder import EncoderConfig, declare_encoder, encode, split_by_blstm, split_by_vgg
from permfree.layers import ParamStore


def _cfg(variant, S=2, **kw):
    base = dict(feat_dim=6, mix_channels=(2, 2), sd_channels=2, sd_layers=1, rec_layers=1, cells=4, proj=4)
    base.update(kw)
    return EncoderConfig(split_variant=variant, n_speakers=S, **base)


def _store(cfg, seed=0):
    s = ParamStore(seed, init_range=0.4)
    declare_encoder(s, cfg)
    return s


@pytest.mark.parametrize("variant,S", [("none", 1), ("vgg", 2), ("blstm", 2), ("blstm", 3)])
def test_output_count_and_subsampled_length(variant, S):
    cfg = _cfg(variant, S)
    out = encode(_store(cfg), cfg, np.random.default_rng(0).normal(size=(2, 7, 6)), [7, 5])
    assert out.n_outputs == S
    assert out.lengths == [4, 3]
    for G in out.rec_reprs:
        assert G.shape == (2, 4, cfg.out_dim)


def test_none_variant_requires_single_output():
    with pytest.raises(ValueError):
        EncoderConfig(split_variant="none", n_speakers=2)
    with pytest.raises(ValueError):
        EncoderConfig(split_variant="nope")


def test_single_output_split_variant_warns():
    cfg = _cfg("blstm", 1)
    with warnings.catch_warnings(record=True) as w:
        warnings.simplefilter("always")
        encode(_store(cfg), cfg, np.zeros((1, 4, 6)))
    assert any("degenerates" in str(x.message) for x in w)


@pytest.mark.parametrize("variant", ["vgg", "blstm"])
def test_swapping_sd_branches_swaps_outputs(variant):
    cfg = _cfg(variant)
    s = _store(cfg)
    O = np.random.default_rng(1).normal(size=(1, 6, 6))
    a = encode(s, cfg, O)
    for n in s.names("enc.sd.0."):
        other = n.replace("enc.sd.0.", "enc.sd.1.")
        s[n].data, s[other].data = s[other].data, s[n].data
    b = encode(s, cfg, O)
    np.testing.assert_array_equal(a.rec_reprs[0].data, b.rec_reprs[1].data)
    np.testing.assert_array_equal(a.rec_reprs[1].data, b.rec_reprs[0].data)


@pytest.mark.parametrize("variant", ["none", "vgg", "blstm"])
def test_padding_does_not_change_valid_frames(variant):
    cfg = _cfg(variant, 1 if variant == "none" else 2)
    s = _store(cfg)
    rng = np.random.default_rng(2)
    short = rng.normal(size=(5, 6))
    padded = np.zeros((2, 8, 6))
    padded[0] = rng.normal(size=(8, 6))
    padded[1, :5] = short
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        batch = encode(s, cfg, padded, [8, 5])
        alone = encode(s, cfg, short[None])
    for Gb, Ga in zip(batch.rec_reprs, alone.rec_reprs):
        np.testing.assert_allclose(Gb.data[1, :3], Ga.data[0], atol=1e-12)


def test_shared_recognition_stage_has_one_parameter_set():
    cfg = _cfg("blstm", 3, rec_layers=2)
    s = _store(cfg)
    assert len(s.names("enc.rec.")) == len(_store(_cfg("blstm", 1, rec_layers=2)).names("enc.rec."))
    assert {n.split(".")[2] for n in s.names("enc.sd.")} == {"0", "1", "2"}


def test_feature_dim_mismatch():
    cfg = _cfg("blstm")
    with pytest.raises(ad.ShapeError):
        encode(_store(cfg), cfg, np.zeros((1, 4, 5)))


def test_variant_specific_entry_points():
    cfg = _cfg("vgg")
    s = _store(cfg)
    out = split_by_vgg(s, cfg, np.ones((1, 4, 6)))
    assert out.extras["sd_channels_total"] == 2 * cfg.sd_channels
    with pytest.raises(ValueError):
        split_by_blstm(s, cfg, np.ones((1, 4, 6)))


def test_too_short_input():
    cfg = _cfg("blstm", pool=4)
    with pytest.raises(ValueError):
        encode(_store(cfg), cfg, np.zeros((1, 2, 6)))
