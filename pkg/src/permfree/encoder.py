"""Three-stage split encoder: Encoder_Mix -> S x Encoder_SD -> shared Encoder_Rec.

Parameter naming:

* ``enc.mix.conv{i}``      shared VGG front end
* ``enc.sd.{u}.*``         unshared speaker-differentiating stage, one subtree per output
* ``enc.rec.blstm{i}``     recognition stage, shared by every output
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .layers import blstm_layer, declare_blstm, declare_conv, vgg_block

VARIANTS = ("none", "vgg", "blstm")


@dataclass
class EncoderConfig:
    split_variant: str = "blstm"
    n_speakers: int = 2
    feat_dim: int = 16
    in_channels: int = 1
    mix_channels: tuple = (8, 8)
    pool: int = 2
    sd_channels: int = 8
    sd_layers: int = 1
    rec_layers: int = 2
    cells: int = 32
    proj: int = 32

    def __post_init__(self):
        self.mix_channels = tuple(int(c) for c in self.mix_channels)
        if self.split_variant not in VARIANTS:
            raise ValueError(f"split_variant must be one of {VARIANTS}, got {self.split_variant!r}")
        if self.n_speakers < 1:
            raise ValueError("n_speakers must be >= 1")
        if self.split_variant == "none" and self.n_speakers != 1:
            raise ValueError("split_variant 'none' produces a single output; set n_speakers=1")
        if self.feat_dim % self.in_channels:
            raise ValueError("feat_dim must be divisible by in_channels")

    @property
    def subsample_factor(self):
        return self.pool if self.pool and self.pool > 1 else 1

    @property
    def out_dim(self):
        return self.proj

    def freq_after_pool(self):
        f = self.feat_dim // self.in_channels
        return -(-f // self.pool) if self.pool and self.pool > 1 else f


@dataclass
class SplitEncoderOutput:
    mix_repr: Tensor
    sd_reprs: list
    rec_reprs: list
    lengths: list
    subsample_factor: int
    extras: dict = field(default_factory=dict)

    @property
    def n_outputs(self):
        return len(self.rec_reprs)


def declare_encoder(store, cfg):
    ch_in = cfg.in_channels
    for i, ch in enumerate(cfg.mix_channels):
        declare_conv(store, f"enc.mix.conv{i}", ch_in, ch)
        ch_in = ch
    freq = cfg.freq_after_pool()
    if cfg.split_variant == "vgg":
        for u in range(cfg.n_speakers):
            declare_conv(store, f"enc.sd.{u}.conv0", ch_in, cfg.sd_channels)
        rec_in = cfg.sd_channels * freq
        n_rec = cfg.rec_layers
    elif cfg.split_variant == "blstm":
        for u in range(cfg.n_speakers):
            d = ch_in * freq
            for i in range(cfg.sd_layers):
                declare_blstm(store, f"enc.sd.{u}.blstm{i}", d, cfg.cells, cfg.proj)
                d = cfg.proj
        rec_in = cfg.proj
        n_rec = cfg.rec_layers
    else:
        rec_in = ch_in * freq
        n_rec = cfg.sd_layers + cfg.rec_layers
    for i in range(n_rec):
        declare_blstm(store, f"enc.rec.blstm{i}", rec_in if i == 0 else cfg.proj, cfg.cells, cfg.proj)


def _to_image(O, cfg):
    B, T, D = O.shape
    if D != cfg.feat_dim:
        raise ad.ShapeError(f"encoder: feature dim {D} != configured {cfg.feat_dim}")
    C = cfg.in_channels
    x = O.reshape(B, T, C, D // C)
    return x.transpose(0, 2, 1, 3)


def _to_sequence(img):
    B, C, L, F = img.shape
    return img.transpose(0, 2, 1, 3).reshape(B, L, C * F)


def _rec_stack(store, n_layers, x, lengths):
    for i in range(n_layers):
        x = blstm_layer(store, f"enc.rec.blstm{i}", x, lengths)
    return x


def encode(store, cfg, O, lengths=None):
    """Run the encoder on a padded batch ``O`` (B, T, D).

    Returns a :class:`SplitEncoderOutput` whose ``rec_reprs`` holds the S
    representations G^u, each (B, L, C), with L = ceil(T / subsample_factor).
    """
    if not isinstance(O, Tensor):
        O = Tensor(O)
    if O.ndim == 2:
        O = O.reshape(1, *O.shape)
    B, T, _ = O.shape
    lengths = [T] * B if lengths is None else [int(n) for n in lengths]
    if max(lengths) < cfg.subsample_factor or min(lengths) < 1:
        raise ValueError(f"encoder: input of {min(lengths)} frames too short for subsampling by {cfg.subsample_factor}")
    if cfg.split_variant != "none" and cfg.n_speakers == 1:
        warnings.warn("split variant with S=1 degenerates to the single-output baseline", stacklevel=2)
    if cfg.split_variant == "vgg":
        return _split_by_vgg(store, cfg, O, lengths)
    if cfg.split_variant == "blstm":
        return _split_by_blstm(store, cfg, O, lengths)
    return _no_split(store, cfg, O, lengths)


def _mix(store, cfg, O, lengths):
    img = _to_image(O, cfg)
    names = [f"enc.mix.conv{i}" for i in range(len(cfg.mix_channels))]
    img, lens = vgg_block(store, names, img, pool=cfg.pool, lengths=lengths)
    if min(lens) < 1:
        raise ValueError("encoder: zero-length output after subsampling")
    return img, lens


def _no_split(store, cfg, O, lengths):
    img, lens = _mix(store, cfg, O, lengths)
    H = _to_sequence(img)
    G = _rec_stack(store, cfg.sd_layers + cfg.rec_layers, H, lens)
    return SplitEncoderOutput(H, [H], [G], lens, cfg.subsample_factor)


def _split_shared_rec(store, cfg, sd, lens, n_layers):
    # the shared stage runs once over the S streams stacked along the batch axis
    S = len(sd)
    B = sd[0].shape[0]
    x = sd[0] if S == 1 else ad.concat(sd, axis=0)
    G = _rec_stack(store, n_layers, x, list(lens) * S)
    if S == 1:
        return [G]
    return [G[u * B : (u + 1) * B] for u in range(S)]


def _split_by_blstm(store, cfg, O, lengths):
    img, lens = _mix(store, cfg, O, lengths)
    H = _to_sequence(img)
    sd = []
    for u in range(cfg.n_speakers):
        x = H
        for i in range(cfg.sd_layers):
            x = blstm_layer(store, f"enc.sd.{u}.blstm{i}", x, lens)
        sd.append(x)
    G = _split_shared_rec(store, cfg, sd, lens, cfg.rec_layers)
    return SplitEncoderOutput(H, sd, G, lens, cfg.subsample_factor)


def _split_by_vgg(store, cfg, O, lengths):
    img, lens = _mix(store, cfg, O, lengths)
    S = cfg.n_speakers
    # one conv with S*f filters; the filter groups are the unshared SD encoders
    W = ad.concat([store[f"enc.sd.{u}.conv0.W"] for u in range(S)], axis=0)
    b = ad.concat([store[f"enc.sd.{u}.conv0.b"] for u in range(S)], axis=0)
    k = W.shape[-1]
    y = ad.relu(ad.conv2d(img, W, b, padding=(k // 2, k // 2)))
    T = y.shape[2]
    y = y * (np.arange(T)[None, :] < np.asarray(lens)[:, None]).astype(np.float64)[:, None, :, None]
    f = cfg.sd_channels
    sd = [_to_sequence(y[:, u * f : (u + 1) * f]) for u in range(S)]
    G = _split_shared_rec(store, cfg, sd, lens, cfg.rec_layers)
    out = SplitEncoderOutput(_to_sequence(img), sd, G, lens, cfg.subsample_factor)
    out.extras["sd_channels_total"] = y.shape[1]
    return out


def split_by_vgg(store, cfg, O, lengths=None):
    if cfg.split_variant != "vgg":
        raise ValueError("config is not a split-by-VGG encoder")
    return encode(store, cfg, O, lengths)


def split_by_blstm(store, cfg, O, lengths=None):
    if cfg.split_variant != "blstm":
        raise ValueError("config is not a split-by-BLSTM encoder")
    return encode(store, cfg, O, lengths)
