"""Registered finite-difference gradient checks on tiny models.

Each check returns the worst relative error reported by
:func:`permfree.autodiff.grad_check`; :func:`run_all` compares them with a
threshold.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .attention import DecoderConfig, attention_loss, decoder_step, initial_state, prepare_memory
from .ctc import ctc_loss, to_classes
from .encoder import EncoderConfig
from .layers import (
    LstmState,
    ParamStore,
    blstm_layer,
    declare_blstm,
    declare_linear,
    declare_lstm,
    linear,
    lstm_step,
    vgg_block,
    declare_conv,
)
from .model import ModelConfig, build_params
from .objective import kl_contrast_loss, multi_speaker_loss

CHECKS = {}
THRESHOLD = 1e-4
H = 1e-4
# Wider than the training init so no tensor's gradient sits at round-off level
# and no ReLU layer is entirely inactive.
INIT_RANGE = 0.5


def register(name):
    def deco(fn):
        CHECKS[name] = fn
        return fn

    return deco


def tiny_model_config(n_speakers=2, split_variant="blstm"):
    enc = EncoderConfig(
        split_variant=split_variant,
        n_speakers=n_speakers,
        feat_dim=4,
        mix_channels=(2,),
        pool=2,
        sd_channels=2,
        sd_layers=1,
        rec_layers=1,
        cells=3,
        proj=4,
    )
    dec = DecoderConfig(cells=3, att_dim=3, loc_filters=2, loc_width=3)
    return ModelConfig(enc, dec, chars="ab")


def _leaves(store):
    return [p for _, p in store.items()]


@register("linear")
def check_linear(seed=0):
    rng = np.random.default_rng(seed)
    s = ParamStore(seed, INIT_RANGE)
    declare_linear(s, "l", 3, 2)
    x = ad.Tensor(rng.normal(size=(4, 3)))
    return ad.grad_check(lambda *a: ad.tanh(linear(s, "l", x)).sum(), [x] + _leaves(s), H)


@register("lstm")
def check_lstm(seed=0):
    rng = np.random.default_rng(seed)
    s = ParamStore(seed, INIT_RANGE)
    declare_lstm(s, "c", 2, 3)
    xs = [ad.Tensor(rng.normal(size=(2, 2))) for _ in range(3)]

    def f(*_):
        st = LstmState.zeros(2, 3)
        for x in xs:
            _, st = lstm_step(s, "c", x, st)
        return (st.hidden * st.hidden).sum() + st.cell.sum()

    return ad.grad_check(f, xs + _leaves(s), H)


@register("blstm")
def check_blstm(seed=0):
    rng = np.random.default_rng(seed)
    s = ParamStore(seed, INIT_RANGE)
    declare_blstm(s, "b", 2, 3, 4)
    x = ad.Tensor(rng.normal(size=(2, 4, 2)))
    def f(*_):
        y = blstm_layer(s, "b", x, [4, 3])
        return (y * y).sum()

    return ad.grad_check(f, [x] + _leaves(s), H)


@register("vgg_block")
def check_vgg(seed=0):
    rng = np.random.default_rng(seed)
    s = ParamStore(seed, INIT_RANGE)
    declare_conv(s, "c0", 1, 2)
    declare_conv(s, "c1", 2, 2)
    x = ad.Tensor(rng.normal(size=(2, 1, 5, 4)))
    w = ad.Tensor(rng.normal(size=(2, 2, 3, 2)))

    def f(*_):
        y, _ = vgg_block(s, ["c0", "c1"], x, pool=2, lengths=[5, 4])
        return (y * w).sum()

    return ad.grad_check(f, [x] + _leaves(s), H)


def _decoder_fixture(seed):
    cfg = tiny_model_config(1, "none")
    store = build_params(cfg, seed, INIT_RANGE)
    rng = np.random.default_rng(seed)
    G = ad.Tensor(rng.normal(size=(2, 5, cfg.encoder.out_dim)))
    return cfg, store, G


@register("attention_step")
def check_attention_step(seed=0):
    cfg, store, G = _decoder_fixture(seed)
    dec = [p for n, p in store.items() if n.startswith("dec.")]

    def f(*_):
        mem = prepare_memory(store, G, [5, 4])
        st = initial_state(store, mem)
        total = None
        for y in ([cfg.vocab.sos] * 2, [0, 1]):
            logp, st = decoder_step(store, cfg.decoder, mem, np.array(y), st)
            term = logp[:, 1].sum()
            total = term if total is None else total + term
        return total

    return ad.grad_check(f, [G] + dec, H)


@register("attention_loss")
def check_attention_loss(seed=0):
    cfg, store, G = _decoder_fixture(seed)
    dec = [p for n, p in store.items() if n.startswith("dec.")]
    refs = [[0, 1, 1], [1]]
    return ad.grad_check(lambda *a: attention_loss(store, cfg.decoder, G, refs, cfg.vocab, [5, 4]).sum(),
                         [G] + dec, H)


@register("ctc_loss")
def check_ctc(seed=0):
    rng = np.random.default_rng(seed)
    x = ad.Tensor(rng.normal(size=(2, 6, 3)))
    refs = [to_classes([0, 1]), to_classes([1, 1])]
    return ad.grad_check(lambda t: ctc_loss(t, refs, [6, 5]).sum(), x, H)


@register("multi_speaker_loss")
def check_multi_speaker(seed=0):
    cfg = tiny_model_config(2, "blstm")
    store = build_params(cfg, seed, INIT_RANGE)
    rng = np.random.default_rng(seed)
    O = rng.normal(size=(2, 6, cfg.encoder.feat_dim))
    refs = [[[0, 1], [1]], [[1], [0]]]
    perms = multi_speaker_loss(store, cfg, O, [6, 5], refs).assignments
    fixed = [p.pi_hat for p in perms]

    def f(*_):
        return multi_speaker_loss(store, cfg, O, [6, 5], refs, 0.3, 0.1, True, permutations=fixed).loss

    return ad.grad_check(f, _leaves(store), H)


@register("kl_contrast_loss")
def check_kl(seed=0):
    rng = np.random.default_rng(seed)
    a = ad.Tensor(rng.normal(size=(2, 4, 3)))
    b = ad.Tensor(rng.normal(size=(2, 4, 3)))
    return ad.grad_check(lambda x, y: kl_contrast_loss(x, y, 0.1, [4, 3]).sum(), [a, b], H)


def run_all(seed=0, threshold=THRESHOLD, names=None):
    """Return ``{name: (error, passed)}`` for the selected checks."""
    out = {}
    for name in names or CHECKS:
        err = float(CHECKS[name](seed))
        out[name] = (err, bool(np.isfinite(err) and err < threshold))
    return out
