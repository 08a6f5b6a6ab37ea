import numpy as np
import pytest

from permfree import gradchecks
from permfree.attention import (
    DecoderConfig,
    attend,
    attention_loss,
    declare_decoder,
    decoder_step,
    initial_state,
    prepare_memory,
    stats,
)
from permfree.autodiff import Tensor
from permfree.layers import ParamStore
from permfree.vocab import Vocab

VOCAB = Vocab("abc")
CFG = DecoderConfig(cells=4, att_dim=3, loc_filters=2, loc_width=3, alpha=2.0, max_label_len=5)
C = 5


def _store(seed=0):
    s = ParamStore(seed, init_range=0.5)
    declare_decoder(s, CFG, C, VOCAB)
    return s


def _sig(x):
    return 1.0 / (1.0 + np.exp(-x))


def _np_step(s, H, y_prev, a_prev, e, cell, ctx):
    """Independent numpy version of one decoder step for a single sequence."""
    P = lambda k: s[k].data  # noqa: E731
    Hd = CFG.cells
    z = e @ P("dec.lstm.We") + ctx @ P("dec.lstm.Wc") + P("dec.emb")[y_prev] + P("dec.lstm.b")
    i, f, o = _sig(z[:Hd]), _sig(z[Hd : 2 * Hd]), _sig(z[2 * Hd : 3 * Hd])
    cell = f * cell + i * np.tanh(z[3 * Hd :])
    e = o * np.tanh(cell)
    F = P("dec.att.F")[:, 0, :, 0]  # (K, w)
    L = len(H)
    pad = F.shape[1] // 2
    ap = np.pad(a_prev, pad)
    loc = np.array([[np.dot(F[k], ap[l : l + F.shape[1]]) for k in range(F.shape[0])] for l in range(L)])
    k = np.tanh(e @ P("dec.att.VE") + H @ P("dec.att.VH") + loc @ P("dec.att.VF") + P("dec.att.b")) @ P("dec.att.w")
    k = CFG.alpha * k[:, 0]
    a = np.exp(k - k.max())
    a /= a.sum()
    ctx = a @ H
    logits = e @ P("dec.out.We") + ctx @ P("dec.out.Wc") + P("dec.out.b")
    logp = logits - np.log(np.exp(logits - logits.max()).sum()) - logits.max()
    return logp, a, e, cell, ctx


def test_decoder_step_matches_numpy_reference():
    s = _store()
    H = np.random.default_rng(0).normal(size=(6, C))
    mem = prepare_memory(s, Tensor(H[None]))
    st = initial_state(s, mem)
    a, e, cell, ctx = np.full(6, 1 / 6), np.zeros(CFG.cells), np.zeros(CFG.cells), np.zeros(C)
    for y in (VOCAB.sos, 0, 2):
        logp, st = decoder_step(s, CFG, mem, np.array([y]), st)
        ref, a, e, cell, ctx = _np_step(s, H, y, a, e, cell, ctx)
        np.testing.assert_allclose(logp.data[0], ref, atol=1e-12)
        np.testing.assert_allclose(st.weights.data[0], a, atol=1e-12)


def test_attention_ignores_padded_frames():
    s = _store(1)
    rng = np.random.default_rng(1)
    H = np.zeros((2, 6, C))
    H[0] = rng.normal(size=(6, C))
    H[1, :4] = rng.normal(size=(4, C))
    H[1, 4:] = 100.0
    mem = prepare_memory(s, Tensor(H), [6, 4])
    st = initial_state(s, mem)
    np.testing.assert_allclose(st.weights.data[1], [0.25] * 4 + [0, 0])
    lp, st2 = decoder_step(s, CFG, mem, np.array([VOCAB.sos] * 2), st)
    assert np.all(st2.weights.data[1, 4:] == 0.0)
    np.testing.assert_allclose(st2.weights.data.sum(axis=1), 1.0)
    alone = prepare_memory(s, Tensor(H[1:2, :4]))
    lp1, _ = decoder_step(s, CFG, alone, np.array([VOCAB.sos]), initial_state(s, alone))
    np.testing.assert_allclose(lp.data[1], lp1.data[0], atol=1e-12)


def test_attend_shape_mismatch():
    s = _store()
    mem = prepare_memory(s, Tensor(np.ones((1, 4, C))))
    with pytest.raises(ValueError):
        attend(s, CFG, mem, Tensor(np.zeros((1, CFG.cells))), Tensor(np.ones((1, 3)) / 3))


def test_attention_loss_equals_summed_step_log_probs():
    s = _store(2)
    H = np.random.default_rng(2).normal(size=(5, C))
    ref = [1, 0, 2]
    got = attention_loss(s, CFG, Tensor(H[None]), [ref], VOCAB).data[0]
    a, e, cell, ctx = np.full(5, 0.2), np.zeros(CFG.cells), np.zeros(CFG.cells), np.zeros(C)
    total = 0.0
    for y_prev, target in zip([VOCAB.sos] + ref, ref + [VOCAB.eos]):
        logp, a, e, cell, ctx = _np_step(s, H, y_prev, a, e, cell, ctx)
        total -= logp[target]
    assert got == pytest.approx(total, abs=1e-10)


def test_attention_loss_batch_with_different_lengths():
    s = _store(3)
    rng = np.random.default_rng(3)
    G = rng.normal(size=(2, 5, C))
    both = attention_loss(s, CFG, Tensor(G), [[0], [1, 2, 2]], VOCAB, [5, 3]).data
    one = attention_loss(s, CFG, Tensor(G[:1]), [[0]], VOCAB).data[0]
    two = attention_loss(s, CFG, Tensor(G[1:, :3]), [[1, 2, 2]], VOCAB).data[0]
    np.testing.assert_allclose(both, [one, two], atol=1e-10)


def test_attention_loss_errors_and_instrumentation():
    s = _store()
    G = Tensor(np.ones((2, 3, C)))
    with pytest.raises(ValueError):
        attention_loss(s, CFG, G, [[0], []], VOCAB)
    with pytest.raises(ValueError):
        attention_loss(s, CFG, G, [[0] * 6, [1]], VOCAB)
    before = stats["att_decodes"]
    attention_loss(s, CFG, G, [[0], [1]], VOCAB)
    assert stats["att_decodes"] - before == 2


def test_unknown_label_rejected():
    s = _store()
    mem = prepare_memory(s, Tensor(np.ones((1, 3, C))))
    with pytest.raises(ValueError):
        decoder_step(s, CFG, mem, np.array([VOCAB.sos + 1]), initial_state(s, mem))


def test_config_validation():
    with pytest.raises(ValueError):
        DecoderConfig(loc_width=4)
    with pytest.raises(ValueError):
        DecoderConfig(alpha=0.0)


@pytest.mark.parametrize("name", ["attention_step", "attention_loss"])
def test_attention_gradients(name):
    assert gradchecks.CHECKS[name](0) < 1e-4
