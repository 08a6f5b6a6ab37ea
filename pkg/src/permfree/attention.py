"""Location-aware attention decoder.

Step order (one label):

1. ``e_n = LSTM(Lin(e_{n-1}) + Lin(c_{n-1}) + Emb(y_{n-1}))``
2. ``f_n = F * a_{n-1}``; ``k_{n,l} = w . tanh(V^E e_n + V^H h_l + V^F f_{n,l} + b)``;
   ``a_n = softmax(alpha * k_n)``; ``c_n = sum_l a_{n,l} h_l``
3. ``p(y_n) = softmax(Lin(e_n) + Lin(c_n))`` over characters plus eos.

Initial state: uniform ``a_0`` over valid frames, zero ``e_0``, cell and ``c_0``.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .layers import LstmState, lstm_gates

#: instrumentation: "att_decodes" counts teacher-forced sequences decoded
stats = Counter()

NEG = -1e30


@dataclass
class DecoderConfig:
    cells: int = 32
    att_dim: int = 32
    loc_filters: int = 4
    loc_width: int = 7
    alpha: float = 2.0
    max_label_len: int = 64

    def __post_init__(self):
        if self.loc_filters < 1:
            raise ValueError("need at least one location filter")
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")
        if self.loc_width % 2 == 0:
            raise ValueError("loc_width must be odd so the filter is centred")


@dataclass
class AttentionState:
    weights: Tensor  # a_{n-1}, (B, L)
    lstm: LstmState  # e_{n-1} and its cell
    context: Tensor  # c_{n-1}, (B, C)


@dataclass
class EncodedMemory:
    """Per-utterance quantities reused at every step."""

    H: Tensor  # (B, L, C)
    H_proj: Tensor  # V^H h_l + b, (B, L, A)
    mask_bias: np.ndarray  # 0 on valid frames, NEG on padding, (B, L)
    lengths: list


def declare_decoder(store, cfg, enc_dim, vocab):
    A, Hd, K = cfg.att_dim, cfg.cells, cfg.loc_filters
    store.declare("dec.att.VH", (enc_dim, A))
    store.declare("dec.att.VE", (Hd, A))
    store.declare("dec.att.VF", (K, A))
    store.declare("dec.att.b", (A,))
    store.declare("dec.att.w", (A, 1))
    store.declare("dec.att.F", (K, 1, cfg.loc_width, 1))
    store.declare("dec.lstm.We", (Hd, 4 * Hd))
    store.declare("dec.lstm.Wc", (enc_dim, 4 * Hd))
    store.declare("dec.lstm.b", (4 * Hd,))
    store.declare("dec.emb", (vocab.n_dec_inputs, 4 * Hd))
    store.declare("dec.out.We", (Hd, vocab.n_dec_outputs))
    store.declare("dec.out.Wc", (enc_dim, vocab.n_dec_outputs))
    store.declare("dec.out.b", (vocab.n_dec_outputs,))


def prepare_memory(store, H, lengths=None):
    if not isinstance(H, Tensor):
        H = Tensor(H)
    if H.ndim == 2:
        H = H.reshape(1, *H.shape)
    B, L, _ = H.shape
    if L == 0:
        raise ValueError("attention over an empty sequence")
    lengths = [L] * B if lengths is None else [int(n) for n in lengths]
    if min(lengths) < 1:
        raise ValueError("attention over an empty sequence")
    bias = np.where(np.arange(L)[None, :] < np.asarray(lengths)[:, None], 0.0, NEG)
    return EncodedMemory(H, H @ store["dec.att.VH"] + store["dec.att.b"], bias, lengths)


def initial_state(store, mem):
    B, L, C = mem.H.shape
    a0 = np.where(mem.mask_bias == 0.0, 1.0, 0.0)
    a0 /= a0.sum(axis=1, keepdims=True)
    Hd = store["dec.lstm.We"].shape[0]
    return AttentionState(Tensor(a0), LstmState.zeros(B, Hd), Tensor(np.zeros((B, C))))


def attend(store, cfg, mem, e, a_prev):
    """Return ``(c_n, a_n)`` given decoder state ``e`` (B, Hd) and ``a_{n-1}`` (B, L)."""
    B, L, _ = mem.H.shape
    if a_prev.shape != (B, L):
        raise ad.ShapeError(f"attend: previous weights {a_prev.shape} do not match memory ({B}, {L})")
    F = store["dec.att.F"]
    pad = F.shape[2] // 2
    f = ad.conv2d(a_prev.reshape(B, 1, L, 1), F, padding=(pad, 0))  # (B, K, L, 1)
    f = f.reshape(B, F.shape[0], L).transpose(0, 2, 1) @ store["dec.att.VF"]
    s = (e @ store["dec.att.VE"]).reshape(B, 1, -1)
    k = (ad.tanh(mem.H_proj + f + s) @ store["dec.att.w"]).reshape(B, L)
    a = ad.softmax(k * cfg.alpha + mem.mask_bias, axis=-1)
    c = (a.reshape(B, 1, L) @ mem.H).reshape(B, mem.H.shape[2])
    return c, a


def update(store, y_prev, state):
    """``e_n = LSTM(Lin(e_{n-1}) + Lin(c_{n-1}) + Emb(y_{n-1}))``."""
    y_prev = np.asarray(y_prev, dtype=np.int64)
    n_in = store["dec.emb"].shape[0]
    if y_prev.size and (y_prev.min() < 0 or y_prev.max() >= n_in):
        raise ValueError(f"decoder: unknown label id in {y_prev.tolist()}")
    z = (
        state.lstm.hidden @ store["dec.lstm.We"]
        + state.context @ store["dec.lstm.Wc"]
        + ad.embed(store["dec.emb"], y_prev)
        + store["dec.lstm.b"]
    )
    _, lstm = lstm_gates(z, state.lstm)
    return lstm


def decoder_step(store, cfg, mem, y_prev, state):
    """Advance one label.  Returns ``(log-distribution (B, V+1), new AttentionState)``."""
    lstm = update(store, y_prev, state)
    c, a = attend(store, cfg, mem, lstm.hidden, state.weights)
    logits = lstm.hidden @ store["dec.out.We"] + c @ store["dec.out.Wc"] + store["dec.out.b"]
    return ad.log_softmax(logits, axis=-1), AttentionState(a, lstm, c)


def teacher_forcing_arrays(refs, vocab, max_len):
    """Decoder inputs, targets and step mask for a batch of references."""
    for r in refs:
        if len(r) > max_len:
            raise ValueError(f"reference of length {len(r)} exceeds max_label_len={max_len}")
    B = len(refs)
    N = max(len(r) for r in refs) + 1
    inputs = np.full((B, N), vocab.eos, dtype=np.int64)
    targets = np.full((B, N), vocab.eos, dtype=np.int64)
    mask = np.zeros((B, N))
    for b, r in enumerate(refs):
        inputs[b, 0] = vocab.sos
        inputs[b, 1 : len(r) + 1] = r
        targets[b, : len(r)] = r
        mask[b, : len(r) + 1] = 1.0
    return inputs, targets, mask


def attention_loss(store, cfg, G, refs, vocab, lengths=None):
    """Teacher-forced cross entropy ``-sum_n log p(r_n | r_<n)`` per sequence (B,).

    An eos target is appended to every reference internally.
    """
    if any(len(r) == 0 for r in refs):
        raise ValueError("empty reference")
    mem = prepare_memory(store, G, lengths)
    B = mem.H.shape[0]
    if len(refs) != B:
        raise ValueError(f"{len(refs)} references for a batch of {B}")
    inputs, targets, mask = teacher_forcing_arrays(refs, vocab, cfg.max_label_len)
    stats["att_decodes"] += B
    state = initial_state(store, mem)
    steps = []
    for n in range(inputs.shape[1]):
        logp, state = decoder_step(store, cfg, mem, inputs[:, n], state)
        steps.append(logp)
    logp = ad.stack(steps, axis=1)  # (B, N, V+1)
    pick = np.zeros(logp.shape)
    np.put_along_axis(pick, targets[:, :, None], mask[:, :, None], axis=2)
    return -((logp * pick).sum(axis=(1, 2)))
