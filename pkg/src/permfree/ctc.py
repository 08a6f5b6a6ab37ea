"""CTC: log-space forward-backward loss, frame posteriors, incremental prefix scores.

CTC classes put blank at index 0; a character token ``t`` is class ``t + 1``.
All recursions run in log space.  The loss op registered on the tape carries
its analytic gradient ``softmax(u) - occupancy``, so the per-frame recursion
is never taped; :func:`ctc_loss_taped` builds the same quantity from primitive
ops and serves as an independent check.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, log_softmax_arr, softmax_arr
from .layers import linear

BLANK = 0
_NEG = -1e30


class AlignmentInfeasible(ValueError):
    """Reference cannot be aligned to the available frames."""


def to_classes(tokens):
    return [int(t) + 1 for t in tokens]


def min_frames(ref):
    """Shortest frame count admitting an alignment: labels plus adjacent repeats."""
    return len(ref) + sum(1 for a, b in zip(ref, ref[1:]) if a == b)


def extend_with_blanks(ref_classes):
    ext = [BLANK]
    for c in ref_classes:
        ext += [c, BLANK]
    return np.asarray(ext, dtype=np.int64)


def _skip_mask(ext):
    skip = np.zeros(len(ext), dtype=bool)
    skip[2:] = (ext[2:] != BLANK) & (ext[2:] != ext[:-2])
    return skip


def _check_feasible(n_frames, ref_classes):
    need = min_frames(ref_classes)
    if n_frames < max(need, 1):
        raise AlignmentInfeasible(
            f"alignment infeasible: {n_frames} frames for a reference needing {max(need, 1)}"
        )


def ctc_alpha(logp, ref_classes):
    """Forward variables ``log alpha`` (L, 2|R|+1); alpha_t includes frame t's emission."""
    logp = np.asarray(logp)
    _check_feasible(len(logp), ref_classes)
    ext = extend_with_blanks(ref_classes)
    skip = _skip_mask(ext)
    S, L = len(ext), len(logp)
    emit = logp[:, ext]
    alpha = np.full((L, S), -np.inf)
    alpha[0, 0] = emit[0, 0]
    if S > 1:
        alpha[0, 1] = emit[0, 1]
    for t in range(1, L):
        prev = alpha[t - 1]
        acc = prev.copy()
        acc[1:] = np.logaddexp(acc[1:], prev[:-1])
        acc[2:] = np.where(skip[2:], np.logaddexp(acc[2:], prev[:-2]), acc[2:])
        alpha[t] = acc + emit[t]
    return alpha


def ctc_beta(logp, ref_classes):
    """Backward variables ``log beta`` (L, S); beta_t excludes frame t's emission."""
    logp = np.asarray(logp)
    _check_feasible(len(logp), ref_classes)
    ext = extend_with_blanks(ref_classes)
    skip = _skip_mask(ext)
    S, L = len(ext), len(logp)
    emit = logp[:, ext]
    beta = np.full((L, S), -np.inf)
    beta[L - 1, S - 1] = 0.0
    if S > 1:
        beta[L - 1, S - 2] = 0.0
    for t in range(L - 2, -1, -1):
        nxt = beta[t + 1] + emit[t + 1]
        acc = nxt.copy()
        acc[:-1] = np.logaddexp(acc[:-1], nxt[1:])
        acc[:-2] = np.where(skip[2:], np.logaddexp(acc[:-2], nxt[2:]), acc[:-2])
        beta[t] = acc
    return beta


def ctc_nll(logp, ref_classes):
    """``-log p_ctc(R)`` for one utterance of frame log-probabilities (L, K)."""
    alpha = ctc_alpha(logp, ref_classes)
    last = alpha[-1, -2:] if alpha.shape[1] > 1 else alpha[-1, -1:]
    return -float(np.logaddexp.reduce(last))


def ctc_nll_and_grad(logits, ref_classes):
    """Loss and its gradient with respect to the unnormalised ``logits`` (L, K)."""
    logp = log_softmax_arr(logits, axis=-1)
    alpha = ctc_alpha(logp, ref_classes)
    beta = ctc_beta(logp, ref_classes)
    ext = extend_with_blanks(ref_classes)
    last = alpha[-1, -2:] if alpha.shape[1] > 1 else alpha[-1, -1:]
    log_p = float(np.logaddexp.reduce(last))
    occ = np.exp(alpha + beta - log_p)  # (L, S)
    post = np.zeros_like(logits)
    np.add.at(post.T, ext, occ.T)
    grad = softmax_arr(logits, axis=-1) - post
    return -log_p, grad


@ad.register("ctc")
def _ctc_op():
    def fwd(logits, refs, lengths):
        B = logits.shape[0]
        if len(refs) != B or len(lengths) != B:
            raise ad.ShapeError(f"ctc: {len(refs)} refs / {len(lengths)} lengths for batch {B}")
        losses = np.zeros(B)
        grads = np.zeros_like(logits)
        for b in range(B):
            n = int(lengths[b])
            losses[b], grads[b, :n] = ctc_nll_and_grad(logits[b, :n], refs[b])
        return losses, grads

    def bwd(grads, g):
        return (g[:, None, None] * grads,)

    return fwd, bwd


def ctc_loss(logits, refs, lengths=None):
    """Per-utterance CTC loss (B,) from head logits (B, L, K); refs are class ids.

    Raises :class:`AlignmentInfeasible` when a reference cannot fit its frames.
    """
    if not isinstance(logits, Tensor):
        logits = Tensor(logits)
    if logits.ndim == 2:
        logits = logits.reshape(1, *logits.shape)
        refs = [refs]
    B, L, _ = logits.shape
    lengths = [L] * B if lengths is None else [int(n) for n in lengths]
    refs = [list(r) for r in refs]
    return ad.forward_op("ctc", logits, refs=refs, lengths=lengths)


def ctc_loss_taped(logits, ref_classes):
    """Same loss as :func:`ctc_loss` for one (L, K) utterance, built from primitive ops."""
    if not isinstance(logits, Tensor):
        logits = Tensor(logits)
    L, K = logits.shape
    _check_feasible(L, ref_classes)
    ext = extend_with_blanks(ref_classes)
    S = len(ext)
    skip = np.where(_skip_mask(ext), 0.0, _NEG)
    onehot = np.zeros((K, S))
    onehot[ext, np.arange(S)] = 1.0
    emit = ad.log_softmax(logits, axis=-1) @ onehot  # (L, S)
    init = np.full(S, _NEG)
    init[: min(2, S)] = 0.0
    alpha = emit[0] + init
    for t in range(1, L):
        parts = [alpha]
        if S > 1:
            parts.append(ad.concat([Tensor(np.full(1, _NEG)), alpha[:-1]], axis=0))
        if S > 2:
            parts.append(ad.concat([Tensor(np.full(2, _NEG)), alpha[:-2]], axis=0) + skip)
        alpha = ad.logsumexp(ad.stack(parts, axis=0), axis=0) + emit[t]
    return -ad.logsumexp(alpha[max(S - 2, 0) :], axis=0)


def declare_ctc_head(store, enc_dim, vocab):
    store.declare("ctc.W", (enc_dim, vocab.n_ctc_classes))
    store.declare("ctc.b", (vocab.n_ctc_classes,))


def ctc_logits(store, G):
    return linear(store, "ctc", G)


def ctc_frame_posteriors(store, G):
    """Frame-level log-distributions over blank + characters, (..., L, V+1)."""
    return ad.log_softmax(ctc_logits(store, G), axis=-1)


def collapse(path):
    """Merge repeats, then drop blanks: the CTC many-to-one map."""
    out = []
    prev = None
    for c in path:
        c = int(c)
        if c != prev and c != BLANK:
            out.append(c)
        prev = c
    return out


def greedy_collapse(logp):
    return collapse(np.asarray(logp).argmax(axis=-1))


# ---------------------------------------------------------------------------
# Prefix scoring
# ---------------------------------------------------------------------------


@dataclass
class CtcPrefixState:
    """Log prefix variables over all frames for one hypothesis.

    ``r[:, 0]``: paths covering the prefix and ending in a non-blank at frame t;
    ``r[:, 1]``: same but ending in blank.  ``log_psi`` is the prefix
    probability (all label sequences starting with this prefix).
    """

    r: np.ndarray
    log_psi: float
    last: int | None

    @property
    def total(self):
        """Log-probability of exactly this label sequence ending by the final frame."""
        return float(np.logaddexp(self.r[-1, 0], self.r[-1, 1]))


def initial_prefix_state(frame_logprobs):
    lp = np.asarray(frame_logprobs)
    r = np.full((len(lp), 2), -np.inf)
    r[:, 1] = np.cumsum(lp[:, BLANK])
    return CtcPrefixState(r, 0.0, None)


def _extend(state, labels, lp):
    # vectorised over candidate labels; returns (log_psi (C,), r (L, 2, C))
    labels = np.asarray(labels, dtype=np.int64)
    L = len(lp)
    C = len(labels)
    r = np.full((L, 2, C), -np.inf)
    yc = lp[:, labels]  # (L, C)
    if state.last is None:
        r[0, 0] = yc[0]
    same = labels == (state.last if state.last is not None else -1)
    # phi: mass of the old prefix that can be followed by a new emission of c
    phi = np.where(same[None, :], state.r[:, 1:2], np.logaddexp(state.r[:, 0:1], state.r[:, 1:2]))
    log_psi = r[0, 0].copy()
    for t in range(1, L):
        r[t, 0] = np.logaddexp(r[t - 1, 0], phi[t - 1]) + yc[t]
        r[t, 1] = np.logaddexp(r[t - 1, 0], r[t - 1, 1]) + lp[t, BLANK]
        log_psi = np.logaddexp(log_psi, phi[t - 1] + yc[t])
    return log_psi, r


def _delta(new, old):
    # An unreachable prefix stays unreachable instead of yielding -inf - -inf.
    if old == -np.inf:
        return np.full(np.shape(new), -np.inf)[()] if np.ndim(new) else -np.inf
    return new - old


def ctc_prefix_score(state, next_label, frame_logprobs):
    """Score delta and new state for appending ``next_label`` (a CTC class id).

    ``next_label=None`` means end of sequence: the delta then completes the
    prefix probability to the full-sequence probability.
    """
    lp = np.asarray(frame_logprobs)
    if next_label is None:
        return _delta(state.total, state.log_psi), state
    if next_label == BLANK:
        raise ValueError("blank cannot be appended to a hypothesis")
    log_psi, r = _extend(state, [next_label], lp)
    new = CtcPrefixState(r[:, :, 0], float(log_psi[0]), int(next_label))
    return _delta(new.log_psi, state.log_psi), new


def ctc_prefix_scores(state, labels, frame_logprobs):
    """Vectorised :func:`ctc_prefix_score` for many candidate class ids."""
    labels = list(labels)
    if BLANK in labels:
        raise ValueError("blank cannot be appended to a hypothesis")
    log_psi, r = _extend(state, labels, np.asarray(frame_logprobs))
    states = [CtcPrefixState(r[:, :, i], float(log_psi[i]), int(c)) for i, c in enumerate(labels)]
    return _delta(log_psi, state.log_psi), states
