"""Permutation-free multi-speaker objective.

The output-to-reference permutation is chosen by CTC loss alone; attention
decoding then runs once per output under that permutation, S sequences per
example rather than S^2.  The argmin itself is not differentiated.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .attention import attention_loss
from .ctc import AlignmentInfeasible, ctc_logits, ctc_loss, ctc_nll, to_classes
from .encoder import encode


@dataclass
class PermutationAssignment:
    loss_matrix: np.ndarray  # [u, v]: output u scored against reference v
    pi_hat: tuple  # pi_hat[u] = reference index for output u
    total_ctc: float

    @property
    def S(self):
        return len(self.pi_hat)


@dataclass
class MtlLossBreakdown:
    ctc_total: float
    att_total: float
    kl_term: float
    lam: float
    eta: float
    combined: float
    loss: ad.Tensor = field(repr=False, default=None)
    assignments: list = field(repr=False, default_factory=list)

    def as_record(self):
        return {
            "ctc": self.ctc_total,
            "att": self.att_total,
            "kl": self.kl_term,
            "lambda": self.lam,
            "eta": self.eta,
            "combined": self.combined,
        }


def assign_permutation(loss_matrix):
    """Exhaustive argmin over all S! permutations; ties go to the lexicographically first."""
    m = np.asarray(loss_matrix, dtype=np.float64)
    S = m.shape[0]
    if S < 1 or m.shape != (S, S):
        raise ValueError(f"loss matrix must be square and non-empty, got {m.shape}")
    best, best_perm = math.inf, None
    for perm in itertools.permutations(range(S)):
        total = 0.0
        for u in range(S):
            total += m[u, perm[u]]
        if total < best:
            best, best_perm = total, perm
    if best_perm is None:
        raise AlignmentInfeasible("every permutation contains an infeasible output/reference pairing")
    return PermutationAssignment(m, best_perm, best)


def ctc_loss_matrix(logp_per_output, refs):
    """S x S matrix of CTC losses; infeasible pairings are +inf."""
    S = len(logp_per_output)
    m = np.full((S, S), np.inf)
    for u in range(S):
        for v in range(S):
            try:
                m[u, v] = ctc_nll(logp_per_output[u], to_classes(refs[v]))
            except AlignmentInfeasible:
                pass
    return m


def kl_contrast_loss(G1, G2, eta, lengths=None):
    """Negative symmetric KL between frame-wise softmaxes of two hidden sequences.

    Works on (L, C) or batched (B, L, C) inputs; returns a scalar or (B,).
    """
    if not isinstance(G1, ad.Tensor):
        G1 = ad.Tensor(G1)
    if not isinstance(G2, ad.Tensor):
        G2 = ad.Tensor(G2)
    if G1.shape != G2.shape:
        raise ad.ShapeError(f"kl_contrast_loss: shapes {G1.shape} and {G2.shape} differ")
    lp1, lp2 = ad.log_softmax(G1, axis=-1), ad.log_softmax(G2, axis=-1)
    per_frame = ((ad.exp(lp1) - ad.exp(lp2)) * (lp1 - lp2)).sum(axis=-1)
    if lengths is not None and G1.ndim == 3:
        L = G1.shape[1]
        per_frame = per_frame * (np.arange(L)[None, :] < np.asarray(lengths)[:, None]).astype(np.float64)
    return per_frame.sum(axis=-1) * (-float(eta))


def symmetric_kl_per_frame(G1, G2, lengths=None):
    """Mean over valid frames of the symmetric KL (no tape), for diagnostics."""
    G1 = np.asarray(G1)
    G2 = np.asarray(G2)
    lp1, lp2 = ad.log_softmax_arr(G1), ad.log_softmax_arr(G2)
    kl = ((np.exp(lp1) - np.exp(lp2)) * (lp1 - lp2)).sum(axis=-1)
    if lengths is None:
        return float(kl.mean())
    mask = np.arange(kl.shape[-1])[None, :] < np.asarray(lengths)[:, None]
    return float(kl[mask].mean())


def multi_speaker_loss(store, cfg, O, lengths, refs, lam=0.1, eta=0.1, kl_active=False, permutations=None):
    """Joint CTC/attention permutation-free loss over a padded batch.

    ``refs[b]`` holds the S token sequences of example b.  ``permutations``
    optionally pins the assignment per example instead of searching.  Returns a
    :class:`MtlLossBreakdown` whose ``loss`` tensor is the batch mean of
    ``lam * L_ctc + (1 - lam) * L_att (+ L_KL)``.
    """
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must lie in [0, 1], got {lam}")
    if eta < 0:
        raise ValueError(f"eta must be non-negative, got {eta}")
    S = cfg.n_speakers
    B = len(refs)
    if any(len(r) != S for r in refs):
        raise ValueError(f"every example needs {S} references")
    enc = encode(store, cfg.encoder, O, lengths)
    lens = enc.lengths
    G = enc.rec_reprs[0] if S == 1 else ad.concat(enc.rec_reprs, axis=0)  # (S*B, L, C)
    logits = ctc_logits(store, G)
    logp = ad.log_softmax_arr(logits.data, axis=-1)
    assignments = []
    assigned = [None] * (S * B)
    for b in range(B):
        per_out = [logp[u * B + b, : lens[b]] for u in range(S)]
        m = ctc_loss_matrix(per_out, refs[b])
        if permutations is None:
            pa = assign_permutation(m)
        else:
            perm = tuple(permutations[b])
            pa = PermutationAssignment(m, perm, float(sum(m[u, perm[u]] for u in range(S))))
        assignments.append(pa)
        for u in range(S):
            assigned[u * B + b] = list(refs[b][pa.pi_hat[u]])
    ctc_each = ctc_loss(logits, [to_classes(r) for r in assigned], lens * S)
    att_each = attention_loss(store, cfg.decoder, G, assigned, cfg.vocab, lens * S)
    ctc_ex = ctc_each.reshape(S, B).sum(axis=0)
    att_ex = att_each.reshape(S, B).sum(axis=0)
    combined = ctc_ex * lam + att_ex * (1.0 - lam)
    kl_val = 0.0
    if kl_active:
        if S != 2:
            raise NotImplementedError("the contrast loss is defined for two outputs only")
        kl = kl_contrast_loss(enc.rec_reprs[0], enc.rec_reprs[1], eta, lens)
        kl_val = float(kl.data.mean())
        if eta != 0:
            combined = combined + kl
    loss = combined.mean()
    return MtlLossBreakdown(
        ctc_total=float(ctc_ex.data.mean()),
        att_total=float(att_ex.data.mean()),
        kl_term=kl_val,
        lam=lam,
        eta=eta,
        combined=float(loss.data),
        loss=loss,
        assignments=assignments,
    )


def attention_permutation(store, cfg, G_list, refs, length=None):
    """Reference scheme: full S^2 teacher-forced decoding, argmin of attention losses."""
    S = len(G_list)
    m = np.zeros((S, S))
    with ad.no_grad():
        for u in range(S):
            for v in range(S):
                m[u, v] = float(attention_loss(store, cfg.decoder, G_list[u], [refs[v]], cfg.vocab,
                                               None if length is None else [length]).data[0])
    return assign_permutation(m)
