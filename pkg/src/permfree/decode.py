"""Inference and scoring: joint CTC/attention beam search, CER, permutation-min scoring, hidden dumps."""

from __future__ import annotations

import csv
import itertools
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .attention import AttentionState, decoder_step, initial_state, prepare_memory
from .autodiff import Tensor
from .ctc import ctc_frame_posteriors, ctc_prefix_scores, initial_prefix_state
from .encoder import encode
from .layers import LstmState


@dataclass
class DecodeConfig:
    beam: int = 20
    gamma: float = 0.4
    max_len: int = 32
    length_norm: bool = False
    pre_beam: int | None = None
    scorer_weight: float = 0.0

    def __post_init__(self):
        if self.beam < 1:
            raise ValueError("beam width must be >= 1")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must lie in [0, 1]")


@dataclass
class Hypothesis:
    labels: list
    att: float = 0.0
    ctc: float = 0.0
    lm: float = 0.0
    score: float = 0.0
    finished: bool = False
    ctc_state: object = field(default=None, repr=False)
    dec_state: tuple = field(default=None, repr=False)
    warning: str | None = None


class BigramScorer:
    """Character bigram log-probabilities with add-one smoothing; a reference scorer plug-in."""

    def __init__(self, n_tokens, eos, sos):
        self.n = n_tokens
        self.eos = eos
        self.sos = sos
        self.counts = np.ones((n_tokens + 2, n_tokens + 1))

    def fit(self, sequences):
        for seq in sequences:
            prev = self.sos
            for t in list(seq) + [self.eos]:
                self.counts[prev, t] += 1
                prev = t
        return self

    def __call__(self, prefix, token):
        prev = prefix[-1] if prefix else self.sos
        row = self.counts[prev]
        return float(np.log(row[token] / row.sum()))


def _combine(h_att, h_ctc, h_lm, gamma, weight):
    return gamma * h_ctc + (1.0 - gamma) * h_att + weight * h_lm


def _stack_states(states):
    a = Tensor(np.stack([s[0] for s in states]))
    h = Tensor(np.stack([s[1] for s in states]))
    c = Tensor(np.stack([s[2] for s in states]))
    ctx = Tensor(np.stack([s[3] for s in states]))
    return AttentionState(a, LstmState(h, c), ctx)


def _unstack_state(st, i):
    return (st.weights.data[i], st.lstm.hidden.data[i], st.lstm.cell.data[i], st.context.data[i])


def joint_beam_search(store, cfg, G, dcfg=None, scorer=None, length=None):
    """Best hypothesis for one encoder output ``G`` (L, C) under
    ``gamma * log p_ctc + (1 - gamma) * log p_att (+ w * scorer)``.

    Each step expands every live hypothesis by all characters and eos (or
    the ``pre_beam`` best by attention), adds the CTC prefix-score delta and
    keeps the ``beam`` best candidates overall.  Candidates ending in eos
    leave the beam as finished.  At most ``max_len`` characters are emitted;
    only eos may follow the ``max_len``-th.
    """
    dcfg = dcfg or DecodeConfig()
    vocab = cfg.vocab
    G = G.data if isinstance(G, Tensor) else np.asarray(G)
    if G.ndim == 3:
        G = G[0]
    if length is not None:
        G = G[:length]
    gamma, weight = dcfg.gamma, dcfg.scorer_weight if scorer is not None else 0.0
    eos = vocab.eos
    with ad.no_grad():
        ctc_lp = ctc_frame_posteriors(store, Tensor(G)).data
        mem = prepare_memory(store, Tensor(G[None]))
        st0 = initial_state(store, mem)
    root = Hypothesis([], ctc_state=initial_prefix_state(ctc_lp), dec_state=_unstack_state(st0, 0))
    live, ended = [root], []
    for step in range(dcfg.max_len + 1):
        nb = len(live)
        with ad.no_grad():
            bmem = type(mem)(
                Tensor(np.repeat(mem.H.data, nb, axis=0)),
                Tensor(np.repeat(mem.H_proj.data, nb, axis=0)),
                np.repeat(mem.mask_bias, nb, axis=0),
                mem.lengths * nb,
            )
            y_prev = np.array([h.labels[-1] if h.labels else vocab.sos for h in live])
            logp, new_st = decoder_step(store, cfg.decoder, bmem, y_prev, _stack_states([h.dec_state for h in live]))
        logp = logp.data
        cands = []
        for i, h in enumerate(live):
            if step == dcfg.max_len:
                tokens = [eos]
            elif dcfg.pre_beam:
                tokens = sorted(np.argsort(-logp[i], kind="stable")[: dcfg.pre_beam].tolist())
            else:
                tokens = list(range(vocab.n_dec_outputs))
            chars = [t for t in tokens if t != eos]
            ctc_delta = {}
            ctc_states = {}
            if chars and gamma > 0:
                deltas, states = ctc_prefix_scores(h.ctc_state, [t + 1 for t in chars], ctc_lp)
                for t, d, s in zip(chars, deltas, states):
                    ctc_delta[t], ctc_states[t] = float(d), s
            if eos in tokens:
                ctc_delta[eos] = h.ctc_state.total - h.ctc_state.log_psi if gamma > 0 else 0.0
            dstate = _unstack_state(new_st, i)
            for t in tokens:
                att = h.att + float(logp[i, t])
                ctc = h.ctc + ctc_delta.get(t, 0.0)
                lm = h.lm + (scorer(h.labels, t) if weight else 0.0)
                score = _combine(att, ctc, lm, gamma, weight)
                if not math.isfinite(score):
                    continue
                if t == eos:
                    cands.append(Hypothesis(list(h.labels), att, ctc, lm, score, True, h.ctc_state, dstate))
                else:
                    cs = ctc_states.get(t, h.ctc_state)
                    cands.append(Hypothesis(h.labels + [t], att, ctc, lm, score, False, cs, dstate))
        cands.sort(key=lambda c: -c.score)
        top = cands[: dcfg.beam]
        ended.extend(c for c in top if c.finished)
        live = [c for c in top if not c.finished]
        if not live:
            break

    def key(h):
        return h.score / (len(h.labels) + 1) if dcfg.length_norm else h.score

    if ended:
        return max(ended, key=key)
    pool = live or [root]
    best = max(pool, key=key)
    best.warning = "no hypothesis finished within max_len"
    return best


def greedy_decode(store, cfg, G, gamma=0.4, max_len=32, length=None):
    """Pick the best-scoring next token at every step; stop at eos."""
    return joint_beam_search(store, cfg, G, DecodeConfig(beam=1, gamma=gamma, max_len=max_len), length=length)


def decode_mixture(store, cfg, O, dcfg=None, scorer=None, length=None):
    """Encode once, then run the joint beam search independently for each output G^u."""
    O = np.asarray(O)
    if O.ndim == 2:
        O = O[None]
    if length is not None:
        O = O[:, :length]
    with ad.no_grad():
        enc = encode(store, cfg.encoder, Tensor(O))
    return [joint_beam_search(store, cfg, G.data[0], dcfg, scorer) for G in enc.rec_reprs]


# ---------------------------------------------------------------------------
# Scoring
# ---------------------------------------------------------------------------


@dataclass
class EditResult:
    distance: int
    substitutions: int
    deletions: int
    insertions: int
    ref_len: int

    @property
    def cer(self):
        return self.distance / max(1, self.ref_len)

    @property
    def empty_ref(self):
        return self.ref_len == 0


def edit_distance(hyp, ref):
    """Levenshtein distance with a substitution/deletion/insertion breakdown."""
    hyp, ref = list(hyp), list(ref)
    n, m = len(ref), len(hyp)
    d = np.zeros((n + 1, m + 1), dtype=np.int64)
    d[:, 0] = np.arange(n + 1)
    d[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            cost = 0 if ref[i - 1] == hyp[j - 1] else 1
            d[i, j] = min(d[i - 1, j - 1] + cost, d[i - 1, j] + 1, d[i, j - 1] + 1)
    # backtrace, preferring match/substitution, then deletion, then insertion
    i, j = n, m
    sub = dele = ins = 0
    while i > 0 or j > 0:
        if i > 0 and j > 0 and d[i, j] == d[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1]):
            sub += ref[i - 1] != hyp[j - 1]
            i, j = i - 1, j - 1
        elif i > 0 and d[i, j] == d[i - 1, j] + 1:
            dele += 1
            i -= 1
        else:
            ins += 1
            j -= 1
    return EditResult(int(d[n, m]), int(sub), dele, ins, n)


@dataclass
class ScoreReport:
    per_output_cer: list
    permutation: tuple
    distances: list
    ref_lengths: list
    high_energy_cer: float | None = None
    low_energy_cer: float | None = None

    @property
    def average_cer(self):
        return float(np.mean(self.per_output_cer))

    def as_dict(self):
        return {
            "per_output_cer": self.per_output_cer,
            "permutation": list(self.permutation),
            "distances": self.distances,
            "ref_lengths": self.ref_lengths,
            "high_energy_cer": self.high_energy_cer,
            "low_energy_cer": self.low_energy_cer,
            "average_cer": self.average_cer,
        }


def score_multi(hyps, refs):
    """Score S hypotheses against S references under the distance-minimising permutation.

    A single hypothesis is duplicated against every reference (baseline
    protocol).  ``refs[0]`` is taken as the high-energy speaker, so
    ``per_output_cer`` is indexed by reference.
    """
    S = len(refs)
    if len(hyps) == 1 and S > 1:
        hyps = list(hyps) * S
    if len(hyps) != S:
        raise ValueError(f"{len(hyps)} hypotheses for {S} references")
    dist = np.array([[edit_distance(h, r).distance for r in refs] for h in hyps])
    best, best_perm = None, None
    for perm in itertools.permutations(range(S)):
        total = sum(int(dist[u, perm[u]]) for u in range(S))
        if best is None or total < best:
            best, best_perm = total, perm
    per_ref = [0.0] * S
    dists = [0] * S
    for u, v in enumerate(best_perm):
        dists[v] = int(dist[u, v])
        per_ref[v] = dists[v] / max(1, len(refs[v]))
    report = ScoreReport(per_ref, best_perm, dists, [len(r) for r in refs])
    if S >= 2:
        report.high_energy_cer, report.low_energy_cer = per_ref[0], per_ref[1]
    return report


@dataclass
class CorpusScore:
    """Corpus CERs: total edit distance over total reference length, per energy rank."""

    distances: Counter = field(default_factory=Counter)
    lengths: Counter = field(default_factory=Counter)
    n: int = 0

    def add(self, report):
        for v, (d, n) in enumerate(zip(report.distances, report.ref_lengths)):
            self.distances[v] += d
            self.lengths[v] += n
        self.n += 1

    def cer(self, v):
        return self.distances[v] / max(1, self.lengths[v])

    @property
    def average(self):
        ks = sorted(self.lengths)
        return float(np.mean([self.cer(v) for v in ks])) if ks else 0.0

    def as_dict(self):
        ks = sorted(self.lengths)
        out = {"n": self.n, "average_cer": self.average, "per_speaker_cer": [self.cer(v) for v in ks]}
        if len(ks) >= 2:
            out["high_energy_cer"], out["low_energy_cer"] = self.cer(0), self.cer(1)
        return out

    def table(self, label="model"):
        d = self.as_dict()
        hi = d.get("high_energy_cer", d["average_cer"]) * 100
        lo = d.get("low_energy_cer", d["average_cer"]) * 100
        return (
            f"{'Split':<16}{'High E. spk.':>14}{'Low E. spk.':>14}{'Avg.':>8}\n"
            f"{label:<16}{hi:>14.1f}{lo:>14.1f}{d['average_cer'] * 100:>8.1f}\n"
        )


def evaluate(store, cfg, examples, dcfg=None, scorer=None):
    """Decode and score ``(features, refs, ...)`` examples; returns ``(CorpusScore, rows)``."""
    total = CorpusScore()
    rows = []
    for ex in examples:
        feats, refs = ex[0], ex[1]
        hyps = decode_mixture(store, cfg, feats, dcfg, scorer)
        rep = score_multi([h.labels for h in hyps], refs)
        total.add(rep)
        rows.append((hyps, rep))
    return total, rows


# ---------------------------------------------------------------------------
# Hidden-vector export
# ---------------------------------------------------------------------------


def _sign_fix(v):
    k = int(np.argmax(np.abs(v)))
    return v if v[k] >= 0 else -v


def pca_power_iteration(X, n_components=2, tol=1e-9, max_iter=10000):
    """Principal axes of ``X`` (rows are samples) by power iteration with deflation.

    Returns ``(components (k, C), eigenvalues (k,), mean (C,))``.  Each
    component's largest-magnitude coordinate is positive.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.shape[0] < 2:
        raise ValueError("PCA needs at least two rows")
    mean = X.mean(axis=0)
    Xc = X - mean
    cov = Xc.T @ Xc / (X.shape[0] - 1)
    k = min(n_components, cov.shape[0])
    comps, vals = [], []
    rng = np.random.default_rng(0)
    A = cov.copy()
    for _ in range(k):
        v = rng.normal(size=cov.shape[0])
        v /= np.linalg.norm(v)
        lam = 0.0
        for _ in range(max_iter):
            w = A @ v
            nw = np.linalg.norm(w)
            if nw == 0.0:
                lam = 0.0
                break
            w /= nw
            # compare up to sign
            delta = min(np.linalg.norm(w - v), np.linalg.norm(w + v))
            v = w
            lam = float(v @ A @ v)
            if delta < tol:
                break
        v = _sign_fix(v)
        comps.append(v)
        vals.append(max(lam, 0.0))
        A = A - lam * np.outer(v, v)
    return np.array(comps), np.array(vals), mean


def dump_hidden(store, cfg, O, out_dir, prefix="hidden", n_components=2):
    """Write each G^u as CSV plus a PCA projection over the pooled frames of all outputs.

    Returns a dict of written paths and notes.
    """
    O = np.asarray(O)
    if O.ndim == 2:
        O = O[None]
    with ad.no_grad():
        enc = encode(store, cfg.encoder, Tensor(O))
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    Gs = [G.data[0] for G in enc.rec_reprs]
    written = {"raw": [], "pca": [], "notes": []}
    for u, G in enumerate(Gs):
        p = out / f"{prefix}_G{u + 1}.csv"
        _write_csv(p, G)
        written["raw"].append(p)
    pooled = np.concatenate(Gs, axis=0)
    if Gs[0].shape[0] < 2:
        written["notes"].append("PCA skipped: fewer than two frames")
        return written
    comps, vals, mean = pca_power_iteration(pooled, n_components)
    written["eigenvalues"] = vals.tolist()
    for u, G in enumerate(Gs):
        p = out / f"{prefix}_G{u + 1}_pca.csv"
        _write_csv(p, (G - mean) @ comps.T)
        written["pca"].append(p)
    return written


def _write_csv(path, M):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([str(i) for i in range(M.shape[1])])
        for row in M:
            w.writerow([repr(float(x)) for x in row])
