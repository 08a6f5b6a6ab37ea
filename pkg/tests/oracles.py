"""Independent reference computations shared by several test modules."""

import itertools

import numpy as np

from permfree import autodiff as ad
from permfree.attention import decoder_step, initial_state, prepare_memory
from permfree.ctc import ctc_frame_posteriors
from permfree.gradchecks import tiny_model_config
from permfree.model import build_params


def decoder_fixture(seed, L=5):
    """Random single-output decoder over chars "ab" and a random encoder output."""
    cfg = tiny_model_config(1, "none")
    store = build_params(cfg, seed, 1.0)
    G = np.random.default_rng(seed).normal(size=(L, cfg.encoder.out_dim)) * 2
    return cfg, store, G


def att_logprob(store, cfg, G, seq, with_eos=True):
    """Teacher-forced attention log-probability of ``seq`` (plus eos), stepping one token at a time."""
    vocab = cfg.vocab
    with ad.no_grad():
        mem = prepare_memory(store, ad.Tensor(G[None]))
        st = initial_state(store, mem)
        total, prev = 0.0, vocab.sos
        targets = list(seq) + ([vocab.eos] if with_eos else [])
        for t in targets:
            logp, st = decoder_step(store, cfg.decoder, mem, np.array([prev]), st)
            total += float(logp.data[0, t])
            prev = t
    return total


def ctc_path_logprob(logp, seq, prefix=False):
    """Log of the summed probability of frame paths whose collapse equals (or starts with) ``seq``."""
    L, K = logp.shape
    total = -np.inf
    seq = [c + 1 for c in seq]
    for path in itertools.product(range(K), repeat=L):
        out = [c for i, c in enumerate(path) if c != 0 and (i == 0 or c != path[i - 1])]
        hit = out[: len(seq)] == seq if prefix else out == seq
        if hit:
            total = np.logaddexp(total, sum(logp[t, c] for t, c in enumerate(path)))
    return total


def ctc_logp(store, G):
    with ad.no_grad():
        return ctc_frame_posteriors(store, ad.Tensor(G)).data


def all_sequences(n_chars, max_len):
    for n in range(max_len + 1):
        yield from (list(s) for s in itertools.product(range(n_chars), repeat=n))


def exhaustive_best(store, cfg, G, gamma, max_len):
    """Argmax of the joint score over every sequence of at most ``max_len`` characters."""
    lp = ctc_logp(store, G)
    best, best_seq = -np.inf, None
    for seq in all_sequences(cfg.vocab.size, max_len):
        ctc = ctc_path_logprob(lp, seq) if gamma > 0 else 0.0
        score = gamma * ctc + (1 - gamma) * att_logprob(store, cfg, G, seq)
        if score > best:
            best, best_seq = score, seq
    return best_seq, best


def greedy_oracle(store, cfg, G, gamma, max_len):
    """Extend one token at a time by the best joint prefix score; stop on eos."""
    lp = ctc_logp(store, G)
    seq = []
    for _ in range(max_len + 1):
        options = []
        for t in range(cfg.vocab.size + 1):
            if t == cfg.vocab.eos:
                ctc = ctc_path_logprob(lp, seq) if gamma > 0 else 0.0
                att = att_logprob(store, cfg, G, seq)
            else:
                if len(seq) == max_len:
                    continue
                ctc = ctc_path_logprob(lp, seq + [t], prefix=True) if gamma > 0 else 0.0
                att = att_logprob(store, cfg, G, seq + [t], with_eos=False)
            options.append((gamma * ctc + (1 - gamma) * att, -t, t))
        _, _, t = max(options)
        if t == cfg.vocab.eos:
            return seq
        seq.append(t)
    return seq
