import csv
import itertools

import numpy as np
import pytest

from oracles import (
    all_sequences,
    att_logprob,
    ctc_logp,
    ctc_path_logprob,
    decoder_fixture,
    exhaustive_best,
    greedy_oracle,
)
from permfree.decode import (
    BigramScorer,
    CorpusScore,
    DecodeConfig,
    decode_mixture,
    dump_hidden,
    edit_distance,
    greedy_decode,
    joint_beam_search,
    pca_power_iteration,
    score_multi,
)
from permfree.gradchecks import tiny_model_config
from permfree.model import build_params


@pytest.mark.parametrize("gamma", [0.0, 0.4, 1.0])
def test_wide_beam_is_exhaustive(gamma):
    for seed in range(5):
        cfg, store, G = decoder_fixture(seed)
        hyp = joint_beam_search(store, cfg, G, DecodeConfig(beam=27, gamma=gamma, max_len=3))
        best, score = exhaustive_best(store, cfg, G, gamma, 3)
        assert hyp.labels == best
        assert hyp.score == pytest.approx(score, abs=1e-9)


def test_scores_decompose_into_attention_and_ctc_parts():
    cfg, store, G = decoder_fixture(11)
    hyp = joint_beam_search(store, cfg, G, DecodeConfig(beam=27, gamma=0.4, max_len=3))
    assert hyp.att == pytest.approx(att_logprob(store, cfg, G, hyp.labels), abs=1e-9)
    assert hyp.ctc == pytest.approx(ctc_path_logprob(ctc_logp(store, G), hyp.labels), abs=1e-9)
    assert hyp.score == pytest.approx(0.4 * hyp.ctc + 0.6 * hyp.att)


@pytest.mark.parametrize("gamma", [0.0, 0.4, 1.0])
def test_beam_one_matches_greedy_oracle(gamma):
    for seed in range(5):
        cfg, store, G = decoder_fixture(100 + seed)
        hyp = greedy_decode(store, cfg, G, gamma=gamma, max_len=3)
        assert hyp.labels == greedy_oracle(store, cfg, G, gamma, 3)


def test_gamma_zero_ignores_ctc_head():
    cfg, store, G = decoder_fixture(3)
    a = joint_beam_search(store, cfg, G, DecodeConfig(beam=4, gamma=0.0, max_len=3))
    store["ctc.W"].data = np.random.default_rng(0).normal(size=store["ctc.W"].shape) * 10
    b = joint_beam_search(store, cfg, G, DecodeConfig(beam=4, gamma=0.0, max_len=3))
    assert a.labels == b.labels and a.score == b.score


def test_zero_max_len_forces_immediate_eos():
    cfg, store, G = decoder_fixture(4)
    hyp = joint_beam_search(store, cfg, G, DecodeConfig(beam=2, gamma=0.0, max_len=0))
    assert hyp.labels == [] and hyp.warning is None


def test_scorer_plugin_changes_the_objective():
    cfg, store, G = decoder_fixture(5)
    v = cfg.vocab
    scorer = BigramScorer(v.size, v.eos, v.sos).fit([[1, 1, 1]] * 50)
    row = scorer.counts[v.sos]
    assert scorer([], 1) == pytest.approx(np.log(row[1] / row.sum()))
    hyp = joint_beam_search(store, cfg, G, DecodeConfig(beam=27, gamma=0.0, max_len=3, scorer_weight=20.0), scorer)

    def lm(seq):
        return sum(scorer(seq[:i], t) for i, t in enumerate(seq + [v.eos]))

    best = max(all_sequences(v.size, 3), key=lambda s: att_logprob(store, cfg, G, s) + 20.0 * lm(s))
    assert hyp.labels == best == [1]
    assert hyp.lm == pytest.approx(lm(best))


def test_decode_mixture_returns_one_hypothesis_per_output():
    cfg = tiny_model_config(2, "blstm")
    store = build_params(cfg, 0, 0.5)
    O = np.random.default_rng(0).normal(size=(8, cfg.encoder.feat_dim))
    hyps = decode_mixture(store, cfg, O, DecodeConfig(beam=2, max_len=4))
    assert len(hyps) == 2


def test_config_validation():
    with pytest.raises(ValueError):
        DecodeConfig(beam=0)
    with pytest.raises(ValueError):
        DecodeConfig(gamma=1.5)


def _edit_oracle(h, r):
    # Wagner-Fischer over all alignments via memoised recursion
    from functools import lru_cache

    @lru_cache(None)
    def d(i, j):
        if i == 0 or j == 0:
            return i + j
        return min(d(i - 1, j) + 1, d(i, j - 1) + 1, d(i - 1, j - 1) + (h[i - 1] != r[j - 1]))

    return d(len(h), len(r))


def test_edit_distance_examples():
    assert edit_distance("abc", "abc").distance == 0
    e = edit_distance("axc", "abc")
    assert (e.distance, e.substitutions, e.deletions, e.insertions) == (1, 1, 0, 0)
    e = edit_distance("ab", "abc")
    assert (e.distance, e.deletions) == (1, 1)
    e = edit_distance("abcd", "abc")
    assert (e.distance, e.insertions) == (1, 1)
    empty = edit_distance("ab", "")
    assert empty.distance == 2 and empty.empty_ref and empty.cer == 2.0


def test_edit_distance_matches_oracle_on_random_pairs():
    rng = np.random.default_rng(0)
    for _ in range(300):
        h = "".join(rng.choice(list("abc"), size=int(rng.integers(0, 7))))
        r = "".join(rng.choice(list("abc"), size=int(rng.integers(0, 7))))
        e = edit_distance(h, r)
        assert e.distance == _edit_oracle(h, r)
        assert e.substitutions + e.deletions + e.insertions == e.distance


def test_score_multi_permutation_and_duplication():
    refs = [[0, 1, 2], [3, 3]]
    rep = score_multi(refs, refs)
    assert rep.per_output_cer == [0.0, 0.0]
    swapped = score_multi(refs[::-1], refs)
    assert swapped.permutation == (1, 0) and swapped.average_cer == 0.0
    dup = score_multi([refs[0]], refs)
    assert dup.per_output_cer[0] == 0.0
    assert dup.per_output_cer[1] == pytest.approx(edit_distance(refs[0], refs[1]).distance / 2)
    with pytest.raises(ValueError):
        score_multi([[0], [1], [2]], refs)


def test_score_multi_matches_brute_force_for_three_outputs():
    rng = np.random.default_rng(1)
    for _ in range(50):
        seqs = [list(rng.integers(0, 3, size=int(rng.integers(1, 5)))) for _ in range(6)]
        hyps, refs = seqs[:3], seqs[3:]
        rep = score_multi(hyps, refs)
        best = min(
            sum(edit_distance(hyps[u], refs[p[u]]).distance for u in range(3))
            for p in itertools.permutations(range(3))
        )
        assert sum(rep.distances) == best
        identity = sum(edit_distance(h, r).distance for h, r in zip(hyps, refs))
        assert sum(rep.distances) <= identity


def test_corpus_score_pools_distances():
    cs = CorpusScore()
    cs.add(score_multi([[0], [1, 1]], [[0], [1, 2]]))
    cs.add(score_multi([[5, 5, 5], [0]], [[0, 0, 0], [0]]))
    assert cs.cer(0) == pytest.approx(3 / 4)
    assert cs.cer(1) == pytest.approx(1 / 3)
    assert "model" in cs.table("model")


def test_pca_matches_dense_eigensolver():
    rng = np.random.default_rng(0)
    for _ in range(20):
        X = rng.normal(size=(10, 4)) * np.array([3.0, 2.0, 1.0, 0.5])
        comps, vals, _ = pca_power_iteration(X, 2)
        w, V = np.linalg.eigh(np.cov(X.T))
        order = np.argsort(w)[::-1]
        np.testing.assert_allclose(vals, w[order[:2]], atol=1e-6)
        for k in range(2):
            v = V[:, order[k]]
            assert min(np.abs(comps[k] - v).max(), np.abs(comps[k] + v).max()) < 1e-6
            assert comps[k][np.argmax(np.abs(comps[k]))] > 0


def test_pca_degenerate_inputs():
    _, vals, _ = pca_power_iteration(np.ones((5, 3)), 1)
    assert vals[0] == 0.0
    line = np.outer(np.arange(6.0), [1.0, 2.0, -2.0])
    comps, _, mean = pca_power_iteration(line, 1)
    proj = (line - mean) @ comps.T
    d_proj = np.abs(proj[:, None, 0] - proj[None, :, 0])
    d_orig = np.linalg.norm(line[:, None] - line[None], axis=-1)
    np.testing.assert_allclose(d_proj, d_orig, atol=1e-9)
    with pytest.raises(ValueError):
        pca_power_iteration(np.ones((1, 3)))


def test_dump_hidden_writes_raw_and_projected_csv(tmp_path):
    cfg = tiny_model_config(2, "blstm")
    store = build_params(cfg, 0, 0.5)
    O = np.random.default_rng(0).normal(size=(8, cfg.encoder.feat_dim))
    out = dump_hidden(store, cfg, O, tmp_path)
    assert len(out["raw"]) == 2 and len(out["pca"]) == 2
    with open(out["raw"][0]) as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == [str(i) for i in range(cfg.encoder.out_dim)]
    assert len(rows) == 1 + 4
    short = dump_hidden(store, cfg, O[:2], tmp_path / "short")
    assert short["notes"] and not short["pca"]
