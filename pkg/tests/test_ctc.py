import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from permfree import autodiff as ad
from permfree.autodiff import Tensor, grad_check, log_softmax_arr
from permfree.ctc import (
    AlignmentInfeasible,
    collapse,
    ctc_alpha,
    ctc_beta,
    ctc_frame_posteriors,
    ctc_loss,
    ctc_loss_taped,
    ctc_nll,
    ctc_prefix_score,
    ctc_prefix_scores,
    declare_ctc_head,
    greedy_collapse,
    initial_prefix_state,
    min_frames,
    to_classes,
)
from permfree.layers import ParamStore
from permfree.vocab import Vocab


def _brute_force_nll(logp, ref):
    """-log of the summed probability of every frame path that collapses to ``ref``."""
    L, K = logp.shape
    total = -np.inf
    for path in itertools.product(range(K), repeat=L):
        merged = [c for i, c in enumerate(path) if i == 0 or c != path[i - 1]]
        if [c for c in merged if c != 0] == list(ref):
            total = np.logaddexp(total, sum(logp[t, c] for t, c in enumerate(path)))
    return -total


def test_two_frame_hand_example():
    logp = np.log(np.full((2, 2), 0.5))
    assert ctc_nll(logp, [1]) == pytest.approx(-math.log(0.75), abs=1e-12)
    assert ctc_loss(Tensor(np.zeros((2, 2))), [1]).data[0] == pytest.approx(0.28768207245178, abs=1e-12)


def test_repeated_label_needs_separating_blank():
    assert min_frames([1, 1]) == 3
    with pytest.raises(AlignmentInfeasible, match="alignment infeasible"):
        ctc_nll(np.log(np.full((2, 2), 0.5)), [1, 1])
    with pytest.raises(AlignmentInfeasible):
        ctc_loss(Tensor(np.zeros((2, 2))), [1, 1])


def test_alignment_infeasible_is_not_numeric_error():
    assert not issubclass(AlignmentInfeasible, ad.NumericError)


def test_matches_brute_force_on_random_small_cases():
    rng = np.random.default_rng(0)
    for _ in range(40):
        L = int(rng.integers(1, 6))
        n = int(rng.integers(0, 4))
        ref = [int(x) for x in rng.integers(1, 3, size=n)]
        if min_frames(ref) > L:
            continue
        logp = log_softmax_arr(rng.normal(size=(L, 3)) * 2)
        assert ctc_nll(logp, ref) == pytest.approx(_brute_force_nll(logp, ref), abs=1e-9)


def test_taped_variant_agrees_in_value_and_gradient():
    rng = np.random.default_rng(1)
    logits = rng.normal(size=(6, 4))
    ref = [1, 3, 3]
    a = ctc_loss(Tensor(logits), ref).data[0]
    b = ctc_loss_taped(Tensor(logits), ref).data
    assert a == pytest.approx(float(b), abs=1e-10)
    x1 = Tensor(logits.copy(), requires_grad=True)
    x2 = Tensor(logits.copy(), requires_grad=True)
    with ad.Tape():
        ad.backward(ctc_loss(x1, ref).sum())
    with ad.Tape():
        ad.backward(ctc_loss_taped(x2, ref))
    np.testing.assert_allclose(x1.grad, x2.grad, atol=1e-10)


def test_analytic_gradient_matches_finite_differences():
    rng = np.random.default_rng(2)
    x = Tensor(rng.normal(size=(2, 7, 4)))
    refs = [[1, 2, 2], [3]]
    assert grad_check(lambda t: ctc_loss(t, refs, [7, 4]).sum(), x) < 1e-6


def test_padding_frames_are_ignored():
    rng = np.random.default_rng(3)
    logits = rng.normal(size=(1, 6, 3))
    padded = np.concatenate([logits, rng.normal(size=(1, 3, 3)) * 50], axis=1)
    a = ctc_loss(Tensor(logits), [[1, 2]]).data
    b = ctc_loss(Tensor(padded), [[1, 2]], [6]).data
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_forward_backward_posterior_constant_over_frames():
    rng = np.random.default_rng(4)
    logp = log_softmax_arr(rng.normal(size=(8, 4)))
    ref = [2, 1, 1]
    alpha, beta = ctc_alpha(logp, ref), ctc_beta(logp, ref)
    per_frame = np.logaddexp.reduce(alpha + beta, axis=1)
    np.testing.assert_allclose(per_frame, -ctc_nll(logp, ref), atol=1e-9)


def test_probabilities_over_all_references_sum_to_one():
    rng = np.random.default_rng(5)
    L = 3
    logp = log_softmax_arr(rng.normal(size=(L, 3)))
    total = 0.0
    for n in range(L + 1):
        for ref in itertools.product([1, 2], repeat=n):
            if min_frames(ref) <= L:
                total += math.exp(-ctc_nll(logp, list(ref)))
    assert total == pytest.approx(1.0, abs=1e-12)


def test_frame_posteriors_are_normalised_and_uniform_at_zero():
    vocab = Vocab("ab")
    s = ParamStore(0)
    declare_ctc_head(s, 4, vocab)
    G = Tensor(np.random.default_rng(6).normal(size=(5, 4)))
    lp = ctc_frame_posteriors(s, G).data
    np.testing.assert_allclose(np.exp(lp).sum(axis=-1), 1.0, atol=1e-12)
    s["ctc.W"].data[:] = 0
    s["ctc.b"].data[:] = 0
    np.testing.assert_allclose(ctc_frame_posteriors(s, G).data, np.log(1 / 3))


def test_collapse_hand_trace():
    # blank a a b blank b  ->  a b b
    pattern = [0, 1, 1, 2, 0, 2]
    assert collapse(pattern) == [1, 2, 2]
    logits = np.full((6, 3), -5.0)
    logits[np.arange(6), pattern] = 5.0
    assert greedy_collapse(logits) == [1, 2, 2]
    assert to_classes([0, 1]) == [1, 2]


def _prefix_total(ref, lp):
    st_ = initial_prefix_state(lp)
    total = 0.0
    for c in ref:
        d, st_ = ctc_prefix_score(st_, c, lp)
        total += d
    d, _ = ctc_prefix_score(st_, None, lp)
    return total + d


@settings(max_examples=40, deadline=None)
@given(
    st.integers(1, 7),
    st.lists(st.integers(1, 3), max_size=4),
    st.integers(0, 2**31 - 1),
)
def test_prefix_deltas_sum_to_negated_loss(L, ref, seed):
    lp = log_softmax_arr(np.random.default_rng(seed).normal(size=(L, 4)) * 2)
    if min_frames(ref) > L:
        assert _prefix_total(ref, lp) == -np.inf
        return
    assert _prefix_total(ref, lp) == pytest.approx(-ctc_nll(lp, ref), abs=1e-9)


def test_prefix_state_basics():
    lp = log_softmax_arr(np.random.default_rng(7).normal(size=(5, 3)))
    s0 = initial_prefix_state(lp)
    assert s0.r[0, 1] == pytest.approx(lp[0, 0])
    with pytest.raises(ValueError):
        ctc_prefix_score(s0, 0, lp)
    deltas, states = ctc_prefix_scores(s0, [1, 2], lp)
    for c, d, s in zip([1, 2], deltas, states):
        d1, s1 = ctc_prefix_score(s0, c, lp)
        assert d == pytest.approx(d1)
        np.testing.assert_array_equal(s.r, s1.r)
    # prefix probabilities of all one-label extensions cannot exceed 1
    assert np.logaddexp.reduce(deltas) <= 1e-12
    assert all(d <= 1e-12 for d in deltas)
