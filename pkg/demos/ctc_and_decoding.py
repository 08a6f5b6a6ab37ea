"""A guided look at the two scoring heads on a toy problem.

Run: python demos/ctc_and_decoding.py
"""

import numpy as np

from permfree.autodiff import log_softmax_arr
from permfree.ctc import collapse, ctc_nll, ctc_prefix_score, initial_prefix_state
from permfree.decode import DecodeConfig, joint_beam_search
from permfree.gradchecks import tiny_model_config
from permfree.model import build_params


def main():
    print("CTC marginalises over frame alignments.")
    logp = np.log(np.full((2, 2), 0.5))
    print("  two frames, p(a) = p(blank) = 0.5, reference 'a'")
    print("  alignments: a a / a - / - a  -> 3 x 0.25, loss = -ln 0.75 =", round(ctc_nll(logp, [1]), 5))
    print("  frame argmax '- a a b - b' collapses to", collapse([0, 1, 1, 2, 0, 2]), "(class ids a=1, b=2)")

    print("\nPrefix scores add up to the full-sequence probability.")
    lp = log_softmax_arr(np.random.default_rng(0).normal(size=(6, 3)))
    state, total = initial_prefix_state(lp), 0.0
    for c in (1, 2, 2):
        delta, state = ctc_prefix_score(state, c, lp)
        total += delta
        print(f"  append class {c}: delta {delta:+.4f}")
    delta, _ = ctc_prefix_score(state, None, lp)
    print(f"  end of sequence: delta {delta:+.4f}; total {total + delta:.6f} vs -loss {-ctc_nll(lp, [1, 2, 2]):.6f}")

    print("\nJoint decoding mixes attention and CTC scores with weight gamma.")
    cfg = tiny_model_config(1, "none")
    store = build_params(cfg, 0, 1.0)
    G = np.random.default_rng(1).normal(size=(6, cfg.encoder.out_dim)) * 2
    for gamma in (0.0, 0.4, 1.0):
        h = joint_beam_search(store, cfg, G, DecodeConfig(beam=8, gamma=gamma, max_len=4))
        print(f"  gamma={gamma}: '{cfg.vocab.decode(h.labels)}' att {h.att:.3f} ctc {h.ctc:.3f} joint {h.score:.3f}")


if __name__ == "__main__":
    main()
