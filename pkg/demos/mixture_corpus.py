"""How the synthetic two-speaker corpus is built.

Run: python demos/mixture_corpus.py
"""

import numpy as np

from permfree.mixture import CorpusSpec, SynthConfig, achieved_snr, build_corpus, power
from permfree.vocab import Vocab


def main():
    spec = CorpusSpec(n_train=60, n_dev=12, n_eval=12)
    corpus = build_corpus(spec)
    utts, mixes = corpus["train"]["single"], corpus["train"]["mixed"]
    vocab = Vocab(SynthConfig().chars)
    print(f"{len(utts)} single-speaker utterances -> {len(mixes)} mixtures "
          f"({corpus['train']['fallbacks']} fallback partner draws)")
    by_id = {u.id: u for u in utts}
    for m in mixes[:4]:
        a, b = (by_id[c] for c in m.component_ids)
        print(f"\n{m.id}: speakers {m.speakers}, SNR {m.snr_db:.2f} dB, offset {m.offset_frames}")
        print(f"  durations {a.duration} and {b.duration} -> mixture {m.duration} frames")
        print(f"  louder reference: '{vocab.decode(m.refs[0])}', quieter: '{vocab.decode(m.refs[1])}'")
        first = utts[int(m.id[-5:])]
        partner = b if first is a else a
        print(f"  achieved SNR {achieved_snr(first, partner, m.gain):.6f} dB, gain {m.gain:.3f}")
    uses = {}
    for i, m in enumerate(mixes):
        for c in m.component_ids:
            if c != utts[i].id:
                uses[c] = uses.get(c, 0) + 1
    print(f"\nmost reused partner appears {max(uses.values())} times (limit {spec.n_reuse})")
    print("mean frame power of single utterances:", round(float(np.mean([power(u.features) for u in utts])), 4))


if __name__ == "__main__":
    main()
