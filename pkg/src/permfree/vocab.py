"""Character vocabulary and the reserved ids around it.

Token ids ``0..V-1`` are characters.  ``eos = V`` and ``sos = V+1`` are
reserved and never appear inside a label sequence.  The CTC head uses its own
class layout with blank at index 0 (``ctc class = token + 1``).
"""

from __future__ import annotations

from dataclasses import dataclass

DEFAULT_CHARS = "abcdefgh "


@dataclass(frozen=True)
class Vocab:
    chars: str = DEFAULT_CHARS

    def __post_init__(self):
        if len(set(self.chars)) != len(self.chars):
            raise ValueError("vocabulary characters must be unique")
        if not self.chars:
            raise ValueError("empty vocabulary")

    @property
    def size(self):
        return len(self.chars)

    @property
    def eos(self):
        return len(self.chars)

    @property
    def sos(self):
        return len(self.chars) + 1

    blank = 0

    @property
    def n_ctc_classes(self):
        return len(self.chars) + 1

    @property
    def n_dec_outputs(self):
        return len(self.chars) + 1

    @property
    def n_dec_inputs(self):
        return len(self.chars) + 2

    def encode(self, text):
        try:
            return [self.chars.index(c) for c in text]
        except ValueError:
            bad = sorted(set(text) - set(self.chars))
            raise ValueError(f"characters {bad!r} not in vocabulary") from None

    def decode(self, ids):
        return "".join(self.chars[i] for i in ids if 0 <= i < len(self.chars))
