"""Model configuration and parameter construction for the joint CTC/attention recognizer."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

from .attention import DecoderConfig, declare_decoder
from .ctc import declare_ctc_head
from .encoder import EncoderConfig, declare_encoder
from .layers import ParamStore
from .vocab import DEFAULT_CHARS, Vocab


@dataclass
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    chars: str = DEFAULT_CHARS

    @property
    def vocab(self):
        return Vocab(self.chars)

    @property
    def n_speakers(self):
        return self.encoder.n_speakers

    def to_dict(self):
        d = asdict(self)
        d["encoder"]["mix_channels"] = list(d["encoder"]["mix_channels"])
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(
            encoder=EncoderConfig(**d.get("encoder", {})),
            decoder=DecoderConfig(**d.get("decoder", {})),
            chars=d.get("chars", DEFAULT_CHARS),
        )

    def with_speakers(self, n):
        d = self.to_dict()
        d["encoder"]["n_speakers"] = n
        return ModelConfig.from_dict(d)


def build_params(cfg, seed=0, init_range=0.1):
    """Declare every parameter of the model in a fresh :class:`ParamStore`."""
    store = ParamStore(seed=seed, init_range=init_range)
    declare_encoder(store, cfg.encoder)
    enc_dim = cfg.encoder.out_dim
    declare_ctc_head(store, enc_dim, cfg.vocab)
    declare_decoder(store, cfg.decoder, enc_dim, cfg.vocab)
    return store
