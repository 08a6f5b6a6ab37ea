"""Run configuration: JSON with comments, environment overrides, exhaustive validation."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .attention import DecoderConfig
from .decode import DecodeConfig
from .encoder import EncoderConfig
from .mixture import CorpusSpec, SynthConfig
from .model import ModelConfig
from .trainer import STAGES, StageSpec, TrainSchedule
from .vocab import DEFAULT_CHARS

ENV_PREFIX = "PERMFREE_"


class ConfigError(ValueError):
    """Raised with every validation problem found, one per line."""

    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


@dataclass
class ModelSection:
    split_variant: str = "blstm"
    n_speakers: int = 2
    in_channels: int = 1
    mix_channels: list = field(default_factory=lambda: [8, 8])
    pool: int = 2  # time subsampling factor
    sd_channels: int = 8
    sd_layers: int = 1
    rec_layers: int = 2
    cells: int = 32
    proj: int = 32
    dec_cells: int = 32
    att_dim: int = 32
    loc_filters: int = 4
    loc_width: int = 7
    alpha: float = 2.0  # attention inverse temperature
    max_label_len: int = 64


@dataclass
class TrainSection:
    lam: float = 0.1  # CTC weight in the multi-task loss
    eta: float = 0.1  # contrast-loss weight in the retraining stage
    rho: float = 0.95
    eps: float = 1e-8
    clip_norm: float = 5.0
    stages: list = field(default_factory=lambda: [
        {"name": "pretrain_single", "epochs": 10},
        {"name": "multi_speaker", "epochs": 20},
    ])
    batch_size: int = 8
    seed: int = 0
    init_range: float = 0.3
    dev_cer_every: int = 1
    dev_beam: int = 4
    max_dev: int | None = None


@dataclass
class DecodeSection:
    gamma: float = 0.4  # CTC weight in joint decoding
    beam: int = 20
    max_len: int = 32
    length_norm: bool = False
    pre_beam: int | None = None
    scorer_weight: float = 0.0


@dataclass
class DataSection:
    dir: str = "data"
    chars: str = DEFAULT_CHARS
    feat_dim: int = 16
    n_speakers: int = 12
    frames_per_label: int = 4
    noise_sigma: float = 0.1
    speaker_scale: float = 0.3
    speaker_shift: float = 0.5
    n_train: int = 2000
    n_dev: int = 200
    n_eval: int = 200
    n_reuse: int = 3
    snr_min: float = 0.0
    snr_max: float = 5.0
    seed: int = 0


SECTIONS = {"model": ModelSection, "train": TrainSection, "decode": DecodeSection, "data": DataSection}


@dataclass
class RunConfig:
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    decode: DecodeSection = field(default_factory=DecodeSection)
    data: DataSection = field(default_factory=DataSection)

    def to_dict(self):
        return asdict(self)

    # -- conversions into the library's config objects ------------------------

    def model_config(self):
        m = self.model
        enc = EncoderConfig(
            split_variant=m.split_variant,
            n_speakers=m.n_speakers,
            feat_dim=self.data.feat_dim,
            in_channels=m.in_channels,
            mix_channels=tuple(m.mix_channels),
            pool=m.pool,
            sd_channels=m.sd_channels,
            sd_layers=m.sd_layers,
            rec_layers=m.rec_layers,
            cells=m.cells,
            proj=m.proj,
        )
        dec = DecoderConfig(
            cells=m.dec_cells,
            att_dim=m.att_dim,
            loc_filters=m.loc_filters,
            loc_width=m.loc_width,
            alpha=m.alpha,
            max_label_len=m.max_label_len,
        )
        return ModelConfig(enc, dec, self.data.chars)

    def decode_config(self):
        d = self.decode
        return DecodeConfig(d.beam, d.gamma, d.max_len, d.length_norm, d.pre_beam, d.scorer_weight)

    def schedule(self):
        t = self.train
        return TrainSchedule(
            stages=[StageSpec(**s) for s in t.stages],
            batch_size=t.batch_size,
            clip_norm=t.clip_norm,
            lam=t.lam,
            eta=t.eta,
            rho=t.rho,
            eps=t.eps,
            seed=t.seed,
            init_range=t.init_range,
            dev_decode=DecodeConfig(beam=t.dev_beam, gamma=self.decode.gamma, max_len=self.decode.max_len),
            dev_cer_every=t.dev_cer_every,
            max_dev=t.max_dev,
        )

    def corpus_spec(self):
        d = self.data
        synth = SynthConfig(
            chars=d.chars,
            feat_dim=d.feat_dim,
            n_speakers=d.n_speakers,
            frames_per_label=d.frames_per_label,
            noise_sigma=d.noise_sigma,
            speaker_scale=d.speaker_scale,
            speaker_shift=d.speaker_shift,
        )
        return CorpusSpec(synth, d.n_train, d.n_dev, d.n_eval, d.n_reuse, d.snr_min, d.snr_max, d.seed)


# ---------------------------------------------------------------------------
# Parsing
# ---------------------------------------------------------------------------


def strip_comments(text):
    """Remove ``//`` and ``#`` line comments and ``/* */`` blocks outside string literals."""
    out = []
    i, n = 0, len(text)
    in_str = False
    while i < n:
        ch = text[i]
        if in_str:
            out.append(ch)
            if ch == "\\" and i + 1 < n:
                out.append(text[i + 1])
                i += 2
                continue
            if ch == '"':
                in_str = False
            i += 1
        elif ch == '"':
            in_str = True
            out.append(ch)
            i += 1
        elif text.startswith("//", i) or ch == "#":
            j = text.find("\n", i)
            i = n if j < 0 else j
        elif text.startswith("/*", i):
            j = text.find("*/", i + 2)
            i = n if j < 0 else j + 2
        else:
            out.append(ch)
            i += 1
    return "".join(out)


def _parse_env_value(raw):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def env_overrides(environ=None):
    """``PERMFREE_<SECTION>_<KEY>=value`` pairs as a nested dict; values parse as JSON when possible."""
    environ = os.environ if environ is None else environ
    out = {}
    for k, v in environ.items():
        if not k.startswith(ENV_PREFIX):
            continue
        rest = k[len(ENV_PREFIX):].lower()
        section, _, key = rest.partition("_")
        if section in SECTIONS and key:
            out.setdefault(section, {})[key] = _parse_env_value(v)
    return out


_TYPE_CHECKS = {
    "bool": lambda v: isinstance(v, bool),
    "int": lambda v: isinstance(v, int) and not isinstance(v, bool),
    "float": lambda v: isinstance(v, (int, float)) and not isinstance(v, bool),
    "str": lambda v: isinstance(v, str),
    "list": lambda v: isinstance(v, list),
}


def _check_type(value, annotation):
    base, _, rest = str(annotation).partition(" | ")
    if value is None:
        return rest == "None"
    return _TYPE_CHECKS[base](value)


def _validate_ranges(cfg, problems):
    m, t, d, data = cfg.model, cfg.train, cfg.decode, cfg.data
    if not 0.0 <= t.lam <= 1.0:
        problems.append(f"train.lam must lie in [0, 1], got {t.lam}")
    if not 0.0 <= d.gamma <= 1.0:
        problems.append(f"decode.gamma must lie in [0, 1], got {d.gamma}")
    if t.eta < 0:
        problems.append(f"train.eta must be non-negative, got {t.eta}")
    if not 0.0 < t.rho < 1.0:
        problems.append(f"train.rho must lie in (0, 1), got {t.rho}")
    if t.init_range <= 0:
        problems.append(f"train.init_range must be positive, got {t.init_range}")
    if t.eps <= 0:
        problems.append(f"train.eps must be positive, got {t.eps}")
    if t.clip_norm <= 0:
        problems.append(f"train.clip_norm must be positive, got {t.clip_norm}")
    if t.batch_size < 1:
        problems.append("train.batch_size must be >= 1")
    if d.beam < 1:
        problems.append("decode.beam must be >= 1")
    if d.max_len < 1:
        problems.append("decode.max_len must be >= 1")
    if m.split_variant not in ("none", "vgg", "blstm"):
        problems.append(f"model.split_variant must be none, vgg or blstm, got {m.split_variant!r}")
    elif m.split_variant == "none" and m.n_speakers != 1:
        problems.append("model.split_variant 'none' requires model.n_speakers = 1")
    if m.n_speakers < 1:
        problems.append("model.n_speakers must be >= 1")
    if m.loc_width % 2 != 1:
        problems.append("model.loc_width must be odd")
    for k in ("pool", "cells", "proj", "dec_cells", "att_dim", "loc_filters", "rec_layers", "sd_channels"):
        if getattr(m, k) < 1:
            problems.append(f"model.{k} must be >= 1")
    if m.proj % 2:
        problems.append("model.proj must be even (split across directions)")
    if data.snr_min > data.snr_max:
        problems.append(f"data.snr_min {data.snr_min} exceeds data.snr_max {data.snr_max}")
    if data.n_reuse < 1:
        problems.append("data.n_reuse must be >= 1")
    if data.n_speakers < 2:
        problems.append("data.n_speakers must be >= 2")
    if len(set(data.chars)) != len(data.chars) or not data.chars:
        problems.append("data.chars must be non-empty with distinct characters")
    names = []
    for i, s in enumerate(t.stages):
        if not isinstance(s, dict) or set(s) != {"name", "epochs"}:
            problems.append(f"train.stages[{i}] must be an object with exactly 'name' and 'epochs'")
            continue
        if s["name"] not in STAGES:
            problems.append(f"train.stages[{i}].name {s['name']!r} is not one of {', '.join(STAGES)}")
        else:
            names.append(s["name"])
        if not isinstance(s["epochs"], int) or s["epochs"] < 0:
            problems.append(f"train.stages[{i}].epochs must be a non-negative integer")
    idx = [STAGES.index(n) for n in names]
    if idx != sorted(set(idx)):
        problems.append(f"train.stages must appear at most once each, in the order {', '.join(STAGES)}")


def build_config(raw, environ=None, check_paths=False):
    """Merge ``raw`` (a dict) with environment overrides, validate, and return a :class:`RunConfig`.

    Raises :class:`ConfigError` listing every problem found.
    """
    problems = []
    if not isinstance(raw, dict):
        raise ConfigError(["top level must be a JSON object"])
    merged = {k: dict(v) if isinstance(v, dict) else v for k, v in raw.items()}
    for section, kv in env_overrides(environ).items():
        merged.setdefault(section, {})
        if isinstance(merged[section], dict):
            merged[section].update(kv)
    built = {}
    for name in merged:
        if name not in SECTIONS:
            problems.append(f"unknown section {name!r}")
    for name, cls in SECTIONS.items():
        values = merged.get(name, {})
        if not isinstance(values, dict):
            problems.append(f"section {name!r} must be an object")
            values = {}
        kwargs = {}
        known = {f.name: f for f in fields(cls)}
        for key, value in values.items():
            if key not in known:
                problems.append(f"unknown key {name}.{key}")
                continue
            if not _check_type(value, known[key].type):
                problems.append(f"{name}.{key} has the wrong type ({type(value).__name__})")
                continue
            kwargs[key] = float(value) if known[key].type == "float" else value
        built[name] = cls(**kwargs)
    cfg = RunConfig(**built)
    _validate_ranges(cfg, problems)
    if check_paths and not Path(cfg.data.dir).is_dir():
        problems.append(f"data.dir {cfg.data.dir!r} does not exist")
    if problems:
        raise ConfigError(problems)
    return cfg


def load_config(path=None, environ=None, check_paths=False):
    """Read a JSON-with-comments file (or use defaults when ``path`` is None)."""
    raw = {}
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as e:
            raise ConfigError([f"cannot read config {path}: {e.strerror}"]) from e
        try:
            raw = json.loads(strip_comments(text)) if text.strip() else {}
        except json.JSONDecodeError as e:
            raise ConfigError([f"config {path} is not valid JSON: {e}"]) from e
    return build_config(raw, environ, check_paths)
