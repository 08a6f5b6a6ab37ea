"""Synthetic single-speaker utterances and two-speaker mixture corpora.

Features live in a toy "spectral" space: each character has a prototype
vector, a speaker is an affine map of the prototype table, and an utterance
repeats each label's row for a fixed number of frames plus Gaussian noise.
Mixtures add the two feature matrices after scaling the first utterance to
the requested SNR.  This is additive in feature space, not waveform space.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .layers import derive_seed
from .vocab import Vocab

log = logging.getLogger(__name__)

FEATURE_MAGIC = b"PFFEAT\x00\x00"
FEATURE_VERSION = 1


@dataclass
class Utterance:
    id: str
    speaker: str
    labels: list
    features: np.ndarray

    @property
    def duration(self):
        return int(self.features.shape[0])


@dataclass
class MixtureExample:
    id: str
    component_ids: tuple
    speakers: tuple
    snr_db: float
    offset_frames: int
    features: np.ndarray
    refs: tuple  # refs[0] belongs to the higher-energy speaker
    gain: float = 1.0
    durations: tuple = ()

    @property
    def duration(self):
        return int(self.features.shape[0])


@dataclass
class Speaker:
    id: str
    scale: np.ndarray
    shift: np.ndarray

    def transform(self, table):
        return table * self.scale[None, :] + self.shift[None, :]


@dataclass
class SynthConfig:
    chars: str = Vocab().chars
    feat_dim: int = 16
    n_speakers: int = 12
    frames_per_label: int = 4
    noise_sigma: float = 0.1
    min_words: int = 1
    max_words: int = 2
    min_word_len: int = 2
    max_word_len: int = 3
    speaker_scale: float = 0.3
    speaker_shift: float = 0.5
    jitter: bool = False


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------


def make_emission_table(n_labels, dim, seed):
    """Random unit-norm label prototypes, rows pairwise distinct."""
    rng = np.random.default_rng(derive_seed(seed, "emission"))
    table = rng.normal(size=(n_labels, dim))
    table /= np.linalg.norm(table, axis=1, keepdims=True)
    return table


def make_speakers(n, dim, seed, scale=0.3, shift=0.5):
    rng = np.random.default_rng(derive_seed(seed, "speakers"))
    return [
        Speaker(f"spk{k:02d}", 1.0 + rng.uniform(-scale, scale, dim), rng.normal(0.0, shift / np.sqrt(dim), dim))
        for k in range(n)
    ]


def render_utterance(labels, emission_table, noise_sigma, frames_per_label, seed, jitter=False, uid="utt", speaker="spk"):
    """Repeat each label's prototype ``frames_per_label`` times and add Gaussian noise.

    With ``jitter`` every label boundary gets one extra frame with probability 1/2.
    """
    table = np.asarray(emission_table)
    labels = [int(x) for x in labels]
    if any(x < 0 or x >= len(table) for x in labels):
        raise ValueError(f"label outside emission table of {len(table)} rows: {labels}")
    rng = np.random.default_rng(seed)
    reps = np.full(len(labels), int(frames_per_label))
    if jitter:
        reps += rng.integers(0, 2, size=len(labels))
    rows = np.repeat(np.asarray(labels, dtype=np.int64), reps)
    feats = table[rows] + noise_sigma * rng.normal(size=(len(rows), table.shape[1]))
    return Utterance(uid, speaker, labels, feats)


def power(x):
    x = np.asarray(x)
    if x.size == 0:
        return 0.0
    return float(np.mean(x * x))


def mix_pair(u1, u2, snr_db, offset, seed=None, uid=None):
    """Mix two utterances of different speakers at ``snr_db`` (u1 relative to u2).

    The shorter utterance is zero-padded, starting at ``offset`` frames.
    u1 is scaled by ``g = 10^(snr/20) * sqrt(P2/P1)`` with P the mean squared
    value over the utterance's own (active) frames.
    """
    if u1.speaker == u2.speaker:
        raise ValueError(f"cannot mix two utterances of speaker {u1.speaker}")
    p1, p2 = power(u1.features), power(u2.features)
    if p1 == 0.0 or p2 == 0.0:
        raise ValueError("zero-power utterance cannot be mixed")
    T1, T2 = u1.duration, u2.duration
    if offset < 0 or offset > abs(T1 - T2):
        raise ValueError(f"offset {offset} outside [0, {abs(T1 - T2)}]")
    g = 10.0 ** (snr_db / 20.0) * np.sqrt(p2 / p1)
    T = max(T1, T2)
    a = np.zeros((T, u1.features.shape[1]))
    b = np.zeros_like(a)
    if T1 >= T2:
        a[:T1] = g * u1.features
        b[offset : offset + T2] = u2.features
    else:
        a[offset : offset + T1] = g * u1.features
        b[:T2] = u2.features
    e1, e2 = g * g * p1, p2
    refs = (list(u1.labels), list(u2.labels))
    speakers = (u1.speaker, u2.speaker)
    ids = (u1.id, u2.id)
    if e2 > e1:
        refs, speakers, ids = refs[::-1], speakers[::-1], ids[::-1]
    return MixtureExample(
        id=uid or f"{u1.id}+{u2.id}",
        component_ids=ids,
        speakers=speakers,
        snr_db=float(snr_db),
        offset_frames=int(offset),
        features=a + b,
        refs=refs,
        gain=float(g),
        durations=(T1, T2),
    )


def achieved_snr(u1, u2, gain):
    return 10.0 * np.log10(gain * gain * power(u1.features) / power(u2.features))


# ---------------------------------------------------------------------------
# Corpus generation
# ---------------------------------------------------------------------------


@dataclass
class MixerState:
    counts: np.ndarray
    n_reuse: int
    fallbacks: int = 0

    @classmethod
    def fresh(cls, n, n_reuse):
        return cls(np.full(n, n_reuse, dtype=np.int64), n_reuse)

    def distribution(self):
        total = self.counts.sum()
        if total == 0:
            return np.zeros(len(self.counts))
        return self.counts / total


def _sample_partner(rng, state, speakers, i):
    allowed = np.array([s != speakers[i] for s in speakers])
    p = state.distribution() * allowed
    if p.sum() > 0:
        return int(rng.choice(len(p), p=p / p.sum())), False
    # every other-speaker count is exhausted: ignore counts for this draw
    p = allowed / allowed.sum()
    return int(rng.choice(len(p), p=p)), True


def generate_corpus(utterances, n_reuse=3, snr_range=(0.0, 5.0), seed=0, prefix="mix"):
    """Pair every utterance with a partner drawn from the reuse-count distribution.

    Returns ``(mixtures, state)``.  ``state.fallbacks`` counts draws made after
    all partner counts ran out (each one is also logged as a warning).
    """
    if n_reuse < 1:
        raise ValueError("n_reuse must be >= 1")
    speakers = [u.speaker for u in utterances]
    if len(set(speakers)) < 2:
        raise ValueError("need at least two speakers to build mixtures")
    rng = np.random.default_rng(derive_seed(seed, "corpus", prefix))
    state = MixerState.fresh(len(utterances), n_reuse)
    out = []
    lo, hi = snr_range
    for i, ui in enumerate(utterances):
        j, fell_back = _sample_partner(rng, state, speakers, i)
        if fell_back:
            state.fallbacks += 1
            log.warning("partner counts exhausted for %s; sampling ignoring counts", ui.id)
        uj = utterances[j]
        snr = float(rng.uniform(lo, hi))
        offset = int(rng.integers(0, abs(ui.duration - uj.duration) + 1))
        out.append(mix_pair(ui, uj, snr, offset, uid=f"{prefix}{i:05d}"))
        if state.counts[j] > 0:
            state.counts[j] -= 1
    return out, state


def random_text(rng, cfg):
    letters = cfg.chars.replace(" ", "")
    words = []
    for _ in range(int(rng.integers(cfg.min_words, cfg.max_words + 1))):
        n = int(rng.integers(cfg.min_word_len, cfg.max_word_len + 1))
        words.append("".join(rng.choice(list(letters), size=n)))
    # words run together when the vocabulary has no space
    return (" " if " " in cfg.chars else "").join(words)


def synth_utterances(n, cfg, seed, split="train"):
    """``n`` single-speaker utterances with speakers cycling over the speaker set."""
    vocab = Vocab(cfg.chars)
    table = make_emission_table(vocab.size, cfg.feat_dim, seed)
    speakers = make_speakers(cfg.n_speakers, cfg.feat_dim, seed, cfg.speaker_scale, cfg.speaker_shift)
    rng = np.random.default_rng(derive_seed(seed, "text", split))
    utts = []
    for k in range(n):
        spk = speakers[k % len(speakers)]
        labels = vocab.encode(random_text(rng, cfg))
        utts.append(
            render_utterance(
                labels,
                spk.transform(table),
                cfg.noise_sigma,
                cfg.frames_per_label,
                derive_seed(seed, "render", split, k),
                jitter=cfg.jitter,
                uid=f"{split}{k:05d}",
                speaker=spk.id,
            )
        )
    return utts


# ---------------------------------------------------------------------------
# Files
# ---------------------------------------------------------------------------


def write_features(path, feats):
    """``magic | u32 version | u32 T | u32 D | 4s dtype | float64 LE row-major``."""
    feats = np.ascontiguousarray(feats, dtype="<f8")
    T, D = feats.shape
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<III4s", FEATURE_VERSION, T, D, b"<f8\x00"))
        fh.write(feats.tobytes())


def read_features(path):
    raw = Path(path).read_bytes()
    if raw[:8] != FEATURE_MAGIC:
        raise ValueError(f"{path}: not a feature file")
    version, T, D, dtype = struct.unpack("<III4s", raw[8:24])
    if version != FEATURE_VERSION or dtype.rstrip(b"\x00") != b"<f8":
        raise ValueError(f"{path}: unsupported feature file (version {version}, dtype {dtype!r})")
    body = raw[24:]
    if len(body) != 8 * T * D:
        raise ValueError(f"{path}: expected {T}x{D} float64 values, found {len(body) // 8}")
    return np.frombuffer(body, dtype="<f8").reshape(T, D).astype(np.float64)


def utterance_record(u, feat_path, vocab):
    return {"id": u.id, "speaker": u.speaker, "features": str(feat_path), "text": vocab.decode(u.labels),
            "frames": u.duration}


def mixture_record(m, feat_path, vocab):
    return {
        "id": m.id,
        "speakers": list(m.speakers),
        "components": list(m.component_ids),
        "features": str(feat_path),
        "texts": [vocab.decode(r) for r in m.refs],
        "snr_db": m.snr_db,
        "offset": m.offset_frames,
        "gain": m.gain,
        "frames": m.duration,
    }


def write_manifest(path, records):
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


def read_manifest(path):
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def load_examples(manifest_path, vocab):
    """Read a manifest into ``(features, refs, record)`` triples; refs is a list of token lists."""
    base = Path(manifest_path).parent
    out = []
    for rec in read_manifest(manifest_path):
        fp = Path(rec["features"])
        if not fp.is_absolute():
            fp = base / fp
        texts = rec["texts"] if "texts" in rec else [rec["text"]]
        out.append((read_features(fp), [vocab.encode(t) for t in texts], rec))
    return out


@dataclass
class CorpusSpec:
    synth: SynthConfig = field(default_factory=SynthConfig)
    n_train: int = 2000
    n_dev: int = 200
    n_eval: int = 200
    n_reuse: int = 3
    snr_min: float = 0.0
    snr_max: float = 5.0
    seed: int = 0


def build_corpus(spec):
    """Single-speaker and mixture splits as in-memory objects."""
    splits = {}
    for name, n in (("train", spec.n_train), ("dev", spec.n_dev), ("eval", spec.n_eval)):
        utts = synth_utterances(n, spec.synth, spec.seed, split=name)
        mixes, state = generate_corpus(utts, spec.n_reuse, (spec.snr_min, spec.snr_max), spec.seed, prefix=f"{name}_mix")
        splits[name] = {"single": utts, "mixed": mixes, "fallbacks": state.fallbacks}
    return splits


def write_corpus(spec, out_dir):
    """Write features and manifests for every split; returns the manifest paths."""
    out = Path(out_dir)
    vocab = Vocab(spec.synth.chars)
    paths = {}
    for name, parts in build_corpus(spec).items():
        fdir = out / "feats" / name
        fdir.mkdir(parents=True, exist_ok=True)
        single, mixed = [], []
        for u in parts["single"]:
            fp = Path("feats") / name / f"{u.id}.feat"
            write_features(out / fp, u.features)
            single.append(utterance_record(u, fp, vocab))
        for m in parts["mixed"]:
            fp = Path("feats") / name / f"{m.id}.feat"
            write_features(out / fp, m.features)
            mixed.append(mixture_record(m, fp, vocab))
        write_manifest(out / f"{name}_single.jsonl", single)
        write_manifest(out / f"{name}_mixed.jsonl", mixed)
        paths[name] = {"single": out / f"{name}_single.jsonl", "mixed": out / f"{name}_mixed.jsonl",
                       "fallbacks": parts["fallbacks"]}
    return paths
