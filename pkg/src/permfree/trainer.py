"""Optimization: AdaDelta with global-norm clipping, epsilon decay, staged curriculum.

Stages run in a fixed order: ``pretrain_single`` (one SD branch, unmixed
speech), ``multi_speaker`` (SD branches copied with multiplicative noise,
mixtures, permutation-free loss) and ``kl_retrain`` (adds the contrast loss).
"""

from __future__ import annotations

import contextlib
import json
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .ctc import min_frames
from .decode import CorpusScore, DecodeConfig, decode_mixture, score_multi
from .layers import derive_seed, save_checkpoint
from .model import build_params
from .objective import multi_speaker_loss, symmetric_kl_per_frame
from .encoder import encode

log = logging.getLogger(__name__)

STAGES = ("pretrain_single", "multi_speaker", "kl_retrain")


# ---------------------------------------------------------------------------
# AdaDelta
# ---------------------------------------------------------------------------


@dataclass
class AdaDeltaState:
    rho: float = 0.95
    eps: float = 1e-8
    acc_grad: dict = field(default_factory=dict)
    acc_delta: dict = field(default_factory=dict)
    skipped: int = 0


def global_norm(grads):
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))


def clip_by_global_norm(grads, clip_norm):
    """Scale all gradients by ``min(1, clip_norm / ||g||)``; returns ``(grads, norm)``."""
    norm = global_norm(grads)
    if clip_norm is not None and norm > clip_norm:
        scale = clip_norm / norm
        grads = {k: g * scale for k, g in grads.items()}
    return grads, norm


def adadelta_step(store, state, clip_norm=5.0, grads=None):
    """Apply one AdaDelta update in place.  Non-finite gradients skip the update.

    Returns the pre-clipping gradient norm (``nan`` when skipped).
    """
    if grads is None:
        grads = {n: (p.grad if p.grad is not None else np.zeros_like(p.data)) for n, p in store.items()}
    if not all(np.isfinite(g).all() for g in grads.values()):
        state.skipped += 1
        log.warning("non-finite gradient; update skipped")
        return float("nan")
    grads, norm = clip_by_global_norm(grads, clip_norm)
    rho, eps = state.rho, state.eps
    for name, g in grads.items():
        p = store[name]
        eg = state.acc_grad.get(name)
        ex = state.acc_delta.get(name)
        if eg is None:
            eg = np.zeros_like(p.data)
            ex = np.zeros_like(p.data)
        eg = rho * eg + (1.0 - rho) * g * g
        dx = -np.sqrt(ex + eps) / np.sqrt(eg + eps) * g
        ex = rho * ex + (1.0 - rho) * dx * dx
        state.acc_grad[name] = eg
        state.acc_delta[name] = ex
        p.data = p.data + dx
    store.version += 1
    return norm


def epsilon_decay(state, dev_history, factor=0.5):
    """Halve epsilon when the latest dev loss is worse than the one before."""
    if len(dev_history) >= 2 and dev_history[-1] > dev_history[-2]:
        state.eps *= factor
    return state


# ---------------------------------------------------------------------------
# Curriculum transfer
# ---------------------------------------------------------------------------


def transfer_to_multispeaker(single_store, single_cfg, n_speakers, seed):
    """Build an S-output model from a trained single-branch one.

    Branch 0 and every shared stage are copied exactly; branch u > 0 is
    ``w * (1 + Uniform(-0.1, 0.1))`` of branch 0, drawn independently per
    parameter from a generator seeded by ``(seed, name)``.
    """
    multi_cfg = single_cfg.with_speakers(n_speakers)
    multi = build_params(multi_cfg, seed=single_store.seed, init_range=single_store.init_range)
    for name, p in multi.items():
        if name.startswith("enc.sd.") and not name.startswith("enc.sd.0."):
            src = "enc.sd.0." + name.split(".", 3)[3]
            base = single_store[src].data
            if base.shape != p.shape:
                raise ValueError(f"cannot transfer {src} {base.shape} into {name} {p.shape}")
            rng = np.random.default_rng(derive_seed(seed, "transfer", name))
            p.data = base * (1.0 + rng.uniform(-0.1, 0.1, size=base.shape))
        else:
            if name not in single_store:
                raise ValueError(f"single-speaker model lacks parameter {name}")
            base = single_store[name].data
            if base.shape != p.shape:
                raise ValueError(f"shape mismatch for {name}: {base.shape} vs {p.shape}")
            p.data = base.copy()
    return multi, multi_cfg


# ---------------------------------------------------------------------------
# Data handling
# ---------------------------------------------------------------------------


@dataclass
class Example:
    features: np.ndarray
    refs: list
    id: str = ""

    @property
    def frames(self):
        return int(self.features.shape[0])


def feasible(ex, subsample):
    L = -(-ex.frames // subsample)
    return all(min_frames(r) <= L and L >= 1 for r in ex.refs)


def filter_feasible(examples, subsample):
    keep = [ex for ex in examples if feasible(ex, subsample)]
    if len(keep) < len(examples):
        log.warning("skipping %d examples with infeasible CTC alignment", len(examples) - len(keep))
    return keep


def make_batches(examples, batch_size, rng=None):
    """Length-bucketed batches; batch order shuffled when ``rng`` is given."""
    order = sorted(range(len(examples)), key=lambda i: (examples[i].frames, i))
    batches = [order[i : i + batch_size] for i in range(0, len(order), batch_size)]
    if rng is not None:
        perm = rng.permutation(len(batches))
        batches = [batches[k] for k in perm]
    return [[examples[i] for i in b] for b in batches]


def pad_batch(batch):
    T = max(ex.frames for ex in batch)
    D = batch[0].features.shape[1]
    O = np.zeros((len(batch), T, D))
    for i, ex in enumerate(batch):
        O[i, : ex.frames] = ex.features
    return O, [ex.frames for ex in batch], [ex.refs for ex in batch]


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


@dataclass
class StageSpec:
    name: str
    epochs: int


@dataclass
class TrainSchedule:
    stages: list = field(default_factory=lambda: [StageSpec("pretrain_single", 10), StageSpec("multi_speaker", 20)])
    batch_size: int = 8
    clip_norm: float = 5.0
    lam: float = 0.1
    eta: float = 0.1
    rho: float = 0.95
    eps: float = 1e-8
    seed: int = 0
    # Uniform(-r, r) init.  0.1 suits 320-unit layers; at 32 units the same
    # per-layer gain needs about 0.1 * sqrt(10).
    init_range: float = 0.3
    dev_decode: DecodeConfig = field(default_factory=lambda: DecodeConfig(beam=4))
    dev_cer_every: int = 1
    max_dev: int | None = None

    def __post_init__(self):
        self.stages = [s if isinstance(s, StageSpec) else StageSpec(**s) for s in self.stages]
        if isinstance(self.dev_decode, dict):
            self.dev_decode = DecodeConfig(**self.dev_decode)
        names = [s.name for s in self.stages]
        for n in names:
            if n not in STAGES:
                raise ValueError(f"unknown stage {n!r}")
        idx = [STAGES.index(n) for n in names]
        if idx != sorted(idx) or len(set(idx)) != len(idx):
            raise ValueError(f"stages must be strictly ordered as {STAGES}, got {names}")
        if self.clip_norm <= 0:
            raise ValueError("clip_norm must be positive")
        if self.init_range <= 0:
            raise ValueError("init_range must be positive")


@dataclass
class TrainData:
    """Single-speaker examples (one ref each) and two-speaker mixtures."""

    train_single: list
    dev_single: list
    train_mixed: list
    dev_mixed: list


def dev_loss(store, cfg, examples, batch_size, lam, eta, kl_active):
    totals = np.zeros(4)
    n = 0
    with ad.no_grad():
        for batch in make_batches(examples, batch_size):
            O, lens, refs = pad_batch(batch)
            br = multi_speaker_loss(store, cfg, O, lens, refs, lam, eta, kl_active)
            totals += len(batch) * np.array([br.ctc_total, br.att_total, br.kl_term, br.combined])
            n += len(batch)
    return dict(zip(("ctc", "att", "kl", "combined"), (totals / max(n, 1)).tolist()))


def dev_cer(store, cfg, examples, dcfg):
    total = CorpusScore()
    for ex in examples:
        hyps = decode_mixture(store, cfg, ex.features, dcfg)
        total.add(score_multi([h.labels for h in hyps], ex.refs))
    return total


def mean_hidden_kl(store, cfg, examples, batch_size=8):
    """Mean per-frame symmetric KL between the frame-wise softmaxes of G^1 and G^2."""
    vals, weights = [], []
    with ad.no_grad():
        for batch in make_batches(examples, batch_size):
            O, lens, _ = pad_batch(batch)
            enc = encode(store, cfg.encoder, O, lens)
            G1, G2 = enc.rec_reprs[0].data, enc.rec_reprs[1].data
            vals.append(symmetric_kl_per_frame(G1, G2, enc.lengths))
            weights.append(sum(enc.lengths))
    return float(np.average(vals, weights=weights))


@dataclass
class TrainResult:
    store: object
    cfg: object
    metrics: list
    checkpoints: dict


@contextlib.contextmanager
def _single_branch_quiet(active):
    # Pretraining deliberately runs a split encoder with one branch.
    with warnings.catch_warnings():
        if active:
            warnings.filterwarnings("ignore", message="split variant with S=1")
        yield


def _dump_line(fh, rec):
    fh.write(json.dumps(rec, sort_keys=True) + "\n")
    fh.flush()


def train(schedule, data, model_cfg, out_dir=None, store=None, single_cfg=None):
    """Run every stage of ``schedule``.  ``model_cfg`` is the target multi-speaker model.

    Without ``store``, training starts from a fresh
    Uniform(-init_range, init_range) initialisation.  A single-output ``store``
    must come with its ``single_cfg``.  Returns a :class:`TrainResult`; when
    ``out_dir`` is set, ``metrics.jsonl`` and per-epoch and best-dev
    checkpoints are written there.
    """
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        (out / "checkpoints").mkdir(parents=True, exist_ok=True)
    metrics = []
    checkpoints = {}
    fh = open(out / "metrics.jsonl", "w") if out is not None else None
    cfg = model_cfg if single_cfg is None else single_cfg
    if store is None:
        first = schedule.stages[0].name if schedule.stages else "multi_speaker"
        cfg = model_cfg.with_speakers(1) if first == "pretrain_single" else model_cfg
        store = build_params(cfg, seed=derive_seed(schedule.seed, "init") % (2**31), init_range=schedule.init_range)
    try:
        for stage in schedule.stages:
            if stage.name == "pretrain_single":
                if cfg.n_speakers != 1:
                    cfg = cfg.with_speakers(1)
                    store = build_params(cfg, seed=store.seed, init_range=store.init_range)
                train_set, dev_set = data.train_single, data.dev_single
                kl_active = False
            else:
                if cfg.n_speakers != model_cfg.n_speakers:
                    store, cfg = transfer_to_multispeaker(
                        store, cfg, model_cfg.n_speakers, derive_seed(schedule.seed, "transfer") % (2**31)
                    )
                train_set, dev_set = data.train_mixed, data.dev_mixed
                kl_active = stage.name == "kl_retrain"
            sub = cfg.encoder.subsample_factor
            train_set = filter_feasible(train_set, sub)
            dev_set = filter_feasible(dev_set, sub)
            if not train_set:
                raise RuntimeError(f"stage {stage.name}: no feasible training examples")
            if schedule.max_dev is not None:
                dev_set = dev_set[: schedule.max_dev]
            with _single_branch_quiet(stage.name == "pretrain_single"):
                opt = AdaDeltaState(schedule.rho, schedule.eps)
                dev_hist = []
                best = math.inf
                for epoch in range(1, stage.epochs + 1):
                    rng = np.random.default_rng(derive_seed(schedule.seed, stage.name, epoch))
                    sums = np.zeros(4)
                    n = 0
                    for batch in make_batches(train_set, schedule.batch_size, rng):
                        O, lens, refs = pad_batch(batch)
                        store.zero_grad()
                        with ad.Tape():
                            br = multi_speaker_loss(store, cfg, O, lens, refs, schedule.lam, schedule.eta, kl_active)
                            ad.backward(br.loss)
                        adadelta_step(store, opt, schedule.clip_norm)
                        sums += len(batch) * np.array([br.ctc_total, br.att_total, br.kl_term, br.combined])
                        n += len(batch)
                    tr = dict(zip(("ctc", "att", "kl", "combined"), (sums / n).tolist()))
                    dv = dev_loss(store, cfg, dev_set, schedule.batch_size, schedule.lam, schedule.eta, kl_active)
                    dev_hist.append(dv["combined"])
                    epsilon_decay(opt, dev_hist)
                    rec = {
                        "stage": stage.name,
                        "epoch": epoch,
                        "train": tr,
                        "dev": dv,
                        "eps": opt.eps,
                        "skipped_updates": opt.skipped,
                    }
                    if schedule.dev_cer_every and epoch % schedule.dev_cer_every == 0:
                        rec["dev_cer"] = dev_cer(store, cfg, dev_set, schedule.dev_decode).average
                    metrics.append(rec)
                    log.info("%s epoch %d: train %.4f dev %.4f cer %s", stage.name, epoch, tr["combined"],
                             dv["combined"], rec.get("dev_cer"))
                    if fh is not None:
                        _dump_line(fh, rec)
                        p = out / "checkpoints" / f"{stage.name}_ep{epoch:03d}.ckpt"
                        save_checkpoint(p, store, cfg.to_dict(), {"stage": stage.name, "epoch": epoch})
                        checkpoints[(stage.name, epoch)] = p
                        if dv["combined"] < best:
                            best = dv["combined"]
                            bp = out / "checkpoints" / f"{stage.name}_best.ckpt"
                            save_checkpoint(bp, store, cfg.to_dict(), {"stage": stage.name, "epoch": epoch})
                            checkpoints[(stage.name, "best")] = bp
            if fh is not None:
                p = out / "checkpoints" / f"{stage.name}_last.ckpt"
                save_checkpoint(p, store, cfg.to_dict(), {"stage": stage.name, "epoch": stage.epochs})
                checkpoints[(stage.name, "last")] = p
    finally:
        if fh is not None:
            fh.close()
    return TrainResult(store, cfg, metrics, checkpoints)


def schedule_to_dict(s):
    d = asdict(s)
    return d
