"""Parameterized building blocks: linear, LSTM, BLSTM with projection, VGG conv blocks.

LSTM gate layout (fixed, recorded in checkpoints): the 4H preactivation
columns are ordered ``i | f | o | g`` (input, forget, output gates, then the
cell candidate).  ``c' = f*c + i*tanh(g)``, ``h' = o*tanh(c')``.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

LSTM_GATE_ORDER = "i,f,o,g"
CHECKPOINT_MAGIC = b"PERMFREE"
CHECKPOINT_VERSION = 1


def derive_seed(seed, *keys):
    """Deterministic child seed from a base seed and string/int keys."""
    h = zlib.crc32(repr((int(seed),) + tuple(keys)).encode())
    return np.random.SeedSequence([int(seed) & 0xFFFFFFFF, h]).generate_state(1)[0]


class ParamStore:
    """Insertion-ordered mapping of hierarchical names to trainable tensors.

    Each parameter draws its initial values from a generator seeded by
    ``(seed, name)``, so values do not depend on declaration order.
    """

    def __init__(self, seed=0, init_range=0.1):
        self.seed = int(seed)
        self.init_range = float(init_range)
        self.params = {}
        self.version = 0

    def declare(self, name, shape, init=None):
        if name in self.params:
            p = self.params[name]
            if p.shape != tuple(shape):
                raise ValueError(f"parameter {name} redeclared with shape {shape}, has {p.shape}")
            return p
        shape = tuple(int(s) for s in shape)
        if init is None:
            rng = np.random.default_rng(derive_seed(self.seed, name))
            data = rng.uniform(-self.init_range, self.init_range, size=shape)
        elif isinstance(init, str) and init == "zeros":
            data = np.zeros(shape)
        else:
            data = np.broadcast_to(np.asarray(init, dtype=np.float64), shape).copy()
        p = Tensor(data, requires_grad=True, name=name)
        self.params[name] = p
        return p

    def __getitem__(self, name):
        return self.params[name]

    def __contains__(self, name):
        return name in self.params

    def __iter__(self):
        return iter(self.params)

    def __len__(self):
        return len(self.params)

    def items(self):
        return self.params.items()

    def names(self, prefix=""):
        return [n for n in self.params if n.startswith(prefix)]

    def num_params(self):
        return int(sum(p.size for p in self.params.values()))

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def state(self):
        return {n: p.data.copy() for n, p in self.params.items()}

    def load_state(self, state):
        for n, arr in state.items():
            if n not in self.params:
                raise KeyError(f"unknown parameter {n}")
            if self.params[n].shape != arr.shape:
                raise ValueError(f"shape mismatch for {n}: {arr.shape} vs {self.params[n].shape}")
            self.params[n].data = np.array(arr, dtype=np.float64)

    def copy(self):
        other = ParamStore(self.seed, self.init_range)
        for n, p in self.params.items():
            other.params[n] = Tensor(p.data.copy(), requires_grad=True, name=n)
        other.version = self.version
        return other


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(path, store, config=None, extra=None):
    """Write ``magic | u32 version | u64 header_len | JSON header | float64 blobs``."""
    header = {
        "format_version": CHECKPOINT_VERSION,
        "dtype": "<f8",
        "lstm_gate_order": LSTM_GATE_ORDER,
        "seed": store.seed,
        "init_range": store.init_range,
        "version": store.version,
        "config": config or {},
        "extra": extra or {},
        "params": [{"name": n, "shape": list(p.shape)} for n, p in store.items()],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<IQ", CHECKPOINT_VERSION, len(blob)))
        fh.write(blob)
        for p in store.params.values():
            fh.write(np.ascontiguousarray(p.data, dtype="<f8").tobytes())


def load_checkpoint(path):
    """Return ``(store, header)`` from a checkpoint written by :func:`save_checkpoint`."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    version, hlen = struct.unpack("<IQ", raw[8:20])
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(raw[20 : 20 + hlen].decode("utf-8"))
    if header.get("lstm_gate_order") != LSTM_GATE_ORDER:
        raise ValueError(f"{path}: gate order {header.get('lstm_gate_order')} unsupported")
    store = ParamStore(header["seed"], header["init_range"])
    store.version = header.get("version", 0)
    off = 20 + hlen
    for entry in header["params"]:
        shape = tuple(entry["shape"])
        n = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(raw, dtype="<f8", count=n, offset=off).reshape(shape)
        store.params[entry["name"]] = Tensor(arr.astype(np.float64), requires_grad=True, name=entry["name"])
        off += 8 * n
    if off != len(raw):
        raise ValueError(f"{path}: trailing bytes after parameter blobs")
    return store, header


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------


def declare_linear(store, name, n_in, n_out, bias=True):
    store.declare(f"{name}.W", (n_in, n_out))
    if bias:
        store.declare(f"{name}.b", (n_out,))


def linear(store, name, x):
    y = x @ store[f"{name}.W"]
    b = f"{name}.b"
    return y + store[b] if b in store else y


@dataclass
class LstmState:
    hidden: Tensor
    cell: Tensor

    @classmethod
    def zeros(cls, batch, size):
        return cls(Tensor(np.zeros((batch, size))), Tensor(np.zeros((batch, size))))


def declare_lstm(store, name, n_in, n_hidden):
    store.declare(f"{name}.Wx", (n_in, 4 * n_hidden))
    store.declare(f"{name}.Wh", (n_hidden, 4 * n_hidden))
    store.declare(f"{name}.b", (4 * n_hidden,))


def lstm_gates(z, state):
    """Apply gating to a (B, 4H) preactivation."""
    H = state.hidden.shape[-1]
    if z.shape[-1] != 4 * H:
        raise ad.ShapeError(f"lstm: preactivation width {z.shape[-1]} != 4*{H}")
    sig = ad.sigmoid(z[:, : 3 * H])
    g = ad.tanh(z[:, 3 * H :])
    i, f, o = sig[:, :H], sig[:, H : 2 * H], sig[:, 2 * H :]
    c = f * state.cell + i * g
    h = o * ad.tanh(c)
    return h, LstmState(h, c)


def lstm_step(store, name, x, state):
    """One LSTM step: returns ``(new_hidden, new_state)``."""
    Wx = store[f"{name}.Wx"]
    if x.shape[-1] != Wx.shape[0]:
        raise ad.ShapeError(f"lstm_step {name}: input dim {x.shape[-1]} != {Wx.shape[0]}")
    z = x @ Wx + state.hidden @ store[f"{name}.Wh"] + store[f"{name}.b"]
    return lstm_gates(z, state)


def _run_lstm(store, name, xw, mask, reverse):
    # xw: (B, T, 4H) input projection incl. bias; mask: (T, B, 1) array or None
    B, T, _ = xw.shape
    Wh = store[f"{name}.Wh"]
    H = Wh.shape[0]
    state = LstmState.zeros(B, H)
    outs = [None] * T
    steps = range(T - 1, -1, -1) if reverse else range(T)
    first = True
    for t in steps:
        z = xw[:, t]
        if not first:
            z = z + state.hidden @ Wh
        h, state = lstm_gates(z, state)
        if reverse and mask is not None and not mask[t].all():
            m = mask[t]
            h = h * m
            state = LstmState(h, state.cell * m)
        outs[t] = h
        first = False
    return ad.stack(outs, axis=1)


def declare_blstm(store, name, n_in, n_cells, n_proj):
    if n_proj % 2:
        raise ValueError("BLSTM projection width must be even (split across directions)")
    declare_lstm(store, f"{name}.fwd", n_in, n_cells)
    declare_lstm(store, f"{name}.bwd", n_in, n_cells)
    declare_linear(store, f"{name}.proj_fwd", n_cells, n_proj // 2)
    declare_linear(store, f"{name}.proj_bwd", n_cells, n_proj // 2)


def blstm_layer(store, name, x, lengths=None):
    """Bidirectional LSTM over ``x`` (B, T, D) followed by per-direction projections.

    Output is ``tanh([Lin(H_fwd); Lin(H_bwd)])`` of width ``n_proj``.  The
    tanh keeps hidden vectors bounded, which also bounds the frame-wise
    softmax divergence used by the contrast loss.  With
    ``lengths`` given, the backward direction starts at each sequence's own
    last frame, so padded batches give the same valid outputs as unpadded runs.
    """
    if x.ndim != 3 or x.shape[1] < 1:
        raise ValueError(f"blstm_layer {name}: need non-empty (B, T, D) input, got {x.shape}")
    B, T, _ = x.shape
    mask = None
    if lengths is not None:
        mask = (np.arange(T)[:, None] < np.asarray(lengths)[None, :]).astype(np.float64)[:, :, None]
    xf = x @ store[f"{name}.fwd.Wx"] + store[f"{name}.fwd.b"]
    xb = x @ store[f"{name}.bwd.Wx"] + store[f"{name}.bwd.b"]
    hf = _run_lstm(store, f"{name}.fwd", xf, None, reverse=False)
    hb = _run_lstm(store, f"{name}.bwd", xb, mask, reverse=True)
    out = ad.concat([linear(store, f"{name}.proj_fwd", hf), linear(store, f"{name}.proj_bwd", hb)], axis=-1)
    return ad.tanh(out)


def declare_conv(store, name, c_in, c_out, k=3):
    store.declare(f"{name}.W", (c_out, c_in, k, k))
    store.declare(f"{name}.b", (c_out,))


def time_mask(lengths, T):
    """(B, 1, T, 1) float mask for a (B, C, T, F) feature image."""
    return (np.arange(T)[None, :] < np.asarray(lengths)[:, None]).astype(np.float64)[:, None, :, None]


def conv_relu(store, name, x, lengths=None):
    W = store[f"{name}.W"]
    k = W.shape[-1]
    y = ad.relu(ad.conv2d(x, W, store[f"{name}.b"], padding=(k // 2, k // 2)))
    if lengths is not None:
        y = y * time_mask(lengths, y.shape[2])
    return y


def pooled_lengths(lengths, stride):
    return [-(-int(n) // stride) for n in lengths]


def vgg_block(store, names, x, pool=2, lengths=None):
    """Conv+ReLU layers ``names`` then an optional ``pool``-stride max pool.

    ``x`` is a (B, C, T, F) feature image.  Returns ``(y, lengths)``.
    """
    k = max(store[f"{n}.W"].shape[-1] for n in names) if names else 1
    if x.shape[2] < 1 or x.shape[3] < 1 or (k > 1 and min(x.shape[2], x.shape[3]) + 2 * (k // 2) < k):
        raise ad.ShapeError(f"vgg_block: input {x.shape} smaller than receptive field {k}")
    for n in names:
        x = conv_relu(store, n, x, lengths)
    if pool and pool > 1:
        x = ad.maxpool2d(x, (pool, pool))
        if lengths is not None:
            lengths = pooled_lengths(lengths, pool)
    return x, lengths
