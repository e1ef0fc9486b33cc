"""Optimization loop for pretraining: half-cycle cosine schedule, Adam,
binary checkpoints, per-epoch loss CSV.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import ParamStore, Tensor, TensorError
from .masking import build_mask_plan, split_rng


@dataclass
class ScheduleConfig:
    lr_max: float
    m: int  # total epochs
    i: int  # current epoch, 0-based

    def __post_init__(self):
        if self.m == 0:
            raise TensorError("schedule: total epochs must be > 0")
        if not 0 <= self.i <= self.m:
            raise TensorError(f"schedule: epoch {self.i} outside [0, {self.m}]")
        if self.lr_max <= 0:
            raise TensorError("schedule: lr_max must be > 0")


def cosine_lr(cfg):
    """Half-cycle cosine decay from lr_max at epoch 0 to 0 at epoch m."""
    return cfg.lr_max * (1.0 + math.cos(cfg.i / cfg.m * math.pi)) / 2.0


class Adam:
    """Adam with optional decoupled weight decay (default off).

    Updates iterate parameters in lexicographic name order, so two runs with
    identical seeds produce bit-identical states.
    """

    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = {n: np.zeros_like(p.data) for n, p in params.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in params.items()}

    def step(self, lr):
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            if self.weight_decay:
                p.data -= lr * self.weight_decay * p.data
            p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def zero_grad(self):
        self.params.zero_grad()


# ------------------------------------------------------------- checkpoints

_MAGIC = b"SWMAE\x01"
_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


def save_checkpoint(path, params, metadata=None):
    """Binary format: magic, u32 metadata byte length, UTF-8 key=value lines,
    u32 tensor count, then per tensor: u32 name length, name, dtype code u8,
    rank u8, u32 dims, little-endian payload."""
    meta = "".join(
        f"{k}={v}\n" for k, v in sorted((metadata or {}).items())
    ).encode("utf-8")
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<I", len(meta)))
        f.write(meta)
        items = params.items()
        f.write(struct.pack("<I", len(items)))
        for name, p in items:
            nb = name.encode("utf-8")
            f.write(struct.pack("<I", len(nb)))
            f.write(nb)
            f.write(struct.pack("<BB", _DTYPE_CODES[p.dtype], p.data.ndim))
            f.write(struct.pack(f"<{p.data.ndim}I", *p.data.shape))
            f.write(np.ascontiguousarray(p.data, dtype=p.dtype.newbyteorder("<")).tobytes())


class CheckpointError(ValueError):
    pass


def _read_exact(f, n, what):
    buf = f.read(n)
    if len(buf) != n:
        raise CheckpointError(f"truncated checkpoint while reading {what}")
    return buf


def load_checkpoint(path):
    """Returns (metadata dict, {name: ndarray})."""
    with open(path, "rb") as f:
        if _read_exact(f, len(_MAGIC), "magic") != _MAGIC:
            raise CheckpointError("bad magic: not a checkpoint file")
        (meta_len,) = struct.unpack("<I", _read_exact(f, 4, "metadata length"))
        meta = {}
        for line in _read_exact(f, meta_len, "metadata").decode("utf-8").splitlines():
            key, _, value = line.partition("=")
            meta[key] = value
        (count,) = struct.unpack("<I", _read_exact(f, 4, "tensor count"))
        tensors = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<I", _read_exact(f, 4, "name length"))
            name = _read_exact(f, nlen, "name").decode("utf-8")
            code, rank = struct.unpack("<BB", _read_exact(f, 2, "dtype/rank"))
            if code not in _CODE_DTYPES:
                raise CheckpointError(f"unknown dtype code {code}")
            dims = struct.unpack(f"<{rank}I", _read_exact(f, 4 * rank, "dims"))
            dtype = _CODE_DTYPES[code]
            n_bytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
            payload = _read_exact(f, n_bytes, f"payload of {name!r}")
            tensors[name] = np.frombuffer(
                payload, dtype=dtype.newbyteorder("<")
            ).astype(dtype).reshape(dims)
        if f.read(1):
            raise CheckpointError("trailing bytes after tensor table")
    return meta, tensors


def load_params_strict(params, tensors):
    """Load arrays into an existing ParamStore; unknown or missing names and
    shape mismatches are errors."""
    names = set(params.names())
    unknown = set(tensors) - names
    if unknown:
        raise CheckpointError(f"unknown parameter names: {sorted(unknown)}")
    missing = names - set(tensors)
    if missing:
        raise CheckpointError(f"missing parameter names: {sorted(missing)}")
    for name, arr in tensors.items():
        p = params[name]
        if p.data.shape != arr.shape:
            raise CheckpointError(
                f"shape mismatch for {name!r}: {p.data.shape} vs {arr.shape}"
            )
        p.data = arr.astype(p.dtype)


# ---------------------------------------------------------------- training


def train_step(model, batch, plan, optimizer, lr):
    """One forward/backward/update over a [B,C,H,W] batch; returns the loss."""
    optimizer.zero_grad()
    with T.Tape() as tape:
        loss = model.loss(Tensor(batch.astype(model.dtype)), plan)
    if not np.isfinite(loss.data).all():
        raise TensorError(f"non-finite loss {loss.item()!r}; aborting")
    T.backward(loss, tape)
    optimizer.step(lr)
    return loss.item()


def iterate_batches(n, batch_size):
    for start in range(0, n, batch_size):
        yield start, min(start + batch_size, n)


def run_pretraining(
    model, images, epochs, lr_max, batch_size, seed,
    mask_mode="window", csv_path=None, checkpoint_path=None,
    checkpoint_every=0, log=None,
):
    """Pretrain on an [N,C,H,W] stack; returns the per-epoch mean-loss list.

    A fresh mask plan is drawn per (epoch, batch) from a split RNG stream, so
    results do not depend on loader timing.
    """
    spec = model.spec
    optimizer = Adam(model.params)
    n = images.shape[0]
    history = []
    for epoch in range(epochs):
        lr = cosine_lr(ScheduleConfig(lr_max, epochs, epoch))
        losses = []
        for bi, (lo, hi) in enumerate(iterate_batches(n, batch_size)):
            rng = split_rng(seed, epoch, bi)
            plan = build_mask_plan(
                spec.mask_grid_d, spec.mask_window_r, spec.mask_ratio,
                rng, mode=mask_mode,
            )
            losses.append(train_step(model, images[lo:hi], plan, optimizer, lr))
        mean_loss = float(np.mean(losses))
        history.append(mean_loss)
        if log:
            log(f"epoch {epoch}: loss {mean_loss:.6f} lr {lr:.2e}")
        if checkpoint_path and checkpoint_every and (epoch + 1) % checkpoint_every == 0:
            save_checkpoint(
                checkpoint_path, model.params,
                {"epoch": epoch, "seed": seed, "kind": "pretrain"},
            )
    if csv_path:
        write_loss_csv(csv_path, history)
    if checkpoint_path:
        save_checkpoint(
            checkpoint_path, model.params,
            {"epoch": epochs - 1, "seed": seed, "kind": "pretrain"},
        )
    return history


def write_loss_csv(path, history):
    with open(path, "w", encoding="utf-8") as f:
        f.write("epoch,loss\n")
        for epoch, loss in enumerate(history):
            f.write(f"{epoch},{loss!r}\n")
