"""Window-level mask plans plus the plain random-masking baseline.

A mask plan covers a square grid of d*d windows, each holding r*r tokens.
Masking is whole-window: a window is either fully visible or fully hidden.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor, TensorError
from .patches import TokenGrid


def split_rng(seed, *keys):
    """Deterministic per-(epoch, batch, ...) generator; same keys, same stream."""
    return np.random.Generator(
        np.random.PCG64(np.random.SeedSequence(seed, spawn_key=tuple(keys)))
    )


@dataclass
class MaskPlan:
    d: int
    r: int
    mask_ratio: float
    keep_indices: np.ndarray  # sorted flat token indices kept visible
    mask_flags: np.ndarray  # per-token bool, True = masked
    seed: object = None
    mode: str = "window"

    @property
    def side(self):
        return self.d * self.r

    @property
    def n_tokens(self):
        return self.side * self.side

    @property
    def masked_indices(self):
        return np.flatnonzero(self.mask_flags)

    def validate(self):
        n = self.n_tokens
        if self.mask_flags.shape != (n,):
            raise TensorError("mask_flags length mismatch")
        keep = np.flatnonzero(~self.mask_flags)
        if not np.array_equal(keep, self.keep_indices):
            raise TensorError("keep_indices inconsistent with mask_flags")
        return self


def expand_sparse_index(x, d, r):
    """Flat token index of the top-left token of window `x` in the d*d grid."""
    if not 0 <= x < d * d:
        raise TensorError(f"sparse index {x} out of range for {d}x{d} windows")
    return (x // d) * d * r * r + (x % d) * r


def window_member_offsets(d, r):
    """Offsets from a window's top-left token to all its r*r members."""
    return np.array([d * r * i + j for i in range(r) for j in range(r)], dtype=np.int64)


def build_mask_plan(d, r, mask_ratio, rng, mode="window"):
    """Shuffle windows (or single tokens) by sorting uniform noise and keep the
    first floor(count * (1 - mask_ratio)) of them."""
    if d < 1 or r < 1:
        raise TensorError("d and r must be >= 1")
    if not 0.0 <= mask_ratio < 1.0:
        raise TensorError(f"mask_ratio must be in [0, 1), got {mask_ratio}")
    if mode not in ("window", "random"):
        raise TensorError(f"unknown masking mode {mode!r}")
    if mode == "random":
        # same procedure over individual tokens: a (d*r)^2 grid of unit windows
        inner = build_mask_plan(d * r, 1, mask_ratio, rng, mode="window")
        return MaskPlan(
            d=d, r=r, mask_ratio=mask_ratio,
            keep_indices=inner.keep_indices, mask_flags=inner.mask_flags,
            seed=inner.seed, mode="random",
        )

    n_windows = d * d
    n_keep = int(n_windows * (1.0 - mask_ratio))  # slice truncation == floor
    if n_keep == 0:
        raise TensorError(
            f"nothing kept: floor({n_windows} * {1.0 - mask_ratio:g}) == 0"
        )
    noise = rng.random(n_windows)
    sparse_shuffle = np.argsort(noise, kind="stable")  # index tie-break
    sparse_keep = sparse_shuffle[:n_keep]

    tops = (sparse_keep // d) * d * r * r + (sparse_keep % d) * r
    keep = (tops[:, None] + window_member_offsets(d, r)[None, :]).reshape(-1)
    keep = np.sort(keep)

    flags = np.ones((d * r) * (d * r), dtype=bool)
    flags[keep] = False
    return MaskPlan(
        d=d, r=r, mask_ratio=mask_ratio,
        keep_indices=keep, mask_flags=flags, mode="window",
    ).validate()


def apply_mask_tokens(g, plan, mask_vector):
    """Replace every masked token with the single learnable vector.

    Kept tokens pass through untouched; gradient flows into the vector as the
    sum over masked slots.
    """
    if plan.n_tokens != g.h_tokens * g.w_tokens:
        raise TensorError(
            f"plan covers {plan.n_tokens} tokens, grid has "
            f"{g.h_tokens * g.w_tokens}"
        )
    if mask_vector.shape != (g.dim,):
        raise TensorError(
            f"mask vector dim {mask_vector.shape} != token dim {g.dim}"
        )
    m = Tensor(
        plan.mask_flags.astype(g.data.dtype)[None, :, None]
    )
    keep = Tensor(1.0 - m.data)
    out = T.add(T.mul(g.data, keep), T.mul(mask_vector, m))
    return TokenGrid(g.batch, g.h_tokens, g.w_tokens, g.dim, out)


def drop_masked_tokens(g, plan):
    """Gather only the kept tokens, in ascending flat-index order."""
    if plan.n_tokens != g.h_tokens * g.w_tokens:
        raise TensorError("plan/grid token count mismatch")
    b, d = g.batch, g.dim
    x = T.transpose(g.data, (1, 0, 2))
    x = T.gather(x, plan.keep_indices, axis=0)
    return T.transpose(x, (1, 0, 2))  # [B, n_keep, dim]


def kept_window_grid(g, plan):
    """Re-assemble the kept windows of a dropped grid into a square TokenGrid.

    Requires the kept-window count to be a perfect square. Windows are placed
    row-major in ascending window-index order.
    """
    kept_flags = ~plan.mask_flags.reshape(plan.d, plan.r, plan.d, plan.r)[:, 0, :, 0]
    kept_windows = np.flatnonzero(kept_flags.reshape(-1))
    n_kept = kept_windows.size
    side_w = int(round(np.sqrt(n_kept)))
    if side_w * side_w != n_kept:
        raise TensorError(
            f"kept window count {n_kept} is not a perfect square; cannot "
            "re-assemble a token grid"
        )
    offs = window_member_offsets(plan.d, plan.r)
    # token order: for each output window row, for each in-window row, walk
    # windows left-to-right -> row-major token order of the packed grid
    order = []
    for wr in range(side_w):
        row_windows = kept_windows[wr * side_w:(wr + 1) * side_w]
        for i in range(plan.r):
            for wc in row_windows:
                top = expand_sparse_index(int(wc), plan.d, plan.r)
                order.extend(top + offs[i * plan.r:(i + 1) * plan.r])
    order = np.asarray(order, dtype=np.int64)
    x = T.transpose(g.data, (1, 0, 2))
    x = T.gather(x, order, axis=0)
    x = T.transpose(x, (1, 0, 2))
    side = side_w * plan.r
    return TokenGrid(g.batch, side, side, g.dim, x)
