"""The window-masked autoencoder: hierarchical windowed-attention encoder
(three variants), global-attention or hierarchical decoder (two variants),
pixel reconstruction, and the masked MSE loss.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import ParamStore, Tensor, TensorError
from . import patches as P
from .patches import PatchSpec, TokenGrid
from .masking import apply_mask_tokens, kept_window_grid, split_rng


def token_dim(h, w, c, l):
    """Decoder token width needed so L tokens reshape into an H*W*C image."""
    total = h * w * c
    if total % l:
        raise TensorError(f"{h}*{w}*{c} not divisible by token count {l}")
    return total // l


@dataclass
class ReconSpec:
    h: int
    w: int
    c: int
    l: int
    d: int

    def __post_init__(self):
        if self.d * self.l != self.h * self.w * self.c:
            raise TensorError(
                f"token block {self.l}x{self.d} cannot hold a "
                f"{self.h}x{self.w}x{self.c} image"
            )


@dataclass
class ModelSpec:
    image: PatchSpec
    encoder_variant: str = "III"  # I | II | III
    decoder_variant: str = "VIT"  # VIT | SWIN
    decoder_embedding: bool = False
    decoder_width: int = 0  # VIT decoder width when decoder_embedding is on
    decoder_depth: int = 2  # VIT decoder block count
    use_abs_pos_embed: bool = False
    embed_dim: int = 16
    stage_depths: tuple = (1, 1, 1, 1)
    head_counts: tuple = (2, 2, 2, 2)
    attn_window: int = 2
    mask_window_r: int = 2
    mask_ratio: float = 0.75
    norm_pixel_targets: bool = False

    def __post_init__(self):
        if self.encoder_variant not in ("I", "II", "III"):
            raise TensorError(f"unknown encoder variant {self.encoder_variant!r}")
        if self.decoder_variant not in ("VIT", "SWIN"):
            raise TensorError(f"unknown decoder variant {self.decoder_variant!r}")
        if self.encoder_variant == "III" and self.use_abs_pos_embed:
            raise TensorError(
                "encoder variant III has no absolute position embedding"
            )
        if len(self.stage_depths) != len(self.head_counts):
            raise TensorError("stage_depths and head_counts length mismatch")
        side = self.enc_input_side
        if side % self.mask_window_r:
            raise TensorError(
                f"token side {side} not divisible by mask window r="
                f"{self.mask_window_r}"
            )
        for s in self.stage_sides:
            if s < 1:
                raise TensorError(
                    f"too many merging stages for token side {side}"
                )

    @property
    def n_stages(self):
        # variant I drops the final merge + final block stage
        n = len(self.stage_depths)
        return n - 1 if self.encoder_variant == "I" else n

    @property
    def enc_image_hw(self):
        mult = 2 if self.encoder_variant == "II" else 1
        return self.image.image_h * mult, self.image.image_w * mult

    @property
    def enc_input_side(self):
        h, w = self.enc_image_hw
        if h != w:
            raise TensorError("square images required")
        return h // self.image.patch_side

    @property
    def grid_side(self):
        """Token side the stages actually run on (post-drop for variant II)."""
        if self.encoder_variant == "II":
            return self.image.image_h // self.image.patch_side
        return self.enc_input_side

    @property
    def stage_sides(self):
        return [self.grid_side // (2 ** k) for k in range(self.n_stages)]

    @property
    def stage_dims(self):
        return [self.embed_dim * (2 ** k) for k in range(self.n_stages)]

    @property
    def mask_grid_d(self):
        return self.enc_input_side // self.mask_window_r


def desk_spec(**overrides):
    """Tiny geometry where every shape contract holds and training is fast."""
    image = overrides.pop("image", PatchSpec(32, 32, 3, patch_side=4))
    base = dict(
        image=image, encoder_variant="III", decoder_variant="SWIN",
        embed_dim=16, stage_depths=(1, 1, 1, 1), head_counts=(2, 2, 2, 2),
        attn_window=2, mask_window_r=2, mask_ratio=0.75,
    )
    base.update(overrides)
    return ModelSpec(**base)


# --------------------------------------------------------------------- init


def _init_linear(ps, prefix, fan_in, fan_out, rng, dtype, bias=True):
    ps.add(prefix + ".w", Tensor(rng.normal(0.0, 0.02, (fan_in, fan_out)), dtype=dtype))
    if bias:
        ps.add(prefix + ".b", Tensor(np.zeros(fan_out), dtype=dtype))


def _init_norm(ps, prefix, dim, dtype):
    ps.add(prefix + ".g", Tensor(np.ones(dim), dtype=dtype))
    ps.add(prefix + ".b", Tensor(np.zeros(dim), dtype=dtype))


def _init_block(ps, prefix, dim, heads, window_side, rng, dtype, rel_bias=True):
    if dim % heads:
        raise TensorError(f"{prefix}: dim {dim} not divisible by {heads} heads")
    _init_norm(ps, prefix + ".norm1", dim, dtype)
    for nm in ("wq", "wk", "wv", "proj"):
        _init_linear(ps, prefix + ".attn." + nm, dim, dim, rng, dtype)
    if rel_bias:
        n_rel = (2 * window_side - 1) ** 2
        ps.add(
            prefix + ".attn.rel_table",
            Tensor(rng.normal(0.0, 0.02, (n_rel, heads)), dtype=dtype),
        )
    _init_norm(ps, prefix + ".norm2", dim, dtype)
    _init_linear(ps, prefix + ".mlp.fc1", dim, 4 * dim, rng, dtype)
    _init_linear(ps, prefix + ".mlp.fc2", 4 * dim, dim, rng, dtype)


def relative_position_index(side):
    """Flat [T*T] index into the (2*side-1)^2 relative-bias table."""
    coords = np.stack(
        np.meshgrid(np.arange(side), np.arange(side), indexing="ij")
    ).reshape(2, -1)
    rel = coords[:, :, None] - coords[:, None, :] + (side - 1)
    return (rel[0] * (2 * side - 1) + rel[1]).reshape(-1)


def effective_window(side, window):
    return min(side, window)


def build_encoder_params(ps, spec, rng, dtype, prefix="enc"):
    """Shared by the autoencoder and the segmentation net so parameter names
    and shapes line up for weight transfer."""
    p_in = spec.image.patch_side ** 2 * spec.image.channels
    _init_linear(ps, f"{prefix}.embed", p_in, spec.embed_dim, rng, dtype)
    if spec.use_abs_pos_embed:
        l0 = spec.enc_input_side ** 2
        ps.add(
            f"{prefix}.pos_embed",
            Tensor(rng.normal(0.0, 0.02, (1, l0, spec.embed_dim)), dtype=dtype),
        )
    for k in range(spec.n_stages):
        side, dim = spec.stage_sides[k], spec.stage_dims[k]
        w_eff = effective_window(side, spec.attn_window)
        for i in range(spec.stage_depths[k]):
            _init_block(
                ps, f"{prefix}.stage{k}.block{i}", dim,
                spec.head_counts[k], w_eff, rng, dtype,
            )
        if k < spec.n_stages - 1:
            _init_norm(ps, f"{prefix}.merge{k}.norm", 4 * dim, dtype)
            _init_linear(ps, f"{prefix}.merge{k}.reduce", 4 * dim, 2 * dim, rng, dtype)


# ------------------------------------------------------------------ forward


def _heads_split(x, heads):
    nb, t, c = x.shape
    x = T.reshape(x, (nb, t, heads, c // heads))
    return T.transpose(x, (0, 2, 1, 3))


def attention(xw, ps, prefix, heads, rel_index=None, mask=None):
    """Multi-head self-attention over [nB, T, C] sequences.

    `rel_index` selects rows of the learned relative-bias table; `mask` is an
    additive [nW, T, T] array tiled over the batch (-inf across regions).
    """
    nb, t, c = xw.shape
    hd = c // heads
    q = _heads_split(T.linear(xw, ps[prefix + ".wq.w"], ps[prefix + ".wq.b"]), heads)
    k = _heads_split(T.linear(xw, ps[prefix + ".wk.w"], ps[prefix + ".wk.b"]), heads)
    v = _heads_split(T.linear(xw, ps[prefix + ".wv.w"], ps[prefix + ".wv.b"]), heads)
    attn = T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(hd))
    if rel_index is not None:
        bias = T.gather(ps[prefix + ".rel_table"], rel_index, axis=0)
        bias = T.reshape(bias, (t, t, heads))
        bias = T.reshape(T.transpose(bias, (2, 0, 1)), (1, heads, t, t))
        attn = T.add(attn, bias)
    if mask is not None:
        n_win = mask.shape[0]
        tiled = np.tile(mask, (nb // n_win, 1, 1))[:, None, :, :]
        attn = T.add(attn, Tensor(tiled), allow_neg_inf=True)
    a = T.softmax_lastdim(attn)
    out = T.transpose(T.matmul(a, v), (0, 2, 1, 3))
    out = T.reshape(out, (nb, t, c))
    return T.linear(out, ps[prefix + ".proj.w"], ps[prefix + ".proj.b"])


def swin_block_forward(g, ps, prefix, heads, window, shifted):
    """Pre-norm block: LN -> windowed MSA (shifted or not) -> residual ->
    LN -> 4x GELU MLP -> residual."""
    side = effective_window(g.h_tokens, window)
    if g.h_tokens % side or g.w_tokens % side:
        raise TensorError(
            f"grid {g.h_tokens}x{g.w_tokens} not divisible by window {side}"
        )
    shifted = shifted and side < g.h_tokens
    rel_index = relative_position_index(side)
    shortcut = g.data
    x = T.layer_norm(g.data, ps[prefix + ".norm1.g"], ps[prefix + ".norm1.b"])
    xg = TokenGrid(g.batch, g.h_tokens, g.w_tokens, g.dim, x)
    mask = None
    if shifted:
        shift = side // 2
        xg, mask = P.cyclic_shift(xg, shift, side)
    xw = P.window_partition(xg, side)
    xw = attention(xw, ps, prefix + ".attn", heads, rel_index, mask)
    xg = P.window_reverse(xw, side, g.batch, g.h_tokens, g.w_tokens)
    if shifted:
        xg = P.cyclic_unshift(xg, shift)
    x = T.add(shortcut, xg.data)
    h = T.layer_norm(x, ps[prefix + ".norm2.g"], ps[prefix + ".norm2.b"])
    h = T.gelu(T.linear(h, ps[prefix + ".mlp.fc1.w"], ps[prefix + ".mlp.fc1.b"]))
    h = T.linear(h, ps[prefix + ".mlp.fc2.w"], ps[prefix + ".mlp.fc2.b"])
    x = T.add(x, h)
    return TokenGrid(g.batch, g.h_tokens, g.w_tokens, g.dim, x)


def run_stage(g, ps, prefix, depth, heads, window):
    for i in range(depth):
        g = swin_block_forward(
            g, ps, f"{prefix}.block{i}", heads, window, shifted=(i % 2 == 1)
        )
    return g


def encoder_forward(image, spec, plan, ps, prefix="enc", mask_token=None):
    """Embed, mask, then run the hierarchical stages.

    Returns (latent TokenGrid, per-stage skip grids taken before each merge).
    """
    if spec.encoder_variant == "II":
        image = upscale2x(image)
    g = P.patch_partition(
        image,
        PatchSpec(*spec.enc_image_hw, spec.image.channels, spec.image.patch_side),
        ps[f"{prefix}.embed.w"], ps[f"{prefix}.embed.b"],
    )
    if spec.use_abs_pos_embed:
        g = TokenGrid(
            g.batch, g.h_tokens, g.w_tokens, g.dim,
            T.add(g.data, ps[f"{prefix}.pos_embed"]),
        )
    if plan is not None:
        if plan.side != spec.enc_input_side:
            raise TensorError(
                f"mask plan side {plan.side} != token side {spec.enc_input_side}"
            )
        if spec.encoder_variant == "II":
            g = kept_window_grid(g, plan)
            if g.h_tokens != spec.grid_side:
                raise TensorError(
                    f"variant II: masking ratio {spec.mask_ratio} keeps a "
                    f"{g.h_tokens}-token side, expected {spec.grid_side}"
                )
        else:
            g = apply_mask_tokens(g, plan, mask_token)
    skips = []
    for k in range(spec.n_stages):
        g = run_stage(
            g, ps, f"{prefix}.stage{k}", spec.stage_depths[k],
            spec.head_counts[k], spec.attn_window,
        )
        skips.append(g)
        if k < spec.n_stages - 1:
            g = P.patch_merging(
                g,
                ps[f"{prefix}.merge{k}.reduce.w"], ps[f"{prefix}.merge{k}.reduce.b"],
                ps[f"{prefix}.merge{k}.norm.g"], ps[f"{prefix}.merge{k}.norm.b"],
            )
    return g, skips


def upscale2x(image):
    """Nearest-neighbour 2x upscale of [B,C,H,W]."""
    b, c, h, w = image.shape
    x = T.reshape(image, (b, c, h, 1, w, 1))
    one = Tensor(np.ones((1, 1, 1, 2, 1, 2), dtype=image.dtype))
    x = T.mul(x, one)
    return T.reshape(x, (b, c, 2 * h, 2 * w))


# ------------------------------------------------------------------- model


class SwinMae:
    """Pretraining model: encoder + reconstruction decoder + masked loss."""

    def __init__(self, spec, seed=0, dtype=np.float64):
        self.spec = spec
        self.dtype = np.dtype(dtype)
        self.params = ParamStore()
        rng = split_rng(seed, 0)
        build_encoder_params(self.params, spec, rng, self.dtype)
        if spec.encoder_variant in ("I", "III"):
            self.params.add(
                "mask_token",
                Tensor(rng.normal(0.0, 0.02, (spec.embed_dim,)), dtype=self.dtype),
            )
        self._build_decoder(rng)

    # latent geometry after the final stage
    @property
    def latent_side(self):
        return self.spec.stage_sides[-1]

    @property
    def latent_dim(self):
        return self.spec.stage_dims[-1]

    @property
    def recon_spec(self):
        h, w = self.spec.enc_image_hw
        c = self.spec.image.channels
        if self.spec.decoder_variant == "VIT":
            l = self.latent_side ** 2
        else:
            l = self.spec.grid_side ** 2
        return ReconSpec(h, w, c, l, token_dim(h, w, c, l))

    def _build_decoder(self, rng):
        spec, dtype = self.spec, self.dtype
        if spec.decoder_variant == "VIT":
            width = self.latent_dim
            if spec.decoder_embedding:
                if spec.decoder_width <= 0:
                    raise TensorError(
                        "decoder_embedding requires a positive decoder_width"
                    )
                width = spec.decoder_width
                _init_linear(self.params, "dec.embed", self.latent_dim, width, rng, dtype)
            heads = spec.head_counts[-1]
            if width % heads:
                heads = 1
            self._dec_heads = heads
            for i in range(spec.decoder_depth):
                _init_block(
                    self.params, f"dec.block{i}", width, heads, 0, rng, dtype,
                    rel_bias=False,
                )
            _init_norm(self.params, "dec.norm", width, dtype)
            _init_linear(self.params, "dec.proj", width, self.recon_spec.d, rng, dtype)
        else:
            last = spec.n_stages - 1
            for k in range(last - 1, -1, -1):
                dim = spec.stage_dims[k]
                side = spec.stage_sides[k]
                w_eff = effective_window(side, spec.attn_window)
                _init_linear(self.params, f"dec.expand{k}", 2 * dim, 4 * dim, rng, dtype)
                for i in range(spec.stage_depths[k]):
                    _init_block(
                        self.params, f"dec.stage{k}.block{i}", dim,
                        spec.head_counts[k], w_eff, rng, dtype,
                    )
            _init_norm(self.params, "dec.norm", spec.embed_dim, dtype)
            _init_linear(
                self.params, "dec.proj", spec.embed_dim, self.recon_spec.d, rng, dtype
            )

    def encode(self, image, plan):
        mask_token = (
            self.params["mask_token"]
            if self.spec.encoder_variant in ("I", "III")
            else None
        )
        return encoder_forward(image, self.spec, plan, self.params, "enc", mask_token)

    def decode(self, latent):
        """Latent TokenGrid -> reconstruction tokens [B, L, D]."""
        ps, spec = self.params, self.spec
        if spec.decoder_variant == "VIT":
            x = latent.data
            if spec.decoder_embedding:
                x = T.linear(x, ps["dec.embed.w"], ps["dec.embed.b"])
            width = x.shape[-1]
            g = TokenGrid(latent.batch, latent.h_tokens, latent.w_tokens, width, x)
            for i in range(spec.decoder_depth):
                g = self._global_block(g, f"dec.block{i}")
            x = T.layer_norm(g.data, ps["dec.norm.g"], ps["dec.norm.b"])
            return T.linear(x, ps["dec.proj.w"], ps["dec.proj.b"])
        g = latent
        for k in range(spec.n_stages - 2, -1, -1):
            g = P.patch_expanding(g, ps[f"dec.expand{k}.w"], ps[f"dec.expand{k}.b"])
            g = run_stage(
                g, ps, f"dec.stage{k}", spec.stage_depths[k],
                spec.head_counts[k], spec.attn_window,
            )
        x = T.layer_norm(g.data, ps["dec.norm.g"], ps["dec.norm.b"])
        return T.linear(x, ps["dec.proj.w"], ps["dec.proj.b"])

    def _global_block(self, g, prefix):
        """Transformer block with attention over the whole token sequence."""
        ps = self.params
        shortcut = g.data
        x = T.layer_norm(g.data, ps[prefix + ".norm1.g"], ps[prefix + ".norm1.b"])
        x = attention(x, ps, prefix + ".attn", self._dec_heads)
        x = T.add(shortcut, x)
        h = T.layer_norm(x, ps[prefix + ".norm2.g"], ps[prefix + ".norm2.b"])
        h = T.gelu(T.linear(h, ps[prefix + ".mlp.fc1.w"], ps[prefix + ".mlp.fc1.b"]))
        h = T.linear(h, ps[prefix + ".mlp.fc2.w"], ps[prefix + ".mlp.fc2.b"])
        x = T.add(x, h)
        return TokenGrid(g.batch, g.h_tokens, g.w_tokens, g.dim, x)

    def forward(self, image, plan):
        latent, _ = self.encode(image, plan)
        return self.decode(latent)

    def reconstruct(self, image, plan):
        tokens = self.forward(image, plan)
        return reconstruct_image(tokens, self.recon_spec)

    def loss(self, image, plan):
        tokens = self.forward(image, plan)
        recon = reconstruct_image(tokens, self.recon_spec)
        target = image
        if self.spec.encoder_variant == "II":
            target = upscale2x(image)
        return masked_mse_loss(
            recon, target, plan,
            normalize_targets=self.spec.norm_pixel_targets,
        )

    def encoder_param_names(self):
        return [n for n in self.params.names() if n.startswith("enc.")]


def reconstruct_image(tokens, recon):
    """Tokens [B, L, D] -> image [B, C, H, W]; inverse of patch flattening."""
    b, l, d = tokens.shape
    if (l, d) != (recon.l, recon.d):
        raise TensorError(
            f"tokens {l}x{d} do not match recon spec {recon.l}x{recon.d}"
        )
    l_side = int(round(np.sqrt(l)))
    if l_side * l_side != l or recon.h % l_side:
        raise TensorError(f"token count {l} does not tile a {recon.h}-pixel image")
    return P.unflatten_patches(tokens, recon.h, recon.w, recon.c, recon.h // l_side)


def pixel_mask(plan, h, w):
    """0/1 pixel map of the masked area implied by a token-level plan."""
    if h % plan.side or w % plan.side:
        raise TensorError(
            f"image {h}x{w} not divisible by plan side {plan.side}"
        )
    p = h // plan.side
    flags = plan.mask_flags.reshape(plan.side, plan.side).astype(np.float64)
    return np.kron(flags, np.ones((p, p)))


def masked_mse_loss(recon, target, plan, normalize_targets=False):
    """Mean squared error over masked pixels only."""
    if recon.shape != target.shape:
        raise TensorError(
            f"reconstruction {recon.shape} vs target {target.shape}"
        )
    b, c, h, w = recon.shape
    mask = pixel_mask(plan, h, w).astype(recon.dtype)
    n_masked = int(mask.sum())
    if n_masked == 0:
        raise TensorError("mask plan has zero masked pixels")
    if normalize_targets:
        target = _per_patch_normalize(target, plan, h)
    diff = T.mul(T.sub(recon, target), Tensor(mask[None, None]))
    return T.scale(T.sum_(T.square(diff)), 1.0 / (b * c * n_masked))


def _per_patch_normalize(target, plan, h):
    p = h // plan.side
    flat = P.flatten_patches(target, p)
    mu = T.mean(flat, axis=-1, keepdims=True)
    xc = T.sub(flat, mu)
    var = T.mean(T.square(xc), axis=-1, keepdims=True)
    inv = T.reciprocal(T.sqrt(T.add(var, T.as_tensor(1e-6, like=target))))
    b, c = target.shape[0], target.shape[1]
    return P.unflatten_patches(T.mul(xc, inv), h, h, c, p)
