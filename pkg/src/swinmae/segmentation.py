"""Downstream segmentation: U-shaped windowed-attention network, transfer of
pretrained encoder weights, fine-tuning with augmentation, and evaluation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import ParamStore, Tensor, TensorError
from . import patches as P
from .patches import PatchSpec, TokenGrid
from .masking import split_rng
from .model import (
    ModelSpec, build_encoder_params, run_stage,
    _init_linear, _init_norm, _init_block, effective_window,
)
from .training import Adam, ScheduleConfig, cosine_lr, CheckpointError, save_checkpoint
from . import metrics as M


@dataclass
class SwinUnetSpec:
    image: PatchSpec
    num_classes: int = 3
    embed_dim: int = 16
    stage_depths: tuple = (1, 1, 1, 1)
    head_counts: tuple = (2, 2, 2, 2)
    attn_window: int = 2
    use_abs_pos_embed: bool = False
    transfer_decoder_weights: bool = False

    def __post_init__(self):
        if self.num_classes < 2:
            raise TensorError("need at least background + one foreground class")

    def backbone(self):
        """Encoder-side ModelSpec with parameter names/shapes matching the
        pretraining encoder. The optional absolute position embedding is a
        downstream-only extra, added outside this spec."""
        return ModelSpec(
            image=self.image,
            encoder_variant="III",
            use_abs_pos_embed=False,
            embed_dim=self.embed_dim,
            stage_depths=self.stage_depths,
            head_counts=self.head_counts,
            attn_window=self.attn_window,
            mask_window_r=1,
            mask_ratio=0.0,
        )


class SwinUnet:
    """Encoder + bottleneck shared with the pretraining model (same parameter
    names), expanding decoder with skip connections, per-pixel class head."""

    def __init__(self, spec, seed=0, dtype=np.float64):
        self.spec = spec
        self.dtype = np.dtype(dtype)
        self.params = ParamStore()
        rng = split_rng(seed, 1)
        self._backbone = spec.backbone()
        build_encoder_params(self.params, self._backbone, rng, self.dtype)
        if spec.use_abs_pos_embed:
            l0 = self._backbone.enc_input_side ** 2
            self.params.add(
                "enc.pos_embed",
                Tensor(rng.normal(0.0, 0.02, (1, l0, spec.embed_dim)), dtype=self.dtype),
            )
        bb = self._backbone
        for k in range(bb.n_stages - 2, -1, -1):
            dim = bb.stage_dims[k]
            side = bb.stage_sides[k]
            w_eff = effective_window(side, spec.attn_window)
            _init_linear(self.params, f"up.expand{k}", 2 * dim, 4 * dim, rng, self.dtype)
            # skip fusion: linear(expanded) + linear(skip) + bias, equivalent
            # to concat followed by a 2d -> d reduction
            _init_linear(self.params, f"up.skip{k}.up", dim, dim, rng, self.dtype)
            _init_linear(
                self.params, f"up.skip{k}.lat", dim, dim, rng, self.dtype, bias=False
            )
            for i in range(spec.stage_depths[k]):
                _init_block(
                    self.params, f"up.stage{k}.block{i}", dim,
                    spec.head_counts[k], w_eff, rng, self.dtype,
                )
        _init_norm(self.params, "head.norm", spec.embed_dim, self.dtype)
        _init_linear(
            self.params, "head.proj", spec.embed_dim,
            spec.image.patch_side ** 2 * spec.num_classes, rng, self.dtype,
        )

    def encoder_param_names(self):
        return [
            n for n in self.params.names()
            if n.startswith("enc.") and n != "enc.pos_embed"
        ]

    def forward(self, image):
        """[B,C,H,W] image -> [B, num_classes, H, W] logits."""
        spec, ps, bb = self.spec, self.params, self._backbone
        g = P.patch_partition(image, spec.image, ps["enc.embed.w"], ps["enc.embed.b"])
        if spec.use_abs_pos_embed:
            g = TokenGrid(
                g.batch, g.h_tokens, g.w_tokens, g.dim,
                T.add(g.data, ps["enc.pos_embed"]),
            )
        skips = []
        for k in range(bb.n_stages):
            g = run_stage(
                g, ps, f"enc.stage{k}", spec.stage_depths[k],
                spec.head_counts[k], spec.attn_window,
            )
            skips.append(g)
            if k < bb.n_stages - 1:
                g = P.patch_merging(
                    g,
                    ps[f"enc.merge{k}.reduce.w"], ps[f"enc.merge{k}.reduce.b"],
                    ps[f"enc.merge{k}.norm.g"], ps[f"enc.merge{k}.norm.b"],
                )
        for k in range(bb.n_stages - 2, -1, -1):
            g = P.patch_expanding(g, ps[f"up.expand{k}.w"], ps[f"up.expand{k}.b"])
            fused = T.add(
                T.linear(g.data, ps[f"up.skip{k}.up.w"], ps[f"up.skip{k}.up.b"]),
                T.linear(skips[k].data, ps[f"up.skip{k}.lat.w"]),
            )
            g = TokenGrid(g.batch, g.h_tokens, g.w_tokens, g.dim, fused)
            g = run_stage(
                g, ps, f"up.stage{k}", spec.stage_depths[k],
                spec.head_counts[k], spec.attn_window,
            )
        x = T.layer_norm(g.data, ps["head.norm.g"], ps["head.norm.b"])
        x = T.linear(x, ps["head.proj.w"], ps["head.proj.b"])
        h, w, c = spec.image.image_h, spec.image.image_w, spec.num_classes
        # token (p*p*ncls) blocks back to pixel logits
        img = P.unflatten_patches(
            x, h, w, c, spec.image.patch_side
        )
        return img

    def predict(self, image):
        logits = self.forward(Tensor(np.asarray(image, dtype=self.dtype)))
        return np.argmax(logits.data, axis=1)

    def loss(self, image, labels):
        """Mean per-pixel cross-entropy; labels [B,H,W] ints."""
        logits = self.forward(image)
        b, c, h, w = logits.shape
        flat = T.reshape(T.transpose(logits, (0, 2, 3, 1)), (b * h * w, c))
        return T.softmax_cross_entropy(flat, np.asarray(labels).reshape(-1))


# ----------------------------------------------------------------- transfer


@dataclass
class TransferReport:
    loaded: list = field(default_factory=list)
    initialized: list = field(default_factory=list)
    missing: list = field(default_factory=list)


def build_swin_unet_from_checkpoint(tensors, spec, seed=0, dtype=np.float64):
    """Assemble the segmentation model, loading encoder+bottleneck weights by
    name/shape from a pretraining checkpoint's tensor dict (or None for
    random init). Decoder attention blocks mirror the encoder-stage weights
    when spec.transfer_decoder_weights is set."""
    model = SwinUnet(spec, seed=seed, dtype=dtype)
    report = TransferReport()
    if tensors is None:
        report.initialized = model.params.names()
        return model, report
    enc_names = set(model.encoder_param_names())
    for name in model.params.names():
        if name in enc_names and name in tensors:
            arr = tensors[name]
            if model.params[name].data.shape != arr.shape:
                raise CheckpointError(
                    f"shape mismatch for {name!r}: "
                    f"{model.params[name].data.shape} vs {arr.shape}"
                )
            model.params[name].data = arr.astype(dtype)
            report.loaded.append(name)
        elif name in enc_names:
            report.missing.append(name)
        else:
            report.initialized.append(name)
    if spec.transfer_decoder_weights:
        for name in list(report.initialized):
            if not name.startswith("up.stage"):
                continue
            src = "enc." + name[len("up."):]
            if src in tensors and tensors[src].shape == model.params[name].data.shape:
                model.params[name].data = tensors[src].astype(dtype)
                report.loaded.append(name)
                report.initialized.remove(name)
    return model, report


# ---------------------------------------------------------------- finetune


def augment_batch(images, labels, rng):
    """Fine-tuning augmentation: horizontal flip, small rotation, Gaussian
    blur, brightness/contrast jitter. Geometry-preserving only (no crops)."""
    from scipy import ndimage

    images = images.copy()
    labels = labels.copy()
    for i in range(images.shape[0]):
        if rng.random() < 0.5:
            images[i] = images[i, :, :, ::-1]
            labels[i] = labels[i, :, ::-1]
        angle = rng.uniform(-10.0, 10.0)
        for c in range(images.shape[1]):
            images[i, c] = ndimage.rotate(
                images[i, c], angle, reshape=False, order=1, mode="nearest"
            )
        labels[i] = ndimage.rotate(
            labels[i], angle, reshape=False, order=0, mode="nearest"
        )
        sigma = rng.uniform(0.0, 1.0)
        if sigma > 0.05:
            for c in range(images.shape[1]):
                images[i, c] = ndimage.gaussian_filter(images[i, c], sigma)
        brightness = rng.uniform(-0.1, 0.1)
        contrast = rng.uniform(0.9, 1.1)
        images[i] = np.clip((images[i] - 0.5) * contrast + 0.5 + brightness, 0.0, 1.0)
    return images, labels


def evaluate_segmentation(model, images, labels, num_classes=None, warn=None):
    """Per-image metrics averaged over the set; returns the report dict and
    the per-image confusion counts used to build it."""
    if images.shape[0] == 0:
        raise TensorError("empty evaluation set")
    ncls = num_classes or model.spec.num_classes
    per_image = []
    dsc, mpa, miou, hds = [], [], [], []
    for i in range(images.shape[0]):
        pred = model.predict(images[i:i + 1])[0]
        gt = labels[i]
        counts = {
            c: M.confusion_counts(pred, gt, c, ncls) for c in range(ncls)
        }
        per_image.append(counts)
        area = M.area_metrics(counts)
        dsc.append(area["dsc"])
        mpa.append(area["mpa"])
        miou.append(area["miou"])
        hd = M.hausdorff_per_class(pred, gt, ncls, warn=warn)
        if hd is not None:
            hds.append(hd)
    report = {
        "dsc_pct": float(np.mean(dsc)),
        "mpa_pct": float(np.mean(mpa)),
        "miou_pct": float(np.mean(miou)),
        "hd": float(np.mean(hds)) if hds else float("nan"),
    }
    return report, per_image


def run_finetune(
    model, train_images, train_labels, test_images, test_labels,
    epochs, lr_max, batch_size, seed, augment=True,
    csv_path=None, checkpoint_path=None, log=None,
):
    """Cross-entropy training of all layers; logs test metrics per epoch."""
    if train_images.shape[0] == 0 or test_images.shape[0] == 0:
        raise TensorError("empty train or test split")
    optimizer = Adam(model.params)
    history = []
    best_miou, best_epoch = -1.0, -1
    n = train_images.shape[0]
    batch_size = min(batch_size, n)
    for epoch in range(epochs):
        lr = cosine_lr(ScheduleConfig(lr_max, epochs, epoch))
        order = split_rng(seed, epoch, 0).permutation(n)
        for bi in range(0, n, batch_size):
            idx = order[bi:bi + batch_size]
            imgs, labs = train_images[idx], train_labels[idx]
            if augment:
                imgs, labs = augment_batch(imgs, labs, split_rng(seed, epoch, 1, bi))
            optimizer.zero_grad()
            with T.Tape() as tape:
                loss = model.loss(Tensor(imgs.astype(model.dtype)), labs)
            if not np.isfinite(loss.data).all():
                raise TensorError("non-finite fine-tuning loss; aborting")
            T.backward(loss, tape)
            optimizer.step(lr)
        report, _ = evaluate_segmentation(model, test_images, test_labels)
        history.append(report)
        if log:
            log(
                f"epoch {epoch}: miou {report['miou_pct']:.2f}% "
                f"dsc {report['dsc_pct']:.2f}% lr {lr:.2e}"
            )
        if report["miou_pct"] > best_miou:
            best_miou, best_epoch = report["miou_pct"], epoch
            if checkpoint_path:
                save_checkpoint(
                    checkpoint_path, model.params,
                    {"epoch": epoch, "seed": seed, "kind": "finetune",
                     "miou_pct": report["miou_pct"]},
                )
    if csv_path:
        write_metrics_csv(csv_path, history)
    return history, best_epoch


def write_metrics_csv(path, history):
    with open(path, "w", encoding="utf-8") as f:
        f.write("epoch,dsc_pct,mpa_pct,miou_pct,hd\n")
        for epoch, rep in enumerate(history):
            f.write(
                f"{epoch},{rep['dsc_pct']!r},{rep['mpa_pct']!r},"
                f"{rep['miou_pct']!r},{rep['hd']!r}\n"
            )
