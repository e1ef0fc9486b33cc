"""Command-line entry points.

Subcommands: gen-data, pretrain, finetune, eval, reconstruct, mask-demo,
grad-check, ablate. Exit codes: 0 success, 1 runtime failure, 2 usage.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import tensor as T
from .tensor import Tensor, TensorError
from .patches import PatchSpec
from .masking import build_mask_plan, split_rng
from .model import ModelSpec, SwinMae, pixel_mask
from .training import load_checkpoint, run_pretraining
from .segmentation import (
    SwinUnetSpec, build_swin_unet_from_checkpoint, evaluate_segmentation,
    run_finetune,
)
from . import data as D
from .config import RunConfig


def _log(msg):
    print(msg, flush=True)


def _fail(msg):
    print(f"error: {msg}", file=sys.stderr)
    return 1


def _config(args):
    overrides = {}
    for item in args.set or []:
        if "=" not in item:
            raise TensorError(f"--set expects key=value, got {item!r}")
        key, _, value = item.partition("=")
        overrides[key.strip()] = value.strip()
    if args.config:
        return RunConfig.from_file(args.config, **overrides)
    return RunConfig(**overrides)


def _model_spec(cfg, **extra):
    kw = dict(
        image=PatchSpec(cfg.image_size, cfg.image_size, cfg.channels, cfg.patch_side),
        encoder_variant=cfg.encoder_variant,
        decoder_variant=cfg.decoder_variant,
        decoder_embedding=cfg.decoder_embedding,
        decoder_width=cfg.decoder_width,
        decoder_depth=cfg.decoder_depth,
        use_abs_pos_embed=cfg.use_abs_pos_embed,
        embed_dim=cfg.embed_dim,
        stage_depths=cfg.ints("stage_depths"),
        head_counts=cfg.ints("head_counts"),
        attn_window=cfg.attn_window,
        mask_window_r=cfg.mask_window_r,
        mask_ratio=cfg.mask_ratio,
    )
    kw.update(extra)
    return ModelSpec(**kw)


def _unet_spec(cfg, **extra):
    kw = dict(
        image=PatchSpec(cfg.image_size, cfg.image_size, cfg.channels, cfg.patch_side),
        num_classes=cfg.num_classes,
        embed_dim=cfg.embed_dim,
        stage_depths=cfg.ints("stage_depths"),
        head_counts=cfg.ints("head_counts"),
        attn_window=cfg.attn_window,
        use_abs_pos_embed=cfg.use_abs_pos_embed,
        transfer_decoder_weights=cfg.transfer_decoder_weights,
    )
    kw.update(extra)
    return SwinUnetSpec(**kw)


# ------------------------------------------------------------- subcommands


def cmd_gen_data(args):
    cfg = _config(args)
    manifest = D.generate_synthetic_dataset(
        cfg.n_unlabeled, cfg.n_labeled, cfg.seed, cfg.data_dir, size=cfg.image_size
    )
    _log(
        f"wrote {len(manifest.unlabeled)} unlabeled + "
        f"{len(manifest.labeled)} labeled images to {cfg.data_dir}"
    )
    return 0


def cmd_pretrain(args):
    cfg = _config(args)
    os.makedirs(cfg.out_dir, exist_ok=True)
    manifest = D.scan_dataset(cfg.data_dir)
    images = D.load_stack(manifest.unlabeled)
    model = SwinMae(_model_spec(cfg), seed=cfg.seed)
    _log(cfg.resolved())
    run_pretraining(
        model, images, cfg.epochs, cfg.lr_max, cfg.batch_size, cfg.seed,
        mask_mode=cfg.mask_mode,
        csv_path=os.path.join(cfg.out_dir, "pretrain_loss.csv"),
        checkpoint_path=os.path.join(cfg.out_dir, "pretrain.ckpt"),
        checkpoint_every=cfg.checkpoint_every, log=_log,
    )
    return 0


def cmd_finetune(args):
    cfg = _config(args)
    os.makedirs(cfg.out_dir, exist_ok=True)
    manifest = D.scan_dataset(cfg.data_dir).split(cfg.seed)
    images, labels = D.load_labeled(manifest.labeled)
    tensors = None
    if args.checkpoint:
        _, tensors = load_checkpoint(args.checkpoint)
    model, report = build_swin_unet_from_checkpoint(
        tensors, _unet_spec(cfg), seed=cfg.seed
    )
    _log(
        f"transfer: {len(report.loaded)} loaded, "
        f"{len(report.initialized)} random-init, {len(report.missing)} missing"
    )
    run_finetune(
        model,
        images[manifest.train], labels[manifest.train],
        images[manifest.test], labels[manifest.test],
        cfg.epochs, cfg.lr_max, cfg.batch_size, cfg.seed, augment=cfg.augment,
        csv_path=os.path.join(cfg.out_dir, "finetune_metrics.csv"),
        checkpoint_path=os.path.join(cfg.out_dir, "finetune_best.ckpt"),
        log=_log,
    )
    return 0


def cmd_eval(args):
    cfg = _config(args)
    manifest = D.scan_dataset(cfg.data_dir).split(cfg.seed)
    images, labels = D.load_labeled(manifest.labeled)
    _, tensors = load_checkpoint(args.checkpoint)
    model, _ = build_swin_unet_from_checkpoint(None, _unet_spec(cfg), seed=cfg.seed)
    from .training import load_params_strict

    load_params_strict(model.params, tensors)
    report, _ = evaluate_segmentation(
        model, images[manifest.test], labels[manifest.test], warn=_log
    )
    _log("metric     value")
    for key in ("dsc_pct", "mpa_pct", "miou_pct", "hd"):
        _log(f"{key:<10} {report[key]:.4f}")
    return 0


def cmd_reconstruct(args):
    cfg = _config(args)
    _, tensors = load_checkpoint(args.checkpoint)
    model = SwinMae(_model_spec(cfg), seed=cfg.seed)
    from .training import load_params_strict

    load_params_strict(model.params, tensors)
    image = D.load_image(args.image)
    plan = build_mask_plan(
        model.spec.mask_grid_d, model.spec.mask_window_r, model.spec.mask_ratio,
        split_rng(cfg.seed, 99), mode=cfg.mask_mode,
    )
    recon = model.reconstruct(Tensor(image[None]), plan)
    D.emit_triptych(image, recon.data[0], plan, args.out)
    _log(f"wrote {args.out}")
    return 0


def cmd_mask_demo(args):
    rng = split_rng(args.seed, 0)
    plan = build_mask_plan(args.d, args.r, args.ratio, rng, mode=args.mode)
    visible_windows = int(round(len(plan.keep_indices) / (args.r * args.r)))
    cell = max(2, 64 // plan.side)
    px = pixel_mask(plan, plan.side * cell, plan.side * cell)
    # checkerboard background so kept windows are visibly structured
    yy, xx = np.mgrid[0:plan.side * cell, 0:plan.side * cell]
    board = 0.35 + 0.4 * (((yy // cell) + (xx // cell)) % 2)
    img = np.where(px > 0, 0.5, board)
    D.save_ppm(args.out, np.stack([img, img, np.where(px > 0, 0.5, 1.0 - board)]))
    _log(
        f"kept {len(plan.keep_indices)}/{plan.n_tokens} tokens "
        f"({visible_windows} visible windows); wrote {args.out}"
    )
    return 0


def cmd_grad_check(args):
    from .model import desk_spec

    spec = desk_spec(
        image=PatchSpec(16, 16, 3, patch_side=2),
        embed_dim=8, decoder_variant="SWIN",
    )
    model = SwinMae(spec, seed=args.seed)
    rng = split_rng(args.seed, 3)
    image = rng.random((1, 3, 16, 16))
    plan = build_mask_plan(
        spec.mask_grid_d, spec.mask_window_r, spec.mask_ratio, split_rng(args.seed, 4)
    )

    def f(x):
        return model.loss(x, plan)

    err = T.grad_check(f, Tensor(image), h=1e-5)
    _log(f"max relative error: {err:.3e}")
    return 0 if err < 1e-4 else 1


def cmd_ablate(args):
    cfg = _config(args)
    os.makedirs(cfg.out_dir, exist_ok=True)
    manifest = D.scan_dataset(cfg.data_dir).split(cfg.seed)
    unlabeled = D.load_stack(manifest.unlabeled)
    images, labels = D.load_labeled(manifest.labeled)
    tr, te = manifest.train, manifest.test
    rows = []

    def pretrain(tag, **spec_kw):
        mode = spec_kw.pop("mask_mode", "window")
        model = SwinMae(_model_spec(cfg, **spec_kw), seed=cfg.seed)
        run_pretraining(
            model, unlabeled, cfg.epochs, cfg.lr_max, cfg.batch_size, cfg.seed,
            mask_mode=mode,
        )
        return {n: p.data.copy() for n, p in model.params.items()}

    def finetune(tag, tensors, **unet_kw):
        model, _ = build_swin_unet_from_checkpoint(
            tensors, _unet_spec(cfg, **unet_kw), seed=cfg.seed
        )
        history, best = run_finetune(
            model, images[tr], labels[tr], images[te], labels[te],
            cfg.epochs, cfg.lr_max, cfg.batch_size, cfg.seed, augment=cfg.augment,
        )
        rep = history[best]
        rows.append((tag, rep))
        _log(
            f"{tag}: dsc {rep['dsc_pct']:.2f} mpa {rep['mpa_pct']:.2f} "
            f"miou {rep['miou_pct']:.2f} hd {rep['hd']:.3f}"
        )

    finetune("none", None)
    finetune("none+pe", None, use_abs_pos_embed=True)
    for variant in ("I", "II", "III"):
        try:
            ckpt = pretrain(
                f"encoder-{variant}", encoder_variant=variant,
                use_abs_pos_embed=(variant != "III"), decoder_variant="VIT",
            )
        except TensorError as exc:
            _log(f"encoder-{variant}: skipped ({exc})")
            continue
        finetune(f"encoder-{variant}", ckpt)
        if variant != "III":
            finetune(f"encoder-{variant}+pe", ckpt, use_abs_pos_embed=True)
    for tag, kw in (
        ("decoder-vit", dict(decoder_variant="VIT")),
        ("decoder-swin", dict(decoder_variant="SWIN")),
        ("decoder-swin+de", dict(
            decoder_variant="VIT", decoder_embedding=True,
            decoder_width=cfg.embed_dim * 4,
        )),
    ):
        ckpt = pretrain(tag, **kw)
        finetune(tag, ckpt)
        if tag == "decoder-swin":
            finetune("decoder-swin+dw", ckpt, transfer_decoder_weights=True)
    for mode in ("random", "window"):
        ckpt = pretrain(f"masking-{mode}", mask_mode=mode)
        finetune(f"masking-{mode}", ckpt)
    for ratio in (0.45, 0.6, 0.75, 0.9):
        try:
            ckpt = pretrain(f"ratio-{ratio}", mask_ratio=ratio)
        except TensorError as exc:
            _log(f"ratio-{ratio}: skipped ({exc})")
            continue
        finetune(f"ratio-{ratio}", ckpt)

    out = os.path.join(cfg.out_dir, "ablation.csv")
    with open(out, "w", encoding="utf-8") as f:
        f.write("experiment,dsc_pct,mpa_pct,miou_pct,hd\n")
        for tag, rep in rows:
            f.write(
                f"{tag},{rep['dsc_pct']!r},{rep['mpa_pct']!r},"
                f"{rep['miou_pct']!r},{rep['hd']!r}\n"
            )
    _log(f"wrote {out}")
    return 0


# ------------------------------------------------------------------ parser


def build_parser():
    parser = argparse.ArgumentParser(
        prog="swinmae",
        description="window-masked autoencoder pretraining and segmentation "
        "transfer, desk scale",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="key = value config file")
        p.add_argument(
            "--set", action="append", metavar="KEY=VALUE",
            help="override a config key",
        )

    common(sub.add_parser("gen-data", help="write the synthetic dataset"))
    common(sub.add_parser("pretrain", help="self-supervised pretraining"))
    p = sub.add_parser("finetune", help="segmentation fine-tuning")
    common(p)
    p.add_argument("--checkpoint", help="pretraining checkpoint to transfer")
    p = sub.add_parser("eval", help="evaluate a fine-tuned checkpoint")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p = sub.add_parser("reconstruct", help="triptych from a checkpoint")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)
    p = sub.add_parser("mask-demo", help="render a mask plan")
    p.add_argument("--d", type=int, required=True)
    p.add_argument("--r", type=int, required=True)
    p.add_argument("--ratio", type=float, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--mode", choices=("window", "random"), default="window")
    p.add_argument("--out", default="mask_demo.ppm")
    p = sub.add_parser("grad-check", help="finite-difference check of a tiny model")
    p.add_argument("--seed", type=int, default=0)
    common(sub.add_parser("ablate", help="run the desk-scale ablation suites"))
    return parser


_COMMANDS = {
    "gen-data": cmd_gen_data,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "eval": cmd_eval,
    "reconstruct": cmd_reconstruct,
    "mask-demo": cmd_mask_demo,
    "grad-check": cmd_grad_check,
    "ablate": cmd_ablate,
}


def cli_main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if exc.code is not None else 2
    try:
        return _COMMANDS[args.command](args)
    except (TensorError, D.ImageFormatError, OSError, ValueError) as exc:
        return _fail(exc)


def main():
    sys.exit(cli_main())


if __name__ == "__main__":
    main()
