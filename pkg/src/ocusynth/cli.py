"""Command-line entry points for every pipeline stage.

Every subcommand accepts --config (TOML run configuration) and --seed; flags
override config values. Exit code 0 on success, 2 for usage/configuration
errors, 1 for runtime failures.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np
import torch

from . import dataset as ds
from . import procedural, segmenter, smg
from .config import ConfigError, RunConfig, load_run_config
from .generator import style_mix, tap_fingerprint, weights_fingerprint
from .imaging import save_png, to_uint8
from .metrics import write_metrics_csv
from .training import PairDataset, Trainer, load_checkpoint


def _parse_seeds(text: str) -> list[int]:
    return [int(s) for s in text.split(",") if s.strip() != ""]


def _load_config(args) -> RunConfig:
    if args.config:
        cfg = load_run_config(args.config)
    else:
        cfg = RunConfig()
    if args.seed is not None:
        cfg.seed = args.seed
        cfg.train.seed = args.seed
        cfg.smg.seed = args.seed
        cfg.segmenter.seed = args.seed
        cfg.data.seed = args.seed
    return cfg


def _palette_for(num_classes: int):
    return procedural.PALETTE_4 if num_classes == 4 else procedural.PALETTE_10


def _load_pair_dataset(cfg: RunConfig) -> PairDataset:
    data = cfg.data
    if data.source == "procedural":
        vis, nir, _ = procedural.render_dataset(
            data.n_train, data.seed, data.resolution, data.num_classes, smooth=data.smooth
        )
        return PairDataset(vis, nir)
    vis, nir, _, _ = ds.load_triplet_arrays(data.root)
    return PairDataset(vis, nir)


def _ema_from_checkpoint(path):
    bundle = load_checkpoint(path)
    g_ema = bundle["g_ema"]
    ckpt_fp = weights_fingerprint(g_ema)
    return g_ema, bundle["synthesis_config"], ckpt_fp


def _resolve_ckpt(args, cfg: RunConfig) -> Path:
    """Explicit --ckpt wins; otherwise the run's final training checkpoint."""
    if getattr(args, "ckpt", None):
        path = Path(args.ckpt)
    else:
        path = Path(cfg.out_dir) / "gan" / "ckpt_final.pt"
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return path


# -- subcommand bodies --------------------------------------------------------


def _cmd_train_gan(args) -> int:
    cfg = _load_config(args)
    out = Path(args.out or cfg.out_dir) / "gan"
    pairs = _load_pair_dataset(cfg)
    trainer = Trainer(cfg.synthesis, cfg.train, pairs, out, seed=cfg.train.seed)
    trainer.train()
    if not trainer.checkpoints:
        print("training produced no checkpoint (diverged immediately)", file=sys.stderr)
        return 1
    print(trainer.checkpoints[-1])
    return 0


def _cmd_synth(args) -> int:
    cfg = _load_config(args)
    g_ema, _, _ = _ema_from_checkpoint(_resolve_ckpt(args, cfg))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for seed in _parse_seeds(args.seeds):
        pair, _ = ds._synthesize_for_seed(g_ema, seed)
        save_png(out / f"{seed}_vis.png", pair.vis_uint8())
        save_png(out / f"{seed}_nir.png", pair.nir_uint8())
    print(out)
    return 0


def _cmd_train_smg(args) -> int:
    cfg = _load_config(args)
    g_ema, synth_cfg, ckpt_fp = _ema_from_checkpoint(_resolve_ckpt(args, cfg))
    tap_fp = tap_fingerprint(synth_cfg, ckpt_fp)
    root = Path(args.dataset)
    manifest = ds.read_manifest(root)

    samples = []
    for rec in manifest.records:
        mask_path = root / (rec.mask or f"masks/{rec.id}.png")
        if not mask_path.is_file():
            continue
        if rec.checkpoint_fingerprint != ckpt_fp:
            print(f"record {rec.id} was generated by a different checkpoint", file=sys.stderr)
            return 1
        from .imaging import load_png

        mask = load_png(mask_path)
        _, stack = ds._synthesize_for_seed(g_ema, rec.seed)
        cols = smg.extract_hypercolumns(stack, synth_cfg.output_resolution)[0]
        samples.append(
            smg.AnnotatedSample(
                seed=rec.seed, hypercolumns=cols, mask=mask,
                num_classes=len(manifest.palette),
            )
        )
    if not samples:
        print(f"no annotated records under {root}", file=sys.stderr)
        return 1
    palette = [(p["class_id"], p["name"], p["display_color"]) for p in manifest.palette]
    model = smg.train_smg(samples, cfg.smg, tap_fp, palette)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    smg.save_smg(out, model)
    print(out)
    return 0


def _cmd_gen_dataset(args) -> int:
    cfg = _load_config(args)
    g_ema, synth_cfg, _ = _ema_from_checkpoint(_resolve_ckpt(args, cfg))
    model = smg.load_smg(args.smg) if args.smg else None
    if model is not None:
        palette = [tuple(p) for p in model.class_palette]
    else:
        palette = _palette_for(cfg.data.num_classes)
    base_seed = args.seed if args.seed is not None else cfg.seed
    manifest = ds.generate_triplets(
        g_ema, model, args.n, base_seed, args.out, palette,
        config_snapshot={"source": "generated", "n": args.n, "base_seed": base_seed},
    )
    print(manifest.content_hash)
    return 0


def _cmd_train_seg(args) -> int:
    cfg = _load_config(args)
    train_data = ds.load_triplet_arrays(args.train)
    val_data = ds.load_triplet_arrays(args.val)
    if train_data[3].palette != val_data[3].palette:
        print("train and val manifests disagree on the class palette", file=sys.stderr)
        return 1
    palette = [(p["class_id"], p["name"], p["display_color"]) for p in train_data[3].palette]
    model = segmenter.train_segmenter(
        train_data, val_data, args.modality, cfg.segmenter,
        palette=palette, num_classes=len(palette),
    )
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    segmenter.save_segmenter(out, model)
    print(out)
    return 0


def _cmd_eval(args) -> int:
    model = segmenter.load_segmenter(args.model)
    test_data = ds.load_triplet_arrays(args.dataset)
    rows, summary = segmenter.evaluate_segmenter(model, test_data)
    ids = [rec.id for rec in test_data[3].records if rec.mask is not None]
    write_metrics_csv(args.out, rows, ids=ids)
    print(
        f"iou {summary['iou'][0]:.4f} +- {summary['iou'][1]:.4f} | "
        f"f1 {summary['f1'][0]:.4f} +- {summary['f1'][1]:.4f} | "
        f"pixel_error {summary['pixel_error'][0]:.4f} +- {summary['pixel_error'][1]:.4f}"
    )
    return 0


def _cmd_composite(args) -> int:
    cfg = _load_config(args)
    g_ema, _, _ = _ema_from_checkpoint(_resolve_ckpt(args, cfg))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for seed in _parse_seeds(args.seeds):
        pair, _ = ds._synthesize_for_seed(g_ema, seed)
        save_png(out / f"{seed}_composite.png", ds.composite_alignment_image(pair))
    print(out)
    return 0


def _grid(images: list[list[np.ndarray]], pad: int = 2) -> np.ndarray:
    cell_h, cell_w = images[0][0].shape[:2]
    rows, cols = len(images), len(images[0])
    canvas = np.full(
        (rows * cell_h + (rows + 1) * pad, cols * cell_w + (cols + 1) * pad, 3), 255, np.uint8
    )
    for i, row in enumerate(images):
        for j, img in enumerate(row):
            if img.ndim == 2:
                img = np.stack([img] * 3, axis=-1)
            top = pad + i * (cell_h + pad)
            left = pad + j * (cell_w + pad)
            canvas[top : top + cell_h, left : left + cell_w] = img
    return canvas


def _cmd_style_mix(args) -> int:
    cfg = _load_config(args)
    g_ema, synth_cfg, _ = _ema_from_checkpoint(_resolve_ckpt(args, cfg))
    seeds = _parse_seeds(args.seeds)
    if len(seeds) < 2:
        print("style-mix needs at least two seeds", file=sys.stderr)
        return 2

    def w_for(seed):
        gen = torch.Generator().manual_seed(seed)
        z = torch.randn((1, synth_cfg.latent_dim), generator=gen)
        with torch.no_grad():
            return g_ema.map_latent(z)

    def image_for(ws, seed):
        with torch.no_grad():
            vis, _, _ = g_ema.synthesize(ws, noise_mode="fixed", noise_seed=seed)
        return to_uint8(vis[0].numpy().transpose(1, 2, 0))

    blank = np.full((synth_cfg.output_resolution, synth_cfg.output_resolution, 3), 255, np.uint8)
    header = [blank] + [image_for(w_for(s), s) for s in seeds]
    rows = [header]
    for sy in seeds:
        w_y = w_for(sy)
        row = [image_for(w_y, sy)]
        for sx in seeds:
            mixed = style_mix(w_for(sx), w_y, args.crossover, synth_cfg)
            row.append(image_for(mixed, sx))
        rows.append(row)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_png(out, _grid(rows))
    print(out)
    return 0


def _cmd_render_procedural(args) -> int:
    cfg = _load_config(args)
    n = args.n if args.n is not None else cfg.data.n_train
    seed = args.seed if args.seed is not None else cfg.data.seed
    resolution = args.resolution or cfg.data.resolution
    classes = args.classes or cfg.data.num_classes
    vis, nir, masks = procedural.render_dataset(n, seed, resolution, classes,
                                                smooth=cfg.data.smooth)
    manifest = ds.write_procedural_dataset(
        args.out, vis, nir, masks, _palette_for(classes),
        config_snapshot={"source": "procedural", "n": n, "seed": seed,
                         "resolution": resolution, "num_classes": classes},
    )
    print(manifest.content_hash)
    return 0


def _cmd_annotate_serve(args) -> int:
    from .service import serve

    serve(args.root, port=args.port, frontend_dir=args.frontend)
    return 0


# -- parser -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ocusynth",
                                     description="bimodal ocular synthesis pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", default=None, help="TOML run configuration")
        p.add_argument("--seed", type=int, default=None)
        p.set_defaults(fn=fn)
        return p

    p = add("train-gan", _cmd_train_gan, "train the dual-branch model")
    p.add_argument("--out", default=None)

    p = add("synth", _cmd_synth, "sample pairs from a checkpoint (EMA weights)")
    p.add_argument("--ckpt", default=None)
    p.add_argument("--seeds", required=True, help="comma-separated latent seeds")
    p.add_argument("--out", required=True)

    p = add("train-smg", _cmd_train_smg, "train the mask-generation ensemble")
    p.add_argument("--ckpt", default=None)
    p.add_argument("--dataset", required=True, help="root with annotated records")
    p.add_argument("--out", required=True)

    p = add("gen-dataset", _cmd_gen_dataset, "generate labeled triplets at scale")
    p.add_argument("--ckpt", default=None)
    p.add_argument("--smg", default=None, help="SMG model file; omit for unlabeled pairs")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--out", required=True)

    p = add("train-seg", _cmd_train_seg, "train the downstream segmenter")
    p.add_argument("--train", required=True)
    p.add_argument("--val", required=True)
    p.add_argument("--modality", choices=["VIS", "NIR"], default="VIS")
    p.add_argument("--out", required=True)

    p = add("eval", _cmd_eval, "evaluate a segmenter on a labeled dataset")
    p.add_argument("--model", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True, help="CSV report path")

    p = add("composite", _cmd_composite, "luma-replacement alignment composites")
    p.add_argument("--ckpt", default=None)
    p.add_argument("--seeds", required=True)
    p.add_argument("--out", required=True)

    p = add("style-mix", _cmd_style_mix, "style-mixing grid from two or more seeds")
    p.add_argument("--ckpt", default=None)
    p.add_argument("--crossover", type=int, default=16)
    p.add_argument("--seeds", required=True)
    p.add_argument("--out", required=True)

    p = add("render-procedural", _cmd_render_procedural, "render the synthetic ocular dataset")
    p.add_argument("--n", type=int, default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--resolution", type=int, default=None)
    p.add_argument("--classes", type=int, choices=[4, 10], default=None)

    p = add("annotate-serve", _cmd_annotate_serve, "serve the annotation HTTP API")
    p.add_argument("--root", required=True)
    p.add_argument("--port", type=int, default=8787)
    p.add_argument("--frontend", default=None, help="static frontend directory to mount")

    return parser


def run_cli(argv) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return 2
    except FileNotFoundError as e:
        print(f"missing file: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # runtime failure with diagnostic
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run_cli(sys.argv[1:]))
