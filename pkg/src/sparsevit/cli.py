"""Command-line entry point: ``sparsevit <command> [options]``."""
from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

THREADS_ENV = "SPARSEVIT_THREADS"


def _datasets(cfg):
    from .data import load_idx_dataset, synthetic_patch_task

    vc = cfg.vit_config()
    if cfg.dataset == "idx":
        train = load_idx_dataset(cfg.idx_train_images, cfg.idx_train_labels, vc.image_side, vc.channels)
        val = (load_idx_dataset(cfg.idx_val_images, cfg.idx_val_labels, vc.image_side, vc.channels)
               if cfg.idx_val_images else None)
        return train, val
    kw = dict(classes=vc.classes, image_side=vc.image_side, patch=vc.patch_size, channels=vc.channels, noise=cfg.noise)
    train = synthetic_patch_task(cfg.train_size, seed=cfg.data_seed, **kw)
    val = synthetic_patch_task(cfg.val_size, seed=cfg.data_seed + 10_000, **kw) if cfg.val_size else None
    return train, val


def _load_cfg(args):
    from .config import ExperimentConfig, load_config

    cfg = load_config(args.config) if getattr(args, "config", None) else ExperimentConfig()
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "out", None):
        cfg.out_dir = args.out
    return cfg


def cmd_train(args) -> int:
    from .config import save_config
    from .train import build_model, train

    cfg = _load_cfg(args)
    tc = cfg.train_config()
    train_set, val_set = _datasets(cfg)
    model, selector = build_model(cfg.vit_config(), tc)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out / "config.toml")
    resume = out / "checkpoint.svt" if args.resume and (out / "checkpoint.svt").exists() else None
    _, metrics = train(model, train_set, tc, selector, val=val_set, out_dir=out, resume=resume)
    print(json.dumps(metrics.summary(), sort_keys=True))
    return 0


def cmd_eval(args) -> int:
    from .data import load_idx_dataset
    from .io import load_checkpoint
    from .train import evaluate

    model, selector, _ = load_checkpoint(args.checkpoint)
    if args.idx_images:
        ds = load_idx_dataset(args.idx_images, args.idx_labels, model.cfg.image_side, model.cfg.channels)
    else:
        train_set, val_set = _datasets(_load_cfg(args))
        ds = val_set if val_set is not None else train_set
    acc = evaluate(model, ds, selector)
    print(json.dumps({"accuracy": acc, "samples": len(ds)}))
    return 0


def cmd_flops(args) -> int:
    from .cost import count_flops, format_report
    from .model import preset
    from .sparsity import plan_for_config, structured_densities

    if args.checkpoint:
        from .io import load_checkpoint
        from .train import current_densities

        model, selector, _ = load_checkpoint(args.checkpoint)
        vc, dens = model.cfg, current_densities(model)
        keep = selector.cfg.k / vc.n_patches if selector else 1.0
        title = f"checkpoint {args.checkpoint}"
    else:
        if args.preset:
            vc, S, ds, structured = preset(args.preset), args.sparsity or 0.0, args.data_sparsity or 0.0, args.structured
        else:
            cfg = _load_cfg(args)
            vc = cfg.vit_config()
            S = cfg.sparsity if args.sparsity is None else args.sparsity
            ds = cfg.data_sparsity if args.data_sparsity is None else args.data_sparsity
            structured = args.structured or cfg.mode == "s2vite"
            if cfg.mode in ("dense", "small_dense") and args.sparsity is None:
                S = 0.0
        dens = None
        if S > 0:
            plan = plan_for_config(vc, S)
            dens = structured_densities(vc, plan) if structured else plan.densities()
        keep = 1.0 - ds
        title = f"{args.preset or 'config'}: S={S:g} data sparsity={ds:g}{' structured' if structured else ''}"
    rep = count_flops(vc, dens, token_keep_fraction=keep)
    print(json.dumps(rep.to_dict(), sort_keys=True))
    if not args.json_only:
        print(format_report(rep, title))
    return 0


def cmd_tables(args) -> int:
    from .tables import all_pass, compute_all, render

    rows, params = compute_all()
    print(render(rows, params))
    ok = all_pass(rows, params)
    print("ALL PASS" if ok else "SOME ROWS OUT OF TOLERANCE")
    return 0 if ok else 1


def cmd_dump_masks(args) -> int:
    from .io import export_masks, load_checkpoint

    model, _, header = load_checkpoint(args.checkpoint)
    out = Path(args.out or "masks")
    manifest = export_masks(model, out, iteration=header.get("iteration", 0))
    print(json.dumps({"out": str(out), "masks": len(manifest["masks"])}))
    return 0


def cmd_dump_selection(args) -> int:
    from .io import ascii_grid, load_checkpoint, write_pgm, write_selection_csv

    model, selector, _ = load_checkpoint(args.checkpoint)
    vc = model.cfg
    if args.idx_images:
        from .data import load_idx_dataset

        images = load_idx_dataset(args.idx_images, args.idx_labels, vc.image_side, vc.channels).images
    else:
        train_set, val_set = _datasets(_load_cfg(args))
        images = (val_set if val_set is not None else train_set).images
    images = images[: args.images]
    grid = vc.image_side // vc.patch_size
    if selector is None:
        kept = np.tile(np.arange(vc.n_patches), (len(images), 1))
    else:
        _, arts = model.forward(images, selector=selector, train=False)
        kept = arts.selection.indices
    out = Path(args.out or "selection")
    out.mkdir(parents=True, exist_ok=True)
    write_selection_csv(out / "selection.csv", kept, vc.n_patches, grid)
    for i, (img, row) in enumerate(zip(images, kept)):
        write_pgm(out / f"image_{i:03d}.pgm", img, row, vc.patch_size)
        print(f"image {i}: kept {len(row)}/{vc.n_patches}")
        print(ascii_grid(row, grid))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sparsevit", description="Sparse vision transformer experiments.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True):
        if config:
            sp.add_argument("--config", help="flat TOML experiment config")
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--out", default=None, help="output directory")

    t = sub.add_parser("train", help="train a model from a config")
    common(t)
    t.add_argument("--resume", action="store_true", help="continue from OUT/checkpoint.svt if present")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="top-1 accuracy of a checkpoint")
    common(e)
    e.add_argument("checkpoint")
    e.add_argument("--idx-images")
    e.add_argument("--idx-labels")
    e.set_defaults(func=cmd_eval)

    f = sub.add_parser("flops", help="FLOPs and parameter report")
    common(f)
    f.add_argument("--checkpoint")
    f.add_argument("--preset", choices=["deit_tiny", "deit_small", "deit_base", "toy"])
    f.add_argument("--sparsity", type=float)
    f.add_argument("--data-sparsity", type=float)
    f.add_argument("--structured", action="store_true")
    f.add_argument("--json-only", action="store_true")
    f.set_defaults(func=cmd_flops)

    tb = sub.add_parser("tables", help="recompute the published FLOPs-saving rows")
    tb.set_defaults(func=cmd_tables)

    dm = sub.add_parser("dump-masks", help="export mask bitmaps, manifest and CSV matrices")
    common(dm, config=False)
    dm.add_argument("checkpoint")
    dm.set_defaults(func=cmd_dump_masks)

    ds = sub.add_parser("dump-selection", help="kept/dropped patches per image as CSV, PGM and ASCII")
    common(ds)
    ds.add_argument("checkpoint")
    ds.add_argument("--images", type=int, default=8)
    ds.add_argument("--idx-images")
    ds.add_argument("--idx-labels")
    ds.set_defaults(func=cmd_dump_selection)
    return p


def main(argv=None) -> int:
    from .config import ConfigFileError
    from .data import DatasetError
    from .io import CheckpointError

    args = build_parser().parse_args(argv)
    threads = os.environ.get(THREADS_ENV)
    try:
        if threads:
            from threadpoolctl import threadpool_limits

            with threadpool_limits(limits=int(threads)):
                return args.func(args)
        return args.func(args)
    except ConfigFileError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except FileNotFoundError as e:
        print(f"error: file not found: {e.filename or e}", file=sys.stderr)
        return 1
    except (CheckpointError, DatasetError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
