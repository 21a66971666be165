"""Checkpoints, mask snapshots and token-selection dumps.

Checkpoint container::

    b"SVITCKPT"            8-byte magic
    uint32 LE              format version
    uint64 LE              header length H
    H bytes                UTF-8 JSON header
    payload                raw little-endian arrays, concatenated

The header holds the model config, training config, iteration/epoch, the
numpy RNG state, per-parameter budgets and unit liveness, and an ``arrays``
table of ``{name, dtype, shape, offset, nbytes}`` entries into the payload.
Array names are prefixed: ``w/`` weights, ``mask/``, ``reservoir/``,
``alive/``, ``sel/`` selector tensors, ``opt_m/`` and ``opt_v/`` optimizer
moments.
"""
from __future__ import annotations

import csv
import json
import struct
from pathlib import Path
from typing import Optional

import numpy as np

from .model import ViTConfig, VisionTransformer
from .selector import SelectorConfig, TokenSelector

MAGIC = b"SVITCKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _write_container(path, header: dict, arrays: dict) -> None:
    table, blobs, off = [], [], 0
    for name, a in arrays.items():
        a = np.ascontiguousarray(a)
        dt = a.dtype.newbyteorder("<") if a.dtype.byteorder == ">" else a.dtype
        raw = a.astype(dt, copy=False).tobytes()
        table.append({"name": name, "dtype": dt.str, "shape": list(a.shape), "offset": off, "nbytes": len(raw)})
        blobs.append(raw)
        off += len(raw)
    header = dict(header, arrays=table)
    hb = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<IQ", VERSION, len(hb)))
        f.write(hb)
        for b in blobs:
            f.write(b)


def read_container(path):
    """(header, {name: array}) from a checkpoint file."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    buf = path.read_bytes()
    if buf[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version, hlen = struct.unpack("<IQ", buf[8:20])
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    header = json.loads(buf[20:20 + hlen].decode("utf-8"))
    base = 20 + hlen
    arrays = {}
    for e in header["arrays"]:
        start = base + e["offset"]
        raw = buf[start:start + e["nbytes"]]
        if len(raw) != e["nbytes"]:
            raise CheckpointError(f"{path}: truncated payload for {e['name']}")
        arrays[e["name"]] = np.frombuffer(raw, dtype=np.dtype(e["dtype"])).reshape(e["shape"]).copy()
    return header, arrays


def _rng_state(rng: Optional[np.random.Generator]):
    return None if rng is None else rng.bit_generator.state


def save_checkpoint(path, model: VisionTransformer, selector: Optional[TokenSelector] = None, optimizer=None,
                    rng: Optional[np.random.Generator] = None, train_config: Optional[dict] = None,
                    iteration: int = 0, epoch: int = 0) -> None:
    arrays = {f"w/{k}": t.data for k, t in model.named_tensors().items()}
    params = {}
    for p in model.masked_params() + model.exempt_params():
        arrays[f"mask/{p.name}"] = p.mask.astype(np.uint8)
        if p.reservoir is not None:
            arrays[f"reservoir/{p.name}"] = p.reservoir
        params[p.name] = {"budget": p.budget, "shape": list(p.shape)}
    for b in model.blocks:
        arrays[f"alive/blocks.{b.layer}.heads"] = b.alive_heads.astype(np.uint8)
        arrays[f"alive/blocks.{b.layer}.neurons"] = b.alive_neurons.astype(np.uint8)
    sel = None
    if selector is not None:
        sel = {"k": selector.cfg.k, "tau": selector.cfg.tau, "noise_enabled": selector.cfg.noise_enabled,
               "scorer_hidden": selector.cfg.scorer_hidden}
        arrays.update({f"sel/{k}": t.data for k, t in selector.named_tensors().items()})
    opt = None
    if optimizer is not None:
        opt = {"step": optimizer.step_count}
        for k in optimizer.m:
            arrays[f"opt_m/{k}"] = optimizer.m[k]
            arrays[f"opt_v/{k}"] = optimizer.v[k]
    header = {
        "format": "sparsevit-checkpoint",
        "vit_config": model.cfg.to_dict(),
        "train_config": train_config,
        "selector_config": sel,
        "iteration": int(iteration),
        "epoch": int(epoch),
        "rng_state": _rng_state(rng),
        "params": params,
        "optimizer": opt,
    }
    _write_container(path, header, arrays)


def load_checkpoint(path):
    """Rebuild ``(model, selector, header)`` from a checkpoint."""
    header, arrays = read_container(path)
    model = VisionTransformer(ViTConfig(**header["vit_config"]))
    _restore_model(model, header, arrays)
    selector = None
    if header.get("selector_config"):
        c = header["selector_config"]
        selector = TokenSelector(model.cfg.embed_dim, SelectorConfig(**c))
        for k, t in selector.named_tensors().items():
            t.data[...] = arrays[f"sel/{k}"]
    return model, selector, header


def _restore_model(model: VisionTransformer, header: dict, arrays: dict) -> None:
    for k, t in model.named_tensors().items():
        a = arrays.get(f"w/{k}")
        if a is None or a.shape != t.shape:
            raise CheckpointError(f"tensor {k}: missing or shape mismatch")
        t.data[...] = a
    for p in model.masked_params() + model.exempt_params():
        p.mask = arrays[f"mask/{p.name}"].astype(np.float64)
        p.budget = int(header["params"][p.name]["budget"])
        if f"reservoir/{p.name}" in arrays:
            p.reservoir = arrays[f"reservoir/{p.name}"]
    for b in model.blocks:
        b.alive_heads = arrays[f"alive/blocks.{b.layer}.heads"].astype(bool)
        b.alive_neurons = arrays[f"alive/blocks.{b.layer}.neurons"].astype(bool)


def load_training_state(path, model: VisionTransformer, selector, optimizer, rng: np.random.Generator):
    """Restore weights, masks, optimizer and RNG in place; returns ``(iteration, epoch)``."""
    header, arrays = read_container(path)
    if header["vit_config"] != model.cfg.to_dict():
        raise CheckpointError("checkpoint model config differs from the model being trained")
    _restore_model(model, header, arrays)
    if selector is not None:
        for k, t in selector.named_tensors().items():
            t.data[...] = arrays[f"sel/{k}"]
    if optimizer is not None and header.get("optimizer"):
        optimizer.load_state({"step": header["optimizer"]["step"],
                              "m": {k: arrays[f"opt_m/{k}"] for k in optimizer.m},
                              "v": {k: arrays[f"opt_v/{k}"] for k in optimizer.v}})
    if header.get("rng_state") is not None:
        rng.bit_generator.state = header["rng_state"]
    return int(header["iteration"]), int(header["epoch"])


# --------------------------------------------------------------- mask export


def export_masks(model: VisionTransformer, out_dir, iteration: int = 0, csv_matrices: bool = True) -> dict:
    """Per-parameter bitmap (``np.packbits`` of the row-major mask) plus a JSON manifest.

    With ``csv_matrices`` each mask is also written as a 0/1 CSV matrix for
    heatmap plotting.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for p in model.masked_params():
        fname = f"{p.name}.bits"
        (out / fname).write_bytes(np.packbits(p.mask.astype(np.uint8).reshape(-1)).tobytes())
        e = {"name": p.name, "shape": list(p.shape), "budget": p.budget, "active": p.active_count(),
             "iteration": int(iteration), "bitmap": fname}
        if csv_matrices:
            np.savetxt(out / f"{p.name}.csv", p.mask.astype(np.uint8), fmt="%d", delimiter=",")
            e["csv"] = f"{p.name}.csv"
        entries.append(e)
    manifest = {"iteration": int(iteration), "masks": entries}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return manifest


def read_mask_bitmap(path, shape) -> np.ndarray:
    n = int(np.prod(shape))
    bits = np.unpackbits(np.frombuffer(Path(path).read_bytes(), dtype=np.uint8))[:n]
    return bits.reshape(shape).astype(np.float64)


# ---------------------------------------------------------- selection dumps


def selection_rows(kept: np.ndarray, n_patches: int, grid: int) -> list:
    """(image, patch, row, col, kept) rows for a (B, k) array of kept patch ids."""
    rows = []
    for i, idx in enumerate(np.atleast_2d(kept)):
        keep = np.zeros(n_patches, dtype=int)
        keep[idx] = 1
        for p in range(n_patches):
            r, c = divmod(p, grid)
            rows.append((i, p, r, c, int(keep[p])))
    return rows


def write_selection_csv(path, kept: np.ndarray, n_patches: int, grid: int) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["image", "patch", "row", "col", "kept"])
        w.writerows(selection_rows(kept, n_patches, grid))


def ascii_grid(kept_row: np.ndarray, grid: int) -> str:
    keep = np.zeros(grid * grid, dtype=bool)
    keep[kept_row] = True
    return "\n".join("".join("#" if keep[r * grid + c] else "." for c in range(grid)) for r in range(grid))


def write_pgm(path, image: np.ndarray, kept_row: Optional[np.ndarray] = None, patch: int = 1) -> None:
    """Binary PGM (P5) of a (C, S, S) image averaged over channels; dropped patches are zeroed."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 3:
        img = img.mean(axis=0)
    lo, hi = img.min(), img.max()
    g = np.zeros_like(img) if hi <= lo else (img - lo) / (hi - lo)
    if kept_row is not None:
        S = img.shape[0]
        grid = S // patch
        keep = np.zeros(grid * grid, dtype=bool)
        keep[np.asarray(kept_row, dtype=int)] = True
        g = g * np.kron(keep.reshape(grid, grid), np.ones((patch, patch)))
    px = np.round(g * 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P5\n{px.shape[1]} {px.shape[0]}\n255\n".encode("ascii"))
        f.write(px.tobytes())


def read_pgm(path) -> np.ndarray:
    import re

    data = Path(path).read_bytes()
    m = re.match(rb"P5\s+(\d+)\s+(\d+)\s+(\d+)\s", data)
    if m is None:
        raise ValueError("not a binary PGM")
    w, h = int(m.group(1)), int(m.group(2))
    return np.frombuffer(data[m.end(): m.end() + w * h], dtype=np.uint8).reshape(h, w)
