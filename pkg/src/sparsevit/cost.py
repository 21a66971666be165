"""Analytical parameter and FLOPs accounting for dense / sparse / token-reduced ViTs.

Conventions
-----------
* FLOPs = 2 x multiply-accumulates for matmuls, plus per-element costs for the
  nonlinear ops (``ELEMENTWISE_FLOPS``).
* Weight matmuls scale with the active fraction of their weight (ideal sparse
  matmul); attention-score and attention-value matmuls never shrink with weight
  sparsity.
* Every per-token term scales with the number of tokens that enter the encoder.
* ``savings`` is measured over the transformer encoder, the part of the network
  that sparsity and token selection act on.  The patch projection, the
  classifier and the token scorer are reported as separate components and are
  folded into ``savings_whole_model``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict
from typing import Mapping, Optional

from .model import ViTConfig

# per-element FLOPs of non-matmul ops
ELEMENTWISE_FLOPS = {
    "softmax": 3,     # exp, sum, divide
    "layernorm": 5,   # mean, centre, square, normalise, affine
    "gelu": 8,
    "residual": 1,
}

ENCODER_KEYS = ("qkv", "attn_scores", "attn_values", "proj", "mlp", "elementwise")


@dataclass
class FlopsReport:
    components: dict = field(default_factory=dict)        # current model, FLOPs per image
    dense_components: dict = field(default_factory=dict)  # dense reference, FLOPs per image
    encoder_flops: float = 0.0
    dense_encoder_flops: float = 0.0
    total_flops: float = 0.0
    dense_total_flops: float = 0.0
    savings: float = 0.0
    savings_whole_model: float = 0.0
    macs: float = 0.0
    params_total: int = 0
    params_active: int = 0
    params_active_of_total: float = 0.0
    tokens: float = 0.0
    time_proxy_ms: Optional[float] = None

    def to_dict(self) -> dict:
        return asdict(self)


def _density_of(densities: Optional[Mapping], name: str) -> float:
    if densities is None:
        return 1.0
    return float(densities.get(name, 1.0))


def _component_macs(cfg: ViTConfig, densities: Optional[Mapping], tokens: float, scorer_hidden: int = 0,
                    selector_tokens: float = 0.0) -> dict:
    d, L, H, hid = cfg.embed_dim, cfg.layers, cfg.heads, cfg.hidden
    n = tokens
    macs = {
        "patch_embed": cfg.n_patches * cfg.patch_dim * d,
        "qkv": 0.0, "attn_scores": 0.0, "attn_values": 0.0, "proj": 0.0, "mlp": 0.0,
        "classifier": d * cfg.classes,
        "selector": selector_tokens * (d * scorer_hidden + scorer_hidden),
    }
    for l in range(L):
        dens = lambda role: _density_of(densities, f"blocks.{l}.{role}")  # noqa: E731
        macs["qkv"] += n * 3 * d * d * dens("qkv")
        macs["attn_scores"] += n * n * d
        macs["attn_values"] += n * n * d
        macs["proj"] += n * d * d * dens("proj")
        macs["mlp"] += n * d * hid * dens("fc1") + n * hid * d * dens("fc2")
    return macs


def _elementwise(cfg: ViTConfig, tokens: float) -> float:
    n, d, H, hid = tokens, cfg.embed_dim, cfg.heads, cfg.hidden
    e = ELEMENTWISE_FLOPS
    per_layer = (e["softmax"] * H * n * n + 2 * e["layernorm"] * n * d + e["gelu"] * n * hid + 2 * e["residual"] * n * d)
    return cfg.layers * per_layer + e["layernorm"] * n * d


def _flops(cfg, densities, tokens, scorer_hidden, selector_tokens) -> dict:
    macs = _component_macs(cfg, densities, tokens, scorer_hidden, selector_tokens)
    comps = {k: 2.0 * v for k, v in macs.items()}
    comps["elementwise"] = _elementwise(cfg, tokens)
    return comps, macs


def kept_tokens(cfg: ViTConfig, token_keep_fraction: float) -> float:
    """Sequence length entering the encoder when a fraction of tokens is kept.

    The fraction is applied to the whole sequence and left fractional, so the
    count is an expectation rather than an integer for arbitrary fractions.
    """
    if not 0.0 < token_keep_fraction <= 1.0:
        raise ValueError("token_keep_fraction must be in (0, 1]")
    n = cfg.n_tokens * token_keep_fraction
    return float(round(n)) if abs(n - round(n)) < 1e-9 else n


def count_flops(cfg: ViTConfig, densities: Optional[Mapping] = None, token_keep_fraction: float = 1.0,
                tokens: Optional[float] = None, scorer_hidden: int = 0) -> FlopsReport:
    """FLOPs of one image's forward pass.

    ``densities`` maps masked-parameter names (``blocks.{l}.{qkv|proj|fc1|fc2}``)
    to their active fraction; missing names are dense.  ``tokens`` overrides the
    kept sequence length.  ``scorer_hidden`` > 0 adds the token scorer's cost
    (it runs on every patch token, before selection).
    """
    n_full = float(cfg.n_tokens)
    n = kept_tokens(cfg, token_keep_fraction) if tokens is None else float(tokens)
    sel_tokens = cfg.n_patches if scorer_hidden else 0.0
    comps, macs = _flops(cfg, densities, n, scorer_hidden, sel_tokens)
    dense, _ = _flops(cfg, None, n_full, 0, 0.0)
    enc = sum(comps[k] for k in ENCODER_KEYS)
    denc = sum(dense[k] for k in ENCODER_KEYS)
    tot = sum(comps.values())
    dtot = sum(dense.values())
    total_p, active_p = count_params(cfg, densities)
    return FlopsReport(
        components=comps, dense_components=dense,
        encoder_flops=enc, dense_encoder_flops=denc,
        total_flops=tot, dense_total_flops=dtot,
        savings=1.0 - enc / denc if denc else 0.0,
        savings_whole_model=1.0 - tot / dtot,
        macs=sum(macs.values()),
        params_total=total_p, params_active=active_p,
        params_active_of_total=total_p * (1.0 - _mean_sparsity(cfg, densities)),
        tokens=n,
    )


def _prunable_sizes(cfg: ViTConfig) -> dict:
    d, hid = cfg.embed_dim, cfg.hidden
    out = {}
    for l in range(cfg.layers):
        out[f"blocks.{l}.qkv"] = 3 * d * d
        out[f"blocks.{l}.proj"] = d * d
        out[f"blocks.{l}.fc1"] = hid * d
        out[f"blocks.{l}.fc2"] = d * hid
    return out


def _mean_sparsity(cfg: ViTConfig, densities: Optional[Mapping]) -> float:
    sizes = _prunable_sizes(cfg)
    total = sum(sizes.values())
    if not total:
        return 0.0
    pruned = sum(n * (1.0 - _density_of(densities, k)) for k, n in sizes.items())
    return pruned / total


def count_params(cfg: ViTConfig, densities: Optional[Mapping] = None) -> tuple:
    """(total, active) parameter counts.

    ``active`` keeps every non-prunable tensor (patch projection, positional and
    cls embeddings, norms, biases, classifier) and the live part of each
    prunable weight.
    """
    d, hid, L = cfg.embed_dim, cfg.hidden, cfg.layers
    stem = cfg.patch_dim * d + d + cfg.n_tokens * d + (d if cfg.use_cls_token else 0)
    block_bias = (3 * d if cfg.qkv_bias else 0) + d + hid + d + 4 * d
    tail = 2 * d + cfg.classes * d + cfg.classes
    sizes = _prunable_sizes(cfg)
    total = stem + L * block_bias + tail + sum(sizes.values())
    active = stem + L * block_bias + tail + sum(round(n * _density_of(densities, k)) for k, n in sizes.items())
    return int(total), int(active)


def uniform_densities(cfg: ViTConfig, density: float) -> dict:
    return {k: density for k in _prunable_sizes(cfg)}


def small_dense_config(cfg: ViTConfig, target_params: float) -> ViTConfig:
    """Drop encoder layers until the dense parameter count fits ``target_params``."""
    from dataclasses import replace

    layers = cfg.layers
    while layers > 0 and count_params(replace(cfg, layers=layers))[0] > target_params:
        layers -= 1
    return replace(cfg, layers=layers)


def format_report(rep: FlopsReport, title: str = "") -> str:
    lines = []
    if title:
        lines.append(title)
    lines.append(f"{'component':<14}{'GFLOPs':>12}{'dense GFLOPs':>14}")
    for k in rep.components:
        lines.append(f"{k:<14}{rep.components[k] / 1e9:>12.4f}{rep.dense_components.get(k, 0.0) / 1e9:>14.4f}")
    lines.append(f"{'encoder':<14}{rep.encoder_flops / 1e9:>12.4f}{rep.dense_encoder_flops / 1e9:>14.4f}")
    lines.append(f"{'total':<14}{rep.total_flops / 1e9:>12.4f}{rep.dense_total_flops / 1e9:>14.4f}")
    lines.append(f"tokens: {rep.tokens:g}")
    lines.append(f"params: {rep.params_active / 1e6:.2f}M active / {rep.params_total / 1e6:.2f}M total"
                 f" ({rep.params_active_of_total / 1e6:.2f}M as fraction of total)")
    lines.append(f"FLOPs saving (encoder): {100 * rep.savings:.2f}%")
    lines.append(f"FLOPs saving (whole model): {100 * rep.savings_whole_model:.2f}%")
    return "\n".join(lines)


def ceil_units(density: float, count: int) -> int:
    """Alive unit count for a density, rounded up (at least one unit)."""
    return max(1, min(count, math.ceil(density * count - 1e-9)))
