"""DeiT-style vision transformer whose transformer weights are masked parameters."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict
from typing import Optional

import numpy as np

from . import autograd as ag
from .autograd import Tensor


class ConfigError(ValueError):
    pass


@dataclass
class ViTConfig:
    image_side: int = 32
    patch_size: int = 8
    embed_dim: int = 64
    layers: int = 2
    heads: int = 4
    mlp_ratio: float = 4.0
    classes: int = 10
    use_cls_token: bool = True
    channels: int = 3
    qkv_bias: bool = True

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.embed_dim % self.heads:
            raise ConfigError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if self.image_side % self.patch_size:
            raise ConfigError(f"image_side {self.image_side} not divisible by patch_size {self.patch_size}")
        if min(self.image_side, self.patch_size, self.embed_dim, self.heads, self.classes, self.channels) < 1:
            raise ConfigError("config sizes must be positive")
        if self.layers < 0:
            raise ConfigError("layers must be >= 0")

    @property
    def n_patches(self) -> int:
        return (self.image_side // self.patch_size) ** 2

    @property
    def n_tokens(self) -> int:
        return self.n_patches + int(self.use_cls_token)

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.heads

    @property
    def hidden(self) -> int:
        return int(self.mlp_ratio * self.embed_dim)

    @property
    def patch_dim(self) -> int:
        return self.channels * self.patch_size**2

    def to_dict(self) -> dict:
        return asdict(self)


PRESETS = {
    "deit_tiny": ViTConfig(image_side=224, patch_size=16, embed_dim=192, layers=12, heads=3, classes=1000),
    "deit_small": ViTConfig(image_side=224, patch_size=16, embed_dim=384, layers=12, heads=6, classes=1000),
    "deit_base": ViTConfig(image_side=224, patch_size=16, embed_dim=768, layers=12, heads=12, classes=1000),
    "toy": ViTConfig(),
}


def preset(name: str) -> ViTConfig:
    try:
        return ViTConfig(**PRESETS[name].to_dict())
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None


@dataclass
class MaskedParam:
    """Weight matrix (torch ``(out, in)`` layout) with a binary mask and fixed budget."""

    name: str
    weight: Tensor
    mask: np.ndarray
    budget: int
    layer: int = -1
    role: str = ""
    exempt: bool = False
    # values parked for inactive entries, read by unmasked scoring passes
    reservoir: Optional[np.ndarray] = None
    # effective-weight node of the latest forward; its .grad is the dense gradient
    effective: Optional[Tensor] = field(default=None, repr=False)

    @property
    def shape(self) -> tuple:
        return self.weight.shape

    @property
    def numel(self) -> int:
        return int(self.weight.size)

    @property
    def density(self) -> float:
        return self.budget / self.numel

    @property
    def sparsity(self) -> float:
        return 1.0 - self.density

    def active_count(self) -> int:
        return int(self.mask.sum())

    def set_mask(self, mask: np.ndarray, budget: Optional[int] = None) -> None:
        mask = np.asarray(mask, dtype=np.float64)
        if mask.shape != self.shape or not np.all((mask == 0) | (mask == 1)):
            raise ag.MaskError(f"{self.name}: invalid mask")
        self.mask = mask
        self.budget = int(mask.sum()) if budget is None else int(budget)
        self.apply_mask()

    def apply_mask(self) -> None:
        self.weight.data *= self.mask

    def dense_grad(self) -> np.ndarray:
        if self.effective is None or self.effective.grad is None:
            raise RuntimeError(f"{self.name}: no dense gradient recorded; run forward/backward first")
        return self.effective.grad

    def check(self) -> None:
        if self.active_count() != self.budget:
            raise AssertionError(f"{self.name}: active {self.active_count()} != budget {self.budget}")


@dataclass
class ForwardArtifacts:
    layer_inputs: list = field(default_factory=list)      # X^(l): (B, n, d)
    head_outputs: list = field(default_factory=list)      # A_(l,h) for all h: (B, H, n, dh)
    attention: list = field(default_factory=list)         # softmax maps: (B, H, n, n)
    selection: object = None


def _trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    return np.clip(rng.normal(0.0, std, size=shape), -2 * std, 2 * std)


class Block:
    """Pre-norm encoder block; heads/hidden may shrink after compaction."""

    def __init__(self, cfg: ViTConfig, layer: int, rng: np.random.Generator, heads: Optional[int] = None, hidden: Optional[int] = None):
        d = cfg.embed_dim
        self.layer = layer
        self.heads = cfg.heads if heads is None else heads
        self.head_dim = cfg.head_dim
        self.hidden = cfg.hidden if hidden is None else hidden
        inner = self.heads * self.head_dim
        self.ln1_g = ag.parameter(np.ones(d))
        self.ln1_b = ag.parameter(np.zeros(d))
        self.ln2_g = ag.parameter(np.ones(d))
        self.ln2_b = ag.parameter(np.zeros(d))

        def mp(role, shape):
            w = _trunc_normal(rng, shape)
            return MaskedParam(f"blocks.{layer}.{role}", ag.parameter(w), np.ones(shape), int(np.prod(shape)), layer=layer, role=role,
                               reservoir=w.copy())

        self.qkv = mp("qkv", (3 * inner, d))
        self.proj = mp("proj", (d, inner))
        self.fc1 = mp("fc1", (self.hidden, d))
        self.fc2 = mp("fc2", (d, self.hidden))
        self.qkv_b = ag.parameter(np.zeros(3 * inner)) if cfg.qkv_bias else None
        self.proj_b = ag.parameter(np.zeros(d))
        self.fc1_b = ag.parameter(np.zeros(self.hidden))
        self.fc2_b = ag.parameter(np.zeros(d))
        # unit liveness for structured sparsity; biases of dead units are held at 0
        self.alive_heads = np.ones(self.heads, dtype=bool)
        self.alive_neurons = np.ones(self.hidden, dtype=bool)

    def masked_params(self) -> list:
        return [self.qkv, self.proj, self.fc1, self.fc2]

    def dense_params(self) -> dict:
        out = {"ln1_g": self.ln1_g, "ln1_b": self.ln1_b, "ln2_g": self.ln2_g, "ln2_b": self.ln2_b,
               "proj_b": self.proj_b, "fc1_b": self.fc1_b, "fc2_b": self.fc2_b}
        if self.qkv_b is not None:
            out["qkv_b"] = self.qkv_b
        return out

    # ---- structured-unit slices -------------------------------------------------
    def head_rows(self, h: int) -> np.ndarray:
        inner = self.heads * self.head_dim
        base = np.arange(h * self.head_dim, (h + 1) * self.head_dim)
        return np.concatenate([base, base + inner, base + 2 * inner])

    def head_cols(self, h: int) -> np.ndarray:
        return np.arange(h * self.head_dim, (h + 1) * self.head_dim)

    def qkv_bias_mask(self) -> np.ndarray:
        return np.repeat(np.tile(self.alive_heads, 3), self.head_dim).astype(np.float64)

    def unit_masks(self) -> dict:
        """Weight masks implied by the alive head/neuron sets."""
        qkv = np.zeros(self.qkv.shape)
        proj = np.zeros(self.proj.shape)
        for h in np.flatnonzero(self.alive_heads):
            qkv[self.head_rows(h), :] = 1.0
            proj[:, self.head_cols(h)] = 1.0
        fc1 = np.zeros(self.fc1.shape)
        fc2 = np.zeros(self.fc2.shape)
        fc1[self.alive_neurons, :] = 1.0
        fc2[:, self.alive_neurons] = 1.0
        return {"qkv": qkv, "proj": proj, "fc1": fc1, "fc2": fc2}

    def apply_unit_masks(self) -> None:
        for role, m in self.unit_masks().items():
            getattr(self, role).set_mask(m)
        if self.qkv_b is not None:
            self.qkv_b.data *= self.qkv_bias_mask()
        self.fc1_b.data *= self.alive_neurons

    # ---- forward ------------------------------------------------------------------
    def _weight(self, p: MaskedParam, unmasked: bool) -> Tensor:
        if unmasked:
            full = np.where(p.mask > 0, p.weight.data, p.reservoir if p.reservoir is not None else p.weight.data)
            eff = Tensor(full, requires_grad=True, op="unmasked_weight")
        else:
            eff = ag.masked_weight(p.weight, p.mask)
        p.effective = eff
        return eff

    def _bias(self, b: Optional[Tensor], keep: np.ndarray, unmasked: bool) -> Optional[Tensor]:
        if b is None or unmasked or keep.all():
            return b
        return ag.mul(b, keep.astype(np.float64))

    def __call__(self, x: Tensor, arts: ForwardArtifacts, unmasked: bool = False) -> Tensor:
        B, n, d = x.shape
        H, dh = self.heads, self.head_dim
        arts.layer_inputs.append(x)
        h = ag.layernorm(x, self.ln1_g, self.ln1_b)
        qkv = ag.linear(h, self._weight(self.qkv, unmasked), self._bias(self.qkv_b, self.qkv_bias_mask() > 0, unmasked),
                        active=None if unmasked else self.qkv.budget)
        qkv = ag.transpose(ag.reshape(qkv, (B, n, 3, H, dh)), (2, 0, 3, 1, 4))
        q, k, v = qkv[0], qkv[1], qkv[2]
        scores = ag.mul(ag.matmul(q, ag.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
        probs = ag.softmax(scores, axis=-1)
        a = ag.matmul(probs, v)
        arts.head_outputs.append(a)
        arts.attention.append(probs)
        cat = ag.reshape(ag.transpose(a, (0, 2, 1, 3)), (B, n, H * dh))
        x = ag.add(x, ag.linear(cat, self._weight(self.proj, unmasked), self.proj_b,
                                active=None if unmasked else self.proj.budget))
        h = ag.layernorm(x, self.ln2_g, self.ln2_b)
        h = ag.linear(h, self._weight(self.fc1, unmasked), self._bias(self.fc1_b, self.alive_neurons, unmasked),
                      active=None if unmasked else self.fc1.budget)
        h = ag.gelu(h)
        h = ag.linear(h, self._weight(self.fc2, unmasked), self.fc2_b, active=None if unmasked else self.fc2.budget)
        return ag.add(x, h)


def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    """(B, C, S, S) -> (B, n_patches, C*patch*patch), row-major patch order."""
    B, C, S, S2 = images.shape
    g = S // patch
    x = images.reshape(B, C, g, patch, g, patch)
    return x.transpose(0, 2, 4, 1, 3, 5).reshape(B, g * g, C * patch * patch)


class VisionTransformer:
    def __init__(self, cfg: ViTConfig, seed: int = 0):
        cfg.validate()
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        d = cfg.embed_dim
        pe = _trunc_normal(rng, (d, cfg.patch_dim))
        self.patch_embed = MaskedParam("patch_embed", ag.parameter(pe), np.ones(pe.shape), pe.size, role="patch_embed", exempt=True)
        self.patch_embed_b = ag.parameter(np.zeros(d))
        self.cls_token = ag.parameter(_trunc_normal(rng, (1, 1, d))) if cfg.use_cls_token else None
        self.pos_embed = ag.parameter(_trunc_normal(rng, (1, cfg.n_tokens, d)))
        self.blocks = [Block(cfg, l, rng) for l in range(cfg.layers)]
        self.norm_g = ag.parameter(np.ones(d))
        self.norm_b = ag.parameter(np.zeros(d))
        hw = _trunc_normal(rng, (cfg.classes, d))
        self.head = MaskedParam("head", ag.parameter(hw), np.ones(hw.shape), hw.size, role="head", exempt=True)
        self.head_b = ag.parameter(np.zeros(cfg.classes))

    # ---- parameter views ---------------------------------------------------------
    def masked_params(self) -> list:
        """Prunable weights, in block order (qkv, proj, fc1, fc2)."""
        return [p for b in self.blocks for p in b.masked_params()]

    def exempt_params(self) -> list:
        return [self.patch_embed, self.head]

    def dense_params(self) -> dict:
        out = {"patch_embed_b": self.patch_embed_b, "pos_embed": self.pos_embed,
               "norm_g": self.norm_g, "norm_b": self.norm_b, "head_b": self.head_b}
        if self.cls_token is not None:
            out["cls_token"] = self.cls_token
        for b in self.blocks:
            for k, v in b.dense_params().items():
                out[f"blocks.{b.layer}.{k}"] = v
        return out

    def named_tensors(self) -> dict:
        """Every trainable tensor keyed by a stable name."""
        out = {p.name: p.weight for p in self.exempt_params() + self.masked_params()}
        out.update(self.dense_params())
        return out

    def param_by_name(self, name: str) -> MaskedParam:
        for p in self.exempt_params() + self.masked_params():
            if p.name == name:
                return p
        raise KeyError(name)

    def num_params(self) -> int:
        return sum(int(t.size) for t in self.named_tensors().values())

    def zero_grad(self) -> None:
        for t in self.named_tensors().values():
            t.grad = None

    # ---- forward -----------------------------------------------------------------
    def embed(self, images) -> Tensor:
        """Patch tokens with positional embeddings added: (B, n_patches, d)."""
        images = np.asarray(images, dtype=np.float64)
        cfg = self.cfg
        if images.ndim != 4 or images.shape[1:] != (cfg.channels, cfg.image_side, cfg.image_side):
            raise ConfigError(f"expected images (B,{cfg.channels},{cfg.image_side},{cfg.image_side}), got {images.shape}")
        patches = Tensor(patchify(images, cfg.patch_size))
        w = ag.masked_weight(self.patch_embed.weight, self.patch_embed.mask)
        self.patch_embed.effective = w
        tok = ag.linear(patches, w, self.patch_embed_b)
        start = int(cfg.use_cls_token)
        return ag.add(tok, self.pos_embed[:, start:, :])

    def patch_embed_tokens(self, images) -> Tensor:
        """Full token sequence (cls first when enabled) entering the first block."""
        return self._prepend_cls(self.embed(images))

    def _prepend_cls(self, tok: Tensor) -> Tensor:
        if self.cls_token is None:
            return tok
        B = tok.shape[0]
        cls = ag.add(self.cls_token, self.pos_embed[:, :1, :])
        return ag.concat([ag.broadcast_to(cls, (B, 1, self.cfg.embed_dim)), tok], axis=1)

    def forward(self, images, selector=None, rng: Optional[np.random.Generator] = None, train: bool = False,
                unmasked: bool = False):
        """Logits (B, classes) and the recorded artifacts.

        ``selector`` is a token selector; it sees the patch tokens after the
        positional embedding is added, and the cls token always bypasses it.
        ``unmasked`` reads inactive entries from the reservoir (scoring passes).
        """
        arts = ForwardArtifacts()
        tok = self.embed(images)
        if selector is not None:
            tok, sel = selector(tok, rng=rng, train=train)
            arts.selection = sel
        x = self._prepend_cls(tok)
        if x.shape[1] < 1:
            raise ConfigError("need at least one token")
        for blk in self.blocks:
            x = blk(x, arts, unmasked=unmasked)
        x = ag.layernorm(x, self.norm_g, self.norm_b)
        pooled = x[:, 0, :] if self.cls_token is not None else ag.mean(x, axis=1)
        w = ag.masked_weight(self.head.weight, self.head.mask)
        self.head.effective = w
        return ag.linear(pooled, w, self.head_b), arts

    __call__ = forward

    def apply_masks(self) -> None:
        for p in self.masked_params():
            p.apply_mask()
        for b in self.blocks:
            if b.qkv_b is not None:
                b.qkv_b.data *= b.qkv_bias_mask()
            b.fc1_b.data *= b.alive_neurons


def structural_copy_without_units(model: VisionTransformer) -> VisionTransformer:
    """Physically drop dead heads/neurons; the result computes the same function.

    Used to turn a structured-sparse model into a smaller dense one (timing, and
    the head-deletion equivalence check).
    """
    import copy

    new = copy.deepcopy(model)
    for blk in new.blocks:
        heads = np.flatnonzero(blk.alive_heads)
        neurons = np.flatnonzero(blk.alive_neurons)
        cols = np.concatenate([blk.head_cols(h) for h in heads]) if len(heads) else np.zeros(0, dtype=int)
        # qkv rows must stay grouped [q | k | v]
        dh = blk.head_dim
        q_rows = np.concatenate([np.arange(h * dh, (h + 1) * dh) for h in heads]) if len(heads) else np.zeros(0, dtype=int)
        inner = blk.heads * dh
        rows = np.concatenate([q_rows, q_rows + inner, q_rows + 2 * inner])

        def shrink(p: MaskedParam, r=slice(None), c=slice(None)):
            w = p.weight.data[r][:, c]
            p.weight = ag.parameter(w)
            p.mask = p.mask[r][:, c].copy()
            p.budget = int(p.mask.sum())
            if p.reservoir is not None:
                p.reservoir = p.reservoir[r][:, c].copy()

        shrink(blk.qkv, rows, slice(None))
        if blk.qkv_b is not None:
            blk.qkv_b = ag.parameter(blk.qkv_b.data[rows])
        shrink(blk.proj, slice(None), cols)
        shrink(blk.fc1, neurons, slice(None))
        blk.fc1_b = ag.parameter(blk.fc1_b.data[neurons])
        shrink(blk.fc2, slice(None), neurons)
        blk.heads = len(heads)
        blk.hidden = len(neurons)
        blk.alive_heads = np.ones(blk.heads, dtype=bool)
        blk.alive_neurons = np.ones(blk.hidden, dtype=bool)
    return new
