"""Learnable top-k token selector with Gumbel noise and straight-through gradients."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import autograd as ag
from .autograd import Tensor


class SelectorConfigError(ValueError):
    pass


@dataclass
class SelectorConfig:
    k: int
    tau: float = 1.0
    noise_enabled: bool = True
    scorer_hidden: int = 16

    @classmethod
    def from_data_sparsity(cls, n_patches: int, data_sparsity: float, **kw) -> "SelectorConfig":
        if not 0.0 <= data_sparsity < 1.0:
            raise SelectorConfigError("data_sparsity must be in [0, 1)")
        k = math.ceil((1.0 - data_sparsity) * n_patches - 1e-9)
        return cls(k=max(1, k), **kw)

    def validate(self, n: int) -> None:
        if not 1 <= self.k <= n:
            raise SelectorConfigError(f"k={self.k} must be in [1, {n}]")
        if self.tau <= 0:
            raise SelectorConfigError("tau must be positive")


@dataclass
class SelectionResult:
    soft: Tensor              # (B, n) Gumbel-softmax probabilities
    hard: np.ndarray          # (B, n) k-hot
    indices: np.ndarray       # (B, k) kept token ids, ascending
    straight_through: Tensor  # (B, n) value == hard, gradient of soft


def gumbel_noise(shape, rng: np.random.Generator) -> np.ndarray:
    """-log(E) with E ~ Exponential(1)."""
    return -np.log(rng.exponential(1.0, size=shape))


def topk_indices(values: np.ndarray, k: int) -> np.ndarray:
    """Row-wise indices of the k largest values, ties to the lowest index, returned ascending."""
    order = np.argsort(-values, axis=-1, kind="stable")[..., :k]
    return np.sort(order, axis=-1)


def gumbel_topk(logits: Tensor, cfg: SelectorConfig, rng: Optional[np.random.Generator] = None) -> SelectionResult:
    squeeze = logits.ndim == 1
    if squeeze:
        logits = ag.reshape(logits, (1, -1))
    B, n = logits.shape
    if cfg.k > n:
        raise SelectorConfigError(f"k={cfg.k} exceeds the {n} available tokens")
    cfg.validate(n)
    z = logits
    if cfg.noise_enabled:
        if rng is None:
            raise SelectorConfigError("noise enabled but no rng given")
        z = ag.add(z, gumbel_noise((B, n), rng))
    soft = ag.softmax(ag.mul(z, 1.0 / cfg.tau), axis=-1)
    idx = topk_indices(soft.data, cfg.k)
    hard = np.zeros((B, n))
    hard[np.arange(B)[:, None], idx] = 1.0
    st = ag.straight_through(hard, soft)
    if squeeze:
        soft = ag.reshape(soft, (n,))
        st = ag.reshape(st, (n,))
        hard, idx = hard[0], idx[0]
    return SelectionResult(soft=soft, hard=hard, indices=idx, straight_through=st)


class TokenSelector:
    """Two-layer MLP scorer over patch embeddings followed by Gumbel top-k.

    Calling the selector returns the kept embeddings, each scaled by its
    straight-through weight (exactly 1 in value) so that gradients reach the
    scorer through the soft probabilities.
    """

    def __init__(self, embed_dim: int, cfg: SelectorConfig, seed: int = 0):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        h = cfg.scorer_hidden
        self.w1 = ag.parameter(rng.normal(0.0, 1.0 / math.sqrt(embed_dim), size=(h, embed_dim)))
        self.b1 = ag.parameter(np.zeros(h))
        self.w2 = ag.parameter(rng.normal(0.0, 1.0 / math.sqrt(h), size=(1, h)))
        self.b2 = ag.parameter(np.zeros(1))

    def named_tensors(self) -> dict:
        return {"selector.w1": self.w1, "selector.b1": self.b1, "selector.w2": self.w2, "selector.b2": self.b2}

    def score_tokens(self, x: Tensor) -> Tensor:
        """One logit per token: (B, n, d) -> (B, n)."""
        h = ag.gelu(ag.linear(x, self.w1, self.b1))
        s = ag.linear(h, self.w2, self.b2)
        return ag.reshape(s, s.shape[:-1])

    def __call__(self, x: Tensor, rng: Optional[np.random.Generator] = None, train: bool = False):
        cfg = self.cfg if train else SelectorConfig(self.cfg.k, self.cfg.tau, False, self.cfg.scorer_hidden)
        logits = self.score_tokens(x)
        sel = gumbel_topk(logits, cfg, rng)
        kept = ag.gather_rows(x, sel.indices)
        weight = ag.gather_rows(ag.reshape(sel.straight_through, (*sel.straight_through.shape, 1)), sel.indices)
        return ag.mul(kept, weight), sel
