"""Sparse topology exploration: ER allocation, update schedule, prune and grow.

Unstructured mode prunes individual weights by magnitude and regrows the
inactive entries with the largest dense-gradient magnitude.  Structured mode
does the same at the level of attention heads and MLP hidden neurons.  One-shot
and gradual pruning baselines live at the bottom of the module.
"""
from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .model import Block, ForwardArtifacts, MaskedParam, VisionTransformer

log = logging.getLogger(__name__)


class PlanError(ValueError):
    pass


class ScheduleError(ValueError):
    pass


class StateError(RuntimeError):
    pass


# ------------------------------------------------------------------ allocation


@dataclass
class PlanEntry:
    name: str
    n_in: int
    n_out: int
    numel: int
    density: float
    budget: int

    @property
    def sparsity(self) -> float:
        return 1.0 - self.budget / self.numel


@dataclass
class SparsityPlan:
    global_sparsity: float
    entries: list = field(default_factory=list)

    def __iter__(self):
        return iter(self.entries)

    def __len__(self):
        return len(self.entries)

    def by_name(self) -> dict:
        return {e.name: e for e in self.entries}

    def densities(self) -> dict:
        return {e.name: e.budget / e.numel for e in self.entries}

    @property
    def total(self) -> int:
        return sum(e.numel for e in self.entries)

    @property
    def active(self) -> int:
        return sum(e.budget for e in self.entries)

    @property
    def achieved_sparsity(self) -> float:
        return sum(e.sparsity * e.numel for e in self.entries) / self.total


def erdos_renyi_allocate(layers: Sequence, sparsity: float, names: Optional[Sequence[str]] = None) -> SparsityPlan:
    """Per-layer budgets with density proportional to (n_in + n_out) / (n_in * n_out).

    ``layers`` holds ``(n_in, n_out, numel)`` triples.  The common scale is
    solved so the global active count is ``round((1 - S) * sum(numel))``;
    layers whose density would exceed 1 are made dense and the remainder is
    redistributed.  Budgets are rounded with the largest-remainder rule
    (ties to the lowest layer index) so the global budget is met exactly.
    """
    if not 0.0 <= sparsity < 1.0:
        raise PlanError(f"global sparsity must be in [0, 1); got {sparsity}")
    layers = [tuple(int(v) for v in l) for l in layers]
    if not layers:
        raise PlanError("no layers to allocate")
    for n_in, n_out, numel in layers:
        if n_in < 1 or n_out < 1 or numel != n_in * n_out:
            raise PlanError(f"layer ({n_in}, {n_out}, {numel}) needs numel == n_in * n_out")
    names = list(names) if names is not None else [f"layer{i}" for i in range(len(layers))]
    numel = np.array([l[2] for l in layers], dtype=np.float64)
    raw = np.array([(a + b) / (a * b) for a, b, _ in layers])
    target = int(round((1.0 - sparsity) * numel.sum()))

    dense = np.zeros(len(layers), dtype=bool)
    while True:
        free = ~dense
        remaining = target - numel[dense].sum()
        denom = (raw[free] * numel[free]).sum()
        if denom <= 0:
            break
        eps = remaining / denom
        over = free & (eps * raw > 1.0)
        if not over.any():
            break
        dense |= over
    density = np.where(dense, 1.0, eps * raw) if (~dense).any() else np.ones(len(layers))
    if (density > 1.0 + 1e-12).any() or remaining < -1e-9:
        raise PlanError("infeasible sparsity")

    exact = density * numel
    budgets = np.floor(exact + 1e-9).astype(np.int64)
    budgets = np.minimum(budgets, numel.astype(np.int64))
    short = target - int(budgets.sum())
    if short:
        frac = exact - budgets
        room = budgets < numel
        order = sorted((i for i in range(len(layers)) if room[i]), key=lambda i: (-frac[i], i))
        for i in order[:short]:
            budgets[i] += 1
    entries = [PlanEntry(n, a, b, int(m), float(dn), int(bg)) for n, (a, b, m), dn, bg in zip(names, layers, density, budgets)]
    return SparsityPlan(sparsity, entries)


def layer_shapes(model: VisionTransformer) -> list:
    """(name, n_in, n_out, numel) for every prunable weight of ``model``."""
    return [(p.name, p.shape[1], p.shape[0], p.numel) for p in model.masked_params()]


def plan_for_model(model: VisionTransformer, sparsity: float) -> SparsityPlan:
    shapes = layer_shapes(model)
    return erdos_renyi_allocate([s[1:] for s in shapes], sparsity, names=[s[0] for s in shapes])


def plan_for_config(cfg, sparsity: float) -> SparsityPlan:
    """Same plan as :func:`plan_for_model` without building the weights."""
    d, hid = cfg.embed_dim, cfg.hidden
    names, layers = [], []
    for l in range(cfg.layers):
        for role, (n_in, n_out) in (("qkv", (d, 3 * d)), ("proj", (d, d)), ("fc1", (d, hid)), ("fc2", (hid, d))):
            names.append(f"blocks.{l}.{role}")
            layers.append((n_in, n_out, n_in * n_out))
    return erdos_renyi_allocate(layers, sparsity, names=names)


def random_masks(model: VisionTransformer, plan: SparsityPlan, rng: np.random.Generator) -> None:
    """Initialise every prunable weight with a random mask holding its budget."""
    entries = plan.by_name()
    for p in model.masked_params():
        e = entries[p.name]
        flat = np.zeros(p.numel)
        flat[rng.permutation(p.numel)[: e.budget]] = 1.0
        p.set_mask(flat.reshape(p.shape))


# -------------------------------------------------------------------- schedule


@dataclass
class UpdateSchedule:
    delta_t: int = 100
    t_end: int = 1600
    alpha: float = 0.5
    decay: str = "cosine"

    def __post_init__(self):
        if self.delta_t < 1:
            raise ScheduleError("delta_t must be >= 1")
        if not 0.0 <= self.alpha <= 1.0:
            raise ScheduleError("alpha must be in [0, 1]")
        if self.decay != "cosine":
            raise ScheduleError(f"unknown decay curve {self.decay!r}")

    @classmethod
    def for_run(cls, total_iterations: int, delta_t: int = 100, alpha: float = 0.5, end_fraction: float = 0.8):
        return cls(delta_t=delta_t, t_end=int(end_fraction * total_iterations), alpha=alpha)

    def fraction(self, t: int) -> float:
        return f_decay(t, self.alpha, self.t_end)

    def is_update(self, t: int) -> bool:
        """Topology update at iteration ``t`` (1-based)."""
        return t % self.delta_t == 0 and t <= self.t_end

    def update_iterations(self, total: int) -> list:
        return [t for t in range(self.delta_t, min(self.t_end, total) + 1, self.delta_t)]


def f_decay(t: float, alpha: float, t_end: float) -> float:
    """Cosine-annealed changeable fraction: alpha/2 * (1 + cos(pi t / t_end))."""
    if t < 0 or t > t_end:
        raise ScheduleError(f"t={t} outside [0, {t_end}]")
    if t_end == 0:
        return alpha
    return alpha / 2.0 * (1.0 + math.cos(t * math.pi / t_end))


# --------------------------------------------------------- unstructured update


def _lowest(scores: np.ndarray, candidates: np.ndarray, k: int) -> np.ndarray:
    """Flat indices of the k smallest scores among candidates; ties -> lowest index."""
    idx = np.flatnonzero(candidates)
    order = np.lexsort((idx, scores.reshape(-1)[idx]))
    return idx[order[:k]]


def _highest(scores: np.ndarray, candidates: np.ndarray, k: int) -> np.ndarray:
    idx = np.flatnonzero(candidates)
    order = np.lexsort((idx, -scores.reshape(-1)[idx]))
    return idx[order[:k]]


def prune_count(fraction: float, budget: int) -> int:
    """floor(f_decay * (1 - s_l) * N_l); (1 - s_l) * N_l is the budget."""
    return int(math.floor(fraction * budget + 1e-9))


def prune_grow_unstructured(param: MaskedParam, dense_grad: np.ndarray, rho: int):
    """Drop the rho smallest-|w| active weights, activate the rho largest-|grad| inactive ones.

    Grow candidates are the entries inactive before this update, so the drop and
    grow sets never overlap.  Grown weights start at zero.  Returns boolean
    ``(pruned, grown)`` masks.
    """
    dense_grad = np.asarray(dense_grad, dtype=np.float64)
    if dense_grad.shape != param.shape:
        raise ValueError(f"{param.name}: gradient shape {dense_grad.shape} != {param.shape}")
    if not np.all(np.isfinite(dense_grad)):
        raise FloatingPointError(f"{param.name}: non-finite gradient; update aborted")
    active = param.mask > 0
    n_active, n_inactive = int(active.sum()), int((~active).sum())
    if rho > param.budget:
        warnings.warn(f"{param.name}: rho={rho} exceeds budget {param.budget}; clamped", RuntimeWarning)
        rho = param.budget
    rho = min(rho, n_active, n_inactive)
    pruned = np.zeros(param.shape, dtype=bool)
    grown = np.zeros(param.shape, dtype=bool)
    if rho <= 0:
        return pruned, grown
    drop = _lowest(np.abs(param.weight.data), active, rho)
    add = _highest(np.abs(dense_grad), ~active, rho)
    pruned.flat[drop] = True
    grown.flat[add] = True
    mask = param.mask.copy()
    mask.flat[drop] = 0.0
    mask.flat[add] = 1.0
    param.weight.data.flat[drop] = 0.0
    param.weight.data.flat[add] = 0.0
    param.mask = mask
    return pruned, grown


# ----------------------------------------------------------- structured update


@dataclass
class StructuredUnit:
    kind: str  # "attention_head" | "mlp_neuron"
    layer: int
    index: int
    alive: bool


def structured_units(model: VisionTransformer) -> list:
    out = []
    for b in model.blocks:
        out += [StructuredUnit("attention_head", b.layer, h, bool(a)) for h, a in enumerate(b.alive_heads)]
        out += [StructuredUnit("mlp_neuron", b.layer, j, bool(a)) for j, a in enumerate(b.alive_neurons)]
    return out


def structured_alive_counts(model_or_cfg, plan: SparsityPlan) -> list:
    """Per layer (alive_heads, alive_neurons) derived from the plan.

    Heads follow the out-projection's sparsity (a head owns a column slice of
    it) and neurons the pooled fc1/fc2 sparsity.  The pruned unit count is
    rounded up; at least one unit always stays alive.
    """
    cfg = getattr(model_or_cfg, "cfg", model_or_cfg)
    e = plan.by_name()
    out = []
    for l in range(cfg.layers):
        p, f1, f2 = (e[f"blocks.{l}.{r}"] for r in ("proj", "fc1", "fc2"))
        s_head = 1.0 - p.budget / p.numel
        s_mlp = 1.0 - (f1.budget + f2.budget) / (f1.numel + f2.numel)
        heads = cfg.heads - min(cfg.heads - 1, math.ceil(s_head * cfg.heads - 1e-9))
        neurons = cfg.hidden - min(cfg.hidden - 1, math.ceil(s_mlp * cfg.hidden - 1e-9))
        out.append((heads, neurons))
    return out


def structured_densities(cfg, plan: SparsityPlan) -> dict:
    """Weight densities implied by the structured alive counts (for the cost model)."""
    dens = {}
    for l, (h, n) in enumerate(structured_alive_counts(cfg, plan)):
        dens[f"blocks.{l}.qkv"] = dens[f"blocks.{l}.proj"] = h / cfg.heads
        dens[f"blocks.{l}.fc1"] = dens[f"blocks.{l}.fc2"] = n / cfg.hidden
    return dens


def random_structured_init(model: VisionTransformer, plan: SparsityPlan, rng: np.random.Generator) -> None:
    for blk, (h, n) in zip(model.blocks, structured_alive_counts(model, plan)):
        blk.alive_heads = np.zeros(blk.heads, dtype=bool)
        blk.alive_heads[np.sort(rng.permutation(blk.heads)[:h])] = True
        blk.alive_neurons = np.zeros(blk.hidden, dtype=bool)
        blk.alive_neurons[np.sort(rng.permutation(blk.hidden)[:n])] = True
        for p in blk.masked_params():
            p.reservoir = p.weight.data.copy()
        blk.apply_unit_masks()


def head_importance(artifacts: ForwardArtifacts, layer: int, head: int) -> float:
    """|sum over batch, tokens and features of A * dL/dA| for one head."""
    if artifacts is None or layer >= len(artifacts.head_outputs):
        raise StateError("no recorded head outputs for this layer")
    a = artifacts.head_outputs[layer]
    if a.grad is None:
        raise StateError("head outputs carry no gradient; run backward first")
    return float(abs(np.sum(a.data[:, head] * a.grad[:, head])))


def head_importances(artifacts: ForwardArtifacts, layer: int) -> np.ndarray:
    a = artifacts.head_outputs[layer]
    if a.grad is None:
        raise StateError("head outputs carry no gradient; run backward first")
    H = a.shape[1]
    return np.array([head_importance(artifacts, layer, h) for h in range(H)])


def head_grow_scores(artifacts: ForwardArtifacts, layer: int) -> np.ndarray:
    """||dL/dA_(l,h)||_1 per head."""
    a = artifacts.head_outputs[layer]
    if a.grad is None:
        raise StateError("head outputs carry no gradient; run backward first")
    return np.abs(a.grad).sum(axis=(0, 2, 3))


def neuron_importance(fc1: MaskedParam, neuron: int) -> float:
    """l1 norm of the neuron's fc1 row."""
    return float(np.abs(fc1.weight.data[neuron]).sum())


def neuron_importances(fc1: MaskedParam) -> np.ndarray:
    return np.abs(fc1.weight.data).sum(axis=1)


def neuron_grow_scores(fc1: MaskedParam) -> np.ndarray:
    """||dL/dW1[j, :]||_1 per neuron, from the dense gradient of the effective weight."""
    return np.abs(fc1.dense_grad()).sum(axis=1)


def _swap_units(alive: np.ndarray, prune_scores: np.ndarray, grow_scores: np.ndarray, rho: int, what: str):
    n_alive = int(alive.sum())
    if rho >= 1 and n_alive <= 1:
        warnings.warn(f"{what}: only one unit alive; update skipped", RuntimeWarning)
        return np.zeros(0, dtype=int), np.zeros(0, dtype=int)
    rho = min(rho, n_alive - 1, int((~alive).sum()))
    if rho <= 0:
        return np.zeros(0, dtype=int), np.zeros(0, dtype=int)
    drop = _lowest(prune_scores, alive, rho)
    add = _highest(grow_scores, ~alive, rho)
    return drop, add


def structured_prune_grow(blk: Block, head_prune: np.ndarray, head_grow: np.ndarray, neuron_prune: np.ndarray,
                          neuron_grow: np.ndarray, fraction: float) -> dict:
    """Swap heads and neurons of one block; alive counts are conserved.

    Unit counts are rounded up.  A pruned unit's weights are parked in the
    reservoir and zeroed.  A grown unit gets its input-side weights (Q/K/V
    rows, fc1 row) back from the reservoir and zero output-side weights
    (out-projection columns, fc2 column), so the function is unchanged at the
    moment of growth.
    """
    n_heads = int(blk.alive_heads.sum())
    n_neurons = int(blk.alive_neurons.sum())
    rho_h = math.ceil(fraction * n_heads - 1e-9) if fraction > 0 else 0
    rho_n = math.ceil(fraction * n_neurons - 1e-9) if fraction > 0 else 0
    hd, ha = _swap_units(blk.alive_heads, head_prune, head_grow, rho_h, f"layer {blk.layer} heads")
    nd, na = _swap_units(blk.alive_neurons, neuron_prune, neuron_grow, rho_n, f"layer {blk.layer} neurons")

    for p in blk.masked_params():
        p.reservoir = np.where(p.mask > 0, p.weight.data, p.reservoir)
    blk.alive_heads[hd] = False
    blk.alive_heads[ha] = True
    blk.alive_neurons[nd] = False
    blk.alive_neurons[na] = True
    for h in ha:
        rows, cols = blk.head_rows(h), blk.head_cols(h)
        blk.qkv.weight.data[rows] = blk.qkv.reservoir[rows]
        blk.proj.weight.data[:, cols] = 0.0
        if blk.qkv_b is not None:
            blk.qkv_b.data[rows] = 0.0
    for j in na:
        blk.fc1.weight.data[j] = blk.fc1.reservoir[j]
        blk.fc2.weight.data[:, j] = 0.0
        blk.fc1_b.data[j] = 0.0
    blk.apply_unit_masks()
    return {"heads_pruned": hd, "heads_grown": ha, "neurons_pruned": nd, "neurons_grown": na}


# ------------------------------------------------------------------ baselines


def _global_magnitude_masks(params: Sequence[MaskedParam], scores: Sequence[np.ndarray], sparsity: float) -> None:
    total = sum(p.numel for p in params)
    keep = int(round((1.0 - sparsity) * total))
    flat = np.concatenate([s.reshape(-1) for s in scores])
    order = np.lexsort((np.arange(flat.size), -flat))
    chosen = np.zeros(flat.size)
    chosen[order[:keep]] = 1.0
    off = 0
    for p in params:
        p.set_mask(chosen[off: off + p.numel].reshape(p.shape))
        off += p.numel


def baseline_omp(model: VisionTransformer, sparsity: float) -> None:
    """One-shot global magnitude pruning of the prunable weights."""
    params = model.masked_params()
    if sparsity == 0:
        return
    _global_magnitude_masks(params, [np.abs(p.weight.data) * p.mask for p in params], sparsity)


def baseline_tp(model: VisionTransformer, sparsity: float) -> None:
    """One-shot global pruning by |w * g|; needs dense gradients from a scoring batch."""
    params = model.masked_params()
    if sparsity == 0:
        return
    _global_magnitude_masks(params, [np.abs(p.weight.data * p.dense_grad()) * p.mask for p in params], sparsity)


def gmp_events(total_epochs: int, n_events: int = 20) -> list:
    """Epochs of the gradual pruning events: equally spaced over (total/6, total/2]."""
    start, end = total_epochs / 6.0, total_epochs / 2.0
    return [int(round(start + k * (end - start) / n_events)) for k in range(1, n_events + 1)]


def gmp_target(epoch: int, total_epochs: int, final_sparsity: float, n_events: int = 20) -> Optional[float]:
    """Sparsity to reach at ``epoch``, or None if no event fires then."""
    events = gmp_events(total_epochs, n_events)
    if epoch not in events:
        return None
    k = max(i for i, e in enumerate(events, start=1) if e == epoch)
    return final_sparsity * k / n_events


def baseline_gmp_step(model: VisionTransformer, epoch: int, total_epochs: int, final_sparsity: float,
                      n_events: int = 20) -> bool:
    """Apply the gradual-magnitude pruning event for ``epoch`` (layer-wise); no-op outside events."""
    target = gmp_target(epoch, total_epochs, final_sparsity, n_events)
    if target is None:
        return False
    for p in model.masked_params():
        keep = int(round((1.0 - target) * p.numel))
        scores = np.abs(p.weight.data) * p.mask
        order = np.lexsort((np.arange(p.numel), -scores.reshape(-1)))
        m = np.zeros(p.numel)
        m[order[:keep]] = 1.0
        p.set_mask(m.reshape(p.shape))
    return True


def baseline_ssp(model: VisionTransformer, artifacts: ForwardArtifacts, sparsity: float) -> None:
    """One-shot structured pruning: keep the top heads (Eq.-1 score) and neurons (l1)."""
    plan = plan_for_model(model, sparsity)
    for blk, (h, n) in zip(model.blocks, structured_alive_counts(model, plan)):
        hs = head_importances(artifacts, blk.layer)
        ns = neuron_importances(blk.fc1)
        keep_h = _highest(hs, np.ones(blk.heads, dtype=bool), h)
        keep_n = _highest(ns, np.ones(blk.hidden, dtype=bool), n)
        blk.alive_heads = np.zeros(blk.heads, dtype=bool)
        blk.alive_heads[keep_h] = True
        blk.alive_neurons = np.zeros(blk.hidden, dtype=bool)
        blk.alive_neurons[keep_n] = True
        blk.apply_unit_masks()


def mask_hamming(before: dict, after: dict) -> int:
    return int(sum(np.sum(before[k] != after[k]) for k in before))


def snapshot_masks(model: VisionTransformer) -> dict:
    return {p.name: p.mask.copy() for p in model.masked_params()}
