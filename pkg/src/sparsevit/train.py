"""Training loop with periodic topology updates, AdamW and warmup + cosine LR."""
from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import dataclass, field, asdict, replace
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import autograd as ag
from . import sparsity as sp
from .cost import count_flops, count_params, small_dense_config
from .data import Dataset
from .model import VisionTransformer, ViTConfig, structural_copy_without_units
from .selector import SelectorConfig, TokenSelector

log = logging.getLogger(__name__)

MODES = ("dense", "svite", "s2vite", "svite_plus", "omp", "gmp", "tp", "ssp", "small_dense")
DYNAMIC_MODES = ("svite", "s2vite", "svite_plus")
ONESHOT_MODES = ("omp", "tp", "ssp")


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    mode: str = "svite"
    epochs: int = 40
    batch_size: int = 32
    lr_ref: float = 0.0005          # learning rate at batch size 512
    warmup_epochs: int = 5
    weight_decay: float = 0.05
    label_smoothing: float = 0.1
    delta_t: int = 100
    t_end_fraction: float = 0.8
    alpha: float = 0.5
    sparsity: float = 0.5
    data_sparsity: float = 0.0
    seed: int = 0
    grad_clip: float = 5.0
    tau: float = 1.0
    scorer_hidden: int = 16
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    oneshot_at: float = 0.5         # fraction of epochs trained dense before OMP/TP/SSP
    gmp_events: int = 20

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.mode not in MODES:
            raise TrainingError(f"unknown mode {self.mode!r}; choose from {MODES}")
        if self.epochs < 0 or self.batch_size < 1:
            raise TrainingError("epochs must be >= 0 and batch_size >= 1")
        if not 0.0 <= self.sparsity < 1.0:
            raise TrainingError("sparsity must be in [0, 1)")
        if not 0.0 <= self.data_sparsity < 1.0:
            raise TrainingError("data_sparsity must be in [0, 1)")
        if self.mode == "svite_plus" and self.data_sparsity <= 0:
            raise TrainingError("svite_plus needs data_sparsity > 0")

    @property
    def base_lr(self) -> float:
        return self.lr_ref * self.batch_size / 512.0

    @property
    def uses_selector(self) -> bool:
        return self.mode == "svite_plus" or self.data_sparsity > 0

    def iterations_per_epoch(self, n: int) -> int:
        return math.ceil(n / self.batch_size)

    def schedule(self, total_iterations: int) -> sp.UpdateSchedule:
        return sp.UpdateSchedule.for_run(total_iterations, self.delta_t, self.alpha, self.t_end_fraction)

    def to_dict(self) -> dict:
        return asdict(self)


def lr_at(t: int, base_lr: float, warmup_iters: int, total_iters: int) -> float:
    """Linear warmup over ``warmup_iters`` then cosine decay to 0 at ``total_iters`` (t is 1-based)."""
    if warmup_iters > 0 and t <= warmup_iters:
        return base_lr * t / warmup_iters
    span = max(1, total_iters - warmup_iters)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * min(1.0, (t - warmup_iters) / span)))


class AdamW:
    """Adam with decoupled weight decay; 1-D tensors and embeddings are not decayed."""

    def __init__(self, tensors: dict, weight_decay: float = 0.05, betas=(0.9, 0.999), eps: float = 1e-8):
        self.tensors = tensors
        self.weight_decay = weight_decay
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.step_count = 0
        self.m = {k: np.zeros_like(t.data) for k, t in tensors.items()}
        self.v = {k: np.zeros_like(t.data) for k, t in tensors.items()}

    @staticmethod
    def decays(name: str, t: ag.Tensor) -> bool:
        return t.ndim >= 2 and not name.endswith(("pos_embed", "cls_token"))

    def step(self, lr: float) -> None:
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.step_count
        c2 = 1.0 - b2**self.step_count
        for k, t in self.tensors.items():
            if t.grad is None:
                continue
            g = t.grad
            m, v = self.m[k], self.v[k]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            if self.weight_decay and self.decays(k, t):
                t.data *= 1.0 - lr * self.weight_decay
            t.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def reset(self, name: str, where: np.ndarray) -> None:
        """Zero both moments at ``where`` (boolean mask or index array)."""
        self.m[name][where] = 0.0
        self.v[name][where] = 0.0

    def state(self) -> dict:
        return {"step": self.step_count, "m": self.m, "v": self.v}

    def load_state(self, state: dict) -> None:
        self.step_count = int(state["step"])
        for k in self.tensors:
            self.m[k][...] = state["m"][k]
            self.v[k][...] = state["v"][k]


def clip_grad_norm(tensors, max_norm: float) -> float:
    grads = [t.grad for t in tensors if t.grad is not None]
    norm = math.sqrt(sum(float(np.vdot(g, g)) for g in grads))
    if not math.isfinite(norm):
        raise TrainingError(f"non-finite gradient norm {norm}")
    if max_norm and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for g in grads:
            g *= scale
    return norm


@dataclass
class RunMetrics:
    iterations: list = field(default_factory=list)   # dicts: iteration, loss, lr, ms, update
    epochs: list = field(default_factory=list)       # dicts: epoch, train_acc, val_acc, sparsity, flops_saving
    updates: list = field(default_factory=list)      # dicts: iteration, fraction, rho, hamming, ...
    prune_events: list = field(default_factory=list) # baselines: dicts with epoch/iteration, target
    flops: list = field(default_factory=list)        # FlopsReport dicts per epoch
    final_train_acc: Optional[float] = None
    final_val_acc: Optional[float] = None

    @property
    def losses(self) -> list:
        return [r["loss"] for r in self.iterations]

    def summary(self) -> dict:
        return {
            "iterations": len(self.iterations),
            "topology_updates": len(self.updates),
            "prune_events": len(self.prune_events),
            "final_loss": self.iterations[-1]["loss"] if self.iterations else None,
            "final_train_acc": self.final_train_acc,
            "final_val_acc": self.final_val_acc,
            "epochs": self.epochs,
        }


# ------------------------------------------------------------------ model setup


def build_model(vit_cfg: ViTConfig, cfg: TrainConfig):
    """Model (and selector, if any) initialised for ``cfg.mode``.

    Sparse modes start from the random topology of the ER plan; Small-Dense
    drops layers until its dense size matches the sparse model's active count.
    """
    rng = np.random.default_rng(cfg.seed)
    if cfg.mode == "small_dense":
        target = count_params(vit_cfg, sp.plan_for_config(vit_cfg, cfg.sparsity).densities())[1]
        vit_cfg = small_dense_config(vit_cfg, target)
    model = VisionTransformer(vit_cfg, seed=cfg.seed)
    if cfg.mode in ("svite", "svite_plus") and cfg.sparsity > 0:
        sp.random_masks(model, sp.plan_for_model(model, cfg.sparsity), rng)
    elif cfg.mode == "s2vite" and cfg.sparsity > 0:
        sp.random_structured_init(model, sp.plan_for_model(model, cfg.sparsity), rng)
    selector = None
    if cfg.uses_selector:
        scfg = SelectorConfig.from_data_sparsity(vit_cfg.n_patches, cfg.data_sparsity, tau=cfg.tau,
                                                 scorer_hidden=cfg.scorer_hidden)
        selector = TokenSelector(vit_cfg.embed_dim, scfg, seed=cfg.seed + 1)
    return model, selector


def trainable_tensors(model: VisionTransformer, selector: Optional[TokenSelector] = None) -> dict:
    out = dict(model.named_tensors())
    if selector is not None:
        out.update(selector.named_tensors())
    return out


def _zero_grads(tensors: dict) -> None:
    for t in tensors.values():
        t.grad = None


def _loss(model, selector, images, labels, rng, cfg: TrainConfig, train: bool = True, unmasked: bool = False):
    logits, arts = model.forward(images, selector=selector, rng=rng, train=train, unmasked=unmasked)
    return ag.cross_entropy_label_smoothed(logits, labels, cfg.label_smoothing), logits, arts


def current_densities(model: VisionTransformer) -> dict:
    return {p.name: p.active_count() / p.numel for p in model.masked_params()}


def model_sparsity(model: VisionTransformer) -> float:
    ps = model.masked_params()
    total = sum(p.numel for p in ps)
    return 1.0 - sum(p.active_count() for p in ps) / total if total else 0.0


# ----------------------------------------------------------- topology updates


def unstructured_update(model: VisionTransformer, opt: AdamW, fraction: float) -> dict:
    before = sp.snapshot_masks(model)
    rho_total = 0
    for p in model.masked_params():
        rho = sp.prune_count(fraction, p.budget)
        pruned, grown = sp.prune_grow_unstructured(p, p.dense_grad(), rho)
        if pruned.any() or grown.any():
            opt.reset(p.name, pruned | grown)
        rho_total += int(pruned.sum())
        p.check()
    return {"rho": rho_total, "hamming": sp.mask_hamming(before, sp.snapshot_masks(model))}


def structured_update(model, selector, opt: AdamW, arts, images, labels, cfg: TrainConfig, fraction: float) -> dict:
    """Prune by Eq.-1 / l1 scores from the masked pass, grow by scores from an unmasked pass."""
    prune_scores = [(sp.head_importances(arts, b.layer), sp.neuron_importances(b.fc1)) for b in model.blocks]
    tensors = trainable_tensors(model, selector)
    _zero_grads(tensors)
    loss, _, arts_u = _loss(model, selector, images, labels, None, cfg, train=False, unmasked=True)
    loss.backward()
    grow_scores = [(sp.head_grow_scores(arts_u, b.layer), sp.neuron_grow_scores(b.fc1)) for b in model.blocks]
    _zero_grads(tensors)

    before = sp.snapshot_masks(model)
    rho_units = 0
    for blk, (hp, npr), (hg, ng) in zip(model.blocks, prune_scores, grow_scores):
        res = sp.structured_prune_grow(blk, hp, hg, npr, ng, fraction)
        heads = np.concatenate([res["heads_pruned"], res["heads_grown"]]).astype(int)
        neurons = np.concatenate([res["neurons_pruned"], res["neurons_grown"]]).astype(int)
        rho_units += len(res["heads_pruned"]) + len(res["neurons_pruned"])
        pre = f"blocks.{blk.layer}."
        for h in heads:
            opt.reset(pre + "qkv", blk.head_rows(h))
            opt.reset(pre + "proj", (slice(None), blk.head_cols(h)))
            if blk.qkv_b is not None:
                opt.reset(pre + "qkv_b", blk.head_rows(h))
        if len(neurons):
            opt.reset(pre + "fc1", neurons)
            opt.reset(pre + "fc2", (slice(None), neurons))
            opt.reset(pre + "fc1_b", neurons)
    after = sp.snapshot_masks(model)
    return {"rho": rho_units, "hamming": sp.mask_hamming(before, after)}


def _oneshot(model, selector, cfg: TrainConfig, images, labels, rng) -> None:
    tensors = trainable_tensors(model, selector)
    _zero_grads(tensors)
    loss, _, arts = _loss(model, selector, images, labels, rng, cfg, train=False)
    loss.backward()
    if cfg.mode == "omp":
        sp.baseline_omp(model, cfg.sparsity)
    elif cfg.mode == "tp":
        sp.baseline_tp(model, cfg.sparsity)
    else:
        sp.baseline_ssp(model, arts, cfg.sparsity)
    _zero_grads(tensors)


def gmp_unit(cfg: TrainConfig, total_iterations: int) -> str:
    """GMP events are placed on epochs when there are enough of them to keep the 20 events distinct."""
    span = cfg.epochs / 2.0 - cfg.epochs / 6.0
    return "epoch" if span >= cfg.gmp_events else "iteration"


# ------------------------------------------------------------------ main loop


def train(model: VisionTransformer, dataset: Dataset, cfg: TrainConfig, selector: Optional[TokenSelector] = None,
          val: Optional[Dataset] = None, out_dir=None, resume=None,
          callback: Optional[Callable] = None):
    """Run training; returns ``(model, RunMetrics)``.

    ``callback(event, info)`` is invoked after each topology update
    (``"update"``), each baseline prune event (``"prune"``) and each epoch
    (``"epoch"``); tests use it to inspect intermediate states.
    """
    if len(dataset) == 0:
        raise TrainingError("empty training set")
    rng = np.random.default_rng(cfg.seed)
    ipe = cfg.iterations_per_epoch(len(dataset))
    total = cfg.epochs * ipe
    warmup = cfg.warmup_epochs * ipe
    sched = cfg.schedule(total)
    tensors = trainable_tensors(model, selector)
    opt = AdamW(tensors, cfg.weight_decay, (cfg.beta1, cfg.beta2), cfg.adam_eps)
    metrics = RunMetrics()
    dynamic = cfg.mode in DYNAMIC_MODES and cfg.sparsity > 0
    structured = cfg.mode == "s2vite"
    oneshot_epoch = int(round(cfg.oneshot_at * cfg.epochs)) if cfg.mode in ONESHOT_MODES else None
    gmp_by = gmp_unit(cfg, total) if cfg.mode == "gmp" else None
    gmp_total = cfg.epochs if gmp_by == "epoch" else total

    t, start_epoch = 0, 0
    if resume is not None:
        from .io import load_training_state

        t, start_epoch = load_training_state(resume, model, selector, opt, rng)
    out = Path(out_dir) if out_dir is not None else None
    writer = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        fh = open(out / "metrics.csv", "a", newline="")
        writer = csv.writer(fh)
        if fh.tell() == 0:
            writer.writerow(["iteration", "loss", "lr", "acc", "sparsity", "hamming", "ms"])
        if start_epoch == 0 and resume is None:
            _save(out, model, selector, opt, rng, cfg, t, 0)

    def gmp_event(step: int) -> None:
        target = sp.gmp_target(step, gmp_total, cfg.sparsity, cfg.gmp_events)
        if target is None:
            return
        sp.baseline_gmp_step(model, step, gmp_total, cfg.sparsity, cfg.gmp_events)
        for p in model.masked_params():
            opt.reset(p.name, p.mask == 0)
        metrics.prune_events.append({"step": step, "unit": gmp_by, "target": target, "sparsity": model_sparsity(model)})
        if callback:
            callback("prune", {"model": model, "step": step, "target": target})

    try:
        for epoch in range(start_epoch, cfg.epochs):
            if oneshot_epoch is not None and epoch == oneshot_epoch and cfg.sparsity > 0:
                xb, yb = next(dataset.batches(cfg.batch_size, None))
                _oneshot(model, selector, cfg, xb, yb, None)
                for p in model.masked_params():
                    opt.reset(p.name, p.mask == 0)
                metrics.prune_events.append({"step": epoch, "unit": "epoch", "target": cfg.sparsity,
                                             "sparsity": model_sparsity(model)})
                if callback:
                    callback("prune", {"model": model, "step": epoch, "target": cfg.sparsity})
            correct = seen = 0
            for xb, yb in dataset.batches(cfg.batch_size, rng):
                t += 1
                t0 = time.perf_counter()
                lr = lr_at(t, cfg.base_lr, warmup, total)
                update = dynamic and sched.is_update(t)
                model.apply_masks()
                _zero_grads(tensors)
                try:
                    loss, logits, arts = _loss(model, selector, xb, yb, rng, cfg, train=True)
                except ag.NonFiniteError as e:
                    raise TrainingError(f"non-finite loss at iteration {t} (epoch {epoch}, lr {lr:.3g}): {e}") from e
                loss.backward()
                correct += int((logits.data.argmax(axis=1) == yb).sum())
                seen += len(yb)
                row = {"iteration": t, "loss": float(loss.data), "lr": lr, "update": update, "hamming": 0}
                if update:
                    f = sched.fraction(t)
                    if structured:
                        info = structured_update(model, selector, opt, arts, xb, yb, cfg, f)
                    else:
                        info = unstructured_update(model, opt, f)
                    info.update(iteration=t, fraction=f)
                    metrics.updates.append(info)
                    row["hamming"] = info["hamming"]
                    if callback:
                        callback("update", {"model": model, "iteration": t, **info})
                else:
                    clip_grad_norm(tensors.values(), cfg.grad_clip)
                    opt.step(lr)
                    model.apply_masks()
                if gmp_by == "iteration":
                    gmp_event(t)
                row["ms"] = (time.perf_counter() - t0) * 1000.0
                metrics.iterations.append(row)
                if writer is not None:
                    writer.writerow([t, repr(row["loss"]), repr(lr), "", f"{model_sparsity(model):.6f}",
                                     row["hamming"], f"{row['ms']:.3f}"])
            if gmp_by == "epoch":
                gmp_event(epoch + 1)
            val_acc = evaluate(model, val, selector, cfg.batch_size) if val is not None and len(val) else None
            rep = count_flops(model.cfg, current_densities(model),
                              token_keep_fraction=selector.cfg.k / model.cfg.n_patches if selector else 1.0)
            ep = {"epoch": epoch + 1, "iteration": t, "train_acc": correct / max(1, seen), "val_acc": val_acc,
                  "sparsity": model_sparsity(model), "flops_saving": rep.savings}
            metrics.epochs.append(ep)
            metrics.flops.append(rep.to_dict())
            if writer is not None:
                writer.writerow([t, "", "", ep["val_acc"] if val_acc is not None else ep["train_acc"],
                                 f"{ep['sparsity']:.6f}", "", ""])
            if out is not None:
                _save(out, model, selector, opt, rng, cfg, t, epoch + 1)
            if callback:
                callback("epoch", {"model": model, **ep})
        metrics.final_train_acc = evaluate(model, dataset, selector, cfg.batch_size)
        if val is not None and len(val):
            metrics.final_val_acc = evaluate(model, val, selector, cfg.batch_size)
    finally:
        if writer is not None:
            fh.close()
    if out is not None:
        (out / "summary.json").write_text(json.dumps(metrics.summary(), indent=2, sort_keys=True))
    return model, metrics


def _save(out: Path, model, selector, opt, rng, cfg, t, epoch) -> None:
    from .io import save_checkpoint

    save_checkpoint(out / "checkpoint.svt", model, selector=selector, optimizer=opt, rng=rng,
                    train_config=cfg.to_dict(), iteration=t, epoch=epoch)


# ------------------------------------------------------------ eval and timing


def predict(model: VisionTransformer, images: np.ndarray, selector: Optional[TokenSelector] = None,
            batch_size: int = 256) -> np.ndarray:
    out = []
    for i in range(0, len(images), batch_size):
        logits, _ = model.forward(images[i: i + batch_size], selector=selector, train=False)
        out.append(logits.data)
    return np.concatenate(out) if out else np.zeros((0, model.cfg.classes))


def evaluate(model: VisionTransformer, dataset: Dataset, selector: Optional[TokenSelector] = None,
             batch_size: int = 256) -> float:
    """Top-1 accuracy in eval mode (no selector noise, masks as they are)."""
    if dataset is None or len(dataset) == 0:
        raise ag.ArgumentError("cannot evaluate on an empty dataset")
    model.apply_masks()
    logits = predict(model, dataset.images, selector, batch_size)
    return float(np.mean(logits.argmax(axis=1) == dataset.labels))


def measure_iteration_time(model: VisionTransformer, cfg: Optional[TrainConfig] = None, iterations: int = 100,
                           warmup: int = 5, batch_size: Optional[int] = None, compact: bool = True,
                           seed: int = 0) -> float:
    """Median wall-clock ms of one training iteration (forward, backward, optimizer step).

    Batches are generated up front so data loading is excluded.  With
    ``compact`` a structured-sparse model is timed on its physically smaller
    copy, which is where removing heads and neurons pays off.
    """
    if iterations < 100:
        raise ag.ArgumentError("timing needs at least 100 iterations")
    cfg = cfg or TrainConfig(mode="dense")
    bs = batch_size or cfg.batch_size
    if compact and any((~b.alive_heads).any() or (~b.alive_neurons).any() for b in model.blocks):
        model = structural_copy_without_units(model)
    else:
        import copy

        model = copy.deepcopy(model)
    rng = np.random.default_rng(seed)
    c = model.cfg
    images = rng.normal(size=(bs, c.channels, c.image_side, c.image_side))
    labels = rng.integers(0, c.classes, size=bs)
    tensors = trainable_tensors(model)
    opt = AdamW(tensors, cfg.weight_decay)
    times = []
    for i in range(warmup + iterations):
        t0 = time.perf_counter()
        _zero_grads(tensors)
        loss, _, _ = _loss(model, None, images, labels, None, cfg, train=True)
        loss.backward()
        opt.step(1e-4)
        model.apply_masks()
        if i >= warmup:
            times.append((time.perf_counter() - t0) * 1000.0)
    return float(np.median(times))
