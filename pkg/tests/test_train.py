import math

import numpy as np
import pytest

from sparsevit import autograd as ag
from sparsevit import sparsity as sp
from sparsevit.data import Dataset, synthetic_patch_task
from sparsevit.model import VisionTransformer, preset
from sparsevit.train import (AdamW, TrainConfig, TrainingError, build_model, evaluate, lr_at,
                             measure_iteration_time, train, unstructured_update)

SMALL = synthetic_patch_task(96, seed=5)  # 3 iterations per epoch at batch 32


def cfg(**kw):
    base = dict(mode="svite", epochs=3, batch_size=32, lr_ref=0.016, warmup_epochs=1, delta_t=2, sparsity=0.5)
    base.update(kw)
    return TrainConfig(**base)


def run(tc, data=SMALL, **kw):
    model, selector = build_model(preset("toy"), tc)
    return train(model, data, tc, selector, **kw) + (selector,)


def test_lr_scaling_rule():
    assert TrainConfig(batch_size=512).base_lr == 0.0005
    assert TrainConfig(batch_size=128, lr_ref=0.0005).base_lr == 0.0005 * 128 / 512


def test_lr_curve_matches_closed_form_every_iteration():
    tc = cfg(mode="dense", epochs=4)
    _, met, _ = run(tc)
    total, warm, base = 12, 3, tc.base_lr
    for r in met.iterations:
        t = r["iteration"]
        expect = base * t / warm if t <= warm else base * 0.5 * (1 + math.cos(math.pi * (t - warm) / (total - warm)))
        assert r["lr"] == expect
    assert lr_at(total, base, warm, total) == 0.0


def test_adamw_matches_reference_update():
    w0 = np.array([[0.5, -1.0], [2.0, 0.1]])
    t = ag.parameter(w0)
    opt = AdamW({"w": t}, weight_decay=0.1)
    ref, m, v = w0.copy(), np.zeros_like(w0), np.zeros_like(w0)
    for step, g in enumerate([np.array([[0.1, 0.2], [-0.3, 0.0]]), np.array([[1.0, -1.0], [0.5, 0.25]])], start=1):
        t.grad = g.copy()
        opt.step(0.01)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref = ref * (1 - 0.01 * 0.1)
        ref = ref - 0.01 * (m / (1 - 0.9**step)) / (np.sqrt(v / (1 - 0.999**step)) + 1e-8)
    assert np.allclose(t.data, ref, rtol=0, atol=1e-15)


def test_adamw_skips_decay_for_vectors_and_embeddings():
    assert not AdamW.decays("blocks.0.fc1_b", ag.parameter(np.zeros(3)))
    assert not AdamW.decays("pos_embed", ag.parameter(np.zeros((1, 3, 4))))
    assert AdamW.decays("blocks.0.fc1", ag.parameter(np.zeros((3, 4))))


def test_dense_mode_never_updates_topology():
    model, met, _ = run(cfg(mode="dense", sparsity=0.0))
    assert met.updates == [] and all(np.all(p.mask == 1) for p in model.masked_params())


def test_delta_t_beyond_run_keeps_initial_masks():
    tc = cfg(delta_t=10_000)
    model, _ = build_model(preset("toy"), tc)
    before = sp.snapshot_masks(model)
    model, met = train(model, SMALL, tc)
    assert met.updates == [] and sp.mask_hamming(before, sp.snapshot_masks(model)) == 0


def test_update_count_and_masked_weights_stay_zero():
    tc = cfg(epochs=4, delta_t=2, t_end_fraction=0.8)   # 12 iterations, T_end = 9
    seen = []

    def cb(event, info):
        if event == "epoch":
            for p in info["model"].masked_params():
                seen.append(np.all(p.weight.data[p.mask == 0] == 0))

    model, met, _ = run(tc, callback=cb)
    assert len(met.updates) == math.floor(9 / 2)
    assert all(seen) and seen
    for p in model.masked_params():
        p.check()


def test_update_iterations_skip_weight_step():
    tc = cfg(epochs=1, delta_t=1, alpha=0.0)  # updates with rho = 0 on every iteration up to T_end
    model, _ = build_model(preset("toy"), tc)
    w0 = {k: t.data.copy() for k, t in model.named_tensors().items()}
    model, met = train(model, SMALL, tc)
    n_upd = len(met.updates)
    assert n_upd == 2  # T_end = int(0.8 * 3)
    changed = any(not np.array_equal(w0[k], t.data) for k, t in model.named_tensors().items())
    assert changed  # the one non-update iteration stepped


def test_moments_reset_for_changed_connections():
    model = VisionTransformer(preset("toy"))
    sp.random_masks(model, sp.plan_for_model(model, 0.5), np.random.default_rng(0))
    opt = AdamW(model.named_tensors())
    for k in opt.m:
        opt.m[k][...] = 1.0
        opt.v[k][...] = 1.0
    before = sp.snapshot_masks(model)
    logits, _ = model.forward(np.random.default_rng(0).normal(size=(2, 3, 32, 32)))
    ag.cross_entropy_label_smoothed(logits, [0, 1]).backward()
    info = unstructured_update(model, opt, 0.3)
    assert info["hamming"] > 0
    for p in model.masked_params():
        changed = before[p.name] != p.mask
        assert np.all(opt.m[p.name][changed] == 0) and np.all(opt.v[p.name][changed] == 0)
        assert np.all(opt.m[p.name][~changed] == 1)


def test_structured_run_conserves_units():
    tc = cfg(mode="s2vite", sparsity=0.4, epochs=4, delta_t=2)
    model, met, _ = run(tc)
    assert met.updates and any(u["rho"] > 0 for u in met.updates)
    assert [(int(b.alive_heads.sum()), int(b.alive_neurons.sum())) for b in model.blocks] == [(3, 144)] * 2
    for b in model.blocks:
        um = b.unit_masks()
        assert all(np.array_equal(getattr(b, r).mask, um[r]) for r in um)


def test_selector_run_records_selection():
    tc = cfg(mode="svite_plus", data_sparsity=0.25)
    model, met, selector = run(tc)
    assert selector is not None and selector.cfg.k == 12
    assert met.epochs[-1]["flops_saving"] > 0


def test_svite_plus_requires_data_sparsity():
    with pytest.raises(TrainingError):
        TrainConfig(mode="svite_plus", data_sparsity=0.0)
    with pytest.raises(TrainingError):
        TrainConfig(mode="nope")


@pytest.mark.parametrize("mode", ["omp", "tp", "ssp"])
def test_oneshot_baselines_prune_once(mode):
    tc = cfg(mode=mode, epochs=2, sparsity=0.4)
    model, met, _ = run(tc)
    assert len(met.prune_events) == 1 and met.prune_events[0]["step"] == 1
    if mode == "ssp":
        assert [int(b.alive_heads.sum()) for b in model.blocks] == [3, 3]
    else:
        total = sum(p.numel for p in model.masked_params())
        assert sum(p.active_count() for p in model.masked_params()) == round(0.6 * total)


def test_small_dense_has_fewer_layers():
    model, _ = build_model(preset("toy"), cfg(mode="small_dense", sparsity=0.5))
    assert model.cfg.layers < 2 and all(np.all(p.mask == 1) for p in model.masked_params())


def test_nan_aborts_with_diagnostic():
    tc = cfg(mode="dense")
    model, _ = build_model(preset("toy"), tc)
    model.head.weight.data[0, 0] = np.nan
    with pytest.raises(TrainingError, match="iteration 1"):
        train(model, SMALL, tc)


def test_seeded_runs_are_identical():
    tc = cfg(mode="svite_plus", data_sparsity=0.25)
    m1, r1, _ = run(tc)
    m2, r2, _ = run(tc)
    assert [r["loss"] for r in r1.iterations] == [r["loss"] for r in r2.iterations]
    for (k, a), b in zip(m1.named_tensors().items(), m2.named_tensors().values()):
        assert np.array_equal(a.data, b.data), k


def test_resume_is_bit_identical(tmp_path):
    tc = cfg(epochs=3)
    full, _, _ = run(tc)

    class Stop(Exception):
        pass

    def stop_after_first(event, info):
        if event == "epoch" and info["epoch"] == 1:
            raise Stop

    with pytest.raises(Stop):
        run(tc, out_dir=tmp_path, callback=stop_after_first)
    model, selector = build_model(preset("toy"), tc)
    model, _ = train(model, SMALL, tc, selector, out_dir=tmp_path, resume=tmp_path / "checkpoint.svt")
    for (k, a), b in zip(full.named_tensors().items(), model.named_tensors().values()):
        assert np.array_equal(a.data, b.data), k
    assert all(np.array_equal(p.mask, q.mask) for p, q in zip(full.masked_params(), model.masked_params()))


def test_checkpoint_and_metrics_written(tmp_path):
    run(cfg(epochs=1), out_dir=tmp_path)
    assert (tmp_path / "checkpoint.svt").exists() and (tmp_path / "summary.json").exists()
    lines = (tmp_path / "metrics.csv").read_text().splitlines()
    assert lines[0] == "iteration,loss,lr,acc,sparsity,hamming,ms" and len(lines) == 1 + 3 + 1


def test_evaluate_deterministic_and_chance_level():
    r = np.random.default_rng(0)
    ds = Dataset(r.normal(size=(2000, 3, 32, 32)), np.tile(np.arange(10), 200))
    model = VisionTransformer(preset("toy"), seed=1)
    a, b = evaluate(model, ds), evaluate(model, ds)
    assert a == b and abs(a - 0.10) <= 0.03


def test_evaluate_empty_dataset():
    with pytest.raises(ag.ArgumentError):
        evaluate(VisionTransformer(preset("toy")), Dataset(np.zeros((0, 3, 32, 32)), np.zeros(0)))


def test_measure_iteration_time_contract():
    model = VisionTransformer(preset("toy"))
    with pytest.raises(ag.ArgumentError):
        measure_iteration_time(model, iterations=10)
    ms = measure_iteration_time(model, iterations=100, batch_size=4, warmup=1)
    assert ms > 0
