import numpy as np
import pytest

from sparsevit import autograd as ag
from sparsevit import sparsity as sp
from sparsevit.cost import (ELEMENTWISE_FLOPS, count_flops, count_params, kept_tokens, small_dense_config,
                            uniform_densities)
from sparsevit.model import VisionTransformer, ViTConfig, preset
from sparsevit.selector import SelectorConfig, TokenSelector


def _counted_macs(model, selector=None):
    cfg = model.cfg
    x = np.zeros((1, cfg.channels, cfg.image_side, cfg.image_side))
    with ag.count_macs() as c:
        model.forward(x, selector=selector)
    return c.total


def test_macs_match_instrumented_forward_dense():
    cfg = preset("toy")
    rep = count_flops(cfg)
    assert rep.macs == _counted_macs(VisionTransformer(cfg))


def test_macs_match_instrumented_forward_sparse():
    cfg = preset("toy")
    m = VisionTransformer(cfg)
    plan = sp.plan_for_model(m, 0.5)
    sp.random_masks(m, plan, np.random.default_rng(0))
    assert count_flops(cfg, plan.densities()).macs == _counted_macs(m)


def test_macs_match_instrumented_forward_with_selector():
    cfg = preset("toy")
    m = VisionTransformer(cfg)
    scfg = SelectorConfig(k=12, noise_enabled=False, scorer_hidden=16)
    sel = TokenSelector(cfg.embed_dim, scfg)
    # 12 patches + cls enter the encoder
    rep = count_flops(cfg, tokens=13, scorer_hidden=16)
    assert rep.macs == _counted_macs(m, sel)


def test_hand_computed_toy_components():
    cfg = preset("toy")  # n=17, d=64, H=4, hidden=256, L=2
    c = count_flops(cfg).components
    n, d, h = 17, 64, 256
    assert c["qkv"] == 2 * 2 * n * 3 * d * d
    assert c["attn_scores"] == 2 * 2 * n * n * d
    assert c["mlp"] == 2 * 2 * (n * d * h * 2)
    e = ELEMENTWISE_FLOPS
    per_layer = e["softmax"] * 4 * n * n + 2 * e["layernorm"] * n * d + e["gelu"] * n * h + 2 * e["residual"] * n * d
    assert c["elementwise"] == 2 * per_layer + e["layernorm"] * n * d


def test_dense_parameter_totals():
    assert count_params(preset("deit_tiny"))[0] == 5_717_416
    assert count_params(preset("deit_small"))[0] == 22_050_664
    assert count_params(preset("deit_base"))[0] == 86_567_656


def test_attention_matmuls_do_not_shrink_with_weight_sparsity():
    cfg = preset("deit_small")
    dense = count_flops(cfg).components
    sparse = count_flops(cfg, uniform_densities(cfg, 0.3)).components
    assert sparse["attn_scores"] == dense["attn_scores"]
    assert sparse["qkv"] == pytest.approx(0.3 * dense["qkv"])


def test_savings_monotone_in_sparsity_and_tokens():
    cfg = preset("deit_small")
    s = [count_flops(cfg, sp.plan_for_config(cfg, S).densities()).savings for S in (0.1, 0.3, 0.5, 0.7)]
    assert s == sorted(s)
    t = [count_flops(cfg, token_keep_fraction=k).savings for k in (1.0, 0.9, 0.7, 0.5)]
    assert t == sorted(t) and t[0] == 0.0


def test_kept_tokens_rounding():
    cfg = preset("deit_small")
    assert kept_tokens(cfg, 1.0) == 197
    assert kept_tokens(cfg, 0.5) == pytest.approx(98.5)
    with pytest.raises(ValueError):
        kept_tokens(cfg, 0.0)


def test_active_params_bases():
    cfg = preset("deit_small")
    dens = sp.plan_for_config(cfg, 0.6).densities()
    rep = count_flops(cfg, dens)
    assert rep.params_active < rep.params_total
    assert rep.params_active_of_total == pytest.approx(rep.params_total * 0.4, rel=1e-6)


def test_small_dense_config_fits_budget():
    cfg = preset("toy")
    target = count_params(cfg, sp.plan_for_config(cfg, 0.5).densities())[1]
    small = small_dense_config(cfg, target)
    assert small.layers < cfg.layers
    assert count_params(small)[0] <= target
