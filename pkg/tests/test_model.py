import copy

import numpy as np
import pytest

from sparsevit import autograd as ag
from sparsevit import sparsity as sp
from sparsevit.model import (ConfigError, ViTConfig, VisionTransformer, patchify, preset,
                             structural_copy_without_units)


def images(cfg, b=2, seed=0):
    return np.random.default_rng(seed).normal(size=(b, cfg.channels, cfg.image_side, cfg.image_side))


def test_presets_and_derived_sizes():
    t = preset("deit_small")
    assert (t.n_patches, t.n_tokens, t.head_dim, t.hidden) == (196, 197, 64, 1536)
    with pytest.raises(ConfigError):
        preset("deit_huge")


def test_config_validation():
    with pytest.raises(ConfigError):
        ViTConfig(embed_dim=65, heads=4)
    with pytest.raises(ConfigError):
        ViTConfig(image_side=30, patch_size=8)


def test_patchify_row_major():
    img = np.arange(2 * 4 * 4, dtype=float).reshape(1, 2, 4, 4)
    p = patchify(img, 2)
    assert p.shape == (1, 4, 8)
    # patch 1 is the top-right 2x2 block of each channel
    assert np.array_equal(p[0, 1], np.concatenate([img[0, 0, :2, 2:].ravel(), img[0, 1, :2, 2:].ravel()]))


def test_forward_shapes_and_artifacts():
    cfg = preset("toy")
    m = VisionTransformer(cfg)
    logits, arts = m.forward(images(cfg))
    assert logits.shape == (2, cfg.classes)
    assert len(arts.head_outputs) == cfg.layers
    assert arts.head_outputs[0].shape == (2, cfg.heads, cfg.n_tokens, cfg.head_dim)
    assert np.allclose(arts.attention[0].data.sum(-1), 1.0)


def test_no_cls_token_uses_mean_pooling():
    cfg = ViTConfig(use_cls_token=False)
    m = VisionTransformer(cfg)
    logits, _ = m.forward(images(cfg))
    assert logits.shape == (2, 10)
    assert m.cls_token is None and cfg.n_tokens == cfg.n_patches


def test_bad_image_shape():
    m = VisionTransformer(preset("toy"))
    with pytest.raises(ConfigError):
        m.forward(np.zeros((1, 3, 16, 16)))


def test_param_count_matches_cost_model():
    from sparsevit.cost import count_params

    cfg = preset("toy")
    assert VisionTransformer(cfg).num_params() == count_params(cfg)[0]


def test_masked_entries_do_not_affect_output():
    cfg = preset("toy")
    m = VisionTransformer(cfg)
    sp.random_masks(m, sp.plan_for_model(m, 0.5), np.random.default_rng(0))
    x = images(cfg)
    a = m.forward(x)[0].data
    for p in m.masked_params():
        p.weight.data[p.mask == 0] = 123.0  # garbage under the mask
    b = m.forward(x)[0].data
    assert np.array_equal(a, b)


def test_gradients_of_pruned_entries_are_zero():
    cfg = preset("toy")
    m = VisionTransformer(cfg)
    sp.random_masks(m, sp.plan_for_model(m, 0.7), np.random.default_rng(1))
    logits, _ = m.forward(images(cfg))
    ag.cross_entropy_label_smoothed(logits, [1, 2]).backward()
    for p in m.masked_params():
        assert np.all(p.weight.grad[p.mask == 0] == 0)
        assert p.dense_grad().shape == p.shape


def test_compaction_preserves_function():
    cfg = preset("toy")
    m = VisionTransformer(cfg, seed=3)
    sp.random_structured_init(m, sp.plan_for_model(m, 0.4), np.random.default_rng(3))
    for b in m.blocks:  # give live biases nonzero values
        b.qkv_b.data += 0.1
        b.fc1_b.data += 0.1
    m.apply_masks()
    small = structural_copy_without_units(m)
    x = images(cfg)
    assert np.allclose(m.forward(x)[0].data, small.forward(x)[0].data, atol=1e-12)
    assert small.blocks[0].fc1.shape[0] == int(m.blocks[0].alive_neurons.sum())
    assert small.num_params() < m.num_params()


def test_unmasked_pass_reads_reservoir():
    cfg = preset("toy")
    m = VisionTransformer(cfg)
    sp.random_structured_init(m, sp.plan_for_model(m, 0.4), np.random.default_rng(0))
    x = images(cfg)
    masked = m.forward(x)[0].data
    unmasked = m.forward(x, unmasked=True)[0].data
    assert not np.allclose(masked, unmasked)
    full = copy.deepcopy(m)
    for p in full.masked_params():
        p.weight.data = np.where(p.mask > 0, p.weight.data, p.reservoir)
        p.mask = np.ones(p.shape)
    for b in full.blocks:
        b.alive_heads[:] = True
        b.alive_neurons[:] = True
    assert np.allclose(unmasked, full.forward(x)[0].data, atol=1e-12)
