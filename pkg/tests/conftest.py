import functools

import numpy as np
import pytest

from sparsevit.data import synthetic_patch_task
from sparsevit.model import preset
from sparsevit.sparsity import snapshot_masks
from sparsevit.train import TrainConfig, build_model, train

TOY_TRAIN = 1600   # 50 iterations per epoch at batch 32
TOY_EPOCHS = 40    # 2000 iterations
TOY_LR_REF = 0.016


@functools.lru_cache(maxsize=None)
def toy_data():
    return synthetic_patch_task(TOY_TRAIN, seed=0), synthetic_patch_task(500, seed=10_000)


class RunRecord:
    """Trained model plus the states observed through the trainer callback."""

    def __init__(self):
        self.updates = []      # (iteration, info, masks, weights, exempt masks) right after each update
        self.epoch_masks = []  # (iteration, masks) at each epoch end
        self.model = None
        self.selector = None
        self.metrics = None


def toy_config(mode="dense", seed=0, sparsity=0.5, data_sparsity=0.0, **kw):
    return TrainConfig(mode=mode, epochs=kw.pop("epochs", TOY_EPOCHS), batch_size=32, lr_ref=TOY_LR_REF, seed=seed,
                       sparsity=sparsity, data_sparsity=data_sparsity, **kw)


@functools.lru_cache(maxsize=None)
def toy_run(mode="dense", seed=0, sparsity=0.5, data_sparsity=0.0, record=False):
    tc = toy_config(mode, seed, sparsity, data_sparsity)
    model, selector = build_model(preset("toy"), tc)
    rec = RunRecord()
    rec.initial_masks = snapshot_masks(model)

    def callback(event, info):
        if not record:
            return
        m = info["model"]
        if event == "update":
            rec.updates.append((info["iteration"], {k: v for k, v in info.items() if k != "model"},
                                snapshot_masks(m), {p.name: p.weight.data.copy() for p in m.masked_params()},
                                {p.name: p.mask.copy() for p in m.exempt_params()}))
        elif event == "epoch":
            rec.epoch_masks.append((info["iteration"], snapshot_masks(m)))

    train_set, val_set = toy_data()
    rec.model, rec.metrics = train(model, train_set, tc, selector, val=val_set, callback=callback)
    rec.selector = selector
    rec.config = tc
    return rec


@pytest.fixture(scope="session")
def data():
    return toy_data()


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in range(1, 10):
        terminalreporter.write_line(mod.RESULTS.get(n, f"criterion {n}: NOT RUN"))
