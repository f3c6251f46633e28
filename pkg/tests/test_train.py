import math

import numpy as np
import pytest

from cbsa.config import load_config
from cbsa.encoders import ClassDictionary
from cbsa.model import CBSAModel
from cbsa.runner import materialize, partition_for
from cbsa.train import TrainConfig, labeled_per_batch, steps_per_epoch, train

SMALL = {
    "data.n_total": 120,
    "data.n_val": 60,
    "data.p": 0.1,
    "train.total_epochs": 4,
    "train.warmup_epochs": 2,
}


def small_run(ablation="full", seed=1, **extra):
    cfg = load_config(environ={}, overrides={**SMALL, **extra})
    loaded = materialize(cfg, seed)
    model = CBSAModel(cfg.model_config(ablation), loaded.classes, seed, cfg.align_config())
    part = partition_for(cfg, loaded.data.labels_l, seed) if model.ci else None
    return model, train(model, loaded.data, cfg.train_config(seed), loaded.spec, part)


def test_batch_arithmetic():
    assert labeled_per_batch(8, 30, 570) == 1
    assert labeled_per_batch(8, 300, 300) == 4
    assert steps_per_epoch(TrainConfig(), 30, 570) == (4, 82)


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(warmup_epochs=5, total_epochs=5)
    with pytest.raises(ValueError):
        TrainConfig(batch_size=1)


@pytest.mark.parametrize("ablation", ["none", "tp", "tp+saa", "full"])
def test_short_run_records(ablation):
    model, res = small_run(ablation)
    assert [r.epoch for r in res.records] == [1, 2, 3, 4]
    warm, post = res.records[:2], res.records[2:]
    assert all(math.isnan(r.pseudo_cf1) and r.loss_unsup == 0.0 for r in warm)
    assert all(0.0 <= r.pseudo_cf1 <= 1.0 and 0.0 < r.pseudo_coverage <= 1.0 for r in post)
    assert all(np.isfinite(r.map_val) for r in res.records)
    if ablation == "full":
        assert 0.0 <= res.context_accuracy <= 1.0
        assert all(r.loss_aux > 0 for r in res.records)
    else:
        assert res.context_accuracy is None
        assert all(r.loss_aux == 0.0 for r in res.records)


def test_supervised_loss_decreases():
    _, res = small_run("tp+saa", **{"train.total_epochs": 8, "train.warmup_epochs": 6})
    assert res.records[-1].loss_sup < res.records[0].loss_sup


def test_training_is_deterministic():
    m1, r1 = small_run("full", seed=3)
    m2, r2 = small_run("full", seed=3)
    assert [rec.row() for rec in r1.records] == [rec.row() for rec in r2.records]
    s1, s2 = m1.state_dict(), m2.state_dict()
    assert all(s1[k].tobytes() == s2[k].tobytes() for k in s1)


def test_context_head_requires_partition(rng):
    cfg = load_config(environ={}, overrides=SMALL)
    loaded = materialize(cfg, 1)
    model = CBSAModel(cfg.model_config("full"), loaded.classes, 1)
    with pytest.raises(ValueError):
        train(model, loaded.data, cfg.train_config(1), loaded.spec, None)


def test_only_trainable_parameters_move():
    cfg = load_config(environ={}, overrides=SMALL)
    loaded = materialize(cfg, 1)
    model = CBSAModel(cfg.model_config("full"), loaded.classes, 1)
    fixed = [p for layer in model.text_encoder.layers for _, p in layer.named_parameters(include_frozen=True)]
    fixed += [p for _, p in model.pool.mha.named_parameters(include_frozen=True)]
    frozen = {id(p): p.data.copy() for p in fixed}
    before = model.state_dict()
    train(model, loaded.data, cfg.train_config(1), loaded.spec, partition_for(cfg, loaded.data.labels_l, 1))
    after = model.state_dict()
    assert all(not np.array_equal(before[k], after[k]) for k in before)
    for p in fixed:
        np.testing.assert_array_equal(p.data, frozen[id(p)])
