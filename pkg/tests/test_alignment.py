import math

import numpy as np
import pytest

from cbsa import tensor as T
from cbsa.alignment import AlignmentConfig, alignment_degrees, extract_label_specific, zero_shot_softmax
from cbsa.encoders import ClassDictionary
from cbsa.gradcheck import check, full_chain
from cbsa.model import CBSAModel, ModelConfig
from cbsa.nn import TransformerDecoder
from cbsa.tensor import DegenerateRowError, DimensionError


def sig(x):
    return 1 / (1 + math.exp(-x))


def unit(v):
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def test_config_must_be_positive():
    with pytest.raises(ValueError):
        AlignmentConfig(logit_scale=0.0)
    with pytest.raises(ValueError):
        AlignmentConfig(temperature=-1.0)


def test_orthogonal_gives_half():
    p = alignment_degrees(T.tensor([[1.0, 0.0]]), T.tensor([[0.0, 1.0]])).data
    assert p[0] == 0.5


def test_cosine_point_three():
    z = np.array([[1.0, 0.0]])
    t = np.array([[0.3, math.sqrt(1 - 0.09)]])
    p = alignment_degrees(T.tensor(z), T.tensor(t)).data[0]
    assert p == pytest.approx(sig(3.0), abs=1e-12)
    assert p == pytest.approx(0.95257, abs=1e-5)


def test_self_similarity(rng):
    z = rng.normal(size=(4, 6))
    np.testing.assert_allclose(alignment_degrees(T.tensor(z), T.tensor(z)).data, sig(10.0), atol=1e-12)


def test_zero_row_is_degenerate():
    with pytest.raises(DegenerateRowError):
        alignment_degrees(T.tensor([[0.0, 0.0]]), T.tensor([[1.0, 0.0]]))


def test_shape_mismatch(rng):
    with pytest.raises(DimensionError):
        alignment_degrees(T.tensor(rng.normal(size=(3, 4))), T.tensor(rng.normal(size=(2, 4))))


def test_diagonal_pairing_is_exact(rng):
    z, t = rng.normal(size=(5, 8)), rng.normal(size=(5, 8))
    base = alignment_degrees(T.tensor(z), T.tensor(t)).data
    t2 = t.copy()
    t2[3] = rng.normal(size=8)
    moved = alignment_degrees(T.tensor(z), T.tensor(t2)).data
    keep = np.arange(5) != 3
    np.testing.assert_array_equal(moved[keep], base[keep])


def test_degrees_in_open_interval(rng):
    p = alignment_degrees(T.tensor(rng.normal(size=(50, 8))), T.tensor(rng.normal(size=(50, 8)))).data
    assert np.all((p > 0) & (p < 1))


def test_label_specific_identity_and_equivariance(rng):
    dec = TransformerDecoder(32, 2, 4, rng)
    t_s, l = rng.normal(size=(12, 32)), rng.normal(size=(16, 32))
    z = extract_label_specific(T.tensor(l), T.tensor(t_s), dec)
    assert z.shape == (12, 32)
    np.testing.assert_array_equal(z.data, t_s)
    for _, p in dec.named_parameters():
        p.data += rng.normal(scale=0.1, size=p.data.shape)
    perm = rng.permutation(12)
    a = extract_label_specific(T.tensor(l), T.tensor(t_s), dec).data
    b = extract_label_specific(T.tensor(l), T.tensor(t_s[perm]), dec).data
    np.testing.assert_allclose(b, a[perm], atol=1e-12)


def test_zero_shot_examples(rng):
    w = np.repeat(unit(rng.normal(size=(1, 4))), 5, axis=0)
    np.testing.assert_allclose(zero_shot_softmax(rng.normal(size=4), w).data, 0.2, atol=1e-12)
    out = zero_shot_softmax(np.array([1.0, 0.0]), np.array([[1.0, 0.0], [0.0, 1.0]]), AlignmentConfig(temperature=1.0)).data
    np.testing.assert_allclose(out, [math.e / (math.e + 1), 1 / (math.e + 1)], atol=1e-12)
    assert out.sum() == pytest.approx(1.0, abs=1e-9)


def test_class_permutation_equivariance(rng):
    C, d = 6, 16
    classes = ClassDictionary.create(C, d, rng)
    cfg = ModelConfig(d=d, n_heads=4, prompt_length=3, K=2, ablation="tp+saa")
    model = CBSAModel(cfg, classes, seed=3)
    for _, p in model.named_parameters():
        p.data += rng.normal(scale=0.1, size=p.data.shape)
    perm = rng.permutation(C)
    permuted = CBSAModel(cfg, classes.permuted(perm), seed=3)
    for (name, p), (_, q) in zip(model.named_parameters(), permuted.named_parameters()):
        q.data[...] = p.data[perm] if name.startswith("prompts.") else p.data
    feats = unit(rng.normal(size=(4, 9, d)))
    np.testing.assert_array_equal(permuted.predict(feats), model.predict(feats)[:, perm])


def test_full_chain_gradients():
    params, fn = full_chain(seed=1)
    report = check(fn, params)
    assert report.ok, report
