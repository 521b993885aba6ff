import math

import numpy as np
import pytest
import torch

from atfs_lab.atg import LinkWeights, build_atg, subgraph_for_batch
from atfs_lab.fs_loss import (expanded_objective, fs_loss_batch, interleave, link_probabilities,
                              normalize_features)
from oracles import central_difference, naive_fs_loss, random_fs_batch, relative_error


def whole_batch(labels, weights=None):
    g = build_atg(labels, weights)
    return subgraph_for_batch(g, range(len(labels)))


def loss_of(raw, labels, weights=None, temperature=1.0):
    sub = whole_batch(labels, weights)
    feats = normalize_features(torch.as_tensor(raw, dtype=torch.float64))
    return fs_loss_batch(feats, sub, weights, temperature)


# ---------------------------------------------------------------- normalization

def test_normalize_scales_to_unit():
    fb = normalize_features(torch.tensor([[3.0, 4.0]], dtype=torch.float64))
    assert torch.allclose(fb.unit, torch.tensor([[0.6, 0.8]], dtype=torch.float64))


def test_normalize_idempotent():
    u = torch.tensor([[0.6, 0.8], [1.0, 0.0]], dtype=torch.float64)
    assert torch.equal(normalize_features(u).unit, u)


def test_normalize_zero_row_is_finite():
    fb = normalize_features(torch.zeros(2, 3))
    assert torch.isfinite(fb.unit).all()
    assert torch.equal(fb.unit, torch.zeros(2, 3))


def test_normalize_rejects_nonfinite():
    with pytest.raises(ValueError):
        normalize_features(torch.tensor([[1.0, float("nan")]]))
    with pytest.raises(ValueError):
        normalize_features(torch.zeros(0, 3))


def test_unit_rows_have_norm_one():
    raw = torch.randn(20, 5, dtype=torch.float64, generator=torch.Generator().manual_seed(0)) * 7
    norms = normalize_features(raw).unit.norm(dim=1)
    assert torch.all((norms - 1).abs() < 1e-6)


# ---------------------------------------------------------------- worked example

E1, E2 = [1.0, 0.0], [0.0, 1.0]
ORTHO_RAW = [E1, E1, E2, E2]  # clean1, adv1, clean2, adv2
ORTHO_LABELS = [0, 1]


def test_orthonormal_link_probability():
    sub = whole_batch(ORTHO_LABELS)
    feats = normalize_features(torch.tensor(ORTHO_RAW, dtype=torch.float64))
    probs = link_probabilities(feats, sub, 0)
    assert probs[1] == pytest.approx(math.e / (math.e + 2), abs=1e-12)
    assert probs[1] == pytest.approx(0.57611, abs=1e-5)
    assert probs[2] == pytest.approx(1 / (math.e + 2), abs=1e-12)
    assert sum(probs.values()) == pytest.approx(1.0, abs=1e-12)


def test_orthonormal_loss_value():
    out = loss_of(ORTHO_RAW, ORTHO_LABELS)
    expected = math.log(math.e / (math.e + 2))
    assert expected == pytest.approx(-0.55144, abs=1e-5)
    assert out.per_node.tolist() == pytest.approx([expected] * 4, abs=1e-12)
    assert float(out.total) == pytest.approx(expected, abs=1e-12)
    oracle_total, _, _ = naive_fs_loss(ORTHO_RAW, ORTHO_LABELS)
    assert float(out.total) == pytest.approx(oracle_total, abs=1e-12)


def test_single_pair_identical_features():
    raw = [[0.3, -1.2], [0.3, -1.2]]
    sub = whole_batch([5])
    feats = normalize_features(torch.tensor(raw, dtype=torch.float64))
    assert link_probabilities(feats, sub, 0) == {1: pytest.approx(1.0)}
    assert float(loss_of(raw, [5]).total) == 0.0


def test_identical_features_uniform_probabilities():
    b = 5
    raw = np.ones((2 * b, 3))
    sub = whole_batch([0, 1, 0, 2, 1])
    feats = normalize_features(torch.as_tensor(raw))
    for node in range(2 * b):
        probs = link_probabilities(feats, sub, node)
        assert all(p == pytest.approx(1 / (2 * b - 1), abs=1e-12) for p in probs.values())


def test_zero_weights_give_zero_loss():
    rng = np.random.default_rng(3)
    raw, labels = random_fs_batch(rng)
    w = LinkWeights(0.0, 0.0, 1.0)
    assert float(loss_of(raw, labels, w).total) == 0.0


def test_misaligned_features_rejected():
    sub = whole_batch([0, 1])
    with pytest.raises(ValueError):
        fs_loss_batch(normalize_features(torch.randn(3, 2)), sub)


def test_interleave_order():
    c = torch.tensor([[1.0], [2.0]])
    a = torch.tensor([[10.0], [20.0]])
    assert interleave(c, a).flatten().tolist() == [1.0, 10.0, 2.0, 20.0]


# ---------------------------------------------------------------- properties

@pytest.mark.parametrize("seed", range(25))
def test_matches_naive_oracle(seed):
    rng = np.random.default_rng(seed)
    raw, labels = random_fs_batch(rng)
    w = LinkWeights(float(rng.uniform(0, 3)), float(rng.uniform(0, 3)), 1.0)
    out = loss_of(raw, labels, w)
    total, per_node, probs = naive_fs_loss(raw, labels, w.eta1, w.eta2)
    assert abs(float(out.total) - total) < 1e-10
    assert np.max(np.abs(out.per_node.numpy() - per_node)) < 1e-10
    assert np.max(np.abs(out.probabilities.numpy() - np.array(probs))) < 1e-10


@pytest.mark.parametrize("seed", range(10))
def test_temperature_matches_oracle(seed):
    rng = np.random.default_rng(100 + seed)
    raw, labels = random_fs_batch(rng)
    tau = float(rng.uniform(0.1, 2.0))
    out = loss_of(raw, labels, temperature=tau)
    total, _, _ = naive_fs_loss(raw, labels, temperature=tau)
    assert abs(float(out.total) - total) < 1e-10


@pytest.mark.parametrize("seed", range(10))
def test_probabilities_sum_to_one(seed):
    rng = np.random.default_rng(seed)
    raw, labels = random_fs_batch(rng)
    out = loss_of(raw, labels)
    assert np.all(np.abs(out.probabilities.sum(dim=1).numpy() - 1) < 1e-9)


@pytest.mark.parametrize("seed", range(5))
def test_loss_nonpositive(seed):
    rng = np.random.default_rng(seed)
    raw, labels = random_fs_batch(rng)
    assert float(loss_of(raw, labels).total) <= 0.0


@pytest.mark.parametrize("seed", range(5))
def test_gradient_matches_central_differences(seed):
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 3, size=4)  # 8 nodes
    raw = rng.standard_normal((8, 4))
    t = torch.tensor(raw, requires_grad=True)
    sub = whole_batch(labels)
    fs_loss_batch(normalize_features(t), sub).total.backward()
    numeric = central_difference(lambda r: float(loss_of(r, labels).total), raw, step=1e-5)
    assert relative_error(t.grad.numpy(), numeric) < 1e-4


@pytest.mark.parametrize("seed", range(5))
def test_sample_permutation_equivariance(seed):
    rng = np.random.default_rng(seed)
    raw, labels = random_fs_batch(rng)
    b = len(labels)
    perm = rng.permutation(b)
    g = build_atg(labels)
    base = fs_loss_batch(normalize_features(torch.as_tensor(raw)), subgraph_for_batch(g, range(b)))
    node_perm = np.stack([2 * perm, 2 * perm + 1], 1).reshape(-1)
    moved = fs_loss_batch(normalize_features(torch.as_tensor(raw[node_perm])), subgraph_for_batch(g, perm))
    assert np.allclose(moved.per_node.numpy(), base.per_node.numpy()[node_perm], atol=1e-12)
    assert abs(float(moved.total) - float(base.total)) < 1e-12


@pytest.mark.parametrize("seed", range(5))
def test_rotation_invariance(seed):
    rng = np.random.default_rng(seed)
    raw, labels = random_fs_batch(rng)
    q, _ = np.linalg.qr(rng.standard_normal((raw.shape[1], raw.shape[1])))
    a = float(loss_of(raw, labels).total)
    b = float(loss_of(raw @ q, labels).total)
    assert abs(a - b) < 1e-8


def test_expanded_form_is_two_p_pos_minus_one():
    rng = np.random.default_rng(7)
    raw, labels = random_fs_batch(rng, max_samples=6)
    sub = whole_batch(labels)
    feats = normalize_features(torch.as_tensor(raw))
    out = fs_loss_batch(feats, sub)
    masks = sub.masks()
    pos = torch.as_tensor(masks["ca"] | masks["intra"])
    p_pos = (out.probabilities * pos).sum(dim=1)
    assert torch.allclose(expanded_objective(feats, sub), 2 * p_pos - 1, atol=1e-12)


def test_single_class_and_singleton_classes_are_valid():
    rng = np.random.default_rng(0)
    for labels in ([0, 0, 0], [0, 1, 2, 3]):
        out = loss_of(rng.standard_normal((2 * len(labels), 3)), labels)
        assert torch.isfinite(out.per_node).all()


def test_float32_path_is_differentiable():
    clean = torch.randn(6, 5, requires_grad=True)
    adv = torch.randn(6, 5, requires_grad=True)
    sub = whole_batch([0, 1, 0, 2, 1, 1])
    feats = normalize_features(interleave(clean, adv))
    fs_loss_batch(feats, sub).total.backward()
    assert clean.grad is not None and torch.isfinite(clean.grad).all()
