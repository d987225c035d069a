import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from oodmat.errors import ConfigError
from oodmat.evidential import der_loss
from oodmat.model import (Batch, DropoutMask, ModelConfig, backward, build_graph, forward, forward_batch,
                          init_weights, load_weights, rbf_expand, save_weights)
from oodmat.structure import CrystalStructure, Lattice, neighbor_list

from conftest import random_cell

SMALL = ModelConfig(embed_dim=8, n_layers=2, n_rbf=6, r_cut=3.0, dropout_rate=0.1, seed=3)


def perturbed(cfg, seed=0, scale=0.3):
    """Weights with non-zero biases so every gradient path is exercised."""
    w = init_weights(cfg)
    rng = np.random.default_rng(seed)
    for k in w:
        if k.endswith("_b") or k == "head.b":
            w[k] = scale * rng.standard_normal(w[k].shape)
    return w


def edge_level_forward(s, w, cfg, mask=None):
    """Literal per-edge message passing, used as an oracle for the batched form."""
    nl = neighbor_list(s, cfg.r_cut)
    h = w["embedding"][s.atomic_numbers].copy()
    for l in range(cfg.n_layers):
        new = h.copy()
        for i in range(len(s)):
            idx, _, dist = nl.for_atom(i)
            agg = np.zeros(cfg.embed_dim)
            if len(idx):
                rbf = rbf_expand(dist, cfg)
                msgs = [np.concatenate([h[i], h[j], rbf[k]]) @ w[f"layer{l}.msg_w"] + w[f"layer{l}.msg_b"]
                        for k, j in enumerate(idx)]
                agg = np.mean(msgs, axis=0)
            new[i] = h[i] + np.tanh(agg @ w[f"layer{l}.upd_w"] + w[f"layer{l}.upd_b"])
        h = new
    pooled = h.mean(axis=0)
    if mask is not None:
        pooled = pooled * mask.factor()
    raw = pooled @ w["head.w"] + w["head.b"]
    sp = lambda x: np.logaddexp(0, x)
    return raw[0], sp(raw[1]) + 1e-6, sp(raw[2]) + 1 + 1e-6, sp(raw[3]) + 1e-6


def test_forward_matches_edge_level_oracle():
    rng = np.random.default_rng(0)
    for trial in range(5):
        s = random_cell(rng, n_atoms=int(rng.integers(1, 5)))
        w = perturbed(SMALL, trial)
        mask = DropoutMask.sample(0.3, SMALL.embed_dim, 1, trial)
        out, _ = forward(s, w, SMALL, mask)
        ref = edge_level_forward(s, w, SMALL, mask)
        np.testing.assert_allclose([out.gamma, out.nu, out.alpha, out.beta], ref, rtol=1e-12, atol=1e-12)


def test_isolated_atom_gets_zero_aggregate():
    s = CrystalStructure(Lattice(np.eye(3) * 20), [[0, 0, 0]], [6])
    w = perturbed(SMALL)
    out, _ = forward(s, w, SMALL)
    ref = edge_level_forward(s, w, SMALL)
    np.testing.assert_allclose(float(out.gamma), ref[0], rtol=1e-12)


def test_output_constraints_and_invariances():
    rng = np.random.default_rng(1)
    w = init_weights(SMALL)
    for k in w:
        w[k] = w[k] * 20  # extreme weights still give valid NIG parameters
    for _ in range(5):
        s = random_cell(rng, n_atoms=4)
        out, _ = forward(s, w, SMALL)
        assert out.nu > 0 and out.alpha > 1 and out.beta > 0
    w = perturbed(SMALL)
    s = random_cell(rng, n_atoms=4)
    base = np.array(forward(s, w, SMALL)[0].stack())
    R = Rotation.random(random_state=2).as_matrix()
    rot = CrystalStructure(Lattice(s.lattice.rows @ R.T), s.fractional_coords, s.atomic_numbers)
    np.testing.assert_allclose(forward(rot, w, SMALL)[0].stack(), base, atol=1e-10)
    moved = CrystalStructure(s.lattice, s.fractional_coords + 0.37, s.atomic_numbers)
    np.testing.assert_allclose(forward(moved, w, SMALL)[0].stack(), base, atol=1e-10)
    perm = [2, 0, 3, 1]
    shuf = CrystalStructure(s.lattice, s.fractional_coords[perm], s.atomic_numbers[perm])
    np.testing.assert_allclose(forward(shuf, w, SMALL)[0].stack(), base, atol=1e-12)


def test_zero_rate_mask_is_identity():
    cfg = ModelConfig(embed_dim=8, n_layers=1, n_rbf=4, r_cut=3.0, dropout_rate=0.0)
    s = random_cell(np.random.default_rng(3))
    w = init_weights(cfg)
    mask = DropoutMask.sample(0.0, 8, 0, 0)
    assert np.array_equal(forward(s, w, cfg, mask)[0].stack(), forward(s, w, cfg)[0].stack())


def test_init_weights():
    a, b, c = init_weights(SMALL), init_weights(SMALL), init_weights(ModelConfig(**{**SMALL.__dict__, "seed": 4}))
    assert a.array_equal(b) and not a.array_equal(c)
    assert a["embedding"].shape == (119, 8)
    assert a["layer0.msg_w"].shape == (2 * 8 + 6, 8)
    assert a["layer1.upd_w"].shape == (8, 8)
    assert a["head.w"].shape == (8, 4)
    assert all(np.all(a[k] == 0) for k in a if k.endswith("_b") or k == "head.b")


def test_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig(dropout_rate=1.0)
    with pytest.raises(ConfigError):
        ModelConfig(embed_dim=0)


def test_dropout_mask_deterministic():
    a = DropoutMask.sample(0.5, 64, 7, 3)
    b = DropoutMask.sample(0.5, 64, 7, 3)
    c = DropoutMask.sample(0.5, 64, 7, 4)
    assert np.array_equal(a.keep, b.keep) and not np.array_equal(a.keep, c.keep)
    assert a.scale == 2.0
    assert DropoutMask.sample(0.1, 8, 0, (1, 2, 1), batch=5).keep.shape == (5, 8)


def two_atom():
    return CrystalStructure(Lattice(np.diag([3.2, 3.5, 3.9])), [[0.1, 0.2, 0.3], [0.55, 0.6, 0.45]], [1, 8])


def loss_of(s, w, cfg, mask, y, lam):
    return der_loss(forward(s, w, cfg, mask)[0], y, lam)


def gradient_check(seed, n_coords=50, h=1e-5):
    cfg = ModelConfig(embed_dim=8, n_layers=2, n_rbf=6, r_cut=3.0, dropout_rate=0.1, seed=seed)
    s = two_atom()
    w = perturbed(cfg, seed)
    mask = DropoutMask.sample(0.1, 8, seed, 0)
    y, lam = 0.7, 0.05
    loss, grads = backward(s, w, cfg, mask, y, lam)
    assert loss == pytest.approx(loss_of(s, w, cfg, mask, y, lam), rel=1e-14)
    keys = [k for k in w if k != "embedding"] + ["embedding"]
    coords = []
    for k in keys:
        for flat in range(w[k].size):
            idx = np.unravel_index(flat, w[k].shape)
            if k == "embedding" and idx[0] not in (1, 8):
                continue
            coords.append((k, idx))
    rng = np.random.default_rng(seed)
    pick = rng.choice(len(coords), size=n_coords, replace=False)
    worst = 0.0
    for p in pick:
        k, idx = coords[p]
        orig = w[k][idx]
        w[k][idx] = orig + h
        up = loss_of(s, w, cfg, mask, y, lam)
        w[k][idx] = orig - h
        dn = loss_of(s, w, cfg, mask, y, lam)
        w[k][idx] = orig
        num = (up - dn) / (2 * h)
        ana = grads[k][idx]
        worst = max(worst, abs(ana - num) / max(abs(ana), abs(num), 1e-6))
    return worst, grads


@pytest.mark.parametrize("seed", range(5))
def test_backward_finite_differences(seed):
    worst, grads = gradient_check(seed)
    assert worst < 1e-3
    unused = np.delete(np.arange(119), [1, 8])
    assert np.all(grads["embedding"][unused] == 0)


def test_lambda_changes_only_reg_path():
    cfg = SMALL
    s = two_atom()
    w = perturbed(cfg)
    _, g0 = backward(s, w, cfg, None, 0.7, 0.0)
    _, g1 = backward(s, w, cfg, None, 0.7, 0.5)
    _, g2 = backward(s, w, cfg, None, 0.7, 1.0)
    # gradients are affine in lambda
    for k in w:
        np.testing.assert_allclose(g2[k] - g1[k], g1[k] - g0[k], atol=1e-12)


def test_batched_loss_is_mean_of_singles():
    rng = np.random.default_rng(5)
    structures = [random_cell(rng) for _ in range(4)]
    y = rng.normal(size=4)
    w = perturbed(SMALL)
    from oodmat.model import loss_and_grad
    batch = Batch([build_graph(s, SMALL) for s in structures])
    loss, grads = loss_and_grad(batch, y, w, SMALL, None, 0.01)
    singles = [backward(s, w, SMALL, None, t, 0.01) for s, t in zip(structures, y)]
    assert loss == pytest.approx(np.mean([l for l, _ in singles]), rel=1e-12)
    for k in w:
        np.testing.assert_allclose(grads[k], np.mean([g[k] for _, g in singles], axis=0), atol=1e-12)
    params, _ = forward_batch(batch, w, SMALL)
    assert len(params) == 4


def test_checkpoint_round_trip(tmp_path):
    w = perturbed(SMALL)
    save_weights(w, SMALL, tmp_path / "w.npz")
    back, cfg = load_weights(tmp_path / "w.npz")
    assert cfg == SMALL and back.array_equal(w) and list(back) == list(w)


def test_empty_structure_rejected():
    with pytest.raises(ValueError):
        Batch([])
