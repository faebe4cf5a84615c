import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from photonfield.estimator import EncodingConfig
from photonfield.neural_field import (AdamState, FieldQuery, HashGridConfig, MlpConfig, PhotonField, QueryBatch,
                                      direction_to_sph, encode_input, infer_radiance, learning_rate,
                                      load_checkpoint, n_params, rmse_loss, save_checkpoint, sph_to_direction,
                                      train_step)
from photonfield.photons import InvalidConfigError
from photonfield.volume import InvalidInputError

SMALL_POS = HashGridConfig(levels=4, features_per_level=2, base_resolution=4, table_size_log2=10)
SMALL_DIR = HashGridConfig(levels=3, features_per_level=2, base_resolution=4, table_size_log2=8, dimensionality=2)
SMALL_MLP = MlpConfig(hidden_layers=3, width=16)


def small_field(seed=0, **kw):
    return PhotonField.create(SMALL_POS, SMALL_DIR, SMALL_MLP, seed=seed, **kw)


def random_batch(n, seed):
    rng = np.random.default_rng(seed)
    return QueryBatch(rng.random((n, 3)), rng.random((n, 2)), rng.choice([0.125, 0.5, 0.875], n))


def test_default_parameter_count_by_hand():
    # pos: 5^3 + 9^3 + 17^3 dense levels then five 2^15 tables, 4 features each
    pos = (125 + 729 + 4913 + 5 * 32768) * 4
    # dir: 5^2 .. 129^2 dense levels then two 2^15 tables
    dir_ = (25 + 81 + 289 + 1089 + 4225 + 16641 + 2 * 32768) * 4
    mlp = (65 * 64 + 64) + 4 * (64 * 64 + 64) + (64 * 3 + 3)
    assert n_params(HashGridConfig(), HashGridConfig(dimensionality=2), MlpConfig()) == pos + dir_ + mlp
    assert PhotonField.create().n_params == pos + dir_ + mlp


def test_config_validation():
    with pytest.raises(InvalidConfigError):
        HashGridConfig(growth_factor=1.0)
    with pytest.raises(InvalidConfigError):
        HashGridConfig(levels=0)
    with pytest.raises(InvalidConfigError):
        MlpConfig(output_dim=4)
    with pytest.raises(InvalidInputError):
        FieldQuery((0.5, 0.5, 1.2), (0.5, 0.5), 0.5)


@settings(max_examples=100, deadline=None)
@given(st.floats(-1, 1), st.floats(-1, 1), st.floats(-1, 1))
def test_spherical_roundtrip(x, y, z):
    w = np.array([x, y, z])
    if np.linalg.norm(w) < 1e-3:
        return
    w /= np.linalg.norm(w)
    s = direction_to_sph(w)
    assert np.all((s >= 0) & (s <= 1))
    assert np.allclose(sph_to_direction(s), w, atol=1e-9)


def test_identical_queries_identical_features():
    f = small_field()
    q = FieldQuery((0.3, 0.4, 0.5), (0.2, 0.9), 0.5)
    assert np.array_equal(encode_input(q, f), encode_input(q, f))


def test_vertex_query_returns_table_entry():
    f = small_field(seed=3)
    q = FieldQuery((0.25, 0.5, 0.75), (0.25, 0.5), 0.5)
    feats = encode_input(q, f)
    F = SMALL_POS.features_per_level
    row = 1 + 2 * 5 + 3 * 25  # dense level 0 has 5 vertices per axis, x fastest
    assert np.array_equal(feats[:F], f.pos_grid.table[row])


def test_features_are_lipschitz_in_position():
    f = small_field(seed=4)
    f.params[:] = np.random.default_rng(0).uniform(-1, 1, f.n_params)
    rng = np.random.default_rng(1)
    eps = 1e-5
    x = rng.uniform(0.01, 0.99, (200, 3))
    sph = rng.random((200, 2))
    g = np.full(200, 0.5)
    a, _ = f.encode(QueryBatch(x, sph, g))
    b, _ = f.encode(QueryBatch(x + eps, sph, g))
    max_res = max(SMALL_POS.resolutions())
    # each feature is a multilinear blend of entries in [-1, 1]
    assert np.max(np.abs(a - b)) <= 2 * 3 * max_res * eps


def test_g_only_changes_last_feature():
    f = small_field()
    x = np.array([[0.1, 0.2, 0.3]] * 2)
    s = np.array([[0.4, 0.5]] * 2)
    feats, _ = f.encode(QueryBatch(x, s, np.array([0.125, 0.875])))
    assert np.array_equal(feats[0, :-1], feats[1, :-1])
    assert feats[0, -1] != feats[1, -1]


def test_zero_output_layer():
    f = small_field(zero_output=True)
    assert np.array_equal(f.forward(random_batch(50, 2)), np.zeros((50, 3)))


def test_batch_equals_single_and_duplicates():
    f = small_field(seed=5)
    b = random_batch(64, 3)
    out = f.forward(b)
    for i in range(0, 64, 7):
        one = f.forward(QueryBatch(b.x[i:i + 1], b.omega_sph[i:i + 1], b.g[i:i + 1]))
        assert np.array_equal(one[0], out[i])
    dup = QueryBatch(np.repeat(b.x[:1], 5, 0), np.repeat(b.omega_sph[:1], 5, 0), np.repeat(b.g[:1], 5))
    rows = f.forward(dup)
    assert np.all(rows == rows[0])


def test_forward_rejects_empty_batch():
    with pytest.raises(InvalidInputError):
        small_field().forward(QueryBatch(np.zeros((0, 3)), np.zeros((0, 2)), np.zeros(0)))


def test_golden_forward_value():
    f = PhotonField.create(seed=0)
    b = QueryBatch(np.array([[0.3, 0.6, 0.2]]), np.array([[0.4, 0.7]]), np.array([0.625]))
    golden = [-0.2786102565132512, -0.13730212633195588, 0.15357865287725309]
    assert np.allclose(f.forward(b)[0], golden, rtol=0, atol=1e-12)


def randomized_field(seed):
    """Field with spread-out pre-activations so finite differences rarely cross a ReLU kink."""
    f = small_field(seed=seed)
    rng = np.random.default_rng(seed + 100)
    f.pos_grid.table[:] = rng.uniform(-1, 1, f.pos_grid.table.shape)
    f.dir_grid.table[:] = rng.uniform(-1, 1, f.dir_grid.table.shape)
    for W, b in f.layers:
        W[:] = rng.normal(0, math.sqrt(2 / W.shape[0]), W.shape)
        b[:] = rng.uniform(-0.1, 0.1, b.shape)
    return f


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_gradient_matches_finite_differences(seed):
    f = randomized_field(seed)
    batch = random_batch(32, seed + 10)
    targets = np.random.default_rng(seed + 20).random((32, 3))
    base_pred = f.forward(batch)
    pattern = f.activation_pattern(batch)
    _, grad, _ = f.loss_and_grad(batch, targets)
    rng = np.random.default_rng(seed + 30)
    h = 1e-4
    worst = 0.0
    checked = 0
    for name, ids in f.param_groups().items():
        cand = ids[np.abs(grad[ids]) > 0]
        rng.shuffle(cand)
        taken = 0
        for i in cand:
            if taken == 16:
                break
            old = f.params[i]
            f.params[i] = old + h
            plus_ok = np.array_equal(f.activation_pattern(batch), pattern)
            lp = rmse_loss(f.forward(batch), targets, denom_pred=base_pred)
            f.params[i] = old - h
            minus_ok = np.array_equal(f.activation_pattern(batch), pattern)
            lm = rmse_loss(f.forward(batch), targets, denom_pred=base_pred)
            f.params[i] = old
            if not (plus_ok and minus_ok):
                continue  # perturbation crossed a ReLU kink; redraw
            fd = (lp - lm) / (2 * h)
            worst = max(worst, abs(grad[i] - fd) / max(abs(grad[i]), abs(fd), 1e-8))
            taken += 1
        assert taken == 16, name
        checked += taken
    assert checked == 64
    assert worst < 1e-3


def test_gradient_only_touches_referenced_rows():
    f = small_field(seed=1)
    batch = random_batch(4, 0)
    _, grad, (tp, td) = f.loss_and_grad(batch, np.zeros((4, 3)))
    g_pos = f._table_view(grad, 0)
    assert np.all(g_pos[~tp] == 0)
    assert tp.sum() <= 4 * SMALL_POS.levels * 8


def test_shape_mismatch_raises():
    f = small_field()
    with pytest.raises(InvalidInputError):
        train_step(f, random_batch(4, 0), np.zeros((3, 3)), AdamState.for_field(f))


def test_zero_gradient_leaves_parameters():
    f = small_field(seed=2)
    batch = random_batch(64, 4)
    targets = f.forward(batch)
    before = f.params.copy()
    adam = AdamState.for_field(f)
    loss = train_step(f, batch, targets, adam)
    assert loss == 0.0
    assert np.max(np.abs(f.params - before)) < 1e-6


@pytest.mark.parametrize("step,expected", [
    (0, 9e-4), (2099, 9e-4), (2100, 9e-4), (2124, 9e-4), (2125, 9e-4 * 0.92), (3000, 9e-4 * 0.92 ** 36),
])
def test_learning_rate_table(step, expected):
    assert learning_rate(step, 3000) == pytest.approx(expected, rel=1e-12)


def test_learning_rate_is_non_increasing():
    lrs = [learning_rate(s, 3000) for s in range(3001)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))


def test_overfit_fixed_batch():
    f = PhotonField.create(seed=3)
    batch = random_batch(1024, 5)
    rng = np.random.default_rng(6)
    targets = np.clip(0.5 + 0.3 * np.sin(6 * batch.x @ rng.normal(size=(3, 3))), 0, 1)
    adam = AdamState.for_field(f, total_steps=2000)
    losses = []
    while len(losses) < 2000 and (not losses or losses[-1] >= 1e-3):
        losses.append(train_step(f, batch, targets, adam))
    assert losses[-1] < 1e-3
    assert losses[-1] < losses[0] / 10


def test_parameters_stay_finite():
    f = PhotonField.create(HashGridConfig(levels=2, features_per_level=2, table_size_log2=6),
                           HashGridConfig(levels=2, features_per_level=2, table_size_log2=6, dimensionality=2),
                           MlpConfig(hidden_layers=2, width=8), seed=1)
    adam = AdamState.for_field(f, total_steps=10_000, lr=1e-2)
    rng = np.random.default_rng(0)
    for step in range(10_000):
        batch = random_batch(16, step)
        targets = rng.random((16, 3)) * rng.choice([0, 1, 1e3], (16, 1))
        train_step(f, batch, targets, adam)
    assert np.all(np.isfinite(f.params))
    assert np.all(np.isfinite(adam.m)) and np.all(np.isfinite(adam.v))


def test_infer_radiance_decodes():
    f = small_field(zero_output=True)
    assert np.array_equal(infer_radiance(f, np.array([0.5, 0.5, 0.5]), np.array([0, 0, 1.0]), 0.0),
                          np.ones(3))
    f.layers[-1][1][:] = 1.0
    f4 = PhotonField(f.pos_cfg, f.dir_cfg, f.mlp_cfg, f.params, psi=4)
    out = infer_radiance(f4, np.array([0.5, 0.5, 0.5]), np.array([0, 0, 1.0]), 0.0, EncodingConfig(4))
    assert np.allclose(out, 1e-4, rtol=1e-14)
    with pytest.raises(InvalidConfigError):
        infer_radiance(f4, np.zeros(3), np.array([0, 0, 1.0]), 0.0, EncodingConfig(5))


def test_infer_batch_equals_single():
    f = small_field(seed=7)
    rng = np.random.default_rng(8)
    x = rng.random((20, 3))
    w = rng.normal(size=(20, 3))
    w /= np.linalg.norm(w, axis=1, keepdims=True)
    many = infer_radiance(f, x, w, 0.75)
    for i in range(20):
        assert np.array_equal(infer_radiance(f, x[i], w[i], 0.75), many[i])


def test_checkpoint_resume_is_bit_exact(tmp_path):
    f = small_field(seed=9, phase_set=(-0.75, 0.0, 0.75))
    adam = AdamState.for_field(f, total_steps=20)
    rng = np.random.default_rng(0)
    batches = [(random_batch(32, s), rng.random((32, 3))) for s in range(10)]
    for b, t in batches[:5]:
        train_step(f, b, t, adam)
    save_checkpoint(f, tmp_path / "c.ckpt", adam)
    g, adam2 = load_checkpoint(tmp_path / "c.ckpt")
    assert g.phase_set == f.phase_set and g.trained_steps == 5 and adam2.step == 5
    for b, t in batches[5:]:
        train_step(f, b, t, adam)
        train_step(g, b, t, adam2)
    assert np.array_equal(f.params, g.params)
    assert np.array_equal(adam.m, adam2.m) and np.array_equal(adam.v, adam2.v)


def test_checkpoint_rejects_garbage(tmp_path):
    p = tmp_path / "bad.ckpt"
    p.write_bytes(b"nope" + bytes(20))
    with pytest.raises(InvalidInputError):
        load_checkpoint(p)
