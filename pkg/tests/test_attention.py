import math

import numpy as np
import pytest

from regionfeat.attention import (
    AttentionParams,
    EmbeddingConfig,
    aggregate,
    appearance_logits,
    combine_weights,
    embed_box,
    embed_position,
    embed_scalar,
    extract,
    extract_rois,
    geometric_logits,
    load_checkpoint,
    save_checkpoint,
    softmax_rows,
    weight_field,
    worker_count,
)
from regionfeat.sampling import SupportSpec, build_plan, dense_plan
from regionfeat.types import Position, RoI, WeightField

from conftest import random_params, random_roi


def scalar_oracle(z, dim, base=1000.0):
    out = []
    for i in range(dim // 2):
        w = base ** (2 * i / dim)
        out += [math.sin(z / w), math.cos(z / w)]
    return out


# -- embeddings -----------------------------------------------------------------


def test_embed_zero():
    np.testing.assert_array_equal(embed_scalar(0.0, 6), [0, 1, 0, 1, 0, 1])


def test_embed_quarter_period():
    np.testing.assert_allclose(embed_scalar(math.pi / 2, 2), [1, 0], atol=1e-15)


def test_embed_scalar_oracle():
    np.testing.assert_allclose(embed_scalar(3.0, 4),
                               [math.sin(3), math.cos(3), math.sin(3 / 1000 ** 0.5), math.cos(3 / 1000 ** 0.5)],
                               rtol=0, atol=1e-15)
    for z in (-7.5, 0.25, 123.0):
        np.testing.assert_allclose(embed_scalar(z, 10), scalar_oracle(z, 10), atol=1e-15)


def test_embed_scalar_rejects_odd_dim():
    with pytest.raises(ValueError):
        embed_scalar(1.0, 3)


def test_embed_position():
    cfg = EmbeddingConfig(4, 2)
    np.testing.assert_array_equal(embed_position((0, 0), cfg), [0, 1, 0, 1] * 2)
    np.testing.assert_allclose(embed_position(Position(2, 3), cfg), scalar_oracle(2, 4) + scalar_oracle(3, 4), atol=1e-15)
    a, b = embed_position((2, 3), cfg), embed_position((2, 9), cfg)
    np.testing.assert_array_equal(a[:4], b[:4])


def test_embed_box():
    cfg = EmbeddingConfig(2, 1)
    np.testing.assert_array_equal(embed_box(RoI(0, 0, 0, 0), cfg), [0, 1] * 4)
    blocks = embed_box(RoI(2.5, 2.5, 2.5, 2.5), EmbeddingConfig(6, 1)).reshape(4, 6)
    assert np.all(blocks == blocks[0])
    ref = sum((scalar_oracle(z, 2) for z in (1, 2, 3, 4)), [])
    np.testing.assert_allclose(embed_box(RoI(1, 2, 3, 4), cfg), ref, atol=1e-15)


# -- logits -------------------------------------------------------------------------


def test_zero_params_give_zero_logits(small_cfg):
    params = AttentionParams.zeros(3, 4, 3, 2)
    b = RoI(1, 1, 3, 4)
    plan = build_plan(b, 5, 5)
    assert np.all(geometric_logits(b, plan, params, small_cfg) == 0)
    assert np.all(appearance_logits(np.ones((5, 5, 2)), plan, params) == 0)


def test_geometric_logits_materialized_oracle(rng):
    cfg = EmbeddingConfig(2, 1)
    params = random_params(rng, k=1, ce=2, cg=1, cf=1)
    b = RoI(0.5, 1.0, 2.5, 3.0)
    plan = dense_plan(b, 4, 4)
    w_box = params.w_box_hat[0] @ params.v_box  # (1, 8), materialized
    e_box = sum((scalar_oracle(z, 2) for z in b.as_tuple()), [])
    query = sum(w_box[0, i] * e_box[i] for i in range(8))
    got = geometric_logits(b, plan, params, cfg)
    for j, (u, v) in enumerate(plan.positions):
        e = scalar_oracle(u + 0.5, 2) + scalar_oracle(v + 0.5, 2)
        key = sum(params.w_im[0, i] * e[i] for i in range(4))
        assert got[0, j] == pytest.approx(query * key, abs=1e-12)


def test_box_decomposition_associative(rng, small_cfg):
    params = random_params(rng)
    b = RoI(1.2, 0.7, 4.4, 5.1)
    plan = build_plan(b, 6, 6)
    w_box = np.einsum("kgc,cd->kgd", params.w_box_hat, params.v_box)
    keys = embed_position(plan.positions + 0.5, small_cfg) @ params.w_im.T
    direct = (w_box @ embed_box(b, small_cfg)) @ keys.T
    np.testing.assert_allclose(geometric_logits(b, plan, params, small_cfg), direct, atol=1e-10)


def test_appearance_logits(rng):
    x = rng.standard_normal((5, 4, 3))
    plan = dense_plan(RoI(0, 0, 4, 5), 5, 4)
    params = random_params(rng, cf=3)
    got = appearance_logits(x, plan, params)
    for k in range(4):
        for j, (u, v) in enumerate(plan.positions):
            ref = sum(params.w_app[k, c] * x[v, u, c] for c in range(3))
            assert got[k, j] == pytest.approx(ref, abs=1e-12)
    ident = AttentionParams.zeros(2, 4, 3, 1).updated(w_app=np.ones((2, 1)))
    x1 = rng.standard_normal((5, 4, 1))
    np.testing.assert_array_equal(appearance_logits(x1, plan, ident)[1], x1[plan.positions[:, 1], plan.positions[:, 0], 0])


# -- softmax and aggregation -------------------------------------------------------


def test_combine_hand_softmax():
    wf = combine_weights(np.array([[0.0, math.log(3)]]), np.zeros((1, 2)), np.array([[0, 0], [1, 0]]))
    np.testing.assert_allclose(wf.weights, [[0.25, 0.75]], atol=1e-15)


def test_combine_constant_logits_uniform():
    wf = combine_weights(np.full((2, 5), 3.0), np.full((2, 5), -1.0), np.zeros((5, 2), dtype=int))
    np.testing.assert_allclose(wf.weights, 0.2)


def test_softmax_shift_invariance(rng):
    logits = rng.normal(0, 5, (3, 7))
    shifted = logits + np.array([[1e3], [-50.0], [0.1]])
    np.testing.assert_allclose(softmax_rows(shifted), softmax_rows(logits), atol=1e-12)


def test_softmax_extreme_logits():
    w = softmax_rows(np.array([[1e4, -1e4, 0.0], [-1e4, -1e4, -1e4]]))
    assert np.all(np.isfinite(w))
    np.testing.assert_allclose(w, [[1, 0, 0], [1 / 3, 1 / 3, 1 / 3]])


def test_aggregate_one_hot_and_uniform(rng):
    x = rng.standard_normal((3, 3, 2))
    pos = np.array([[0, 0], [2, 1], [1, 2]])
    wf = WeightField(pos, np.array([[0, 1, 0], [1 / 3, 1 / 3, 1 / 3]]))
    y = aggregate(x, wf)
    np.testing.assert_array_equal(y[0], x[1, 2])
    np.testing.assert_allclose(y[1], (x[0, 0] + x[1, 2] + x[2, 1]) / 3)


def test_aggregate_double_loop(rng):
    x = rng.standard_normal((4, 5, 3))
    pos = np.array([[u, v] for v in range(4) for u in range(5)])
    w = rng.random((2, 20))
    w /= w.sum(axis=1, keepdims=True)
    y = aggregate(x, WeightField(pos, w))
    for k in range(2):
        for c in range(3):
            ref = sum(w[k, j] * x[pos[j, 1], pos[j, 0], c] for j in range(20))
            assert y[k, c] == pytest.approx(ref, abs=1e-10)


# -- end to end ----------------------------------------------------------------------


def test_extract_composed_oracle(rng):
    cfg = EmbeddingConfig(4, 3)
    x = rng.standard_normal((6, 6, 2))
    params = random_params(rng, k=4, ce=4, cg=3, cf=2, scale=0.5)
    b = RoI(1.3, 0.6, 4.8, 5.2)
    plan = build_plan(b, 6, 6)
    e_box = sum((scalar_oracle(z, 4) for z in b.as_tuple()), [])
    out = np.zeros((4, 2))
    for k in range(4):
        w_box = params.w_box_hat[k] @ params.v_box
        q = [sum(w_box[g, i] * e_box[i] for i in range(16)) for g in range(3)]
        logits = []
        for u, v in plan.positions:
            e = scalar_oracle(u + 0.5, 4) + scalar_oracle(v + 0.5, 4)
            key = [sum(params.w_im[g, i] * e[i] for i in range(8)) for g in range(3)]
            geo = sum(q[g] * key[g] for g in range(3))
            app = sum(params.w_app[k, c] * x[v, u, c] for c in range(2))
            logits.append(geo + app)
        m = max(logits)
        ex = [math.exp(z - m) for z in logits]
        total = sum(ex)
        for j, (u, v) in enumerate(plan.positions):
            out[k] += ex[j] / total * x[v, u]
    np.testing.assert_allclose(extract(x, b, params, cfg), out, atol=1e-9)


def test_constant_map_any_params(rng, small_cfg):
    x = np.full((7, 6, 3), 0.75)
    params = random_params(rng, scale=2.0)
    np.testing.assert_allclose(extract(x, random_roi(rng, 7, 6), params, small_cfg), 0.75)


def test_zero_params_give_sample_mean(rng, small_cfg):
    x = rng.standard_normal((9, 9, 3))
    b = RoI(1, 2, 7, 6)
    spec = SupportSpec("whole_image", 9, 9)
    plan = build_plan(b, 9, 9, spec)
    mean = x[plan.positions[:, 1], plan.positions[:, 0]].mean(axis=0)
    y = extract(x, b, AttentionParams.zeros(4, 4, 3, 3), small_cfg, spec)
    np.testing.assert_allclose(y, np.tile(mean, (4, 1)), atol=1e-12)


def test_weight_field_is_normalized(rng, small_cfg):
    x = rng.standard_normal((8, 8, 3))
    wf = weight_field(x, RoI(1, 1, 5, 6), random_params(rng, scale=3.0), small_cfg)
    np.testing.assert_allclose(wf.weights.sum(axis=1), 1.0, atol=1e-12)
    assert np.all((wf.weights >= 0) & (wf.weights <= 1))


def test_sparse_with_full_budget_matches_dense(rng, small_cfg):
    x = rng.standard_normal((10, 12, 3))
    params = random_params(rng)
    rois = [random_roi(rng, 10, 12) for _ in range(5)]
    spec = SupportSpec("whole_image", 144, 120)
    np.testing.assert_array_equal(extract_rois(x, rois, params, small_cfg, spec),
                                  extract_rois(x, rois, params, small_cfg, spec, dense=True))


def test_threaded_extraction_keeps_order(rng, small_cfg):
    x = rng.standard_normal((10, 10, 3))
    params = random_params(rng)
    rois = [random_roi(rng, 10, 10) for _ in range(12)]
    serial = extract_rois(x, rois, params, small_cfg)
    threaded = extract_rois(x, rois, params, small_cfg, workers=4)
    np.testing.assert_array_equal(serial, threaded)
    for i, b in enumerate(rois):
        np.testing.assert_array_equal(serial[i], extract(x, b, params, small_cfg))


def test_worker_count_env(monkeypatch):
    monkeypatch.setenv("REGIONFEAT_THREADS", "3")
    assert worker_count() == 3
    monkeypatch.setenv("REGIONFEAT_THREADS", "0")
    assert worker_count() >= 1
    monkeypatch.setenv("REGIONFEAT_THREADS", "x")
    with pytest.raises(ValueError):
        worker_count()


def test_dimension_mismatch(rng, small_cfg):
    params = random_params(rng, cf=3)
    with pytest.raises(ValueError):
        extract(np.zeros((4, 4, 2)), RoI(0, 0, 2, 2), params, small_cfg)
    with pytest.raises(ValueError):
        extract(np.zeros((4, 4, 3)), RoI(0, 0, 2, 2), params, EmbeddingConfig(6, 3))


def test_checkpoint_roundtrip(tmp_path, rng):
    params = random_params(rng, k=2, ce=4, cg=3, cf=5)
    save_checkpoint(tmp_path / "ck", params)
    loaded, cfg = load_checkpoint(tmp_path / "ck")
    assert (cfg.dim, cfg.transform_dim) == (4, 3)
    for name, arr in params.tensors().items():
        np.testing.assert_array_equal(loaded.tensors()[name], arr.astype(np.float32))
    assert sorted(p.name for p in (tmp_path / "ck").iterdir()) == [
        "manifest.json", "v_box.rft", "w_app.rft", "w_box_hat.rft", "w_im.rft"]
