import math

import numpy as np
import pytest

from mm3d.autodiff import Tape, Tensor, backward, gradcheck, sum_all
from mm3d.consistency import (ConsistencyConfig, CorrespondencePairs, csd_loss,
                              ema_update, make_teacher, match_correspondence)
from mm3d.encoder import (EncoderConfig, EncoderParams, HierFeatures, HierLayer,
                          encode, init_encoder_params)
from mm3d.errors import ConfigError, ContractError
from mm3d.scene import PointScene


def _random_params(seed, cfg=None):
    cfg = cfg or EncoderConfig(n_layers=2, channels=(4, 8), k_group=3, downsample=3)
    return cfg, init_encoder_params(cfg, np.random.default_rng(seed))


def _random_scene(rng, n):
    return PointScene(rng.standard_normal((n, 3)).astype(np.float32),
                      rng.random((n, 3)).astype(np.float32),
                      np.arange(n, dtype=np.int64))


# ---------------------------------------------------------------- EMA teacher

def test_make_teacher_exact_detached_copy():
    cfg, online = _random_params(0)
    teacher = make_teacher(online, beta=0.9)
    for t_layer, o_layer in zip(teacher.params.layers, online.layers):
        for key in o_layer:
            assert np.array_equal(t_layer[key].data, o_layer[key].data)
            assert not t_layer[key].requires_grad
            o_layer[key].data += 1.0
            assert not np.array_equal(t_layer[key].data, o_layer[key].data)


def test_ema_beta_zero_copies_online():
    cfg, online = _random_params(1)
    teacher = make_teacher(online, beta=0.0)
    for layer in online.layers:
        for key in layer:
            layer[key].data += 0.25
    ema_update(teacher, online)
    for t_layer, o_layer in zip(teacher.params.layers, online.layers):
        for key in o_layer:
            assert np.array_equal(t_layer[key].data, o_layer[key].data)


def test_ema_beta_one_keeps_teacher():
    cfg, online = _random_params(2)
    teacher = make_teacher(online, beta=1.0)
    before = [{k: v.data.copy() for k, v in layer.items()}
              for layer in teacher.params.layers]
    for layer in online.layers:
        for key in layer:
            layer[key].data[:] = 7.0
    ema_update(teacher, online)
    for t_layer, saved in zip(teacher.params.layers, before):
        for key in saved:
            assert np.array_equal(t_layer[key].data, saved[key])


def test_ema_geometric_decay():
    # frozen online: (teacher - online) shrinks by beta each step
    cfg, online = _random_params(3)
    teacher = make_teacher(online, beta=0.999)
    delta0 = {}
    for i, (t_layer, o_layer) in enumerate(zip(teacher.params.layers, online.layers)):
        for key in o_layer:
            t_layer[key].data += 0.5
            delta0[(i, key)] = t_layer[key].data - o_layer[key].data
    steps = 200
    for _ in range(steps):
        ema_update(teacher, online)
    shrink = 0.999 ** steps
    for i, (t_layer, o_layer) in enumerate(zip(teacher.params.layers, online.layers)):
        for key in o_layer:
            want = o_layer[key].data + shrink * delta0[(i, key)]
            err = np.abs(t_layer[key].data - want).max() / shrink / 0.5
            assert err < 1e-5, f"layer {i} {key}: relative drift {err}"


def test_ema_two_step_recursion():
    cfg, online = _random_params(4)
    beta = 0.75
    teacher = make_teacher(online, beta=beta)
    start = {}
    for i, layer in enumerate(teacher.params.layers):
        for key in layer:
            layer[key].data += 1.0
            start[(i, key)] = layer[key].data.copy()
    ema_update(teacher, online)
    ema_update(teacher, online)
    for i, (t_layer, o_layer) in enumerate(zip(teacher.params.layers, online.layers)):
        for key in o_layer:
            want = beta ** 2 * start[(i, key)] + (1 - beta ** 2) * o_layer[key].data
            assert np.allclose(t_layer[key].data, want, rtol=1e-6, atol=1e-7)


def test_ema_shape_mismatch_raises():
    cfg, online = _random_params(5)
    other_cfg = EncoderConfig(n_layers=2, channels=(5, 8), k_group=3, downsample=3)
    _, wrong = _random_params(5, other_cfg)
    teacher = make_teacher(wrong)
    with pytest.raises(ContractError):
        ema_update(teacher, online)


def test_teacher_beta_validated():
    cfg, online = _random_params(6)
    with pytest.raises(ConfigError):
        make_teacher(online, beta=1.5)


# ----------------------------------------------------------- correspondence

def _hier_from_ids(id_lists, width=4, seed=0):
    rng = np.random.default_rng(seed)
    layers = []
    for ids in id_lists:
        ids = np.asarray(ids, dtype=np.int64)
        layers.append(HierLayer(ids, rng.standard_normal((len(ids), 3)).astype(np.float32),
                                Tensor(rng.standard_normal((len(ids), width)))))
    return HierFeatures(layers)


def test_match_identity_pairs_everything():
    hier = _hier_from_ids([[0, 1, 2, 3], [1, 3]])
    pairs = match_correspondence(hier, hier)
    for (o_rows, t_rows), layer in zip(pairs.layers, hier.layers):
        assert np.array_equal(o_rows, np.arange(len(layer.ids)))
        assert np.array_equal(t_rows, np.arange(len(layer.ids)))


def test_match_drops_missing_ids():
    online = _hier_from_ids([[1, 3, 5]])
    target = _hier_from_ids([[1, 5, 9]])
    pairs = match_correspondence(online, target)
    o_rows, t_rows = pairs.layers[0]
    assert np.array_equal(o_rows, [0, 2])
    assert np.array_equal(t_rows, [0, 1])


def test_match_against_id_scan_oracle():
    rng = np.random.default_rng(7)
    for _ in range(20):
        universe = rng.permutation(200)
        a = np.sort(universe[:rng.integers(5, 80)]).astype(np.int64)
        b = np.sort(rng.permutation(200)[:rng.integers(5, 80)]).astype(np.int64)
        pairs = match_correspondence(_hier_from_ids([a]), _hier_from_ids([b]))
        o_rows, t_rows = pairs.layers[0]
        want = [(i, j) for i, ai in enumerate(a) for j, bj in enumerate(b) if ai == bj]
        assert [(int(o), int(t)) for o, t in zip(o_rows, t_rows)] == want


def test_match_layer0_pair_count_is_input_size():
    rng = np.random.default_rng(8)
    scene = _random_scene(rng, 40)
    cfg, params = _random_params(8)
    s = np.sort(rng.choice(40, size=24, replace=False)).astype(np.int64)
    s_hat = np.sort(rng.choice(40, size=32, replace=False)).astype(np.int64)
    s = np.intersect1d(s, s_hat)  # retained set nests inside the target set
    online = encode(scene, s, params, cfg, None)
    target = encode(scene, s_hat, params, cfg, None)
    pairs = match_correspondence(online, target)
    assert len(pairs.layers[0][0]) == len(s)


def test_match_depth_mismatch_raises():
    with pytest.raises(ContractError):
        match_correspondence(_hier_from_ids([[0, 1]]), _hier_from_ids([[0, 1], [0]]))


# ------------------------------------------------------------------ csd loss

def _single_layer_setup(f_online, f_target):
    """Two-layer hierarchies (dummy layer 0) holding the given feature rows."""
    m = f_online.shape[0]
    ids = np.arange(m, dtype=np.int64)
    dummy = HierLayer(np.arange(1, dtype=np.int64), np.zeros((1, 3), np.float32),
                      Tensor(np.zeros((1, 6))))
    online = HierFeatures([dummy, HierLayer(ids, np.zeros((m, 3), np.float32),
                                            Tensor(f_online))])
    target = HierFeatures([dummy, HierLayer(ids, np.zeros((m, 3), np.float32),
                                            Tensor(f_target))])
    rows = np.arange(m, dtype=np.int64)
    pairs = CorrespondencePairs([(np.empty(0, np.int64), np.empty(0, np.int64)),
                                 (rows, rows)])
    return pairs, online, target


def test_csd_orthonormal_two_pairs_value():
    eye = np.eye(2, dtype=np.float32)
    pairs, online, target = _single_layer_setup(eye, eye)
    loss, skipped = csd_loss(pairs, online, target, ConsistencyConfig())
    assert skipped == []
    want = 2 * math.log(1 + math.exp(-1))
    assert abs(float(loss.data) - want) < 1e-4
    assert abs(want - 0.62652) < 1e-4


def test_csd_dominant_positive_vanishes():
    pairs, online, target = _single_layer_setup(50 * np.eye(2, dtype=np.float32),
                                                np.eye(2, dtype=np.float32))
    loss, _ = csd_loss(pairs, online, target, ConsistencyConfig())
    assert 0.0 <= float(loss.data) < 1e-20


def test_csd_uniform_logits_give_m_log_m():
    m = 5
    f = np.ones((m, 3), dtype=np.float32)
    pairs, online, target = _single_layer_setup(f, f.copy())
    loss, _ = csd_loss(pairs, online, target, ConsistencyConfig())
    assert abs(float(loss.data) - m * math.log(m)) < 1e-5 * m * math.log(m)


def test_csd_temperature_scales_logits():
    eye = np.eye(2, dtype=np.float32)
    pairs, online, target = _single_layer_setup(eye, eye)
    loss, _ = csd_loss(pairs, online, target, ConsistencyConfig(tau=2.0))
    want = 2 * math.log(1 + math.exp(-0.5))
    assert abs(float(loss.data) - want) < 1e-5 * want


def test_csd_pair_order_invariance():
    rng = np.random.default_rng(11)
    f_o = rng.standard_normal((7, 5)).astype(np.float32)
    f_t = rng.standard_normal((7, 5)).astype(np.float32)
    pairs, online, target = _single_layer_setup(f_o, f_t)
    base, _ = csd_loss(pairs, online, target, ConsistencyConfig())
    perm = rng.permutation(7)
    shuffled = CorrespondencePairs([pairs.layers[0],
                                    (pairs.layers[1][0][perm], pairs.layers[1][1][perm])])
    other, _ = csd_loss(shuffled, online, target, ConsistencyConfig())
    assert abs(float(base.data) - float(other.data)) <= 1e-6 * abs(float(base.data))


def test_csd_nonnegative():
    rng = np.random.default_rng(12)
    for seed in range(5):
        f_o = rng.standard_normal((6, 4)).astype(np.float32)
        f_t = rng.standard_normal((6, 4)).astype(np.float32)
        pairs, online, target = _single_layer_setup(f_o, f_t)
        loss, _ = csd_loss(pairs, online, target, ConsistencyConfig())
        assert float(loss.data) >= 0.0


def test_csd_normalize_flag_ignores_row_scale():
    rng = np.random.default_rng(13)
    f_o = rng.standard_normal((4, 6)).astype(np.float32)
    f_t = rng.standard_normal((4, 6)).astype(np.float32)
    cfg = ConsistencyConfig(normalize=True)
    base, _ = csd_loss(*_single_layer_setup(f_o, f_t), cfg)
    scaled, _ = csd_loss(*_single_layer_setup(10 * f_o, 7 * f_t), cfg)
    assert abs(float(base.data) - float(scaled.data)) < 1e-5 * abs(float(base.data))


def test_csd_skips_layers_with_single_pair():
    eye = np.eye(2, dtype=np.float32)
    pairs, online, target = _single_layer_setup(eye, eye)
    lone = (np.zeros(1, np.int64), np.zeros(1, np.int64))
    extra = HierLayer(np.arange(1, dtype=np.int64), np.zeros((1, 3), np.float32),
                      Tensor(np.ones((1, 2), np.float32)))
    pairs = CorrespondencePairs(pairs.layers + [lone])
    online = HierFeatures(online.layers + [extra])
    target = HierFeatures(target.layers + [extra])
    loss, skipped = csd_loss(pairs, online, target, ConsistencyConfig())
    assert skipped == [2]
    assert abs(float(loss.data) - 2 * math.log(1 + math.exp(-1))) < 1e-4


def test_csd_all_layers_skipped_is_zero():
    lone_o = _hier_from_ids([[0], [0]])
    lone_t = _hier_from_ids([[0], [0]])
    pairs = match_correspondence(lone_o, lone_t)
    loss, skipped = csd_loss(pairs, lone_o, lone_t, ConsistencyConfig())
    assert skipped == [1]
    assert float(loss.data) == 0.0


def test_csd_sums_over_layers():
    eye = np.eye(2, dtype=np.float32)
    pairs, online, target = _single_layer_setup(eye, eye)
    rows = np.arange(2, dtype=np.int64)
    layer = HierLayer(rows.copy(), np.zeros((2, 3), np.float32), Tensor(eye.copy()))
    pairs = CorrespondencePairs(pairs.layers + [(rows, rows)])
    online = HierFeatures(online.layers + [layer])
    target = HierFeatures(target.layers + [layer])
    loss, skipped = csd_loss(pairs, online, target, ConsistencyConfig())
    assert skipped == []
    assert abs(float(loss.data) - 4 * math.log(1 + math.exp(-1))) < 2e-4


def test_csd_teacher_gets_no_gradient():
    rng = np.random.default_rng(14)
    scene = _random_scene(rng, 30)
    cfg, params = _random_params(14)
    teacher = make_teacher(params)
    # same id set both sides so every hierarchy layer pairs fully and every
    # online parameter participates
    s_hat = np.arange(30, dtype=np.int64)

    tape = Tape()
    online = encode(scene, s_hat, params, cfg, tape)
    target = encode(scene, s_hat, teacher.params, cfg, None)
    pairs = match_correspondence(online, target)
    loss, _ = csd_loss(pairs, online, target, ConsistencyConfig(), tape)
    backward(tape, loss)

    for layer in teacher.params.layers:
        for key in layer:
            assert layer[key].grad is None
    online_grads = [t.grad for t in params.tensors()]
    assert all(g is not None for g in online_grads)
    assert any(np.abs(g).max() > 0 for g in online_grads)


def test_csd_gradcheck_through_encoder():
    # float64 graph: float32 central differences drown in quantization noise
    rng = np.random.default_rng(15)
    scene = _random_scene(rng, 12)
    cfg = EncoderConfig(n_layers=1, channels=(4,), k_group=3, downsample=3)
    base = init_encoder_params(cfg, rng)
    teacher = make_teacher(base)
    t64 = EncoderParams([{k: Tensor(v.data, dtype=np.float64)
                          for k, v in layer.items()}
                         for layer in teacher.params.layers])
    ids = scene.ids
    target = encode(scene, ids, t64, cfg, None)

    def f(w1, tape):
        params = EncoderParams([{
            "w1": w1,
            "b1": Tensor(base.layers[0]["b1"].data, dtype=np.float64),
            "w2": Tensor(base.layers[0]["w2"].data, dtype=np.float64),
            "b2": Tensor(base.layers[0]["b2"].data, dtype=np.float64),
        }])
        online = encode(scene, ids, params, cfg, tape)
        pairs = match_correspondence(online, target)
        loss, _ = csd_loss(pairs, online, target, ConsistencyConfig(), tape)
        return loss

    x = Tensor(base.layers[0]["w1"].data, dtype=np.float64)
    err = gradcheck(f, x, eps=1e-5)
    assert err < 1e-3, f"gradcheck error {err}"


def test_csd_pairs_length_mismatch_raises():
    eye = np.eye(2, dtype=np.float32)
    pairs, online, target = _single_layer_setup(eye, eye)
    bad = CorrespondencePairs(pairs.layers[:1])
    with pytest.raises(ContractError):
        csd_loss(bad, online, target, ConsistencyConfig())


def test_consistency_config_validation():
    with pytest.raises(ConfigError):
        ConsistencyConfig(tau=0.0)
    with pytest.raises(ConfigError):
        ConsistencyConfig(tau=-1.0)
