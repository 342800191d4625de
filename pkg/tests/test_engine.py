import math

import numpy as np
import pytest

from elastic_lab import engine as E
from elastic_lab.mask import SelectionMask

from conftest import finite_difference, random_batch, rel_error, small_conv_net


def test_build_is_deterministic():
    a, b = small_conv_net(3), small_conv_net(3)
    for tid in a.tensor_ids:
        assert np.array_equal(a.params[tid], b.params[tid])


def test_seed_changes_kernels():
    a, b = small_conv_net(1), small_conv_net(2)
    kernels = [t for t in a.tensor_ids if a.tensor_role[t] is E.Role.KERNEL]
    assert any(not np.array_equal(a.params[t], b.params[t]) for t in kernels)


def test_dense_shapes_and_init():
    net = E.build_network([E.dense(4, 3), E.softmax_ce()], seed=0)
    assert net.params["0.dense.kernel"].shape == (4, 3)
    assert net.params["0.dense.bias"].shape == (3,)
    assert not net.params["0.dense.bias"].any()
    bn = E.build_network([E.dense(4, 3), E.batchnorm(3), E.softmax_ce()], seed=0)
    assert np.all(bn.params["1.batchnorm.gamma"] == 1)
    assert not bn.params["1.batchnorm.beta"].any()
    assert all(not m.any() for m in bn.momentum.values())


def test_tensor_enumeration_follows_forward_order(conv_net):
    assert conv_net.tensor_ids == ["0.conv2d.kernel", "0.conv2d.bias",
                                   "1.batchnorm.gamma", "1.batchnorm.beta",
                                   "5.dense.kernel", "5.dense.bias"]
    assert conv_net.num_params == 18 + 2 + 2 + 2 + 24 + 3


@pytest.mark.parametrize("layers, shape, bad", [
    ([E.dense(4, 3), E.dense(4, 2), E.softmax_ce()], None, 1),
    ([E.conv2d(1, 2, 3), E.dense(8, 2), E.softmax_ce()], (1, 4, 4), 1),
    ([E.conv2d(1, 2, 3), E.pool2d(2), E.flatten(), E.dense(2, 2), E.softmax_ce()], (1, 5, 5), 1),
    ([E.dense(4, 3), E.softmax_ce(), E.dense(3, 3)], None, 1),
])
def test_shape_mismatch_names_layer(layers, shape, bad):
    with pytest.raises(E.ShapeError) as err:
        E.build_network(layers, 0, shape)
    assert err.value.layer == bad
    assert f"layer {bad}" in str(err.value)


def test_missing_loss_head():
    with pytest.raises(E.ShapeError):
        E.build_network([E.dense(4, 3)], 0)


def test_uniform_logits_give_log_c():
    net = E.build_network([E.dense(3, 5), E.softmax_ce()], 0)
    net.params["0.dense.kernel"][:] = 0
    batch = E.Batch(np.ones((2, 3)), [0, 4])
    loss, _ = E.forward(net, batch)
    assert loss == pytest.approx(math.log(5), abs=1e-12)


def test_hand_computed_cross_entropy():
    # logits row 1 = [1, 2], row 2 = [0.5, -0.5]; labels [1, 0]
    net = E.build_network([E.dense(2, 2), E.softmax_ce()], 0)
    net.params["0.dense.kernel"][:] = [[1.0, 0.0], [0.0, 1.0]]
    net.params["0.dense.bias"][:] = 0.0
    batch = E.Batch([[1.0, 2.0], [0.5, -0.5]], [1, 0])
    loss, _ = E.forward(net, batch)
    l1 = -2.0 + math.log(math.exp(1.0) + math.exp(2.0))
    l2 = -0.5 + math.log(math.exp(0.5) + math.exp(-0.5))
    assert loss == pytest.approx((l1 + l2) / 2, abs=1e-12)
    assert loss == pytest.approx(math.log1p(math.exp(-1.0)), abs=1e-12)


def test_eval_mode_is_stateless(conv_net):
    batch = random_batch(conv_net)
    E.forward(conv_net, batch, E.Mode.TRAIN)  # move running stats off their init
    before = conv_net.state()
    a, _ = E.forward(conv_net, batch, E.Mode.EVAL)
    b, _ = E.forward(conv_net, batch, E.Mode.EVAL)
    assert a == b
    for k, v in before["running"].items():
        assert all(np.array_equal(x, y) for x, y in zip(v, conv_net.running[k]))


def test_train_mode_updates_running_stats(conv_net):
    batch = random_batch(conv_net)
    E.forward(conv_net, batch, E.Mode.TRAIN)
    mean, var = conv_net.running[1]
    assert np.any(mean != 0) and np.any(var != 1)


def test_non_finite_input_reports_layer(conv_net):
    batch = random_batch(conv_net)
    batch.inputs[0, 0, 0, 0] = np.nan
    with pytest.raises(E.NumericFailure) as err:
        E.forward(conv_net, batch)
    assert err.value.layer == 0


def test_label_out_of_range(conv_net):
    batch = random_batch(conv_net)
    batch.labels[0] = 3
    with pytest.raises(ValueError):
        E.forward(conv_net, batch)


@pytest.mark.parametrize("pool_mode", ["avg", "max"])
def test_gradients_match_finite_differences(pool_mode):
    net = small_conv_net(seed=5, pool_mode=pool_mode)
    batch = random_batch(net, n=5, seed=2)
    _, cache = E.forward(net, batch, E.Mode.TRAIN, update_stats=False)
    grads = E.backward(net, cache, None).grads
    assert set(grads) == set(net.tensor_ids)
    for tid in net.tensor_ids:
        assert grads[tid].shape == net.params[tid].shape
        assert rel_error(grads[tid], finite_difference(net, batch, tid)) <= 1e-3, tid


def test_strided_conv_gradients():
    layers = [E.conv2d(2, 3, 3, stride=2, padding=1), E.relu(), E.flatten(), E.dense(12, 2),
              E.softmax_ce()]
    net = E.build_network(layers, 1, (2, 4, 4))
    batch = random_batch(net, n=3, seed=4)
    _, cache = E.forward(net, batch, E.Mode.TRAIN, update_stats=False)
    grads = E.backward(net, cache).grads
    for tid in net.tensor_ids:
        assert rel_error(grads[tid], finite_difference(net, batch, tid)) <= 1e-3, tid


def test_eval_mode_bn_backward():
    net = E.build_network([E.dense(3, 4), E.batchnorm(4), E.relu(), E.dense(4, 2),
                           E.softmax_ce()], 0)
    batch = random_batch(net, n=6, seed=1)
    E.forward(net, batch, E.Mode.TRAIN)
    _, cache = E.forward(net, batch, E.Mode.EVAL)
    grads = E.backward(net, cache).grads
    for tid in net.tensor_ids:
        p = net.params[tid]
        num = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            o = p[idx]
            p[idx] = o + 1e-5
            lp, _ = E.forward(net, batch, E.Mode.EVAL)
            p[idx] = o - 1e-5
            lm, _ = E.forward(net, batch, E.Mode.EVAL)
            p[idx] = o
            num[idx] = (lp - lm) / 2e-5
        assert rel_error(grads[tid], num) <= 1e-3


def test_partial_mask_restricts_gradients_exactly(conv_net):
    batch = random_batch(conv_net)
    _, cache = E.forward(conv_net, batch, E.Mode.TRAIN, update_stats=False)
    full = E.backward(conv_net, cache, None)
    rng = np.random.default_rng(0)
    for _ in range(20):
        bits = rng.integers(0, 2, conv_net.num_tensors)
        mask = SelectionMask(tuple(bits))
        part = E.backward(conv_net, cache, mask)
        assert set(part.grads) == set(conv_net.ids_from_mask(mask))
        for tid, g in part.grads.items():
            assert np.array_equal(g, full.grads[tid])


def test_output_layer_mask_does_no_upstream_work(conv_net):
    batch = random_batch(conv_net)
    _, cache = E.forward(conv_net, batch, E.Mode.TRAIN)
    gs = E.backward(conv_net, cache, ["5.dense.kernel", "5.dense.bias"])
    assert set(gs.grads) == {"5.dense.kernel", "5.dense.bias"}
    assert {r.layer for r in gs.records} == {5, 6}


def test_empty_mask_returns_loss_only(conv_net):
    batch = random_batch(conv_net)
    loss, cache = E.forward(conv_net, batch)
    gs = E.backward(conv_net, cache, SelectionMask.empty(conv_net.num_tensors))
    assert gs.grads == {} and gs.records == [] and gs.loss == loss


def test_work_is_monotone_in_depth(conv_net):
    batch = random_batch(conv_net)
    _, cache = E.forward(conv_net, batch)
    n = conv_net.num_tensors
    weight_kinds = {E.OpKind.GRAD_KERNEL, E.OpKind.GRAD_BIAS, E.OpKind.GRAD_GAMMA,
                    E.OpKind.GRAD_BETA}
    prefix, propagation = [], []
    for d in range(0, n + 1):
        recs = E.backward(conv_net, cache, SelectionMask.from_depths(n, range(1, d + 1))).records
        prefix.append(sum(r.work for r in recs))
        recs = E.backward(conv_net, cache, SelectionMask.from_depths(n, [d] if d else [])).records
        propagation.append(sum(r.work for r in recs if r.kind not in weight_kinds))
    assert prefix == sorted(prefix)
    assert propagation == sorted(propagation)


def test_zero_lr_leaves_parameters():
    net = small_conv_net()
    before = net.state()
    grads, _, updates = E.train_step(net, random_batch(net), lr=0.0, momentum=0.9,
                                     weight_decay=5e-4)
    assert all(not u.any() for u in updates.values())
    for tid in net.tensor_ids:
        assert np.array_equal(before["params"][tid], net.params[tid])


def test_plain_sgd_update():
    net = small_conv_net()
    before = net.state()["params"]
    grads, _, updates = E.train_step(net, random_batch(net), lr=0.1)
    for tid in net.tensor_ids:
        assert np.array_equal(updates[tid], -0.1 * grads.grads[tid])
        assert np.array_equal(net.params[tid], before[tid] + updates[tid])


def test_momentum_unrolls_to_1_9():
    net = E.build_network([E.dense(2, 2), E.softmax_ce()], 0)
    g = {t: np.full_like(net.params[t], 0.25) for t in net.tensor_ids}
    gs = E.GradientSet(g, 0.0)
    E.apply_update(net, gs, 0.01, 0.9, 0.0)
    second = E.apply_update(net, gs, 0.01, 0.9, 0.0)
    for t in net.tensor_ids:
        np.testing.assert_allclose(second[t], -0.01 * 1.9 * g[t], rtol=1e-15)


def test_weight_decay_is_decoupled():
    net = E.build_network([E.dense(2, 2), E.softmax_ce()], 0)
    w = net.params["0.dense.kernel"].copy()
    gs = E.GradientSet({"0.dense.kernel": np.zeros_like(w)}, 0.0)
    up = E.apply_update(net, gs, 0.1, 0.0, 0.5)
    np.testing.assert_allclose(up["0.dense.kernel"], -0.1 * 0.5 * w)
    assert not up["0.dense.bias"].any()


def test_frozen_tensors_are_bit_identical():
    net = small_conv_net()
    before = net.state()
    keep = ["5.dense.kernel", "1.batchnorm.beta"]
    E.train_step(net, random_batch(net), keep, lr=0.5, momentum=0.9, weight_decay=0.1)
    for tid in net.tensor_ids:
        same = np.array_equal(before["params"][tid], net.params[tid])
        assert same == (tid not in keep)


def test_non_finite_update_raises():
    net = E.build_network([E.dense(2, 2), E.softmax_ce()], 0)
    gs = E.GradientSet({"0.dense.bias": np.array([np.inf, 0.0])}, 0.0)
    with pytest.raises(E.NumericFailure):
        E.apply_update(net, gs, 0.1)


def test_cosine_lr():
    assert E.cosine_lr(0, 10, 0.2) == 0.2
    assert E.cosine_lr(10, 10, 0.2) == pytest.approx(0.0, abs=1e-18)
    assert E.cosine_lr(5, 10, 0.2) == pytest.approx(0.1, abs=1e-16)
    with pytest.raises(ValueError):
        E.cosine_lr(0, 0, 0.1)
    with pytest.raises(ValueError):
        E.cosine_lr(11, 10, 0.1)


def test_layer_spec_round_trip():
    for spec in (E.conv2d(1, 8, 3, 2, 1), E.pool2d(2, "max"), E.softmax_ce(), E.batchnorm(4)):
        assert E.LayerSpec.from_dict(spec.to_dict()) == spec
