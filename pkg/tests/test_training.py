import math

import numpy as np
import pytest

from rxf import (
    AttackConfig,
    FDMConfig,
    RngState,
    Schedule,
    SGD,
    Tape,
    Tensor,
    TrainConfig,
    build_network,
    fdm_loss,
    lr_at_epoch,
    synth_blobs,
    synth_patterns,
    train_adversarial,
    train_source_cartl,
    train_standard,
    robust_accuracy,
)
from rxf.errors import DataError, GradError
from rxf.layers import Block, Dense, Flatten, Network
from rxf.tensor import reverse_grad
import rxf.ops as ops


def test_sgd_first_step():
    p = Tensor([1.0], requires_grad=True)
    p.grad = np.array([1.0], dtype=np.float32)
    SGD([("p", p)], lr=0.1).step()
    assert np.allclose(p.data, [0.9])


def test_sgd_skips_frozen_even_with_grad():
    p = Tensor([1.0], requires_grad=False)
    p.grad = np.array([5.0], dtype=np.float32)
    SGD([("p", p)], lr=0.1).step()
    assert np.array_equal(p.data, np.array([1.0], dtype=np.float32))


def test_sgd_momentum_recurrence_two_steps():
    p = Tensor([0.0], requires_grad=True)
    opt = SGD([("p", p)], lr=0.1)
    for _ in range(2):
        p.grad = np.array([1.0], dtype=np.float32)
        opt.step()
    # v1 = 1 -> dp 0.1; v2 = 0.9 + 1 = 1.9 -> dp 0.19
    assert np.allclose(p.data, [-(0.1 + 0.19)], atol=1e-7)


def test_sgd_missing_grad_is_an_error():
    p = Tensor([1.0], requires_grad=True)
    with pytest.raises(GradError, match="no gradient"):
        SGD([("p", p)], lr=0.1).step()


def test_schedule_values():
    s = Schedule()
    assert lr_at_epoch(s, 0) == pytest.approx(0.1)
    assert lr_at_epoch(s, 40) == pytest.approx(0.02)
    assert lr_at_epoch(s, 95) == pytest.approx(0.1 * 0.2**3)


def test_schedule_range_checked():
    with pytest.raises(ValueError):
        lr_at_epoch(Schedule(total_epochs=100), 100)


ARCH_MLP = {"family": "mlp", "depth": 2, "classes": 2, "input_shape": [1, 1, 6]}


def _blob_task(seed=0):
    return synth_blobs(2, 100, 6, separation=0.6, seed=seed)


def test_train_standard_separable_blobs():
    ds = _blob_task()
    net = build_network(ARCH_MLP, seed=0)
    cfg = TrainConfig(epochs=20, batch_size=32, seed=0,
                      schedule=Schedule(base_lr=0.05, milestones=(), total_epochs=20))
    history = train_standard(net, ds.images, ds.labels, cfg)
    assert history[-1].clean_acc >= 0.99


def test_train_zero_epochs_is_noop():
    ds = _blob_task()
    net = build_network(ARCH_MLP, seed=1)
    before = [(n, a.copy()) for n, a in net.state_arrays()]
    train_standard(net, ds.images, ds.labels, TrainConfig(epochs=0, seed=0))
    after = dict(net.state_arrays())
    for name, arr in before:
        assert np.array_equal(arr, after[name])


def test_train_standard_bitwise_deterministic():
    ds = _blob_task()

    def run():
        net = build_network(ARCH_MLP, seed=2)
        cfg = TrainConfig(epochs=4, batch_size=32, seed=7,
                          schedule=Schedule(base_lr=0.05, milestones=(), total_epochs=4))
        hist = train_standard(net, ds.images, ds.labels, cfg)
        return net, hist

    n1, h1 = run()
    n2, h2 = run()
    assert h1[-1].clean_loss == h2[-1].clean_loss
    for (_, a), (_, b) in zip(n1.state_arrays(), n2.state_arrays()):
        assert np.array_equal(a, b)


def test_label_out_of_range_rejected():
    ds = _blob_task()
    net = build_network(ARCH_MLP, seed=0)
    labels = ds.labels.copy()
    labels[0] = 99
    with pytest.raises(DataError, match="label"):
        train_standard(net, ds.images, labels, TrainConfig(epochs=1, seed=0))


def _short_cfg(epochs, seed=0, lr=0.05):
    return TrainConfig(epochs=epochs, batch_size=32, seed=seed,
                       schedule=Schedule(base_lr=lr, milestones=(), total_epochs=epochs))


def test_adversarial_with_zero_eps_equals_standard_bitwise():
    ds = _blob_task()
    net_a = build_network(ARCH_MLP, seed=3)
    net_b = build_network(ARCH_MLP, seed=3)
    train_standard(net_a, ds.images, ds.labels, _short_cfg(3, seed=5))
    train_adversarial(net_b, ds.images, ds.labels,
                      AttackConfig(eps=0.0, alpha=1e-3, steps=2), _short_cfg(3, seed=5))
    for (_, a), (_, b) in zip(net_a.state_arrays(), net_b.state_arrays()):
        assert np.array_equal(a, b)


PATTERN_ARCH = {"family": "small-cnn", "depth": 4, "classes": 5, "input_shape": [1, 12, 12]}


def test_adversarial_training_buys_robustness():
    ds = synth_patterns(range(5), 80, seed=0)
    test = synth_patterns(range(5), 40, seed=0, split="test")
    attack = AttackConfig(eps=8 / 255, alpha=2 / 255, steps=5)
    evalcfg = AttackConfig(eps=8 / 255, alpha=2 / 255, steps=10)

    net_std = build_network(PATTERN_ARCH, seed=1)
    train_standard(net_std, ds.images, ds.labels, _short_cfg(4, seed=1))
    net_adv = build_network(PATTERN_ARCH, seed=1)
    train_adversarial(net_adv, ds.images, ds.labels, attack, _short_cfg(4, seed=1))

    rep_std = robust_accuracy(net_std, test.images, test.labels, evalcfg, rng=RngState(0, "e"))
    rep_adv = robust_accuracy(net_adv, test.images, test.labels, evalcfg, rng=RngState(0, "e"))
    assert rep_adv.robust_acc > rep_std.robust_acc


def _identity_feature_net():
    # block 1 exposes the flattened input as features, block 2 classifies
    return Network([Block([Flatten()]), Block([Dense(4, 2)])])


def test_fdm_penalty_zero_when_inputs_match():
    net = _identity_feature_net()
    x = np.full((2, 1, 1, 4), 0.5, dtype=np.float32)
    y = np.array([0, 1])
    with Tape() as tape:
        loss, parts = fdm_loss(net, x, x, y, FDMConfig(lam=0.01, k=1))
    assert parts["penalty"] == 0.0


def test_fdm_penalty_forced_arithmetic():
    # d=4, per-example feature diff (1,1,1,1), batch of 1, lam=0.01
    # penalty = (0.01 / sqrt(4)) * ||(1,1,1,1)||_2 = 0.005 * 2 = 0.01
    net = _identity_feature_net()
    x = np.zeros((1, 1, 1, 4), dtype=np.float32)
    x_adv = np.ones((1, 1, 1, 4), dtype=np.float32)
    with Tape() as tape:
        loss, parts = fdm_loss(net, x, x_adv, np.array([0]), FDMConfig(lam=0.01, k=1))
    assert parts["penalty"] == pytest.approx(0.01, rel=1e-6)


def test_fdm_penalty_scales_linearly_with_lambda():
    net = _identity_feature_net()
    rng = RngState(1, "fdm")
    x = rng.uniform(0, 1, (4, 1, 1, 4))
    x_adv = np.clip(x + rng.uniform(-0.1, 0.1, x.shape), 0, 1)
    y = np.array([0, 1, 0, 1])
    with Tape():
        _, parts_a = fdm_loss(net, x, x_adv, y, FDMConfig(lam=0.01, k=1))
    with Tape():
        _, parts_b = fdm_loss(net, x, x_adv, y, FDMConfig(lam=0.005, k=1))
    assert parts_a["penalty"] == pytest.approx(2 * parts_b["penalty"], rel=1e-6)


def test_fdm_loss_with_lambda_zero_is_exactly_the_adversarial_ce():
    from rxf.layers import ForwardCtx

    ds = synth_patterns(range(3), 20, seed=2)
    net = build_network({"family": "small-cnn", "depth": 4, "classes": 3,
                         "input_shape": [1, 12, 12]}, seed=2)
    x, y = ds.images[:16], ds.labels[:16]
    x_adv = np.clip(x + 0.01, 0, 1)
    with Tape():
        loss, parts = fdm_loss(net, x, x_adv, y, FDMConfig(lam=0.0, k=2))
    net2 = build_network({"family": "small-cnn", "depth": 4, "classes": 3,
                          "input_shape": [1, 12, 12]}, seed=2)
    with Tape():
        ce = ops.softmax_cross_entropy(net2.forward(Tensor(x_adv), ForwardCtx(training=True)), y)
    assert loss.item() == parts["adv_ce"] == ce.item()


def test_cartl_with_lambda_zero_equals_adversarial_training_bitwise():
    ds = synth_patterns(range(3), 30, seed=3)
    arch = {"family": "small-cnn", "depth": 4, "classes": 3, "input_shape": [1, 12, 12]}
    attack = AttackConfig(eps=8 / 255, alpha=2 / 255, steps=3)

    net_a = build_network(arch, seed=4)
    hist_a = train_adversarial(net_a, ds.images, ds.labels, attack, _short_cfg(2, seed=6))
    net_b = build_network(arch, seed=4)
    hist_b = train_source_cartl(net_b, ds.images, ds.labels, attack,
                                FDMConfig(lam=0.0, k=2), _short_cfg(2, seed=6))
    for (_, a), (_, b) in zip(net_a.state_arrays(), net_b.state_arrays()):
        assert np.array_equal(a, b)
    assert [h.adv_loss for h in hist_a] == [h.adv_loss for h in hist_b]


def test_cartl_reduces_feature_distance_vs_control():
    ds = synth_patterns(range(5), 60, seed=5)
    arch = {"family": "small-cnn", "depth": 4, "classes": 5, "input_shape": [1, 12, 12]}
    attack = AttackConfig(eps=8 / 255, alpha=2 / 255, steps=3)

    net_pen = build_network(arch, seed=7)
    hist_pen = train_source_cartl(net_pen, ds.images, ds.labels, attack,
                                  FDMConfig(lam=0.02, k=2), _short_cfg(5, seed=8))
    net_ctl = build_network(arch, seed=7)
    hist_ctl = train_source_cartl(net_ctl, ds.images, ds.labels, attack,
                                  FDMConfig(lam=0.0, k=2), _short_cfg(5, seed=8))
    assert hist_pen[-1].feat_dist < hist_ctl[-1].feat_dist


def test_training_csv_stream(tmp_path):
    ds = _blob_task()
    net = build_network(ARCH_MLP, seed=0)
    path = tmp_path / "train.csv"
    cfg = TrainConfig(epochs=2, batch_size=32, seed=0, csv_path=str(path),
                      schedule=Schedule(base_lr=0.05, milestones=(), total_epochs=2))
    train_standard(net, ds.images, ds.labels, cfg)
    lines = path.read_text().strip().splitlines()
    assert lines[0] == "epoch,lr,clean_loss,adv_loss,fdm_penalty,clean_acc,adv_acc"
    assert len(lines) == 3
