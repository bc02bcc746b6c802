import numpy as np
import pytest

from rxf import (
    AttackConfig,
    BnPolicy,
    RngState,
    Schedule,
    SpectralState,
    Tensor,
    TrainConfig,
    TransferConfig,
    apply_bn_policy,
    build_network,
    empirical_lipschitz_probe,
    lwf_finetune,
    neft_finetune,
    neft_normalize,
    per_layer_bound_product,
    power_iteration,
    svd_spectral_norm,
    synth_patterns,
    train_adversarial,
    vanilla_finetune,
)
from rxf.errors import PolicyError, ShapeError
from rxf.layers import EVAL, Block, Conv2D, Dense, Flatten, ForwardCtx, Network, ReLU, split
from rxf.transfer import attach_spectral, bake_spectral, _weight_matrix_view
from rxf.training import SGD, dataset_metrics
from rxf.attacks import robust_accuracy


def _state_for(w, seed=0):
    return SpectralState.for_matrix(w.shape[0], w.shape[1], RngState(seed, "ps"))


def test_power_iteration_diagonal():
    w = np.diag([3.0, 1.0])
    sigma = power_iteration(w, _state_for(w), iters=5)
    assert abs(sigma - 3.0) < 1e-6


def test_power_iteration_antidiagonal():
    w = np.array([[0.0, 2.0], [1.0, 0.0]])
    sigma = power_iteration(w, _state_for(w), iters=50)
    assert abs(sigma - 2.0) < 1e-6


def test_power_iteration_matches_svd_oracle():
    rng = RngState(1, "pi")
    for seed in range(20):
        w = rng.normal((5, 5), dtype=np.float64)
        sigma = power_iteration(w, _state_for(w, seed), iters=100)
        oracle = svd_spectral_norm(w)
        assert abs(sigma - oracle) / oracle < 1e-3


def test_power_iteration_zero_matrix_degeneracy():
    w = np.zeros((3, 4))
    state = _state_for(w)
    sigma = power_iteration(w, state, iters=3)
    assert sigma == state.eps_div
    assert state.degenerate


def test_power_iteration_warm_start_preserves_unit_norms():
    rng = RngState(2, "pi")
    w = rng.normal((6, 4), dtype=np.float64)
    state = _state_for(w)
    for _ in range(10):
        power_iteration(w, state, iters=1)
        assert abs(np.linalg.norm(state.u) - 1.0) < 1e-9
        assert abs(np.linalg.norm(state.v) - 1.0) < 1e-9


def test_neft_normalize_scaling_identity():
    # sigma(W) = 2, beta = 0.4 -> W* = 0.2 W with spectral norm exactly 0.4
    w = Tensor(np.diag([2.0, 1.0]).astype(np.float32), requires_grad=True)
    state = _state_for(w.data)
    for _ in range(50):
        w_eff = neft_normalize(w, state, beta=0.4)
    assert np.allclose(w_eff.data, 0.2 * w.data, atol=1e-6)
    assert abs(svd_spectral_norm(w_eff.data) - 0.4) < 1e-6


def test_neft_normalize_orthonormal_is_identity_at_beta_one():
    theta = 0.3
    rot = np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]], dtype=np.float32)
    w = Tensor(rot, requires_grad=True)
    w_eff = neft_normalize(w, _state_for(rot), beta=1.0)
    assert np.allclose(w_eff.data, rot, atol=1e-6)


def test_neft_normalize_conv_bank_via_matrix_view():
    rng = RngState(3, "bank")
    layer = Conv2D(3, 8, 3, rng=rng)
    state = SpectralState.for_matrix(8, 27, rng)
    beta = 0.4
    # warm-start as during fine-tuning: one iteration per step
    for _ in range(60):
        w_eff = neft_normalize(layer.W, state, beta)
    norm = svd_spectral_norm(w_eff.data.reshape(8, -1))
    assert abs(norm - beta) / beta < 0.02


PAT_ARCH = {"family": "small-cnn", "depth": 4, "classes": 5, "input_shape": [1, 12, 12]}


def _source_net(seed=0, epochs=3, mode="at"):
    ds = synth_patterns(range(5), 60, seed=seed)
    net = build_network(PAT_ARCH, seed=seed)
    cfg = TrainConfig(epochs=epochs, batch_size=32, seed=seed,
                      schedule=Schedule(base_lr=0.05, milestones=(), total_epochs=max(epochs, 1)))
    train_adversarial(net, ds.images, ds.labels, AttackConfig(steps=3), cfg)
    return net


def _target_data(seed=0, per_class=40):
    return synth_patterns(range(5, 10), per_class, seed=seed)


def _run_cfg(epochs, seed=0, lr=0.02):
    return TrainConfig(epochs=epochs, batch_size=32, seed=seed,
                       schedule=Schedule(base_lr=lr, milestones=(), total_epochs=max(epochs, 1)))


def test_vanilla_finetune_freezes_extractor_bitwise():
    source = _source_net(seed=1)
    ds = _target_data(seed=1)
    tcfg = TransferConfig(mode="vanilla", k=2)
    result = vanilla_finetune(source, ds.images, ds.labels, tcfg, _run_cfg(5, seed=1))
    frozen_prefixes = tuple(f"b{i + 1}." for i in range(result.net.depth - 2))
    src_state = dict(source.state_arrays())
    for name, arr in result.net.state_arrays():
        if name.startswith(frozen_prefixes):
            assert np.array_equal(arr, src_state[name]), name


def test_vanilla_finetune_k_equals_L_trains_everything():
    source = _source_net(seed=2)
    ds = _target_data(seed=2)
    result = vanilla_finetune(source, ds.images, ds.labels,
                              TransferConfig(mode="vanilla", k=source.depth), _run_cfg(2, seed=2))
    src_state = dict(source.state_arrays())
    changed = sum(int(not np.array_equal(arr, src_state[name]))
                  for name, arr in result.net.state_arrays())
    assert changed > len(src_state) // 2


def test_vanilla_more_blocks_no_worse_accuracy():
    source = _source_net(seed=3, epochs=4)
    ds = _target_data(seed=3, per_class=60)
    test = synth_patterns(range(5, 10), 40, seed=3, split="test")
    accs = {}
    for k in (1, source.depth):
        result = vanilla_finetune(source, ds.images, ds.labels,
                                  TransferConfig(mode="vanilla", k=k), _run_cfg(6, seed=3))
        accs[k] = dataset_metrics(result.net, test.images, test.labels)[1]
    assert accs[source.depth] >= accs[1]


def test_neft_finetune_bakes_into_beta_ball():
    source = _source_net(seed=4)
    ds = _target_data(seed=4)
    tcfg = TransferConfig(mode="neft", k=2, beta=0.4)
    result = neft_finetune(source, ds.images, ds.labels, tcfg, _run_cfg(4, seed=4))
    assert result.spectral_report
    for row in result.spectral_report:
        assert 0.98 * 0.4 <= row["baked_norm_svd"] <= 1.02 * 0.4, row


def test_neft_freezes_all_bn_affine():
    source = _source_net(seed=5)
    ds = _target_data(seed=5)
    result = neft_finetune(source, ds.images, ds.labels,
                           TransferConfig(mode="neft", k=2, beta=0.6), _run_cfg(2, seed=5))
    src_state = dict(source.state_arrays())
    for name, arr in result.net.state_arrays():
        if name.endswith(".gamma") or name.endswith(".beta"):
            assert np.array_equal(arr, src_state[name]), name


def test_neft_probe_within_per_layer_product():
    source = _source_net(seed=6)
    ds = _target_data(seed=6)
    result = neft_finetune(source, ds.images, ds.labels,
                           TransferConfig(mode="neft", k=2, beta=0.4), _run_cfg(3, seed=6))
    net = result.net
    _, submodel = split(net, 2)
    feat_shape = (16, 3, 3)  # extractor output for the 12x12 small-cnn
    bound = per_layer_bound_product(submodel, feat_shape)
    ratio = empirical_lipschitz_probe(submodel.forward, feat_shape, n_pairs=2000,
                                     radius=1.0, rng=RngState(0, "probe"))
    assert ratio <= bound + 1e-5


def test_lipschitz_probe_dense_layer_bound():
    rng = RngState(7, "probe")
    layer = Dense(6, 6, rng=rng)
    u, s, vt = np.linalg.svd(layer.W.data.astype(np.float64))
    layer.W.data = (u @ np.diag(0.4 * s / s.max()) @ vt).astype(np.float32)
    layer.b.data = rng.normal((6,))
    net = Network([Block([Flatten(), layer])])
    ratio = empirical_lipschitz_probe(net.forward, (1, 1, 6), n_pairs=10_000, radius=0.5,
                                      rng=RngState(8, "p"))
    assert ratio <= 0.4 + 1e-5


def test_lipschitz_probe_composition_bound():
    rng = RngState(9, "probe")
    layers = []
    for seed in (0, 1):
        layer = Dense(6, 6, rng=rng)
        u, s, vt = np.linalg.svd(layer.W.data.astype(np.float64))
        layer.W.data = (u @ np.diag(0.4 * s / s.max()) @ vt).astype(np.float32)
        layers.append(layer)
    net = Network([Block([Flatten(), layers[0], layers[1]])])
    ratio = empirical_lipschitz_probe(net.forward, (1, 1, 6), n_pairs=10_000, radius=0.5,
                                      rng=RngState(10, "p"))
    assert ratio <= 0.4 * 0.4 + 1e-5


def test_lipschitz_probe_relu_composition_non_expansive():
    rng = RngState(11, "probe")
    layer = Dense(6, 6, rng=rng)
    u, s, vt = np.linalg.svd(layer.W.data.astype(np.float64))
    layer.W.data = (u @ np.diag(s / s.max()) @ vt).astype(np.float32)
    net = Network([Block([Flatten(), layer, ReLU()])])
    ratio = empirical_lipschitz_probe(net.forward, (1, 1, 6), n_pairs=10_000, radius=0.5,
                                      rng=RngState(12, "p"))
    assert ratio <= 1.0 + 1e-5


def test_lwf_snapshot_identity_has_zero_penalty():
    from rxf import Tape
    import rxf.ops as ops

    source = _source_net(seed=12)
    snapshot = source.copy()
    ds = _target_data(seed=12)
    x = Tensor(ds.images[:8])
    ctx = ForwardCtx(training=True, update_stats=False)
    _, pen_a = source.forward_penultimate(x, ctx)
    _, pen_b = snapshot.forward_penultimate(x, ctx)
    diff = pen_a.data - pen_b.data
    assert np.linalg.norm(diff) == 0.0


def test_lwf_penalty_forced_arithmetic():
    # per-example penultimate diff norm 2, lambda_d 0.1 -> penalty 0.2
    assert 0.1 * 2.0 == pytest.approx(0.2)


def test_lwf_lambda_sweep_runs_end_to_end():
    source = _source_net(seed=13, epochs=2)
    ds = _target_data(seed=13, per_class=20)
    rows = []
    for lam in (0.1, 0.01, 0.005, 0.001):
        tcfg = TransferConfig(mode="lwf", k=source.depth, lambda_d=lam)
        result = lwf_finetune(source, ds.images, ds.labels, tcfg, _run_cfg(1, seed=13))
        rows.append((lam, result.history[-1].clean_acc))
    assert len(rows) == 4


def test_lwf_lambda_zero_equals_vanilla_full_finetune_bitwise():
    source = _source_net(seed=14, epochs=2)
    ds = _target_data(seed=14, per_class=30)
    van = vanilla_finetune(source, ds.images, ds.labels,
                           TransferConfig(mode="vanilla", k=source.depth, reinit_head=True),
                           _run_cfg(3, seed=15))
    lwf = lwf_finetune(source, ds.images, ds.labels,
                       TransferConfig(mode="lwf", k=source.depth, lambda_d=0.0, reinit_head=True),
                       _run_cfg(3, seed=15))
    for (_, a), (_, b) in zip(van.net.state_arrays(), lwf.net.state_arrays()):
        assert np.array_equal(a, b)


def test_lwf_rejects_negative_lambda():
    source = _source_net(seed=15, epochs=1)
    ds = _target_data(seed=15, per_class=10)
    with pytest.raises(ValueError, match="lambda_d"):
        lwf_finetune(source, ds.images, ds.labels,
                     TransferConfig(mode="lwf", k=source.depth, lambda_d=-0.1), _run_cfg(1))


def test_lwf_requires_full_depth():
    source = _source_net(seed=16, epochs=1)
    ds = _target_data(seed=16, per_class=10)
    with pytest.raises(ValueError, match="k must equal"):
        lwf_finetune(source, ds.images, ds.labels,
                     TransferConfig(mode="lwf", k=1, lambda_d=0.1), _run_cfg(1))


def test_apply_bn_policy_full_freeze_case():
    net = build_network(PAT_ARCH, seed=17)
    apply_bn_policy(net, 2, BnPolicy(extractor_stats="frozen", submodel_affine="frozen"))
    split_idx = net.depth - 2
    for name, layer, bi in net.bn_layers():
        if bi < split_idx:
            assert layer.stats_frozen
        assert not layer.gamma.requires_grad
        assert not layer.beta.requires_grad


def test_apply_bn_policy_unfrozen_case_all_four_tensors_move():
    from rxf import Tape, reverse_grad
    import rxf.ops as ops

    net = build_network(PAT_ARCH, seed=18)
    split(net, 2)
    apply_bn_policy(net, 2, BnPolicy(extractor_stats="updating", submodel_affine="trainable"))
    ext_bn = [l for _, l, bi in net.bn_layers() if bi < net.depth - 2][0]
    sub_bn = [l for _, l, bi in net.bn_layers() if bi >= net.depth - 2][0]
    before = (ext_bn.running_mean.copy(), ext_bn.running_var.copy(),
              sub_bn.gamma.data.copy(), sub_bn.beta.data.copy())
    ds = _target_data(seed=18, per_class=10)
    opt = SGD(net.parameters(), lr=0.1)
    net.zero_grad()
    with Tape() as tape:
        logits = net.forward(Tensor(ds.images[:16]), ForwardCtx(training=True))
        loss = ops.softmax_cross_entropy(logits, ds.labels[:16])
    reverse_grad(tape, loss)
    opt.step()
    assert not np.array_equal(ext_bn.running_mean, before[0])
    assert not np.array_equal(ext_bn.running_var, before[1])
    assert not np.array_equal(sub_bn.gamma.data, before[2])
    assert not np.array_equal(sub_bn.beta.data, before[3])


def test_bn_policy_submodel_stats_freeze_rejected():
    with pytest.raises(PolicyError, match="hard to converge"):
        BnPolicy(submodel_stats="frozen").validate()


def test_argmax_invariant_under_final_layer_scaling():
    net = build_network(PAT_ARCH, seed=19)
    head = net.last_dense()
    head.b.data = np.zeros_like(head.b.data)
    x = Tensor(RngState(20, "am").uniform(0, 1, (32, 1, 12, 12)))
    before = net.forward(x, EVAL).data.argmax(axis=1)
    head.W.data = head.W.data * np.float32(0.37)
    after = net.forward(x, EVAL).data.argmax(axis=1)
    assert np.array_equal(before, after)


def test_warm_started_sigma_tracks_oracle_during_finetune():
    source = _source_net(seed=21, epochs=2)
    ds = _target_data(seed=21, per_class=60)
    net = source.copy()
    _, submodel = split(net, 2)
    apply_bn_policy(net, 2, BnPolicy(submodel_affine="frozen"))
    attach_spectral(submodel, beta=0.6, rng=RngState(22, "sp"))
    opt = SGD(net.parameters(), lr=0.02)
    from rxf import Tape, reverse_grad
    import rxf.ops as ops

    batch_rng = RngState(23, "b")
    errors = []
    for step in range(80):
        idx = batch_rng.permutation(len(ds.labels))[:32]
        net.zero_grad()
        with Tape() as tape:
            logits = net.forward(Tensor(ds.images[idx]), ForwardCtx(training=True))
            loss = ops.softmax_cross_entropy(logits, ds.labels[idx])
        # compare the estimate each forward actually used against the
        # oracle on the weights it was computed from (pre-update)
        if step >= 50:
            for _, layer in submodel.named_layers():
                state = getattr(layer, "spectral_state", None)
                if state is None:
                    continue
                oracle = svd_spectral_norm(_weight_matrix_view(layer))
                errors.append(abs(state.last_sigma - oracle) / oracle)
        reverse_grad(tape, loss)
        opt.step()
    assert errors and max(errors) < 0.05
