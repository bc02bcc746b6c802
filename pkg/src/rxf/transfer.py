"""Transfer strategies on a pre-trained source network.

Three modes:
  * vanilla  - freeze the first L-k blocks, retrain the rest
  * neft     - vanilla plus non-expansive fine-tuning: every dense/conv
               weight in the sub-model is forward-normalized to spectral
               norm beta, residual merges switch to a 1/n convex mix, and
               all BN affine parameters are frozen; weights are baked at
               export
  * lwf      - full fine-tuning with an L2 penalty tying penultimate
               features to a frozen snapshot of the source parameters
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import ops
from .errors import GradError, PolicyError, ShapeError
from .layers import (
    EVAL,
    BatchNorm,
    Block,
    Conv2D,
    Dense,
    ForwardCtx,
    MaxPool2,
    NetView,
    Network,
    ResidualBlock,
    conv_weight_as_matrix,
    split,
)
from .rng import RngState
from .tensor import Tape, Tensor, reverse_grad
from .training import Schedule, TrainConfig, _fit, dataset_metrics
from .ops import softmax_cross_entropy


# -- batch-norm freeze policies --------------------------------------------

@dataclass
class BnPolicy:
    """Which BN tensors stay fixed during transfer.

    extractor_stats: 'frozen' keeps the source running statistics in the
    feature extractor; 'updating' lets target batches move them.
    submodel_affine: 'frozen' pins the sub-model scale/shift; 'trainable'
    fine-tunes them. Freezing running statistics inside fine-tunable
    layers is rejected (it makes the target model hard to converge).
    """

    extractor_stats: str = "frozen"
    submodel_affine: str = "trainable"
    submodel_stats: str = "updating"

    def validate(self):
        if self.extractor_stats not in ("frozen", "updating"):
            raise PolicyError(f"extractor_stats must be frozen|updating, got {self.extractor_stats!r}")
        if self.submodel_affine not in ("frozen", "trainable"):
            raise PolicyError(f"submodel_affine must be frozen|trainable, got {self.submodel_affine!r}")
        if self.submodel_stats == "frozen":
            raise PolicyError(
                "freezing running statistics inside fine-tunable layers is disallowed "
                "(known to make the target model hard to converge)"
            )
        if self.submodel_stats != "updating":
            raise PolicyError(f"submodel_stats must be 'updating', got {self.submodel_stats!r}")


def apply_bn_policy(net: Network, k: int, policy: BnPolicy):
    """Set BN freeze flags for a split at the last k blocks."""
    policy.validate()
    split_idx = net.depth - k
    for _, layer, bi in net.bn_layers():
        if bi < split_idx:
            layer.stats_frozen = policy.extractor_stats == "frozen"
            layer.gamma.requires_grad = False
            layer.beta.requires_grad = False
        else:
            layer.stats_frozen = False
            trainable = policy.submodel_affine == "trainable"
            layer.gamma.requires_grad = trainable
            layer.beta.requires_grad = trainable
    return net


# -- spectral normalization -------------------------------------------------

@dataclass
class SpectralState:
    """Warm-started power-iteration vectors for one constrained weight."""

    u: np.ndarray
    v: np.ndarray
    iters_per_step: int = 1
    eps_div: float = 1e-12
    degenerate: bool = False
    last_sigma: float = 0.0    # estimate used by the most recent forward

    @classmethod
    def for_matrix(cls, rows: int, cols: int, rng: RngState, iters_per_step: int = 1):
        return cls(u=rng.unit_vector(rows, dtype=np.float64),
                   v=rng.unit_vector(cols, dtype=np.float64),
                   iters_per_step=iters_per_step)


def power_iteration(w: np.ndarray, state: SpectralState, iters: int = 1) -> float:
    """Estimate the largest singular value of a matrix.

    Runs `iters` rounds of v <- W^T u / ||.||, u <- W v / ||.||, then
    returns u^T W v. The state is updated in place for warm starts. A
    zero matrix returns eps_div with the degeneracy flag set.
    """
    if w.ndim != 2:
        raise ShapeError(f"power iteration expects a matrix, got shape {w.shape}")
    if state.u.shape != (w.shape[0],) or state.v.shape != (w.shape[1],):
        raise ShapeError(f"spectral state dims {state.u.shape}/{state.v.shape} do not fit matrix {w.shape}")
    w64 = w.astype(np.float64, copy=False)
    u, v = state.u, state.v
    for _ in range(iters):
        v = w64.T @ u
        nv = np.linalg.norm(v)
        if nv <= state.eps_div:
            state.degenerate = True
            return state.eps_div
        v = v / nv
        u = w64 @ v
        nu = np.linalg.norm(u)
        if nu <= state.eps_div:
            state.degenerate = True
            return state.eps_div
        u = u / nu
    state.u, state.v = u, v
    state.degenerate = False
    sigma = float(u @ w64 @ v)
    if sigma <= state.eps_div:
        state.degenerate = True
        return state.eps_div
    return sigma


def svd_spectral_norm(w: np.ndarray) -> float:
    """Independent oracle: largest singular value via LAPACK SVD."""
    return float(np.linalg.svd(np.asarray(w, dtype=np.float64), compute_uv=False)[0])


def _weight_matrix_view(layer) -> np.ndarray:
    if isinstance(layer, Conv2D):
        return conv_weight_as_matrix(layer)
    if isinstance(layer, Dense):
        return layer.W.data
    raise ShapeError(f"no spectral matrix view for layer type {type(layer).__name__}")


def neft_normalize(param: Tensor, state: SpectralState, beta: float, ctx: Optional[ForwardCtx] = None) -> Tensor:
    """Effective weight beta * W / sigma(W) for the forward pass.

    The stored weight stays raw; gradients flow through the normalized
    mapping (sigma = u^T W v with u, v treated as constants). On training
    forwards the state first takes `iters_per_step` warm power-iteration
    rounds. A degenerate sigma skips normalization for the step.
    """
    mat = param.data.reshape(param.data.shape[0], -1)
    if ctx is None or (ctx.training and ctx.update_spectral):
        sigma_est = power_iteration(mat, state, state.iters_per_step)
    else:
        sigma_est = float(state.u @ mat.astype(np.float64) @ state.v)
    state.last_sigma = sigma_est
    if state.degenerate or abs(sigma_est) <= state.eps_div:
        state.degenerate = True
        return param
    wm = ops.reshape(param, mat.shape)
    urow = ops.constant(state.u[None, :], dtype=param.data.dtype)
    vcol = ops.constant(state.v[:, None], dtype=param.data.dtype)
    sigma = ops.reshape(ops.matmul(ops.matmul(urow, wm), vcol), ())
    factor = ops.div(ops.constant(beta, dtype=param.data.dtype), sigma)
    return ops.mul(param, factor)


def attach_spectral(submodel: NetView, beta: float, rng: RngState, iters_per_step: int = 1):
    """Install normalize-per-forward hooks on every dense/conv in the view."""
    states: dict[str, SpectralState] = {}
    for name, layer in submodel.named_layers():
        if not isinstance(layer, (Dense, Conv2D)):
            continue
        mat = _weight_matrix_view(layer)
        state = SpectralState.for_matrix(mat.shape[0], mat.shape[1], rng, iters_per_step)
        states[name] = state
        layer.spectral_state = state

        def transform(w, ctx, _state=state, _beta=beta):
            return neft_normalize(w, _state, _beta, ctx)

        layer.weight_transform = transform
    return states


def bake_spectral(net: Network, beta: float, iters: int = 100):
    """Replace stored weights by beta * W / sigma(W) with converged sigma.

    Removes the per-forward hooks; returns per-layer records of the baked
    norms (power-iteration estimate and SVD oracle).
    """
    report = []
    for name, layer in net.named_layers():
        state = getattr(layer, "spectral_state", None)
        if state is None:
            continue
        mat = _weight_matrix_view(layer)
        sigma = power_iteration(mat, state, iters)
        if not state.degenerate:
            layer.W.data = (layer.W.data * (beta / sigma)).astype(layer.W.data.dtype)
        layer.weight_transform = None
        layer.spectral_state = None
        baked = _weight_matrix_view(layer)
        report.append({
            "layer": name,
            "sigma_power": sigma,
            "baked_norm_svd": svd_spectral_norm(baked),
            "degenerate": state.degenerate,
        })
    return report


def set_submodel_aggregation(submodel: NetView, mode: str):
    for block in submodel.blocks:
        if isinstance(block, ResidualBlock):
            block.aggregation = mode


# -- transfer configuration --------------------------------------------------

@dataclass
class TransferConfig:
    mode: str = "vanilla"            # vanilla | neft | lwf
    k: int = 1
    beta: float = 1.0                # neft only
    lambda_d: float = 0.0            # lwf only
    bn_policy: BnPolicy = field(default_factory=BnPolicy)
    reinit_head: Optional[bool] = None   # None: reinit only on class-count change
    spectral_iters: int = 1

    def validate(self, depth: int):
        if self.mode not in ("vanilla", "neft", "lwf"):
            raise ValueError(f"transfer mode must be vanilla|neft|lwf, got {self.mode!r}")
        if self.mode == "neft" and not 0.0 < self.beta <= 1.0:
            raise ValueError(f"beta must be in (0, 1], got {self.beta}")
        if self.mode == "lwf":
            if self.lambda_d < 0:
                raise ValueError(f"lambda_d must be >= 0, got {self.lambda_d}")
            if self.k != depth:
                raise ValueError(f"lwf fine-tunes all layers: k must equal {depth}, got {self.k}")
        if not 1 <= self.k <= depth:
            raise ShapeError(f"k must be in 1..{depth}, got {self.k}")
        self.bn_policy.validate()


def _prepare_head(net: Network, classes: int, reinit: Optional[bool], seed: int):
    """Reinitialize (and if needed resize) the final dense layer.

    reinit=None reinitializes only when the class count changes; False
    forbids it, raising on a class-count mismatch.
    """
    head = net.last_dense()
    if head.out_dim != classes:
        if reinit is False:
            raise ShapeError(
                f"target classes {classes} != source head {head.out_dim}; head reinit is disabled"
            )
        reinit = True
    if not reinit:
        return
    fresh = Dense(head.in_dim, classes, rng=RngState(seed, "head"))
    for block in net.blocks:
        if isinstance(block, ResidualBlock):
            continue
        for i, (label, layer) in enumerate(block.layers):
            if layer is head:
                block.layers[i] = (label, fresh)
                if net.arch:
                    net.arch["classes"] = classes
                return
    raise ShapeError("final dense layer not found in a plain block; cannot swap head")


@dataclass
class TransferResult:
    net: Network
    history: list
    spectral_report: list = field(default_factory=list)


def vanilla_finetune(source: Network, images: np.ndarray, labels: np.ndarray,
                     tcfg: TransferConfig, run: TrainConfig, classes: Optional[int] = None) -> TransferResult:
    """Freeze the first L-k blocks and retrain the rest with cross-entropy."""
    classes = classes or int(labels.max()) + 1
    tcfg.validate(source.depth)
    net = source.copy()
    _prepare_head(net, classes, tcfg.reinit_head, run.seed)
    split(net, tcfg.k)
    apply_bn_policy(net, tcfg.k, tcfg.bn_policy)

    def batch_loss(xb, yb):
        logits = net.forward(Tensor(xb), ForwardCtx(training=True))
        loss = softmax_cross_entropy(logits, yb)
        return loss, {"ce": loss.item(), "acc": float((logits.data.argmax(axis=1) == yb).mean())}

    history = _fit(net, images, labels, run, batch_loss, clean_pass=False)
    return TransferResult(net=net, history=history)


def neft_finetune(source: Network, images: np.ndarray, labels: np.ndarray,
                  tcfg: TransferConfig, run: TrainConfig, classes: Optional[int] = None) -> TransferResult:
    """Non-expansive fine-tuning: spectral-normalized sub-model weights.

    Every dense/conv weight in the sub-model passes through
    beta * W / sigma(W) on each forward; residual merges in the sub-model
    use the fixed 1/n convex mix; all BN affine parameters are frozen. At
    export the normalization is baked into the stored weights.
    """
    classes = classes or int(labels.max()) + 1
    tcfg.validate(source.depth)
    net = source.copy()
    _prepare_head(net, classes, tcfg.reinit_head, run.seed)
    _, submodel = split(net, tcfg.k)
    policy = BnPolicy(extractor_stats=tcfg.bn_policy.extractor_stats, submodel_affine="frozen")
    apply_bn_policy(net, tcfg.k, policy)
    set_submodel_aggregation(submodel, "convex")
    attach_spectral(submodel, tcfg.beta, RngState(run.seed, "spectral"), tcfg.spectral_iters)

    def batch_loss(xb, yb):
        logits = net.forward(Tensor(xb), ForwardCtx(training=True))
        loss = softmax_cross_entropy(logits, yb)
        return loss, {"ce": loss.item(), "acc": float((logits.data.argmax(axis=1) == yb).mean())}

    history = _fit(net, images, labels, run, batch_loss, clean_pass=False)
    report = bake_spectral(net, tcfg.beta)
    return TransferResult(net=net, history=history, spectral_report=report)


def lwf_finetune(source: Network, images: np.ndarray, labels: np.ndarray,
                 tcfg: TransferConfig, run: TrainConfig, classes: Optional[int] = None) -> TransferResult:
    """Full fine-tuning anchored to the source's penultimate features.

    Loss: CE(f(x; theta), y) + lambda_d * sum_batch ||f_pen(x; theta) -
    f_pen(x; theta_0)||_2 with theta_0 an immutable source snapshot.
    """
    classes = classes or int(labels.max()) + 1
    tcfg.validate(source.depth)
    snapshot = source.copy()
    for _, p in snapshot.parameters():
        p.requires_grad = False
    net = source.copy()
    _prepare_head(net, classes, tcfg.reinit_head, run.seed)
    split(net, tcfg.k)  # k == depth: empty extractor, everything trainable
    apply_bn_policy(net, tcfg.k, tcfg.bn_policy)
    lam = tcfg.lambda_d

    def batch_loss(xb, yb):
        if lam == 0:
            logits = net.forward(Tensor(xb), ForwardCtx(training=True))
            loss = softmax_cross_entropy(logits, yb)
            return loss, {"ce": loss.item(), "acc": float((logits.data.argmax(axis=1) == yb).mean())}
        logits, pen = net.forward_penultimate(Tensor(xb), ForwardCtx(training=True))
        ce = softmax_cross_entropy(logits, yb)
        # reference features in the same (batch-stat) BN mode, stats untouched
        ref_ctx = ForwardCtx(training=True, update_stats=False, update_spectral=False)
        _, ref_pen = snapshot.forward_penultimate(Tensor(xb), ref_ctx)
        n = xb.shape[0]
        diff = ops.sub(ops.reshape(pen, (n, -1)), ops.constant(ref_pen.data.reshape(n, -1), dtype=pen.data.dtype))
        penalty = ops.scale(ops.sum_all(ops.rows_l2norm(diff)), lam)
        loss = ops.add(ce, penalty)
        return loss, {
            "ce": ce.item(),
            "acc": float((logits.data.argmax(axis=1) == yb).mean()),
            "penalty": penalty.item(),
        }

    history = _fit(net, images, labels, run, batch_loss, clean_pass=False)
    return TransferResult(net=net, history=history)


def finetune(source: Network, images: np.ndarray, labels: np.ndarray,
             tcfg: TransferConfig, run: TrainConfig, classes: Optional[int] = None) -> TransferResult:
    fn = {"vanilla": vanilla_finetune, "neft": neft_finetune, "lwf": lwf_finetune}[tcfg.mode]
    return fn(source, images, labels, tcfg, run, classes)


# -- Lipschitz probes ---------------------------------------------------------

def empirical_lipschitz_probe(forward, input_shape, n_pairs: int, radius: float,
                              rng: RngState, batch: int = 256) -> float:
    """Max observed ||f(x) - f(x')||_2 / ||x - x'||_2 over random pairs.

    A lower-bound certificate on the Lipschitz constant, never an upper
    bound. Pairs are drawn with ||x - x'||_2 <= radius; zero-distance
    pairs are resampled.
    """
    if radius <= 0:
        raise ValueError(f"probe radius must be positive, got {radius}")
    worst = 0.0
    done = 0
    while done < n_pairs:
        b = min(batch, n_pairs - done)
        x = rng.normal((b,) + tuple(input_shape), dtype=np.float32)
        direction = rng.normal((b,) + tuple(input_shape), dtype=np.float64)
        flat = direction.reshape(b, -1)
        norms = np.linalg.norm(flat, axis=1)
        keep = norms > 1e-12
        if not np.all(keep):
            continue  # resample the whole batch on a degenerate draw
        r = rng.uniform(1e-3, 1.0, (b,), dtype=np.float64) * radius
        step = (flat / norms[:, None] * r[:, None]).reshape(direction.shape).astype(np.float32)
        x2 = x + step
        fa = forward(Tensor(x), EVAL).data.astype(np.float64)
        fb = forward(Tensor(x2), EVAL).data.astype(np.float64)
        dist_in = np.linalg.norm((x2 - x).reshape(b, -1).astype(np.float64), axis=1)
        good = dist_in > 0
        if not np.any(good):
            continue
        dist_out = np.linalg.norm((fb - fa).reshape(b, -1), axis=1)
        ratios = dist_out[good] / dist_in[good]
        worst = max(worst, float(ratios.max()))
        done += int(good.sum())
    return worst


def _materialize_linear(layer, input_shape) -> np.ndarray:
    """Dense matrix of a single linear layer (bias dropped) at a given input shape."""
    d = int(np.prod(input_shape))
    eye = np.eye(d, dtype=np.float32).reshape((d,) + tuple(input_shape))
    basis = np.concatenate([eye, np.zeros((1,) + tuple(input_shape), dtype=np.float32)])
    out = layer.forward(Tensor(basis), EVAL).data
    out = out.reshape(d + 1, -1).astype(np.float64)
    return (out[:d] - out[d]).T  # columns are images of basis vectors


def layer_bound(layer, input_shape) -> tuple[float, tuple]:
    """Upper bound on the layer's L2 Lipschitz constant and its output shape."""
    probe = np.zeros((1,) + tuple(input_shape), dtype=np.float32)
    out_shape = layer.forward(Tensor(probe), EVAL).data.shape[1:]
    if isinstance(layer, (Dense, Conv2D, BatchNorm)) or layer.tag in ("gap",):
        return svd_spectral_norm(_materialize_linear(layer, input_shape)), out_shape
    if isinstance(layer, MaxPool2) or layer.tag in ("relu", "flatten", "pool"):
        return 1.0, out_shape
    raise ShapeError(f"no Lipschitz bound rule for layer {type(layer).__name__}")


def _block_bound(block, input_shape) -> tuple[float, tuple]:
    if isinstance(block, ResidualBlock):
        main = 1.0
        shape = tuple(input_shape)
        for _, layer in block.main:
            b, shape = layer_bound(layer, shape)
            main *= b
        short = 1.0
        sshape = tuple(input_shape)
        for _, layer in block.shortcut:
            b, sshape = layer_bound(layer, sshape)
            short *= b
        if sshape != shape:
            raise ShapeError("residual paths disagree on output shape")
        total = main + short
        if block.aggregation == "convex":
            total /= 2.0
        return total, shape  # trailing relu is 1-Lipschitz
    bound = 1.0
    shape = tuple(input_shape)
    for _, layer in block.named_layers():
        b, shape = layer_bound(layer, shape)
        bound *= b
    return bound, shape


def per_layer_bound_product(view, input_shape) -> float:
    """Product of per-layer spectral bounds across the view (inference mode)."""
    total = 1.0
    shape = tuple(input_shape)
    for block in view.blocks:
        b, shape = _block_bound(block, shape)
        total *= b
    return total
