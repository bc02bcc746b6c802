"""White-box L-infinity attacks: FGSM and multi-step PGD.

Attack crafting runs the model in inference mode with parameters frozen,
so neither weights nor BN running statistics are ever touched. Gradients
are taken with respect to the input only.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Union

import numpy as np

from .errors import DataError, ShapeError
from .layers import EVAL, ForwardCtx, Network
from .ops import cross_entropy_per_example, softmax_cross_entropy
from .rng import RngState
from .tensor import Tape, Tensor, frozen_params, reverse_grad


@dataclass
class AttackConfig:
    """L-infinity budget and step schedule; inputs live in [0, 1]."""

    eps: float = 8 / 255
    alpha: float = 2 / 255
    steps: int = 7
    random_start: bool = True

    def __post_init__(self):
        if not 0.0 <= self.eps <= 1.0:
            raise ValueError(f"eps must be in [0, 1], got {self.eps}")
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        # eps == 0 is the legal degenerate no-attack budget; otherwise the
        # step size must not exceed the radius
        if self.eps > 0 and not 0.0 < self.alpha <= self.eps:
            raise ValueError(f"alpha must satisfy 0 < alpha <= eps, got alpha={self.alpha}, eps={self.eps}")


ModelLike = Union[Network, Callable[[Tensor, ForwardCtx], Tensor]]


def _forward_fn(model: ModelLike) -> Callable[[Tensor, ForwardCtx], Tensor]:
    if isinstance(model, Network):
        return model.forward
    return model


def _model_params(model: ModelLike):
    if isinstance(model, Network):
        return [p for _, p in model.parameters()]
    return list(getattr(model, "attack_frozen_params", []))


def project_linf(delta: np.ndarray, x: np.ndarray, cfg: AttackConfig) -> np.ndarray:
    """Clamp a perturbation to the eps-ball and the [0, 1] image box."""
    if delta.shape != x.shape:
        raise ShapeError(f"delta shape {delta.shape} != input shape {x.shape}")
    d = np.clip(delta, -cfg.eps, cfg.eps)
    return np.clip(d, -x, 1.0 - x)


def input_gradient(model: ModelLike, x: np.ndarray, y: np.ndarray, bn_mode: str = "eval") -> np.ndarray:
    """d(sum of per-example CE)/dx with parameters frozen, BN per `bn_mode`."""
    fwd = _forward_fn(model)
    ctx = EVAL if bn_mode == "eval" else ForwardCtx(training=True, update_stats=False, update_spectral=False)
    xt = Tensor(x, requires_grad=True, name="attack_input")
    with frozen_params(_model_params(model)):
        with Tape() as tape:
            logits = fwd(xt, ctx)
            loss = softmax_cross_entropy(logits, y, reduction="sum")
        reverse_grad(tape, loss)
    return xt.grad


def pgd(model: ModelLike, x: np.ndarray, y: np.ndarray, cfg: AttackConfig,
        rng: RngState | None = None, bn_mode: str = "eval") -> np.ndarray:
    """N-step projected gradient ascent on the cross-entropy.

    delta^{i+1} = project(delta^i + alpha * sign(grad)), starting from a
    uniform draw in the eps-ball when random_start is set (requires an
    RngState), else zero. Deterministic given the RNG stream.
    """
    x = np.asarray(x)
    if cfg.random_start:
        if rng is None:
            raise ValueError("random_start PGD requires an RngState")
        delta = rng.uniform(-cfg.eps, cfg.eps, x.shape, dtype=x.dtype)
    else:
        delta = np.zeros_like(x)
    delta = project_linf(delta, x, cfg)
    step = x.dtype.type(cfg.alpha)
    for _ in range(cfg.steps):
        g = input_gradient(model, x + delta, y, bn_mode=bn_mode)
        delta = project_linf(delta + step * np.sign(g), x, cfg)
    return np.clip(x + delta, 0.0, 1.0)


def fgsm(model: ModelLike, x: np.ndarray, y: np.ndarray, cfg: AttackConfig,
         bn_mode: str = "eval") -> np.ndarray:
    """Single-step sign attack: the steps=1, alpha=eps, no-random-start PGD."""
    one_step = AttackConfig(eps=cfg.eps, alpha=cfg.eps if cfg.eps > 0 else cfg.alpha,
                            steps=1, random_start=False)
    return pgd(model, x, y, one_step, rng=None, bn_mode=bn_mode)


def predict(model: ModelLike, x: np.ndarray, ctx: ForwardCtx = EVAL) -> np.ndarray:
    return _forward_fn(model)(Tensor(x), ctx).data


@dataclass
class RobustnessReport:
    clean_acc: float
    robust_acc: float
    n: int
    clean_loss: float
    adv_loss: float


def robust_accuracy(model: ModelLike, images: np.ndarray, labels: np.ndarray,
                    cfg: AttackConfig, rng: RngState | None = None,
                    batch_size: int = 256) -> RobustnessReport:
    """Fraction of examples still classified correctly after a PGD attack.

    Clean accuracy is reported alongside; attacks are independent per
    example, so batching does not change the result.
    """
    n = len(labels)
    if n == 0:
        raise DataError("robust_accuracy on an empty dataset")
    clean_ok = rob_ok = 0
    closs = aloss = 0.0
    for lo in range(0, n, batch_size):
        xb, yb = images[lo : lo + batch_size], labels[lo : lo + batch_size]
        logits = predict(model, xb)
        clean_ok += int((logits.argmax(axis=1) == yb).sum())
        closs += float(cross_entropy_per_example(logits, yb).sum())
        x_adv = pgd(model, xb, yb, cfg, rng=rng)
        logits_adv = predict(model, x_adv)
        rob_ok += int((logits_adv.argmax(axis=1) == yb).sum())
        aloss += float(cross_entropy_per_example(logits_adv, yb).sum())
    return RobustnessReport(clean_acc=clean_ok / n, robust_acc=rob_ok / n, n=n,
                            clean_loss=closs / n, adv_loss=aloss / n)
