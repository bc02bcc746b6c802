"""Dense tensors with tape-based reverse-mode differentiation.

Design constraints:
  * storage is float32 by default, float64 available for verification;
    reductions always accumulate in float64 regardless of storage dtype
  * every primitive checks its output for NaN/Inf and fails fast naming
    the producing operation
  * a Tape records primitives in execution order and is single-use:
    backward replays the record in reverse, accumulating gradients
    additively across fan-out
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .errors import GradError, NumericsError, ShapeError, TapeError

FLOAT_DTYPES = (np.float32, np.float64)


def _as_array(data, dtype=None) -> np.ndarray:
    arr = np.asarray(data)
    if dtype is not None:
        arr = arr.astype(dtype, copy=False)
    elif arr.dtype not in FLOAT_DTYPES:
        arr = arr.astype(np.float32)
    return arr


class Tensor:
    """N-dimensional array with an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None, dtype=None):
        self.data = _as_array(data, dtype)
        if not np.all(np.isfinite(self.data)):
            raise NumericsError(f"non-finite values in tensor {name or '<unnamed>'}")
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self.name = name

    @classmethod
    def _wrap(cls, data: np.ndarray) -> "Tensor":
        """Internal fast path for op outputs already checked by the op."""
        t = cls.__new__(cls)
        t.data = data
        t.grad = None
        t.requires_grad = False
        t.name = None
        return t

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def zero_grad(self):
        self.grad = None

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, name=self.name)

    def __repr__(self):
        nm = f", name={self.name!r}" if self.name else ""
        rq = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={tuple(self.shape)}, dtype={self.data.dtype}{rq}{nm})"


def accumulate_grad(t: Tensor, g: np.ndarray):
    """Additive fan-out accumulation into the tensor's grad slot."""
    g = g.astype(t.data.dtype, copy=False)
    if g.shape != t.data.shape:
        raise ShapeError(f"gradient shape {g.shape} != tensor shape {t.data.shape}")
    if t.grad is None:
        t.grad = g.copy()
    else:
        t.grad = t.grad + g


class TapeNode:
    __slots__ = ("op", "out", "backward")

    def __init__(self, op: str, out: Tensor, backward: Callable[[np.ndarray], None]):
        self.op = op
        self.out = out
        self.backward = backward


class Tape:
    """Ordered record of executed primitives; single-use per backward pass."""

    def __init__(self):
        self.nodes: list[TapeNode] = []
        self.consumed = False

    def __enter__(self):
        _STATE.stack.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        top = _STATE.stack.pop()
        if top is not self:
            raise TapeError("tape context exited out of order")
        return False

    def __len__(self):
        return len(self.nodes)


class _ThreadState(threading.local):
    def __init__(self):
        self.stack: list[Tape] = []


_STATE = _ThreadState()


def active_tape() -> Optional[Tape]:
    return _STATE.stack[-1] if _STATE.stack else None


def record(op: str, out: Tensor, inputs: Sequence[Tensor], backward: Callable[[np.ndarray], None]):
    """Attach a backward closure to the active tape if any input needs grad."""
    tape = active_tape()
    if tape is None:
        return
    if any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.nodes.append(TapeNode(op, out, backward))


def check_finite(arr: np.ndarray, op: str) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NumericsError(f"non-finite values produced by operation '{op}'")
    return arr


class frozen_params:
    """Temporarily clear requires_grad on the given tensors.

    Used by attack loops so backward computes only input gradients and
    never touches parameter grad slots.
    """

    def __init__(self, params: Iterable[Tensor]):
        self._params = [p for p in params]
        self._saved: list[bool] = []

    def __enter__(self):
        self._saved = [p.requires_grad for p in self._params]
        for p in self._params:
            p.requires_grad = False
        return self

    def __exit__(self, exc_type, exc, tb):
        for p, flag in zip(self._params, self._saved):
            p.requires_grad = flag
        return False


def reverse_grad(tape: Tape, loss: Tensor):
    """Replay the tape backward, filling grad slots of gradient-requiring tensors."""
    if tape.consumed:
        raise TapeError("tape already consumed by a previous backward pass")
    if loss.data.size != 1:
        raise TapeError(f"backward requires a scalar loss, got shape {loss.shape}")
    tape.consumed = True
    loss.grad = np.ones_like(loss.data)
    for node in reversed(tape.nodes):
        if node.out.grad is None:
            continue
        node.backward(node.out.grad)


def forward_eval(graph: Callable, inputs: Sequence[Tensor], tape: Optional[Tape] = None) -> Tensor:
    """Evaluate a composed primitive sequence on the inputs.

    Records onto `tape` when given; without a tape the evaluation is
    gradient-free.
    """
    if tape is not None:
        with tape:
            return graph(*inputs)
    return graph(*inputs)


class FiniteDiffReport:
    """Result of a central-difference gradient check."""

    def __init__(self):
        self.max_rel_error = 0.0
        self.n_checked = 0
        self.n_excluded = 0
        self.worst: Optional[tuple[str, int]] = None

    def __repr__(self):
        return (
            f"FiniteDiffReport(max_rel_error={self.max_rel_error:.3e}, "
            f"checked={self.n_checked}, excluded={self.n_excluded})"
        )


def finite_diff_check(
    graph: Callable,
    inputs: Sequence[Tensor],
    h: float = 1e-5,
    eps_div: float = 1e-6,
    kink_tol: float = 1e-2,
) -> FiniteDiffReport:
    """Compare analytic gradients against 64-bit central differences.

    Elements whose one-sided difference quotients disagree relative to
    their magnitude straddle a kink (relu/maxpool corner) and are
    reported as excluded rather than failed.
    """
    if h <= 0:
        raise ValueError("finite-difference step h must be positive")
    # 64-bit copies of every input; graph re-evaluated functionally.
    work = [Tensor(t.data.astype(np.float64), requires_grad=t.requires_grad) for t in inputs]
    tape = Tape()
    out = forward_eval(graph, work, tape)
    if out.data.size != 1:
        raise TapeError(f"finite_diff_check requires a scalar-valued graph, got {out.shape}")
    reverse_grad(tape, out)

    def eval_loss() -> float:
        return float(forward_eval(graph, work, None).data.reshape(()))

    report = FiniteDiffReport()
    for idx, t in enumerate(work):
        if not t.requires_grad:
            continue
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad
        flat = t.data.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            f_plus = eval_loss()
            flat[j] = orig - h
            f_minus = eval_loss()
            flat[j] = orig
            f_zero = eval_loss()
            d_plus = (f_plus - f_zero) / h
            d_minus = (f_zero - f_minus) / h
            # one-sided slopes disagreeing at O(1) => nondifferentiable point
            if abs(d_plus - d_minus) > kink_tol * max(1.0, abs(d_plus), abs(d_minus)):
                report.n_excluded += 1
                continue
            central = (f_plus - f_minus) / (2.0 * h)
            ana = float(analytic.reshape(-1)[j])
            rel = abs(ana - central) / max(abs(ana), abs(central), eps_div)
            report.n_checked += 1
            if rel > report.max_rel_error:
                report.max_rel_error = rel
                report.worst = (t.name or f"input{idx}", j)
    return report


def grads_of(tape: Tape, loss: Tensor, wrt: Sequence[Tensor]) -> list[np.ndarray]:
    """Convenience: backward then collect grads for `wrt` tensors."""
    reverse_grad(tape, loss)
    out = []
    for t in wrt:
        if t.grad is None:
            raise GradError(f"no gradient reached tensor {t.name or '<unnamed>'}")
        out.append(t.grad)
    return out
