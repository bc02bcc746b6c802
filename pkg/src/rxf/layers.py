"""Layer zoo, block composition, and the extractor/sub-model split.

A Network is an ordered list of blocks. A block is the unit at which
fine-tuning freezes or retrains parameters: either a plain layer chain
(conv + BN + relu + pool, or flatten + dense + BN + relu) or a residual
block whose two paths are merged by a sum or a fixed 1/n convex
combination.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass
from typing import Callable, Iterator, Optional

import numpy as np

from . import ops
from .errors import ShapeError
from .rng import RngState
from .tensor import Tensor


@dataclass
class ForwardCtx:
    """Mode flags threaded through every forward pass."""

    training: bool = False
    update_stats: bool = True      # BN running-stat updates (training mode only)
    update_spectral: bool = True   # warm power-iteration step (training mode only)

    @classmethod
    def train(cls):
        return cls(training=True)

    @classmethod
    def eval(cls):
        return cls(training=False, update_stats=False, update_spectral=False)


EVAL = ForwardCtx.eval()


class Layer:
    tag = "layer"

    # optional hook set by fine-tuning strategies; maps the raw weight
    # tensor to the effective weight used in the forward pass
    weight_transform: Optional[Callable[[Tensor, ForwardCtx], Tensor]] = None

    def params(self) -> list[tuple[str, Tensor]]:
        return []

    def state(self) -> list[tuple[str, np.ndarray]]:
        """All persistent arrays: parameters plus non-trainable statistics."""
        return [(name, t.data) for name, t in self.params()]

    def forward(self, x: Tensor, ctx: ForwardCtx) -> Tensor:
        raise NotImplementedError


class Dense(Layer):
    tag = "fc"

    def __init__(self, in_dim: int, out_dim: int, rng: Optional[RngState] = None, dtype=np.float32):
        self.in_dim = in_dim
        self.out_dim = out_dim
        if rng is None:
            w = np.zeros((out_dim, in_dim), dtype=dtype)
        else:
            w = rng.normal((out_dim, in_dim), dtype=dtype) * np.sqrt(2.0 / in_dim).astype(dtype)
        self.W = Tensor(w, requires_grad=True)
        self.b = Tensor(np.zeros(out_dim, dtype=dtype), requires_grad=True)
        self.weight_transform = None

    def params(self):
        return [("W", self.W), ("b", self.b)]

    def forward(self, x, ctx):
        if x.data.ndim != 2 or x.data.shape[1] != self.in_dim:
            raise ShapeError(f"dense layer expects (N, {self.in_dim}), got {x.shape}")
        w = self.W if self.weight_transform is None else self.weight_transform(self.W, ctx)
        return ops.add(ops.matmul(x, ops.transpose2d(w)), self.b)


class Conv2D(Layer):
    tag = "conv"

    def __init__(self, c_in: int, c_out: int, k: int, stride: int = 1, pad: int = 0,
                 rng: Optional[RngState] = None, dtype=np.float32):
        if k < 1:
            raise ShapeError(f"kernel size must be >= 1, got {k}")
        self.c_in, self.c_out, self.k = c_in, c_out, k
        self.stride, self.pad = stride, pad
        fan_in = c_in * k * k
        if rng is None:
            w = np.zeros((c_out, c_in, k, k), dtype=dtype)
        else:
            w = rng.normal((c_out, c_in, k, k), dtype=dtype) * np.sqrt(2.0 / fan_in).astype(dtype)
        self.W = Tensor(w, requires_grad=True)
        self.b = Tensor(np.zeros(c_out, dtype=dtype), requires_grad=True)
        self.weight_transform = None

    def params(self):
        return [("W", self.W), ("b", self.b)]

    def forward(self, x, ctx):
        w = self.W if self.weight_transform is None else self.weight_transform(self.W, ctx)
        return ops.conv2d(x, w, self.b, stride=self.stride, pad=self.pad)


def conv_weight_as_matrix(layer: Conv2D) -> np.ndarray:
    """(C_out, K^2*C_in) matrix view sharing storage with the filter bank.

    Row r is filter r flattened channel-major, then kernel row, then
    kernel column. The inverse reshape restores the bank bit-exactly.
    """
    return layer.W.data.reshape(layer.c_out, -1)


class BatchNorm(Layer):
    tag = "bn"

    def __init__(self, dim: int, momentum: float = 0.1, eps: float = 1e-5, dtype=np.float32):
        if not 0.0 < momentum < 1.0:
            raise ValueError(f"momentum must be in (0, 1), got {momentum}")
        self.dim = dim
        self.momentum = momentum
        self.eps = eps
        self.gamma = Tensor(np.ones(dim, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(dim, dtype=dtype), requires_grad=True)
        self.running_mean = np.zeros(dim, dtype=dtype)
        self.running_var = np.ones(dim, dtype=dtype)
        self.stats_frozen = False

    def params(self):
        return [("gamma", self.gamma), ("beta", self.beta)]

    def state(self):
        return super().state() + [
            ("running_mean", self.running_mean),
            ("running_var", self.running_var),
        ]

    def forward(self, x, ctx):
        if ctx.training:
            out, batch_mean, batch_var = ops.batchnorm_train(x, self.gamma, self.beta, self.eps)
            if ctx.update_stats and not self.stats_frozen:
                m = self.running_mean.dtype.type(self.momentum)
                self.running_mean = (1 - m) * self.running_mean + m * batch_mean
                self.running_var = (1 - m) * self.running_var + m * batch_var
            return out
        return ops.batchnorm_eval(x, self.gamma, self.beta, self.running_mean, self.running_var, self.eps)


class ReLU(Layer):
    tag = "relu"

    def forward(self, x, ctx):
        return ops.relu(x)


class MaxPool2(Layer):
    tag = "pool"

    def forward(self, x, ctx):
        return ops.maxpool2(x)


class Flatten(Layer):
    tag = "flatten"

    def forward(self, x, ctx):
        return ops.reshape(x, (x.data.shape[0], -1))


class GlobalAvgPool(Layer):
    tag = "gap"

    def forward(self, x, ctx):
        if x.data.ndim != 4:
            raise ShapeError(f"global average pool expects NCHW, got {x.shape}")
        return ops.mean_axes(x, (2, 3))


def residual_aggregate(inputs: list[Tensor], mode: str = "sum") -> Tensor:
    """Merge residual-path outputs by summation or a fixed 1/n convex mix."""
    if len(inputs) < 2:
        raise ShapeError(f"residual aggregation needs >= 2 inputs, got {len(inputs)}")
    shape = inputs[0].data.shape
    for t in inputs[1:]:
        if t.data.shape != shape:
            raise ShapeError(f"residual aggregation shape mismatch: {shape} vs {t.data.shape}")
    acc = inputs[0]
    for t in inputs[1:]:
        acc = ops.add(acc, t)
    if mode == "convex":
        return ops.scale(acc, 1.0 / len(inputs))
    if mode == "sum":
        return acc
    raise ValueError(f"unknown aggregation mode {mode!r}")


def _label_layers(layers: list[Layer]) -> list[tuple[str, Layer]]:
    counts: dict[str, int] = {}
    out = []
    for layer in layers:
        i = counts.get(layer.tag, 0)
        counts[layer.tag] = i + 1
        out.append((f"{layer.tag}{i}", layer))
    return out


class Block:
    """A plain chain of layers; the unit of freezing during transfer."""

    def __init__(self, layers: list[Layer]):
        self.layers = _label_layers(layers)

    def forward(self, x: Tensor, ctx: ForwardCtx) -> Tensor:
        for _, layer in self.layers:
            x = layer.forward(x, ctx)
        return x

    def named_layers(self) -> Iterator[tuple[str, Layer]]:
        yield from self.layers

    def params(self) -> Iterator[tuple[str, Tensor]]:
        for label, layer in self.layers:
            for pname, p in layer.params():
                yield f"{label}.{pname}", p

    def state(self) -> Iterator[tuple[str, np.ndarray]]:
        for label, layer in self.layers:
            for sname, arr in layer.state():
                yield f"{label}.{sname}", arr


class ResidualBlock(Block):
    """Main path plus shortcut, merged by sum or a fixed 1/n convex mix.

    The convex weights are exactly 1/n and are not trainable.
    """

    def __init__(self, main: list[Layer], shortcut: Optional[list[Layer]] = None, aggregation: str = "sum"):
        self.main = _label_layers(main)
        self.shortcut = _label_layers(shortcut or [])
        self.aggregation = aggregation
        self.layers = [(f"main.{l}", lay) for l, lay in self.main] + [
            (f"short.{l}", lay) for l, lay in self.shortcut
        ]

    def forward(self, x, ctx):
        h = x
        for _, layer in self.main:
            h = layer.forward(h, ctx)
        s = x
        for _, layer in self.shortcut:
            s = layer.forward(s, ctx)
        return ops.relu(residual_aggregate([h, s], self.aggregation))


class Network:
    """Ordered blocks with an extractor/sub-model split index."""

    def __init__(self, blocks: list[Block], arch: Optional[dict] = None):
        self.blocks = blocks
        self.arch = dict(arch) if arch else {}
        self.split_index: Optional[int] = None

    @property
    def depth(self) -> int:
        return len(self.blocks)

    # -- forward variants ------------------------------------------------
    def forward(self, x: Tensor, ctx: ForwardCtx = EVAL) -> Tensor:
        return self.forward_blocks(x, ctx, 0, self.depth)

    def forward_blocks(self, x: Tensor, ctx: ForwardCtx, lo: int, hi: int) -> Tensor:
        for block in self.blocks[lo:hi]:
            x = block.forward(x, ctx)
        return x

    def forward_tapped(self, x: Tensor, ctx: ForwardCtx, tap: int) -> tuple[Tensor, Tensor]:
        """Full forward that also returns the activation after block `tap`."""
        h = self.forward_blocks(x, ctx, 0, tap)
        out = self.forward_blocks(h, ctx, tap, self.depth)
        return out, h

    def forward_penultimate(self, x: Tensor, ctx: ForwardCtx) -> tuple[Tensor, Tensor]:
        """Forward returning (logits, input activation of the final dense layer)."""
        h = self.forward_blocks(x, ctx, 0, self.depth - 1)
        head = self.blocks[-1]
        last_dense = None
        for i, (_, layer) in enumerate(head.layers):
            if isinstance(layer, Dense):
                last_dense = i
        if last_dense is None:
            raise ShapeError("network head has no dense layer; penultimate tap undefined")
        for _, layer in head.layers[:last_dense]:
            h = layer.forward(h, ctx)
        penult = h
        for _, layer in head.layers[last_dense:]:
            h = layer.forward(h, ctx)
        return h, penult

    # -- parameter access -------------------------------------------------
    def parameters(self) -> list[tuple[str, Tensor]]:
        out = []
        for bi, block in enumerate(self.blocks):
            for name, p in block.params():
                out.append((f"b{bi + 1}.{name}", p))
        return out

    def state_arrays(self) -> list[tuple[str, np.ndarray]]:
        out = []
        for bi, block in enumerate(self.blocks):
            for name, arr in block.state():
                out.append((f"b{bi + 1}.{name}", arr))
        return out

    def named_layers(self) -> Iterator[tuple[str, Layer]]:
        for bi, block in enumerate(self.blocks):
            for label, layer in block.named_layers():
                yield f"b{bi + 1}.{label}", layer

    def bn_layers(self) -> list[tuple[str, BatchNorm, int]]:
        out = []
        for bi, block in enumerate(self.blocks):
            for label, layer in block.named_layers():
                if isinstance(layer, BatchNorm):
                    out.append((f"b{bi + 1}.{label}", layer, bi))
        return out

    def zero_grad(self):
        for _, p in self.parameters():
            p.grad = None

    def copy(self) -> "Network":
        """Deep copy with grads and fine-tuning hooks stripped."""
        hooks = []
        for _, layer in self.named_layers():
            hooks.append(getattr(layer, "weight_transform", None))
            layer.weight_transform = None
        try:
            dup = copy.deepcopy(self)
        finally:
            for (_, layer), h in zip(self.named_layers(), hooks):
                layer.weight_transform = h
        dup.zero_grad()
        return dup

    def last_dense(self) -> Dense:
        for _, layer in reversed(list(self.named_layers())):
            if isinstance(layer, Dense):
                return layer
        raise ShapeError("network has no dense layer")


class NetView:
    """A contiguous block range sharing parameters with the full network."""

    def __init__(self, net: Network, lo: int, hi: int):
        self.net = net
        self.lo, self.hi = lo, hi

    @property
    def blocks(self):
        return self.net.blocks[self.lo : self.hi]

    @property
    def depth(self):
        return self.hi - self.lo

    def forward(self, x: Tensor, ctx: ForwardCtx = EVAL) -> Tensor:
        return self.net.forward_blocks(x, ctx, self.lo, self.hi)

    def parameters(self) -> list[tuple[str, Tensor]]:
        out = []
        for bi in range(self.lo, self.hi):
            for name, p in self.net.blocks[bi].params():
                out.append((f"b{bi + 1}.{name}", p))
        return out

    def named_layers(self):
        for bi in range(self.lo, self.hi):
            for label, layer in self.net.blocks[bi].named_layers():
                yield f"b{bi + 1}.{label}", layer


def split(net: Network, k: int) -> tuple[NetView, NetView]:
    """Split into a frozen extractor (first L-k blocks) and a trainable sub-model.

    The views share the underlying parameters; extractor parameters are
    marked non-trainable.
    """
    L = net.depth
    if not isinstance(k, (int, np.integer)) or not 1 <= k <= L:
        raise ShapeError(f"fine-tuned block count k must be in 1..{L}, got {k}")
    k = int(k)
    idx = L - k
    net.split_index = idx
    extractor = NetView(net, 0, idx)
    submodel = NetView(net, idx, L)
    for _, p in extractor.parameters():
        p.requires_grad = False
    return extractor, submodel


# -- architecture families ------------------------------------------------

def _stage_channels(width: int, n: int) -> list[int]:
    """Channel plan 8w, 16w, 32w spread over n residual positions."""
    base = [8 * width, 16 * width, 32 * width]
    stages = min(3, n)
    per = [n // stages + (1 if i < n % stages else 0) for i in range(stages)]
    out = []
    for ch, cnt in zip(base, per):
        out.extend([ch] * cnt)
    return out


def build_small_cnn(depth: int, width: int, classes: int, input_shape, rng: RngState) -> Network:
    c, h, w = input_shape
    n_conv = depth - 2
    if n_conv < 1:
        raise ShapeError(f"small-cnn depth must be >= 3, got {depth}")
    if h % (2**n_conv) or w % (2**n_conv):
        raise ShapeError(f"input {h}x{w} not divisible by 2^{n_conv} for pooling")
    blocks: list[Block] = []
    ch_in = c
    ch_out = 8 * width
    for _ in range(n_conv):
        blocks.append(Block([
            Conv2D(ch_in, ch_out, 3, stride=1, pad=1, rng=rng),
            BatchNorm(ch_out),
            ReLU(),
            MaxPool2(),
        ]))
        ch_in, ch_out = ch_out, ch_out * 2
    flat = ch_in * (h // 2**n_conv) * (w // 2**n_conv)
    hidden = 64 * width
    blocks.append(Block([Flatten(), Dense(flat, hidden, rng=rng), BatchNorm(hidden), ReLU()]))
    blocks.append(Block([Dense(hidden, classes, rng=rng)]))
    return Network(blocks)


def build_mini_resnet(depth: int, width: int, classes: int, input_shape, rng: RngState) -> Network:
    c, h, w = input_shape
    n_res = depth - 2
    if n_res < 1:
        raise ShapeError(f"mini-resnet depth must be >= 3, got {depth}")
    plan = _stage_channels(width, n_res)
    blocks: list[Block] = [Block([Conv2D(c, plan[0], 3, stride=1, pad=1, rng=rng), BatchNorm(plan[0]), ReLU()])]
    ch = plan[0]
    for ch_out in plan:
        stride = 2 if ch_out != ch else 1
        main = [
            Conv2D(ch, ch_out, 3, stride=stride, pad=1, rng=rng),
            BatchNorm(ch_out),
            ReLU(),
            Conv2D(ch_out, ch_out, 3, stride=1, pad=1, rng=rng),
            BatchNorm(ch_out),
        ]
        shortcut = None
        if stride != 1 or ch_out != ch:
            shortcut = [Conv2D(ch, ch_out, 1, stride=stride, pad=0, rng=rng), BatchNorm(ch_out)]
        blocks.append(ResidualBlock(main, shortcut, aggregation="sum"))
        ch = ch_out
    blocks.append(Block([GlobalAvgPool(), Dense(ch, classes, rng=rng)]))
    return Network(blocks)


def build_mlp(depth: int, width: int, classes: int, input_shape, rng: RngState) -> Network:
    """Dense-only family for flat inputs (blob data); depth counts blocks."""
    if depth < 2:
        raise ShapeError(f"mlp depth must be >= 2, got {depth}")
    flat = int(np.prod(input_shape))
    hidden = 32 * width
    blocks: list[Block] = [Block([Flatten(), Dense(flat, hidden, rng=rng), BatchNorm(hidden), ReLU()])]
    for _ in range(depth - 2):
        blocks.append(Block([Dense(hidden, hidden, rng=rng), BatchNorm(hidden), ReLU()]))
    blocks.append(Block([Dense(hidden, classes, rng=rng)]))
    return Network(blocks)


FAMILIES = {
    "small-cnn": build_small_cnn,
    "mini-resnet": build_mini_resnet,
    "mlp": build_mlp,
}

DEFAULT_DEPTH = {"small-cnn": 4, "mini-resnet": 8, "mlp": 3}


def build_network(arch: dict, seed: int) -> Network:
    """Construct an initialized network from an architecture descriptor.

    Descriptor keys: family, depth, width, classes, input_shape.
    Initialization is deterministic in the seed.
    """
    family = arch.get("family")
    if family not in FAMILIES:
        raise ShapeError(f"unknown architecture family {family!r}; known: {sorted(FAMILIES)}")
    depth = int(arch.get("depth", DEFAULT_DEPTH[family]))
    width = int(arch.get("width", 1))
    classes = int(arch["classes"])
    input_shape = tuple(arch["input_shape"])
    if len(input_shape) != 3:
        raise ShapeError(f"input_shape must be (C, H, W), got {input_shape}")
    rng = RngState(seed, "init")
    net = FAMILIES[family](depth, width, classes, input_shape, rng)
    net.arch = {
        "family": family,
        "depth": depth,
        "width": width,
        "classes": classes,
        "input_shape": list(input_shape),
    }
    # sanity: built head must expose a dense layer for penultimate taps
    net.last_dense()
    return net
