"""Module tree with named parameters, buffers, and the model's layer zoo.

Parameter names are dotted attribute paths ("stem_conv.weight",
"layer1.block0.bn1.gamma"); attribute insertion order fixes the walk order,
which the checkpoint format and the optimizer rely on. All randomness comes
from the generator handed to each constructor.
"""

from __future__ import annotations

import math

import numpy as np

from cmoe import ops
from cmoe.errors import ShapeError
from cmoe.tensor import Tensor
from cmoe.tensor import flatten as t_flatten
from cmoe.tensor import matmul, mean, relu, reshape, softmax, transpose


def kaiming_uniform(rng: np.random.Generator, shape, fan_in: int, dtype=np.float32):
    """U(-sqrt(6/fan_in), sqrt(6/fan_in)), the ReLU-gain fan-in bound."""
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Module:
    def __init__(self):
        self.training = True
        self._buffer_names: list[str] = []

    def register_buffer(self, name: str, value: np.ndarray) -> None:
        setattr(self, name, value)
        self._buffer_names.append(name)

    def _children(self):
        for name, attr in vars(self).items():
            if isinstance(attr, Module):
                yield name, attr

    def named_parameters(self, prefix: str = ""):
        for name, attr in vars(self).items():
            if isinstance(attr, Tensor) and attr.requires_grad:
                yield prefix + name, attr
        for name, child in self._children():
            yield from child.named_parameters(prefix + name + ".")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = ""):
        for name in self._buffer_names:
            yield prefix + name, getattr(self, name)
        for name, child in self._children():
            yield from child.named_buffers(prefix + name + ".")

    def train(self, mode: bool = True):
        self.training = mode
        for _, child in self._children():
            child.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def to_dtype(self, dtype):
        """Convert parameters and float buffers in place (gradient checks)."""
        for _, p in self.named_parameters():
            p.data = p.data.astype(dtype)
        for name in self._buffer_names:
            buf = getattr(self, name)
            if buf.dtype.kind == "f":
                setattr(self, name, buf.astype(dtype))
        for _, child in self._children():
            child.to_dtype(dtype)
        return self

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class ModuleList(Module):
    def __init__(self, items=()):
        super().__init__()
        self._items = list(items)

    def _children(self):
        for i, m in enumerate(self._items):
            yield str(i), m

    def append(self, m: Module):
        self._items.append(m)

    def __iter__(self):
        return iter(self._items)

    def __len__(self):
        return len(self._items)

    def __getitem__(self, i):
        return self._items[i]


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator):
        super().__init__()
        self.in_features = in_features
        self.out_features = out_features
        self.weight = Tensor(
            kaiming_uniform(rng, (out_features, in_features), in_features),
            requires_grad=True,
        )
        self.bias = Tensor(np.zeros(out_features, dtype=np.float32), requires_grad=True)

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.in_features:
            raise ShapeError(f"linear expects {self.in_features} features, got {x.shape[-1]}")
        return matmul(x, transpose(self.weight, (1, 0))) + self.bias


class Conv2d(Module):
    def __init__(self, in_ch, out_ch, kernel, rng, stride=1, pad=0, bias=True):
        super().__init__()
        self.stride = stride
        self.pad = pad
        fan_in = in_ch * kernel * kernel
        self.weight = Tensor(
            kaiming_uniform(rng, (out_ch, in_ch, kernel, kernel), fan_in),
            requires_grad=True,
        )
        # convolutions feeding a BN layer drop the bias (BN's beta subsumes it)
        self.bias = Tensor(np.zeros(out_ch, dtype=np.float32), requires_grad=True) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias, stride=self.stride, pad=self.pad)


class _BatchNorm(Module):
    def __init__(self, num_features: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.momentum = momentum
        self.eps = eps
        self.gamma = Tensor(np.ones(num_features, dtype=np.float32), requires_grad=True)
        self.beta = Tensor(np.zeros(num_features, dtype=np.float32), requires_grad=True)
        self.register_buffer("running_mean", np.zeros(num_features, dtype=np.float32))
        self.register_buffer("running_var", np.ones(num_features, dtype=np.float32))

    def forward(self, x: Tensor) -> Tensor:
        return ops.batch_norm(
            x,
            self.gamma,
            self.beta,
            self.running_mean,
            self.running_var,
            training=self.training,
            momentum=self.momentum,
            eps=self.eps,
        )


class BatchNorm1d(_BatchNorm):
    pass


class BatchNorm2d(_BatchNorm):
    pass


class MaxPool2d(Module):
    def __init__(self, kernel: int, stride: int, pad: int = 0):
        super().__init__()
        self.kernel = kernel
        self.stride = stride
        self.pad = pad

    def forward(self, x: Tensor) -> Tensor:
        return ops.max_pool2d(x, self.kernel, self.stride, self.pad)


class AttentionPool(Module):
    """Multi-head self-attention over spatial tokens, then token averaging.

    [N, C, H, W] -> H*W tokens of width C -> one attention block (learned
    q/k/v/output projections, scaled dot product, softmax over tokens) ->
    mean over tokens -> [N, C].
    """

    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        super().__init__()
        if dim % heads != 0:
            raise ShapeError(f"attention dim {dim} not divisible by {heads} heads")
        self.dim = dim
        self.heads = heads
        self.q_proj = Linear(dim, dim, rng)
        self.k_proj = Linear(dim, dim, rng)
        self.v_proj = Linear(dim, dim, rng)
        self.out_proj = Linear(dim, dim, rng)

    def forward(self, x: Tensor) -> Tensor:
        n, c, h, w = x.shape
        if h * w == 0:
            raise ShapeError("attention pooling needs at least one spatial position")
        if c != self.dim:
            raise ShapeError(f"attention pooling expects {self.dim} channels, got {c}")
        t = h * w
        dh = c // self.heads
        tokens = transpose(reshape(x, (n, c, t)), (0, 2, 1))

        def split_heads(u):
            return transpose(reshape(u, (n, t, self.heads, dh)), (0, 2, 1, 3))

        q = split_heads(self.q_proj(tokens))
        k = split_heads(self.k_proj(tokens))
        v = split_heads(self.v_proj(tokens))
        scores = matmul(q, transpose(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(dh))
        attn = softmax(scores, axis=-1)
        ctx = transpose(matmul(attn, v), (0, 2, 1, 3))
        out = self.out_proj(reshape(ctx, (n, t, c)))
        return mean(out, axis=1)


__all__ = [
    "AttentionPool",
    "BatchNorm1d",
    "BatchNorm2d",
    "Conv2d",
    "Linear",
    "MaxPool2d",
    "Module",
    "ModuleList",
    "kaiming_uniform",
    "relu",
    "t_flatten",
]
