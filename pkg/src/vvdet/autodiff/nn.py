"""Layers built on the autodiff ops: Linear, BatchNorm1d and MLP blocks."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from vvdet.autodiff import ops
from vvdet.autodiff.value import ShapeError, Value


class Parameter(Value):
    __slots__ = ()

    def __init__(self, data, name=None):
        super().__init__(data, requires_grad=True, name=name)


class Module:
    """Container with recursive parameter/buffer discovery in attribute order."""

    training = True
    _buffers = ()

    def _members(self, prefix=""):
        for key, val in vars(self).items():
            if key in self._buffers:
                yield "buffer", prefix + key, (self, key)
            else:
                yield from _walk(val, prefix + key)

    def named_parameters(self):
        return [(name, p) for kind, name, p in self._members() if kind == "param"]

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_buffers(self):
        return [(name, getattr(*obj)) for kind, name, obj in self._members() if kind == "buffer"]

    def modules(self):
        yield self
        for val in vars(self).values():
            for m in _submodules(val):
                yield from m.modules()

    def train(self, mode=True):
        for m in self.modules():
            m.training = mode
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def state_dict(self):
        state = {}
        for kind, name, obj in self._members():
            state[name] = (obj.data if kind == "param" else getattr(*obj)).copy()
        return state

    def load_state_dict(self, state):
        members = list(self._members())
        missing = {name for _, name, _ in members} - set(state)
        if missing:
            raise KeyError(f"state is missing entries: {sorted(missing)}")
        for kind, name, obj in members:
            arr = np.array(state[name], dtype=np.float64)
            current = obj.data if kind == "param" else getattr(*obj)
            if arr.shape != current.shape:
                raise ShapeError("load_state_dict", current.shape, arr.shape, detail=name)
            if kind == "param":
                obj.data = arr
            else:
                setattr(obj[0], obj[1], arr)


def _walk(val, name):
    if isinstance(val, Parameter):
        yield "param", name, val
    elif isinstance(val, Module):
        yield from val._members(name + ".")
    elif isinstance(val, (list, tuple, dict)):
        items = val.items() if isinstance(val, dict) else enumerate(val)
        for i, v in items:
            yield from _walk(v, f"{name}.{i}")


def _submodules(val):
    if isinstance(val, Module):
        yield val
    elif isinstance(val, (list, tuple, dict)):
        for v in (val.values() if isinstance(val, dict) else val):
            yield from _submodules(v)


class Linear(Module):
    def __init__(self, in_dim, out_dim, rng, bias=True):
        bound = np.sqrt(6.0 / in_dim) / np.sqrt(2.0)  # He-uniform for ReLU nets
        self.weight = Parameter(rng.uniform(-bound, bound, size=(in_dim, out_dim)))
        self.bias = Parameter(np.zeros(out_dim)) if bias else None

    def __call__(self, x):
        if x.shape[-1] != self.weight.shape[0]:
            raise ShapeError("linear", x.shape, self.weight.shape)
        y = ops.matmul(x, self.weight)
        return y if self.bias is None else ops.add(y, self.bias)


class BatchNorm1d(Module):
    _buffers = ("running_mean", "running_var")

    def __init__(self, dim, momentum=0.1, eps=1e-5):
        self.gamma = Parameter(np.ones(dim))
        self.beta = Parameter(np.zeros(dim))
        self.running_mean = np.zeros(dim)
        self.running_var = np.ones(dim)
        self.momentum = momentum
        self.eps = eps

    def __call__(self, x):
        if self.training and x.shape[0] > 1:
            out, mu, var = ops.batch_norm(x, self.gamma, self.beta, self.eps)
            m = self.momentum
            n = x.shape[0]
            self.running_mean = (1 - m) * self.running_mean + m * mu
            self.running_var = (1 - m) * self.running_var + m * var * n / (n - 1)
            return out
        inv = 1.0 / np.sqrt(self.running_var + self.eps)
        y = ops.mul(ops.add(x, Value(-self.running_mean)), Value(inv))
        return ops.add(ops.mul(y, self.gamma), self.beta)


@dataclass
class MlpSpec:
    widths: list = field(default_factory=lambda: [64, 64])
    activation: str = "relu"
    norm: str = "none"

    def __post_init__(self):
        if not self.widths or any(int(w) <= 0 for w in self.widths):
            raise ValueError(f"MLP widths must be a non-empty list of positive ints, got {self.widths}")
        if self.activation != "relu":
            raise ValueError(f"unsupported activation {self.activation!r}")
        if self.norm not in ("none", "batch"):
            raise ValueError(f"unsupported normalization {self.norm!r}")


class MLP(Module):
    """Linear -> [BatchNorm] -> ReLU per layer; ``final_act=False`` leaves the last layer linear."""

    def __init__(self, in_dim, spec: MlpSpec, rng, final_act=True):
        self.layers = []
        self.norms = []
        dims = [in_dim] + [int(w) for w in spec.widths]
        for a, b in zip(dims[:-1], dims[1:]):
            self.layers.append(Linear(a, b, rng))
            self.norms.append(BatchNorm1d(b) if spec.norm == "batch" else None)
        self.final_act = final_act
        self.out_dim = dims[-1]

    def __call__(self, x):
        last = len(self.layers) - 1
        for i, (lin, bn) in enumerate(zip(self.layers, self.norms)):
            x = lin(x)
            if i < last or self.final_act:
                if bn is not None:
                    x = bn(x)
                x = ops.relu(x)
        return x
