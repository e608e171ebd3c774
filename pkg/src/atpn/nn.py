"""Minimal module system: parameter containers with train/infer modes and freezing."""

from __future__ import annotations

from collections import OrderedDict
from typing import Iterator

import numpy as np

from . import tensor as T
from .conv import batch_norm, conv2d, conv_transpose2d
from .tensor import Parameter, Tensor


class Module:
    def __init__(self):
        self._params: "OrderedDict[str, Parameter]" = OrderedDict()
        self._buffers: "OrderedDict[str, np.ndarray]" = OrderedDict()
        self._children: "OrderedDict[str, Module]" = OrderedDict()
        self.training = True

    def __setattr__(self, name, value):
        if isinstance(value, Parameter):
            self.__dict__.setdefault("_params", OrderedDict())[name] = value
        elif isinstance(value, Module):
            self.__dict__.setdefault("_children", OrderedDict())[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name: str, value: np.ndarray) -> None:
        self._buffers[name] = value
        object.__setattr__(self, name, value)

    def add_module(self, name: str, module: "Module") -> "Module":
        setattr(self, name, module)
        return module

    # -- traversal --------------------------------------------------------
    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for cname, child in self._children.items():
            yield from child.named_parameters(prefix + cname + ".")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, b in self._buffers.items():
            yield prefix + name, b
        for cname, child in self._children.items():
            yield from child.named_buffers(prefix + cname + ".")

    def modules(self) -> Iterator["Module"]:
        yield self
        for child in self._children.values():
            yield from child.modules()

    # -- state ------------------------------------------------------------
    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def freeze(self, frozen: bool = True) -> "Module":
        for p in self.parameters():
            p.frozen = frozen
        return self

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def astype(self, dtype) -> "Module":
        """Cast parameters and buffers in place (used for float64 gradient checks)."""
        for m in self.modules():
            for name, p in m._params.items():
                p.data = p.data.astype(dtype)
                p.grad = np.zeros_like(p.data)
            for name, b in list(m._buffers.items()):
                m.register_buffer(name, b.astype(dtype))
        return self

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        state: "OrderedDict[str, np.ndarray]" = OrderedDict()
        for name, p in self.named_parameters():
            state[name] = p.data
        for name, b in self.named_buffers():
            state[name] = b
        return state

    def load_state_dict(self, state: dict) -> None:
        own = self.state_dict()
        missing = set(own) - set(state)
        extra = set(state) - set(own)
        if missing or extra:
            raise KeyError(f"state mismatch: missing={sorted(missing)}, unexpected={sorted(extra)}")
        for name, p in self.named_parameters():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {p.shape}")
            p.data = arr.astype(p.dtype).copy()
            p.grad = np.zeros_like(p.data)
        for m_prefix, m in self._iter_named_modules():
            for bname, b in list(m._buffers.items()):
                arr = np.asarray(state[m_prefix + bname])
                if arr.shape != b.shape:
                    raise ValueError(f"{m_prefix + bname}: shape {arr.shape} != {b.shape}")
                m.register_buffer(bname, arr.astype(b.dtype).copy())

    def _iter_named_modules(self, prefix: str = ""):
        yield prefix, self
        for cname, child in self._children.items():
            yield from child._iter_named_modules(prefix + cname + ".")

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError


class Sequential(Module):
    def __init__(self, *modules: Module):
        super().__init__()
        for i, m in enumerate(modules):
            self.add_module(str(i), m)

    def __iter__(self):
        return iter(self._children.values())

    def __len__(self):
        return len(self._children)

    def __getitem__(self, i):
        return list(self._children.values())[i]

    def forward(self, x):
        for m in self._children.values():
            x = m(x)
        return x


def _rng(rng):
    return rng if rng is not None else np.random.default_rng(0)


class Conv2d(Module):
    def __init__(self, cin, cout, kernel, stride=1, groups=1, bias=True, padding="same", rng=None):
        super().__init__()
        self.cin, self.cout, self.kernel = cin, cout, kernel
        self.stride, self.groups, self.padding = stride, groups, padding
        fan_in = (cin // groups) * kernel * kernel
        std = np.sqrt(2.0 / fan_in)
        self.weight = Parameter(_rng(rng).normal(0, std, (cout, cin // groups, kernel, kernel)))
        self.bias = Parameter(np.zeros(cout), kind="bias") if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, self.stride, self.padding, self.groups)


class ConvTranspose2d(Module):
    def __init__(self, cin, cout, kernel=2, stride=2, bias=True, rng=None):
        super().__init__()
        self.stride = stride
        std = np.sqrt(2.0 / (cin * kernel * kernel / (stride * stride)))
        self.weight = Parameter(_rng(rng).normal(0, std, (cin, cout, kernel, kernel)))
        self.bias = Parameter(np.zeros(cout), kind="bias") if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return conv_transpose2d(x, self.weight, self.bias, self.stride)


class BatchNorm2d(Module):
    def __init__(self, channels, momentum=0.1, eps=1e-5):
        super().__init__()
        self.momentum, self.eps = momentum, eps
        self.gamma = Parameter(np.ones(channels), kind="norm")
        self.beta = Parameter(np.zeros(channels), kind="norm")
        self.register_buffer("running_mean", np.zeros(channels, dtype=np.float32))
        self.register_buffer("running_var", np.ones(channels, dtype=np.float32))

    def forward(self, x: Tensor) -> Tensor:
        training = self.training and not self.gamma.frozen
        return batch_norm(
            x, self.gamma, self.beta, self.running_mean, self.running_var,
            training, self.momentum, self.eps,
        )


class Dense(Module):
    def __init__(self, fin, fout, bias=True, rng=None, std=None):
        super().__init__()
        std = np.sqrt(1.0 / fin) if std is None else std
        self.weight = Parameter(_rng(rng).normal(0, std, (fout, fin)))
        self.bias = Parameter(np.zeros(fout), kind="bias") if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return T.dense(x, self.weight, self.bias)


class Activation(Module):
    def __init__(self, kind: str):
        super().__init__()
        self.kind = kind

    def forward(self, x: Tensor) -> Tensor:
        return T.activation(self.kind, x)


class ConvBNAct(Module):
    def __init__(self, cin, cout, kernel, stride=1, groups=1, act="swish", rng=None):
        super().__init__()
        self.conv = Conv2d(cin, cout, kernel, stride, groups, bias=False, rng=rng)
        self.bn = BatchNorm2d(cout)
        self.act = act

    def forward(self, x: Tensor) -> Tensor:
        return T.activation(self.act, self.bn(self.conv(x)))
