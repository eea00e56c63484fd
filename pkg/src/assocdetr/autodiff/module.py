"""Parameterized computation units with hierarchical parameter names."""
from __future__ import annotations

import math
from collections import OrderedDict

import numpy as np

from . import ops
from .tensor import Tensor


class Parameter(Tensor):
    __slots__ = ()

    def __init__(self, data):
        super().__init__(data, requires_grad=True)

    def __repr__(self):
        return f"Parameter(shape={self.shape})"


class Module:
    """Base class. Attributes that are Parameters, Modules or lists of
    Modules are discovered in assignment order."""

    def __init__(self):
        self.training = True

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):  # pragma: no cover - abstract
        raise NotImplementedError

    def children(self):
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)) and value and all(isinstance(v, Module) for v in value):
                for i, v in enumerate(value):
                    yield f"{name}.{i}", v

    def named_modules(self, prefix="", _seen=None):
        seen = set() if _seen is None else _seen
        if id(self) in seen:
            return
        seen.add(id(self))
        yield prefix, self
        for name, child in self.children():
            yield from child.named_modules(f"{prefix}.{name}" if prefix else name, seen)

    def _own_parameters(self):
        for name, value in vars(self).items():
            if isinstance(value, Parameter):
                yield name, value

    def named_parameters(self):
        """Unique parameters with dotted names; a shared object is listed once,
        under the first path that reaches it."""
        seen = set()
        for mprefix, mod in self.named_modules():
            for name, p in mod._own_parameters():
                if id(p) in seen:
                    continue
                seen.add(id(p))
                yield (f"{mprefix}.{name}" if mprefix else name), p

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_buffers(self):
        seen = set()
        for mprefix, mod in self.named_modules():
            for name, arr in getattr(mod, "_buffers", {}).items():
                if id(arr) in seen:
                    continue
                seen.add(id(arr))
                yield (f"{mprefix}.{name}" if mprefix else name), arr

    def train(self, mode: bool = True):
        for _, m in self.named_modules():
            m.training = mode
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def state_dict(self):
        state = OrderedDict()
        for name, p in self.named_parameters():
            state[name] = p.data.copy()
        for name, b in self.named_buffers():
            state[name] = b.copy()
        return state

    def load_state_dict(self, state, strict: bool = True):
        targets = dict(self.named_parameters())
        targets.update({n: b for n, b in self.named_buffers()})
        missing = [n for n in targets if n not in state]
        unexpected = [n for n in state if n not in targets]
        if strict and (missing or unexpected):
            raise KeyError(f"state mismatch; missing={missing[:5]} unexpected={unexpected[:5]}")
        for name, value in state.items():
            if name not in targets:
                continue
            dst = targets[name]
            arr = dst.data if isinstance(dst, Tensor) else dst
            if arr.shape != value.shape:
                raise ValueError(f"{name}: shape {value.shape} != {arr.shape}")
            arr[...] = value
        return self


def count_params(graph: Module, prefix: str = "") -> int:
    """Sum of extent products of unique parameters whose name starts with ``prefix``."""
    return int(sum(p.size for name, p in graph.named_parameters() if name.startswith(prefix)))


# ---------------------------------------------------------------------------
# common layers

def kaiming_normal(rng, shape, fan):
    return rng.standard_normal(shape) * math.sqrt(2.0 / fan)


class Conv2d(Module):
    def __init__(self, cin, cout, kernel, stride=1, padding=0, groups=1, bias=True, rng=None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.stride, self.padding, self.groups = stride, padding, groups
        fan_out = cout // groups * kernel * kernel
        self.weight = Parameter(kaiming_normal(rng, (cout, cin // groups, kernel, kernel), fan_out))
        self.bias = Parameter(np.zeros(cout)) if bias else None

    def forward(self, x):
        return ops.conv2d(x, self.weight, self.bias, self.stride, self.padding, self.groups)


class BatchNorm2d(Module):
    """Batch norm with running statistics; ``frozen`` forces eval statistics."""

    def __init__(self, channels, eps=1e-5, momentum=0.1):
        super().__init__()
        self.eps = eps
        self.frozen = False
        self.weight = Parameter(np.ones(channels))
        self.bias = Parameter(np.zeros(channels))
        self.stats = ops.RunningStats(channels, momentum)
        self._buffers = OrderedDict(running_mean=self.stats.mean, running_var=self.stats.var)

    def forward(self, x):
        mode = "train" if self.training and not self.frozen else "eval"
        return ops.normalize("batch", x, self.weight, self.bias, self.eps, mode, self.stats)


class LayerNorm(Module):
    """Normalizes over axis 1 (channels) at every position."""

    def __init__(self, channels, eps=1e-5):
        super().__init__()
        self.eps = eps
        self.weight = Parameter(np.ones(channels))
        self.bias = Parameter(np.zeros(channels))

    def forward(self, x):
        return ops.normalize("layer", x, self.weight, self.bias, self.eps)


class Linear(Module):
    def __init__(self, fin, fout, bias=True, rng=None, std=None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        if std is None:
            bound = 1.0 / math.sqrt(fin)
            w = rng.uniform(-bound, bound, (fout, fin))
        else:
            w = rng.standard_normal((fout, fin)) * std
        self.weight = Parameter(w)
        self.bias = Parameter(np.zeros(fout)) if bias else None

    def forward(self, x):
        return ops.linear(x, self.weight, self.bias)
