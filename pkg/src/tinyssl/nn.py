"""Minimal layer objects over :mod:`tinyssl.tensor` ops.

A Module's parameters are its Tensor attributes (in assignment order) and
those of its child Modules; running statistics are plain numpy buffers.
"""
import zlib

import numpy as np

from . import tensor as T


def substream(seed, name):
    """Generator keyed by (seed, name): adding a layer never shifts another's init."""
    return np.random.default_rng([seed, zlib.crc32(name.encode())])


def xavier_uniform(shape, rng, dtype=np.float32):
    receptive = int(np.prod(shape[2:])) if len(shape) > 2 else 1
    fan_in, fan_out = shape[1] * receptive, shape[0] * receptive
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Module:
    training = True

    def named_parameters(self, prefix=""):
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, T.Tensor):
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(name + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def named_buffers(self, prefix=""):
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, np.ndarray):
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_buffers(name + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_buffers(f"{name}.{i}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def init(self, seed, prefix="", dtype=np.float32):
        """(Re)initialise weights deterministically from ``seed``."""
        for name, p in self.named_parameters(prefix):
            leaf = name.rsplit(".", 1)[-1]
            if leaf == "gamma":
                p.data = np.ones(p.shape, dtype)
            elif leaf in ("beta", "bias"):
                p.data = np.zeros(p.shape, dtype)
            else:
                p.data = xavier_uniform(p.shape, substream(seed, name), dtype)
        for name, buf in self.named_buffers(prefix):
            buf[...] = 1.0 if name.endswith("running_var") else 0.0
        return self

    def state_dict(self):
        """Copies of all parameters and buffers, keyed by dotted name."""
        out = {name: p.data.copy() for name, p in self.named_parameters()}
        out.update((name, b.copy()) for name, b in self.named_buffers())
        return out

    def load_state_dict(self, state):
        params = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        missing = (set(params) | set(buffers)) - set(state)
        if missing:
            raise KeyError(f"state is missing {sorted(missing)[0]!r}")
        for name, arr in state.items():
            target = params[name].data if name in params else buffers.get(name)
            if target is None:
                raise KeyError(f"unexpected tensor {name!r}")
            if target.shape != arr.shape:
                raise ValueError(f"dim mismatch for {name!r}: expected {target.shape}, got {arr.shape}")
            target[...] = arr


def _param(shape):
    return T.Tensor(np.zeros(shape, np.float32), requires_grad=True)


class Conv2d(Module):
    def __init__(self, cin, cout, k=1, stride=1, depthwise=False):
        if depthwise and cin != cout:
            raise ValueError("depthwise conv needs cin == cout")
        self.weight = _param((cout, 1 if depthwise else cin, k, k))
        self.stride, self.pad, self.depthwise = stride, (k - 1) // 2, depthwise

    def __call__(self, x):
        return T.conv2d(x, self.weight, self.stride, self.pad, self.depthwise)


class BatchNorm(Module):
    def __init__(self, channels, momentum=0.1, eps=1e-5):
        self.gamma = _param((channels,))
        self.beta = _param((channels,))
        self.running_mean = np.zeros(channels, np.float32)
        self.running_var = np.ones(channels, np.float32)
        self.momentum, self.eps = momentum, eps

    def __call__(self, x, training):
        return T.batch_norm(x, self.gamma, self.beta, self.running_mean, self.running_var,
                            training, self.momentum, self.eps)


class Linear(Module):
    def __init__(self, fin, fout, bias=False):
        self.weight = _param((fout, fin))
        if bias:
            self.bias = _param((fout,))

    def __call__(self, x):
        y = T.linear(x, self.weight)
        if hasattr(self, "bias"):
            y = T.add(y, self.bias)
        return y


class ConvBN(Module):
    def __init__(self, cin, cout, k=1, stride=1, depthwise=False, act=True):
        self.conv = Conv2d(cin, cout, k, stride, depthwise)
        self.bn = BatchNorm(cout)
        self.act = act

    def __call__(self, x, training):
        y = self.bn(self.conv(x), training)
        return T.relu6(y) if self.act else y


class MLP(Module):
    """Bias-free Linear -> ReLU -> Linear."""

    def __init__(self, fin, hidden, fout):
        self.fc1 = Linear(fin, hidden)
        self.fc2 = Linear(hidden, fout)

    def __call__(self, x):
        return self.fc2(T.relu(self.fc1(x)))


def cast(module, dtype):
    """Convert every parameter and buffer of ``module`` to ``dtype`` in place."""
    for _, p in module.named_parameters():
        p.data = p.data.astype(dtype)
        p.grad = None
    _cast_buffers(module, dtype)
    return module


def _cast_buffers(module, dtype):
    for key, val in list(vars(module).items()):
        if isinstance(val, np.ndarray):
            setattr(module, key, val.astype(dtype))
        elif isinstance(val, Module):
            _cast_buffers(val, dtype)
        elif isinstance(val, (list, tuple)):
            for item in val:
                if isinstance(item, Module):
                    _cast_buffers(item, dtype)
