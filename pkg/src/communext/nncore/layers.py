"""Parameter-holding layers and a tiny module tree."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, batchnorm, conv2d, tconv2


class Module:
    training = True

    def children(self):
        for k, v in vars(self).items():
            if isinstance(v, Module):
                yield k, v
            elif isinstance(v, (list, tuple)):
                for i, m in enumerate(v):
                    if isinstance(m, Module):
                        yield f"{k}.{i}", m

    def named_parameters(self, prefix: str = ""):
        for k, v in vars(self).items():
            if isinstance(v, Tensor) and v.requires_grad:
                yield prefix + k, v
        for k, m in self.children():
            yield from m.named_parameters(f"{prefix}{k}.")

    def named_buffers(self, prefix: str = ""):
        for k, v in getattr(self, "buffers", {}).items():
            yield prefix + k, v
        for k, m in self.children():
            yield from m.named_buffers(f"{prefix}{k}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {k: p.data for k, p in self.named_parameters()}
        out.update(dict(self.named_buffers()))
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]):
        own = dict(self.named_parameters())
        bufs = dict(self.named_buffers())
        missing = (set(own) | set(bufs)) - set(state)
        if missing:
            raise KeyError(f"checkpoint lacks {sorted(missing)}")
        for k, p in own.items():
            if state[k].shape != p.data.shape:
                raise ValueError(f"{k}: shape {state[k].shape} != {p.data.shape}")
            p.data = np.array(state[k], dtype=p.data.dtype)
        for k, b in bufs.items():
            b[...] = state[k]

    def train(self, mode: bool = True):
        self.training = mode
        for _, m in self.children():
            m.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None


def _uniform(rng, shape, fan_in, dtype):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Conv2d(Module):
    def __init__(self, in_ch, out_ch, k=3, rng=None, dtype=np.float32, bias=True):
        rng = rng or np.random.default_rng(0)
        self.weight = Tensor(_uniform(rng, (out_ch, in_ch, k, k), in_ch * k * k, dtype), True)
        # a bias feeding straight into batch norm is cancelled by the mean subtraction
        self.bias = Tensor(np.zeros(out_ch, dtype=dtype), True) if bias else None

    def __call__(self, x):
        return conv2d(x, self.weight, self.bias)


class ConvTranspose2(Module):
    def __init__(self, in_ch, out_ch, rng=None, dtype=np.float32):
        rng = rng or np.random.default_rng(0)
        self.weight = Tensor(_uniform(rng, (in_ch, out_ch, 2, 2), in_ch, dtype), True)
        self.bias = Tensor(np.zeros(out_ch, dtype=dtype), True)

    def __call__(self, x):
        return tconv2(x, self.weight, self.bias)


class BatchNorm2d(Module):
    def __init__(self, ch, momentum=0.1, eps=1e-5, dtype=np.float32):
        self.weight = Tensor(np.ones(ch, dtype=dtype), True)
        self.bias = Tensor(np.zeros(ch, dtype=dtype), True)
        self.buffers = {"running_mean": np.zeros(ch, dtype=dtype),
                        "running_var": np.ones(ch, dtype=dtype)}
        self.momentum = momentum
        self.eps = eps

    def __call__(self, x):
        return batchnorm(x, self.weight, self.bias, self.buffers["running_mean"],
                         self.buffers["running_var"], self.training, self.momentum, self.eps)
