"""Small module system: parameters, containers, Linear, LayerNorm."""

import numpy as np

from . import tensor as T
from .errors import ContractError


class Parameter(T.Tensor):
    def __init__(self, data, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)


class Module:
    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_parameters(self, prefix=""):
        for name, value in vars(self).items():
            full = f"{prefix}{name}" if prefix else name
            if isinstance(value, Parameter):
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(prefix=full + ".")

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def state_dict(self):
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state):
        own = dict(self.named_parameters())
        if set(own) != set(state):
            missing = sorted(set(own) - set(state))
            extra = sorted(set(state) - set(own))
            raise ContractError(
                f"state dict mismatch: missing {missing}, unexpected {extra}"
            )
        for name, p in own.items():
            arr = np.asarray(state[name])
            if arr.shape != p.data.shape:
                raise ContractError(
                    f"shape mismatch for {name}: {arr.shape} vs {p.data.shape}"
                )
            p.data[...] = arr.astype(p.dtype)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class ModuleList(Module):
    def __init__(self, modules=()):
        self._items = list(modules)

    def append(self, module):
        self._items.append(module)

    def __iter__(self):
        return iter(self._items)

    def __len__(self):
        return len(self._items)

    def __getitem__(self, i):
        return self._items[i]

    def named_parameters(self, prefix=""):
        for i, m in enumerate(self._items):
            yield from m.named_parameters(prefix=f"{prefix}{i}.")


def fanin_uniform(rng, nin, nout, dtype):
    bound = 1.0 / np.sqrt(nin)
    return rng.uniform(-bound, bound, size=(nin, nout)).astype(dtype)


class Linear(Module):
    """y = x @ W + b with W [nin, nout].

    weight: "fanin" (uniform +-1/sqrt(nin)) or "zero".
    bias:   a float fill value, or ("uniform", lo, hi), or None for no bias.
    """

    def __init__(self, nin, nout, rng, dtype, weight="fanin", bias=0.0):
        if weight == "fanin":
            wdata = fanin_uniform(rng, nin, nout, dtype)
        elif weight == "zero":
            wdata = np.zeros((nin, nout), dtype=dtype)
        else:
            raise ContractError(f"unknown weight init {weight!r}")
        self.weight = Parameter(wdata)
        if bias is None:
            self.bias = None
        elif isinstance(bias, tuple):
            kind, lo, hi = bias
            if kind != "uniform":
                raise ContractError(f"unknown bias init {bias!r}")
            self.bias = Parameter(rng.uniform(lo, hi, size=nout).astype(dtype))
        else:
            self.bias = Parameter(np.full(nout, float(bias), dtype=dtype))

    def named_parameters(self, prefix=""):
        yield f"{prefix}weight", self.weight
        if self.bias is not None:
            yield f"{prefix}bias", self.bias

    def forward(self, x):
        # rowwise: a row's result must not depend on its position, or query
        # permutations would shift low bits through every projection.
        out = T.rowwise_matmul(x, self.weight)
        if self.bias is not None:
            out = out + self.bias
        return out


class LayerNorm(Module):
    def __init__(self, dim, dtype, eps=1e-5):
        self.gamma = Parameter(np.ones(dim, dtype=dtype))
        self.beta = Parameter(np.zeros(dim, dtype=dtype))
        self.eps = eps

    def named_parameters(self, prefix=""):
        yield f"{prefix}gamma", self.gamma
        yield f"{prefix}beta", self.beta

    def forward(self, x):
        return T.layer_norm(x, self.gamma, self.beta, eps=self.eps)
