"""Small module system on top of the autodiff tensors."""

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Parameter(Tensor):
    __slots__ = ()

    def __init__(self, data, name=None):
        super().__init__(np.asarray(data, dtype=T.get_default_dtype()), requires_grad=True, name=name)


class Module:
    """Parameters and submodules are discovered from instance attributes.

    Lists of modules are walked by position, so ``blocks[2].attn.wq`` is named
    ``<prefix>.block2.attn.wq`` when the list attribute is called ``blocks``.
    """

    def named_parameters(self, prefix=""):
        out = {}
        for attr, value in vars(self).items():
            name = f"{prefix}{attr}"
            if isinstance(value, Parameter):
                out[name] = value
            elif isinstance(value, Module):
                out.update(value.named_parameters(name + "."))
            elif isinstance(value, (list, tuple)) and value and isinstance(value[0], Module):
                stem = attr[:-1] if attr.endswith("s") else attr
                for i, m in enumerate(value):
                    out.update(m.named_parameters(f"{prefix}{stem}{i}."))
        for name, p in out.items():
            p.name = name
        return out

    def parameters(self):
        return list(self.named_parameters().values())

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def num_parameters(self):
        return int(sum(p.data.size for p in self.parameters()))

    def to(self, dtype):
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        return self

    def state_dict(self):
        return {k: p.data.copy() for k, p in self.named_parameters().items()}

    def load_state_dict(self, state, strict=True):
        params = self.named_parameters()
        missing = set(params) - set(state)
        if strict and missing:
            raise KeyError(f"missing parameters: {sorted(missing)[:5]}")
        for k, p in params.items():
            if k in state:
                value = np.asarray(state[k])
                if value.shape != p.shape:
                    raise ValueError(f"{k}: shape {value.shape} != {p.shape}")
                p.data = value.astype(p.data.dtype, copy=True)


class Linear(Module):
    def __init__(self, d_in, d_out, rng, std=0.02, bias=True):
        self.w = Parameter(rng.normal(0.0, std, size=(d_in, d_out)))
        self.b = Parameter(np.zeros(d_out)) if bias else None

    def __call__(self, x):
        y = T.matmul(x, self.w)
        return y + self.b if self.b is not None else y


class LayerNorm(Module):
    def __init__(self, dim):
        self.g = Parameter(np.ones(dim))
        self.b = Parameter(np.zeros(dim))

    def __call__(self, x):
        return T.layer_norm(x, self.g, self.b)


class Embedding(Module):
    def __init__(self, n, dim, rng, std=0.02):
        self.table = Parameter(rng.normal(0.0, std, size=(n, dim)))

    def __call__(self, idx):
        return T.embedding(self.table, idx)


class MLP(Module):
    def __init__(self, dim, hidden, rng):
        self.fc1 = Linear(dim, hidden, rng)
        self.fc2 = Linear(hidden, dim, rng)

    def __call__(self, x):
        return self.fc2(T.gelu(self.fc1(x)))


class MultiHeadAttention(Module):
    def __init__(self, dim, heads, rng):
        if dim % heads:
            raise ValueError(f"dim {dim} not divisible by {heads} heads")
        self.heads = heads
        self.wq = Linear(dim, dim, rng)
        self.wk = Linear(dim, dim, rng)
        self.wv = Linear(dim, dim, rng)
        self.wo = Linear(dim, dim, rng)

    def _split(self, x):
        B, L, D = x.shape
        return T.permute(T.reshape(x, (B, L, self.heads, D // self.heads)), (0, 2, 1, 3))

    def keys_values(self, x):
        return self._split(self.wk(x)), self._split(self.wv(x))

    def attend(self, x, k, v, mask=None):
        """``mask`` is True where attention is blocked; broadcast to [B, H, Lq, Lk]."""
        B, L, D = x.shape
        q = self._split(self.wq(x))
        scores = T.scale(T.matmul(q, T.transpose(k)), 1.0 / np.sqrt(D // self.heads))
        if mask is not None:
            scores = T.masked_fill(scores, mask, -1e9)
        att = T.softmax(scores)
        out = T.permute(T.matmul(att, v), (0, 2, 1, 3))
        return self.wo(T.reshape(out, (B, L, D)))

    def __call__(self, x, context=None, mask=None):
        k, v = self.keys_values(x if context is None else context)
        return self.attend(x, k, v, mask)
