"""Neural-network building blocks on top of the autodiff tensors."""

from __future__ import annotations

import numpy as np

from . import autodiff as A
from .autodiff import Tensor
from .errors import ConfigError

# Additive attention bias for masked-out keys. exp(-1e9 - max) underflows
# to exactly zero, so masked keys get zero weight without producing NaNs.
MASKED_LOGIT = -1e9


class Module:
    """Minimal container: tracks parameters in declaration order and a
    train/eval flag that submodules inherit."""

    def __init__(self):
        self.training = True

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def named_parameters(self, prefix=""):
        out = []
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                out.append((prefix + name, value))
            elif isinstance(value, Module):
                out.extend(value.named_parameters(f"{prefix}{name}."))
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        out.extend(item.named_parameters(f"{prefix}{name}.{i}."))
                    elif isinstance(item, Tensor) and item.requires_grad:
                        out.append((f"{prefix}{name}.{i}", item))
        return out

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def modules(self):
        yield self
        for value in vars(self).values():
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        yield from item.modules()

    def train(self, mode=True):
        for m in self.modules():
            m.training = mode
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None


class Linear(Module):
    def __init__(self, in_dim, out_dim, rng, bias=True):
        super().__init__()
        scale = 1.0 / np.sqrt(in_dim)
        self.weight = Tensor(rng.normal(0.0, scale, (in_dim, out_dim)), requires_grad=True)
        self.bias = Tensor(np.zeros(out_dim), requires_grad=True) if bias else None

    def forward(self, x):
        y = A.matmul(x, self.weight)
        if self.bias is not None:
            y = A.add(y, self.bias)
        return y


class LayerNorm(Module):
    def __init__(self, dim, eps=1e-5):
        super().__init__()
        self.gain = Tensor(np.ones(dim), requires_grad=True)
        self.bias = Tensor(np.zeros(dim), requires_grad=True)
        self.eps = eps

    def forward(self, x):
        return A.layer_norm(x, self.gain, self.bias, self.eps)


class Dropout(Module):
    def __init__(self, p, rng):
        super().__init__()
        self.p = p
        self.rng = rng

    def forward(self, x):
        return A.dropout(x, self.p, self.rng, self.training)


class FeedForward(Module):
    def __init__(self, dim, hidden, dropout_p, rng):
        super().__init__()
        self.lin1 = Linear(dim, hidden, rng)
        self.lin2 = Linear(hidden, dim, rng)
        self.drop = Dropout(dropout_p, rng)

    def forward(self, x):
        return self.lin2(self.drop(A.gelu(self.lin1(x))))


class MultiHeadSelfAttention(Module):
    """Scaled dot-product self-attention over ``[batch, length, dim]``.

    ``key_valid`` marks which key positions are real; masked keys receive a
    large negative logit so no query attends to padding.
    """

    def __init__(self, dim, heads, dropout_p, rng):
        super().__init__()
        if dim % heads != 0:
            raise ConfigError(f"model dim {dim} not divisible by heads {heads}")
        self.heads = heads
        self.head_dim = dim // heads
        self.scale = 1.0 / np.sqrt(self.head_dim)
        self.wq = Linear(dim, dim, rng)
        self.wk = Linear(dim, dim, rng)
        self.wv = Linear(dim, dim, rng)
        self.wo = Linear(dim, dim, rng)
        self.drop = Dropout(dropout_p, rng)

    def _split_heads(self, x, b, l):
        return A.transpose(A.reshape(x, (b, l, self.heads, self.head_dim)), (0, 2, 1, 3))

    def forward(self, x, key_valid=None):
        b, l, d = x.shape
        q = self._split_heads(self.wq(x), b, l)
        k = self._split_heads(self.wk(x), b, l)
        v = self._split_heads(self.wv(x), b, l)
        scores = A.mul(A.matmul(q, A.transpose(k, (0, 1, 3, 2))), self.scale)
        if key_valid is not None:
            bias = np.where(np.asarray(key_valid, dtype=bool), 0.0, MASKED_LOGIT)
            scores = A.add(scores, bias[:, None, None, :])
        attn = self.drop(A.softmax(scores, axis=-1))
        ctx = A.matmul(attn, v)
        merged = A.reshape(A.transpose(ctx, (0, 2, 1, 3)), (b, l, d))
        return self.wo(merged)


class EncoderBlock(Module):
    """Pre-norm transformer block: attention and feed-forward sublayers with
    residual connections."""

    def __init__(self, dim, heads, ffn_dim, dropout_p, rng):
        super().__init__()
        self.ln1 = LayerNorm(dim)
        self.attn = MultiHeadSelfAttention(dim, heads, dropout_p, rng)
        self.ln2 = LayerNorm(dim)
        self.ffn = FeedForward(dim, ffn_dim, dropout_p, rng)
        self.drop = Dropout(dropout_p, rng)

    def forward(self, x, key_valid=None):
        x = A.add(x, self.drop(self.attn(self.ln1(x), key_valid)))
        x = A.add(x, self.drop(self.ffn(self.ln2(x))))
        return x


class TransformerEncoder(Module):
    def __init__(self, dim, depth, heads, ffn_dim, dropout_p, rng):
        super().__init__()
        self.blocks = [EncoderBlock(dim, heads, ffn_dim, dropout_p, rng) for _ in range(depth)]
        self.final_ln = LayerNorm(dim)

    def forward(self, x, key_valid=None):
        for block in self.blocks:
            x = block(x, key_valid)
        return self.final_ln(x)


def sinusoidal_positions(length, dim):
    """Fixed sin/cos positional encodings, shape ``[length, dim]``."""
    if dim % 2 != 0:
        raise ConfigError(f"positional encoding dim must be even, got {dim}")
    pos = np.arange(length)[:, None]
    freq = np.exp(-np.log(10000.0) * np.arange(0, dim, 2) / dim)
    angles = pos * freq[None, :]
    enc = np.zeros((length, dim))
    enc[:, 0::2] = np.sin(angles)
    enc[:, 1::2] = np.cos(angles)
    return enc
