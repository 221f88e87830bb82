"""Multi-head self/cross attention and sinusoidal positional encodings.

Both attention blocks run all heads through one batched matmul chain and
optionally cache the per-head weight matrices of the pass for later
export. Queries carry no positional information of their own; position
enters only where a caller adds a positional encoding to the memory.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as tl
from .tensor import ContractError, ShapeError, Tensor


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """x @ w + b with the bias tiled over rows (matmul keeps grads exact)."""
    n = x.shape[0]
    bias_rows = tl.matmul(tl.ones((n, 1)), tl.reshape(b, (1, b.shape[0])))
    return tl.add(tl.matmul(x, w), bias_rows)


@dataclass
class AttentionParams:
    """Projection matrices for one attention block (all [D, D])."""

    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    head_count: int

    def __post_init__(self):
        d = self.wq.shape[0]
        for name in ("wq", "wk", "wv", "wo"):
            m = getattr(self, name)
            if m.shape != (d, d):
                raise ShapeError(f"{name} must be square [D, D], got {m.shape}")
        if d % self.head_count != 0:
            raise ShapeError(f"width {d} not divisible by {self.head_count} heads")

    @property
    def width(self) -> int:
        return self.wq.shape[0]

    @classmethod
    def init(cls, rng: np.random.Generator, width: int, head_count: int,
             std: float = 0.02) -> "AttentionParams":
        return cls(
            wq=tl.randn(rng, (width, width), std, requires_grad=True),
            wk=tl.randn(rng, (width, width), std, requires_grad=True),
            wv=tl.randn(rng, (width, width), std, requires_grad=True),
            wo=tl.randn(rng, (width, width), std, requires_grad=True),
            head_count=head_count,
        )

    def named(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.wq": self.wq, f"{prefix}.wk": self.wk,
                f"{prefix}.wv": self.wv, f"{prefix}.wo": self.wo}


def _split_heads(x: Tensor, heads: int) -> Tensor:
    # [n, D] -> [heads, n, D/heads]
    n, d = x.shape
    return tl.permute(tl.reshape(x, (n, heads, d // heads)), (1, 0, 2))


def _merge_heads(x: Tensor) -> Tensor:
    # [heads, n, dh] -> [n, heads*dh]
    h, n, dh = x.shape
    return tl.reshape(tl.permute(x, (1, 0, 2)), (n, h * dh))


def _attend(queries: Tensor, memory: Tensor, params: AttentionParams,
            cache: list[np.ndarray] | None) -> Tensor:
    heads = params.head_count
    dh = params.width // heads
    q = _split_heads(tl.matmul(queries, params.wq), heads)
    k = _split_heads(tl.matmul(memory, params.wk), heads)
    v = _split_heads(tl.matmul(memory, params.wv), heads)
    scores = tl.scale(tl.bmm(q, tl.permute(k, (0, 2, 1))), 1.0 / math.sqrt(dh))
    weights = tl.softmax(scores, axis=-1)  # [heads, nq, nk]
    if cache is not None:
        cache.append(weights.data.copy())
    out = _merge_heads(tl.bmm(weights, v))
    return tl.matmul(out, params.wo)


def self_attention(tokens: Tensor, params: AttentionParams,
                   cache: list[np.ndarray] | None = None) -> Tensor:
    """Scaled dot-product attention of a token set over itself."""
    if tokens.shape[0] < 1:
        raise ContractError("self_attention: empty token set")
    if tokens.shape[1] != params.width:
        raise ShapeError(f"token width {tokens.shape[1]} != params width "
                         f"{params.width}")
    return _attend(tokens, tokens, params, cache)


def cross_attention(memory: Tensor, queries: Tensor, params: AttentionParams,
                    cache: list[np.ndarray] | None = None) -> Tensor:
    """Queries attend over a separate memory; output shape matches queries."""
    if memory.shape[0] < 1:
        raise ContractError("cross_attention: empty memory")
    if queries.shape[0] < 1:
        raise ContractError("cross_attention: empty query set")
    if memory.shape[1] != params.width or queries.shape[1] != params.width:
        raise ShapeError("memory/query width does not match params width")
    return _attend(queries, memory, params, cache)


class PositionalEncoding:
    """Fixed sinusoidal position table: sin/cos pairs over geometric periods."""

    def __init__(self, max_len: int, width: int):
        if width % 2 != 0:
            raise ShapeError(f"positional encoding width must be even, got {width}")
        pos = np.arange(max_len, dtype=np.float64)[:, None]
        i = np.arange(0, width, 2, dtype=np.float64)[None, :]
        angle = pos / np.power(10000.0, i / width)
        table = np.zeros((max_len, width))
        table[:, 0::2] = np.sin(angle)
        table[:, 1::2] = np.cos(angle)
        self.table = tl.constant(table)
        self.max_len = max_len
        self.width = width

    def rows(self, offset: int, n: int) -> Tensor:
        if offset < 0 or offset + n > self.max_len:
            raise ShapeError(f"positions [{offset}, {offset + n}) exceed table "
                             f"length {self.max_len}")
        return tl.narrow(self.table, 0, offset, n)

    def encode(self, features: Tensor, offset: int = 0) -> Tensor:
        """Add table rows [offset, offset+n) to an [n, D] feature block."""
        n, d = features.shape
        if d != self.width:
            raise ShapeError(f"feature width {d} != table width {self.width}")
        return tl.add(features, self.rows(offset, n))


def positional_encode(features: Tensor, table: PositionalEncoding,
                      offset: int = 0) -> Tensor:
    return table.encode(features, offset)
