import numpy as np
import pytest

from taskfusion import tensor as tl
from taskfusion.attention import (AttentionParams, PositionalEncoding,
                                  cross_attention, linear, positional_encode,
                                  self_attention)
from taskfusion.seeding import rng_for
from taskfusion.tensor import ContractError, ShapeError, grad_check


def _params(seed, width=8, heads=2, std=0.3):
    return AttentionParams.init(rng_for(seed, "attn"), width, heads, std=std)


def test_single_token_attention_weight_is_one():
    params = _params(0)
    cache = []
    tokens = tl.constant(rng_for(1, "tok").standard_normal((1, 8)))
    self_attention(tokens, params, cache)
    assert cache[0].shape == (2, 1, 1)
    assert np.allclose(cache[0], 1.0, atol=0)


def test_duplicate_tokens_produce_identical_rows():
    params = _params(2)
    row = rng_for(3, "row").standard_normal(8)
    tokens = tl.constant(np.stack([row, row]))
    out = self_attention(tokens, params).data
    assert np.array_equal(out[0], out[1])


def test_attention_rows_sum_to_one_per_head():
    params = _params(4, heads=4, width=16)
    tokens = tl.constant(rng_for(5, "t").standard_normal((4, 16)) * 3)
    cache = []
    self_attention(tokens, params, cache)
    sums = cache[0].sum(axis=-1)
    assert np.max(np.abs(sums - 1.0)) <= 1e-12


def test_cross_attention_single_memory_slot():
    params = _params(6)
    memory = tl.constant(rng_for(7, "m").standard_normal((1, 8)))
    queries = tl.constant(rng_for(8, "q").standard_normal((3, 8)))
    cache = []
    cross_attention(memory, queries, params, cache)
    assert cache[0].shape == (2, 3, 1)
    assert np.allclose(cache[0], 1.0, atol=0)


def test_cross_attention_identical_memory_rows_permutation_invariant():
    params = _params(9)
    row = rng_for(10, "m").standard_normal(8)
    memory = tl.constant(np.stack([row] * 5))
    queries = tl.constant(rng_for(11, "q").standard_normal((2, 8)))
    out1 = cross_attention(memory, queries, params).data
    out2 = cross_attention(tl.constant(memory.data[::-1].copy()), queries,
                           params).data
    assert np.allclose(out1, out2, atol=1e-15)


def test_cross_attention_weight_rows_sum_to_one():
    params = _params(12, heads=4, width=16)
    memory = tl.constant(rng_for(13, "m").standard_normal((6, 16)))
    queries = tl.constant(rng_for(14, "q").standard_normal((3, 16)))
    cache = []
    cross_attention(memory, queries, params, cache)
    assert np.max(np.abs(cache[0].sum(axis=-1) - 1.0)) <= 1e-12


def test_query_permutation_equivariance():
    params = _params(15)
    rng = rng_for(16, "perm")
    queries = tl.constant(rng.standard_normal((5, 8)))
    memory = tl.constant(rng.standard_normal((4, 8)))
    perm = rng.permutation(5)
    out = cross_attention(memory, queries, params).data
    out_perm = cross_attention(memory,
                               tl.constant(queries.data[perm].copy()),
                               params).data
    assert np.allclose(out[perm], out_perm, atol=1e-14)

    tokens_out = self_attention(queries, params).data
    # for self-attention the memory permutes with the queries; identical
    # key set means permuting rows permutes outputs
    tokens_perm = self_attention(tl.constant(queries.data[perm].copy()),
                                 params).data
    assert np.allclose(tokens_out[perm], tokens_perm, atol=1e-14)


def test_attention_blocks_pass_grad_check():
    params = _params(17)
    rng = rng_for(18, "gc")
    tokens = tl.tensor(rng.standard_normal((4, 8)), requires_grad=True)
    w = tl.constant(rng.standard_normal((4, 8)))
    report = grad_check(
        lambda t, *_: tl.sum_all(tl.mul(self_attention(t, params), w)),
        [tokens, params.wq, params.wk, params.wv, params.wo],
        eps=1e-5, tol=1e-4,
        names=["tokens", "wq", "wk", "wv", "wo"])
    assert report.passed, str(report)

    memory = tl.tensor(rng.standard_normal((5, 8)), requires_grad=True)
    queries = tl.tensor(rng.standard_normal((2, 8)), requires_grad=True)
    wq = tl.constant(rng.standard_normal((2, 8)))
    report = grad_check(
        lambda m, q, *_: tl.sum_all(tl.mul(cross_attention(m, q, params), wq)),
        [memory, queries, params.wq, params.wk, params.wv, params.wo],
        eps=1e-5, tol=1e-4,
        names=["memory", "queries", "wq", "wk", "wv", "wo"])
    assert report.passed, str(report)


def test_attention_errors():
    with pytest.raises(ShapeError):
        AttentionParams.init(rng_for(19, "x"), 10, 4)  # 10 % 4 != 0
    params = _params(20)
    with pytest.raises(ContractError):
        cross_attention(tl.constant(np.zeros((0, 8))),
                        tl.constant(np.zeros((2, 8))), params)


def test_positional_table_bounds_and_determinism():
    pe = PositionalEncoding(32, 16)
    assert np.all(pe.table.data <= 1.0) and np.all(pe.table.data >= -1.0)
    pe2 = PositionalEncoding(32, 16)
    assert np.array_equal(pe.table.data, pe2.table.data)


def test_positional_encode_zero_features_yields_table_rows():
    pe = PositionalEncoding(16, 8)
    out = positional_encode(tl.constant(np.zeros((4, 8))), pe, offset=0)
    assert np.array_equal(out.data, pe.table.data[:4])


def test_positional_rows_injective():
    pe = PositionalEncoding(64, 8)
    rows = pe.table.data
    for i in range(64):
        for j in range(i + 1, 64):
            assert not np.array_equal(rows[i], rows[j]), (i, j)


def test_positional_encode_additivity():
    pe = PositionalEncoding(16, 8)
    rng = rng_for(21, "pe")
    x = tl.constant(rng.standard_normal((5, 8)))
    once = positional_encode(x, pe, 2)
    twice = positional_encode(once, pe, 2)
    assert np.allclose(twice.data - once.data, pe.table.data[2:7], atol=0)


def test_positional_encode_range_overflow():
    pe = PositionalEncoding(8, 8)
    with pytest.raises(ShapeError):
        positional_encode(tl.constant(np.zeros((5, 8))), pe, offset=4)


def test_linear_bias_tiling():
    rng = rng_for(22, "lin")
    x = tl.constant(rng.standard_normal((3, 4)))
    w = tl.constant(rng.standard_normal((4, 2)))
    b = tl.constant(np.array([10.0, -5.0]))
    out = linear(x, w, b).data
    assert np.allclose(out, x.data @ w.data + b.data)
