import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rtp.errors import ConfigurationError
from rtp.partition import (
    Strategy,
    flatten,
    layout_attention,
    layout_embedding,
    layout_linear,
    layout_moe,
    shard_view,
    unflatten,
    unpack,
)


def arange_params(*sizes):
    out, start = [], 0
    for i, s in enumerate(sizes):
        out.append((f"p{i}", np.arange(start, start + s, dtype=float)))
        start += s
    return out


def test_flatten_exact_divisibility():
    fp = flatten(arange_params(5, 3), 4)
    assert fp.flat.size == 8 and fp.pad_len == 0 and fp.shard_len == 2
    fp.check()


def test_flatten_pads_tail():
    fp = flatten(arange_params(5, 2), 4)
    assert fp.flat.size == 8 and fp.pad_len == 1
    assert fp.flat[-1] == 0.0
    fp.check()


def test_linear_weight_and_bias_in_one_buffer():
    w = np.arange(6.0).reshape(2, 3)
    b = np.array([10.0, 11, 12])
    fp = flatten([("w", w), ("b", b)], 3)
    assert [s.name for s in fp.segments] == ["w", "b"]
    assert fp.numel == 9
    rebuilt = dict(unflatten(fp))
    assert np.array_equal(rebuilt["w"], w) and np.array_equal(rebuilt["b"], b)


def test_flatten_rejects_bad_n():
    with pytest.raises(ValueError):
        flatten(arange_params(3), 0)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(1, 7), min_size=1, max_size=5), st.integers(1, 8))
def test_flatten_unflatten_round_trip(sizes, n):
    params = arange_params(*sizes)
    fp = flatten(params, n)
    fp.check()
    assert fp.pad_len < n and fp.flat.size % n == 0
    for (name, t), (name2, t2) in zip(params, unflatten(fp)):
        assert name == name2 and np.array_equal(t, t2)


def test_shard_view_cases():
    fp = flatten([("x", np.arange(8.0))], 4)
    assert np.array_equal(shard_view(fp, 2), [4, 5])
    assert np.array_equal(np.concatenate([shard_view(fp, r) for r in range(4)]), fp.flat)
    one = flatten([("x", np.arange(8.0))], 1)
    assert np.array_equal(shard_view(one, 0), one.flat)
    with pytest.raises(ValueError):
        shard_view(fp, 4)


def test_shard_view_is_a_view():
    fp = flatten([("x", np.arange(8.0))], 2)
    v = shard_view(fp, 1)
    v[0] = -1
    assert fp.flat[4] == -1


def test_unpack_returns_named_views():
    buf = np.arange(5.0)
    fp = flatten([("a", np.zeros((2, 2))), ("b", np.zeros(1))], 1)
    views = unpack(buf, fp.segments)
    assert views["a"].shape == (2, 2) and views["b"][0] == 4.0
    views["b"][0] = 9
    assert buf[4] == 9


def test_layout_linear():
    lay = layout_linear(3, 8, 4)
    assert lay.column_range(1) == (2, 4)
    assert layout_linear(3, 8, 1).column_range(0) == (0, 8)
    with pytest.raises(ConfigurationError, match="divisible"):
        layout_linear(3, 10, 4)


def test_layout_linear_shards_partition_params():
    rng = np.random.default_rng(0)
    params = {"w": rng.uniform(size=(3, 8)), "b": rng.uniform(size=8)}
    lay = layout_linear(3, 8, 4)
    shards = [dict(lay.shard_params(params, j)) for j in range(4)]
    assert all(s["w"].shape == (3, 2) for s in shards)
    rebuilt = lay.assemble(shards)
    assert np.array_equal(rebuilt["w"], params["w"]) and np.array_equal(rebuilt["b"], params["b"])
    fp = lay.flat_parameter(params)
    assert fp.pad_len == 0 and fp.shard_len * 4 == 32


def test_layout_embedding_splits_embedding_dim():
    lay = layout_embedding(10, 8, 2)
    table = np.arange(80.0).reshape(10, 8)
    pieces = dict(lay.shard_params({"table": table}, 1))
    assert np.array_equal(pieces["table"], table[:, 4:])


def test_layout_attention():
    lay = layout_attention(16, 4, 4)
    assert lay.ranges == ((0, 1), (1, 2), (2, 3), (3, 4))
    two = layout_attention(16, 4, 2)
    assert two.ranges == ((0, 2), (2, 4)) and two.column_range(1) == (8, 16)
    assert layout_attention(16, 4, 1).ranges == ((0, 4),)
    with pytest.raises(ConfigurationError):
        layout_attention(16, 4, 3)
    with pytest.raises(ConfigurationError):
        layout_attention(15, 4, 1)


def test_layout_attention_output_projection_rows():
    rng = np.random.default_rng(1)
    H = 8
    params = {k: rng.uniform(size=(H, H)) for k in ("wq", "wk", "wv", "wo")}
    params.update({k: rng.uniform(size=H) for k in ("bq", "bk", "bv", "bo")})
    lay = layout_attention(H, 4, 2)
    piece = dict(lay.shard_params(params, 1))
    assert np.array_equal(piece["wq"], params["wq"][:, 4:])
    assert np.array_equal(piece["wo"], params["wo"][4:, :])
    assert np.array_equal(piece["bo"], params["bo"][4:])
    rebuilt = lay.assemble([dict(lay.shard_params(params, j)) for j in range(2)])
    for k in params:
        assert np.array_equal(rebuilt[k], params[k])


def test_layout_moe():
    lay = layout_moe(4, 4)
    assert lay.strategy is Strategy.EXPERT and lay.ranges == tuple((j, j + 1) for j in range(4))
    assert layout_moe(1, 1).ranges == ((0, 1),)
    with pytest.raises(ConfigurationError, match="n_experts"):
        layout_moe(3, 4)
    params = {f"experts.{j}.w1": np.full((2, 2), j, dtype=float) for j in range(2)}
    piece = dict(layout_moe(2, 2).shard_params(params, 1))
    assert list(piece) == ["w1"] and piece["w1"][0, 0] == 1


def test_shards_are_disjoint_and_cover():
    for lay, total in ((layout_linear(4, 12, 3), 12), (layout_attention(12, 6, 3), 6)):
        covered = []
        for lo, hi in lay.ranges:
            covered.extend(range(lo, hi))
        assert covered == list(range(total))
