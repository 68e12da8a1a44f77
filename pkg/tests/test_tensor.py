import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vdu import tensor as T
from vdu.tensor import (
    NoTargets,
    Parameter,
    RandomStream,
    ShapeError,
    Tensor,
    backward,
    finite_diff_check,
    load_checkpoint,
    save_checkpoint,
    seeded_rng,
)


def _param(name, shape, seed=0, std=1.0):
    rng = RandomStream(seed).derive(name)
    return Parameter(name, rng.normal(shape, std=std))


# ---------------------------------------------------------------------------
# forward values


def test_softmax_uniform_logits():
    out = T.softmax(Tensor(np.zeros((1, 4))))
    assert np.allclose(out.data, 0.25)


def test_mean_axis0_identical_rows():
    row = np.array([1.0, -2.0, 3.0])
    out = T.mean_axis0(Tensor(np.stack([row, row])))
    assert np.allclose(out.data, row)


def test_matmul_identity():
    a = np.array([[1.0, 2.0], [3.0, 4.0]])
    out = T.matmul(Tensor(a), Tensor(np.eye(2)))
    assert np.array_equal(out.data, a)


def test_matmul_shape_error():
    with pytest.raises(ShapeError):
        T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


def test_layer_norm_rows_standardized():
    x = RandomStream(3).normal((6, 16), std=4.0)
    g = Tensor(np.ones(16))
    b = Tensor(np.zeros(16))
    out = T.layer_norm(Tensor(x), g, b).data
    assert np.abs(out.mean(axis=-1)).max() < 1e-6
    assert np.abs(out.var(axis=-1) - 1.0).max() < 1e-4


def test_softmax_rows_sum_to_one():
    x = RandomStream(4).normal((5, 9), std=3.0)
    out = T.softmax(Tensor(x)).data
    assert np.allclose(out.sum(axis=-1), 1.0, atol=1e-6)


def test_attention_mask_zeroes_masked_keys():
    rng = RandomStream(5)
    q = Tensor(rng.normal((3, 8)))
    k = Tensor(rng.normal((4, 8)))
    v_data = rng.normal((4, 8))
    bias = np.zeros((1, 4))
    bias[0, 2:] = T.MASK_FILL
    out = T.attention(q, Tensor(k.data), Tensor(v_data), 2, bias=bias)
    # masked rows contribute nothing: perturbing them changes nothing
    v2 = v_data.copy()
    v2[2:] += 100.0
    out2 = T.attention(q, Tensor(k.data), Tensor(v2), 2, bias=bias)
    assert np.allclose(out.data, out2.data)


# ---------------------------------------------------------------------------
# backward correctness


def test_backward_linear_loss_gives_ones():
    p = _param("docformer.p", (3, 4))
    loss = T.sum_all(p.tensor)
    backward(loss)
    assert np.array_equal(p.grad, np.ones((3, 4)))


def test_backward_quadratic():
    p = Parameter("docformer.q", np.array([1.0, -2.0]))
    loss = T.scale(T.sum_all(T.mul(p.tensor, p.tensor)), 0.5)
    backward(loss)
    assert np.allclose(p.grad, [1.0, -2.0])


def test_backward_requires_scalar():
    p = _param("docformer.p", (3,))
    with pytest.raises(ShapeError):
        backward(T.mul(p.tensor, p.tensor))


def test_frozen_parameter_never_accumulates():
    p = Parameter("lm.p", np.ones(3), trainable=False)
    q = Parameter("docformer.q", np.ones(3))
    loss = T.sum_all(T.mul(p.tensor, q.tensor))
    backward(loss)
    assert np.array_equal(p.grad, np.zeros(3))
    assert np.array_equal(q.grad, np.ones(3))


_OP_CASES = {
    "add": lambda a, b: T.add(a, b),
    "sub": lambda a, b: T.sub(a, b),
    "mul": lambda a, b: T.mul(a, b),
    "matmul": lambda a, b: T.matmul(a, T.transpose(b)),
    "linear": lambda a, b: T.linear(a, T.transpose(b)),
    "concat": lambda a, b: T.concat_rows([a, b]),
    "slice_rows": lambda a, b: T.add(T.slice_rows(a, 1, 3), T.slice_rows(b, 0, 2)),
    "slice_cols": lambda a, b: T.add(T.slice_cols(a, 1, 4), T.slice_cols(b, 2, 5)),
    "softmax": lambda a, b: T.mul(T.softmax(a), b),
    "gelu": lambda a, b: T.mul(T.gelu(a), b),
    "mean": lambda a, b: T.mul(T.mean_axis0(a), T.mean_axis0(b)),
    "scale": lambda a, b: T.scale(T.mul(a, b), -1.7),
}


@pytest.mark.parametrize("name", sorted(_OP_CASES))
def test_op_gradcheck(name):
    a = _param("docformer.a", (4, 6), seed=10)
    b = _param("docformer.b", (4, 6), seed=11)
    op = _OP_CASES[name]

    def f():
        return T.sum_all(op(a.tensor, b.tensor))

    assert finite_diff_check(f, [a, b]) < 1e-4


def test_layer_norm_gradcheck():
    x = _param("docformer.x", (3, 8), seed=1)
    g = _param("docformer.g", (8,), seed=2)
    b = _param("docformer.b", (8,), seed=3)
    r = Tensor(RandomStream(4).normal((3, 8)))

    def f():
        return T.sum_all(T.mul(T.layer_norm(x.tensor, g.tensor, b.tensor), r))

    assert finite_diff_check(f, [x, g, b]) < 1e-4


def test_attention_gradcheck():
    q = _param("docformer.q", (4, 8), seed=5)
    k = _param("docformer.k", (6, 8), seed=6)
    v = _param("docformer.v", (6, 8), seed=7)
    bias = np.zeros((1, 6))
    bias[0, 5] = T.MASK_FILL
    r = Tensor(RandomStream(8).normal((4, 8)))

    def f():
        return T.sum_all(T.mul(T.attention(q.tensor, k.tensor, v.tensor, 2, bias=bias), r))

    assert finite_diff_check(f, [q, k, v]) < 1e-4


def test_embedding_gradcheck():
    table = _param("encoder_tables.t", (10, 4), seed=9)
    ids = np.array([1, 3, 3, 7])
    r = Tensor(RandomStream(10).normal((4, 4)))

    def f():
        return T.sum_all(T.mul(T.embedding(table.tensor, ids), r))

    assert finite_diff_check(f, [table]) < 1e-4
    table.zero_grad()
    loss = f()
    backward(loss)
    untouched = np.ones(10, dtype=bool)
    untouched[[1, 3, 7]] = False
    assert np.all(table.grad[untouched] == 0.0)


def test_finite_diff_empty_set_returns_zero():
    assert finite_diff_check(lambda: Tensor(np.asarray(1.0)), []) == 0.0


def test_finite_diff_rejects_f32():
    p = Parameter("docformer.p", np.ones(2, dtype=np.float32))
    with pytest.raises(ValueError):
        finite_diff_check(lambda: T.sum_all(p.tensor), [p])


# ---------------------------------------------------------------------------
# cross entropy


def test_cross_entropy_uniform_is_log_vocab():
    logits = Tensor(np.zeros((1, 16)))
    loss = T.softmax_cross_entropy(logits, np.array([5]), pad_id=0)
    assert abs(float(loss.data) - math.log(16)) < 1e-9


def test_cross_entropy_saturated_margin():
    logits = np.zeros((1, 4))
    logits[0, 3] = 20.0
    loss = T.softmax_cross_entropy(Tensor(logits), np.array([3]), pad_id=0)
    assert float(loss.data) < 1e-8


def test_cross_entropy_mean_over_positions():
    # two positions with per-position losses ln2 and ln8
    logits = np.zeros((2, 2))
    logits[0, 1] = math.log(1.0)          # uniform over 2 -> ln 2
    logits[1, 1] = math.log(7.0)          # p(target=1) = 7/8 -> loss ln(8/7)? craft directly
    # instead: construct known softmax targets
    l1 = np.array([[0.0, 0.0]])           # ln 2 on target 1
    l2 = np.array([[math.log(7.0), 0.0]])  # target 1 prob = 1/8 -> ln 8
    both = np.vstack([l1, l2])
    loss = T.softmax_cross_entropy(Tensor(both), np.array([1, 1]), pad_id=0)
    expected = (math.log(2) + math.log(8)) / 2
    assert abs(float(loss.data) - expected) < 1e-9
    assert abs(expected - 1.3862943611) < 1e-9


def test_cross_entropy_excludes_pad():
    logits = RandomStream(11).normal((3, 5))
    full = T.softmax_cross_entropy(Tensor(logits[:1]), np.array([2]), pad_id=0)
    padded = T.softmax_cross_entropy(Tensor(logits), np.array([2, 0, 0]), pad_id=0)
    assert abs(float(full.data) - float(padded.data)) < 1e-12


def test_cross_entropy_no_targets():
    with pytest.raises(NoTargets):
        T.softmax_cross_entropy(Tensor(np.zeros((2, 4))), np.array([0, 0]), pad_id=0)


# ---------------------------------------------------------------------------
# rng


def test_rng_uniform_range():
    rng = seeded_rng(0)
    u = rng.uniform(1000)
    assert u.min() >= 0.0 and u.max() < 1.0


def test_rng_determinism():
    a = seeded_rng(42).uniform(1000)
    b = seeded_rng(42).uniform(1000)
    assert np.array_equal(a, b)
    x = seeded_rng(7).normal((1000,))
    y = seeded_rng(7).normal((1000,))
    assert np.array_equal(x, y)


def test_rng_normal_mean_within_tolerance():
    z = seeded_rng(1).normal((100_000,))
    assert abs(z.mean()) < 0.02


def test_rng_derive_independent():
    rng = seeded_rng(3)
    a = rng.derive("one").uniform(10)
    b = rng.derive("two").uniform(10)
    assert not np.array_equal(a, b)
    assert np.array_equal(a, seeded_rng(3).derive("one").uniform(10))


@given(st.integers(min_value=0, max_value=2**31), st.integers(min_value=1, max_value=50))
@settings(max_examples=25, deadline=None)
def test_rng_sample_indices_is_prefix_of_permutation(seed, n):
    rng = seeded_rng(seed)
    k = min(n, 7)
    idxs = rng.sample_indices(n, k)
    assert len(idxs) == k
    assert len(set(idxs)) == k
    assert all(0 <= i < n for i in idxs)


# ---------------------------------------------------------------------------
# checkpoint format


def test_checkpoint_roundtrip(tmp_path):
    params = [
        _param("docformer.w", (3, 5), seed=1),
        Parameter("lm.emb", RandomStream(2).normal((4, 2)).astype(np.float32)),
        Parameter("vision.b", np.arange(6, dtype=np.float64)),
    ]
    path = tmp_path / "weights.idrw"
    save_checkpoint(path, params)
    stored = load_checkpoint(path)
    assert set(stored) == {p.name for p in params}
    for p in params:
        assert stored[p.name].dtype == p.data.dtype
        assert np.array_equal(stored[p.name], p.data)


def test_checkpoint_bytes_deterministic(tmp_path):
    params = [_param("docformer.w", (3, 5), seed=1)]
    save_checkpoint(tmp_path / "a.idrw", params)
    save_checkpoint(tmp_path / "b.idrw", list(reversed(params)))
    assert (tmp_path / "a.idrw").read_bytes() == (tmp_path / "b.idrw").read_bytes()


def test_checkpoint_header(tmp_path):
    save_checkpoint(tmp_path / "c.idrw", [_param("docformer.w", (2,))])
    blob = (tmp_path / "c.idrw").read_bytes()
    assert blob[:4] == b"IDRW"
    with pytest.raises(ValueError):
        load_checkpoint(__file__)
