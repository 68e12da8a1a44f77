import numpy as np
import pytest

from vdu import tensor as T
from vdu.docformer import (
    DocFormer,
    EmptyDocument,
    PageFeatures,
    bridge,
    create_docformer,
    encode_pages,
    identity_projection,
    project,
)
from vdu.encoder import PAGE_ID
from vdu.tensor import Parameter, RandomStream, ShapeError, Tensor, backward


@pytest.fixture
def df():
    return create_docformer(RandomStream(1), d=16, d_llm=12, m=6, n_blocks=2,
                            n_heads=2, dtype=np.float64, init_std=0.2)


def _features(rng, n_vis=5, n_ins=3, n_ocr=4, d=16):
    return (Tensor(rng.normal((n_vis, d))), Tensor(rng.normal((n_ins, d))),
            Tensor(rng.normal((n_ocr, d))))


def test_bridge_output_shape_default_m():
    df32 = create_docformer(RandomStream(0), d=16, d_llm=16, dtype=np.float64)
    assert df32.m == 32
    z_vis, z_ins, z_ocr = _features(RandomStream(2))
    out = bridge(z_vis, z_ins, z_ocr, df32)
    assert out.data.shape == (32, 16)


def test_bridge_deterministic(df):
    z_vis, z_ins, z_ocr = _features(RandomStream(3))
    a = bridge(z_vis, z_ins, z_ocr, df)
    b = bridge(Tensor(z_vis.data.copy()), Tensor(z_ins.data.copy()),
               Tensor(z_ocr.data.copy()), df)
    assert np.array_equal(a.data, b.data)


def test_bridge_masked_pad_rows_no_effect(df):
    rng = RandomStream(4)
    z_vis, z_ins, z_ocr = _features(rng)
    base = bridge(z_vis, z_ins, z_ocr, df,
                  pad_mask=np.ones(7, dtype=bool)).data
    padded_ocr = Tensor(np.vstack([z_ocr.data, rng.normal((3, 16))]))
    mask = np.concatenate([np.ones(7, dtype=bool), np.zeros(3, dtype=bool)])
    padded = bridge(z_vis, z_ins, padded_ocr, df, pad_mask=mask).data
    assert np.abs(padded - base).max() < 1e-5


def test_bridge_dim_mismatch(df):
    z_vis, z_ins, _ = _features(RandomStream(5))
    with pytest.raises(ShapeError):
        bridge(z_vis, z_ins, Tensor(RandomStream(6).normal((4, 8))), df)


def test_bridge_empty_context_rows(df):
    z_vis = Tensor(RandomStream(7).normal((5, 16)))
    empty = Tensor(np.zeros((0, 16)))
    out = bridge(z_vis, empty, empty, df)
    assert out.data.shape == (6, 16)


def test_project_shapes(df):
    z_doc = Tensor(RandomStream(8).normal((6, 16)))
    out = project(z_doc, df)
    assert out.data.shape == (6, 12)


def test_project_identity_debug_mode():
    df = create_docformer(RandomStream(9), d=10, d_llm=10, m=4, n_blocks=1,
                          n_heads=2, dtype=np.float64)
    identity_projection(df)
    z_doc = Tensor(RandomStream(10).normal((4, 10)))
    out = project(z_doc, df)
    assert np.allclose(out.data, z_doc.data, atol=1e-12)


def test_project_identity_requires_matching_dims(df):
    with pytest.raises(ShapeError):
        identity_projection(df)


def test_project_zero_rows_give_constant_bias_rows(df):
    df.params["proj.b1"].data[:] = 0.3
    df.params["proj.b2"].data[:] = -0.1
    out = project(Tensor(np.zeros((6, 16))), df)
    assert np.allclose(out.data, out.data[0])


def test_project_matches_gemm_oracle(df):
    z = RandomStream(11).normal((6, 16))
    out = project(Tensor(z), df)
    h = z @ df.params["proj.w1"].data + df.params["proj.b1"].data
    x2 = h * h
    t = np.tanh(np.sqrt(2 / np.pi) * (h + 0.044715 * x2 * h))
    h = 0.5 * h * (1 + t)
    expected = h @ df.params["proj.w2"].data + df.params["proj.b2"].data
    assert np.allclose(out.data, expected, atol=1e-12)


# ---------------------------------------------------------------------------
# multi-page pooling


def test_encode_pages_single_page_equals_bridge_project(df):
    rng = RandomStream(12)
    z_vis, z_ins, z_ocr = _features(rng)
    page = PageFeatures(z_vis=z_vis, z_ocr=z_ocr, ocr_ids=[7, 8, 9])
    pooled, ids = encode_pages([page], z_ins, df)
    direct = project(bridge(z_vis, z_ins, z_ocr, df), df)
    assert np.array_equal(pooled.data, direct.data)
    assert ids == [7, 8, 9]


def test_encode_pages_duplicate_page_equals_single(df):
    rng = RandomStream(13)
    z_vis, z_ins, z_ocr = _features(rng)
    page = PageFeatures(z_vis=z_vis, z_ocr=z_ocr, ocr_ids=[1, 2])
    single, _ = encode_pages([page], z_ins, df)
    triple, ids = encode_pages([page, page, page], z_ins, df)
    assert np.abs(triple.data - single.data).max() < 1e-6
    assert ids == [1, 2, PAGE_ID, 1, 2, PAGE_ID, 1, 2]


def test_encode_pages_two_pages_external_mean(df):
    rng = RandomStream(14)
    z_ins = Tensor(rng.normal((3, 16)))
    pages = [
        PageFeatures(z_vis=Tensor(rng.normal((5, 16))),
                     z_ocr=Tensor(rng.normal((4, 16))), ocr_ids=[1]),
        PageFeatures(z_vis=Tensor(rng.normal((5, 16))),
                     z_ocr=Tensor(rng.normal((2, 16))), ocr_ids=[2]),
    ]
    pooled, ids = encode_pages(pages, z_ins, df)
    h1 = project(bridge(pages[0].z_vis, z_ins, pages[0].z_ocr, df), df).data
    h2 = project(bridge(pages[1].z_vis, z_ins, pages[1].z_ocr, df), df).data
    assert np.abs(pooled.data - (h1 + h2) / 2).max() < 1e-6
    assert ids == [1, PAGE_ID, 2]


def test_encode_pages_order_symmetric_pooling_ordered_ids(df):
    rng = RandomStream(15)
    z_ins = Tensor(rng.normal((3, 16)))
    p1 = PageFeatures(z_vis=Tensor(rng.normal((5, 16))),
                      z_ocr=Tensor(rng.normal((4, 16))), ocr_ids=[1, 1])
    p2 = PageFeatures(z_vis=Tensor(rng.normal((5, 16))),
                      z_ocr=Tensor(rng.normal((3, 16))), ocr_ids=[2, 2])
    fwd, ids_fwd = encode_pages([p1, p2], z_ins, df)
    rev, ids_rev = encode_pages([p2, p1], z_ins, df)
    assert np.abs(fwd.data - rev.data).max() < 1e-9
    assert ids_fwd == [1, 1, PAGE_ID, 2, 2]
    assert ids_rev == [2, 2, PAGE_ID, 1, 1]


def test_encode_pages_empty_raises(df):
    with pytest.raises(EmptyDocument):
        encode_pages([], Tensor(np.zeros((0, 16))), df)


# ---------------------------------------------------------------------------
# gradient flow


def test_every_docformer_parameter_gets_gradient():
    df = create_docformer(RandomStream(16), d=8, d_llm=8, m=4, n_blocks=2,
                          n_heads=2, dtype=np.float64, init_std=0.3)
    rng = RandomStream(17)
    z_vis = Tensor(rng.normal((4, 8)))
    z_ins = Tensor(rng.normal((3, 8)))
    z_ocr = Tensor(rng.normal((5, 8)))
    r = Tensor(rng.normal((4, 8)))
    out = project(bridge(z_vis, z_ins, z_ocr, df), df)
    loss = T.sum_all(T.mul(out, r))
    backward(loss)
    for p in df.parameters():
        assert p.grad.shape == p.data.shape
        assert np.any(p.grad != 0.0), f"zero gradient for {p.name}"


def test_bridge_full_gradcheck_micro():
    df = create_docformer(RandomStream(18), d=8, d_llm=8, m=4, n_blocks=1,
                          n_heads=2, ffn_mult=2, dtype=np.float64, init_std=0.5)
    rng = RandomStream(19)
    z_vis = Tensor(rng.normal((3, 8)))
    z_ins = Tensor(rng.normal((2, 8)))
    z_ocr = Tensor(rng.normal((3, 8)))
    r = Tensor(rng.normal((4, 8)))

    def f():
        return T.sum_all(T.mul(project(bridge(z_vis, z_ins, z_ocr, df), df), r))

    assert T.finite_diff_check(f, df.parameters(), eps=1e-4) < 1e-4
