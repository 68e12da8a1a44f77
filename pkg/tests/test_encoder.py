import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vdu import tensor as T
from vdu.encoder import (
    BYTE_BASE,
    PIECE_BASE,
    FormatError,
    Vocab,
    build_vocab,
    create_embedding_tables,
    create_vision_encoder,
    embed_instruction,
    embed_ocr,
    encode_image,
    ocr_to_subwords,
    preprocess_page,
    quantize_bbox,
    read_idim,
    read_ppm,
    resize_bilinear,
    write_idim,
    write_ppm,
)
from vdu.schema import OcrToken
from vdu.tensor import RandomStream, ShapeError, Tensor


# ---------------------------------------------------------------------------
# vocabulary and tokenization


def test_tokenize_empty():
    vocab = Vocab(["menu"])
    assert vocab.encode("") == []


def test_tokenize_deterministic_repeat():
    vocab = build_vocab(["total total amount"], min_freq=1)
    ids = vocab.encode("total total")
    half = len(ids) // 2
    # two identical words produce identical id subsequences around the space
    space = BYTE_BASE + 0x20
    assert ids.count(space) == 1
    split = ids.index(space)
    assert ids[:split] == ids[split + 1:]


def test_vocab_piece_and_byte_fallback():
    corpus = ["menu_price menu_price menu_price total"]
    vocab = build_vocab(corpus, min_freq=2)
    assert vocab.encode("menu_price") == [vocab.piece_ids["menu_price"]]
    unseen = vocab.encode("zzqx")
    assert len(unseen) == 4
    assert all(BYTE_BASE <= i < PIECE_BASE for i in unseen)


def test_no_unk_ever():
    vocab = Vocab([])
    ids = vocab.encode("anything at all éø")
    assert all(0 <= i < vocab.size for i in ids)


def test_decode_roundtrip_whitespace_normalized():
    vocab = build_vocab(["alpha beta gamma"], min_freq=1)
    for text in ["alpha beta", "  alpha   beta  ", "alpha beta gamma delta"]:
        assert vocab.decode(vocab.encode(text)) == " ".join(text.split())


@given(st.lists(st.text(alphabet=st.characters(blacklist_categories=("Cs", "Zs", "Cc")),
                        min_size=1, max_size=8), min_size=0, max_size=6))
@settings(max_examples=60, deadline=None)
def test_decode_roundtrip_property(words):
    vocab = build_vocab([" ".join(words)], min_freq=2)
    text = " ".join(words)
    assert vocab.decode(vocab.encode(text)) == " ".join(text.split())


def test_vocab_file_roundtrip(tmp_path):
    vocab = build_vocab(["menu price total total"], min_freq=1)
    vocab.save(tmp_path / "vocab.json")
    loaded = Vocab.load(tmp_path / "vocab.json")
    assert loaded.pieces == vocab.pieces
    assert loaded.encode("total") == vocab.encode("total")


def test_vocab_ids_dense_and_disjoint():
    vocab = build_vocab(["word word"], min_freq=1)
    tokens = vocab.token_strings()
    assert len(tokens) == vocab.size
    assert tokens[0] == "<pad>"
    assert tokens[BYTE_BASE] == "<0x00>"
    assert tokens[PIECE_BASE] == "word"


# ---------------------------------------------------------------------------
# quantization


def test_quantize_full_page():
    assert quantize_bbox((0, 0, 640, 480), 640, 480) == (0, 0, 1000, 1000)


def test_quantize_midpoint():
    assert quantize_bbox((320, 240, 320, 240), 640, 480) == (500, 500, 500, 500)


def test_quantize_thousand_scale_identity():
    assert quantize_bbox((750, 29, 954, 94), 1000, 1000) == (750, 29, 954, 94)


def test_quantize_clamps():
    assert quantize_bbox((-5, -5, 2000, 2000), 100, 100) == (0, 0, 1000, 1000)


def test_quantize_rejects_empty_page():
    with pytest.raises(ValueError):
        quantize_bbox((0, 0, 1, 1), 0, 100)


@given(st.floats(min_value=0, max_value=2000), st.floats(min_value=0, max_value=2000))
@settings(max_examples=60, deadline=None)
def test_quantize_monotone(x1, x2):
    lo, hi = sorted([x1, x2])
    a = quantize_bbox((lo, 0, lo, 0), 2000, 2000)
    b = quantize_bbox((hi, 0, hi, 0), 2000, 2000)
    assert a[0] <= b[0]


@given(st.integers(min_value=0, max_value=1000), st.integers(min_value=0, max_value=1000))
@settings(max_examples=60, deadline=None)
def test_quantize_idempotent_on_quantized(a, b):
    lo, hi = sorted([a, b])
    box = (lo, lo, hi, hi)
    assert quantize_bbox(box, 1000, 1000) == box


# ---------------------------------------------------------------------------
# spatial OCR embedding


@pytest.fixture
def tables():
    return create_embedding_tables(RandomStream(2), vocab_size=40, d=8,
                                   dtype=np.float64, init_std=0.3)


def test_embed_ocr_zero_spatial_is_word_rows(tables):
    for table in (tables.W_x, tables.W_y, tables.W_h, tables.W_w):
        table.data[:] = 0.0
    ids = [3, 17, 5]
    qboxes = np.array([[1, 2, 3, 4], [5, 6, 7, 8], [9, 10, 11, 12]])
    out = embed_ocr(ids, qboxes, tables)
    assert np.array_equal(out.data, tables.W_s.data[ids])


def test_embed_ocr_zero_word_is_six_lookup_sum(tables):
    tables.W_s.data[:] = 0.0
    ids = [7]
    qboxes = np.array([[120, 40, 300, 60]])
    out = embed_ocr(ids, qboxes, tables)
    expected = (
        tables.W_x.data[120] + tables.W_x.data[300]
        + tables.W_y.data[40] + tables.W_y.data[60]
        + tables.W_h.data[20] + tables.W_w.data[180]
    )
    assert np.array_equal(out.data[0], expected)


def test_embed_ocr_seven_lookup_oracle(tables):
    ids = [11]
    qboxes = np.array([[5, 6, 105, 66]])
    out = embed_ocr(ids, qboxes, tables)
    expected = (
        tables.W_s.data[11]
        + tables.W_x.data[5] + tables.W_x.data[105]
        + tables.W_y.data[6] + tables.W_y.data[66]
        + tables.W_h.data[60] + tables.W_w.data[100]
    )
    assert np.allclose(out.data[0], expected)


def test_embed_ocr_permutation_equivariant(tables):
    ids = [1, 2, 3]
    qboxes = np.array([[0, 0, 10, 10], [20, 20, 30, 30], [40, 40, 50, 50]])
    out = embed_ocr(ids, qboxes, tables).data
    perm = [2, 0, 1]
    out_p = embed_ocr([ids[i] for i in perm], qboxes[perm], tables).data
    assert np.array_equal(out_p, out[perm])


def test_ocr_to_subwords_inherits_box():
    vocab = build_vocab(["title"], min_freq=1)
    tokens = [OcrToken("title zz", (0, 0, 100, 50))]
    ids, qboxes = ocr_to_subwords(tokens, 200, 100, vocab)
    assert len(ids) == len(qboxes)
    assert len(ids) >= 3  # piece + space-byte + two byte ids
    assert all(tuple(b) == (0, 0, 500, 500) for b in qboxes)


def test_embed_instruction_positions(tables):
    ids = [4, 9]
    out = embed_instruction(ids, tables)
    expected = tables.W_s.data[ids] + tables.pos_ins.data[:2]
    assert np.array_equal(out.data, expected)
    tables.pos_ins.data[:] = 0.0
    out2 = embed_instruction(ids, tables)
    assert np.array_equal(out2.data, tables.W_s.data[ids])


def test_embed_instruction_empty(tables):
    out = embed_instruction([], tables)
    assert out.data.shape == (0, 8)


def test_embed_instruction_too_long(tables):
    with pytest.raises(ShapeError):
        embed_instruction(list(range(300)), tables)


# ---------------------------------------------------------------------------
# image formats and preprocessing


def test_ppm_roundtrip(tmp_path):
    rng = RandomStream(4)
    img = (rng.uniform((10, 12, 3)) * 255).astype(np.uint8)
    write_ppm(tmp_path / "x.ppm", img)
    back = read_ppm(tmp_path / "x.ppm")
    assert back.shape == (10, 12, 3)
    assert np.array_equal((back * 255).round().astype(np.uint8), img)


def test_ppm_rejects_bad_magic(tmp_path):
    (tmp_path / "bad.ppm").write_bytes(b"P5\n2 2\n255\n" + b"\x00" * 12)
    with pytest.raises(FormatError):
        read_ppm(tmp_path / "bad.ppm")


def test_ppm_rejects_truncated(tmp_path):
    (tmp_path / "t.ppm").write_bytes(b"P6\n4 4\n255\n" + b"\x00" * 5)
    with pytest.raises(FormatError):
        read_ppm(tmp_path / "t.ppm")


def test_idim_roundtrip(tmp_path):
    img = RandomStream(5).uniform((6, 7, 3))
    write_idim(tmp_path / "x.idim", img)
    back = read_idim(tmp_path / "x.idim")
    assert back.shape == (6, 7, 3)
    assert np.allclose(back, img, atol=1e-6)


def test_preprocess_resizes_to_224():
    img = RandomStream(6).uniform((100, 317, 3))
    out = preprocess_page(img)
    assert out.shape == (224, 224, 3)
    assert out.min() >= 0.0 and out.max() <= 1.0


def test_preprocess_rejects_wrong_channels():
    with pytest.raises(FormatError):
        preprocess_page(np.zeros((50, 50, 1)))


def test_resize_identity_when_same_size():
    img = RandomStream(7).uniform((16, 16, 3))
    assert resize_bilinear(img, 16, 16) is img


def test_resize_constant_image_stays_constant():
    img = np.full((9, 13, 3), 0.42)
    out = resize_bilinear(img, 224, 224)
    assert np.allclose(out, 0.42)


# ---------------------------------------------------------------------------
# vision encoder


@pytest.fixture(scope="module")
def vision():
    return create_vision_encoder(RandomStream(9), d=16, n_blocks=2, n_heads=2,
                                 dtype=np.float64, init_std=0.08)


def test_encode_image_shape_196(vision):
    img = RandomStream(10).uniform((224, 224, 3))
    out = encode_image(img, vision)
    assert out.data.shape == (196, 16)


def test_encode_image_shape_independent_of_input_resolution(vision):
    img = RandomStream(11).uniform((90, 400, 3))
    out = encode_image(img, vision)
    assert out.data.shape == (196, 16)


def test_encode_image_deterministic_on_constant_input(vision):
    a = encode_image(np.zeros((224, 224, 3)), vision)
    b = encode_image(np.zeros((224, 224, 3)), vision)
    assert np.array_equal(a.data, b.data)


def test_encode_image_copy_identical(vision):
    img = RandomStream(12).uniform((224, 224, 3))
    a = encode_image(img, vision)
    b = encode_image(img.copy(), vision)
    assert np.array_equal(a.data, b.data)


def test_encode_image_pixel_perturbation_propagates(vision):
    img = np.zeros((224, 224, 3))
    a = encode_image(img, vision).data
    img2 = img.copy()
    img2[5, 5] = 1.0       # patch (0, 0)
    b = encode_image(img2, vision).data
    assert not np.allclose(a, b)
    # attention mixes the change into other patch rows too
    assert not np.allclose(a[100], b[100], atol=1e-12)


def test_vision_frozen_by_default(vision):
    assert all(not p.trainable for p in vision.parameters())
