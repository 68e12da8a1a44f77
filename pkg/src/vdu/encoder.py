"""Document-side feature extraction.

Covers the sub-word vocabulary (greedy longest match with byte fallback),
coordinate quantization to a 0..1000 grid, the spatial OCR embedding
(word row plus two x lookups, two y lookups, height and width lookups),
instruction embedding, and a small frozen patch-transformer standing in
for a pretrained vision encoder. Page images arrive as PPM (P6) or raw
IDIM tensors and are bilinearly resized to 224x224.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .schema import OcrToken
from .tensor import Parameter, RandomStream, ShapeError, Tensor

PAD_ID, BOS_ID, EOS_ID, SEP_ID, PAGE_ID = 0, 1, 2, 3, 4
SPECIAL_TOKENS = ("<pad>", "<bos>", "<eos>", "<sep>", "<page>")
BYTE_BASE = len(SPECIAL_TOKENS)
N_BYTES = 256
PIECE_BASE = BYTE_BASE + N_BYTES

COORD_BINS = 1000
IMAGE_SIZE = 224
PATCH = 16


class FormatError(ValueError):
    """An image file or page array does not match its declared format."""


# ---------------------------------------------------------------------------
# vocabulary


class Vocab:
    """Sub-word vocabulary with byte fallback; encoding never emits UNK.

    Ids are dense: specials, then the 256 byte ids, then learned pieces.
    Words separate via the 0x20 byte id, so decode(encode(s)) restores s up
    to whitespace normalization.
    """

    def __init__(self, pieces: list[str]):
        self.pieces = list(pieces)
        self.piece_ids = {p: PIECE_BASE + i for i, p in enumerate(self.pieces)}
        if len(self.piece_ids) != len(self.pieces):
            raise ValueError("duplicate vocabulary pieces")
        self._max_piece = max((len(p) for p in self.pieces), default=0)
        self.size = PIECE_BASE + len(self.pieces)

    def encode_word(self, word: str) -> list[int]:
        ids: list[int] = []
        i = 0
        while i < len(word):
            match = None
            for length in range(min(self._max_piece, len(word) - i), 0, -1):
                pid = self.piece_ids.get(word[i:i + length])
                if pid is not None:
                    match = (pid, length)
                    break
            if match:
                ids.append(match[0])
                i += match[1]
            else:
                ids.extend(BYTE_BASE + b for b in word[i].encode("utf-8"))
                i += 1
        return ids

    def encode(self, text: str) -> list[int]:
        ids: list[int] = []
        for j, word in enumerate(text.split()):
            if j:
                ids.append(BYTE_BASE + 0x20)
            ids.extend(self.encode_word(word))
        return ids

    def decode(self, ids) -> str:
        parts: list[str] = []
        pending = bytearray()

        def flush():
            if pending:
                parts.append(pending.decode("utf-8", errors="replace"))
                pending.clear()

        for i in ids:
            i = int(i)
            if i in (PAD_ID, BOS_ID):
                continue
            if i == EOS_ID:
                break
            if i in (SEP_ID, PAGE_ID):
                flush()
                parts.append(" ")
            elif BYTE_BASE <= i < PIECE_BASE:
                pending.append(i - BYTE_BASE)
            else:
                flush()
                parts.append(self.pieces[i - PIECE_BASE])
        flush()
        return "".join(parts)

    def token_strings(self) -> list[str]:
        return (
            list(SPECIAL_TOKENS)
            + [f"<0x{i:02x}>" for i in range(N_BYTES)]
            + list(self.pieces)
        )

    def save(self, path) -> None:
        Path(path).write_text(
            json.dumps(self.token_strings(), ensure_ascii=False), encoding="utf-8"
        )

    @staticmethod
    def load(path) -> "Vocab":
        tokens = json.loads(Path(path).read_text(encoding="utf-8"))
        head = tokens[:PIECE_BASE]
        expected = list(SPECIAL_TOKENS) + [f"<0x{i:02x}>" for i in range(N_BYTES)]
        if head != expected:
            raise ValueError("vocabulary file does not start with specials + byte ids")
        return Vocab(tokens[PIECE_BASE:])


def build_vocab(texts, max_size: int = 2048, min_freq: int = 2) -> Vocab:
    """Frequency-ranked whole-word pieces from a text corpus (ties break lexically)."""
    counts: dict[str, int] = {}
    for text in texts:
        for word in text.split():
            counts[word] = counts.get(word, 0) + 1
    budget = max(0, max_size - PIECE_BASE)
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    pieces = [w for w, c in ranked if c >= min_freq][:budget]
    return Vocab(pieces)


# ---------------------------------------------------------------------------
# coordinate quantization and spatial-aware OCR embedding


def quantize_bbox(box, page_w: float, page_h: float, bins: int = COORD_BINS):
    """Round pixel coordinates into integer bins on a 0..bins grid, clamped."""
    if page_w <= 0 or page_h <= 0:
        raise ValueError(f"page extent must be positive, got {page_w}x{page_h}")
    x1, y1, x2, y2 = box
    bx1 = int(np.clip(round(bins * x1 / page_w), 0, bins))
    by1 = int(np.clip(round(bins * y1 / page_h), 0, bins))
    bx2 = int(np.clip(round(bins * x2 / page_w), 0, bins))
    by2 = int(np.clip(round(bins * y2 / page_h), 0, bins))
    return bx1, by1, bx2, by2


@dataclass
class EmbeddingTables:
    """Learnable word and coordinate tables plus instruction positions."""

    W_s: Parameter
    W_x: Parameter
    W_y: Parameter
    W_h: Parameter
    W_w: Parameter
    pos_ins: Parameter

    @property
    def dim(self) -> int:
        return self.W_s.data.shape[1]

    def parameters(self) -> list[Parameter]:
        return [self.W_s, self.W_x, self.W_y, self.W_h, self.W_w, self.pos_ins]


def create_embedding_tables(
    rng: RandomStream,
    vocab_size: int,
    d: int,
    bins: int = COORD_BINS,
    max_ins_len: int = 128,
    dtype=np.float32,
    init_std: float = 0.02,
) -> EmbeddingTables:
    def table(name, rows):
        data = rng.normal((rows, d), std=init_std).astype(dtype)
        return Parameter(f"encoder_tables.{name}", data)

    return EmbeddingTables(
        W_s=table("W_s", vocab_size),
        W_x=table("W_x", bins + 1),
        W_y=table("W_y", bins + 1),
        W_h=table("W_h", bins + 1),
        W_w=table("W_w", bins + 1),
        pos_ins=table("pos_ins", max_ins_len),
    )


def ocr_to_subwords(
    tokens: list[OcrToken], page_w: float, page_h: float, vocab: Vocab,
    bins: int = COORD_BINS,
) -> tuple[list[int], np.ndarray]:
    """Tokenize OCR texts; every sub-word inherits its source token's box."""
    ids: list[int] = []
    boxes: list[tuple[int, int, int, int]] = []
    for tok in tokens:
        qbox = quantize_bbox(tok.box, page_w, page_h, bins)
        for tid in vocab.encode(tok.text):
            ids.append(tid)
            boxes.append(qbox)
    arr = np.asarray(boxes, dtype=np.int64).reshape(len(ids), 4)
    return ids, arr


def embed_ocr(ids, qboxes: np.ndarray, tables: EmbeddingTables) -> Tensor:
    """Spatially aware OCR rows: word lookup plus the six coordinate lookups."""
    ids = np.asarray(ids, dtype=np.int64)
    if len(ids) == 0:
        return Tensor(np.zeros((0, tables.dim), dtype=tables.W_s.data.dtype))
    bins = tables.W_x.data.shape[0] - 1
    bx1, by1, bx2, by2 = qboxes[:, 0], qboxes[:, 1], qboxes[:, 2], qboxes[:, 3]
    bh = np.clip(by2 - by1, 0, bins)
    bw = np.clip(bx2 - bx1, 0, bins)
    z = T.embedding(tables.W_s.tensor, ids)
    z = T.add(z, T.embedding(tables.W_x.tensor, bx1))
    z = T.add(z, T.embedding(tables.W_x.tensor, bx2))
    z = T.add(z, T.embedding(tables.W_y.tensor, by1))
    z = T.add(z, T.embedding(tables.W_y.tensor, by2))
    z = T.add(z, T.embedding(tables.W_h.tensor, bh))
    z = T.add(z, T.embedding(tables.W_w.tensor, bw))
    return z


def embed_instruction(ids, tables: EmbeddingTables) -> Tensor:
    """Word rows plus learned absolute positions; no spatial terms."""
    ids = np.asarray(ids, dtype=np.int64)
    if len(ids) == 0:
        return Tensor(np.zeros((0, tables.dim), dtype=tables.W_s.data.dtype))
    if len(ids) > tables.pos_ins.data.shape[0]:
        raise ShapeError(
            f"instruction of {len(ids)} tokens exceeds position table "
            f"({tables.pos_ins.data.shape[0]} rows)"
        )
    words = T.embedding(tables.W_s.tensor, ids)
    pos = T.embedding(tables.pos_ins.tensor, np.arange(len(ids)))
    return T.add(words, pos)


# ---------------------------------------------------------------------------
# page image I/O and preprocessing


def read_ppm(path) -> np.ndarray:
    """Binary PPM (P6) to float64 HxWx3 in [0, 1]."""
    data = Path(path).read_bytes()

    pos = 0
    fields = []
    while len(fields) < 4:
        if pos >= len(data):
            raise FormatError(f"{path}: truncated PPM header")
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos] != 0x0A:
                pos += 1
            pos += 1
            continue
        if data[pos] in b" \t\r\n":
            pos += 1
            continue
        start = pos
        while pos < len(data) and data[pos] not in b" \t\r\n":
            pos += 1
        fields.append(data[start:pos])
    pos += 1  # single whitespace after maxval

    if fields[0] != b"P6":
        raise FormatError(f"{path}: not a P6 PPM (magic {fields[0]!r})")
    width, height, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    if maxval != 255:
        raise FormatError(f"{path}: unsupported maxval {maxval}")
    need = width * height * 3
    payload = data[pos:pos + need]
    if len(payload) != need:
        raise FormatError(f"{path}: payload {len(payload)} bytes, expected {need}")
    img = np.frombuffer(payload, dtype=np.uint8).reshape(height, width, 3)
    return img.astype(np.float64) / 255.0


def write_ppm(path, img: np.ndarray) -> None:
    if img.ndim != 3 or img.shape[2] != 3:
        raise FormatError(f"PPM wants HxWx3, got {img.shape}")
    if img.dtype != np.uint8:
        img = (np.clip(img, 0.0, 1.0) * 255.0).round().astype(np.uint8)
    h, w, _ = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


IDIM_MAGIC = b"IDIM"


def read_idim(path) -> np.ndarray:
    with open(path, "rb") as fh:
        if fh.read(4) != IDIM_MAGIC:
            raise FormatError(f"{path}: bad IDIM magic")
        h, w, c = struct.unpack("<III", fh.read(12))
        payload = fh.read(h * w * c * 4)
        if len(payload) != h * w * c * 4:
            raise FormatError(f"{path}: truncated IDIM payload")
        return np.frombuffer(payload, dtype="<f4").astype(np.float64).reshape(h, w, c)


def write_idim(path, img: np.ndarray) -> None:
    h, w, c = img.shape
    with open(path, "wb") as fh:
        fh.write(IDIM_MAGIC)
        fh.write(struct.pack("<III", h, w, c))
        fh.write(img.astype("<f4").tobytes())


def load_page_image(path) -> np.ndarray:
    path = str(path)
    if path.endswith(".ppm"):
        return read_ppm(path)
    if path.endswith(".idim"):
        return read_idim(path)
    raise FormatError(f"unsupported page image format: {path}")


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    h, w = img.shape[:2]
    if (h, w) == (out_h, out_w):
        return img
    ys = (np.arange(out_h) + 0.5) * (h / out_h) - 0.5
    xs = (np.arange(out_w) + 0.5) * (w / out_w) - 0.5
    y0 = np.clip(np.floor(ys).astype(int), 0, h - 1)
    x0 = np.clip(np.floor(xs).astype(int), 0, w - 1)
    y1 = np.clip(y0 + 1, 0, h - 1)
    x1 = np.clip(x0 + 1, 0, w - 1)
    wy = np.clip(ys - y0, 0.0, 1.0)[:, None, None]
    wx = np.clip(xs - x0, 0.0, 1.0)[None, :, None]
    top = img[y0][:, x0] * (1 - wx) + img[y0][:, x1] * wx
    bot = img[y1][:, x0] * (1 - wx) + img[y1][:, x1] * wx
    return top * (1 - wy) + bot * wy


def preprocess_page(img: np.ndarray, size: int = IMAGE_SIZE) -> np.ndarray:
    if img.ndim != 3 or img.shape[2] != 3:
        raise FormatError(f"page image must be HxWx3, got {img.shape}")
    return resize_bilinear(np.clip(img, 0.0, 1.0), size, size)


# ---------------------------------------------------------------------------
# toy frozen vision encoder


@dataclass
class VisionEncoder:
    params: dict[str, Parameter]
    d: int
    n_blocks: int
    n_heads: int
    patch: int = PATCH
    image_size: int = IMAGE_SIZE

    @property
    def n_patches(self) -> int:
        return (self.image_size // self.patch) ** 2

    def parameters(self) -> list[Parameter]:
        return [self.params[k] for k in sorted(self.params)]


def create_vision_encoder(
    rng: RandomStream,
    d: int,
    n_blocks: int = 2,
    n_heads: int = 4,
    dtype=np.float32,
    init_std: float = 0.02,
    trainable: bool = False,
) -> VisionEncoder:
    patch_dim = PATCH * PATCH * 3
    n_patches = (IMAGE_SIZE // PATCH) ** 2
    params: dict[str, Parameter] = {}

    def add(name, shape, fill=None):
        if fill is None:
            data = rng.normal(shape, std=init_std).astype(dtype)
        else:
            data = np.full(shape, fill, dtype=dtype)
        params[name] = Parameter(f"vision.{name}", data, trainable=trainable)

    add("patch_proj.w", (patch_dim, d))
    add("patch_proj.b", (d,), fill=0.0)
    add("pos", (n_patches, d))
    for i in range(n_blocks):
        pre = f"block{i}"
        for head in ("wq", "wk", "wv", "wo"):
            add(f"{pre}.attn.{head}", (d, d))
        for bias in ("bq", "bv", "bo"):
            add(f"{pre}.attn.{bias}", (d,), fill=0.0)
        add(f"{pre}.ln1.g", (d,), fill=1.0)
        add(f"{pre}.ln1.b", (d,), fill=0.0)
        add(f"{pre}.ffn.w1", (d, 4 * d))
        add(f"{pre}.ffn.b1", (4 * d,), fill=0.0)
        add(f"{pre}.ffn.w2", (4 * d, d))
        add(f"{pre}.ffn.b2", (d,), fill=0.0)
        add(f"{pre}.ln2.g", (d,), fill=1.0)
        add(f"{pre}.ln2.b", (d,), fill=0.0)
    return VisionEncoder(params=params, d=d, n_blocks=n_blocks, n_heads=n_heads)


def _vision_block(x: Tensor, p: dict[str, Parameter], pre: str, n_heads: int) -> Tensor:
    def w(name):
        return p[f"{pre}.{name}"].tensor

    q = T.linear(x, w("attn.wq"), w("attn.bq"))
    k = T.linear(x, w("attn.wk"))
    v = T.linear(x, w("attn.wv"), w("attn.bv"))
    attn = T.linear(T.attention(q, k, v, n_heads), w("attn.wo"), w("attn.bo"))
    x = T.layer_norm(T.add(x, attn), w("ln1.g"), w("ln1.b"))
    h = T.gelu(T.linear(x, w("ffn.w1"), w("ffn.b1")))
    ffn = T.linear(h, w("ffn.w2"), w("ffn.b2"))
    return T.layer_norm(T.add(x, ffn), w("ln2.g"), w("ln2.b"))


def encode_image(page: np.ndarray, vision: VisionEncoder) -> Tensor:
    """Patch rows of the preprocessed page through the frozen blocks."""
    img = preprocess_page(page, vision.image_size)
    n = vision.image_size // vision.patch
    dtype = vision.params["patch_proj.w"].data.dtype
    patches = (
        img.reshape(n, vision.patch, n, vision.patch, 3)
        .transpose(0, 2, 1, 3, 4)
        .reshape(n * n, vision.patch * vision.patch * 3)
        .astype(dtype)
    )
    x = T.linear(Tensor(patches), vision.params["patch_proj.w"].tensor,
                 vision.params["patch_proj.b"].tensor)
    x = T.add(x, vision.params["pos"].tensor)
    for i in range(vision.n_blocks):
        x = _vision_block(x, vision.params, f"block{i}", vision.n_heads)
    return x
