"""Small encoder-decoder language model consuming bridged document rows.

The encoder sees [document rows; instruction ids; OCR ids] in that order,
each segment tagged with a learned segment embedding and positions that
restart per segment. The decoder is causal with cross-attention into the
encoder states; the output projection is tied to the token embedding.
The whole stack stays frozen during instruction tuning, but gradients
flow through it into the document rows.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .encoder import BOS_ID, EOS_ID, PAD_ID, Vocab
from .tensor import MASK_FILL, Parameter, RandomStream, ShapeError, Tensor


class SequenceTooLong(ValueError):
    """Encoder input exceeds the configured row budget; inputs are never
    silently truncated."""


@dataclass
class LmModel:
    params: dict[str, Parameter]
    vocab_size: int
    d_llm: int
    enc_blocks: int
    dec_blocks: int
    n_heads: int
    max_len: int = 1024

    def parameters(self) -> list[Parameter]:
        return [self.params[k] for k in sorted(self.params)]

    def set_trainable(self, flag: bool) -> None:
        for p in self.params.values():
            p.set_trainable(flag)


SEG_DOC, SEG_INS, SEG_OCR = 0, 1, 2


def create_lm(
    rng: RandomStream,
    vocab_size: int,
    d_llm: int,
    enc_blocks: int = 2,
    dec_blocks: int = 2,
    n_heads: int = 4,
    ffn_mult: int = 4,
    max_len: int = 1024,
    dtype=np.float32,
    init_std: float = 0.02,
    trainable: bool = False,
) -> LmModel:
    params: dict[str, Parameter] = {}

    def add(name, shape, fill=None):
        if fill is None:
            data = rng.normal(shape, std=init_std).astype(dtype)
        else:
            data = np.full(shape, fill, dtype=dtype)
        params[name] = Parameter(f"lm.{name}", data, trainable=trainable)

    add("emb", (vocab_size, d_llm))   # tied with the output projection
    add("seg", (3, d_llm))
    add("pos", (max_len, d_llm))

    def add_block(pre, cross: bool):
        subs = ["self", "cross"] if cross else ["self"]
        for sub in subs:
            for w in ("wq", "wk", "wv", "wo"):
                add(f"{pre}.{sub}.{w}", (d_llm, d_llm))
            for b in ("bq", "bv", "bo"):
                add(f"{pre}.{sub}.{b}", (d_llm,), fill=0.0)
        n_ln = 3 if cross else 2
        for i in range(1, n_ln + 1):
            add(f"{pre}.ln{i}.g", (d_llm,), fill=1.0)
            add(f"{pre}.ln{i}.b", (d_llm,), fill=0.0)
        add(f"{pre}.ffn.w1", (d_llm, ffn_mult * d_llm))
        add(f"{pre}.ffn.b1", (ffn_mult * d_llm,), fill=0.0)
        add(f"{pre}.ffn.w2", (ffn_mult * d_llm, d_llm))
        add(f"{pre}.ffn.b2", (d_llm,), fill=0.0)

    for i in range(enc_blocks):
        add_block(f"enc.block{i}", cross=False)
    for i in range(dec_blocks):
        add_block(f"dec.block{i}", cross=True)

    return LmModel(
        params=params, vocab_size=vocab_size, d_llm=d_llm,
        enc_blocks=enc_blocks, dec_blocks=dec_blocks, n_heads=n_heads,
        max_len=max_len,
    )


def _attend(x_q, x_kv, p, pre, n_heads, bias=None):
    def w(name):
        return p[f"{pre}.{name}"].tensor

    # no key bias: a per-query constant shift is softmax-invariant
    q = T.linear(x_q, w("wq"), w("bq"))
    k = T.linear(x_kv, w("wk"))
    v = T.linear(x_kv, w("wv"), w("bv"))
    out = T.attention(q, k, v, n_heads, bias=bias)
    return T.linear(out, w("wo"), w("bo"))


def _segment_rows(lm: LmModel, rows: Tensor, seg: int) -> Tensor:
    n = rows.data.shape[0]
    seg_row = T.slice_rows(lm.params["seg"].tensor, seg, seg + 1)
    pos = T.embedding(lm.params["pos"].tensor, np.arange(n))
    return T.add(T.add(rows, seg_row), pos)


def encode_inputs(lm: LmModel, h_doc: Tensor | None, instruction_ids, ocr_ids) -> Tensor:
    """Assemble and encode the [doc; instruction; OCR] sequence."""
    p = lm.params
    segments: list[Tensor] = []
    if h_doc is not None and h_doc.data.shape[0] > 0:
        if h_doc.data.shape[1] != lm.d_llm:
            raise ShapeError(f"h_doc width {h_doc.data.shape[1]} != d_llm {lm.d_llm}")
        segments.append(_segment_rows(lm, h_doc, SEG_DOC))
    ins = np.asarray(instruction_ids, dtype=np.int64)
    if len(ins):
        segments.append(_segment_rows(lm, T.embedding(p["emb"].tensor, ins), SEG_INS))
    ocr = np.asarray(ocr_ids, dtype=np.int64)
    if len(ocr):
        segments.append(_segment_rows(lm, T.embedding(p["emb"].tensor, ocr), SEG_OCR))
    if not segments:
        raise ShapeError("LM encoder needs at least one non-empty segment")

    total = sum(s.data.shape[0] for s in segments)
    if total > lm.max_len:
        raise SequenceTooLong(f"encoder input of {total} rows exceeds max {lm.max_len}")
    for s in segments:
        if s.data.shape[0] > lm.params["pos"].data.shape[0]:
            raise SequenceTooLong(
                f"segment of {s.data.shape[0]} rows exceeds position table"
            )

    x = T.concat_rows(segments) if len(segments) > 1 else segments[0]
    for i in range(lm.enc_blocks):
        pre = f"enc.block{i}"
        sa = _attend(x, x, p, f"{pre}.self", lm.n_heads)
        x = T.layer_norm(T.add(x, sa), p[f"{pre}.ln1.g"].tensor, p[f"{pre}.ln1.b"].tensor)
        h = T.gelu(T.linear(x, p[f"{pre}.ffn.w1"].tensor, p[f"{pre}.ffn.b1"].tensor))
        ffn = T.linear(h, p[f"{pre}.ffn.w2"].tensor, p[f"{pre}.ffn.b2"].tensor)
        x = T.layer_norm(T.add(x, ffn), p[f"{pre}.ln2.g"].tensor, p[f"{pre}.ln2.b"].tensor)
    return x


def _decode_states(lm: LmModel, enc: Tensor, dec_input_ids: np.ndarray) -> Tensor:
    p = lm.params
    n = len(dec_input_ids)
    x = T.add(T.embedding(p["emb"].tensor, dec_input_ids),
              T.embedding(p["pos"].tensor, np.arange(n)))
    causal = np.triu(np.full((n, n), MASK_FILL, dtype=x.data.dtype), k=1)
    for i in range(lm.dec_blocks):
        pre = f"dec.block{i}"
        sa = _attend(x, x, p, f"{pre}.self", lm.n_heads, bias=causal)
        x = T.layer_norm(T.add(x, sa), p[f"{pre}.ln1.g"].tensor, p[f"{pre}.ln1.b"].tensor)
        ca = _attend(x, enc, p, f"{pre}.cross", lm.n_heads)
        x = T.layer_norm(T.add(x, ca), p[f"{pre}.ln2.g"].tensor, p[f"{pre}.ln2.b"].tensor)
        h = T.gelu(T.linear(x, p[f"{pre}.ffn.w1"].tensor, p[f"{pre}.ffn.b1"].tensor))
        ffn = T.linear(h, p[f"{pre}.ffn.w2"].tensor, p[f"{pre}.ffn.b2"].tensor)
        x = T.layer_norm(T.add(x, ffn), p[f"{pre}.ln3.g"].tensor, p[f"{pre}.ln3.b"].tensor)
    return x


def lm_forward(
    lm: LmModel,
    h_doc: Tensor | None,
    instruction_ids,
    ocr_ids,
    target_ids,
) -> tuple[Tensor, Tensor]:
    """Teacher-forced loss and per-step logits for one instance.

    target_ids must end with EOS; pad positions are excluded from the mean.
    """
    targets = np.asarray(target_ids, dtype=np.int64)
    non_pad = targets[targets != PAD_ID]
    if len(non_pad) == 0 or non_pad[-1] != EOS_ID:
        raise ValueError("target_ids must end with EOS")
    enc = encode_inputs(lm, h_doc, instruction_ids, ocr_ids)
    dec_input = np.concatenate([[BOS_ID], targets[:-1]])
    states = _decode_states(lm, enc, dec_input)
    logits = T.matmul(states, T.transpose(lm.params["emb"].tensor))
    loss = T.softmax_cross_entropy(logits, targets, PAD_ID)
    return loss, logits


def generate(
    lm: LmModel,
    h_doc: Tensor | None,
    instruction_ids,
    ocr_ids,
    vocab: Vocab,
    max_len: int = 64,
) -> str:
    """Greedy decode until EOS or the length cap, then detokenize."""
    with T.no_grad():
        enc = encode_inputs(lm, h_doc, instruction_ids, ocr_ids)
        out: list[int] = []
        for _ in range(max_len):
            dec_input = np.asarray([BOS_ID] + out, dtype=np.int64)
            states = _decode_states(lm, enc, dec_input)
            last = states.data[-1]
            logits = last @ lm.params["emb"].data.T
            nxt = int(np.argmax(logits))
            if nxt == EOS_ID:
                break
            out.append(nxt)
    return vocab.decode(out)
