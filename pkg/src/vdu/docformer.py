"""Bridging module between document features and the language model.

A set of m learnable token rows self-attends jointly with the instruction
and OCR rows, cross-attends into the visual patch features (token rows are
the only cross-attention queries), and passes through a feed-forward
sublayer, all with residuals and layer norm. The final token rows are
projected by a two-layer FFN into the language model's embedding width.
Multi-page documents bridge page by page; the projected embeddings are
mean-pooled and the page OCR ids concatenate with a page-separator id.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .encoder import PAGE_ID
from .tensor import MASK_FILL, Parameter, RandomStream, ShapeError, Tensor


class EmptyDocument(ValueError):
    """A document with zero pages cannot be encoded."""


@dataclass
class DocFormer:
    params: dict[str, Parameter]
    m: int
    d: int
    d_llm: int
    n_blocks: int
    n_heads: int
    proj_activation: str = "gelu"   # "linear" turns the projection into a debug passthrough

    def parameters(self) -> list[Parameter]:
        return [self.params[k] for k in sorted(self.params)]


def create_docformer(
    rng: RandomStream,
    d: int,
    d_llm: int,
    m: int = 32,
    n_blocks: int = 4,
    n_heads: int = 4,
    ffn_mult: int = 4,
    dtype=np.float32,
    init_std: float = 0.02,
) -> DocFormer:
    params: dict[str, Parameter] = {}

    def add(name, shape, fill=None):
        if fill is None:
            data = rng.normal(shape, std=init_std).astype(dtype)
        else:
            data = np.full(shape, fill, dtype=dtype)
        params[name] = Parameter(f"docformer.{name}", data)

    add("z_token", (m, d))
    for i in range(n_blocks):
        pre = f"block{i}"
        for sub in ("self", "cross"):
            for w in ("wq", "wk", "wv", "wo"):
                add(f"{pre}.{sub}.{w}", (d, d))
            for b in ("bq", "bv", "bo"):
                add(f"{pre}.{sub}.{b}", (d,), fill=0.0)
        add(f"{pre}.ln1.g", (d,), fill=1.0)
        add(f"{pre}.ln1.b", (d,), fill=0.0)
        add(f"{pre}.ln2.g", (d,), fill=1.0)
        add(f"{pre}.ln2.b", (d,), fill=0.0)
        add(f"{pre}.ffn.w1", (d, ffn_mult * d))
        add(f"{pre}.ffn.b1", (ffn_mult * d,), fill=0.0)
        add(f"{pre}.ffn.w2", (ffn_mult * d, d))
        add(f"{pre}.ffn.b2", (d,), fill=0.0)
        add(f"{pre}.ln3.g", (d,), fill=1.0)
        add(f"{pre}.ln3.b", (d,), fill=0.0)
    add("proj.w1", (d, ffn_mult * d))
    add("proj.b1", (ffn_mult * d,), fill=0.0)
    add("proj.w2", (ffn_mult * d, d_llm))
    add("proj.b2", (d_llm,), fill=0.0)
    return DocFormer(params=params, m=m, d=d, d_llm=d_llm, n_blocks=n_blocks, n_heads=n_heads)


def identity_projection(df: DocFormer) -> None:
    """Debug mode: make project() the identity (requires d == d_llm)."""
    if df.d != df.d_llm:
        raise ShapeError(f"identity projection needs d == d_llm, got {df.d} vs {df.d_llm}")
    d = df.d
    hid = df.params["proj.w1"].data.shape[1]
    df.params["proj.w1"].data = np.eye(d, hid, dtype=df.params["proj.w1"].data.dtype)
    df.params["proj.b1"].data[:] = 0.0
    df.params["proj.w2"].data = np.eye(hid, d, dtype=df.params["proj.w2"].data.dtype)
    df.params["proj.b2"].data[:] = 0.0
    df.proj_activation = "linear"


def _attend(x_q: Tensor, x_kv: Tensor, p, pre: str, n_heads: int,
            bias: np.ndarray | None = None) -> Tensor:
    def w(name):
        return p[f"{pre}.{name}"].tensor

    # no key bias: a per-query constant shift is softmax-invariant
    q = T.linear(x_q, w("wq"), w("bq"))
    k = T.linear(x_kv, w("wk"))
    v = T.linear(x_kv, w("wv"), w("bv"))
    out = T.attention(q, k, v, n_heads, bias=bias)
    return T.linear(out, w("wo"), w("bo"))


def bridge(
    z_vis: Tensor,
    z_ins: Tensor,
    z_ocr: Tensor,
    df: DocFormer,
    pad_mask: np.ndarray | None = None,
) -> Tensor:
    """Run the token rows through the block stack; returns the m bridged rows.

    pad_mask flags the valid rows of [z_ins; z_ocr] (True = real input); the
    m learnable rows are always valid. Masked rows cannot influence any
    other row's output.
    """
    for name, z in (("z_vis", z_vis), ("z_ins", z_ins), ("z_ocr", z_ocr)):
        if z.data.ndim != 2 or (z.data.shape[0] > 0 and z.data.shape[1] != df.d):
            raise ShapeError(f"{name} must be rows of width {df.d}, got {z.data.shape}")
    n_ctx = z_ins.data.shape[0] + z_ocr.data.shape[0]
    if pad_mask is not None and len(pad_mask) != n_ctx:
        raise ShapeError(f"pad_mask of {len(pad_mask)} rows for {n_ctx} context rows")

    x = T.concat_rows([df.params["z_token"].tensor, z_ins, z_ocr])
    key_bias = None
    if pad_mask is not None:
        bias = np.zeros((1, df.m + n_ctx), dtype=x.data.dtype)
        bias[0, df.m:] = np.where(np.asarray(pad_mask, dtype=bool), 0.0, MASK_FILL)
        key_bias = bias

    p = df.params
    for i in range(df.n_blocks):
        pre = f"block{i}"
        sa = _attend(x, x, p, f"{pre}.self", df.n_heads, bias=key_bias)
        x = T.layer_norm(T.add(x, sa), p[f"{pre}.ln1.g"].tensor, p[f"{pre}.ln1.b"].tensor)
        tok = T.slice_rows(x, 0, df.m)
        ca = _attend(tok, z_vis, p, f"{pre}.cross", df.n_heads)
        tok = T.layer_norm(T.add(tok, ca), p[f"{pre}.ln2.g"].tensor, p[f"{pre}.ln2.b"].tensor)
        if n_ctx:
            x = T.concat_rows([tok, T.slice_rows(x, df.m, df.m + n_ctx)])
        else:
            x = tok
        ffn_h = T.gelu(T.linear(x, p[f"{pre}.ffn.w1"].tensor, p[f"{pre}.ffn.b1"].tensor))
        ffn = T.linear(ffn_h, p[f"{pre}.ffn.w2"].tensor, p[f"{pre}.ffn.b2"].tensor)
        x = T.layer_norm(T.add(x, ffn), p[f"{pre}.ln3.g"].tensor, p[f"{pre}.ln3.b"].tensor)
    return T.slice_rows(x, 0, df.m)


def project(z_doc: Tensor, df: DocFormer) -> Tensor:
    """Rowwise two-layer FFN from bridge width d to the LM width d_llm."""
    if z_doc.data.shape != (df.m, df.d):
        raise ShapeError(f"z_doc must be {df.m}x{df.d}, got {z_doc.data.shape}")
    h = T.linear(z_doc, df.params["proj.w1"].tensor, df.params["proj.b1"].tensor)
    if df.proj_activation == "gelu":
        h = T.gelu(h)
    return T.linear(h, df.params["proj.w2"].tensor, df.params["proj.b2"].tensor)


@dataclass
class PageFeatures:
    """Per-page inputs to the bridge: visual rows, OCR rows, and the OCR ids."""

    z_vis: Tensor
    z_ocr: Tensor
    ocr_ids: list[int] = field(default_factory=list)
    pad_mask: np.ndarray | None = None


def encode_pages(
    pages: list[PageFeatures],
    z_ins: Tensor,
    df: DocFormer,
) -> tuple[Tensor, list[int]]:
    """Bridge and project each page, mean-pool the projections, join OCR ids.

    Page order is preserved in the concatenated ids, with a page-separator
    id between consecutive pages; pooling is an arithmetic mean, so it is
    order-invariant.
    """
    if not pages:
        raise EmptyDocument("document has no pages")
    pooled: Tensor | None = None
    ocr_concat: list[int] = []
    for j, page in enumerate(pages):
        n_ins = z_ins.data.shape[0]
        mask = page.pad_mask
        if mask is not None and len(mask) == page.z_ocr.data.shape[0]:
            mask = np.concatenate([np.ones(n_ins, dtype=bool), np.asarray(mask, dtype=bool)])
        z_doc = bridge(page.z_vis, z_ins, page.z_ocr, df, pad_mask=mask)
        h_doc = project(z_doc, df)
        pooled = h_doc if pooled is None else T.add(pooled, h_doc)
        if j:
            ocr_concat.append(PAGE_ID)
        ocr_concat.extend(page.ocr_ids)
    if len(pages) > 1:
        pooled = T.scale(pooled, 1.0 / len(pages))
    return pooled, ocr_concat
