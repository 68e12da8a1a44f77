"""Deterministic synthetic corpus covering the task clusters end to end.

Pages are rendered as filled rectangles per character cell (the vision
stand-in only needs geometry, not typography) and written as PPM, with the
exact glyph-grid boxes as ground-truth OCR. Every dataset ships at least
five instruction templates; extractive answers are verbatim OCR spans and
the two-page task requires tokens from both pages.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .encoder import quantize_bbox, write_ppm
from .tensor import RandomStream

CHAR_W, CHAR_H = 6, 10
GAP_Y = 4
MARGIN = 8

_SYLLABLES = ["ba", "do", "ku", "mi", "ra", "te", "vo", "zu", "pe", "li", "sa", "no"]
_LETTERS = "abcdefghijklmnopqrstuvwxyz"


@dataclass
class GenSpec:
    seed: int = 0
    counts: dict[str, int] = field(default_factory=lambda: dict(_DEFAULT_COUNTS))
    vocab_size: int = 64
    page_w: int = 224
    page_h: int = 224
    max_pages: int = 2
    ocr_noise: float = 0.0

    @staticmethod
    def from_json(text: str) -> "GenSpec":
        obj = json.loads(text)
        spec = GenSpec()
        for key, value in obj.items():
            if not hasattr(spec, key):
                raise ValueError(f"unknown generator field {key!r}")
            setattr(spec, key, value)
        if "counts" in obj:
            spec.counts = {k: int(v) for k, v in obj["counts"].items()}
        return spec


class WordBank:
    """Fixed inventory of distinct pronounceable words drawn per seed."""

    def __init__(self, rng: RandomStream, size: int):
        words: list[str] = []
        seen = set()
        while len(words) < size:
            n_syl = 2 + rng.randint(2)
            word = "".join(rng.choice(_SYLLABLES) for _ in range(n_syl))
            if word not in seen:
                seen.add(word)
                words.append(word)
        self.words = words

    def pick(self, rng: RandomStream) -> str:
        return rng.choice(self.words)

    def distinct(self, rng: RandomStream, n: int) -> list[str]:
        idxs = rng.sample_indices(len(self.words), n)
        return [self.words[i] for i in idxs]


def _char_color(ch: str) -> tuple[int, int, int]:
    code = ord(ch)
    return (40 + (code * 37) % 160, 40 + (code * 59) % 160, 40 + (code * 83) % 160)


def layout_words(lines: list[list[str]], page_w: int, page_h: int):
    """Grid layout: one box per word, left to right, top to bottom."""
    tokens = []
    y = MARGIN
    for line in lines:
        x = MARGIN
        for word in line:
            w_px = len(word) * CHAR_W
            if x + w_px > page_w - MARGIN:
                raise ValueError(f"line overflow at word {word!r}")
            tokens.append((word, (x, y, x + w_px, y + CHAR_H)))
            x += w_px + CHAR_W
        y += CHAR_H + GAP_Y
    if y > page_h - MARGIN:
        raise ValueError("page overflow")
    return tokens


def render_page(tokens, page_w: int, page_h: int) -> np.ndarray:
    img = np.full((page_h, page_w, 3), 255, dtype=np.uint8)
    for word, (x1, y1, x2, y2) in tokens:
        for i, ch in enumerate(word):
            cx = x1 + i * CHAR_W
            img[y1:y2, cx:cx + CHAR_W - 1] = _char_color(ch)
    return img


def _apply_noise(tokens, rng: RandomStream, prob: float):
    if prob <= 0:
        return tokens
    noisy = []
    for word, box in tokens:
        if rng.uniform() < prob and len(word) > 1:
            i = rng.randint(len(word))
            word = word[:i] + rng.choice(_LETTERS) + word[i + 1:]
        noisy.append((word, box))
    return noisy


class _PageWriter:
    def __init__(self, ddir: Path, spec: GenSpec, rng: RandomStream):
        self.pages_dir = ddir / "pages"
        self.pages_dir.mkdir(parents=True, exist_ok=True)
        self.spec = spec
        self.rng = rng
        self.n = 0

    def write(self, lines: list[list[str]]) -> tuple[str, list[dict]]:
        """Render one page; returns (relative path, ocr token dicts)."""
        tokens = layout_words(lines, self.spec.page_w, self.spec.page_h)
        img = render_page(tokens, self.spec.page_w, self.spec.page_h)
        name = f"p_{self.n:04d}.ppm"
        self.n += 1
        write_ppm(self.pages_dir / name, img)
        ocr = _apply_noise(tokens, self.rng, self.spec.ocr_noise)
        side = {
            "width": self.spec.page_w,
            "height": self.spec.page_h,
            "tokens": [{"text": w, "box": list(b)} for w, b in ocr],
        }
        (self.pages_dir / name).with_suffix(".ocr.json").write_text(
            json.dumps(side, sort_keys=True), encoding="utf-8"
        )
        return f"pages/{name}", side["tokens"]


# ---------------------------------------------------------------------------
# per-task generators: each returns instance rows for instances.jsonl

_KIE_LABELS = ["name", "date", "total", "city", "item", "code"]


def _gen_kie(rng, bank, writer, n):
    rows = []
    for i in range(n):
        k = 4 + rng.randint(3)
        labels = [_KIE_LABELS[rng.randint(len(_KIE_LABELS))] for _ in range(k)]
        values = bank.distinct(rng, k)
        page, _ = writer.write([[lab, val] for lab, val in zip(labels, values)])
        j = rng.randint(k)
        rows.append({
            "id": i, "pages": [page], "query": values[j],
            "options": sorted(set(_KIE_LABELS)), "answers": [labels[j]],
        })
    return rows


def _gen_extractive(rng, bank, writer, n):
    rows = []
    for i in range(n):
        k = 4 + rng.randint(3)
        keys = bank.distinct(rng, k)
        values = bank.distinct(rng, k)
        page, _ = writer.write([[key, val] for key, val in zip(keys, values)])
        j = rng.randint(k)
        rows.append({
            "id": i, "pages": [page],
            "query": f"what is the value of {keys[j]}?",
            "options": None, "answers": [values[j]],
        })
    return rows


def _gen_options(rng, bank, writer, n):
    rows = []
    for i in range(n):
        words = bank.distinct(rng, 9)
        present, absent = words[:6], words[6:]
        page, _ = writer.write([present[:3], present[3:]])
        answer = present[rng.randint(len(present))]
        options = sorted([answer] + absent)
        rows.append({
            "id": i, "pages": [page],
            "query": "which of these words appears in the document?",
            "options": options, "answers": [answer],
        })
    return rows


def _gen_nli(rng, bank, writer, n):
    rows = []
    for i in range(n):
        k = 4
        keys = bank.distinct(rng, k)
        values = bank.distinct(rng, k)
        page, _ = writer.write([[key, val] for key, val in zip(keys, values)])
        j = rng.randint(k)
        truthy = rng.uniform() < 0.5
        stated = values[j] if truthy else values[(j + 1) % k]
        rows.append({
            "id": i, "pages": [page],
            "query": f"the {keys[j]} is {stated}",
            "options": ["yes", "no"], "answers": ["yes" if truthy else "no"],
        })
    return rows


def _gen_multihop(rng, bank, writer, n):
    rows = []
    for i in range(n):
        entity, ref = bank.distinct(rng, 2)
        value = bank.pick(rng)
        fill1 = bank.distinct(rng, 2)
        fill2 = bank.distinct(rng, 2)
        page1, _ = writer.write([[entity, "see", ref], fill1])
        page2, _ = writer.write([[ref, value], fill2])
        rows.append({
            "id": i, "pages": [page1, page2],
            "query": f"what value does {entity} point to?",
            "options": None, "answers": [value],
        })
    return rows


_DOC_CLASSES = ["letter", "invoice", "memo", "report"]


def _gen_class(rng, bank, writer, n):
    rows = []
    for i in range(n):
        cls = _DOC_CLASSES[rng.randint(len(_DOC_CLASSES))]
        noise = bank.distinct(rng, 4)
        page, _ = writer.write([[cls], noise[:2], noise[2:]])
        rows.append({
            "id": i, "pages": [page], "query": None,
            "options": sorted(_DOC_CLASSES), "answers": [cls],
        })
    return rows


_DLA_CLASSES = ["title", "paragraph", "table", "figure"]


def _gen_dla(rng, bank, writer, n):
    rows = []
    for i in range(n):
        n_regions = 2 + rng.randint(2)
        lines = []
        classes = []
        for _ in range(n_regions):
            classes.append(_DLA_CLASSES[rng.randint(len(_DLA_CLASSES))])
            lines.append(bank.distinct(rng, 2))
        page, tokens = writer.write(lines)
        parts = []
        for r, cls in enumerate(classes):
            boxes = [tokens[2 * r + c]["box"] for c in range(2)]
            x1 = min(b[0] for b in boxes)
            y1 = min(b[1] for b in boxes)
            x2 = max(b[2] for b in boxes)
            y2 = max(b[3] for b in boxes)
            q = quantize_bbox(
                (x1, y1, x2, y2), writer.spec.page_w, writer.spec.page_h
            )
            parts.append(f"{cls} [{q[0]}, {q[1]}, {q[2]}, {q[3]}]")
        rows.append({
            "id": i, "pages": [page], "query": None,
            "options": sorted(_DLA_CLASSES), "answers": [" ".join(parts)],
        })
    return rows


# ---------------------------------------------------------------------------
# template sets (>= 5 per dataset)


def _templates(prefix, texts, style):
    return [
        {"template_id": f"{prefix}-t{i}", "text": t, "answer_style": style}
        for i, t in enumerate(texts)
    ]


_KIE_T = _templates("kie", [
    'There are several categories for selection: {options}. Please output the '
    'category corresponding to the text "{query}".',
    'Assign one label from {options} to the document text "{query}".',
    'I want to know the field type of "{query}". Choose from {options}.',
    'Which category does "{query}" belong to? Select from {options}, and you '
    "should not output other than the selected option.",
    'Read the document and classify the text "{query}" into {options}.',
], "option_selection")

_EXTRACT_T = _templates("ext", [
    'Answer shortly the following question "{query}" based on the document.',
    'You must answer to the question "{query}" after reading and comprehending '
    "the document.",
    'Respond to the question "{query}" with a short answer based on the content '
    "of the document.",
    'Provide your short answer to the question "{query}". The answer is directly '
    "extracted from the words in the image.",
    'I want to know a short answer to the question "{query}". Directly answer '
    "from the document with 1 to 3 words.",
], "extractive_span")

_OPTIONS_T = _templates("opt", [
    'Answer shortly the following question "{query}" based on the document. '
    "Please select one answer from the following options: {options}.",
    'Respond to "{query}". Answers are selected from given options {options}, '
    "and you should not output other than the selected option.",
    '"{query}" Choose exactly one of {options}.',
    'After reading the document, answer "{query}" by picking one of {options}.',
    'I want to know the answer to "{query}". Select it from {options}.',
], "option_selection")

_NLI_T = _templates("nli", [
    'Can we conclude that "{query}", based on the content of the given document? '
    "Answers are selected from given options {options}, and you should not "
    "output other than the selected option.",
    'Based on the document, is the statement "{query}" true? Answer {options}.',
    'Does the document support the claim "{query}"? Reply with {options}.',
    'I want to know a short answer. Can we conclude that "{query}" from the '
    "document? Answer with {options} only.",
    'Judge the statement "{query}" against the document and output one of {options}.',
], "yes_no")

_MULTIHOP_T = _templates("mh", [
    'Respond to the question "{query}" with a short answer based on the content '
    "of the multi-page document.",
    'You must answer "{query}" after reading all pages of the document.',
    'Answer shortly the question "{query}". The answer requires combining '
    "information across pages.",
    'Provide a short answer to "{query}" using evidence from every page.',
    'I want to know the answer to "{query}" based on the multi-page document. '
    "Answer with 1 to 3 words.",
], "extractive_span")

_CLASS_T = _templates("cls", [
    "Pick up a suitable class from following classes: {options}.",
    "Classify the document into one of {options}.",
    "Which document type fits best? Select from {options}, and you should not "
    "output other than the selected option.",
    "Read the document and output its class chosen from {options}.",
    "I want to know the document type. Answer with one of {options}.",
], "option_selection")

_DLA_T = _templates("dla", [
    "Please detect all regions that meet following classes: {options}.",
    "List every region of the document with its class from {options} and its box.",
    "Find all layout regions. Classes: {options}. Output each as class "
    "[x1, y1, x2, y2].",
    "Detect the document components among {options} with bounding boxes.",
    "Output all regions matching {options} in reading order with their boxes.",
], "free_form")


# dataset id -> (generator, templates, cluster, split, regime, metric, with_f1)
SYNTH_DATASETS = {
    "synth_kie": (_gen_kie, _KIE_T, "kie", "held_in", "none", "anls", False),
    "synth_extract": (_gen_extractive, _EXTRACT_T, "single_page_qa", "held_in", "none", "anls", False),
    "synth_options": (_gen_options, _OPTIONS_T, "single_page_qa_visual", "held_in", "none", "anls", False),
    "synth_nli": (_gen_nli, _NLI_T, "document_nli", "held_in", "none", "accuracy", False),
    "synth_multihop": (_gen_multihop, _MULTIHOP_T, "multi_page_qa", "held_in", "none", "em", False),
    "synth_class": (_gen_class, _CLASS_T, "classification", "held_in", "none", "accuracy", False),
    "synth_dla": (_gen_dla, _DLA_T, "dla", "held_in", "none", "anls", False),
    "synth_extract_x": (_gen_extractive, _EXTRACT_T, "single_page_qa", "held_out", "cross_dataset", "anls", True),
    "synth_kie_x": (_gen_kie, _KIE_T, "kie", "held_out", "cross_dataset", "entity_f1", True),
    "synth_nli_x": (_gen_nli, _NLI_T, "document_nli", "held_out", "cross_task", "accuracy", True),
    "synth_multihop_x": (_gen_multihop, _MULTIHOP_T, "multi_page_qa", "held_out", "cross_domain", "em", True),
}

_DEFAULT_COUNTS = {
    "synth_kie": 8,
    "synth_extract": 8,
    "synth_options": 8,
    "synth_nli": 8,
    "synth_multihop": 4,
    "synth_class": 8,
    "synth_dla": 4,
    "synth_extract_x": 4,
    "synth_kie_x": 4,
    "synth_nli_x": 4,
    "synth_multihop_x": 4,
}


def generate(spec: GenSpec, out_dir) -> Path:
    """Write the corpus in the synthetic-adapter layout; byte-stable per seed."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    root_rng = RandomStream(spec.seed)
    bank = WordBank(root_rng.derive("bank"), spec.vocab_size)
    for did in sorted(spec.counts):
        n = spec.counts[did]
        if n <= 0:
            continue
        if did not in SYNTH_DATASETS:
            raise ValueError(f"unknown synthetic dataset {did!r}")
        gen, templates, cluster, split, regime, metric, with_f1 = SYNTH_DATASETS[did]
        ddir = out_dir / did
        ddir.mkdir(parents=True, exist_ok=True)
        rng = root_rng.derive(f"data/{did}")
        writer = _PageWriter(ddir, spec, rng.derive("noise"))
        rows = gen(rng, bank, writer, n)
        (ddir / "dataset.json").write_text(json.dumps({
            "dataset_id": did,
            "task_cluster": cluster,
            "split": split,
            "regime": regime,
            "primary_metric": metric,
            "with_f1": with_f1,
        }, indent=2, sort_keys=True), encoding="utf-8")
        (ddir / "templates.json").write_text(
            json.dumps(templates, indent=2, sort_keys=True), encoding="utf-8"
        )
        with open(ddir / "instances.jsonl", "w", encoding="utf-8") as fh:
            for row in rows:
                fh.write(json.dumps(row, sort_keys=True) + "\n")
    return out_dir
