"""Unified instruction-task instance format: types, validation, template rendering.

One instance couples document pages (with per-page OCR tokens and pixel
boxes), an instruction (intent / answer style / query / options), and gold
answers. Instances travel as one JSON object per line.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

log = logging.getLogger("vdu")

TASK_CLUSTERS = (
    "kie",
    "single_page_qa",
    "single_page_qa_discrete",
    "single_page_qa_visual",
    "single_page_qa_discrete_visual",
    "multi_page_qa",
    "document_nli",
    "dialogue",
    "captioning",
    "classification",
    "dla",
    "itm",
)

ANSWER_STYLES = (
    "extractive_span",
    "span_list",
    "free_form",
    "option_selection",
    "yes_no",
)

SPLITS = ("held_in", "held_out")
REGIMES = ("none", "cross_dataset", "cross_task", "cross_domain")

RECORD_FIELDS = (
    "dataset_id", "task_cluster", "split", "regime",
    "pages", "page_sizes", "ocr", "instruction", "answers",
)
INSTRUCTION_FIELDS = ("intent", "answer_style", "query", "options")


class EmptyTemplateSet(ValueError):
    """Template selection over an empty template list."""


class MissingField(ValueError):
    """A template placeholder has no value to fill it with."""


class RecordFormatError(ValueError):
    """A serialized record does not follow the interchange schema."""


@dataclass
class OcrToken:
    """One sub-word of OCR output with its page-pixel box (x1, y1, x2, y2)."""

    text: str
    box: tuple[float, float, float, float]


@dataclass
class Instruction:
    intent: str
    answer_style: str | None = None
    query: str | None = None
    options: list[str] | None = None


@dataclass
class InstructionTemplate:
    """Instruction text with optional {query} and {options} placeholders."""

    template_id: str
    text: str
    answer_style: str | None = None

    def needs_query(self) -> bool:
        return "{query}" in self.text

    def needs_options(self) -> bool:
        return "{options}" in self.text


@dataclass
class InstanceRecord:
    dataset_id: str
    task_cluster: str
    pages: list[str]
    page_sizes: list[tuple[int, int]]
    ocr: list[list[OcrToken]]
    instruction: Instruction
    answers: list[str]
    split: str = "held_in"
    regime: str = "none"


@dataclass
class ValidationReport:
    violations: list[str] = field(default_factory=list)

    def ok(self) -> bool:
        return not self.violations

    def add(self, message: str) -> None:
        self.violations.append(message)


def validate_instance(record: InstanceRecord) -> ValidationReport:
    """Collect every violated invariant; an empty report means the record is valid."""
    rep = ValidationReport()
    if record.task_cluster not in TASK_CLUSTERS:
        rep.add(f"task_cluster {record.task_cluster!r} not one of the {len(TASK_CLUSTERS)} clusters")
    if record.split not in SPLITS:
        rep.add(f"split {record.split!r} not in {SPLITS}")
    if record.regime not in REGIMES:
        rep.add(f"regime {record.regime!r} not in {REGIMES}")
    if not record.dataset_id:
        rep.add("dataset_id empty")

    n_pages, n_ocr, n_sizes = len(record.pages), len(record.ocr), len(record.page_sizes)
    if not (n_pages == n_ocr == n_sizes):
        rep.add(f"pages/ocr/page_sizes arity mismatch: {n_pages}/{n_ocr}/{n_sizes}")
    if n_pages < 1:
        rep.add("record has no pages")
    for p, (w, h) in enumerate(record.page_sizes):
        if w <= 0 or h <= 0:
            rep.add(f"page_sizes[{p}] not positive: ({w}, {h})")

    for p, tokens in enumerate(record.ocr):
        for i, tok in enumerate(tokens):
            x1, y1, x2, y2 = tok.box
            where = f"ocr[{p}][{i}]"
            if not tok.text:
                rep.add(f"{where}: empty token text")
            if x1 > x2:
                rep.add(f"{where}: x1 ≤ x2 violated ({x1} > {x2})")
            if y1 > y2:
                rep.add(f"{where}: y1 ≤ y2 violated ({y1} > {y2})")
            if min(x1, y1, x2, y2) < 0:
                rep.add(f"{where}: negative coordinate in {tok.box}")

    ins = record.instruction
    if not ins.intent:
        rep.add("instruction.intent empty")
    if ins.answer_style is not None and ins.answer_style not in ANSWER_STYLES:
        rep.add(f"instruction.answer_style {ins.answer_style!r} not in {ANSWER_STYLES}")
    if ins.answer_style == "option_selection" and not ins.options:
        rep.add("option_selection instruction without options")

    if not record.answers:
        rep.add("answers empty")
    return rep


def validate_template(template: InstructionTemplate) -> ValidationReport:
    rep = ValidationReport()
    if not template.text:
        rep.add(f"template {template.template_id}: empty text")
    for ph in ("{query}", "{options}"):
        if template.text.count(ph) > 1:
            rep.add(f"template {template.template_id}: placeholder {ph} appears more than once")
    if template.answer_style is not None and template.answer_style not in ANSWER_STYLES:
        rep.add(f"template {template.template_id}: unknown answer_style {template.answer_style!r}")
    return rep


def select_template(templates: list[InstructionTemplate], rng) -> InstructionTemplate:
    """Uniformly random template from the set; deterministic under a seeded stream."""
    if not templates:
        raise EmptyTemplateSet("no instruction templates to select from")
    return rng.choice(templates)


def format_options(options: list[str]) -> str:
    """Quote and join options, the last joined with "or"."""
    quoted = [f'"{o}"' for o in options]
    if len(quoted) == 1:
        return quoted[0]
    return ", ".join(quoted[:-1]) + f" or {quoted[-1]}"


def render_instruction(
    template: InstructionTemplate,
    query: str | None = None,
    options: list[str] | None = None,
) -> str:
    """Fill template placeholders verbatim; raise MissingField when a value is absent."""
    text = template.text
    if template.needs_query():
        if query is None:
            raise MissingField(f"template {template.template_id} needs a query")
        text = text.replace("{query}", query)
    if template.needs_options():
        if not options:
            raise MissingField(f"template {template.template_id} needs options")
        text = text.replace("{options}", format_options(options))
    return text


# ---------------------------------------------------------------------------
# JSONL interchange


def record_to_dict(record: InstanceRecord) -> dict:
    return {
        "dataset_id": record.dataset_id,
        "task_cluster": record.task_cluster,
        "split": record.split,
        "regime": record.regime,
        "pages": list(record.pages),
        "page_sizes": [list(ps) for ps in record.page_sizes],
        "ocr": [
            [{"text": t.text, "box": list(t.box)} for t in page]
            for page in record.ocr
        ],
        "instruction": {
            "intent": record.instruction.intent,
            "answer_style": record.instruction.answer_style,
            "query": record.instruction.query,
            "options": record.instruction.options,
        },
        "answers": list(record.answers),
    }


def record_from_dict(obj: dict, strict: bool = True) -> InstanceRecord:
    """Parse one interchange object. Unknown fields are rejected in strict mode,
    otherwise logged and dropped."""
    if not isinstance(obj, dict):
        raise RecordFormatError("record must be a JSON object")
    unknown = set(obj) - set(RECORD_FIELDS)
    if unknown:
        if strict:
            raise RecordFormatError(f"unknown record fields: {sorted(unknown)}")
        log.warning("ignoring unknown record fields: %s", sorted(unknown))
    missing = [k for k in RECORD_FIELDS if k not in obj]
    if missing:
        raise RecordFormatError(f"missing record fields: {missing}")

    ins_obj = obj["instruction"]
    if not isinstance(ins_obj, dict):
        raise RecordFormatError("instruction must be an object")
    ins_unknown = set(ins_obj) - set(INSTRUCTION_FIELDS)
    if ins_unknown:
        if strict:
            raise RecordFormatError(f"unknown instruction fields: {sorted(ins_unknown)}")
        log.warning("ignoring unknown instruction fields: %s", sorted(ins_unknown))

    try:
        ocr = [
            [OcrToken(text=t["text"], box=tuple(float(c) for c in t["box"])) for t in page]
            for page in obj["ocr"]
        ]
        record = InstanceRecord(
            dataset_id=obj["dataset_id"],
            task_cluster=obj["task_cluster"],
            split=obj["split"],
            regime=obj["regime"],
            pages=list(obj["pages"]),
            page_sizes=[tuple(ps) for ps in obj["page_sizes"]],
            ocr=ocr,
            instruction=Instruction(
                intent=ins_obj.get("intent", ""),
                answer_style=ins_obj.get("answer_style"),
                query=ins_obj.get("query"),
                options=ins_obj.get("options"),
            ),
            answers=list(obj["answers"]),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise RecordFormatError(f"malformed record: {exc}") from exc
    return record


def record_to_json(record: InstanceRecord) -> str:
    return json.dumps(record_to_dict(record), ensure_ascii=False, sort_keys=True)


def record_from_json(line: str, strict: bool = True) -> InstanceRecord:
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        raise RecordFormatError(f"invalid JSON: {exc}") from exc
    return record_from_dict(obj, strict=strict)
