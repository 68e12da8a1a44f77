"""Dataset ingestion: adapters to the unified format, splits, sampling, statistics.

The registry mirrors the 30-source-dataset collection (23 held-in, 7 held-out
across the cross-dataset / cross-task / cross-domain evaluation regimes);
extra datasets (e.g. the bundled synthetic ones) register themselves at
conversion time from their sidecar metadata.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field
from importlib import resources as importlib_resources
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

from .schema import (
    InstanceRecord,
    Instruction,
    InstructionTemplate,
    OcrToken,
    RecordFormatError,
    record_from_json,
    record_to_json,
    render_instruction,
    validate_instance,
)
from .tensor import RandomStream

log = logging.getLogger("vdu")


class UnknownLabel(KeyError):
    pass


class UnknownDataset(KeyError):
    pass


class ParseError(ValueError):
    """Source file failed to parse; message carries path and position."""


class ConversionError(ValueError):
    """An emitted record failed validation; conversion aborts."""


class AdapterNotImplemented(NotImplementedError):
    pass


# ---------------------------------------------------------------------------
# dataset registry


@dataclass(frozen=True)
class DatasetInfo:
    dataset_id: str
    task_cluster: str
    split: str                  # held_in | held_out
    regime: str                 # none | cross_dataset | cross_task | cross_domain
    primary_metric: str = "anls"
    with_f1: bool = False


def _info(did, cluster, split="held_in", regime="none", metric="anls", with_f1=False):
    return DatasetInfo(did, cluster, split, regime, metric, with_f1)


_PAPER_DATASETS: dict[str, DatasetInfo] = {
    d.dataset_id: d
    for d in [
        _info("DocILE", "kie"),
        _info("KLC", "kie"),
        _info("Deepform", "kie"),
        _info("PWC", "kie"),
        _info("Wildreceipt", "kie"),
        _info("SROIE", "kie"),
        _info("FUNSD", "kie", "held_out", "cross_dataset", "entity_f1", True),
        _info("CORD", "kie", "held_out", "cross_dataset", "entity_f1", True),
        _info("VisualMRC", "single_page_qa", metric="rouge_l"),
        _info("WebSRC", "single_page_qa"),
        _info("OCRVQA", "single_page_qa"),
        _info("DocVQA", "single_page_qa"),
        _info("HW-SQuAD", "single_page_qa"),
        _info("TAT-DQA", "single_page_qa_discrete"),
        _info("WTQ", "single_page_qa_discrete"),
        _info("IconQA", "single_page_qa_visual"),
        _info("AI2D", "single_page_qa_visual"),
        _info("ScienceQA", "single_page_qa_visual"),
        _info("TextbookQA", "single_page_qa_visual"),
        _info("InfographicVQA", "single_page_qa_discrete_visual", "held_out", "cross_task", "anls", True),
        _info("ChartQA", "single_page_qa_discrete_visual", "held_out", "cross_task", "relaxed_accuracy", True),
        _info("SlideVQA", "multi_page_qa", "held_out", "cross_domain", "em", True),
        _info("DUDE", "multi_page_qa", "held_out", "cross_domain", "anls", True),
        _info("TabFact", "document_nli", "held_out", "cross_task", "accuracy", True),
        _info("LLaVAR", "dialogue"),
        _info("RVL-CDIP", "classification"),
        _info("SciCap", "captioning"),
        _info("Screen2Words", "captioning"),
        _info("DocBank", "dla"),
        _info("DocLaynet", "dla"),
    ]
}

_runtime_datasets: dict[str, DatasetInfo] = {}


def paper_dataset_ids() -> list[str]:
    return list(_PAPER_DATASETS)


def register_dataset(info: DatasetInfo) -> None:
    if info.dataset_id in _PAPER_DATASETS:
        raise ValueError(f"{info.dataset_id} is a fixed registry entry")
    _runtime_datasets[info.dataset_id] = info


def dataset_info(dataset_id: str) -> DatasetInfo:
    info = _PAPER_DATASETS.get(dataset_id) or _runtime_datasets.get(dataset_id)
    if info is None:
        raise UnknownDataset(f"dataset {dataset_id!r} is not registered")
    return info


def assign_split(dataset_id: str) -> tuple[str, str]:
    """(split, regime) for a registered dataset id."""
    info = dataset_info(dataset_id)
    return info.split, info.regime


# ---------------------------------------------------------------------------
# query rephrasing


def _load_rephrase_tables() -> dict[str, dict[str, str]]:
    payload = importlib_resources.files("vdu.resources").joinpath("rephrase_v1.json")
    return json.loads(payload.read_text(encoding="utf-8"))["tables"]


_REPHRASE = _load_rephrase_tables()


def rephrase_query(dataset_id: str, raw_label: str) -> str:
    """Map an abbreviated KIE query label to its readable canonical form."""
    table = _REPHRASE.get(dataset_id)
    if table is None:
        raise UnknownDataset(f"no rephrase table for dataset {dataset_id!r}")
    if raw_label not in table:
        raise UnknownLabel(
            f"{dataset_id} has no label {raw_label!r}; valid labels: {sorted(table)}"
        )
    return table[raw_label]


def rephrase_table(dataset_id: str) -> dict[str, str]:
    table = _REPHRASE.get(dataset_id)
    if table is None:
        raise UnknownDataset(f"no rephrase table for dataset {dataset_id!r}")
    return dict(table)


# ---------------------------------------------------------------------------
# manifest


@dataclass
class ManifestEntry:
    path: str           # records JSONL, relative to the manifest file when saved
    line: int           # 0-based line offset inside the records file
    dataset_id: str
    split: str
    regime: str

    @property
    def instance_id(self) -> str:
        return f"{self.dataset_id}:{self.line}"


@dataclass
class Manifest:
    entries: list[ManifestEntry] = field(default_factory=list)
    counts: dict[str, int] = field(default_factory=dict)
    templates: dict[str, list[InstructionTemplate]] = field(default_factory=dict)

    def recount(self) -> None:
        counts: dict[str, int] = {}
        for e in self.entries:
            counts[e.dataset_id] = counts.get(e.dataset_id, 0) + 1
        self.counts = counts

    def save(self, path) -> None:
        path = Path(path)
        obj = {
            "version": 1,
            "entries": [
                {
                    "path": e.path,
                    "line": e.line,
                    "dataset_id": e.dataset_id,
                    "split": e.split,
                    "regime": e.regime,
                }
                for e in self.entries
            ],
            "counts": dict(sorted(self.counts.items())),
            "templates": {
                did: [
                    {"template_id": t.template_id, "text": t.text, "answer_style": t.answer_style}
                    for t in temps
                ]
                for did, temps in sorted(self.templates.items())
            },
        }
        path.write_text(json.dumps(obj, indent=2, ensure_ascii=False, sort_keys=True) + "\n",
                        encoding="utf-8")

    @staticmethod
    def load(path) -> "Manifest":
        path = Path(path)
        obj = json.loads(path.read_text(encoding="utf-8"))
        entries = [
            ManifestEntry(
                path=e["path"], line=e["line"], dataset_id=e["dataset_id"],
                split=e["split"], regime=e["regime"],
            )
            for e in obj["entries"]
        ]
        templates = {
            did: [InstructionTemplate(t["template_id"], t["text"], t.get("answer_style"))
                  for t in temps]
            for did, temps in obj.get("templates", {}).items()
        }
        man = Manifest(entries=entries, templates=templates)
        man.counts = {k: int(v) for k, v in obj.get("counts", {}).items()}
        return man


def rebase_manifest_paths(manifest: Manifest, old_base, new_base) -> None:
    """Rewrite relative entry paths from one manifest directory to another."""
    old_base, new_base = str(old_base), str(new_base)
    for e in manifest.entries:
        if not os.path.isabs(e.path):
            absolute = os.path.normpath(os.path.join(old_base, e.path))
            e.path = os.path.relpath(absolute, new_base)


def merge_manifests(manifests: Iterable[Manifest]) -> Manifest:
    merged = Manifest()
    for m in manifests:
        merged.entries.extend(m.entries)
        for did, temps in m.templates.items():
            merged.templates.setdefault(did, temps)
    merged.recount()
    return merged


_line_cache: dict[str, list[str]] = {}


def _lines_of(path: str) -> list[str]:
    cached = _line_cache.get(path)
    if cached is None:
        with open(path, "r", encoding="utf-8") as fh:
            cached = fh.read().splitlines()
        if len(_line_cache) > 64:
            _line_cache.clear()
        _line_cache[path] = cached
    return cached


def load_entry(entry: ManifestEntry, base_dir=None, strict: bool = True) -> InstanceRecord:
    """Read one record by manifest offset; paths resolve against base_dir."""
    path = entry.path
    if base_dir is not None and not os.path.isabs(path):
        path = os.path.join(str(base_dir), path)
    try:
        line = _lines_of(path)[entry.line]
    except (OSError, IndexError) as exc:
        raise ParseError(f"{path}:{entry.line}: cannot read record ({exc})") from exc
    try:
        return record_from_json(line, strict=strict)
    except RecordFormatError as exc:
        raise ParseError(f"{path}:{entry.line}: {exc}") from exc


def resolve_page_path(record_page: str, records_path) -> str:
    if os.path.isabs(record_page):
        return record_page
    return os.path.normpath(os.path.join(os.path.dirname(str(records_path)), record_page))


# ---------------------------------------------------------------------------
# adapters

# An adapter reads one source layout and yields unified records in a
# deterministic order (sorted by source path, then in-file index), plus the
# dataset's instruction template sets.


@dataclass
class AdapterResult:
    records: list[InstanceRecord]
    page_roots: list[str]       # absolute page paths, aligned with records' pages
    templates: dict[str, list[InstructionTemplate]]


AdapterFn = Callable[[Path], AdapterResult]

_ADAPTERS: dict[str, AdapterFn] = {}
_ADAPTER_LAYOUTS: dict[str, str] = {}


def register_adapter(adapter_id: str, layout_doc: str, fn: AdapterFn | None = None) -> None:
    _ADAPTER_LAYOUTS[adapter_id] = layout_doc
    if fn is not None:
        _ADAPTERS[adapter_id] = fn


def adapter_ids() -> list[str]:
    return sorted(_ADAPTER_LAYOUTS)


def convert_dataset(adapter_id: str, source_dir, out_path, strict: bool = True) -> Manifest:
    """Run one adapter over a source tree and emit unified JSONL plus a manifest.

    Any record that fails validation aborts the conversion; output order is
    deterministic regardless of filesystem enumeration order.
    """
    if adapter_id not in _ADAPTER_LAYOUTS:
        raise AdapterNotImplemented(f"unknown adapter {adapter_id!r}; known: {adapter_ids()}")
    fn = _ADAPTERS.get(adapter_id)
    if fn is None:
        raise AdapterNotImplemented(
            f"adapter {adapter_id!r} is registered for the documented layout only:\n"
            f"{_ADAPTER_LAYOUTS[adapter_id]}"
        )
    source_dir = Path(source_dir)
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    result = fn(source_dir)
    if not result.records:
        log.warning("adapter %s produced no records from %s", adapter_id, source_dir)

    out_dir = out_path.parent.resolve()
    manifest = Manifest(templates=result.templates)
    with open(out_path, "w", encoding="utf-8") as fh:
        for i, record in enumerate(result.records):
            record.pages = [
                os.path.relpath(p, start=str(out_dir)) if os.path.isabs(p) else p
                for p in record.pages
            ]
            report = validate_instance(record)
            if not report.ok():
                raise ConversionError(
                    f"{adapter_id}: record {i} invalid: {'; '.join(report.violations)}"
                )
            fh.write(record_to_json(record) + "\n")
            manifest.entries.append(
                ManifestEntry(
                    path=out_path.name, line=i, dataset_id=record.dataset_id,
                    split=record.split, regime=record.regime,
                )
            )
    _line_cache.pop(str(out_path), None)
    manifest.recount()
    return manifest


def _read_json(path: Path):
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: offset {exc.pos}: {exc.msg}") from exc
    except OSError as exc:
        raise ParseError(f"{path}: {exc}") from exc


def _read_jsonl(path: Path) -> list[dict]:
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rows.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise ParseError(f"{path}: line {lineno}: {exc.msg}") from exc
    return rows


# -- synthetic corpus adapter


def _load_templates_file(path: Path) -> list[InstructionTemplate]:
    return [
        InstructionTemplate(t["template_id"], t["text"], t.get("answer_style"))
        for t in _read_json(path)
    ]


def _adapt_synthetic(source_dir: Path) -> AdapterResult:
    records: list[InstanceRecord] = []
    templates: dict[str, list[InstructionTemplate]] = {}
    dataset_dirs = sorted(p for p in source_dir.iterdir() if p.is_dir())
    if not dataset_dirs:
        return AdapterResult([], [], {})
    for ddir in dataset_dirs:
        meta = _read_json(ddir / "dataset.json")
        did = meta["dataset_id"]
        info = DatasetInfo(
            dataset_id=did,
            task_cluster=meta["task_cluster"],
            split=meta["split"],
            regime=meta["regime"],
            primary_metric=meta.get("primary_metric", "anls"),
            with_f1=bool(meta.get("with_f1", False)),
        )
        if did not in _PAPER_DATASETS and did not in _runtime_datasets:
            register_dataset(info)
        temps = _load_templates_file(ddir / "templates.json")
        templates[did] = temps
        for idx, row in enumerate(_read_jsonl(ddir / "instances.jsonl")):
            pages, sizes, ocr = [], [], []
            for page_rel in row["pages"]:
                page_path = ddir / page_rel
                side = _read_json(page_path.with_suffix(".ocr.json"))
                sizes.append((side["width"], side["height"]))
                ocr.append([OcrToken(t["text"], tuple(t["box"])) for t in side["tokens"]])
                pages.append(str(page_path.resolve()))
            template = temps[idx % len(temps)]
            intent = render_instruction(template, row.get("query"), row.get("options"))
            records.append(
                InstanceRecord(
                    dataset_id=did,
                    task_cluster=info.task_cluster,
                    split=info.split,
                    regime=info.regime,
                    pages=pages,
                    page_sizes=sizes,
                    ocr=ocr,
                    instruction=Instruction(
                        intent=intent,
                        answer_style=template.answer_style,
                        query=row.get("query"),
                        options=row.get("options"),
                    ),
                    answers=list(row["answers"]),
                )
            )
    return AdapterResult(records, [], templates)


register_adapter(
    "synthetic",
    "per-dataset dirs with dataset.json, templates.json, instances.jsonl and "
    "pages/*.ppm beside pages/*.ocr.json ground truth",
    _adapt_synthetic,
)


# -- FUNSD-layout adapter

_FUNSD_TEMPLATES = [
    InstructionTemplate(
        "funsd-t0",
        'There are several categories for selection: {options}. '
        'Please output the category corresponding to the text "{query}".',
        "option_selection",
    ),
    InstructionTemplate(
        "funsd-t1",
        'Assign a semantic label to the document text "{query}". '
        "Select the label from {options}.",
        "option_selection",
    ),
    InstructionTemplate(
        "funsd-t2",
        'Which category does the form text "{query}" belong to? '
        "Pick one of {options}.",
        "option_selection",
    ),
    InstructionTemplate(
        "funsd-t3",
        'Read the form and classify the text "{query}" into one of {options}, '
        "and you should not output other than the selected option.",
        "option_selection",
    ),
    InstructionTemplate(
        "funsd-t4",
        'I want to know the entity type of "{query}". Answer with exactly one '
        "of {options}.",
        "option_selection",
    ),
]


def _adapt_funsd(source_dir: Path) -> AdapterResult:
    """FUNSD layout: annotations/*.json with a "form" list of entities, each
    carrying text, box [x1,y1,x2,y2], label and words; optional page_size."""
    ann_dir = source_dir / "annotations"
    table = rephrase_table("FUNSD")
    label_options = sorted(set(table.values()))
    records = []
    for path in sorted(ann_dir.glob("*.json")) if ann_dir.is_dir() else []:
        doc = _read_json(path)
        form = doc.get("form")
        if form is None:
            raise ParseError(f"{path}: missing 'form' key")
        tokens: list[OcrToken] = []
        for ent in form:
            for w in ent.get("words", []):
                if w.get("text"):
                    tokens.append(OcrToken(w["text"], tuple(float(c) for c in w["box"])))
        if "page_size" in doc:
            width, height = doc["page_size"]
        else:
            width = max((t.box[2] for t in tokens), default=1.0) + 1
            height = max((t.box[3] for t in tokens), default=1.0) + 1
        page_img = source_dir / "images" / (path.stem + ".ppm")
        for ent in form:
            label = ent.get("label")
            if label == "other" or not ent.get("text"):
                continue
            if label not in table:
                raise ParseError(f"{path}: unknown FUNSD label {label!r}")
            answer = table[label]
            template = _FUNSD_TEMPLATES[len(records) % len(_FUNSD_TEMPLATES)]
            records.append(
                InstanceRecord(
                    dataset_id="FUNSD",
                    task_cluster="kie",
                    split="held_out",
                    regime="cross_dataset",
                    pages=[str(page_img.resolve())],
                    page_sizes=[(int(width), int(height))],
                    ocr=[tokens],
                    instruction=Instruction(
                        intent=render_instruction(template, ent["text"], label_options),
                        answer_style="option_selection",
                        query=ent["text"],
                        options=label_options,
                    ),
                    answers=[answer],
                )
            )
    return AdapterResult(records, [], {"FUNSD": _FUNSD_TEMPLATES})


register_adapter(
    "funsd",
    "annotations/*.json with form entities (text, box, label, words); "
    "optional page_size [w, h]; page images under images/<stem>.ppm",
    _adapt_funsd,
)


# -- CORD-layout adapter

_CORD_TEMPLATES = [
    InstructionTemplate(
        "cord-t0",
        "There are 30 categories for selection: {options}. "
        'Please output the category corresponding to the text "{query}".',
        "option_selection",
    ),
    InstructionTemplate(
        "cord-t1",
        'What is the receipt category of the text "{query}"? Choose from {options}.',
        "option_selection",
    ),
    InstructionTemplate(
        "cord-t2",
        'Label the receipt text "{query}" with one of {options}.',
        "option_selection",
    ),
    InstructionTemplate(
        "cord-t3",
        'Output the category for "{query}" selected from {options}, and you '
        "should not output other than the selected option.",
        "option_selection",
    ),
    InstructionTemplate(
        "cord-t4",
        'I want to know which category the text "{query}" falls under. '
        "Answer with one of {options}.",
        "option_selection",
    ),
]


def _quad_to_box(word: dict) -> tuple[float, float, float, float]:
    if "box" in word:
        return tuple(float(c) for c in word["box"])
    q = word["quad"]
    return float(q["x1"]), float(q["y1"]), float(q["x3"]), float(q["y3"])


def _adapt_cord(source_dir: Path) -> AdapterResult:
    """CORD layout: one *.json per receipt with meta.image_size and valid_line
    entries (category plus words with quad or box coordinates)."""
    table = rephrase_table("CORD")
    label_options = sorted(set(table.values()))
    records = []
    for path in sorted(source_dir.glob("*.json")):
        doc = _read_json(path)
        if "valid_line" not in doc:
            raise ParseError(f"{path}: missing 'valid_line' key")
        size = doc.get("meta", {}).get("image_size", {})
        width, height = size.get("width"), size.get("height")
        tokens = []
        lines = []
        for entry in doc["valid_line"]:
            words = [w for w in entry.get("words", []) if w.get("text")]
            for w in words:
                tokens.append(OcrToken(w["text"], _quad_to_box(w)))
            if words and entry.get("category"):
                lines.append((" ".join(w["text"] for w in words), entry["category"]))
        if width is None or height is None:
            width = max((t.box[2] for t in tokens), default=1.0) + 1
            height = max((t.box[3] for t in tokens), default=1.0) + 1
        page_img = source_dir / "images" / (path.stem + ".ppm")
        for text, category in lines:
            if category not in table:
                raise ParseError(f"{path}: unknown CORD label {category!r}")
            template = _CORD_TEMPLATES[len(records) % len(_CORD_TEMPLATES)]
            records.append(
                InstanceRecord(
                    dataset_id="CORD",
                    task_cluster="kie",
                    split="held_out",
                    regime="cross_dataset",
                    pages=[str(page_img.resolve())],
                    page_sizes=[(int(width), int(height))],
                    ocr=[tokens],
                    instruction=Instruction(
                        intent=render_instruction(template, text, label_options),
                        answer_style="option_selection",
                        query=text,
                        options=label_options,
                    ),
                    answers=[table[category]],
                )
            )
    return AdapterResult(records, [], {"CORD": _CORD_TEMPLATES})


register_adapter(
    "cord",
    "*.json receipts with meta.image_size and valid_line[].words[].quad "
    "(or .box) plus valid_line[].category; page images under images/<stem>.ppm",
    _adapt_cord,
)


# -- remaining source datasets: layouts documented, readers not bundled

_STUB_LAYOUTS = {
    "docile": "annotations/*.json with field_extractions over pdf-rendered pages",
    "klc": "documents/*.json with charity report key-value annotations",
    "deepform": "*.csv rows naming document, field, value, bbox",
    "pwc": "papers/*.json with leaderboard tuples (task, dataset, metric, value)",
    "wildreceipt": "*.txt lines of json with text, box and 26-class labels",
    "sroie": "img/*.jpg beside box/*.txt and key/*.json entity files",
    "visualmrc": "screenshots/*.png with regions.jsonl QA pairs",
    "websrc": "per-site dirs with dataset.csv of (question, answer, element id)",
    "ocrvqa": "dataset.json mapping image ids to QA pairs on book covers",
    "docvqa": "documents/*.png with val_v1.0.json question/answers entries",
    "hw-squad": "handwriting-rendered squad pages with qas.jsonl",
    "tat-dqa": "tatdqa_dataset.json with table+paragraph hybrid QA",
    "wtq": "csv tables beside pristine-unseen-tables question tsv",
    "iconqa": "per-problem dirs with data.json (question, choices, answer)",
    "ai2d": "images/*.png with questions/*.json diagram QA",
    "scienceqa": "problems.json with image dirs and multiple-choice QA",
    "textbookqa": "tqa_v1_train.json lessons with diagram questions",
    "infographicvqa": "infographics val json with question/answers entries",
    "chartqa": "png charts beside *_human.json and *_augmented.json QA",
    "slidevqa": "per-deck page images with annotations.jsonl multi-hop QA",
    "dude": "pdf-rendered page dirs with 2023-03-23_DUDE_gt.json",
    "tabfact": "all_csv/*.csv tables with statement entailment jsonl",
    "llavar": "images with conversations.json dialogue turns",
    "rvl-cdip": "labels/*.txt lines of (image path, class id), images/ tree",
    "scicap": "figure pngs beside caption jsonl",
    "screen2words": "ui screenshots with screen_summaries.csv",
    "docbank": "token-level .txt layout annotations beside page images",
    "doclaynet": "COCO-format JSON with layout category boxes per page",
}

for _sid, _layout in _STUB_LAYOUTS.items():
    register_adapter(_sid, _layout)


# ---------------------------------------------------------------------------
# balanced sampling


def balanced_sample(manifest: Manifest, cap: int = 5000, rng: RandomStream | None = None) -> Manifest:
    """Cap each held-in dataset at `cap` uniformly-without-replacement entries.

    Held-out datasets pass through untouched. Selection uses a Fisher-Yates
    prefix on a per-dataset derived stream, so the result is reproducible and
    re-applying with the same cap is a no-op.
    """
    if cap < 1:
        raise ValueError("cap must be >= 1")
    rng = rng or RandomStream(0)
    by_dataset: dict[str, list[int]] = {}
    for i, e in enumerate(manifest.entries):
        by_dataset.setdefault(e.dataset_id, []).append(i)

    keep: set[int] = set()
    for did, idxs in by_dataset.items():
        split = manifest.entries[idxs[0]].split
        if split == "held_out" or len(idxs) <= cap:
            keep.update(idxs)
            continue
        sub = rng.derive(f"sample/{did}")
        chosen = sub.sample_indices(len(idxs), cap)
        keep.update(idxs[j] for j in chosen)

    out = Manifest(
        entries=[e for i, e in enumerate(manifest.entries) if i in keep],
        templates=dict(manifest.templates),
    )
    out.recount()
    return out


# ---------------------------------------------------------------------------
# corpus statistics


@dataclass
class StatsReport:
    n_instances: int
    n_datasets: int
    cluster_counts: dict[str, int]
    template_words_avg: float
    template_words_std: float
    templates_per_dataset_avg: float
    templates_per_dataset_std: float
    ocr_words_avg: float
    ocr_words_std: float
    answer_words_avg: float
    answer_words_std: float

    def to_dict(self) -> dict:
        return {
            "n_instances": self.n_instances,
            "n_datasets": self.n_datasets,
            "cluster_counts": dict(sorted(self.cluster_counts.items())),
            "template_words": {"avg": self.template_words_avg, "std": self.template_words_std},
            "templates_per_dataset": {
                "avg": self.templates_per_dataset_avg,
                "std": self.templates_per_dataset_std,
            },
            "ocr_words": {"avg": self.ocr_words_avg, "std": self.ocr_words_std},
            "answer_words": {"avg": self.answer_words_avg, "std": self.answer_words_std},
        }


def _avg_std(values: list[float]) -> tuple[float, float]:
    if not values:
        return 0.0, 0.0
    arr = np.asarray(values, dtype=np.float64)
    return float(arr.mean()), float(arr.std())  # population std

def compute_stats(manifest: Manifest, base_dir=None) -> StatsReport:
    """Whitespace word counts over the corpus; std is the population deviation.

    OCR counts are whitespace words of the raw token texts (pre sub-word
    tokenization); answer counts use the first gold answer of each record.
    """
    ocr_words: list[float] = []
    answer_words: list[float] = []
    clusters: dict[str, int] = {}
    for entry in manifest.entries:
        record = load_entry(entry, base_dir=base_dir)
        clusters[record.task_cluster] = clusters.get(record.task_cluster, 0) + 1
        n_ocr = sum(len(t.text.split()) for page in record.ocr for t in page)
        ocr_words.append(float(n_ocr))
        answer_words.append(float(len(record.answers[0].split())))

    template_words = [
        float(len(t.text.split()))
        for temps in manifest.templates.values()
        for t in temps
    ]
    per_dataset = [float(len(temps)) for temps in manifest.templates.values()]

    t_avg, t_std = _avg_std(template_words)
    c_avg, c_std = _avg_std(per_dataset)
    o_avg, o_std = _avg_std(ocr_words)
    a_avg, a_std = _avg_std(answer_words)
    return StatsReport(
        n_instances=len(manifest.entries),
        n_datasets=len(manifest.counts),
        cluster_counts=clusters,
        template_words_avg=t_avg,
        template_words_std=t_std,
        templates_per_dataset_avg=c_avg,
        templates_per_dataset_std=c_std,
        ocr_words_avg=o_avg,
        ocr_words_std=o_std,
        answer_words_avg=a_avg,
        answer_words_std=a_std,
    )
