import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vdu.ingest import (
    AdapterNotImplemented,
    ConversionError,
    Manifest,
    ManifestEntry,
    ParseError,
    UnknownDataset,
    UnknownLabel,
    adapter_ids,
    assign_split,
    balanced_sample,
    compute_stats,
    convert_dataset,
    load_entry,
    paper_dataset_ids,
    rephrase_query,
    rephrase_table,
)
from vdu.schema import validate_instance
from vdu.tensor import RandomStream

FUNSD_EXPECTED = {"header": "title", "question": "key", "answer": "value"}

CORD_EXPECTED = {
    "menu.nm": "menu_name",
    "menu.num": "menu_id",
    "menu.unitprice": "menu_unitprice",
    "menu.cnt": "menu_quantity",
    "menu.discountprice": "menu_discountprice",
    "menu.price": "menu_price",
    "menu.itemsubtotal": "menu_price_discount_applied",
    "menu.vatyn": "menu_whether_price_tax_includes",
    "menu.etc": "menu_etc",
    "menu.sub_nm": "submenu_name",
    "menu.sub_unitprice": "submenu_unitprice",
    "menu.sub_cnt": "submenu_quantity",
    "menu.sub_price": "submenu_price",
    "menu.sub_etc": "submenu_etc",
    "void_menu.nm": "voidmenu_name",
    "void_menu.price": "voidmenu_price",
    "sub_total.subtotal_price": "subtotal_price",
    "sub_total.discount_price": "subtotal_discount_price",
    "sub_total.service_price": "subtotal_service_price",
    "sub_total.othersvc_price": "subtotal_chargeprice",
    "sub_total.tax_price": "subtotal_tax_price",
    "sub_total.etc": "subtotal_etc",
    "total.total_price": "total_price",
    "total.total_etc": "total_etc",
    "total.cashprice": "total_cashprice",
    "total.changeprice": "total_changeprice",
    "total.creditcardprice": "total_creditcardprice",
    "total.emoneyprice": "total_emoneyprice",
    "total.menutype_cnt": "total_menutype_count",
    "total.menuqty_cnt": "total_menuquantity_count",
}


# ---------------------------------------------------------------------------
# rephrasing


def test_rephrase_funsd_golden():
    assert len(rephrase_table("FUNSD")) == 3
    for raw, canonical in FUNSD_EXPECTED.items():
        assert rephrase_query("FUNSD", raw) == canonical


def test_rephrase_cord_golden():
    assert len(rephrase_table("CORD")) == 30
    for raw, canonical in CORD_EXPECTED.items():
        assert rephrase_query("CORD", raw) == canonical


def test_rephrase_unknown_label_lists_valid():
    with pytest.raises(UnknownLabel) as err:
        rephrase_query("CORD", "banana")
    assert "menu.nm" in str(err.value)


def test_rephrase_unknown_dataset():
    with pytest.raises(UnknownDataset):
        rephrase_query("DocVQA", "header")


# ---------------------------------------------------------------------------
# split registry


def test_registry_has_thirty_datasets():
    ids = paper_dataset_ids()
    assert len(ids) == 30


def test_split_counts_23_7():
    splits = [assign_split(d)[0] for d in paper_dataset_ids()]
    assert splits.count("held_in") == 23
    assert splits.count("held_out") == 7


@pytest.mark.parametrize("dataset_id,expected", [
    ("FUNSD", ("held_out", "cross_dataset")),
    ("CORD", ("held_out", "cross_dataset")),
    ("ChartQA", ("held_out", "cross_task")),
    ("InfographicVQA", ("held_out", "cross_task")),
    ("TabFact", ("held_out", "cross_task")),
    ("DUDE", ("held_out", "cross_domain")),
    ("SlideVQA", ("held_out", "cross_domain")),
    ("DocVQA", ("held_in", "none")),
    ("RVL-CDIP", ("held_in", "none")),
])
def test_split_assignments(dataset_id, expected):
    assert assign_split(dataset_id) == expected


def test_split_unknown_dataset():
    with pytest.raises(UnknownDataset):
        assign_split("NotADataset")


def test_held_in_datasets_have_no_regime():
    for did in paper_dataset_ids():
        split, regime = assign_split(did)
        assert (regime == "none") == (split == "held_in")


# ---------------------------------------------------------------------------
# conversion


def test_convert_synthetic_counts(corpus):
    manifest, _ = corpus
    assert manifest.counts["synth_kie"] == 8
    assert manifest.counts["synth_multihop_x"] == 4
    assert sum(manifest.counts.values()) == len(manifest.entries)


def test_convert_records_all_valid(corpus):
    manifest, base_dir = corpus
    for entry in manifest.entries:
        record = load_entry(entry, base_dir=base_dir)
        assert validate_instance(record).ok(), entry.instance_id


def test_convert_unknown_adapter():
    with pytest.raises(AdapterNotImplemented):
        convert_dataset("nope", ".", "out.jsonl")


def test_convert_stub_adapter_mentions_layout(tmp_path):
    with pytest.raises(AdapterNotImplemented) as err:
        convert_dataset("docvqa", tmp_path, tmp_path / "out.jsonl")
    assert "documents/" in str(err.value)


def test_adapter_registry_covers_required():
    ids = adapter_ids()
    assert "synthetic" in ids and "funsd" in ids and "cord" in ids
    assert len(ids) >= 30


def test_convert_empty_dir_warns(tmp_path, caplog):
    src = tmp_path / "empty"
    src.mkdir()
    with caplog.at_level("WARNING", logger="vdu"):
        manifest = convert_dataset("synthetic", src, tmp_path / "out.jsonl")
    assert manifest.entries == []
    assert any("no records" in m for m in caplog.messages)


def test_convert_truncated_json_names_line(tmp_path):
    ddir = tmp_path / "synth_kie"
    ddir.mkdir(parents=True)
    (ddir / "dataset.json").write_text(json.dumps({
        "dataset_id": "synth_kie", "task_cluster": "kie",
        "split": "held_in", "regime": "none",
    }))
    (ddir / "templates.json").write_text(json.dumps(
        [{"template_id": "t", "text": "Label {query} from {options}."}]))
    (ddir / "instances.jsonl").write_text('{"ok": 1}\n{"broken": \n')
    with pytest.raises(ParseError) as err:
        convert_dataset("synthetic", tmp_path, tmp_path / "out.jsonl")
    assert "line 2" in str(err.value)


def test_funsd_adapter_roundtrip(tmp_path):
    ann = tmp_path / "annotations"
    ann.mkdir()
    (ann / "doc0.json").write_text(json.dumps({
        "page_size": [800, 1000],
        "form": [
            {"text": "INVOICE DATE", "label": "question",
             "words": [{"text": "INVOICE", "box": [10, 10, 80, 24]},
                       {"text": "DATE", "box": [90, 10, 130, 24]}]},
            {"text": "2001-06-22", "label": "answer",
             "words": [{"text": "2001-06-22", "box": [140, 10, 220, 24]}]},
            {"text": "misc", "label": "other",
             "words": [{"text": "misc", "box": [10, 40, 50, 54]}]},
        ],
    }))
    manifest = convert_dataset("funsd", tmp_path, tmp_path / "out" / "funsd.jsonl")
    assert manifest.counts == {"FUNSD": 2}
    record = load_entry(manifest.entries[0], base_dir=tmp_path / "out")
    assert record.split == "held_out" and record.regime == "cross_dataset"
    assert record.answers[0] in {"title", "key", "value"}
    assert validate_instance(record).ok()


def test_funsd_adapter_bad_label(tmp_path):
    ann = tmp_path / "annotations"
    ann.mkdir()
    (ann / "doc0.json").write_text(json.dumps({
        "form": [{"text": "x", "label": "mystery",
                  "words": [{"text": "x", "box": [0, 0, 5, 5]}]}],
    }))
    with pytest.raises(ParseError):
        convert_dataset("funsd", tmp_path, tmp_path / "funsd.jsonl")


def test_cord_adapter_roundtrip(tmp_path):
    (tmp_path / "r0.json").write_text(json.dumps({
        "meta": {"image_size": {"width": 600, "height": 900}},
        "valid_line": [
            {"category": "menu.nm",
             "words": [{"text": "ICED", "quad": {"x1": 10, "y1": 10, "x3": 60, "y3": 30}},
                       {"text": "TEA", "quad": {"x1": 70, "y1": 10, "x3": 110, "y3": 30}}]},
            {"category": "total.total_price",
             "words": [{"text": "16,500", "box": [10, 40, 80, 60]}]},
        ],
    }))
    manifest = convert_dataset("cord", tmp_path, tmp_path / "out" / "cord.jsonl")
    assert manifest.counts == {"CORD": 2}
    first = load_entry(manifest.entries[0], base_dir=tmp_path / "out")
    assert first.instruction.query == "ICED TEA"
    assert first.answers == ["menu_name"]
    second = load_entry(manifest.entries[1], base_dir=tmp_path / "out")
    assert second.answers == ["total_price"]


def test_convert_deterministic_output(tmp_path, corpus):
    # conversion of the same source twice yields identical bytes
    manifest, base_dir = corpus
    src = base_dir.parent / "src"
    out1 = tmp_path / "a" / "records.jsonl"
    out2 = tmp_path / "b" / "records.jsonl"
    convert_dataset("synthetic", src, out1)
    convert_dataset("synthetic", src, out2)
    assert out1.read_bytes() == out2.read_bytes()


# ---------------------------------------------------------------------------
# balanced sampling


def _fake_manifest(sizes: dict[str, tuple[str, int]]) -> Manifest:
    manifest = Manifest()
    for did, (split, n) in sizes.items():
        regime = "none" if split == "held_in" else "cross_dataset"
        for i in range(n):
            manifest.entries.append(ManifestEntry(
                path=f"{did}.jsonl", line=i, dataset_id=did, split=split, regime=regime))
    manifest.recount()
    return manifest


def test_sample_caps_large_held_in():
    manifest = _fake_manifest({"big": ("held_in", 12_000)})
    out = balanced_sample(manifest, cap=5000, rng=RandomStream(7))
    assert out.counts["big"] == 5000


def test_sample_under_cap_untouched():
    manifest = _fake_manifest({"small": ("held_in", 3000)})
    out = balanced_sample(manifest, cap=5000, rng=RandomStream(7))
    assert out.counts["small"] == 3000
    assert [e.line for e in out.entries] == [e.line for e in manifest.entries]


def test_sample_held_out_passthrough():
    manifest = _fake_manifest({"eval": ("held_out", 12_740)})
    out = balanced_sample(manifest, cap=5000, rng=RandomStream(7))
    assert out.counts["eval"] == 12_740
    assert [(e.dataset_id, e.line) for e in out.entries] == \
           [(e.dataset_id, e.line) for e in manifest.entries]


def test_sample_deterministic_and_idempotent():
    manifest = _fake_manifest({"big": ("held_in", 9000), "eval": ("held_out", 100)})
    once = balanced_sample(manifest, cap=2000, rng=RandomStream(3))
    again = balanced_sample(manifest, cap=2000, rng=RandomStream(3))
    assert [e.line for e in once.entries] == [e.line for e in again.entries]
    twice = balanced_sample(once, cap=2000, rng=RandomStream(3))
    assert [e.line for e in twice.entries] == [e.line for e in once.entries]


def test_sample_rejects_bad_cap():
    with pytest.raises(ValueError):
        balanced_sample(Manifest(), cap=0)


@given(st.integers(min_value=0, max_value=2**31),
       st.integers(min_value=1, max_value=400),
       st.integers(min_value=1, max_value=400))
@settings(max_examples=30, deadline=None)
def test_sample_is_submultiset(seed, n, cap):
    manifest = _fake_manifest({"d": ("held_in", n)})
    out = balanced_sample(manifest, cap=cap, rng=RandomStream(seed))
    lines = [e.line for e in out.entries]
    assert len(lines) == min(n, cap)
    assert len(set(lines)) == len(lines)
    assert set(lines) <= set(range(n))
    assert lines == sorted(lines)  # original order retained


# ---------------------------------------------------------------------------
# stats


def test_stats_hand_arithmetic(tmp_path, corpus):
    manifest, base_dir = corpus
    report = compute_stats(manifest, base_dir=base_dir)
    assert report.n_instances == len(manifest.entries)
    assert report.template_words_std >= 0
    assert report.ocr_words_avg > 0


def test_stats_template_words_two_templates():
    manifest = Manifest()
    from vdu.schema import InstructionTemplate
    manifest.templates = {"d": [
        InstructionTemplate("a", "one two three four"),
        InstructionTemplate("b", "one two three four five six"),
    ]}
    report = compute_stats(manifest)
    assert report.template_words_avg == pytest.approx(5.0)
    assert report.template_words_std == pytest.approx(1.0)


def test_stats_singleton_record_ocr(corpus, tmp_path):
    import vdu.ingest as ingest_mod
    from vdu.schema import InstanceRecord, Instruction, OcrToken, record_to_json
    record = InstanceRecord(
        dataset_id="DocVQA", task_cluster="single_page_qa", pages=["p.ppm"],
        page_sizes=[(10, 10)],
        ocr=[[OcrToken("one two three", (0, 0, 1, 1)), OcrToken("four five six seven", (2, 0, 3, 1))]],
        instruction=Instruction(intent="q"), answers=["a"],
    )
    path = tmp_path / "r.jsonl"
    path.write_text(record_to_json(record) + "\n")
    manifest = Manifest(entries=[ManifestEntry(str(path), 0, "DocVQA", "held_in", "none")])
    manifest.recount()
    report = compute_stats(manifest)
    assert report.ocr_words_avg == 7.0
    assert report.ocr_words_std == 0.0


def test_stats_match_recount_oracle(corpus):
    # independent tally: recompute OCR word mean with a one-off loop
    manifest, base_dir = corpus
    totals = []
    for entry in manifest.entries:
        record = load_entry(entry, base_dir=base_dir)
        totals.append(sum(len(t.text.split()) for page in record.ocr for t in page))
    report = compute_stats(manifest, base_dir=base_dir)
    assert report.ocr_words_avg == pytest.approx(sum(totals) / len(totals))
    mean = sum(totals) / len(totals)
    var = sum((t - mean) ** 2 for t in totals) / len(totals)
    assert report.ocr_words_std == pytest.approx(var ** 0.5)
