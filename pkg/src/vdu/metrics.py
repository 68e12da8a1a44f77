"""Evaluation metrics and the held-out regime harness.

Per-dataset primary metrics follow the benchmark conventions: average
normalized Levenshtein similarity with a 0.5 rejection threshold, exact
match, token F1, set-level entity F1, 5-percent relaxed numeric accuracy,
and ROUGE-L. Regime scores are arithmetic means of the constituent
dataset primary scores.
"""

from __future__ import annotations

import json
import string
from collections import Counter
from dataclasses import dataclass, field

from .ingest import Manifest, dataset_info, load_entry

_PUNCT = set(string.punctuation)
_ARTICLES = {"a", "an", "the"}


class MissingPrediction(KeyError):
    pass


def normalize_answer(text: str) -> str:
    """Lowercase, strip punctuation, drop articles, collapse whitespace."""
    lowered = text.lower()
    no_punct = "".join(ch for ch in lowered if ch not in _PUNCT)
    words = [w for w in no_punct.split() if w not in _ARTICLES]
    return " ".join(words)


def levenshtein(a: str, b: str) -> int:
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, start=1):
        cur = [i]
        for j, cb in enumerate(b, start=1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]


def anls(pred: str, golds: list[str], tau: float = 0.5) -> float:
    """Best normalized Levenshtein similarity over golds, zeroed below tau."""
    if not golds:
        raise ValueError("anls needs at least one gold answer")
    best = 0.0
    p = pred.lower().strip()
    for gold in golds:
        g = gold.lower().strip()
        longest = max(len(p), len(g))
        nl = 0.0 if longest == 0 else levenshtein(p, g) / longest
        score = 1.0 - nl if nl < tau else 0.0
        best = max(best, score)
    return best


def exact_match(pred: str, golds: list[str]) -> int:
    np_ = normalize_answer(pred)
    return int(any(np_ == normalize_answer(g) for g in golds))


def token_f1(pred: str, golds: list[str]) -> float:
    """Bag-of-tokens overlap on normalized text, best over golds."""
    p_tokens = normalize_answer(pred).split()
    best = 0.0
    for gold in golds:
        g_tokens = normalize_answer(gold).split()
        if not p_tokens and not g_tokens:
            best = max(best, 1.0)
            continue
        if not p_tokens or not g_tokens:
            continue
        common = sum((Counter(p_tokens) & Counter(g_tokens)).values())
        if common == 0:
            continue
        precision = common / len(p_tokens)
        recall = common / len(g_tokens)
        best = max(best, 2 * precision * recall / (precision + recall))
    return best


def entity_f1(pred_entities: set, gold_entities: set) -> tuple[float, float, float]:
    """Set-level precision/recall/F1 over (text, label) pairs after normalization."""

    def norm(entities):
        return {(normalize_answer(str(t)), normalize_answer(str(l))) for t, l in entities}

    pred = norm(pred_entities)
    gold = norm(gold_entities)
    tp = len(pred & gold)
    precision = tp / len(pred) if pred else (1.0 if not gold else 0.0)
    recall = tp / len(gold) if gold else (1.0 if not pred else 0.0)
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f1


def _parse_number(text: str) -> float | None:
    try:
        return float(text.strip())
    except ValueError:
        return None


def relaxed_accuracy(pred: str, gold: str) -> int:
    """Numeric answers pass within 5% of the gold; zero gold demands exact zero.
    Non-numeric answers fall back to normalized exact match."""
    p, g = _parse_number(pred), _parse_number(gold)
    if p is not None and g is not None:
        if g == 0:
            return int(p == 0)
        return int(abs(p - g) <= 0.05 * abs(g))
    return int(normalize_answer(pred) == normalize_answer(gold))


def _light_tokens(text: str) -> list[str]:
    # rouge keeps articles: only case, punctuation and whitespace are folded
    return "".join(ch for ch in text.lower() if ch not in _PUNCT).split()


def rouge_l(pred: str, gold: str) -> float:
    """F-measure of the longest common subsequence over normalized tokens."""
    p = _light_tokens(pred)
    g = _light_tokens(gold)
    if not p or not g:
        return 0.0
    prev = [0] * (len(g) + 1)
    for tok_p in p:
        cur = [0]
        for j, tok_g in enumerate(g, start=1):
            if tok_p == tok_g:
                cur.append(prev[j - 1] + 1)
            else:
                cur.append(max(prev[j], cur[j - 1]))
        prev = cur
    lcs = prev[-1]
    if lcs == 0:
        return 0.0
    precision = lcs / len(p)
    recall = lcs / len(g)
    return 2 * precision * recall / (precision + recall)


# ---------------------------------------------------------------------------
# harness


@dataclass
class DatasetScore:
    dataset_id: str
    regime: str
    primary_metric: str
    primary: float
    f1: float | None
    count: int


@dataclass
class EvalReport:
    datasets: dict[str, DatasetScore] = field(default_factory=dict)
    regimes: dict[str, float] = field(default_factory=dict)
    held_out_avg: float = 0.0

    def to_dict(self) -> dict:
        return {
            "datasets": {
                did: {
                    "regime": s.regime,
                    "primary_metric": s.primary_metric,
                    "primary": s.primary,
                    "f1": s.f1,
                    "count": s.count,
                }
                for did, s in sorted(self.datasets.items())
            },
            "regimes": dict(sorted(self.regimes.items())),
            "held_out_avg": self.held_out_avg,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def render_table(self) -> str:
        lines = [f"{'dataset':<24} {'regime':<14} {'metric':<18} {'score':>7} {'F1':>7}"]
        for did, s in sorted(self.datasets.items()):
            f1 = f"{100 * s.f1:7.2f}" if s.f1 is not None else "      -"
            lines.append(
                f"{did:<24} {s.regime:<14} {s.primary_metric:<18} {100 * s.primary:7.2f} {f1}"
            )
        for regime, avg in sorted(self.regimes.items()):
            lines.append(f"{'avg ' + regime:<58} {100 * avg:7.2f}")
        lines.append(f"{'held-out avg':<58} {100 * self.held_out_avg:7.2f}")
        return "\n".join(lines)


def _split_spans(text: str) -> list[str]:
    return [normalize_answer(s) for s in text.split(",") if normalize_answer(s)]


def _instance_entities(key: str, text: str) -> set:
    return {(key, span) for span in _split_spans(text)}


_SIMPLE_METRICS = {
    "anls": lambda pred, golds: anls(pred, golds),
    "em": lambda pred, golds: float(exact_match(pred, golds)),
    "accuracy": lambda pred, golds: float(exact_match(pred, golds)),
    "relaxed_accuracy": lambda pred, golds: float(
        max(relaxed_accuracy(pred, g) for g in golds)
    ),
    "rouge_l": lambda pred, golds: max(rouge_l(pred, g) for g in golds),
    "token_f1": lambda pred, golds: token_f1(pred, golds),
}


def evaluate(manifest: Manifest, predictions: dict[str, str], base_dir=None) -> EvalReport:
    """Score held-out instances per their dataset metric and aggregate by regime."""
    held_out = [e for e in manifest.entries if e.split == "held_out"]
    missing = [e.instance_id for e in held_out if e.instance_id not in predictions]
    if missing:
        raise MissingPrediction(
            f"{len(missing)} held-out instances lack predictions: {missing[:10]}"
        )

    by_dataset: dict[str, list] = {}
    for entry in held_out:
        by_dataset.setdefault(entry.dataset_id, []).append(entry)

    report = EvalReport()
    for did, entries in sorted(by_dataset.items()):
        info = dataset_info(did)
        metric = info.primary_metric
        f1_sum = 0.0
        if metric == "entity_f1":
            pred_set: set = set()
            gold_set: set = set()
            for entry in entries:
                record = load_entry(entry, base_dir=base_dir)
                pred = predictions[entry.instance_id]
                key = f"{entry.instance_id}|{record.instruction.query or ''}"
                pred_set |= _instance_entities(key, pred)
                gold_set |= _instance_entities(key, record.answers[0])
                f1_sum += token_f1(pred, record.answers)
            _, _, primary = entity_f1(pred_set, gold_set)
        else:
            fn = _SIMPLE_METRICS[metric]
            total = 0.0
            for entry in entries:
                record = load_entry(entry, base_dir=base_dir)
                pred = predictions[entry.instance_id]
                total += fn(pred, record.answers)
                f1_sum += token_f1(pred, record.answers)
            primary = total / len(entries)
        report.datasets[did] = DatasetScore(
            dataset_id=did,
            regime=entries[0].regime,
            primary_metric=metric,
            primary=primary,
            f1=(f1_sum / len(entries)) if info.with_f1 else None,
            count=len(entries),
        )

    by_regime: dict[str, list[float]] = {}
    for s in report.datasets.values():
        by_regime.setdefault(s.regime, []).append(s.primary)
    report.regimes = {r: sum(v) / len(v) for r, v in by_regime.items()}
    all_primary = [s.primary for s in report.datasets.values()]
    report.held_out_avg = sum(all_primary) / len(all_primary) if all_primary else 0.0
    return report
