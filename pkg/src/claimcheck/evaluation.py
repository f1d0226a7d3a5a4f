"""Benchmark loading, label normalization, balanced accuracy, and the failure
taxonomy over episode trajectories."""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

from .agent import EXPAND_KG, INIT_KG, VERDICT_ACTION, WEB_SEARCH
from .errors import DatasetParseError, SingleClassGold, UnknownLabel

SUPPORTED = "Supported"
REFUTED = "Refuted"

INSUFFICIENT_KG = "InsufficientKG"
EXCEED_MAX_STEPS = "ExceedMaxSteps"
OVER_CONFIDENCE = "OverConfidence"
OTHER_ERROR = "Other"

ERROR_CLASSES = (INSUFFICIENT_KG, EXCEED_MAX_STEPS, OVER_CONFIDENCE, OTHER_ERROR)

# binary label standardization: ambiguous / partially-true collapse to Refuted,
# unverifiable records are dropped
_SUPPORTED_LABELS = {
    "supported", "supports", "support", "true", "factual supported", "correct",
}
_REFUTED_LABELS = {
    "refuted", "refutes", "refute", "false", "not-supported", "not supported",
    "factual refuted", "incorrect", "pants-fire", "pants on fire",
    "half-true", "half true", "barely-true", "barely true",
    "mostly-false", "mostly false", "mostly-true", "mostly true",
    "partially true", "partially correct", "mixture", "mixed", "ambiguous",
    "conflicting evidence/cherrypicking", "conflicting",
}
_DROPPED_LABELS = {
    "not enough info", "not enough information", "not enough evidence",
    "nei", "unverifiable", "unproven",
}


def normalize_label(raw: str) -> str:
    """Map a dataset label to Supported/Refuted, or '' to drop the record."""
    text = " ".join(str(raw).strip().casefold().split())
    if text in _SUPPORTED_LABELS:
        return SUPPORTED
    if text in _REFUTED_LABELS:
        return REFUTED
    if text in _DROPPED_LABELS:
        return ""
    raise UnknownLabel(raw)


@dataclass
class DatasetRecord:
    id: str
    claim: str
    gold_label: str
    evidence_docs: list = None
    source: str = ""


@dataclass
class FieldMap:
    """Per-dataset-family field names and label overrides for JSONL files."""

    id_field: str = "id"
    claim_field: str = "claim"
    label_field: str = "label"
    evidence_field: str = "evidence"
    source: str = ""
    label_map: dict = field(default_factory=dict)  # raw (casefolded) -> Supported/Refuted/""

    @classmethod
    def from_jsonable(cls, data):
        return cls(
            id_field=data.get("id_field", "id"),
            claim_field=data.get("claim_field", "claim"),
            label_field=data.get("label_field", "label"),
            evidence_field=data.get("evidence_field", "evidence"),
            source=data.get("source", ""),
            label_map={k.casefold(): v for k, v in data.get("label_map", {}).items()},
        )


@dataclass
class DatasetLoadResult:
    records: list
    dropped: int


def load_dataset(path, field_map: FieldMap = None) -> DatasetLoadResult:
    field_map = field_map or FieldMap()
    records = []
    dropped = 0
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                row = json.loads(line)
            except ValueError as exc:
                raise DatasetParseError(line_no, str(exc)) from exc
            try:
                rec_id = str(row[field_map.id_field])
                claim = str(row[field_map.claim_field])
                raw_label = str(row[field_map.label_field])
            except KeyError as exc:
                raise DatasetParseError(line_no, f"missing field {exc}") from exc
            mapped = field_map.label_map.get(" ".join(raw_label.strip().casefold().split()))
            label = mapped if mapped is not None else normalize_label(raw_label)
            if label == "":
                dropped += 1
                continue
            evidence = row.get(field_map.evidence_field)
            records.append(
                DatasetRecord(
                    id=rec_id,
                    claim=claim,
                    gold_label=label,
                    evidence_docs=list(evidence) if evidence else None,
                    source=field_map.source,
                )
            )
    records.sort(key=lambda r: r.id)
    return DatasetLoadResult(records=records, dropped=dropped)


def negative_rate(records) -> float:
    """Fraction of Refuted records, in percent."""
    if not records:
        return 0.0
    return 100.0 * sum(1 for r in records if r.gold_label == REFUTED) / len(records)


def balanced_accuracy(predictions, golds) -> float:
    """Arithmetic mean of per-class recalls."""
    if len(predictions) != len(golds) or not golds:
        raise ValueError("predictions and golds must be equal-length and nonempty")
    classes = set(golds)
    if classes != {SUPPORTED, REFUTED}:
        raise SingleClassGold(f"golds must contain both classes, got {sorted(classes)}")
    recalls = []
    for cls in (SUPPORTED, REFUTED):
        total = sum(1 for g in golds if g == cls)
        hit = sum(1 for p, g in zip(predictions, golds) if g == cls and p == cls)
        recalls.append(hit / total)
    return sum(recalls) / len(recalls)


def classify_error(trajectory, correct: bool):
    """Failure flags for an incorrect episode; flags may co-occur.

    Returns a frozenset of flags (empty for correct predictions)."""
    if correct:
        return frozenset()
    kinds = trajectory.action_kinds()
    flags = set()
    if kinds == [INIT_KG, VERDICT_ACTION]:
        flags.add(OVER_CONFIDENCE)
    if (
        trajectory.verdict is not None
        and trajectory.verdict.forced
        and trajectory.forced_reason == "step_limit"
    ):
        flags.add(EXCEED_MAX_STEPS)
    for i, kind in enumerate(kinds):
        if kind == WEB_SEARCH and EXPAND_KG in kinds[:i]:
            flags.add(INSUFFICIENT_KG)
            break
    if not flags:
        flags.add(OTHER_ERROR)
    return frozenset(flags)


@dataclass
class EvalReport:
    n: int
    balanced_accuracy: float
    per_class_recall: dict
    error_counts: dict
    mean_counters: dict
    failed_records: list = field(default_factory=list)
    dropped: int = 0

    def to_jsonable(self):
        return {
            "n": self.n,
            "balanced_accuracy": self.balanced_accuracy,
            "per_class_recall": {k: self.per_class_recall[k] for k in sorted(self.per_class_recall)},
            "error_counts": {k: self.error_counts[k] for k in ERROR_CLASSES},
            "mean_counters": {k: self.mean_counters[k] for k in sorted(self.mean_counters)},
            "failed_records": list(self.failed_records),
            "dropped": self.dropped,
        }

    def to_json(self):
        return json.dumps(self.to_jsonable(), sort_keys=True, ensure_ascii=False)


def run_benchmark(records, runner, parallelism=1, collect_trajectories=None) -> EvalReport:
    """One episode per record; per-record failures are recorded, not fatal."""
    if not records:
        raise ValueError("run_benchmark requires a nonempty record list")

    def run_one(record):
        return runner.run(record.claim)

    outcomes = {}
    failed = []
    if parallelism > 1:
        with ThreadPoolExecutor(max_workers=parallelism) as pool:
            futures = {record.id: pool.submit(run_one, record) for record in records}
            for record in records:
                try:
                    outcomes[record.id] = futures[record.id].result()
                except Exception as exc:
                    failed.append({"id": record.id, "error": str(exc)})
    else:
        for record in records:
            try:
                outcomes[record.id] = run_one(record)
            except Exception as exc:
                failed.append({"id": record.id, "error": str(exc)})

    predictions, golds = [], []
    error_counts = {cls: 0 for cls in ERROR_CLASSES}
    counter_sums = {}
    n_ok = 0
    for record in records:
        if record.id not in outcomes:
            continue
        verdict_result, trajectory = outcomes[record.id]
        if collect_trajectories is not None:
            collect_trajectories.append(trajectory)
        predictions.append(verdict_result.label)
        golds.append(record.gold_label)
        correct = verdict_result.label == record.gold_label
        for flag in classify_error(trajectory, correct):
            error_counts[flag] += 1
        for key, value in trajectory.counters.items():
            counter_sums[key] = counter_sums.get(key, 0) + value
        n_ok += 1

    score = balanced_accuracy(predictions, golds)
    per_class = {}
    for cls in (SUPPORTED, REFUTED):
        total = sum(1 for g in golds if g == cls)
        hit = sum(1 for p, g in zip(predictions, golds) if g == cls and p == cls)
        per_class[cls] = hit / total if total else 0.0
    mean_counters = {k: v / n_ok for k, v in counter_sums.items()} if n_ok else {}
    return EvalReport(
        n=n_ok,
        balanced_accuracy=score,
        per_class_recall=per_class,
        error_counts=error_counts,
        mean_counters=mean_counters,
        failed_records=failed,
    )
