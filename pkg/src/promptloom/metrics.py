"""Metric records and their JSONL serialization.

Accuracy semantics follow the conditional protocol: the attack runs only on
samples the pipeline classified correctly in the first place, so

    std_acc = orig_correct / all_count
    adv_acc = adv_correct / orig_correct      (undefined when orig_correct = 0)

Records persist the raw counts, not just the ratios, so the denominators stay
auditable. Floats in JSONL are serialized with 17 significant digits and
round-trip exactly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict, replace
from pathlib import Path

from .errors import ConfigError, ZeroBaseline


@dataclass
class MetricsRecord:
    run_id: str
    dataset: str
    source_mode: str  # training_mode of the source model
    lm_strategy: str
    T: int | None
    adversarial: bool  # prompt trained with AT
    std_acc: float
    adv_acc: float | None  # None = undefined (0/0)
    all_count: int
    orig_correct: int
    adv_correct: int
    epsilon: float
    wall_time_s: float
    peak_memory_bytes: int
    seed: int

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if not 0 <= self.adv_correct <= self.orig_correct <= self.all_count:
            raise ConfigError(
                f"counts must satisfy 0 <= adv({self.adv_correct}) <= "
                f"orig({self.orig_correct}) <= all({self.all_count})"
            )
        if self.all_count > 0 and self.std_acc != self.orig_correct / self.all_count:
            raise ConfigError("std_acc does not equal orig_correct/all_count")
        if self.orig_correct > 0:
            if self.adv_acc != self.adv_correct / self.orig_correct:
                raise ConfigError("adv_acc does not equal adv_correct/orig_correct")
        elif self.adv_acc is not None:
            raise ConfigError("adv_acc must be undefined (None) when orig_correct = 0")

    def to_json(self) -> dict:
        return asdict(self)


def record_from_counts(
    *, all_count: int, orig_correct: int, adv_correct: int, epsilon: float, **meta
) -> MetricsRecord:
    """Build a record with the ratios recomputed from the counts."""
    std_acc = orig_correct / all_count if all_count else 0.0
    adv_acc = adv_correct / orig_correct if orig_correct else None
    defaults = dict(
        run_id="", dataset="", source_mode="", lm_strategy="", T=None,
        adversarial=False, wall_time_s=0.0, peak_memory_bytes=0, seed=0,
    )
    defaults.update(meta)
    return MetricsRecord(
        std_acc=std_acc, adv_acc=adv_acc, all_count=all_count,
        orig_correct=orig_correct, adv_correct=adv_correct, epsilon=epsilon,
        **defaults,
    )


def with_meta(record: MetricsRecord, **meta) -> MetricsRecord:
    return replace(record, **meta)


def improvement_rate(value: float, baseline: float) -> float:
    """(value - baseline) / baseline; requires a strictly positive baseline."""
    if baseline <= 0:
        raise ZeroBaseline(f"baseline must be > 0, got {baseline}")
    return (value - baseline) / baseline


def json_17g(obj) -> str:
    """JSON text with every float rendered at 17 significant digits."""
    if obj is None:
        return "null"
    if isinstance(obj, bool):
        return "true" if obj else "false"
    if isinstance(obj, int):
        return str(obj)
    if isinstance(obj, float):
        if obj != obj or obj in (float("inf"), float("-inf")):
            raise ValueError(f"non-finite float in record: {obj}")
        text = format(obj, ".17g")
        if "." not in text and "e" not in text and "E" not in text:
            text += ".0"
        return text
    if isinstance(obj, str):
        return json.dumps(obj)
    if isinstance(obj, (list, tuple)):
        return "[" + ", ".join(json_17g(v) for v in obj) + "]"
    if isinstance(obj, dict):
        return "{" + ", ".join(f"{json.dumps(str(k))}: {json_17g(v)}" for k, v in obj.items()) + "}"
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def write_records(records: list[MetricsRecord], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json_17g(rec.to_json()) + "\n")
    return path


def read_records(path: str | Path) -> list[MetricsRecord]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            doc = json.loads(line)
            doc["std_acc"] = float(doc["std_acc"])
            if doc["adv_acc"] is not None:
                doc["adv_acc"] = float(doc["adv_acc"])
            records.append(MetricsRecord(**doc))
    return records
