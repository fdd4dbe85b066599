"""Loosening sweeps, strategy comparisons, and report rendering.

Every row re-derives its ratios from stored counts; nothing trusts a
producer-supplied accuracy. Reports are deterministic: the same records
always render to byte-identical documents.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, replace

from .attacks import AttackConfig, evaluate_robustness
from .data import DatasetManifest, load_dataset
from .errors import ConfigError, EmptyInput, InfeasibleMapping
from .metrics import (  # noqa: F401  (re-exported public surface)
    MetricsRecord,
    improvement_rate,
    read_records,
    record_from_counts,
    write_records,
)
from .models import SourceModel
from .pbl import LooseningConfig
from .pipeline import PromptPipeline
from .training import VPTrainConfig, train_prompt

DEFAULT_EPSILON = 4.0 / 255.0


@dataclass
class SweepRow:
    T: int
    record: MetricsRecord
    std_improvement: float | None  # vs the T=1 baseline; None when undefined
    adv_improvement: float | None


@dataclass
class CompareRow:
    label: str
    record: MetricsRecord
    mean_epoch_time_s: float
    peak_memory_bytes: int


def evaluate_prompted(
    model: SourceModel,
    prompt,
    mapping,
    loosening: LooseningConfig | None,
    dataset: DatasetManifest,
    epsilon: float,
    *,
    split: str = "test",
    **meta,
) -> MetricsRecord:
    """Deploy the pipeline and run the conditional FGSM protocol on one split."""
    pipeline = PromptPipeline(model, prompt, mapping, loosening)
    data = load_dataset(dataset, split)
    meta.setdefault("dataset", dataset.name)
    meta.setdefault("source_mode", model.training_mode)
    return evaluate_robustness(pipeline, data, AttackConfig(epsilon), meta=meta)


def _train_and_eval(
    model: SourceModel,
    dataset: DatasetManifest,
    config: VPTrainConfig,
    epsilon: float,
    run_id: str,
    out_dir=None,
):
    prompt, log = train_prompt(model, dataset, config, out_dir=out_dir)
    record = evaluate_prompted(
        model, prompt, log.final_mapping, config.loosening, dataset, epsilon,
        run_id=run_id,
        lm_strategy=config.lm_strategy,
        T=config.loosening.T if config.loosening else None,
        adversarial=config.adversarial,
        wall_time_s=log.total_wall_time_s,
        peak_memory_bytes=log.peak_memory_bytes,
        seed=config.seed,
    )
    return record, log


def check_sweep_factors(n: int, k: int, factors: list[int],
                        t_is_block_count: bool = False) -> list[int]:
    """Validate a sweep's loosening factors before any training starts."""
    factors = sorted(set(int(t) for t in factors))
    if 1 not in factors:
        raise ConfigError("factors must include the T=1 baseline")
    bad = []
    for t in factors:
        if not 1 <= t <= n:
            bad.append(f"T={t} (outside [1, n={n}])")
            continue
        cfg = LooseningConfig(T=t, n=n, t_is_block_count=t_is_block_count)
        if cfg.d_I < k:
            bad.append(f"T={t} (d_I={cfg.d_I} < k={k})")
    if bad:
        raise InfeasibleMapping("infeasible loosening factors: " + ", ".join(bad))
    return factors


def sweep_loosening(
    model: SourceModel,
    dataset: DatasetManifest,
    base_config: VPTrainConfig,
    factors: list[int],
    *,
    epsilon: float = DEFAULT_EPSILON,
    out_dir=None,
) -> list[SweepRow]:
    """One full train+eval per loosening factor, shared seed; baseline is T=1."""
    template = base_config.loosening
    factors = check_sweep_factors(
        model.n, dataset.class_count, factors,
        t_is_block_count=template.t_is_block_count if template else False,
    )
    rows = []
    for t in factors:
        loosening = LooseningConfig(
            T=t,
            n=model.n,
            permute=template.permute if template else False,
            permutation_seed=template.permutation_seed if template else 0,
            t_is_block_count=template.t_is_block_count if template else False,
        )
        config = replace(base_config, loosening=loosening)
        run_dir = None if out_dir is None else f"{out_dir}/T{t}"
        record, _ = _train_and_eval(
            model, dataset, config, epsilon, run_id=f"sweep-T{t}-seed{config.seed}",
            out_dir=run_dir,
        )
        rows.append(SweepRow(T=t, record=record, std_improvement=None, adv_improvement=None))

    baseline = next(r.record for r in rows if r.T == 1)
    for row in rows:
        if baseline.std_acc > 0:
            row.std_improvement = improvement_rate(row.record.std_acc, baseline.std_acc)
        if (
            baseline.adv_acc is not None
            and baseline.adv_acc > 0
            and row.record.adv_acc is not None
        ):
            row.adv_improvement = improvement_rate(row.record.adv_acc, baseline.adv_acc)
    return rows


_COMPARE_COMBOS = (
    ("w/o PBL", False, False),
    ("w/o PBL + AT", False, True),
    ("w. PBL", True, False),
    ("w. PBL + AT", True, True),
)


def compare_strategies(
    model_robust: SourceModel,
    dataset: DatasetManifest,
    base_config: VPTrainConfig,
    *,
    epsilon: float = DEFAULT_EPSILON,
    out_dir=None,
) -> list[CompareRow]:
    """The four {with/without loosening} x {with/without prompt-AT} runs."""
    if base_config.loosening is None:
        raise ConfigError("compare needs base_config.loosening (the PBL rows' T)")
    if not base_config.at_epsilon > 0:
        raise ConfigError("compare needs at_epsilon > 0 for the AT rows")
    rows = []
    for label, use_pbl, use_at in _COMPARE_COMBOS:
        config = replace(
            base_config,
            loosening=base_config.loosening if use_pbl else None,
            adversarial=use_at,
        )
        slug = label.replace("w/o PBL", "no_pbl").replace("w. PBL", "pbl").replace(" + AT", "_at")
        run_dir = None if out_dir is None else f"{out_dir}/{slug}"
        record, log = _train_and_eval(
            model_robust, dataset, config, epsilon,
            run_id=f"compare-{slug}-seed{config.seed}", out_dir=run_dir,
        )
        rows.append(CompareRow(
            label=label,
            record=record,
            mean_epoch_time_s=log.mean_epoch_time_s,
            peak_memory_bytes=log.peak_memory_bytes,
        ))
    return rows


def _pct(value: float | None, orig: int = 0, adv: int = 0) -> str:
    if value is None:
        return f"—({adv}/{orig})"
    return f"{value * 100:.2f}%"


_REPORT_COLUMNS = (
    "run_id", "dataset", "source", "lm", "T", "prompt_at", "std_acc", "adv_acc",
    "all", "orig_correct", "adv_correct", "epsilon", "wall_time_s",
    "peak_memory_mb", "seed",
)


def _report_rows(records: list[MetricsRecord]) -> list[list[str]]:
    ordered = sorted(
        records,
        key=lambda r: (r.dataset, r.lm_strategy, r.adversarial, r.T if r.T is not None else 0, r.run_id),
    )
    rows = []
    for r in ordered:
        r.validate()
        rows.append([
            r.run_id,
            r.dataset,
            r.source_mode,
            r.lm_strategy,
            "" if r.T is None else str(r.T),
            "yes" if r.adversarial else "no",
            _pct(r.std_acc),
            _pct(r.adv_acc, r.orig_correct, r.adv_correct),
            str(r.all_count),
            str(r.orig_correct),
            str(r.adv_correct),
            f"{r.epsilon:.6f}",
            f"{r.wall_time_s:.3f}",
            f"{r.peak_memory_bytes / 1e6:.1f}",
            str(r.seed),
        ])
    return rows


def render_report(records: list[MetricsRecord], format: str = "csv") -> str:
    """Deterministic table of records, ordered by (dataset, strategy, T)."""
    if not records:
        raise EmptyInput("no records to report")
    rows = _report_rows(records)
    if format == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(_REPORT_COLUMNS)
        writer.writerows(rows)
        return buf.getvalue()
    if format == "markdown":
        header = "| " + " | ".join(_REPORT_COLUMNS) + " |"
        sep = "|" + "|".join("---" for _ in _REPORT_COLUMNS) + "|"
        body = ["| " + " | ".join(row) + " |" for row in rows]
        return "\n".join([header, sep] + body) + "\n"
    raise ConfigError(f"format must be 'csv' or 'markdown', got {format!r}")
