from dataclasses import dataclass

import numpy as np
import pytest
import torch

from promptloom.data import DatasetManifest, make_synthetic_dataset
from promptloom.models import (
    SourceModel,
    SourceTrainConfig,
    train_adversarial,
    train_standard,
)

# keep CPU runs well-behaved on small CI boxes
torch.set_num_threads(min(4, torch.get_num_threads()))

# ---------------------------------------------------------------------------
# The desk-scale trend environment shared by the acceptance suite and the
# slower direction checks. One pattern bank builds sibling pairs (a common
# blob +/- a small detail blob): standard sources separate siblings through
# the fragile detail, adversarially trained sources give it up. A second,
# unpaired bank feeds the loosening sweep, whose downstream classes mix two
# in-block patterns per sample.
# ---------------------------------------------------------------------------

TREND_SEEDS = (0, 1, 2)
EVAL_EPSILON = 4 / 255
# pad width 4 on a 32x32 source: downstream 24x24 images land on this window
INTERIOR_WINDOW = (4 / 32, 4 / 32, 28 / 32, 28 / 32)
PAIRED_BANK = dict(pattern_seed=7, amplitude=0.25, noise_sigma=0.10,
                   paired=True, detail_scale=0.35)
UNPAIRED_BANK = dict(pattern_seed=21, amplitude=0.25, noise_sigma=0.10)


@dataclass
class TrendEnv:
    seed: int
    source_ab: DatasetManifest   # 5 sibling pairs, n=10
    task_ab: DatasetManifest     # k=5: patterns {0..4} (two pairs + one half)
    source_c: DatasetManifest    # 20 unpaired patterns, n=20
    task_c: DatasetManifest      # k=5: per-sample mix of patterns {2c, 2c+1}
    std_model: SourceModel
    robust_model: SourceModel
    robust_model_c: SourceModel


@pytest.fixture(scope="session")
def trend_envs(tmp_path_factory) -> list[TrendEnv]:
    envs = []
    for seed in TREND_SEEDS:
        root = tmp_path_factory.mktemp(f"trend{seed}")
        source_ab = make_synthetic_dataset(
            10, 60, (32, 32), seed=100 + seed, out_dir=root / "source_ab",
            role="source", **PAIRED_BANK)
        task_ab = make_synthetic_dataset(
            5, 60, (24, 24), seed=200 + seed, out_dir=root / "task_ab",
            pattern_indices=[0, 1, 2, 3, 4], window=INTERIOR_WINDOW, **PAIRED_BANK)
        source_c = make_synthetic_dataset(
            20, 40, (32, 32), seed=400 + seed, out_dir=root / "source_c",
            role="source", **UNPAIRED_BANK)
        task_c = make_synthetic_dataset(
            5, 60, (24, 24), seed=300 + seed, out_dir=root / "task_c",
            mixture_size=2, dominant_weight=0.65, window=INTERIOR_WINDOW,
            **UNPAIRED_BANK)
        envs.append(TrendEnv(
            seed=seed,
            source_ab=source_ab,
            task_ab=task_ab,
            source_c=source_c,
            task_c=task_c,
            std_model=train_standard(
                source_ab, SourceTrainConfig(epochs=12, seed=seed)),
            robust_model=train_adversarial(
                source_ab, SourceTrainConfig(epochs=16, seed=seed,
                                             learning_rate=0.01, at_epsilon=12 / 255)),
            robust_model_c=train_adversarial(
                source_c, SourceTrainConfig(epochs=16, seed=seed,
                                            learning_rate=0.01, at_epsilon=8 / 255)),
        ))
    return envs


@dataclass
class TrendRuns:
    env: TrendEnv
    ssvp: object          # MetricsRecord for the standard-source prompt
    rsvp: object          # MetricsRecord for the robust-source prompt
    rsvp_log: object      # DynamicsLog of the rsvp run
    rsvp_at: object       # MetricsRecord for the prompt-AT run on the robust source
    rsvp_at_log: object
    sweep_rows: list      # SweepRow list over factors [1, 2, 4] on the mixture task


PROMPT_EPOCHS = 16


def _base_vp_config(seed: int):
    from promptloom.training import VPTrainConfig

    return VPTrainConfig(
        epochs=PROMPT_EPOCHS, learning_rate=0.2, batch_size=64, seed=seed,
        lm_strategy="ILM", prompt_init="uniform",
    )


@pytest.fixture(scope="session")
def trend_runs(trend_envs) -> list[TrendRuns]:
    from dataclasses import replace

    from promptloom.evaluation import evaluate_prompted, sweep_loosening
    from promptloom.training import train_prompt, train_prompt_adversarial

    runs = []
    for env in trend_envs:
        base = _base_vp_config(env.seed)

        prompt, log = train_prompt(env.std_model, env.task_ab, base)
        ssvp = evaluate_prompted(
            env.std_model, prompt, log.final_mapping, None, env.task_ab,
            EVAL_EPSILON, run_id=f"ssvp-seed{env.seed}", seed=env.seed,
            lm_strategy="ILM", wall_time_s=log.total_wall_time_s,
            peak_memory_bytes=log.peak_memory_bytes)

        prompt, rsvp_log = train_prompt(env.robust_model, env.task_ab, base)
        rsvp = evaluate_prompted(
            env.robust_model, prompt, rsvp_log.final_mapping, None, env.task_ab,
            EVAL_EPSILON, run_id=f"rsvp-seed{env.seed}", seed=env.seed,
            lm_strategy="ILM", wall_time_s=rsvp_log.total_wall_time_s,
            peak_memory_bytes=rsvp_log.peak_memory_bytes)

        at_cfg = replace(base, adversarial=True, at_epsilon=8 / 255)
        prompt, at_log = train_prompt_adversarial(env.robust_model, env.task_ab, at_cfg)
        rsvp_at = evaluate_prompted(
            env.robust_model, prompt, at_log.final_mapping, None, env.task_ab,
            EVAL_EPSILON, run_id=f"rsvp-at-seed{env.seed}", seed=env.seed,
            lm_strategy="ILM", adversarial=True,
            wall_time_s=at_log.total_wall_time_s,
            peak_memory_bytes=at_log.peak_memory_bytes)

        sweep_rows = sweep_loosening(
            env.robust_model_c, env.task_c, base, [1, 2, 4], epsilon=EVAL_EPSILON)

        runs.append(TrendRuns(
            env=env, ssvp=ssvp, rsvp=rsvp, rsvp_log=rsvp_log,
            rsvp_at=rsvp_at, rsvp_at_log=at_log, sweep_rows=sweep_rows,
        ))
    return runs


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """k=3 separable 16x16 dataset, small enough for sub-second training."""
    out = tmp_path_factory.mktemp("tiny_data")
    return make_synthetic_dataset(
        3, 30, (16, 16), seed=11, out_dir=out, role="source",
        pattern_seed=5, amplitude=0.3, noise_sigma=0.05, test_per_class=10,
    )


@pytest.fixture(scope="session")
def tiny_model(tiny_dataset):
    """Frozen standard source model over the tiny dataset (n=3)."""
    return train_standard(tiny_dataset, SourceTrainConfig(epochs=6, seed=0, width=8))


@pytest.fixture(scope="session")
def tiny_downstream(tmp_path_factory):
    """k=2 downstream set matching tiny_dataset's pattern bank, 12x12 native."""
    out = tmp_path_factory.mktemp("tiny_down")
    win = (2 / 16, 2 / 16, 14 / 16, 14 / 16)
    return make_synthetic_dataset(
        2, 24, (12, 12), seed=13, out_dir=out, pattern_seed=5,
        pattern_indices=[0, 1], amplitude=0.3, noise_sigma=0.05,
        test_per_class=12, window=win,
    )


def rng(seed=0):
    return np.random.default_rng(seed)
