"""Visual prompting through frozen classifiers, with label mapping,
output-block loosening, and FGSM robustness evaluation."""

from .attacks import AttackConfig, evaluate_robustness, fgsm
from .data import (
    DatasetManifest,
    LabeledImageSet,
    load_dataset,
    load_manifest,
    make_synthetic_dataset,
    pattern_bank,
)
from .evaluation import (
    DEFAULT_EPSILON,
    MetricsRecord,
    compare_strategies,
    evaluate_prompted,
    improvement_rate,
    render_report,
    sweep_loosening,
)
from .label_mapping import FrequencyMatrix, LabelMapping, apply_mapping, ilm_update, random_mapping
from .models import (
    SourceModel,
    SourceTrainConfig,
    forward,
    load_model,
    save_model,
    train_adversarial,
    train_standard,
)
from .pbl import IntermediateVector, LooseningConfig, loosen, loosened_forward, make_blocks
from .pipeline import PromptPipeline
from .prompts import PromptParams, apply_prompt, init_prompt, load_prompt, save_prompt, save_prompt_png
from .training import DynamicsLog, VPTrainConfig, compute_confidence, train_prompt, train_prompt_adversarial

__version__ = "0.1.0"
