"""Command-line entry point.

Commands: prepare-data, train-source, train-prompt, eval, sweep-pbl, compare,
viz-prompt, report. Every command takes an --out directory, acquires a lock
file there (concurrent invocations must use distinct --out), and writes
config.json with the fully resolved configuration before doing anything else.

Configuration sources, lowest to highest precedence: built-in defaults,
--config file, command-line flags. Config files are either flat
`key = <JSON value>` lines or a JSON object (the echoed config.json reloads
directly). Unknown keys are hard errors. Budgets accept decimals or the
"N/255" form. PROMPTLOOM_SEED supplies the seed when no flag or file sets one.

Exit codes: 0 success, 2 configuration/validation failure, 1 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from contextlib import contextmanager
from pathlib import Path

from . import data, evaluation, figures, metrics, models, prompts, training
from .errors import ConfigError, InfeasibleMapping, MissingFile, PromptloomError
from .label_mapping import LabelMapping
from .pbl import LooseningConfig
from .pipeline import PromptPipeline

SCHEMA_VERSION = 1


def parse_epsilon(value) -> float:
    """Accept 0.0157-style decimals or the conventional 'N/255' form."""
    if isinstance(value, (int, float)):
        return float(value)
    text = str(value).strip()
    if "/" in text:
        num, den = text.split("/", 1)
        try:
            return float(num) / float(den)
        except ValueError:
            raise ConfigError(f"cannot parse epsilon {value!r}") from None
    try:
        return float(text)
    except ValueError:
        raise ConfigError(f"cannot parse epsilon {value!r}") from None


def parse_resolution(value) -> tuple[int, int]:
    if isinstance(value, (list, tuple)) and len(value) == 2:
        return int(value[0]), int(value[1])
    text = str(value).lower().replace("x", " ").replace(",", " ")
    parts = text.split()
    if len(parts) != 2:
        raise ConfigError(f"cannot parse resolution {value!r} (want HxW)")
    return int(parts[0]), int(parts[1])


def load_config_file(path: str | Path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise MissingFile(f"config file {path} does not exist")
    text = path.read_text(encoding="utf-8")
    stripped = text.lstrip()
    if stripped.startswith("{"):
        doc = json.loads(text)
        if not isinstance(doc, dict):
            raise ConfigError(f"{path}: JSON config must be an object")
        doc.pop("schema_version", None)
        return doc
    cfg = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key = value")
        key, _, raw = line.partition("=")
        try:
            cfg[key.strip()] = json.loads(raw.strip())
        except json.JSONDecodeError:
            raise ConfigError(
                f"{path}:{lineno}: value for {key.strip()!r} is not valid JSON"
            ) from None
    return cfg


def resolve_config(args: argparse.Namespace, defaults: dict) -> dict:
    """defaults < config file < explicit flags; unknown file keys are errors."""
    file_cfg = load_config_file(args.config) if getattr(args, "config", None) else {}
    unknown = sorted(set(file_cfg) - set(defaults))
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
    cfg = dict(defaults)
    cfg.update(file_cfg)
    for key in defaults:
        flag_val = getattr(args, key, None)
        if flag_val is not None:
            cfg[key] = flag_val
    if "seed" in cfg and cfg["seed"] is None:
        cfg["seed"] = int(os.environ.get("PROMPTLOOM_SEED", "0"))
    return cfg


@contextmanager
def run_directory(out: str | Path, resolved: dict):
    """Create --out, take its lock, and echo the resolved config first."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    lock = out / ".promptloom.lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise ConfigError(
            f"{out} is locked by another invocation (stale lock? remove {lock})"
        ) from None
    os.close(fd)
    try:
        echo = {"schema_version": SCHEMA_VERSION}
        echo.update(resolved)
        (out / "config.json").write_text(
            json.dumps(echo, indent=2, default=str) + "\n", encoding="utf-8"
        )
        yield out
    finally:
        lock.unlink(missing_ok=True)


# ---------------------------------------------------------------------------
# command implementations
# ---------------------------------------------------------------------------

_PREPARE_DEFAULTS = dict(
    name=None, k=5, per_class=50, test_per_class=None, resolution="32x32",
    seed=None, role="downstream", channels=3, pattern_seed=0, mixture_size=1,
    dominant_weight=0.7, amplitude=0.3, noise_sigma=0.08, window=None,
    paired=False, detail_scale=0.35, pattern_indices=None,
)


def _parse_window(value):
    if value is None:
        return None
    parts = value if isinstance(value, list) else str(value).split(",")
    if len(parts) != 4:
        raise ConfigError(f"window needs 4 values y0,x0,y1,x1, got {value!r}")
    return tuple(float(v) for v in parts)


def cmd_prepare_data(args) -> int:
    cfg = resolve_config(args, _PREPARE_DEFAULTS)
    indices = cfg["pattern_indices"]
    if indices is not None and not isinstance(indices, list):
        indices = [int(tok) for tok in str(indices).replace(",", " ").split()]
    with run_directory(args.out, cfg) as out:
        manifest = data.make_synthetic_dataset(
            int(cfg["k"]), int(cfg["per_class"]), parse_resolution(cfg["resolution"]),
            int(cfg["seed"]), out,
            name=cfg["name"], role=cfg["role"], channels=int(cfg["channels"]),
            test_per_class=None if cfg["test_per_class"] is None else int(cfg["test_per_class"]),
            pattern_seed=int(cfg["pattern_seed"]), mixture_size=int(cfg["mixture_size"]),
            dominant_weight=float(cfg["dominant_weight"]), amplitude=float(cfg["amplitude"]),
            noise_sigma=float(cfg["noise_sigma"]), window=_parse_window(cfg["window"]),
            paired=bool(cfg["paired"]), detail_scale=float(cfg["detail_scale"]),
            pattern_indices=indices,
        )
        print(out / "manifest.json")
        print(f"dataset {manifest.name}: {manifest.train_size} train / "
              f"{manifest.test_size} test, k={manifest.class_count}")
    return 0


_TRAIN_SOURCE_DEFAULTS = dict(
    data=None, mode="standard", epochs=20, lr=0.02, batch_size=64, seed=None,
    epsilon="4/255", at_steps=1, depth=2, width=16, n_out=None,
)


def cmd_train_source(args) -> int:
    cfg = resolve_config(args, _TRAIN_SOURCE_DEFAULTS)
    if not cfg["data"]:
        raise ConfigError("data: path to a dataset manifest is required")
    if cfg["mode"] not in ("standard", "adversarial"):
        raise ConfigError(f"mode must be standard or adversarial, got {cfg['mode']!r}")
    manifest = data.load_manifest(cfg["data"])
    train_cfg = models.SourceTrainConfig(
        epochs=int(cfg["epochs"]), learning_rate=float(cfg["lr"]),
        batch_size=int(cfg["batch_size"]), seed=int(cfg["seed"]),
        at_epsilon=parse_epsilon(cfg["epsilon"]) if cfg["mode"] == "adversarial" else 0.0,
        at_steps=int(cfg["at_steps"]), depth=int(cfg["depth"]), width=int(cfg["width"]),
        n_out=None if cfg["n_out"] is None else int(cfg["n_out"]),
    )
    with run_directory(args.out, cfg) as out:
        if cfg["mode"] == "adversarial":
            model = models.train_adversarial(manifest, train_cfg)
        else:
            model = models.train_standard(manifest, train_cfg)
        models.save_model(model, out)
        print(out)
        print(f"{model.arch_id} mode={model.training_mode} n={model.n} "
              f"train_acc={model.final_train_acc:.4f} checksum={model.param_checksum[:12]}")
    return 0


_TRAIN_PROMPT_DEFAULTS = dict(
    model=None, data=None, epochs=30, lr=0.1, batch_size=64, seed=None,
    lm="ILM", ilm_cadence="per_epoch", ilm_method="greedy",
    T=None, permute=False, permutation_seed=0, t_is_block_count=False,
    adversarial=False, at_epsilon="4/255", prompt_mode="pad", pad_width=None,
    prompt_init="zeros",
)


def _vp_config_from(cfg: dict, model: models.SourceModel) -> training.VPTrainConfig:
    loosening = None
    if cfg["T"] is not None:
        loosening = LooseningConfig(
            T=int(cfg["T"]), n=model.n, permute=bool(cfg["permute"]),
            permutation_seed=int(cfg["permutation_seed"]),
            t_is_block_count=bool(cfg["t_is_block_count"]),
        )
    return training.VPTrainConfig(
        epochs=int(cfg["epochs"]), learning_rate=float(cfg["lr"]),
        batch_size=int(cfg["batch_size"]), seed=int(cfg["seed"]),
        lm_strategy=cfg["lm"], ilm_cadence=cfg["ilm_cadence"],
        ilm_method=cfg["ilm_method"], loosening=loosening,
        adversarial=bool(cfg["adversarial"]),
        at_epsilon=parse_epsilon(cfg["at_epsilon"]) if cfg["adversarial"] else 0.0,
        prompt_mode=cfg["prompt_mode"],
        pad_width=None if cfg["pad_width"] is None else int(cfg["pad_width"]),
        prompt_init=cfg["prompt_init"],
    )


def cmd_train_prompt(args) -> int:
    cfg = resolve_config(args, _TRAIN_PROMPT_DEFAULTS)
    for key in ("model", "data"):
        if not cfg[key]:
            raise ConfigError(f"{key}: required")
    model = models.load_model(cfg["model"])
    manifest = data.load_manifest(cfg["data"])
    vp_cfg = _vp_config_from(cfg, model)
    d = vp_cfg.loosening.d_I if vp_cfg.loosening else model.n
    if d < manifest.class_count:
        raise ConfigError(
            f"T: pipeline output dim {d} < k={manifest.class_count} downstream classes"
        )
    with run_directory(args.out, cfg) as out:
        _, log = training.train_prompt(model, manifest, vp_cfg, out_dir=out)
        last = log.epochs[-1]
        print(out)
        print(f"epoch {last.epoch}: loss={last.train_loss:.4f} "
              f"train_acc={last.train_std_acc:.4f} test_acc={last.test_std_acc:.4f}")
    return 0


def _load_run_pipeline(model_dir: str, run_dir: str) -> tuple[models.SourceModel, PromptPipeline, dict]:
    """Rebuild the deployed pipeline from a train-prompt run directory."""
    model = models.load_model(model_dir)
    run_dir = Path(run_dir)
    prompt, header = prompts.load_prompt(run_dir)
    if header.get("model_checksum") and header["model_checksum"] != model.param_checksum:
        raise ConfigError(
            "prompt was trained against a different source model "
            f"({header['model_checksum'][:12]} != {model.param_checksum[:12]})"
        )
    run_meta_path = run_dir / "run.json"
    if not run_meta_path.is_file():
        raise MissingFile(f"{run_meta_path} (needed to rebuild the pipeline)")
    run_meta = json.loads(run_meta_path.read_text(encoding="utf-8"))
    mapping_path = run_dir / "final_mapping.json"
    if not mapping_path.is_file():
        raise MissingFile(str(mapping_path))
    map_doc = json.loads(mapping_path.read_text(encoding="utf-8"))["mapping"]
    loos_doc = run_meta["config"].get("loosening")
    loosening = None
    if loos_doc:
        loosening = LooseningConfig(
            T=loos_doc["T"], n=loos_doc["n"], permute=loos_doc["permute"],
            permutation_seed=loos_doc["permutation_seed"],
            t_is_block_count=loos_doc["t_is_block_count"],
        )
    d = loosening.d_I if loosening else model.n
    mapping = LabelMapping(
        d=d, k=len(map_doc["assign"]), assign=map_doc["assign"],
        strategy=map_doc["strategy"], epoch_created=map_doc["epoch"],
    )
    pipeline = PromptPipeline(model, prompt, mapping, loosening)
    return model, pipeline, run_meta


_EVAL_DEFAULTS = dict(
    model=None, prompt=None, data=None, epsilon="4/255", split="test", batch_size=256,
    seed=None,
)


def cmd_eval(args) -> int:
    cfg = resolve_config(args, _EVAL_DEFAULTS)
    for key in ("model", "prompt", "data"):
        if not cfg[key]:
            raise ConfigError(f"{key}: required")
    manifest = data.load_manifest(cfg["data"])
    model, pipeline, run_meta = _load_run_pipeline(cfg["model"], cfg["prompt"])
    from .attacks import AttackConfig, evaluate_robustness

    with run_directory(args.out, cfg) as out:
        dataset = data.load_dataset(manifest, cfg["split"])
        record = evaluate_robustness(
            pipeline, dataset, AttackConfig(parse_epsilon(cfg["epsilon"])),
            batch_size=int(cfg["batch_size"]),
            meta=dict(
                run_id=f"eval-{manifest.name}-seed{run_meta['config']['seed']}",
                dataset=manifest.name,
                source_mode=model.training_mode,
                lm_strategy=run_meta["config"]["lm_strategy"],
                T=(run_meta["config"].get("loosening") or {}).get("T"),
                adversarial=run_meta["config"]["adversarial"],
                seed=run_meta["config"]["seed"],
            ),
        )
        metrics.write_records([record], out / "records.jsonl")
        adv_text = "undefined(0/0)" if record.adv_acc is None else f"{record.adv_acc:.4f}"
        print(f"std_acc={record.std_acc:.4f} adv_acc={adv_text} "
              f"(orig {record.orig_correct}/{record.all_count}, "
              f"adv {record.adv_correct}/{record.orig_correct}, eps={record.epsilon:.6f})")
    return 0


_SWEEP_DEFAULTS = dict(
    model=None, data=None, factors="1,2", epochs=30, lr=0.1, batch_size=64,
    seed=None, lm="ILM", ilm_cadence="per_epoch", ilm_method="greedy",
    permute=False, permutation_seed=0, t_is_block_count=False,
    adversarial=False, at_epsilon="4/255", prompt_mode="pad", pad_width=None,
    prompt_init="zeros", epsilon="4/255",
)


def _parse_factors(value) -> list[int]:
    if isinstance(value, list):
        return [int(v) for v in value]
    try:
        return [int(tok) for tok in str(value).replace(",", " ").split()]
    except ValueError:
        raise ConfigError(f"cannot parse factors {value!r}") from None


def cmd_sweep_pbl(args) -> int:
    cfg = resolve_config(args, _SWEEP_DEFAULTS)
    for key in ("model", "data"):
        if not cfg[key]:
            raise ConfigError(f"{key}: required")
    model = models.load_model(cfg["model"])
    manifest = data.load_manifest(cfg["data"])
    factors = _parse_factors(cfg["factors"])
    # pre-flight before the lock and any training: names every offending T
    evaluation.check_sweep_factors(model.n, manifest.class_count, factors,
                                   t_is_block_count=bool(cfg["t_is_block_count"]))
    base = _vp_config_from({**cfg, "T": 1}, model)
    with run_directory(args.out, cfg) as out:
        rows = evaluation.sweep_loosening(
            model, manifest, base, factors,
            epsilon=parse_epsilon(cfg["epsilon"]), out_dir=out / "runs",
        )
        records = [row.record for row in rows]
        metrics.write_records(records, out / "records.jsonl")
        (out / "report.csv").write_text(evaluation.render_report(records, "csv"), encoding="utf-8")
        (out / "report.md").write_text(evaluation.render_report(records, "markdown"), encoding="utf-8")
        figures.save_sweep_figure(rows, out / "sweep_improvement.png")
        for row in rows:
            std_imp = "baseline" if row.T == 1 else (
                "n/a" if row.std_improvement is None else f"{row.std_improvement:+.2%}"
            )
            print(f"T={row.T}: std={row.record.std_acc:.4f} ({std_imp})")
    return 0


_COMPARE_DEFAULTS = dict(
    model=None, data=None, T=2, epochs=30, lr=0.1, batch_size=64, seed=None,
    lm="ILM", ilm_cadence="per_epoch", ilm_method="greedy",
    permute=False, permutation_seed=0, t_is_block_count=False,
    at_epsilon="4/255", prompt_mode="pad", pad_width=None, prompt_init="zeros",
    epsilon="4/255",
)


def cmd_compare(args) -> int:
    cfg = resolve_config(args, _COMPARE_DEFAULTS)
    for key in ("model", "data"):
        if not cfg[key]:
            raise ConfigError(f"{key}: required")
    model = models.load_model(cfg["model"])
    manifest = data.load_manifest(cfg["data"])
    base = _vp_config_from({**cfg, "adversarial": True}, model)
    with run_directory(args.out, cfg) as out:
        rows = evaluation.compare_strategies(
            model, manifest, base, epsilon=parse_epsilon(cfg["epsilon"]),
            out_dir=out / "runs",
        )
        records = [row.record for row in rows]
        metrics.write_records(records, out / "records.jsonl")
        (out / "report.csv").write_text(evaluation.render_report(records, "csv"), encoding="utf-8")
        (out / "report.md").write_text(evaluation.render_report(records, "markdown"), encoding="utf-8")
        figures.save_compare_figure(rows, out / "compare_resources.png")
        for row in rows:
            adv = "undef" if row.record.adv_acc is None else f"{row.record.adv_acc:.4f}"
            print(f"{row.label}: std={row.record.std_acc:.4f} adv={adv} "
                  f"epoch_time={row.mean_epoch_time_s:.2f}s")
    return 0


_VIZ_DEFAULTS = dict(prompt=None, stem="prompt_final")


def cmd_viz_prompt(args) -> int:
    cfg = resolve_config(args, _VIZ_DEFAULTS)
    if not cfg["prompt"]:
        raise ConfigError("prompt: required")
    prompt, _ = prompts.load_prompt(cfg["prompt"], stem=cfg["stem"])
    with run_directory(args.out, cfg) as out:
        path = prompts.save_prompt_png(prompt, out / "prompt.png")
        print(path)
    return 0


_REPORT_DEFAULTS = dict(records=None, format="both", dynamics=None)


def cmd_report(args) -> int:
    cfg = resolve_config(args, _REPORT_DEFAULTS)
    if not cfg["records"]:
        raise ConfigError("records: at least one records.jsonl path is required")
    paths = cfg["records"] if isinstance(cfg["records"], list) else str(cfg["records"]).split(",")
    records = []
    for path in paths:
        records.extend(metrics.read_records(path.strip()))
    if not records:
        raise ConfigError("records: the given files hold no records")
    if cfg["format"] not in ("csv", "markdown", "both"):
        raise ConfigError(f"format must be csv, markdown, or both, got {cfg['format']!r}")
    dynamics = {}
    if cfg["dynamics"]:
        runs = cfg["dynamics"] if isinstance(cfg["dynamics"], list) else str(cfg["dynamics"]).split(",")
        for run in runs:
            run_dir = Path(run.strip())
            jsonl = run_dir / "dynamics.jsonl" if run_dir.is_dir() else run_dir
            if not jsonl.is_file():
                raise MissingFile(f"dynamics: {jsonl} does not exist")
            dynamics[run_dir.name] = jsonl
    with run_directory(args.out, cfg) as out:
        written = []
        if cfg["format"] in ("csv", "both"):
            (out / "report.csv").write_text(evaluation.render_report(records, "csv"), encoding="utf-8")
            written.append(out / "report.csv")
        if cfg["format"] in ("markdown", "both"):
            (out / "report.md").write_text(
                evaluation.render_report(records, "markdown"), encoding="utf-8"
            )
            written.append(out / "report.md")
        written.append(figures.save_accuracy_figure(records, out / "report_accuracy.png"))
        if dynamics:
            written.append(figures.save_dynamics_figure(dynamics, out / "report_dynamics.png"))
        for path in written:
            print(path)
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def _add_common(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--out", required=True, help="output directory (created; locked)")
    sub.add_argument("--config", help="config file: flat key = JSON lines, or echoed config.json")


def _opt(sub, *names, **kwargs):
    # flags default to None so resolve_config can tell "given" from "default"
    kwargs.setdefault("default", None)
    sub.add_argument(*names, **kwargs)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="promptloom",
        description="visual prompting with frozen source models, label mapping, "
                    "output-block loosening, and FGSM evaluation",
    )
    subs = parser.add_subparsers(dest="command", required=True)

    p = subs.add_parser("prepare-data", help="generate a synthetic dataset")
    _add_common(p)
    _opt(p, "--name")
    _opt(p, "--k", type=int)
    _opt(p, "--per-class", dest="per_class", type=int)
    _opt(p, "--test-per-class", dest="test_per_class", type=int)
    _opt(p, "--resolution")
    _opt(p, "--seed", type=int)
    _opt(p, "--role", choices=["source", "downstream"])
    _opt(p, "--channels", type=int)
    _opt(p, "--pattern-seed", dest="pattern_seed", type=int)
    _opt(p, "--mixture-size", dest="mixture_size", type=int)
    _opt(p, "--dominant-weight", dest="dominant_weight", type=float)
    _opt(p, "--amplitude", type=float)
    _opt(p, "--noise-sigma", dest="noise_sigma", type=float)
    _opt(p, "--window", help="y0,x0,y1,x1 sub-region of pattern space to rasterize")
    _opt(p, "--paired", action="store_const", const=True,
         help="build patterns in sibling pairs (common structure +/- detail)")
    _opt(p, "--detail-scale", dest="detail_scale", type=float)
    _opt(p, "--pattern-indices", dest="pattern_indices",
         help="comma-separated pattern bank indices, k*mixture_size entries")
    p.set_defaults(func=cmd_prepare_data)

    p = subs.add_parser("train-source", help="train a source classifier and freeze it")
    _add_common(p)
    _opt(p, "--data")
    _opt(p, "--mode", choices=["standard", "adversarial", "adv"])
    _opt(p, "--epochs", type=int)
    _opt(p, "--lr", type=float)
    _opt(p, "--batch-size", dest="batch_size", type=int)
    _opt(p, "--seed", type=int)
    _opt(p, "--epsilon", help="AT budget, decimal or N/255")
    _opt(p, "--at-steps", dest="at_steps", type=int)
    _opt(p, "--depth", type=int)
    _opt(p, "--width", type=int)
    _opt(p, "--n-out", dest="n_out", type=int)
    p.set_defaults(func=cmd_train_source)

    p = subs.add_parser("train-prompt", help="train a visual prompt against a frozen model")
    _add_common(p)
    _opt(p, "--model")
    _opt(p, "--data")
    _opt(p, "--epochs", type=int)
    _opt(p, "--lr", type=float)
    _opt(p, "--batch-size", dest="batch_size", type=int)
    _opt(p, "--seed", type=int)
    _opt(p, "--lm", choices=["RLM", "ILM"])
    _opt(p, "--ilm-cadence", dest="ilm_cadence", choices=["per_epoch", "per_batch"])
    _opt(p, "--ilm-method", dest="ilm_method", choices=["greedy", "optimal"])
    _opt(p, "--T", type=int, help="loosening factor (block size); omit for no loosening")
    _opt(p, "--permute", action="store_const", const=True)
    _opt(p, "--permutation-seed", dest="permutation_seed", type=int)
    _opt(p, "--t-is-block-count", dest="t_is_block_count", action="store_const", const=True)
    _opt(p, "--adversarial", action="store_const", const=True)
    _opt(p, "--at-epsilon", dest="at_epsilon")
    _opt(p, "--prompt-mode", dest="prompt_mode", choices=["pad", "additive"])
    _opt(p, "--pad-width", dest="pad_width", type=int)
    _opt(p, "--prompt-init", dest="prompt_init", choices=["zeros", "uniform"])
    p.set_defaults(func=cmd_train_prompt)

    p = subs.add_parser("eval", help="FGSM robustness evaluation of a trained run")
    _add_common(p)
    _opt(p, "--model")
    _opt(p, "--prompt", help="train-prompt run directory")
    _opt(p, "--data")
    _opt(p, "--epsilon")
    _opt(p, "--split", choices=["train", "test"])
    _opt(p, "--batch-size", dest="batch_size", type=int)
    _opt(p, "--seed", type=int)
    p.set_defaults(func=cmd_eval)

    p = subs.add_parser("sweep-pbl", help="train+eval across loosening factors")
    _add_common(p)
    _opt(p, "--model")
    _opt(p, "--data")
    _opt(p, "--factors", help="comma-separated loosening factors; must include 1")
    _opt(p, "--epochs", type=int)
    _opt(p, "--lr", type=float)
    _opt(p, "--batch-size", dest="batch_size", type=int)
    _opt(p, "--seed", type=int)
    _opt(p, "--lm", choices=["RLM", "ILM"])
    _opt(p, "--ilm-cadence", dest="ilm_cadence", choices=["per_epoch", "per_batch"])
    _opt(p, "--ilm-method", dest="ilm_method", choices=["greedy", "optimal"])
    _opt(p, "--permute", action="store_const", const=True)
    _opt(p, "--permutation-seed", dest="permutation_seed", type=int)
    _opt(p, "--t-is-block-count", dest="t_is_block_count", action="store_const", const=True)
    _opt(p, "--adversarial", action="store_const", const=True)
    _opt(p, "--at-epsilon", dest="at_epsilon")
    _opt(p, "--prompt-mode", dest="prompt_mode", choices=["pad", "additive"])
    _opt(p, "--pad-width", dest="pad_width", type=int)
    _opt(p, "--prompt-init", dest="prompt_init", choices=["zeros", "uniform"])
    _opt(p, "--epsilon", help="evaluation attack budget")
    p.set_defaults(func=cmd_sweep_pbl)

    p = subs.add_parser("compare", help="the 4-row +/-PBL x +/-AT comparison")
    _add_common(p)
    _opt(p, "--model")
    _opt(p, "--data")
    _opt(p, "--T", type=int, help="loosening factor for the PBL rows")
    _opt(p, "--epochs", type=int)
    _opt(p, "--lr", type=float)
    _opt(p, "--batch-size", dest="batch_size", type=int)
    _opt(p, "--seed", type=int)
    _opt(p, "--lm", choices=["RLM", "ILM"])
    _opt(p, "--ilm-cadence", dest="ilm_cadence", choices=["per_epoch", "per_batch"])
    _opt(p, "--ilm-method", dest="ilm_method", choices=["greedy", "optimal"])
    _opt(p, "--permute", action="store_const", const=True)
    _opt(p, "--permutation-seed", dest="permutation_seed", type=int)
    _opt(p, "--t-is-block-count", dest="t_is_block_count", action="store_const", const=True)
    _opt(p, "--at-epsilon", dest="at_epsilon")
    _opt(p, "--prompt-mode", dest="prompt_mode", choices=["pad", "additive"])
    _opt(p, "--pad-width", dest="pad_width", type=int)
    _opt(p, "--prompt-init", dest="prompt_init", choices=["zeros", "uniform"])
    _opt(p, "--epsilon")
    p.set_defaults(func=cmd_compare)

    p = subs.add_parser("viz-prompt", help="export a prompt as 8-bit RGB PNG")
    _add_common(p)
    _opt(p, "--prompt", help="run or checkpoint directory holding the prompt")
    _opt(p, "--stem")
    p.set_defaults(func=cmd_viz_prompt)

    p = subs.add_parser("report", help="render records into CSV/markdown + figures")
    _add_common(p)
    _opt(p, "--records", help="comma-separated records.jsonl paths")
    _opt(p, "--format", choices=["csv", "markdown", "both"])
    _opt(p, "--dynamics", help="comma-separated run dirs; adds a training-dynamics figure")
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "mode", None) == "adv":
        args.mode = "adversarial"
    try:
        return args.func(args)
    except (ConfigError, InfeasibleMapping, MissingFile) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except PromptloomError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
