import json

import pytest
from PIL import Image

from promptloom.cli import main, parse_epsilon, parse_resolution
from promptloom.data import load_manifest
from promptloom.errors import ConfigError
from promptloom.metrics import read_records
from promptloom.models import load_model


def test_epsilon_forms():
    assert parse_epsilon("4/255") == pytest.approx(4 / 255)
    assert parse_epsilon("0.0157") == pytest.approx(0.0157)
    assert parse_epsilon(0.03) == 0.03
    with pytest.raises(ConfigError):
        parse_epsilon("four")


def test_resolution_forms():
    assert parse_resolution("32x32") == (32, 32)
    assert parse_resolution("16,24") == (16, 24)
    assert parse_resolution([8, 12]) == (8, 12)
    with pytest.raises(ConfigError):
        parse_resolution("32")


def _prepare(tmp_path, name, **kw):
    args = ["prepare-data", "--out", str(tmp_path / name), "--k", str(kw.get("k", 2)),
            "--per-class", str(kw.get("per_class", 12)), "--resolution", "16x16",
            "--seed", str(kw.get("seed", 0)), "--test-per-class", "6",
            "--amplitude", "0.3", "--noise-sigma", "0.05"]
    if kw.get("role"):
        args += ["--role", kw["role"]]
    assert main(args) == 0
    return tmp_path / name / "manifest.json"


def _train_source(tmp_path, data, name, extra=()):
    out = tmp_path / name
    args = ["train-source", "--out", str(out), "--data", str(data),
            "--epochs", "4", "--seed", "1", "--width", "8", *extra]
    assert main(args) == 0
    return out


def test_end_to_end_pipeline(tmp_path, capsys):
    data = _prepare(tmp_path, "data", role="source")
    manifest = load_manifest(data)
    assert manifest.train_size == 24

    ckpt = _train_source(tmp_path, data, "model")
    model = load_model(ckpt)
    assert model.training_mode == "standard"
    assert json.loads((ckpt / "config.json").read_text())["seed"] == 1

    run = tmp_path / "run"
    assert main(["train-prompt", "--out", str(run), "--model", str(ckpt),
                 "--data", str(data), "--epochs", "2", "--lr", "0.1",
                 "--seed", "3", "--prompt-init", "uniform"]) == 0
    for name in ("config.json", "dynamics.jsonl", "timing.jsonl", "prompt_final.bin"):
        assert (run / name).is_file()

    out = tmp_path / "eval"
    assert main(["eval", "--out", str(out), "--model", str(ckpt), "--prompt", str(run),
                 "--data", str(data), "--epsilon", "4/255"]) == 0
    records = read_records(out / "records.jsonl")
    assert len(records) == 1
    assert records[0].epsilon == pytest.approx(4 / 255)

    viz = tmp_path / "viz"
    assert main(["viz-prompt", "--out", str(viz), "--prompt", str(run)]) == 0
    img = Image.open(viz / "prompt.png")
    assert img.mode == "RGB" and img.size == (16, 16)

    rep = tmp_path / "rep"
    assert main(["report", "--out", str(rep), "--records", str(out / "records.jsonl")]) == 0
    assert (rep / "report.csv").is_file()
    assert (rep / "report.md").is_file()
    assert (rep / "report_accuracy.png").is_file()


def test_adversarial_mode_flag(tmp_path):
    data = _prepare(tmp_path, "data", role="source")
    ckpt = _train_source(tmp_path, data, "adv_model",
                         extra=["--mode", "adv", "--epsilon", "0.0157"])
    model = load_model(ckpt)
    assert model.training_mode == "adversarial"


def test_eval_epsilon_zero_gives_adv_one(tmp_path):
    data = _prepare(tmp_path, "data", role="source")
    ckpt = _train_source(tmp_path, data, "model")
    run = tmp_path / "run"
    main(["train-prompt", "--out", str(run), "--model", str(ckpt), "--data", str(data),
          "--epochs", "3", "--lr", "0.2", "--seed", "0", "--prompt-init", "uniform"])
    out = tmp_path / "eval0"
    assert main(["eval", "--out", str(out), "--model", str(ckpt), "--prompt", str(run),
                 "--data", str(data), "--epsilon", "0"]) == 0
    rec = read_records(out / "records.jsonl")[0]
    assert rec.std_acc > 0
    assert rec.adv_acc == 1.0


def test_sweep_preflight_exit_2_names_factor(tmp_path, capsys):
    data = _prepare(tmp_path, "data", k=3, role="source")  # n=3, k=3
    ckpt = _train_source(tmp_path, data, "model")
    code = main(["sweep-pbl", "--out", str(tmp_path / "sweep"), "--model", str(ckpt),
                 "--data", str(data), "--factors", "1,2,3", "--epochs", "1"])
    assert code == 2
    err = capsys.readouterr().err
    assert "T=2" in err and "T=3" in err  # d_I of 2 and 1 both undercut k=3


def test_sweep_preflight_wide_head_names_only_t6(tmp_path, capsys):
    # n=10 head over k=3 classes: T=2 pools to 5 >= 3 (fine), T=6 pools to 2 < 3
    data = _prepare(tmp_path, "data", k=3, role="source")
    ckpt = _train_source(tmp_path, data, "model", extra=["--n-out", "10"])
    code = main(["sweep-pbl", "--out", str(tmp_path / "sweep"), "--model", str(ckpt),
                 "--data", str(data), "--factors", "1,2,6", "--epochs", "1"])
    assert code == 2
    err = capsys.readouterr().err
    assert "T=6" in err and "T=2" not in err
    assert not (tmp_path / "sweep" / "records.jsonl").exists()  # nothing trained


def test_compare_end_to_end(tmp_path):
    data = _prepare(tmp_path, "data", k=2, role="source")
    ckpt = _train_source(tmp_path, data, "model")
    out = tmp_path / "cmp"
    assert main(["compare", "--out", str(out), "--model", str(ckpt), "--data", str(data),
                 "--T", "1", "--epochs", "2", "--lr", "0.1", "--seed", "0",
                 "--at-epsilon", "4/255", "--prompt-init", "uniform"]) == 0
    records = read_records(out / "records.jsonl")
    assert len(records) == 4
    assert sum(r.adversarial for r in records) == 2
    assert (out / "compare_resources.png").is_file()
    assert (out / "report.csv").is_file()


def test_report_with_dynamics_figure(tmp_path):
    data = _prepare(tmp_path, "data", role="source")
    ckpt = _train_source(tmp_path, data, "model")
    run = tmp_path / "run"
    main(["train-prompt", "--out", str(run), "--model", str(ckpt), "--data", str(data),
          "--epochs", "2", "--lr", "0.1", "--seed", "0", "--prompt-init", "uniform"])
    ev = tmp_path / "ev"
    main(["eval", "--out", str(ev), "--model", str(ckpt), "--prompt", str(run),
          "--data", str(data)])
    rep = tmp_path / "rep"
    assert main(["report", "--out", str(rep), "--records", str(ev / "records.jsonl"),
                 "--dynamics", str(run)]) == 0
    assert (rep / "report_dynamics.png").is_file()


def test_sweep_end_to_end(tmp_path):
    data = _prepare(tmp_path, "data", k=2, role="source")
    ckpt = _train_source(tmp_path, data, "model")
    out = tmp_path / "sweep"
    assert main(["sweep-pbl", "--out", str(out), "--model", str(ckpt), "--data", str(data),
                 "--factors", "1", "--epochs", "2", "--lr", "0.1", "--seed", "0",
                 "--prompt-init", "uniform"]) == 0
    assert (out / "records.jsonl").is_file()
    assert (out / "report.csv").is_file()
    assert (out / "report.md").is_file()
    assert (out / "sweep_improvement.png").is_file()
    assert (out / "runs/T1/dynamics.jsonl").is_file()


def test_unknown_config_key_exit_2(tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text('k = 2\nper_clas = 10\n')
    code = main(["prepare-data", "--out", str(tmp_path / "o"), "--config", str(cfg)])
    assert code == 2
    assert "per_clas" in capsys.readouterr().err


def test_flags_override_config_file(tmp_path):
    cfg = tmp_path / "data.cfg"
    cfg.write_text('k = 2\nper_class = 12\nseed = 5\namplitude = 0.3\n')
    out = tmp_path / "d"
    assert main(["prepare-data", "--out", str(out), "--config", str(cfg),
                 "--seed", "9", "--test-per-class", "2"]) == 0
    echo = json.loads((out / "config.json").read_text())
    assert echo["seed"] == 9  # flag wins
    assert echo["per_class"] == 12  # file wins over default
    assert echo["schema_version"] == 1


def test_seed_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("PROMPTLOOM_SEED", "77")
    out = tmp_path / "d"
    assert main(["prepare-data", "--out", str(out), "--k", "2", "--per-class", "4"]) == 0
    assert json.loads((out / "config.json").read_text())["seed"] == 77


def test_lock_file_blocks_concurrent_use(tmp_path, capsys):
    out = tmp_path / "d"
    out.mkdir()
    (out / ".promptloom.lock").touch()
    code = main(["prepare-data", "--out", str(out), "--k", "2", "--per-class", "4"])
    assert code == 2
    assert "lock" in capsys.readouterr().err.lower()


def test_train_prompt_reproducible_from_echoed_config(tmp_path):
    data = _prepare(tmp_path, "data", role="source")
    ckpt = _train_source(tmp_path, data, "model")
    run1 = tmp_path / "run1"
    argv = ["train-prompt", "--out", str(run1), "--model", str(ckpt), "--data", str(data),
            "--epochs", "2", "--lr", "0.15", "--seed", "6", "--prompt-init", "uniform"]
    assert main(argv) == 0
    # replay purely from the echoed config: byte-identical dynamics and prompt
    run2 = tmp_path / "run2"
    assert main(["train-prompt", "--out", str(run2),
                 "--config", str(run1 / "config.json")]) == 0
    assert (run1 / "dynamics.jsonl").read_bytes() == (run2 / "dynamics.jsonl").read_bytes()
    assert (run1 / "prompt_final.bin").read_bytes() == (run2 / "prompt_final.bin").read_bytes()


def test_no_mutation_outside_out_dir(tmp_path):
    data = _prepare(tmp_path, "data", role="source")
    snapshot = {p: p.read_bytes() for p in (tmp_path / "data").iterdir() if p.is_file()}
    _train_source(tmp_path, data, "model")
    for path, blob in snapshot.items():
        assert path.read_bytes() == blob
