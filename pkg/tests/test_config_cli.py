import hashlib
import json

import numpy as np
import pytest

from pmss import cli, data
from pmss.config import ConfigError, config_from_dict, load_config, validate_against_schema


MICRO = {
    "backbone": {"kind": "cnn", "channels": [8, 8, 8, 8], "depths": [1, 1, 1, 1], "seed": 2},
    "spm": {"stages": [1, 2, 3, 4], "C": 8, "R": 1},
    "strategy": "prompt_matched",
    "loss": {"weights": [0.05, 0.1, 0.2, 0.3, 0.4]},
    "train": {"steps": 6, "lr": 0.01, "momentum": 0.9, "batch": 1, "seed": 0},
    "data": {"preset": "downstream", "size": 32, "train_count": 6, "val_count": 2},
}


def write_config(tmp_path, doc, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(doc))
    return str(path)


# -- config -------------------------------------------------------------------

def test_default_document_round_trips():
    cfg = config_from_dict(MICRO)
    doc = cfg.to_json_dict()
    validate_against_schema(doc, "run_config")
    assert doc["spm"]["R"] == 1 and doc["spm"]["C"] == 8


def test_r_zero_names_field():
    bad = json.loads(json.dumps(MICRO))
    bad["spm"]["R"] = 0
    with pytest.raises(ConfigError) as err:
        config_from_dict(bad)
    assert err.value.field == "spm.R"


def test_unknown_keys_rejected_by_schema():
    bad = json.loads(json.dumps(MICRO))
    bad["sppm"] = {}
    with pytest.raises(Exception):
        config_from_dict(bad)


def test_strategy_string_shorthand():
    cfg = config_from_dict({"strategy": "head"})
    assert cfg.strategy.tag == "head"


def test_spm_stages_demand_prompt_matched():
    bad = json.loads(json.dumps(MICRO))
    bad["strategy"] = "head"
    with pytest.raises(ConfigError):
        config_from_dict(bad)


def test_data_presets_expand():
    cfg = config_from_dict({"data": {"preset": "thin", "train_count": 3}})
    spec = cfg.data.to_spec()
    assert spec.thin_only and spec.num_classes == 2 and spec.train_count == 3


# -- cli ----------------------------------------------------------------------

def test_cli_train_micro_run(tmp_path):
    cfg_path = write_config(tmp_path, MICRO)
    out = tmp_path / "run"
    assert cli.main(["train", "--config", cfg_path, "--out", str(out)]) == 0
    report = (out / "report.ndjson").read_text().strip().splitlines()
    assert len(report) == MICRO["train"]["steps"]
    for line in report:
        validate_against_schema(json.loads(line), "report_record")
    manifest = json.loads((out / "manifest.json").read_text())
    validate_against_schema(manifest, "manifest")
    assert (out / "pipeline.ckpt").exists()
    metrics = json.loads((out / "metrics.json").read_text())
    validate_against_schema(metrics, "metrics")


def test_cli_train_invalid_config_exit_2(tmp_path, capsys):
    bad = json.loads(json.dumps(MICRO))
    bad["spm"]["R"] = 0
    cfg_path = write_config(tmp_path, bad)
    code = cli.main(["train", "--config", cfg_path, "--out", str(tmp_path / "o")])
    assert code == 2
    err = json.loads(capsys.readouterr().err.strip())
    validate_against_schema(err, "error")
    assert "spm.R" in err["field"]


def test_cli_train_deterministic_checkpoints(tmp_path):
    cfg_path = write_config(tmp_path, MICRO)
    hashes = []
    for name in ("a", "b"):
        out = tmp_path / name
        assert cli.main(["train", "--config", cfg_path, "--out", str(out)]) == 0
        hashes.append(hashlib.sha256((out / "pipeline.ckpt").read_bytes()).hexdigest())
    assert hashes[0] == hashes[1]


def test_cli_seed_override_changes_checkpoint(tmp_path):
    cfg_path = write_config(tmp_path, MICRO)
    out1, out2 = tmp_path / "s0", tmp_path / "s1"
    assert cli.main(["train", "--config", cfg_path, "--out", str(out1)]) == 0
    assert cli.main(["train", "--config", cfg_path, "--out", str(out2), "--seed", "7"]) == 0
    h1 = hashlib.sha256((out1 / "pipeline.ckpt").read_bytes()).hexdigest()
    h2 = hashlib.sha256((out2 / "pipeline.ckpt").read_bytes()).hexdigest()
    assert h1 != h2


def test_cli_eval_round_trip(tmp_path):
    cfg_path = write_config(tmp_path, MICRO)
    out = tmp_path / "run"
    assert cli.main(["train", "--config", cfg_path, "--out", str(out)]) == 0
    spec = data.SynthSpec(seed=202, size=32, train_count=4, val_count=0, palette_id=3, texture_id=1)
    ds, _ = data.generate(spec)
    data.save_dataset(ds, tmp_path / "ds", spec)
    code = cli.main([
        "eval", "--checkpoint", str(out / "pipeline.ckpt"),
        "--data", str(tmp_path / "ds"), "--out", str(tmp_path / "evalout"),
    ])
    assert code == 0
    doc = json.loads((tmp_path / "evalout" / "metrics.json").read_text())
    validate_against_schema(doc, "metrics")
    # determinism: second eval produces identical numbers
    code = cli.main([
        "eval", "--checkpoint", str(out / "pipeline.ckpt"),
        "--data", str(tmp_path / "ds"), "--out", str(tmp_path / "evalout2"),
    ])
    assert code == 0
    doc2 = json.loads((tmp_path / "evalout2" / "metrics.json").read_text())
    assert doc == doc2


def test_cli_eval_corrupted_magic_exit_4(tmp_path, capsys):
    cfg_path = write_config(tmp_path, MICRO)
    out = tmp_path / "run"
    assert cli.main(["train", "--config", cfg_path, "--out", str(out)]) == 0
    ckpt = out / "pipeline.ckpt"
    blob = bytearray(ckpt.read_bytes())
    blob[:4] = b"XXXX"
    ckpt.write_bytes(bytes(blob))
    spec = data.SynthSpec(seed=1, size=32, train_count=2, val_count=0)
    ds, _ = data.generate(spec)
    data.save_dataset(ds, tmp_path / "ds")
    code = cli.main(["eval", "--checkpoint", str(ckpt), "--data", str(tmp_path / "ds")])
    assert code == 4
    err = json.loads(capsys.readouterr().err.strip())
    assert err["exit_code"] == 4


def test_cli_count_table(tmp_path, capsys):
    cfg_path = write_config(tmp_path, MICRO)
    assert cli.main(["count", "--config", cfg_path, "--out", str(tmp_path / "c")]) == 0
    capsys.readouterr()
    doc = json.loads((tmp_path / "c" / "counts.json").read_text())
    validate_against_schema(doc, "count")
    assert doc["strategies"]["prompt_matched"]["backbone"] == 0
    prompts = [row["prompt"] for row in doc["stage_sweep"]]
    assert len(prompts) == 5
    assert all(a < b for a, b in zip(prompts, prompts[1:]))


def test_cli_count_matches_brute_force(tmp_path):
    from pmss.experiments import brute_force_counts, build_pipeline, resolve_datasets
    cfg = config_from_dict(MICRO)
    train_ds, _ = resolve_datasets(cfg.data)
    from pmss.experiments import build_backbone
    pipe = build_pipeline(cfg, build_backbone(cfg), train_ds)
    assert pipe.param_counts() == brute_force_counts(pipe)


def test_cli_ablate_stages_axis(tmp_path, capsys):
    doc = json.loads(json.dumps(MICRO))
    doc["train"]["steps"] = 2
    cfg_path = write_config(tmp_path, doc)
    out = tmp_path / "ab"
    code = cli.main(["ablate", "--config", cfg_path, "--axis", "stages",
                     "--out", str(out), "--seeds", "1"])
    assert code == 0
    capsys.readouterr()
    result = json.loads((out / "ablation.json").read_text())
    validate_against_schema(result, "ablate")
    assert len(result["rows"]) == 5
    prompts = [r["prompt_params"] for r in result["rows"]]
    assert all(a < b for a, b in zip(prompts, prompts[1:]))


def test_cli_ablate_recurrent_axis_constant_params(tmp_path, capsys):
    doc = json.loads(json.dumps(MICRO))
    doc["train"]["steps"] = 2
    doc["spm"]["stages"] = [1, 2]
    cfg_path = write_config(tmp_path, doc)
    out = tmp_path / "ab"
    code = cli.main(["ablate", "--config", cfg_path, "--axis", "recurrent",
                     "--out", str(out), "--seeds", "1"])
    assert code == 0
    capsys.readouterr()
    result = json.loads((out / "ablation.json").read_text())
    prompts = {r["prompt_params"] for r in result["rows"]}
    assert len(result["rows"]) == 3
    assert len(prompts) == 1  # parameter count independent of R


def test_cli_gradcheck_pipeline_scope():
    assert cli.main(["gradcheck", "--scope", "pipeline", "--seed", "0"]) == 0


def test_load_config_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "absent.json")
