"""Harness behavior: subcommand orchestration, config overrides, output
placement, exit codes, and byte-stable artifacts."""

import csv
import json
import os

import pytest

from evf.cli import main

TINY_MODEL = [
    "--set", "model.depth=2",
    "--set", "model.width=8",
    "--set", "model.heads=2",
    "--set", "model.hidden=12",
    "--set", "model.vocab=12",
    "--set", "model.image_feature_dim=5",
    "--set", "model.text_len=4",
    "--set", "model.max_seq_len=16",
]


def write_fixture(path, tokens, **extra):
    doc = {"tokens": tokens, **extra}
    path.write_text(json.dumps(doc, indent=1))
    return str(path)


# ---------------------------------------------------------------------------
# grad-check


def test_grad_check_passes_on_a_reduced_model(tmp_path, capsys):
    rc = main(["grad-check", *TINY_MODEL, "--set", "grad_check.instances=2", "--out", str(tmp_path)])
    assert rc == 0
    out = capsys.readouterr().out
    assert "PASS" in out
    report = json.loads((tmp_path / "grad_check_report.json").read_text())
    assert report["passed"] is True
    assert report["max_rel_err"] < 1e-4
    assert len(report["instances"]) == 2
    assert report["checked_scalars"] > 0
    assert (tmp_path / "run_config.json").exists()


def test_grad_check_corrupted_gradient_fails_with_exit_3(tmp_path, capsys):
    rc = main([
        "grad-check", *TINY_MODEL,
        "--set", "grad_check.instances=1",
        "--set", "grad_check.corrupt_gradient=true",
        "--out", str(tmp_path),
    ])
    assert rc == 3
    assert "FAIL" in capsys.readouterr().out
    report = json.loads((tmp_path / "grad_check_report.json").read_text())
    assert report["passed"] is False


def test_grad_check_with_nothing_trainable_is_an_empty_pass(tmp_path):
    rc = main([
        "grad-check", *TINY_MODEL,
        "--set", "model.evf_layer_indices=[]",
        "--out", str(tmp_path),
    ])
    assert rc == 0
    report = json.loads((tmp_path / "grad_check_report.json").read_text())
    assert report["checked_scalars"] == 0 and report["instances"] == []


# ---------------------------------------------------------------------------
# allocate-trace


def test_allocate_trace_under_capacity_accepts_all(tmp_path, capsys):
    fixture = write_fixture(
        tmp_path / "f.json",
        [
            {"modality": "image", "logits": [0.0, 1.0]},
            {"modality": "text", "logits": [1.0, 0.0]},
            {"modality": "text", "logits": [0.5, 0.2]},
        ],
        capacity_factor=2.0,
    )
    rc = main(["allocate-trace", "--fixture", fixture, "--out", str(tmp_path / "run")])
    assert rc == 0
    trace = json.loads((tmp_path / "run" / "allocate_trace.json").read_text())
    assert set(trace["strategies"]) == {"random", "gbpr", "img_gbpr"}
    for name, entry in trace["strategies"].items():
        assert entry["stats"]["success_rate"] == 1.0, name
        assert entry["plan"]["dropped"] == []
    # img_gbpr respects modality, the others follow the router
    img = trace["strategies"]["img_gbpr"]["plan"]["accepted"]
    assert img == {"language": [1, 2], "vision": [0]}
    printed = json.loads(capsys.readouterr().out)
    assert printed == trace


def test_allocate_trace_over_capacity_and_fraction_endpoints(tmp_path):
    tokens = [{"modality": "image", "logits": [0.0, 2.0]} for _ in range(8)]
    with_redist = write_fixture(
        tmp_path / "on.json", tokens, capacity_factor=0.5, redistribution_fraction=1.0, seed=5
    )
    without = write_fixture(
        tmp_path / "off.json", tokens, capacity_factor=0.5, redistribution_fraction=0.0, seed=5
    )
    assert main(["allocate-trace", "--fixture", with_redist, "--out", str(tmp_path / "a")]) == 0
    assert main(["allocate-trace", "--fixture", without, "--out", str(tmp_path / "b")]) == 0
    on = json.loads((tmp_path / "a" / "allocate_trace.json").read_text())["strategies"]["img_gbpr"]
    off = json.loads((tmp_path / "b" / "allocate_trace.json").read_text())["strategies"]["img_gbpr"]
    # capacity 2: six vision rejects; full redistribution parks 2 in language slack
    assert on["plan"]["capacity"] == 2
    assert len(on["plan"]["redistributed"]) == 2
    assert on["stats"]["dropped"] == 4
    assert off["plan"]["redistributed"] == []
    assert off["stats"]["dropped"] == 6


def test_allocate_trace_reports_parse_errors_with_line_numbers(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text('{\n "tokens": [\n   {"modality": "image" "logits": [0, 1]}\n ]\n}\n')
    rc = main(["allocate-trace", "--fixture", str(bad), "--out", str(tmp_path / "run")])
    assert rc == 2
    err = capsys.readouterr().err
    assert "line 3" in err


def test_allocate_trace_validates_token_fields(tmp_path, capsys):
    fixture = write_fixture(tmp_path / "f.json", [{"modality": "audio", "logits": [0, 1]}])
    assert main(["allocate-trace", "--fixture", fixture, "--out", str(tmp_path / "r")]) == 2
    assert "tokens[0].modality" in capsys.readouterr().err

    fixture2 = write_fixture(tmp_path / "g.json", [{"modality": "text", "logits": [1, 2, 3]}])
    assert main(["allocate-trace", "--fixture", fixture2, "--out", str(tmp_path / "r2")]) == 2
    assert "tokens[0].logits" in capsys.readouterr().err


def test_missing_fixture_file_is_an_io_error(tmp_path):
    rc = main(["allocate-trace", "--fixture", str(tmp_path / "absent.json"), "--out", str(tmp_path / "r")])
    assert rc == 4


# ---------------------------------------------------------------------------
# train


def test_train_writes_reproducible_artifacts(tmp_path):
    args = ["train", *TINY_MODEL, "--set", "train.steps=4"]
    assert main([*args, "--out", str(tmp_path / "one")]) == 0
    assert main([*args, "--out", str(tmp_path / "two")]) == 0
    for name in ("run_config.json", "metrics.jsonl", "telemetry.jsonl", "model_final.ckpt"):
        a = (tmp_path / "one" / name).read_bytes()
        b = (tmp_path / "two" / name).read_bytes()
        assert a == b, name
    rows = [json.loads(l) for l in (tmp_path / "one" / "metrics.jsonl").read_text().splitlines()]
    assert [r["step"] for r in rows] == [0, 1, 2, 3, 4]
    run_cfg = json.loads((tmp_path / "one" / "run_config.json").read_text())
    assert run_cfg["command"] == "train"
    assert run_cfg["train"]["steps"] == 4
    assert run_cfg["model"]["depth"] == 2


def test_train_resumes_from_checkpoint(tmp_path):
    assert main(["train", *TINY_MODEL, "--set", "train.steps=3", "--out", str(tmp_path / "first")]) == 0
    ckpt = tmp_path / "first" / "model_final.ckpt"
    rc = main([
        "train", *TINY_MODEL,
        "--set", "train.steps=2",
        "--set", f'train.init_checkpoint="{ckpt}"',
        "--out", str(tmp_path / "second"),
    ])
    assert rc == 0
    rows = [json.loads(l) for l in (tmp_path / "second" / "metrics.jsonl").read_text().splitlines()]
    assert len(rows) == 3


def test_config_file_and_set_overrides_merge(tmp_path):
    cfg_file = tmp_path / "cfg.json"
    cfg_file.write_text(json.dumps({"train": {"steps": 2}, "model": {"depth": 2, "width": 8,
                                    "heads": 2, "hidden": 12, "vocab": 12, "image_feature_dim": 5,
                                    "text_len": 4, "max_seq_len": 16}}))
    out = tmp_path / "run"
    rc = main(["train", "--config", str(cfg_file), "--set", "train.steps=3", "--out", str(out)])
    assert rc == 0
    run_cfg = json.loads((out / "run_config.json").read_text())
    assert run_cfg["train"]["steps"] == 3  # --set wins over the file
    assert run_cfg["model"]["width"] == 8


def test_config_validation_failures_exit_2(tmp_path, capsys):
    bad_section = tmp_path / "bad.json"
    bad_section.write_text(json.dumps({"trainer": {}}))
    assert main(["train", "--config", str(bad_section), "--out", str(tmp_path / "a")]) == 2
    assert "trainer" in capsys.readouterr().err

    assert main(["train", "--set", "banana=1", "--out", str(tmp_path / "b")]) == 2
    assert main(["train", "--set", "nonsense", "--out", str(tmp_path / "c")]) == 2
    assert main(["train", *TINY_MODEL, "--set", "optimizer.learning_rate=-1", "--out", str(tmp_path / "d")]) == 2
    assert main(["train", *TINY_MODEL, "--set", "model.strategy=\"greedy\"", "--out", str(tmp_path / "e")]) == 2


def test_output_root_env_prefixes_relative_dirs(tmp_path, monkeypatch):
    monkeypatch.setenv("EVF_OUTPUT_ROOT", str(tmp_path))
    monkeypatch.chdir(tmp_path)
    fixture = write_fixture(
        tmp_path / "f.json", [{"modality": "text", "logits": [1.0, 0.0]}]
    )
    assert main(["allocate-trace", "--fixture", fixture, "--out", "nested/run"]) == 0
    assert (tmp_path / "nested" / "run" / "allocate_trace.json").exists()
    # default directory also lands under the root
    assert main(["allocate-trace", "--fixture", fixture]) == 0
    assert (tmp_path / "evf-runs" / "allocate-trace" / "allocate_trace.json").exists()


# ---------------------------------------------------------------------------
# telemetry-report


def test_telemetry_report_from_training_metrics(tmp_path):
    train_dir = tmp_path / "train"
    assert main(["train", *TINY_MODEL, "--set", "train.steps=5", "--out", str(train_dir)]) == 0
    report_dir = tmp_path / "report"
    rc = main([
        "telemetry-report", "--metrics", str(train_dir / "metrics.jsonl"), "--out", str(report_dir),
    ])
    assert rc == 0
    with open(report_dir / "telemetry_report.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 1
    assert rows[0]["layer"] == "0" and rows[0]["strategy"] == "img_gbpr"
    assert rows[0]["records"] == "6"
    assert 0.0 <= float(rows[0]["mean_success_rate"]) <= 1.0


def test_telemetry_report_ranks_strategies_within_layers(tmp_path):
    stream = tmp_path / "stream.jsonl"
    records = []
    for strategy, success in (("img_gbpr", 0.95), ("gbpr", 0.8), ("random", 0.7)):
        for step in range(3):
            records.append({
                "step": step, "layer": 0, "strategy": strategy,
                "success_rate": success, "drop_rate": 1 - success,
            })
    stream.write_text("\n".join(json.dumps(r) for r in records) + "\n")
    rc = main(["telemetry-report", "--metrics", str(stream), "--out", str(tmp_path / "rep")])
    assert rc == 0
    with open(tmp_path / "rep" / "telemetry_report.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    by_strategy = {r["strategy"]: r for r in rows}
    assert by_strategy["img_gbpr"]["rank_within_layer"] == "1"
    assert by_strategy["gbpr"]["rank_within_layer"] == "2"
    assert by_strategy["random"]["rank_within_layer"] == "3"
    assert rows[0]["layer_ordering"] == "img_gbpr>=gbpr>=random"


def test_telemetry_report_rejects_empty_input(tmp_path, capsys):
    empty = tmp_path / "empty.jsonl"
    empty.write_text("")
    rc = main(["telemetry-report", "--metrics", str(empty), "--out", str(tmp_path / "rep")])
    assert rc == 2
    assert "no layer telemetry" in capsys.readouterr().err
