"""Experiment harness.

Subcommands:

* ``grad-check``       - finite-difference verification of the trainable path
* ``allocate-trace``   - run the allocation strategies over a token fixture
* ``train``            - one curriculum stage on the synthetic task
* ``telemetry-report`` - aggregate metrics streams into a per-layer CSV

Configuration is one JSON document (defaults, optionally overlaid with
``--config FILE``, then ``--set dotted.key=value`` overrides). Every run
writes its resolved configuration next to its outputs, and identical
configurations produce byte-identical outputs.

Exit codes: 0 success, 2 validation failure, 3 numeric-check failure,
4 I/O failure. The environment variable ``EVF_OUTPUT_ROOT`` prefixes any
relative output directory.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import statistics
import sys
from pathlib import Path

import numpy as np

from . import tensor as T
from .allocator import Strategy, allocation_stats, priority_scores
from .checkpoint import load_model, save_model
from .errors import ConfigError, ContractError, EvfError, FixtureError, NumericError, UnstableInstanceError
from .model import (
    ModelConfig,
    SyntheticTask,
    TrainConfig,
    build_model,
    compute_loss,
    enter_stage3,
    train,
)
from .router import RoutingDecision, LANGUAGE_FFN, VISION_FFN
from .seeds import RngKey
from .training import OptimizerConfig, grad_check

OUTPUT_ROOT_ENV = "EVF_OUTPUT_ROOT"

DEFAULT_CONFIG: dict = {
    "output_dir": None,
    # evf_layer_indices stays null here so a depth override re-resolves the
    # default "every even block" placement instead of keeping stale indices.
    "model": {**ModelConfig().to_json_dict(), "evf_layer_indices": None},
    "optimizer": {
        "learning_rate": 3e-3,
        "beta1": 0.9,
        "beta2": 0.95,
        "weight_decay": 0.0,
        "warmup_ratio": 0.03,
        "epsilon": 1e-8,
    },
    "train": {
        "stage": 3,
        "steps": 200,
        "aux_weight": 0.001,
        "init_checkpoint": None,
    },
    "grad_check": {
        "instances": 10,
        "epsilon": 1e-5,
        "tolerance": 1e-4,
        "max_tries": 100,
        "seed": 0,
        "batch_sequences": 1,
        "text_len": 4,
        "stability_margin": 1e-3,
        # Partition the trainable scalars across the instances: instance k
        # checks scalars with flat index congruent to k mod instances, so a
        # full run still covers every scalar exactly once.
        "partition_scalars": True,
        "corrupt_gradient": False,
    },
    "allocate_trace": {
        "strategies": ["random", "gbpr", "img_gbpr"],
    },
}


def _deep_merge(base: dict, override: dict) -> dict:
    out = dict(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _deep_merge(out[key], value)
        else:
            out[key] = value
    return out


def _load_config(path: str | None, overrides: list[str]) -> dict:
    cfg = DEFAULT_CONFIG
    if path:
        try:
            with open(path, "r", encoding="utf-8") as fh:
                text = fh.read()
        except OSError as exc:
            raise exc
        try:
            file_cfg = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
        if not isinstance(file_cfg, dict):
            raise ConfigError(f"{path}: config root must be an object")
        for key in file_cfg:
            if key not in DEFAULT_CONFIG:
                raise ConfigError(f"{path}: unknown config section {key!r}")
        cfg = _deep_merge(cfg, file_cfg)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        dotted, raw = item.split("=", 1)
        parts = dotted.split(".")
        if parts[0] not in cfg:
            raise ConfigError(f"--set: unknown config section {parts[0]!r}")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = cfg = dict(cfg)
        for part in parts[:-1]:
            child = node.get(part)
            child = dict(child) if isinstance(child, dict) else {}
            node[part] = child
            node = child
        node[parts[-1]] = value
    return cfg


def _resolve_out_dir(cli_out: str | None, cfg: dict, command: str) -> Path:
    base = cli_out or cfg.get("output_dir") or os.path.join("evf-runs", command)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not os.path.isabs(base):
        base = os.path.join(root, base)
    out = Path(base)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path: Path, doc: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, sort_keys=True, indent=2)
        fh.write("\n")


def _write_run_config(out: Path, cfg: dict, command: str) -> None:
    _write_json(out / "run_config.json", {"command": command, **cfg})


def _stability_margin(result, model) -> float:
    """Smallest score margin protecting the allocation from tiny perturbations.

    Considers the per-token preference margin and, where selection is
    score-ranked, the gap at each capacity boundary. Random selection has no
    score boundary; its subsets are pinned by the seed once the candidate
    pool is fixed.
    """
    margin = np.inf
    for decision, plan in zip(result.forward.decisions, result.forward.plans):
        scores = priority_scores(decision, result.forward.tags, plan.strategy)
        s = scores.values
        if plan.strategy is Strategy.RANDOM:
            s = decision.probabilities.data
        margin = min(margin, float(np.abs(s[:, VISION_FFN] - s[:, LANGUAGE_FFN]).min()))
        if plan.strategy is Strategy.RANDOM:
            continue
        candidates = np.where(s[:, VISION_FFN] > s[:, LANGUAGE_FFN], VISION_FFN, LANGUAGE_FFN)
        for ffn in (LANGUAGE_FFN, VISION_FFN):
            pool = np.flatnonzero(candidates == ffn)
            if pool.size > plan.capacity:
                ranked = np.sort(s[pool, ffn])[::-1]
                margin = min(margin, float(ranked[plan.capacity - 1] - ranked[plan.capacity]))
    return margin


def cmd_grad_check(cfg: dict, out: Path) -> int:
    gc = cfg["grad_check"]
    model_cfg = ModelConfig.from_json_dict(cfg["model"])
    model = build_model(model_cfg)
    enter_stage3(model)
    task = SyntheticTask(model_cfg)
    named = [(name, p) for name, p in model.trainable_parameters()]

    reports = []
    instance_seeds = []
    attempts = 0
    base = RngKey(int(gc["seed"]))
    while len(reports) < int(gc["instances"]) and named:
        if attempts >= int(gc["max_tries"]):
            raise ContractError(
                f"grad-check: could not find {gc['instances']} stable instances in {gc['max_tries']} tries"
            )
        attempt_key = base.child(attempts)
        attempts += 1
        batch = task.sample_batch(
            attempt_key.child(0),
            sequences=int(gc["batch_sequences"]),
            text_len=int(gc["text_len"]),
        )
        alloc_key = attempt_key.child(1)

        def loss_fn():
            result = compute_loss(model, batch, alloc_key, cfg["train"]["aux_weight"])
            return result.total, result.forward.allocation_signature()

        probe = compute_loss(model, batch, alloc_key, cfg["train"]["aux_weight"])
        if _stability_margin(probe, model) < float(gc["stability_margin"]):
            continue
        subset = (len(reports), int(gc["instances"])) if gc.get("partition_scalars") else None
        try:
            report = grad_check(
                loss_fn,
                named,
                epsilon=float(gc["epsilon"]),
                subset=subset,
                _corrupt_first_gradient=1e-2 if gc.get("corrupt_gradient") else 0.0,
            )
        except UnstableInstanceError:
            continue
        reports.append(report)
        instance_seeds.append(attempts - 1)

    max_rel = max((r.max_rel_err for r in reports), default=0.0)
    doc = {
        "instances": [
            {"instance_seed": seed, **report.to_json_dict()}
            for seed, report in zip(instance_seeds, reports)
        ],
        "checked_scalars": sum(r.checked for r in reports),
        "max_rel_err": max_rel,
        "tolerance": gc["tolerance"],
        "passed": bool(max_rel < float(gc["tolerance"])),
    }
    _write_json(out / "grad_check_report.json", doc)
    status = "PASS" if doc["passed"] else "FAIL"
    print(
        f"grad-check {status}: {len(reports)} instances, {doc['checked_scalars']} scalars, "
        f"max rel err {max_rel:.3e} (tolerance {gc['tolerance']:g})"
    )
    return 0 if doc["passed"] else 3


def _parse_fixture(path: str) -> tuple[dict, list[str], np.ndarray]:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError:
        raise
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise FixtureError(f"{path}: parse error at line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    if not isinstance(doc, dict):
        raise FixtureError(f"{path}: fixture root must be an object")
    tokens = doc.get("tokens")
    if not isinstance(tokens, list) or not tokens:
        raise FixtureError(f"{path}: field 'tokens' must be a non-empty list")
    labels = []
    logits = []
    for i, tok in enumerate(tokens):
        if not isinstance(tok, dict):
            raise FixtureError(f"{path}: tokens[{i}] must be an object")
        modality = tok.get("modality")
        if modality not in ("image", "text"):
            raise FixtureError(f"{path}: tokens[{i}].modality must be 'image' or 'text', got {modality!r}")
        pair = tok.get("logits")
        if (
            not isinstance(pair, list)
            or len(pair) != 2
            or not all(isinstance(v, (int, float)) for v in pair)
        ):
            raise FixtureError(f"{path}: tokens[{i}].logits must be a [language, vision] number pair")
        labels.append(modality)
        logits.append([float(pair[0]), float(pair[1])])
    return doc, labels, np.asarray(logits, dtype=np.float64)


def cmd_allocate_trace(cfg: dict, fixture_path: str, out: Path) -> int:
    from .allocator import CapacityConfig, ModalityTags, allocate, redistribute

    doc, labels, logits = _parse_fixture(fixture_path)
    capacity_cfg = CapacityConfig(
        capacity_factor=float(doc.get("capacity_factor", cfg["model"]["capacity"]["capacity_factor"])),
        redistribution_fraction=float(
            doc.get("redistribution_fraction", cfg["model"]["capacity"]["redistribution_fraction"])
        ),
        seed=int(doc.get("seed", cfg["model"]["capacity"]["seed"])),
    )
    tags = ModalityTags.from_labels(labels)
    logits_t = T.Tensor(logits)
    probabilities = T.softmax_rows(logits_t)
    p = probabilities.data
    preferred = np.where(p[:, VISION_FFN] > p[:, LANGUAGE_FFN], VISION_FFN, LANGUAGE_FFN).astype(np.int64)
    decision = RoutingDecision(logits_t, probabilities, preferred)

    names = cfg["allocate_trace"]["strategies"]
    strategies = []
    for name in names:
        try:
            strategies.append(Strategy(name))
        except ValueError as exc:
            raise ConfigError(f"allocate_trace.strategies: unknown strategy {name!r}") from exc

    per_strategy = {}
    for strategy in strategies:
        scores = priority_scores(decision, tags, strategy)
        plan = allocate(decision, scores, tags, capacity_cfg, strategy)
        if plan.pending_rejects is not None:
            plan = redistribute(plan, decision, scores, capacity_cfg)
        stats = allocation_stats(plan, tags)
        per_strategy[strategy.value] = {
            "plan": plan.to_json_dict(),
            "stats": stats.to_json_dict(),
        }

    trace = {
        "n_tokens": int(logits.shape[0]),
        "capacity_factor": capacity_cfg.capacity_factor,
        "redistribution_fraction": capacity_cfg.redistribution_fraction,
        "seed": capacity_cfg.seed,
        "strategies": per_strategy,
    }
    _write_json(out / "allocate_trace.json", trace)
    print(json.dumps(trace, sort_keys=True, indent=2))
    return 0


def cmd_train(cfg: dict, out: Path) -> int:
    section = cfg["train"]
    opt = OptimizerConfig(**cfg["optimizer"])
    tcfg = TrainConfig(
        stage=int(section["stage"]),
        steps=int(section["steps"]),
        optimizer=opt,
        aux_weight=float(section["aux_weight"]),
    )
    if section.get("init_checkpoint"):
        model = load_model(section["init_checkpoint"])
    else:
        model = build_model(ModelConfig.from_json_dict(cfg["model"]))
    task = SyntheticTask(model.cfg)
    result = train(model, task, tcfg, out_dir=out)
    first, last = result.metrics[0], result.metrics[-1]
    print(
        f"train: stage {tcfg.stage}, {tcfg.steps} steps, "
        f"loss {first['loss_total']:.4f} -> {last['loss_total']:.4f}, "
        f"checkpoint {result.checkpoint_path}"
    )
    return 0


def _layer_records(paths: list[str]) -> list[dict]:
    records = []
    for path in paths:
        with open(path, "r", encoding="utf-8") as fh:
            for line_no, line in enumerate(fh, start=1):
                line = line.strip()
                if not line:
                    continue
                try:
                    row = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise FixtureError(f"{path}: parse error at line {line_no}: {exc.msg}") from exc
                if "layers" in row:
                    records.extend(row["layers"])
                elif "layer" in row:
                    records.append(row)
    return records


def cmd_telemetry_report(metrics_paths: list[str], out: Path) -> int:
    records = _layer_records(metrics_paths)
    if not records:
        raise ContractError("telemetry-report: no layer telemetry records found in the given metrics files")
    grouped: dict[tuple[int, str], list[dict]] = {}
    for rec in records:
        grouped.setdefault((int(rec["layer"]), str(rec["strategy"])), []).append(rec)

    rows = []
    for (layer, strategy), recs in sorted(grouped.items()):
        success = [float(r["success_rate"]) for r in recs]
        drops = [float(r["drop_rate"]) for r in recs]
        rows.append(
            {
                "layer": layer,
                "strategy": strategy,
                "records": len(recs),
                "mean_success_rate": statistics.fmean(success),
                "median_success_rate": statistics.median(success),
                "mean_drop_rate": statistics.fmean(drops),
            }
        )
    by_layer: dict[int, list[dict]] = {}
    for row in rows:
        by_layer.setdefault(row["layer"], []).append(row)
    for layer, group in by_layer.items():
        ordered = sorted(group, key=lambda r: -r["mean_success_rate"])
        ordering = ">=".join(r["strategy"] for r in ordered)
        for rank, row in enumerate(ordered, start=1):
            row["rank_within_layer"] = rank
            row["layer_ordering"] = ordering

    fieldnames = [
        "layer",
        "strategy",
        "records",
        "mean_success_rate",
        "median_success_rate",
        "mean_drop_rate",
        "rank_within_layer",
        "layer_ordering",
    ]
    report_path = out / "telemetry_report.csv"
    with open(report_path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fieldnames)
        writer.writeheader()
        for row in sorted(rows, key=lambda r: (r["layer"], r["rank_within_layer"])):
            writer.writerow(row)
    for layer in sorted(by_layer):
        print(f"layer {layer}: {by_layer[layer][0]['layer_ordering']}")
    print(f"wrote {report_path}")
    return 0


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="evf", description="Elastic vision FFN experiment harness")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", help="JSON config file overlaying the defaults")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="dotted-path config override, value parsed as JSON when possible")
        p.add_argument("--out", help="output directory (default: evf-runs/<command>)")

    common(sub.add_parser("grad-check", help="finite-difference gradient verification"))
    p_trace = sub.add_parser("allocate-trace", help="run allocation strategies over a token fixture")
    common(p_trace)
    p_trace.add_argument("--fixture", required=True, help="JSON fixture of tokens with modality and logits")
    common(sub.add_parser("train", help="train one curriculum stage on the synthetic task"))
    p_report = sub.add_parser("telemetry-report", help="aggregate metrics streams into CSV")
    common(p_report)
    p_report.add_argument("--metrics", nargs="+", required=True, help="metrics.jsonl / telemetry.jsonl files")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = _load_config(args.config, args.overrides)
        out = _resolve_out_dir(args.out, cfg, args.command)
        _write_run_config(out, cfg, args.command)
        if args.command == "grad-check":
            return cmd_grad_check(cfg, out)
        if args.command == "allocate-trace":
            return cmd_allocate_trace(cfg, args.fixture, out)
        if args.command == "train":
            return cmd_train(cfg, out)
        if args.command == "telemetry-report":
            return cmd_telemetry_report(args.metrics, out)
        raise ContractError(f"unknown command {args.command!r}")
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (ConfigError, ContractError, FixtureError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except EvfError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
