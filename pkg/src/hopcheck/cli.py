"""Command-line entry point: config wiring, subcommands, artifact output."""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from . import __version__
from .data_model import Dataset, QAInstance, load_instances, write_canonical
from .datagen import DatasetConfig, build_dataset, generate_ideal, generate_plan, write_train
from .extraction_pipeline import VERIFY_MODES, corpus_stats, verify_instance
from .feedback_loop import (
    FeedbackMode,
    LoopConfig,
    aggregate_runs,
    run_corpus,
    write_runs,
)
from .llm_client import OpenAIBackend, ScriptedBackend
from .metrics import score_answer


class ConfigError(ValueError):
    pass


def _load_config(path: str | None) -> dict:
    if not path:
        return {}
    with open(path, encoding="utf-8") as fh:
        cfg = json.load(fh)
    if not isinstance(cfg, dict):
        raise ConfigError("config file must hold a JSON object")
    return cfg


def _build_backend(spec: dict | None):
    spec = spec or {}
    kind = spec.get("type", "scripted")
    if kind == "scripted":
        fixture = spec.get("fixture")
        if fixture:
            return ScriptedBackend.from_fixture(fixture)
        return ScriptedBackend()
    if kind == "openai":
        try:
            base_url = spec["base_url"]
        except KeyError as exc:
            raise ConfigError("backend config missing key 'base_url'") from exc
        api_key = os.environ.get(spec.get("api_key_env", "HOPCHECK_API_KEY"), "")
        return OpenAIBackend(base_url=base_url, api_key=api_key)
    raise ConfigError(f"unknown backend type {kind!r}")


def _write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, ensure_ascii=False, indent=2, sort_keys=True) + "\n")


def _echo_config(out_dir: Path, resolved: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_json(out_dir / "resolved_config.json", resolved)


def _merged(config: dict, args: argparse.Namespace, keys: tuple[str, ...]) -> dict:
    """Flags override config scalars; unset flags fall back to config."""
    resolved = dict(config)
    for key in keys:
        value = getattr(args, key, None)
        if value is not None:
            resolved[key] = value
    return resolved


def _load_corpus(path: str, dataset: str, seed: int) -> list[QAInstance]:
    return load_instances(path, Dataset(dataset), seed)


def _cmd_ingest(args: argparse.Namespace, config: dict) -> int:
    resolved = _merged(config, args, ("dataset", "seed"))
    seed = int(resolved.get("seed", 0))
    dataset = resolved.get("dataset", "canonical")
    instances = _load_corpus(args.infile, dataset, seed)
    out_dir = Path(args.out)
    _echo_config(out_dir, {**resolved, "command": "ingest", "version": __version__})
    write_canonical(instances, out_dir / "instances.jsonl")
    print(f"ingested {len(instances)} instances")
    return 0


def _cmd_verify(args: argparse.Namespace, config: dict) -> int:
    resolved = _merged(config, args, ("mode", "model"))
    mode = resolved.get("mode", "deterministic")
    if mode not in VERIFY_MODES:
        raise ConfigError(f"mode must be one of {VERIFY_MODES}")
    instances = _load_corpus(args.infile, "canonical", 0)
    if args.dry_run:
        per = 0
        for inst in instances:
            gold = len(inst.gold_passages)
            per += gold * 3 + 1 + (1 if mode != "deterministic" else 0)
        print(f"dry-run: at most {per} backend requests over {len(instances)} instances")
        return 0
    backend = _build_backend(resolved.get("backend"))
    out_dir = Path(args.out)
    _echo_config(out_dir, {**resolved, "command": "verify-benchmark", "version": __version__})
    (out_dir / "kg").mkdir(exist_ok=True)
    reports = []
    with open(out_dir / "reports.jsonl", "w", encoding="utf-8") as rep_fh, open(
        out_dir / "disagreements.jsonl", "w", encoding="utf-8"
    ) as dis_fh:
        for inst in instances:
            report = verify_instance(
                backend, inst, mode=mode, model_id=resolved.get("model", "default")
            )
            reports.append(report)
            rep_fh.write(json.dumps(report.to_dict(), ensure_ascii=False, sort_keys=True) + "\n")
            if report.disagreement:
                dis_fh.write(
                    json.dumps(report.to_dict(), ensure_ascii=False, sort_keys=True) + "\n"
                )
            (out_dir / "kg" / f"{inst.id}.jsonl").write_text(report.kg.to_jsonl() + "\n")
    stats = corpus_stats(reports)
    _write_json(out_dir / "noise_stats.json", stats.to_dict())
    print(f"verified {stats.total} instances; noise {stats.percent:.2f}%")
    return 0


def _cmd_run(args: argparse.Namespace, config: dict) -> int:
    resolved = _merged(config, args, ("mode", "k", "n", "workers", "generator_model", "evaluator_model"))
    cfg = LoopConfig(
        max_steps=int(resolved.get("k", 10)),
        max_retries=int(resolved.get("n", 3)),
        mode=FeedbackMode(resolved.get("mode", "safe")),
        generator_model=resolved.get("generator_model", "generator"),
        evaluator_model=resolved.get("evaluator_model", "evaluator"),
    )
    instances = _load_corpus(args.infile, "canonical", 0)
    if args.dry_run:
        worst = len(instances) * (
            cfg.max_steps * (cfg.max_retries + 1) * 2 + 1
        )
        print(f"dry-run: at most {worst} backend requests over {len(instances)} instances")
        return 0
    generator = _build_backend(resolved.get("backend"))
    evaluator = (
        _build_backend(resolved["evaluator_backend"])
        if resolved.get("evaluator_backend")
        else generator
    )
    out_dir = Path(args.out)
    _echo_config(out_dir, {
        **{k: v for k, v in resolved.items() if k not in ("backend", "evaluator_backend")},
        "command": "run", "version": __version__,
        "k": cfg.max_steps, "n": cfg.max_retries, "mode": cfg.mode.value,
    })
    records, aggregate = run_corpus(
        cfg, instances, generator, evaluator, workers=int(resolved.get("workers", 1))
    )
    write_runs(records, out_dir / "runs.jsonl")
    _write_json(out_dir / "aggregate.json", aggregate)
    _write_json(out_dir / "ledger.json", aggregate["ledger"])
    print(f"ran {len(records)} instances; retries {aggregate['retries']}")
    return 0


def _cmd_synthesize(args: argparse.Namespace, config: dict) -> int:
    resolved = _merged(config, args, ("total", "seed", "ideal_fraction", "model"))
    instances = _load_corpus(args.infile, "canonical", 0)
    total = int(resolved.get("total", 100))
    if args.dry_run:
        worst = len(instances) * 2 + total
        print(f"dry-run: at most {worst} backend requests over {len(instances)} instances")
        return 0
    backend = _build_backend(resolved.get("backend"))
    model_id = resolved.get("model", "default")
    pool = []
    for inst in instances:
        plan = generate_plan(backend, inst.question, inst.dataset, model_id=model_id)
        pool.append((inst, generate_ideal(backend, inst, plan, model_id=model_id)))
    dataset_cfg = DatasetConfig(
        total=total,
        ideal_fraction=float(resolved.get("ideal_fraction", 0.34)),
        seed=int(resolved.get("seed", 0)),
    )
    refined = []
    if args.refined:
        with open(args.refined, encoding="utf-8") as fh:
            refined = [json.loads(line) for line in fh if line.strip()]
    examples, manifest = build_dataset(backend, pool, dataset_cfg, refined)
    out_dir = Path(args.out)
    _echo_config(out_dir, {
        **{k: v for k, v in resolved.items() if k != "backend"},
        "command": "synthesize", "version": __version__,
    })
    write_train(examples, out_dir / "train.jsonl")
    _write_json(out_dir / "manifest.json", manifest)
    print(f"synthesized {manifest['total']} examples")
    return 0


def _cmd_score(args: argparse.Namespace, config: dict) -> int:
    resolved = _merged(config, args, ("judge", "model"))
    instances = {inst.id: inst for inst in _load_corpus(args.infile, "canonical", 0)}
    with open(args.runs, encoding="utf-8") as fh:
        runs = [json.loads(line) for line in fh if line.strip()]
    use_judge = resolved.get("judge", "off") == "on"
    if args.dry_run:
        print(f"dry-run: at most {len(runs) if use_judge else 0} backend requests")
        return 0
    backend = _build_backend(resolved.get("backend")) if use_judge else None
    out_dir = Path(args.out)
    _echo_config(out_dir, {
        **{k: v for k, v in resolved.items() if k != "backend"},
        "command": "score", "version": __version__,
    })
    rows = []
    scores = {}
    datasets = {}
    for run in runs:
        inst = instances.get(run["instance_id"])
        if inst is None:
            raise ConfigError(f"run references unknown instance {run['instance_id']!r}")
        pred = run.get("answer") or ""
        verdict = score_answer(
            pred, inst.gold_answers, backend=backend, question=inst.question,
            model_id=resolved.get("model", "default"),
        )
        row = {
            "instance_id": inst.id,
            "dataset": inst.dataset.value,
            "pred": pred,
            "em": verdict.em,
            "f1": round(verdict.f1, 6),
            "judge": verdict.judge.value,
            "judge_reasoning": verdict.judge_reasoning,
        }
        rows.append(row)
        acc_row = {"em": float(verdict.em), "f1": verdict.f1}
        if verdict.judge.value != "Unjudged":
            acc_row["acc"] = 1.0 if verdict.judge.value == "Correct" else 0.0
        scores[inst.id] = acc_row
        datasets[inst.id] = inst.dataset.value
    with open(out_dir / "scores.jsonl", "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, ensure_ascii=False, sort_keys=True) + "\n")
    table: dict = {}
    for name in sorted(set(datasets.values())):
        ids = [i for i, d in datasets.items() if d == name]
        table[name] = {
            "em": round(sum(scores[i]["em"] for i in ids) / len(ids), 4),
            "f1": round(sum(scores[i]["f1"] for i in ids) / len(ids), 4),
        }
        judged = [i for i in ids if "acc" in scores[i]]
        if judged:
            table[name]["acc"] = round(sum(scores[i]["acc"] for i in judged) / len(judged), 4)
        table[name]["unjudged"] = len(ids) - len(judged)
    _write_json(out_dir / "aggregate.json", {"table": table, "rows": len(rows)})
    print(f"scored {len(rows)} runs")
    return 0


def _cmd_stats(args: argparse.Namespace, config: dict) -> int:
    del config
    total = 0
    noisy = 0
    by_label: dict[str, int] = {}
    with open(args.infile, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            row = json.loads(line)
            label = row.get("noise_label")
            if label is None:
                continue
            total += 1
            by_label[label] = by_label.get(label, 0) + 1
            if label != "Grounded":
                noisy += 1
    percent = round(100.0 * noisy / total, 2) if total else 0.0
    print(f"{percent:.2f}%")
    if args.out:
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        _write_json(out_dir / "noise_stats.json", {
            "total": total, "noisy": noisy,
            "noise_percent": percent, "by_label": dict(sorted(by_label.items())),
        })
    return 0


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hopcheck",
        description="Multi-hop QA benchmark verification and step-level feedback loop.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser, needs_out: bool = True) -> None:
        p.add_argument("--config", help="JSON config file; flags override its scalars")
        p.add_argument("--dry-run", action="store_true",
                       help="print the planned request count; no backend calls")
        if needs_out:
            p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("ingest", help="normalize a benchmark file into canonical JSONL")
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--dataset", choices=[d.value for d in Dataset])
    p.add_argument("--seed", type=int)
    common(p)
    p.set_defaults(func=_cmd_ingest)

    p = sub.add_parser("verify-benchmark", help="KG-grounded noise verification")
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--mode", choices=list(VERIFY_MODES))
    p.add_argument("--model")
    common(p)
    p.set_defaults(func=_cmd_verify)

    p = sub.add_parser("run", help="generator/evaluator feedback-loop runs")
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--mode", choices=[m.value for m in FeedbackMode])
    p.add_argument("--k", type=int)
    p.add_argument("--n", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--generator-model", dest="generator_model")
    p.add_argument("--evaluator-model", dest="evaluator_model")
    common(p)
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("synthesize", help="taxonomy-guided training-data synthesis")
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--total", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--ideal-fraction", dest="ideal_fraction", type=float)
    p.add_argument("--refined", help="JSONL of externally refined hard cases")
    p.add_argument("--model")
    common(p)
    p.set_defaults(func=_cmd_synthesize)

    p = sub.add_parser("score", help="EM/F1/judge scoring of run records")
    p.add_argument("--runs", required=True)
    p.add_argument("--in", dest="infile", required=True, help="canonical instances")
    p.add_argument("--judge", choices=["on", "off"])
    p.add_argument("--model")
    common(p)
    p.set_defaults(func=_cmd_score)

    p = sub.add_parser("stats", help="noise statistics over a reports file")
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--out")
    p.add_argument("--config")
    p.add_argument("--dry-run", action="store_true")
    p.set_defaults(func=_cmd_stats)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        config = _load_config(getattr(args, "config", None))
        return args.func(args, config)
    except (ValueError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
