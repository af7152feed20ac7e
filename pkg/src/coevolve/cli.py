"""Command-line entry point: run, eval, audit, export-metrics, inspect.

Exit codes: 0 success, 1 audit found discrepancies, 2 validation or usage
error, 3 runtime abort. ``COEVOLVE_OUT`` sets the default output root for
``run`` when ``--out`` is not given.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

from .config import RunConfig, dump_config, load_config
from .errors import ConfigError, VersionMismatch

OUT_ENV = "COEVOLVE_OUT"
EXIT_OK, EXIT_AUDIT, EXIT_VALIDATION, EXIT_RUNTIME = 0, 1, 2, 3


def _error(kind: str, message: str, problems: list[str] | None = None) -> None:
    report = {"error": kind, "message": message}
    if problems:
        report["problems"] = problems
    print(json.dumps(report, indent=1), file=sys.stderr)


def _config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if getattr(args, "seed", None) is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
        problems = cfg.validate()
        if problems:
            raise ConfigError(problems)
    return cfg


def cmd_run(args) -> int:
    from .selfplay import run

    cfg = _config(args)
    if args.dump_config:
        sys.stdout.write(dump_config(cfg))
        return EXIT_OK
    out = Path(args.out) if args.out else Path(os.environ.get(OUT_ENV, "runs")) / f"seed-{cfg.seed}"
    report = run(cfg, out, workers=args.workers, resume_from=args.resume)
    summary = {
        "run_dir": str(out),
        "base_accuracy": report.base["probe"]["accuracy"],
        "accuracy": [r.oracle["probe"]["accuracy"] for r in report.iterations],
        "difficulty": [r.questioner["difficulty"] for r in report.iterations],
        "pseudo_label_accuracy": [r.oracle["pseudo_label_accuracy"] for r in report.iterations],
    }
    print(json.dumps(summary, indent=1))
    return EXIT_OK


def read_probe_file(path: str | Path, grammar, scenes: dict):
    """Probe items from JSONL lines ``{"scene_id": int, "text": "<question>...</question>"}``."""
    from .persistence import read_jsonl

    items = []
    for n, row in enumerate(read_jsonl(path), 1):
        if row["scene_id"] not in scenes:
            raise ConfigError([f"{path}:{n}: unknown scene_id {row['scene_id']}"])
        items.append((scenes[row["scene_id"]], grammar.parse_question(row["text"])))
    return items


def cmd_eval(args) -> int:
    from .persistence import load_checkpoint
    from .selfplay import build_world, evaluate_reasoner, probe_set

    cfg = _config(args)
    params, _, header = load_checkpoint(args.checkpoint)
    world = build_world(cfg)
    g = world.grammar
    if params.vocab_size != g.vocab_size or params.ctx_dim != g.context_length:
        raise VersionMismatch("checkpoint dimensions do not match this configuration's grammar")
    if args.probe:
        items = read_probe_file(args.probe, g, {s.scene_id: s for s in world.eval})
    else:
        items = probe_set(cfg, world)
    result = {"checkpoint": str(args.checkpoint), "role": header.get("role"), "iteration": header.get("iteration")}
    result.update(evaluate_reasoner(params, g, items))
    print(json.dumps(result, indent=1, sort_keys=True))
    return EXIT_OK


def cmd_audit(args) -> int:
    from .audit import audit_run, audit_transcript

    target = Path(args.path)
    if target.is_dir():
        found, recomputed = audit_run(target)
    else:
        found, recomputed = audit_transcript(target), {}
    print(json.dumps({
        "discrepancies": len(found),
        "details": [str(d) for d in found],
        "recomputed": {str(k): v for k, v in recomputed.items()},
    }, indent=1))
    return EXIT_OK if not found else EXIT_AUDIT


def cmd_export_metrics(args) -> int:
    from .metrics import metric_rows, render

    text = render(metric_rows(args.run_dir), args.format)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_inspect(args) -> int:
    from .persistence import read_jsonl

    rows = read_jsonl(args.transcript)
    if not 1 <= args.line <= len(rows):
        raise ConfigError([f"line: {args.line} outside 1..{len(rows)}"])
    print(json.dumps(rows[args.line - 1], indent=2, sort_keys=True))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="coevolve", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run the self-play loop")
    p.add_argument("--config", help="JSON config listing every field (default: built-in defaults)")
    p.add_argument("--out", help=f"run directory (default: ${OUT_ENV}/seed-SEED or runs/seed-SEED)")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--workers", type=int, default=1, help="rollout threads; results do not depend on it")
    p.add_argument("--resume", type=int, metavar="K", help="continue from the iter_K checkpoints in --out")
    p.add_argument("--dump-config", action="store_true", help="print the resolved config and exit")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("eval", help="greedy accuracy of a reasoner checkpoint against the oracle")
    p.add_argument("checkpoint")
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--probe", help="JSONL probe set of {scene_id, text} on eval scenes")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("audit", help="recompute rewards and advantages from transcripts")
    p.add_argument("path", help="run directory or one iter_K/transcript.jsonl")
    p.set_defaults(func=cmd_audit)

    p = sub.add_parser("export-metrics", help="write the metrics table of a run")
    p.add_argument("run_dir")
    p.add_argument("--format", choices=("csv", "json"), default="csv")
    p.add_argument("--out", help="output file (default: stdout)")
    p.set_defaults(func=cmd_export_metrics)

    p = sub.add_parser("inspect", help="pretty-print one transcript line")
    p.add_argument("transcript")
    p.add_argument("--line", type=int, default=1, help="1-based line number")
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if getattr(args, "workers", 1) < 1:
        _error("validation", "--workers must be >= 1")
        return EXIT_VALIDATION
    try:
        return args.func(args)
    except ConfigError as exc:
        _error("validation", "invalid configuration or input", exc.problems)
        return EXIT_VALIDATION
    except VersionMismatch as exc:
        _error("validation", str(exc))
        return EXIT_VALIDATION
    except (FileNotFoundError, ValueError) as exc:
        if args.command == "run":
            _error("runtime", f"{type(exc).__name__}: {exc}")
            return EXIT_RUNTIME
        _error("validation", str(exc))
        return EXIT_VALIDATION
    except Exception as exc:  # runtime abort: the run has flushed partial artifacts
        _error("runtime", f"{type(exc).__name__}: {exc}")
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
