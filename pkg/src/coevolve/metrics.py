"""Per-step and per-iteration metrics table rebuilt from a run directory.

Columns, one row per (iteration, phase, step) plus one ``summary`` row per
iteration:

iteration, phase, step, loss, mean_reward, mean_advantage_abs, clip_fraction,
kl, mean_ratio, difficulty, validity_rate, mean_cluster_size, probe_accuracy,
pseudo_label_accuracy, n_curated

``difficulty`` is the mean r_unc over valid questions (per step, or over the
whole questioner phase on summary rows). Empty cells mean "not applicable".
"""

from __future__ import annotations

import csv
import io
import json
from pathlib import Path

from .persistence import read_jsonl

COLUMNS = (
    "iteration", "phase", "step", "loss", "mean_reward", "mean_advantage_abs", "clip_fraction",
    "kl", "mean_ratio", "difficulty", "validity_rate", "mean_cluster_size", "probe_accuracy",
    "pseudo_label_accuracy", "n_curated",
)


def iteration_dirs(run_dir: Path) -> list[Path]:
    dirs = [p for p in run_dir.glob("iter_*") if p.is_dir() and p.name[5:].isdigit() and int(p.name[5:]) > 0]
    return sorted(dirs, key=lambda p: int(p.name[5:]))


def metric_rows(run_dir: str | Path) -> list[dict]:
    run_dir = Path(run_dir)
    if not run_dir.is_dir():
        raise FileNotFoundError(f"no run directory at {run_dir}")
    report_path = run_dir / "report.json"
    if not report_path.is_file():
        raise FileNotFoundError(f"{run_dir} has no report.json")
    report = json.loads(report_path.read_text(encoding="utf-8"))
    by_iter = {r["iteration"]: r for r in report["iterations"]}
    rows = []
    for d in iteration_dirs(run_dir):
        k = int(d.name[5:])
        for rec in read_jsonl(d / "transcript.jsonl"):
            if rec["type"] in ("questioner_step", "reasoner_step"):
                row = {"iteration": k, "phase": rec["type"].split("_")[0], "step": rec["step"]}
                row.update({c: rec["stats"].get(c) for c in COLUMNS[3:12]})
                rows.append(row)
        it = by_iter.get(k)
        if it is not None:
            rows.append({
                "iteration": k, "phase": "summary", "step": None,
                "mean_reward": it["reasoner"]["mean_reward"],
                "difficulty": it["questioner"]["difficulty"],
                "validity_rate": it["questioner"]["validity_rate"],
                "mean_cluster_size": it["questioner"]["mean_cluster_size"],
                "probe_accuracy": it["oracle"]["probe"]["accuracy"],
                "pseudo_label_accuracy": it["oracle"]["pseudo_label_accuracy"],
                "n_curated": it["oracle"]["n_curated"],
            })
    return rows


def _cell(v) -> str:
    if v is None:
        return ""
    return repr(v) if isinstance(v, float) else str(v)


def render(rows: list[dict], fmt: str = "csv") -> str:
    if fmt == "json":
        return json.dumps([{c: r.get(c) for c in COLUMNS} for r in rows], indent=1) + "\n"
    if fmt != "csv":
        raise ValueError(f"unknown metrics format {fmt!r}")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(COLUMNS)
    for r in rows:
        w.writerow([_cell(r.get(c)) for c in COLUMNS])
    return buf.getvalue()


def write_metrics(run_dir: str | Path, path: str | Path, fmt: str = "csv") -> Path:
    path = Path(path)
    path.write_text(render(metric_rows(run_dir), fmt), encoding="utf-8")
    return path
