"""Offline recomputation of every logged reward and advantage.

The audit reads raw samples from a run's transcripts (question tokens and
texts, reasoner answers) and recomputes parse status, majority votes, reward
breakdowns, advantages, per-step summaries and the report's pseudo-label
accuracy and difficulty. Any numeric field off by more than ``TOL`` or any
other mismatch is reported.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import RunConfig, config_from_dict
from .grpo import normalize_advantages
from .microworld import Grammar, Scene, canonicalize_answer, oracle_answer, try_parse
from .rewards import confidence, reasoner_reward, score_group

TOL = 1e-9


@dataclass(frozen=True)
class Discrepancy:
    source: str
    line: int
    field: str
    logged: object
    recomputed: object

    def __str__(self) -> str:
        return f"{self.source}:{self.line}: {self.field}: logged {self.logged!r}, recomputed {self.recomputed!r}"


class _Checker:
    def __init__(self, source: str):
        self.source = source
        self.found: list[Discrepancy] = []

    def eq(self, line: int, field: str, logged, recomputed) -> None:
        if _differs(logged, recomputed):
            self.found.append(Discrepancy(self.source, line, field, logged, recomputed))

    def seq(self, line: int, field: str, logged, recomputed) -> None:
        if logged is None or len(logged) != len(recomputed):
            self.found.append(Discrepancy(self.source, line, field, logged, recomputed))
            return
        for i, (a, b) in enumerate(zip(logged, recomputed)):
            self.eq(line, f"{field}[{i}]", a, b)


def _differs(a, b) -> bool:
    if isinstance(a, bool) or isinstance(b, bool) or a is None or b is None:
        return a != b
    if isinstance(a, (int, float)) and isinstance(b, (int, float)):
        return not abs(float(a) - float(b)) <= TOL
    return a != b


def _mean(xs):
    xs = [x for x in xs if x is not None]
    return float(np.mean(xs)) if xs else None


def audit_records(records: list[tuple[int, dict]], cfg: RunConfig, grammar: Grammar, source: str = "transcript") -> tuple[list[Discrepancy], dict]:
    """Check transcript records given as (line number, record) pairs.

    Returns the discrepancies and recomputed per-iteration summaries.
    """
    chk = _Checker(source)
    q_groups: dict[tuple, dict] = {}
    r_groups: dict[tuple, dict] = {}
    summary: dict[int, dict] = {}
    m = cfg.curation.m
    for line, rec in records:
        kind = rec.get("type")
        k = rec.get("iteration")
        if kind == "questioner_group":
            eps = cfg.questioner.grpo.eps_norm
            qs = rec["questions"]
            tokens, valid, confs = [], [], []
            for i, q in enumerate(qs):
                where = f"questions[{i}]"
                chk.eq(line, where + ".text", q["text"], grammar.detokenize(q["tokens"]))
                _, status = try_parse(grammar, q["text"])
                chk.eq(line, where + ".status", q["status"], status)
                tokens.append(tuple(q["tokens"]))
                valid.append(status == "ok")
                if status == "ok":
                    answers = q.get("answers") or []
                    if len(answers) != m:
                        chk.eq(line, where + ".answers", len(answers), m)
                        confs.append(None)
                        valid[-1] = False
                        continue
                    c = confidence([canonicalize_answer(a) for a in answers], m)
                    chk.eq(line, where + ".pseudo_label", q.get("pseudo_label"), c.pseudo_label)
                    chk.eq(line, where + ".confidence", q.get("confidence"), c.confidence)
                    chk.eq(line, where + ".tie_broken", q.get("tie_broken"), c.tie_broken)
                    confs.append(c.confidence)
                else:
                    confs.append(None)
            recomputed = score_group(tokens, valid, confs, cfg.rewards.lam, cfg.rewards.bleu_threshold, grammar.end_id)
            for i, (q, b) in enumerate(zip(qs, recomputed)):
                for name, value in b.to_dict().items():
                    chk.eq(line, f"questions[{i}].breakdown.{name}", q["breakdown"].get(name), value)
            finals = [b.final for b in recomputed]
            adv = normalize_advantages(finals, eps)
            chk.seq(line, "advantages", rec.get("advantages"), adv)
            q_groups.setdefault((k, rec["step"]), {"rewards": [], "adv": [], "b": []})
            g = q_groups[(k, rec["step"])]
            g["rewards"] += finals
            g["adv"] += adv
            g["b"] += recomputed
        elif kind == "questioner_step":
            g = q_groups.get((k, rec["step"]))
            if g is None:
                chk.eq(line, "step", rec["step"], "no logged groups")
                continue
            st = rec["stats"]
            chk.eq(line, "stats.mean_reward", st.get("mean_reward"), float(np.mean(g["rewards"])))
            chk.eq(line, "stats.mean_advantage_abs", st.get("mean_advantage_abs"), float(np.mean(np.abs(g["adv"]))))
            chk.eq(line, "stats.difficulty", st.get("difficulty"), _mean(b.r_unc for b in g["b"] if b.valid))
            chk.eq(line, "stats.validity_rate", st.get("validity_rate"), sum(b.valid for b in g["b"]) / len(g["b"]))
            chk.eq(line, "stats.mean_cluster_size", st.get("mean_cluster_size"), float(np.mean([b.cluster_size for b in g["b"]])))
        elif kind == "curation":
            st = rec["stats"]
            parts = sum(v for n, v in st.items() if n != "total")
            chk.eq(line, "stats.total", st["total"], parts)
        elif kind == "reasoner_group":
            eps = cfg.reasoner.grpo.eps_norm
            rewards = [float(reasoner_reward(a, rec["pseudo_label"])) for a in rec["answers"]]
            chk.seq(line, "rewards", rec.get("rewards"), rewards)
            adv = normalize_advantages(rewards, eps)
            chk.seq(line, "advantages", rec.get("advantages"), adv)
            r_groups.setdefault((k, rec["step"]), {"rewards": [], "adv": []})
            r_groups[(k, rec["step"])]["rewards"] += rewards
            r_groups[(k, rec["step"])]["adv"] += adv
        elif kind == "reasoner_step":
            g = r_groups.get((k, rec["step"]))
            if g is None:
                chk.eq(line, "step", rec["step"], "no logged groups")
                continue
            st = rec["stats"]
            chk.eq(line, "stats.mean_reward", st.get("mean_reward"), float(np.mean(g["rewards"])))
            chk.eq(line, "stats.mean_advantage_abs", st.get("mean_advantage_abs"), float(np.mean(np.abs(g["adv"]))))
        else:
            chk.eq(line, "type", kind, "a known record type")
    for (k, _), g in q_groups.items():
        s = summary.setdefault(k, {"r_unc": [], "r_rewards": []})
        s["r_unc"] += [b.r_unc for b in g["b"] if b.valid]
    for (k, step), g in r_groups.items():
        summary.setdefault(k, {"r_unc": [], "r_rewards": []})["r_rewards"].append(float(np.mean(g["rewards"])))
    return chk.found, summary


def read_numbered(path: Path) -> list[tuple[int, dict]]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                out.append((n, json.loads(line)))
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{n}: {exc.msg}") from None
    return out


def _load_context(run_dir: Path) -> tuple[RunConfig, Grammar, dict[int, Scene]]:
    manifest = json.loads((run_dir / "manifest.json").read_text(encoding="utf-8"))
    cfg = config_from_dict(manifest["config"])
    scenes = {}
    with open(run_dir / "scenes.jsonl", encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                s = Scene.from_dict(json.loads(line))
                scenes[s.scene_id] = s
    return cfg, Grammar(cfg.generation), scenes


def audit_transcript(path: str | Path) -> list[Discrepancy]:
    """Audit one ``iter_k/transcript.jsonl``; the run directory is its grandparent."""
    path = Path(path)
    cfg, grammar, _ = _load_context(path.parent.parent)
    found, _ = audit_records(read_numbered(path), cfg, grammar, str(path))
    return found


def audit_run(run_dir: str | Path) -> tuple[list[Discrepancy], dict]:
    """Audit every transcript and cross-check curated sets and ``report.json``."""
    from .metrics import iteration_dirs

    run_dir = Path(run_dir)
    cfg, grammar, scenes = _load_context(run_dir)
    report = json.loads((run_dir / "report.json").read_text(encoding="utf-8"))
    by_iter = {r["iteration"]: r for r in report["iterations"]}
    found: list[Discrepancy] = []
    recomputed: dict = {}
    for d in iteration_dirs(run_dir):
        k = int(d.name[5:])
        t = d / "transcript.jsonl"
        f, summary = audit_records(read_numbered(t), cfg, grammar, str(t))
        found += f
        chk = _Checker(str(d / "curated.jsonl"))
        hits = []
        for line, s in read_numbered(d / "curated.jsonl"):
            c = confidence(s["answers"], cfg.curation.m)
            chk.eq(line, "pseudo_label", s["pseudo_label"], c.pseudo_label)
            chk.eq(line, "confidence", s["confidence"], c.confidence)
            if not cfg.curation.tau_low <= c.confidence <= cfg.curation.tau_high:
                chk.eq(line, "confidence band", c.confidence, "inside [tau_low, tau_high]")
            ast, status = try_parse(grammar, s["text"])
            chk.eq(line, "status", status, "ok")
            if ast is not None:
                hits.append(s["pseudo_label"] == oracle_answer(scenes[s["scene_id"]], ast))
        found += chk.found
        s = summary.get(k, {"r_unc": [], "r_rewards": []})
        values = {
            "difficulty": _mean(s["r_unc"]),
            "pseudo_label_accuracy": sum(hits) / len(hits) if hits else None,
            "reasoner_mean_reward": _mean(s["r_rewards"]),
        }
        recomputed[k] = values
        it = by_iter.get(k)
        rchk = _Checker(str(run_dir / "report.json"))
        if it is None:
            rchk.eq(0, f"iterations[{k}]", None, "present")
        else:
            rchk.eq(0, f"iter_{k}.questioner.difficulty", it["questioner"]["difficulty"], values["difficulty"])
            rchk.eq(0, f"iter_{k}.oracle.pseudo_label_accuracy", it["oracle"]["pseudo_label_accuracy"], values["pseudo_label_accuracy"])
            rchk.eq(0, f"iter_{k}.reasoner.mean_reward", it["reasoner"]["mean_reward"], values["reasoner_mean_reward"])
        found += rchk.found
    return found, recomputed
