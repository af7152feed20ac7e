"""Alternating questioner/reasoner training with co-evolution metrics.

One iteration trains the questioner against a frozen reasoner, curates a
pseudo-labelled dataset with both frozen, then trains the reasoner on it with
the questioner frozen. Rollouts fan out over threads; every rollout draws from
its own stream keyed by (seed, role, iteration, step, item), and parameter
updates happen on the calling thread, so results do not depend on the number
of workers.

Run directory::

    manifest.json  scenes.jsonl  metrics.csv  report.json
    iter_0/{questioner,reasoner}.ckpt          base model
    iter_k/{questioner,reasoner}.ckpt          after each phase
    iter_k/{curated,transcript}.jsonl  iter_k/report.json
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import rng as rngmod
from .config import RunConfig
from .curation import CuratedDataset, curate, reasoner_answers, sample_questions, save_jsonl
from .errors import CoevolveError
from .grpo import RolloutGroup, finalize_group, grpo_step
from .microworld import KINDS, Grammar, QuestionAst, Scene, generate_scene, oracle_answer, try_parse
from .persistence import (
    build_manifest,
    load_checkpoint,
    save_checkpoint,
    write_json,
    write_jsonl,
)
from .policy import (
    AdamState,
    PolicyParams,
    adam_init,
    apply_update,
    backward,
    forward,
    init_params,
    sample_batch,
    snapshot,
)
from .rewards import confidence, reasoner_reward, score_group

log = logging.getLogger("coevolve")


# ---------------------------------------------------------------------------
# Scenes and probes


@dataclass
class World:
    grammar: Grammar
    train: list[Scene]
    eval: list[Scene]
    pretrain: list[Scene]

    def scene(self, scene_id: int) -> Scene:
        return self._by_id[scene_id]

    def __post_init__(self):
        self._by_id = {s.scene_id: s for s in self.train + self.eval + self.pretrain}


def build_world(cfg: RunConfig) -> World:
    """Train, eval and pretraining scenes with disjoint ids and seed paths."""
    spec, n = cfg.generation, cfg.scenes
    grammar = Grammar(spec)

    def make(label: str, count: int, offset: int) -> list[Scene]:
        return [generate_scene(rngmod.derive_seed(cfg.seed, "scene", label, i), spec, offset + i) for i in range(count)]

    train = make("train", n.train, 0)
    ev = make("eval", n.eval, n.train)
    pre = make("pretrain", n.pretrain, n.train + n.eval)
    return World(grammar, train, ev, pre)


def probe_set(cfg: RunConfig, world: World) -> list[tuple[Scene, QuestionAst]]:
    """Fixed grammar-drawn probe questions on the eval scenes, uniform over kinds."""
    items = []
    for s in world.eval:
        gen = rngmod.stream(cfg.seed, "probe", s.scene_id)
        for kind in KINDS:
            for _ in range(cfg.eval.probe_per_kind):
                items.append((s, world.grammar.sample_question(gen, s, kind)))
    return items


def greedy_answers(params, grammar: Grammar, items: Sequence[tuple[Scene, QuestionAst]]) -> list[str]:
    if not items:
        return []
    ctx = np.array([grammar.reasoner_context(s, q) for s, q in items])
    masks = np.array([grammar.answer_mask(q) for _, q in items])
    seqs = sample_batch(params, ctx, None, 1.0, masks, None, 1, greedy=True, detokenize=grammar.detokenize)
    return [s.text for s in seqs]


def evaluate_reasoner(params, grammar: Grammar, items: Sequence[tuple[Scene, QuestionAst]]) -> dict:
    """Greedy accuracy against the oracle, overall and per question kind."""
    answers = greedy_answers(params, grammar, items)
    hits = [a == oracle_answer(s, q) for a, (s, q) in zip(answers, items)]
    per_kind = {}
    for kind in KINDS:
        k = [h for h, (_, q) in zip(hits, items) if q.kind == kind]
        if k:
            per_kind[kind] = {"n": len(k), "accuracy": sum(k) / len(k)}
    return {"n": len(hits), "correct": int(sum(hits)), "accuracy": sum(hits) / len(hits) if hits else None, "per_kind": per_kind}


# ---------------------------------------------------------------------------
# Base model


def _ce_dlogits(cache, batch: int) -> np.ndarray:
    p = np.exp(cache.logp)
    onehot = np.zeros_like(p)
    np.put_along_axis(onehot, cache.targets[..., None], 1.0, axis=-1)
    return np.where(cache.valid[..., None], p - onehot, 0.0) / batch


def warm_start(params: PolicyParams, grammar: Grammar, scenes: Sequence[Scene], cfg: RunConfig) -> PolicyParams:
    """Supervised pretraining of the shared base model.

    Each step fits oracle answers to grammar questions (reasoner role) and the
    grammar's question distribution (questioner role) on the pretraining
    scenes, which never appear in training or evaluation.
    """
    w = cfg.warm_start
    if w.steps == 0:
        return params
    gen = rngmod.stream(cfg.seed, "warm_start")
    opt = adam_init(params)
    qmask = grammar.questioner_mask()
    for _ in range(w.steps):
        picks = [scenes[int(i)] for i in gen.integers(len(scenes), size=w.batch)]
        qs = [grammar.sample_question(gen, s) for s in picks]
        ctx = np.array([grammar.reasoner_context(s, q) for s, q in zip(picks, qs)])
        masks = np.array([grammar.answer_mask(q) for q in qs])
        targets = [[grammar.index[oracle_answer(s, q)]] for s, q in zip(picks, qs)]
        cache = forward(params, ctx, targets, masks)
        grad = backward(params, cache, _ce_dlogits(cache, w.batch))

        lm_q = [grammar.sample_question(gen, s) for s in picks]
        qctx = np.array([grammar.questioner_context(s) for s in picks])
        cache = forward(params, qctx, [grammar.tokenize_question(q) for q in lm_q], qmask)
        g2 = backward(params, cache, _ce_dlogits(cache, w.batch))
        for name, arr in g2.tensors().items():
            getattr(grad, name).__iadd__(arr)
        params, opt = apply_update(params, grad, opt, w.lr)
    return params


def base_model(cfg: RunConfig, world: World) -> PolicyParams:
    g = world.grammar
    p = init_params(
        g.vocab_size, g.context_length, cfg.policy.hidden, rngmod.derive_seed(cfg.seed, "init"),
        cfg.policy.init_scale, cfg.policy.param_cap,
    )
    return warm_start(p, g, world.pretrain, cfg)


# ---------------------------------------------------------------------------
# State and reports


@dataclass
class RunState:
    iteration: int
    questioner: PolicyParams
    reasoner: PolicyParams
    q_opt: AdamState
    r_opt: AdamState


@dataclass
class IterationReport:
    iteration: int
    questioner: dict
    curation: dict
    reasoner: dict
    oracle: dict

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class RunReport:
    base: dict
    iterations: list[IterationReport] = field(default_factory=list)
    frozen_questionset: dict = field(default_factory=dict)
    error: str | None = None

    def to_dict(self) -> dict:
        return {
            "base": self.base,
            "iterations": [r.to_dict() for r in self.iterations],
            "frozen_questionset": self.frozen_questionset,
            "error": self.error,
        }


def _mean(xs) -> float | None:
    xs = [x for x in xs if x is not None]
    return float(np.mean(xs)) if xs else None


def _pool(workers: int):
    return ThreadPoolExecutor(workers) if workers > 1 else None


def _map(pool, fn: Callable, jobs: list) -> list:
    return list(pool.map(fn, jobs)) if pool is not None else [fn(j) for j in jobs]


def _chunks(n: int, steps: int, gen: np.random.Generator) -> list[np.ndarray]:
    order = gen.permutation(n)
    return [c for c in np.array_split(order, min(steps, n)) if len(c)]


# ---------------------------------------------------------------------------
# Questioner phase


def _questioner_rollout(job) -> dict:
    questioner, reasoner, grammar, scene, cfg, path = job
    gen = rngmod.stream(cfg.seed, *path, scene.scene_id)
    G, m = cfg.questioner.grpo.group_size, cfg.curation.m
    temp = cfg.questioner.temperature
    seqs = sample_questions(questioner, grammar, scene, gen.random((G, cfg.policy.max_len)), temp, cfg.policy.max_len)
    rows, valid, confs = [], [], []
    for seq in seqs:
        ast, status = try_parse(grammar, seq.text)
        row = {"tokens": list(seq.tokens), "text": seq.text, "status": status}
        if ast is not None:
            answers = reasoner_answers(reasoner, grammar, scene, ast, gen.random((m, 1)), cfg.reasoner.temperature)
            rec = confidence([a.text for a in answers], m)
            row.update(answers=list(rec.answers), pseudo_label=rec.pseudo_label, confidence=rec.confidence, tie_broken=rec.tie_broken)
            confs.append(rec.confidence)
        else:
            confs.append(None)
        valid.append(ast is not None)
        rows.append(row)
    breakdowns = score_group(seqs, valid, confs, cfg.rewards.lam, cfg.rewards.bleu_threshold, grammar.end_id)
    for row, b in zip(rows, breakdowns):
        row["breakdown"] = b.to_dict()
    return {"scene": scene, "seqs": seqs, "rows": rows, "rewards": [b.final for b in breakdowns]}


def train_questioner_phase(
    questioner: PolicyParams,
    opt: AdamState,
    reasoner,
    grammar: Grammar,
    scenes: Sequence[Scene],
    cfg: RunConfig,
    iteration: int,
    transcript: list,
    workers: int = 1,
) -> tuple[PolicyParams, AdamState, dict]:
    """GRPO on the questioner with the reasoner frozen as the reward oracle."""
    frozen = snapshot(reasoner)
    hyper = cfg.questioner.grpo
    qmask = grammar.questioner_mask()
    steps, step = [], 0
    with _maybe_pool(workers) as pool:
        for p in range(cfg.questioner.passes):
            gen = rngmod.stream(cfg.seed, "order", "questioner", iteration, p)
            for chunk in _chunks(len(scenes), cfg.questioner.steps, gen):
                old = snapshot(questioner, step)
                path = ("questioner", iteration, step)
                jobs = [(old, frozen, grammar, scenes[int(i)], cfg, path) for i in chunk]
                results = _map(pool, _questioner_rollout, jobs)
                groups = []
                for r in results:
                    ctx = grammar.questioner_context(r["scene"])
                    g = finalize_group(RolloutGroup(ctx, r["seqs"], r["rewards"], mask=qmask), old, hyper.eps_norm)
                    groups.append(g)
                    transcript.append({
                        "type": "questioner_group", "iteration": iteration, "step": step,
                        "scene_id": r["scene"].scene_id, "questions": r["rows"],
                        "advantages": g.advantages, "old_logprobs": g.old_logprobs,
                    })
                questioner, opt, stats = grpo_step(questioner, old, groups, hyper, opt)
                stats.update(questioner_step_stats([r["rows"] for r in results]))
                transcript.append({
                    "type": "questioner_step", "iteration": iteration, "step": step,
                    "scene_ids": [r["scene"].scene_id for r in results], "stats": stats,
                })
                steps.append(stats)
                step += 1
    summary = {
        "steps": len(steps),
        "mean_reward": _mean(s["mean_reward"] for s in steps),
        "difficulty": _phase_difficulty(transcript, iteration),
        "validity_rate": _mean(s["validity_rate"] for s in steps),
        "mean_cluster_size": _mean(s["mean_cluster_size"] for s in steps),
        "difficulty_per_step": [s["difficulty"] for s in steps],
    }
    return questioner, opt, summary


def questioner_step_stats(groups_rows: Sequence[Sequence[dict]]) -> dict:
    rows = [r for g in groups_rows for r in g]
    b = [r["breakdown"] for r in rows]
    return {
        "difficulty": _mean(x["r_unc"] for x in b if x["valid"]),
        "validity_rate": sum(x["valid"] for x in b) / len(b),
        "mean_cluster_size": float(np.mean([x["cluster_size"] for x in b])),
    }


def _phase_difficulty(transcript: list, iteration: int) -> float | None:
    """Mean r_unc over every valid question of the phase."""
    return _mean(
        q["breakdown"]["r_unc"]
        for t in transcript
        if t["type"] == "questioner_group" and t["iteration"] == iteration
        for q in t["questions"]
        if q["breakdown"]["valid"]
    )


class _maybe_pool:
    def __init__(self, workers: int):
        self.pool = _pool(workers)

    def __enter__(self):
        return self.pool

    def __exit__(self, *exc):
        if self.pool is not None:
            self.pool.shutdown()


# ---------------------------------------------------------------------------
# Reasoner phase


def _reasoner_rollout(job) -> dict:
    reasoner, grammar, world, sample, index, cfg, path = job
    gen = rngmod.stream(cfg.seed, *path, index)
    scene = world.scene(sample.scene_id)
    ast = grammar.parse_question(sample.text)
    G = cfg.reasoner.grpo.group_size
    seqs = reasoner_answers(reasoner, grammar, scene, ast, gen.random((G, 1)), cfg.reasoner.temperature)
    rewards = [float(reasoner_reward(s.text, sample.pseudo_label)) for s in seqs]
    return {"index": index, "sample": sample, "scene": scene, "ast": ast, "seqs": seqs, "rewards": rewards}


def train_reasoner_phase(
    reasoner: PolicyParams,
    opt: AdamState,
    dataset: CuratedDataset,
    world: World,
    cfg: RunConfig,
    iteration: int,
    transcript: list,
    workers: int = 1,
) -> tuple[PolicyParams, AdamState, dict]:
    """GRPO on the reasoner against the curated pseudo-labels."""
    if len(dataset) == 0:
        log.warning("iteration %d: empty curated dataset, reasoner phase skipped", iteration)
        return reasoner, opt, {"steps": 0, "skipped": True, "mean_reward": None}
    grammar, hyper = world.grammar, cfg.reasoner.grpo
    steps, step = [], 0
    with _maybe_pool(workers) as pool:
        for p in range(cfg.reasoner.passes):
            gen = rngmod.stream(cfg.seed, "order", "reasoner", iteration, p)
            for chunk in _chunks(len(dataset), cfg.reasoner.steps, gen):
                old = snapshot(reasoner, step)
                path = ("reasoner", iteration, step)
                jobs = [(old, grammar, world, dataset.samples[int(i)], int(i), cfg, path) for i in chunk]
                results = _map(pool, _reasoner_rollout, jobs)
                groups = []
                for r in results:
                    ctx = grammar.reasoner_context(r["scene"], r["ast"])
                    g = RolloutGroup(ctx, r["seqs"], r["rewards"], mask=grammar.answer_mask(r["ast"]))
                    groups.append(finalize_group(g, old, hyper.eps_norm))
                    s = r["sample"]
                    transcript.append({
                        "type": "reasoner_group", "iteration": iteration, "step": step, "index": r["index"],
                        "scene_id": s.scene_id, "text": s.text, "pseudo_label": s.pseudo_label,
                        "answers": [q.text for q in r["seqs"]], "rewards": g.rewards,
                        "advantages": g.advantages, "old_logprobs": g.old_logprobs,
                    })
                reasoner, opt, stats = grpo_step(reasoner, old, groups, hyper, opt)
                transcript.append({
                    "type": "reasoner_step", "iteration": iteration, "step": step,
                    "indices": [r["index"] for r in results], "stats": stats,
                })
                steps.append(stats)
                step += 1
    return reasoner, opt, {"steps": len(steps), "skipped": False, "mean_reward": _mean(s["mean_reward"] for s in steps)}


# ---------------------------------------------------------------------------
# Iterations


def pseudo_label_accuracy(dataset: CuratedDataset, world: World) -> float | None:
    if len(dataset) == 0:
        return None
    hits = [
        s.pseudo_label == oracle_answer(world.scene(s.scene_id), world.grammar.parse_question(s.text))
        for s in dataset.samples
    ]
    return sum(hits) / len(hits)


def run_iteration(
    state: RunState,
    cfg: RunConfig,
    world: World,
    probes: Sequence[tuple[Scene, QuestionAst]],
    out_dir: Path | None = None,
    workers: int = 1,
) -> tuple[RunState, IterationReport, CuratedDataset, list]:
    k = state.iteration + 1
    grammar = world.grammar
    transcript: list = []
    reasoner_before = state.reasoner.copy()

    questioner, q_opt, q_stats = train_questioner_phase(
        state.questioner, state.q_opt, state.reasoner, grammar, world.train, cfg, k, transcript, workers
    )
    if not state.reasoner.equals(reasoner_before):
        raise CoevolveError("reasoner changed during the questioner phase")
    if out_dir is not None:
        save_checkpoint(out_dir / "questioner.ckpt", questioner, "questioner", k, q_opt)

    c = cfg.curation
    dataset, _ = curate(
        snapshot(questioner), snapshot(state.reasoner), world.train, grammar, c.N, c.m,
        c.tau_low, c.tau_high, c.budget, cfg.seed, ("curate", k), iteration=k,
        run_id=f"seed-{cfg.seed}", temperature=cfg.questioner.temperature,
        max_len=cfg.policy.max_len, workers=workers,
    )
    dataset.check(c.tau_low, c.tau_high)
    transcript.append({"type": "curation", "iteration": k, "stats": dataset.stats.to_dict()})
    if out_dir is not None:
        save_jsonl(dataset, out_dir / "curated.jsonl")

    questioner_before = questioner.copy()
    reasoner, r_opt, r_stats = train_reasoner_phase(
        state.reasoner, state.r_opt, dataset, world, cfg, k, transcript, workers
    )
    if not questioner.equals(questioner_before):
        raise CoevolveError("questioner changed during the reasoner phase")
    if out_dir is not None:
        save_checkpoint(out_dir / "reasoner.ckpt", reasoner, "reasoner", k, r_opt)

    oracle = {
        "probe": evaluate_reasoner(reasoner, grammar, probes),
        "pseudo_label_accuracy": pseudo_label_accuracy(dataset, world),
        "n_curated": len(dataset),
    }
    report = IterationReport(k, q_stats, dataset.stats.to_dict(), r_stats, oracle)
    return RunState(k, questioner, reasoner, q_opt, r_opt), report, dataset, transcript


def frozen_question_sets(
    cfg: RunConfig, world: World, questioners: Sequence[PolicyParams]
) -> list[list[tuple[Scene, QuestionAst]]]:
    """Valid, distinct questions drawn from each iteration's questioner on eval scenes."""
    sets = []
    for k, q in enumerate(questioners, 1):
        items = []
        for s in world.eval:
            gen = rngmod.stream(cfg.seed, "frozen", k, s.scene_id)
            seqs = sample_questions(
                q, world.grammar, s, gen.random((cfg.eval.frozen_per_scene, cfg.policy.max_len)),
                cfg.questioner.temperature, cfg.policy.max_len,
            )
            seen = set()
            for seq in seqs:
                ast, status = try_parse(world.grammar, seq.text)
                if status == "ok" and seq.text not in seen:
                    seen.add(seq.text)
                    items.append((s, ast))
        sets.append(items)
    return sets


def frozen_questionset_table(cfg: RunConfig, world: World, questioners, reasoners) -> dict:
    """Accuracy of every reasoner (base first) on every iteration's frozen set."""
    sets = frozen_question_sets(cfg, world, questioners)
    table, pooled = [], []
    for j, r in enumerate(reasoners):
        row, correct, total = [], 0, 0
        for items in sets:
            e = evaluate_reasoner(r, world.grammar, items)
            row.append(e["accuracy"])
            correct += e["correct"]
            total += e["n"]
        table.append(row)
        pooled.append(correct / total if total else None)
    return {
        "set_sizes": [len(s) for s in sets],
        "accuracy": table,  # accuracy[reasoner][question set]
        "pooled": pooled,
        "reasoners": ["base"] + [f"iter_{k}" for k in range(1, len(reasoners))],
    }


def run(
    cfg: RunConfig,
    out_dir: str | Path | None = None,
    workers: int = 1,
    resume_from: int | None = None,
) -> RunReport:
    """Execute every iteration, persisting artifacts when ``out_dir`` is given.

    ``resume_from=k`` reloads ``iter_k`` checkpoints and per-iteration reports
    from ``out_dir`` and continues with iteration k + 1.
    """
    problems = cfg.validate()
    if problems:
        from .errors import ConfigError

        raise ConfigError(problems)
    out = Path(out_dir) if out_dir is not None else None
    world = build_world(cfg)
    probes = probe_set(cfg, world)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        write_jsonl(out / "scenes.jsonl", [dict(s.to_dict(), split=split) for split, ss in (("train", world.train), ("eval", world.eval)) for s in ss])
    train_ids = {s.scene_id for s in world.train}
    if train_ids & {s.scene_id for s in world.eval}:
        raise CoevolveError("eval scenes overlap training scenes")

    if resume_from is None:
        base = base_model(cfg, world)
        state = RunState(0, base.copy(), base.copy(), adam_init(base), adam_init(base))
        if out is not None:
            (out / "iter_0").mkdir(exist_ok=True)
            save_checkpoint(out / "iter_0" / "questioner.ckpt", state.questioner, "questioner", 0, state.q_opt)
            save_checkpoint(out / "iter_0" / "reasoner.ckpt", state.reasoner, "reasoner", 0, state.r_opt)
        done: list[IterationReport] = []
    else:
        if out is None:
            raise ValueError("resuming needs the run directory")
        state = load_state(out, resume_from)
        done = [load_iteration_report(out, k) for k in range(1, resume_from + 1)]

    base_reasoner = load_checkpoint(out / "iter_0" / "reasoner.ckpt")[0] if resume_from is not None else state.reasoner
    report = RunReport(base={"probe": evaluate_reasoner(base_reasoner, world.grammar, probes)}, iterations=done)
    held = ([], [base_reasoner])  # per-iteration policies when nothing is written to disk
    try:
        while state.iteration < cfg.iterations:
            k = state.iteration + 1
            it_dir = None
            if out is not None:
                it_dir = out / f"iter_{k}"
                it_dir.mkdir(exist_ok=True)
            state, it_report, _, transcript = run_iteration(state, cfg, world, probes, it_dir, workers)
            report.iterations.append(it_report)
            if out is None:
                held[0].append(state.questioner)
                held[1].append(state.reasoner)
            log.info(
                "iteration %d: probe accuracy %.3f, difficulty %s, curated %d",
                k, it_report.oracle["probe"]["accuracy"], it_report.questioner["difficulty"], it_report.oracle["n_curated"],
            )
            if it_dir is not None:
                write_jsonl(it_dir / "transcript.jsonl", transcript)
                write_json(it_dir / "report.json", it_report.to_dict())
        if cfg.iterations > 0:
            questioners, reasoners = collect_policies(cfg, out) if out is not None else held
            report.frozen_questionset = frozen_questionset_table(cfg, world, questioners, reasoners)
    except Exception as exc:
        report.error = f"{type(exc).__name__}: {exc}"
        if out is not None:
            finalize(out, cfg, world, report)
        raise
    if out is not None:
        finalize(out, cfg, world, report)
    return report


def collect_policies(cfg: RunConfig, out: Path):
    questioners = [load_checkpoint(out / f"iter_{k}" / "questioner.ckpt")[0] for k in range(1, cfg.iterations + 1)]
    reasoners = [load_checkpoint(out / f"iter_{k}" / "reasoner.ckpt")[0] for k in range(0, cfg.iterations + 1)]
    return questioners, reasoners


def load_state(out: Path, k: int) -> RunState:
    q, q_opt, _ = load_checkpoint(out / f"iter_{k}" / "questioner.ckpt")
    r, r_opt, _ = load_checkpoint(out / f"iter_{k}" / "reasoner.ckpt")
    return RunState(k, q, r, q_opt, r_opt)


def load_iteration_report(out: Path, k: int) -> IterationReport:
    import json

    d = json.loads((out / f"iter_{k}" / "report.json").read_text(encoding="utf-8"))
    return IterationReport(**d)


def finalize(out: Path, cfg: RunConfig, world: World, report: RunReport) -> None:
    """Write report, metrics and, last, the manifest that hashes them all."""
    from .metrics import write_metrics

    write_json(out / "report.json", report.to_dict())
    write_metrics(out, out / "metrics.csv")
    g = world.grammar
    dims = {"vocab_size": g.vocab_size, "ctx_dim": g.context_length, "hidden": cfg.policy.hidden}
    write_json(out / "manifest.json", build_manifest(cfg.to_dict(), g, dims, out))

