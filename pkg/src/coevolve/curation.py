"""Curated training set for the reasoner.

Candidates are sampled from a frozen questioner, malformed ones are dropped,
the survivors are pseudo-labelled by majority vote over a frozen reasoner and
kept when their confidence falls inside ``[tau_low, tau_high]``.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import rng as rngmod
from .microworld import Grammar, QuestionAst, Scene, try_parse
from .policy import PolicyParams, PolicySnapshot, TokenSequence, sample_batch
from .rewards import ConfidenceRecord, confidence

CURATED_VERSION = 1


@dataclass(frozen=True)
class CuratedSample:
    scene_id: int
    question: TokenSequence
    pseudo_label: str
    confidence: float
    iteration: int
    answers: tuple[str, ...] = ()

    @property
    def text(self) -> str:
        return self.question.text

    def to_dict(self) -> dict:
        return {
            "scene_id": self.scene_id,
            "tokens": list(self.question.tokens),
            "text": self.question.text,
            "logprob_sum": self.question.logprob_sum,
            "per_step_logprobs": list(self.question.per_step_logprobs),
            "pseudo_label": self.pseudo_label,
            "confidence": self.confidence,
            "iteration": self.iteration,
            "answers": list(self.answers),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CuratedSample":
        q = TokenSequence(
            tuple(d["tokens"]), d["text"], float(d["logprob_sum"]), tuple(d["per_step_logprobs"])
        )
        return cls(
            int(d["scene_id"]), q, d["pseudo_label"], float(d["confidence"]), int(d["iteration"]),
            tuple(d.get("answers", ())),
        )


@dataclass
class CurationStats:
    total: int = 0
    discarded_format: int = 0
    discarded_grammar: int = 0
    deduped: int = 0
    discarded_trivial: int = 0  # c > tau_high
    discarded_noisy: int = 0  # c < tau_low
    discarded_budget: int = 0
    retained: int = 0

    @property
    def discarded_filter(self) -> int:
        return self.discarded_trivial + self.discarded_noisy

    def balanced(self) -> bool:
        return self.total == (
            self.discarded_format + self.discarded_grammar + self.deduped
            + self.discarded_filter + self.discarded_budget + self.retained
        )

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class CuratedDataset:
    samples: list[CuratedSample]
    budget: int
    run_id: str = ""
    iteration: int = 0
    stats: CurationStats = field(default_factory=CurationStats)

    def __len__(self) -> int:
        return len(self.samples)

    def check(self, tau_low: float, tau_high: float) -> None:
        """Assert the dataset invariants."""
        if len(self.samples) > self.budget:
            raise AssertionError("dataset exceeds its budget")
        keys = [(s.scene_id, s.text) for s in self.samples]
        if len(set(keys)) != len(keys):
            raise AssertionError("duplicate (scene_id, text) pair")
        for s in self.samples:
            if not tau_low <= s.confidence <= tau_high:
                raise AssertionError(f"confidence {s.confidence} outside [{tau_low}, {tau_high}]")


@dataclass(frozen=True)
class Candidate:
    """One sampled question with its parse status and, if valid, its vote."""

    scene_id: int
    question: TokenSequence
    status: str  # ok / format / grammar / duplicate
    record: ConfidenceRecord | None = None


def reasoner_answers(
    reasoner: PolicyParams | PolicySnapshot,
    grammar: Grammar,
    scene: Scene,
    q: QuestionAst,
    uniforms: np.ndarray,
    temperature: float = 1.0,
) -> list[TokenSequence]:
    """Sample one single-token answer per row of ``uniforms`` (shape (m, 1))."""
    ctx = grammar.reasoner_context(scene, q)
    contexts = np.repeat(ctx[None, :], len(uniforms), axis=0)
    return sample_batch(
        reasoner, contexts, uniforms, temperature, grammar.answer_mask(q),
        end_id=None, max_len=1, detokenize=grammar.detokenize,
    )


def sample_questions(
    questioner: PolicyParams | PolicySnapshot,
    grammar: Grammar,
    scene: Scene,
    uniforms: np.ndarray,
    temperature: float = 1.0,
    max_len: int = 32,
) -> list[TokenSequence]:
    ctx = grammar.questioner_context(scene)
    contexts = np.repeat(ctx[None, :], len(uniforms), axis=0)
    return sample_batch(
        questioner, contexts, uniforms, temperature, grammar.questioner_mask(),
        end_id=grammar.end_id, max_len=max_len, detokenize=grammar.detokenize,
    )


def _scene_candidates(args) -> list[Candidate]:
    questioner, reasoner, grammar, scene, N, m, seed, path, temperature, max_len = args
    gen = rngmod.stream(seed, *path, scene.scene_id)
    seqs = sample_questions(questioner, grammar, scene, gen.random((N, max_len)), temperature, max_len)
    out, seen = [], set()
    for seq in seqs:
        ast, status = try_parse(grammar, seq.text)
        if status != "ok":
            out.append(Candidate(scene.scene_id, seq, status))
            continue
        if seq.text in seen:
            out.append(Candidate(scene.scene_id, seq, "duplicate"))
            continue
        seen.add(seq.text)
        answers = reasoner_answers(reasoner, grammar, scene, ast, gen.random((m, 1)), temperature)
        out.append(Candidate(scene.scene_id, seq, "ok", confidence([a.text for a in answers], m)))
    return out


def priority(sample: CuratedSample) -> tuple:
    """Budget order: confidence closest to 0.5 first, then scene id, then text."""
    return (abs(sample.confidence - 0.5), sample.scene_id, sample.text)


def curate(
    questioner_snapshot: PolicyParams | PolicySnapshot,
    reasoner_snapshot: PolicyParams | PolicySnapshot,
    scenes: Sequence[Scene],
    grammar: Grammar,
    N: int,
    m: int,
    tau_low: float,
    tau_high: float,
    budget: int,
    seed: int,
    path: Iterable[int | str] = ("curate",),
    iteration: int = 0,
    run_id: str = "",
    temperature: float = 1.0,
    max_len: int = 32,
    workers: int = 1,
) -> tuple[CuratedDataset, list[Candidate]]:
    """Build the curated dataset and return it with every candidate drawn.

    Scene ``s`` uses the rng stream ``(seed, *path, s.scene_id)`` so the
    result does not depend on ``workers``.
    """
    if not 0.0 <= tau_low <= tau_high <= 1.0:
        raise ValueError("need 0 <= tau_low <= tau_high <= 1")
    if min(N, m, budget) < 1:
        raise ValueError("N, m and budget must be at least 1")
    path = tuple(path)
    jobs = [
        (questioner_snapshot, reasoner_snapshot, grammar, s, N, m, seed, path, temperature, max_len)
        for s in scenes
    ]
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            per_scene = list(pool.map(_scene_candidates, jobs))
    else:
        per_scene = [_scene_candidates(j) for j in jobs]
    candidates = [c for group in per_scene for c in group]

    dataset = select(candidates, tau_low, tau_high, budget, iteration)
    dataset.run_id = run_id
    return dataset, candidates


def select(
    candidates: Sequence[Candidate], tau_low: float, tau_high: float, budget: int, iteration: int = 0
) -> CuratedDataset:
    """Apply the confidence band and the budget to already voted candidates."""
    stats = CurationStats(total=len(candidates))
    passing: list[CuratedSample] = []
    for c in candidates:
        if c.status == "format":
            stats.discarded_format += 1
        elif c.status == "grammar":
            stats.discarded_grammar += 1
        elif c.status == "duplicate":
            stats.deduped += 1
        elif c.record.confidence > tau_high:
            stats.discarded_trivial += 1
        elif c.record.confidence < tau_low:
            stats.discarded_noisy += 1
        else:
            r = c.record
            passing.append(CuratedSample(c.scene_id, c.question, r.pseudo_label, r.confidence, iteration, r.answers))
    passing.sort(key=priority)
    kept = passing[:budget]
    stats.discarded_budget = len(passing) - len(kept)
    stats.retained = len(kept)
    return CuratedDataset(kept, budget, "", iteration, stats)


def save_jsonl(dataset: CuratedDataset, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in dataset.samples:
            fh.write(json.dumps(s.to_dict(), sort_keys=True) + "\n")


def load_jsonl(path: str | Path, budget: int | None = None, run_id: str = "") -> CuratedDataset:
    samples = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                samples.append(CuratedSample.from_dict(json.loads(line)))
    iteration = samples[0].iteration if samples else 0
    return CuratedDataset(samples, len(samples) if budget is None else budget, run_id, iteration)
