"""Acceptance criteria 1 to 10, one test each, at the stated tolerances.

Every test records a ``criterion N: PASS|FAIL ...`` line that the terminal
summary prints in order.
"""

from __future__ import annotations

import itertools
import json
import time

import numpy as np
import pytest

from conftest import record_acceptance
from coevolve.cli import main
from coevolve.config import RunConfig
from coevolve.grpo import (
    GrpoHyper,
    RolloutGroup,
    batch_loss,
    clipped_objective,
    finalize_group,
    loss_and_grad,
    normalize_advantages,
)
from coevolve.persistence import read_jsonl
from coevolve.policy import adam_init, init_params, sample_batch, snapshot, zero_params
from coevolve.rewards import (
    bleu,
    cluster_group,
    cluster_sizes,
    confidence,
    diversity_penalty,
    questioner_reward,
    similarity,
    uncertainty_reward,
)
from coevolve.selfplay import base_model, build_world, run, train_questioner_phase

TRIAL_SEEDS = (0, 1, 2)


def verdict(n: int, ok: bool, detail: str) -> None:
    record_acceptance(f"criterion {n}: {'PASS' if ok else 'FAIL'} {detail}")


def test_criterion_1_reward_formulas():
    checks = [
        abs(uncertainty_reward(0.5) - 1.0) < 1e-12,
        abs(uncertainty_reward(1.0) - 0.0) < 1e-12,
        abs(uncertainty_reward(0.625) - 0.75) < 1e-12,
        questioner_reward(False, 0.9, 0.1) == 0.0,
        questioner_reward(False, 0.0, 0.0) == 0.0,
        all(abs(diversity_penalty(G, G, lam) - lam) < 1e-12 for G in range(1, 17) for lam in (0.0, 0.25, 0.5, 1.0)),
    ]
    ok = all(checks)
    verdict(1, ok, f"{sum(checks)}/{len(checks)} formula checks within 1e-12")
    assert ok


def _reward_group(gen, G: int, m: int = 8, lam: float = 0.5) -> list[float]:
    """Rewards as the loop produces them: questioner lattice or binary reasoner."""
    if gen.random() < 0.5:
        return [float(x) for x in gen.integers(0, 2, size=G)]
    out = []
    for _ in range(G):
        valid = gen.random() < 0.9
        c = int(gen.integers(1, m + 1)) / m
        size = int(gen.integers(1, G + 1))
        out.append(questioner_reward(valid, uncertainty_reward(c), diversity_penalty(size, G, lam)))
    return out


def test_criterion_2_advantage_normalization():
    gen = np.random.default_rng(2)
    eps = 1e-6
    worst_mean, worst_std, checked = 0.0, 0.0, 0
    for _ in range(1000):
        r = np.asarray(_reward_group(gen, int(gen.integers(2, 17))))
        a = np.asarray(normalize_advantages(r.tolist(), eps))
        worst_mean = max(worst_mean, abs(a.mean()))
        if r.std() >= 10 * eps:
            worst_std = max(worst_std, abs(a.std() - 1.0))
            checked += 1
    exact = normalize_advantages([1, 0, 0, 1], 0.0) == [1.0, -1.0, -1.0, 1.0]
    ok = worst_mean < 1e-9 and worst_std < 1e-3 and exact
    verdict(2, ok, f"max|mean|={worst_mean:.2e} max|std-1|={worst_std:.2e} over {checked} groups, [1,0,0,1] exact={exact}")
    assert ok


def _random_batch(p, gen, n_groups=3, G=4, max_len=5):
    groups = []
    for _ in range(n_groups):
        ctx = gen.normal(size=p.ctx_dim)
        seqs = sample_batch(p, np.repeat(ctx[None], G, 0), gen.random((G, max_len)), 1.0, None, end_id=0, max_len=max_len)
        groups.append(finalize_group(RolloutGroup(ctx, seqs, gen.random(G).tolist()), p, 1e-6))
    return groups


def test_criterion_3_gradient_finite_differences():
    start = time.perf_counter()
    gen = np.random.default_rng(3)
    worst = 0.0
    for trial in range(20):
        V, C, d = int(gen.integers(3, 9)), int(gen.integers(2, 7)), int(gen.integers(3, 9))
        old = init_params(V, C, d, 1000 + trial, max_params=500)
        assert old.n_params <= 500
        groups = _random_batch(old, gen)
        p = old.with_flat(old.flat() + gen.normal(0, 0.1, old.n_params))
        hyper = GrpoHyper(kl_beta=float(gen.choice([0.0, 0.04, 0.5])), clip_eps=0.2)
        _, grad, _ = loss_and_grad(p, old, groups, hyper)
        x0, h = p.flat(), 1e-5
        fd = np.empty_like(x0)
        for i in range(x0.size):
            e = np.zeros_like(x0)
            e[i] = h
            fd[i] = (batch_loss(p.with_flat(x0 + e), old, groups, hyper) - batch_loss(p.with_flat(x0 - e), old, groups, hyper)) / (2 * h)
        worst = max(worst, float(np.abs(grad.flat() - fd).max() / max(np.abs(fd).max(), 1e-12)))
    elapsed = time.perf_counter() - start
    ok = worst < 1e-4 and elapsed < 30
    verdict(3, ok, f"max relative error {worst:.2e} over 20 policies in {elapsed:.1f}s")
    assert ok


def test_criterion_4_clip_semantics():
    eps = 0.2
    ratios = np.linspace(0.0, 3.0, 3001)
    checks = []
    for A in (0.3, 1.0, 2.5):
        f = clipped_objective(ratios, A, eps)
        above = ratios > 1 + eps
        checks.append(np.all(f[above] == (1 + eps) * A))
        checks.append(np.allclose(f[~above], ratios[~above] * A, atol=1e-15))
    for A in (-0.3, -1.0, -2.5):
        f = clipped_objective(ratios, A, eps)
        below = ratios < 1 - eps
        checks.append(np.all(f[below] == (1 - eps) * A))
        checks.append(np.allclose(f[~below], ratios[~below] * A, atol=1e-15))
    ok = all(bool(c) for c in checks)
    verdict(4, ok, f"{sum(bool(c) for c in checks)}/{len(checks)} flat-region checks")
    assert ok


def _brute_vote(answers):
    counts = {a: answers.count(a) for a in set(answers)}
    best = max(counts.values())
    return min(a for a in counts if counts[a] == best), best / len(answers)


def test_criterion_5_vote_and_band(flagship):
    start = time.perf_counter()
    gen = np.random.default_rng(5)
    n, mismatches = 0, 0
    for k in range(1, 5):
        alphabet = [str(i) for i in range(k)]
        for m in range(1, 9):
            for combo in itertools.combinations_with_replacement(alphabet, m):
                answers = list(combo)
                gen.shuffle(answers)
                r = confidence(answers, m)
                if (r.pseudo_label, r.confidence) != _brute_vote(answers):
                    mismatches += 1
                n += 1
    cfg, out, _ = flagship
    confs = [row["confidence"] for k in range(1, cfg.iterations + 1) for row in read_jsonl(out / f"iter_{k}" / "curated.jsonl")]
    in_band = all(0.25 <= c <= 0.75 for c in confs)
    elapsed = time.perf_counter() - start
    ok = mismatches == 0 and in_band and bool(confs) and elapsed < 5
    verdict(5, ok, f"{n} multisets, {mismatches} mismatches; {len(confs)} curated samples in band={in_band}")
    assert ok


def test_criterion_6_bleu_clustering():
    cand, ref = ["a", "b", "c", "d", "e"], ["a", "b", "c", "x", "e"]
    manual = (4 / 5 * 2 / 4 * 1 / 3 * 1 / 3) ** 0.25
    hand = abs(bleu(cand, ref) - manual) < 1e-9
    G = 8
    identical = cluster_sizes(cluster_group([[4, 5, 6, 7]] * G)) == [G] * G
    a, b, c = [1, 2, 3, 4, 5, 6, 7, 8], [1, 2, 3, 4, 5, 6, 9, 10], [3, 4, 5, 6, 9, 10, 12]
    is_chain = similarity(a, b, None) >= 0.6 and similarity(b, c, None) >= 0.6 and similarity(a, c, None) < 0.6
    chain = is_chain and cluster_group([a, c, b], 0.6, end_id=None) == [0, 0, 0]
    ok = hand and identical and chain
    verdict(6, ok, f"hand BLEU={hand} identical group={identical} chain merge={chain}")
    assert ok


def _files(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_criterion_7_determinism(flagship, tmp_path):
    cfg, out, _ = flagship
    run(cfg, tmp_path / "w4", workers=4)
    a, b = _files(out), _files(tmp_path / "w4")
    differing = sorted(k for k in set(a) | set(b) if a.get(k) != b.get(k))
    ok = not differing and any(k.endswith(".ckpt") for k in a) and any(k.endswith("transcript.jsonl") for k in a)
    verdict(7, ok, f"{len(a)} files compared, workers 1 vs 4, differing: {differing or 'none'}")
    assert ok


def test_criterion_8_audit_closure(flagship, capsys):
    _, out, _ = flagship
    start = time.perf_counter()
    code = main(["audit", str(out)])
    report = json.loads(capsys.readouterr().out)
    elapsed = time.perf_counter() - start
    ok = code == 0 and report["discrepancies"] == 0 and elapsed < 30
    verdict(8, ok, f"{report['discrepancies']} discrepancies in {elapsed:.1f}s")
    assert ok


def trend_checks(report) -> dict:
    """The three sub-checks of the co-evolution trend for one run."""
    base = report.base["probe"]["accuracy"]
    final = report.iterations[-1].oracle["probe"]["accuracy"]
    per_step = [d for it in report.iterations for d in it.questioner["difficulty_per_step"] if d is not None]
    slope = float(np.polyfit(np.arange(len(per_step)), per_step, 1)[0])
    pooled = report.frozen_questionset["pooled"]
    drops = [pooled[i] - pooled[i + 1] for i in range(len(pooled) - 1)]
    return {
        "a": final - base >= 0.05,
        "b": slope > 0,
        "c": all(d <= 0.02 for d in drops),
        "gain": final - base,
        "slope": slope,
        "pooled": pooled,
    }


@pytest.mark.parametrize("seeds", [TRIAL_SEEDS])
def test_criterion_9_coevolution_trend(seeds, flagship):
    lines, passed = [], 0
    for seed in seeds:
        if seed == flagship[0].seed:
            report = flagship[2]
        else:
            report = run(RunConfig(seed=seed))
        t = trend_checks(report)
        all_ok = t["a"] and t["b"] and t["c"]
        passed += all_ok
        lines.append(
            f"seed {seed}: (a) gain {t['gain']:+.3f} {'ok' if t['a'] else 'fail'}, "
            f"(b) slope {t['slope']:+.4f} {'ok' if t['b'] else 'fail'}, "
            f"(c) pooled {[round(x, 3) for x in t['pooled']]} {'ok' if t['c'] else 'fail'}"
        )
    ok = passed >= 2
    verdict(9, ok, f"{passed}/{len(seeds)} seeds pass all sub-checks; " + "; ".join(lines))
    assert ok, "\n".join(lines)


def test_criterion_10_degenerate_reasoner():
    start = time.perf_counter()
    cfg = RunConfig(seed=0)
    cfg.questioner.grpo.kl_beta = 0.0
    world = build_world(cfg)
    g = world.grammar
    reasoner = zero_params(g.vocab_size, g.context_length, cfg.policy.hidden)
    for word in ("0", "yes", "equal", "none"):  # one option of every answer kind
        reasoner.b_out[g.index[word]] = 50.0
    questioner = base_model(cfg, world)
    transcript: list = []
    new, _, summary = train_questioner_phase(
        questioner, adam_init(questioner), reasoner, g, world.train[:8], cfg, 1, transcript
    )
    rows = [q for t in transcript if t["type"] == "questioner_group" for q in t["questions"] if q["breakdown"]["valid"]]
    all_c1 = bool(rows) and all(q["confidence"] == 1.0 and q["breakdown"]["r_unc"] == 0.0 for q in rows)
    moved = float(np.abs(new.flat() - questioner.flat()).max())
    elapsed = time.perf_counter() - start
    ok = all_c1 and moved < 1e-6 and elapsed < 5
    verdict(10, ok, f"{len(rows)} valid questions all c=1: {all_c1}; max |delta theta| = {moved:.1e} over {summary['steps']} steps")
    assert ok
