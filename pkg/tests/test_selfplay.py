from __future__ import annotations

import json
import shutil

import numpy as np
import pytest

from conftest import tiny_config
from coevolve import selfplay
from coevolve.errors import CoevolveError
from coevolve.microworld import Scene, oracle_answer
from coevolve.persistence import load_checkpoint, read_jsonl
from coevolve.policy import adam_init, zero_params
from coevolve.rewards import uncertainty_reward
from coevolve.selfplay import (
    RunState,
    build_world,
    evaluate_reasoner,
    probe_set,
    run,
    run_iteration,
)


def test_eval_scenes_disjoint_from_training(tiny_run):
    cfg, _, _ = tiny_run
    world = build_world(cfg)
    ids = [s.scene_id for s in world.train + world.eval + world.pretrain]
    assert len(ids) == len(set(ids))
    seeds = [s.seed for s in world.train + world.eval + world.pretrain]
    assert len(seeds) == len(set(seeds))
    assert {s.scene_id for s, _ in probe_set(cfg, world)} <= {s.scene_id for s in world.eval}


def test_probe_set_uniform_over_kinds(tiny_run):
    cfg, _, _ = tiny_run
    world = build_world(cfg)
    kinds = [q.kind for _, q in probe_set(cfg, world)]
    assert len(set(kinds.count(k) for k in set(kinds))) == 1


def test_difficulty_identity(tiny_run):
    _, out, report = tiny_run
    for it in report.iterations:
        rows = read_jsonl(out / f"iter_{it.iteration}" / "transcript.jsonl")
        r_unc = []
        for row in rows:
            if row["type"] != "questioner_group":
                continue
            for q in row["questions"]:
                b = q["breakdown"]
                if b["valid"]:
                    assert b["r_unc"] == uncertainty_reward(q["confidence"])
                    r_unc.append(b["r_unc"])
        assert abs(np.mean(r_unc) - it.questioner["difficulty"]) < 1e-12


def test_questioner_phase_covers_each_scene_once(tiny_run):
    cfg, out, _ = tiny_run
    rows = read_jsonl(out / "iter_1" / "transcript.jsonl")
    seen = [r["scene_id"] for r in rows if r["type"] == "questioner_group"]
    assert sorted(seen) == list(range(cfg.scenes.train))


def test_pseudo_label_accuracy_recomputed_from_artifacts(tiny_run):
    _, out, report = tiny_run
    scenes = {d["scene_id"]: Scene.from_dict(d) for d in read_jsonl(out / "scenes.jsonl")}
    grammar = build_world(tiny_run[0]).grammar
    for it in report.iterations:
        rows = read_jsonl(out / f"iter_{it.iteration}" / "curated.jsonl")
        assert len(rows) == it.oracle["n_curated"]
        if not rows:
            continue
        hits = [r["pseudo_label"] == oracle_answer(scenes[r["scene_id"]], grammar.parse_question(r["text"])) for r in rows]
        assert sum(hits) / len(hits) == it.oracle["pseudo_label_accuracy"]


def test_oracle_eval_repeatable(tiny_run):
    cfg, out, report = tiny_run
    world = build_world(cfg)
    probes = probe_set(cfg, world)
    base = load_checkpoint(out / "iter_0" / "reasoner.ckpt")[0]
    assert evaluate_reasoner(base, world.grammar, probes) == evaluate_reasoner(base, world.grammar, probes)
    assert evaluate_reasoner(base, world.grammar, probes) == report.base["probe"]
    last = load_checkpoint(out / "iter_2" / "reasoner.ckpt")[0]
    assert evaluate_reasoner(last, world.grammar, probes) == report.iterations[-1].oracle["probe"]


def deterministic_reasoner(grammar, hidden):
    """Answers every kind with one fixed option, with probability 1 in float64."""
    p = zero_params(grammar.vocab_size, grammar.context_length, hidden)
    for word in ("0", "yes", "equal", "none"):
        p.b_out[grammar.index[word]] = 50.0
    return p


def test_deterministic_reasoner_gives_zero_signal():
    cfg = tiny_config(iterations=1)
    world = build_world(cfg)
    q = selfplay.base_model(cfg, world)
    r = deterministic_reasoner(world.grammar, cfg.policy.hidden)
    state = RunState(0, q.copy(), r.copy(), adam_init(q), adam_init(r))
    new, rep, ds, transcript = run_iteration(state, cfg, world, probe_set(cfg, world))
    confs = [
        x["confidence"]
        for t in transcript if t["type"] == "questioner_group"
        for x in t["questions"] if "confidence" in x
    ]
    assert confs and all(c == 1.0 for c in confs)
    assert new.questioner.equals(q)
    assert len(ds) == 0 and rep.reasoner["skipped"] is True
    assert new.reasoner.equals(r)
    assert rep.curation["discarded_trivial"] > 0


def test_freezing_violation_is_detected(monkeypatch):
    cfg = tiny_config(iterations=1)
    world = build_world(cfg)
    p = zero_params(world.grammar.vocab_size, world.grammar.context_length, cfg.policy.hidden)
    state = RunState(0, p.copy(), p.copy(), adam_init(p), adam_init(p))

    def leaky(questioner, opt, reasoner, *args, **kwargs):
        reasoner.b_out[0] += 1.0
        return questioner, opt, {}

    monkeypatch.setattr(selfplay, "train_questioner_phase", leaky)
    with pytest.raises(CoevolveError):
        run_iteration(state, cfg, world, [])


def test_zero_iterations(tmp_path):
    cfg = tiny_config(iterations=0)
    report = run(cfg, tmp_path / "r")
    assert report.iterations == [] and report.frozen_questionset == {}
    assert report.base["probe"]["n"] > 0
    assert (tmp_path / "r" / "manifest.json").exists()
    assert not (tmp_path / "r" / "iter_1").exists()


def test_in_memory_run_matches_persisted(tiny_run):
    cfg, _, report = tiny_run
    again = run(cfg)
    assert [r.to_dict() for r in again.iterations] == [r.to_dict() for r in report.iterations]
    assert again.frozen_questionset == report.frozen_questionset


def test_resume_is_bit_for_bit(tiny_run, tmp_path):
    cfg, out, _ = tiny_run
    dst = tmp_path / "resumed"
    dst.mkdir()
    for name in ("iter_0", "iter_1"):
        shutil.copytree(out / name, dst / name)
    run(cfg, dst, resume_from=1)
    for f in sorted((out / "iter_2").iterdir()):
        assert (dst / "iter_2" / f.name).read_bytes() == f.read_bytes(), f.name
    for name in ("report.json", "metrics.csv", "manifest.json"):
        assert (dst / name).read_bytes() == (out / name).read_bytes(), name


def test_report_records_frozen_table(tiny_run):
    cfg, out, report = tiny_run
    t = json.loads((out / "report.json").read_text())["frozen_questionset"]
    assert t == report.frozen_questionset
    assert len(t["accuracy"]) == cfg.iterations + 1
    assert all(len(row) == cfg.iterations for row in t["accuracy"])
