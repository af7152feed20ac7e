from __future__ import annotations

import csv
import dataclasses
import io
import json
import math
import shutil

import numpy as np
import pytest

from conftest import tiny_config
from coevolve.cli import main
from coevolve.config import RunConfig, config_from_dict, dump_config, load_config
from coevolve.errors import ConfigError, VersionMismatch
from coevolve.microworld import GenerationSpec, Grammar, QuestionAst, feature_layout, oracle_answer
from coevolve.persistence import load_checkpoint, save_checkpoint, verify_manifest
from coevolve.policy import adam_init, apply_update, init_params, zero_params
from coevolve.selfplay import build_world, run


def run_cli(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


# -- config -------------------------------------------------------------


def test_config_round_trip(tmp_path):
    cfg = tiny_config(seed=5)
    path = tmp_path / "c.json"
    path.write_text(dump_config(cfg))
    back = load_config(path)
    assert back == cfg
    assert dump_config(back) == dump_config(cfg)


def test_missing_field_is_named(tmp_path, capsys):
    d = RunConfig().to_dict()
    del d["curation"]["tau_high"]
    path = tmp_path / "c.json"
    path.write_text(json.dumps(d))
    with pytest.raises(ConfigError) as info:
        load_config(path)
    assert "curation.tau_high: missing" in info.value.problems
    code, _, err = run_cli(capsys, "run", "--config", path, "--out", tmp_path / "r")
    assert code == 2
    assert "curation.tau_high" in json.loads(err)["problems"][0]
    assert not (tmp_path / "r").exists()


def test_unknown_and_mistyped_fields():
    d = RunConfig().to_dict()
    d["curation"]["budgte"] = 3
    d["seed"] = "zero"
    with pytest.raises(ConfigError) as info:
        config_from_dict(d)
    assert "curation.budgte: unknown field" in info.value.problems
    assert any(p.startswith("seed: wrong type") for p in info.value.problems)


def test_band_order_validated():
    d = RunConfig().to_dict()
    d["curation"]["tau_low"] = 0.9
    with pytest.raises(ConfigError):
        config_from_dict(d)


def test_dump_config_command(capsys):
    code, out, _ = run_cli(capsys, "run", "--dump-config", "--seed", "3")
    assert code == 0
    assert config_from_dict(json.loads(out)) == dataclasses.replace(RunConfig(), seed=3)


# -- checkpoints ----------------------------------------------------------


def test_checkpoint_round_trip_bit_exact(tmp_path):
    p = init_params(7, 5, 6, 11)
    g = p.with_flat(np.random.default_rng(0).normal(size=p.n_params))
    p2, opt = apply_update(p, g, adam_init(p), 0.01)
    save_checkpoint(tmp_path / "a.ckpt", p2, "reasoner", 4, opt)
    q, qopt, header = load_checkpoint(tmp_path / "a.ckpt")
    assert q.flat().tobytes() == p2.flat().tobytes()
    assert qopt.m.flat().tobytes() == opt.m.flat().tobytes()
    assert qopt.v.flat().tobytes() == opt.v.flat().tobytes()
    assert qopt.step == 1 and header["role"] == "reasoner" and header["iteration"] == 4
    save_checkpoint(tmp_path / "b.ckpt", q, "reasoner", 4, qopt)
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_checkpoint_version_mismatch_refused(tmp_path, capsys):
    p = init_params(4, 3, 2, 0)
    save_checkpoint(tmp_path / "a.ckpt", p, "reasoner", 0)
    d = json.loads((tmp_path / "a.ckpt").read_text())
    d["version"] = 99
    (tmp_path / "a.ckpt").write_text(json.dumps(d))
    with pytest.raises(VersionMismatch):
        load_checkpoint(tmp_path / "a.ckpt")
    code, _, err = run_cli(capsys, "eval", tmp_path / "a.ckpt")
    assert code == 2 and "99" in json.loads(err)["message"]


# -- run directory --------------------------------------------------------


def test_default_run_inventory(flagship):
    cfg, out, _ = flagship
    names = {p.relative_to(out).as_posix() for p in out.rglob("*") if p.is_file()}
    expected = {"manifest.json", "report.json", "metrics.csv", "scenes.jsonl",
                "iter_0/questioner.ckpt", "iter_0/reasoner.ckpt"}
    for k in range(1, cfg.iterations + 1):
        expected |= {f"iter_{k}/{n}" for n in
                     ("questioner.ckpt", "reasoner.ckpt", "curated.jsonl", "transcript.jsonl", "report.json")}
    assert names == expected
    assert verify_manifest(out) == []
    manifest = json.loads((out / "manifest.json").read_text())
    assert set(manifest["files"]) == expected - {"manifest.json"}
    assert manifest["vocabulary"] == Grammar(cfg.generation).vocab
    assert config_from_dict(manifest["config"]) == cfg


def test_manifest_detects_tampering(tiny_run, tmp_path):
    _, out, _ = tiny_run
    dst = tmp_path / "copy"
    shutil.copytree(out, dst)
    with open(dst / "iter_1" / "curated.jsonl", "a") as fh:
        fh.write("\n")
    assert verify_manifest(dst) == ["iter_1/curated.jsonl"]


def test_same_seed_same_hashes(tiny_run, tmp_path):
    cfg, out, _ = tiny_run
    run(cfg, tmp_path / "again")
    a = json.loads((out / "manifest.json").read_text())["files"]
    b = json.loads((tmp_path / "again" / "manifest.json").read_text())["files"]
    assert a == b


# -- eval -----------------------------------------------------------------


def write_config(path, cfg):
    path.write_text(dump_config(cfg))
    return path


def test_eval_untrained_reasoner_on_balanced_four_way(tmp_path, capsys):
    cfg = RunConfig()
    cfg.scenes = dataclasses.replace(cfg.scenes, eval=128)
    world = build_world(cfg)
    g = world.grammar
    per_answer = {a: [] for a in ("circle", "square", "triangle", "none")}
    for s in world.eval:
        for r in range(4):
            for c in range(4):
                q = QuestionAst("attribute_at", attr="shape", cell=(r, c))
                per_answer[oracle_answer(s, q)].append({"scene_id": s.scene_id, "text": g.question_text(q)})
    n_each = min(len(v) for v in per_answer.values())
    assert n_each >= 80
    rows = [row for v in per_answer.values() for row in v[:n_each]]
    probe = tmp_path / "probe.jsonl"
    probe.write_text("".join(json.dumps(r) + "\n" for r in rows))
    ckpt = tmp_path / "untrained.ckpt"
    save_checkpoint(ckpt, init_params(g.vocab_size, g.context_length, cfg.policy.hidden, 123), "reasoner", 0)
    conf = write_config(tmp_path / "c.json", cfg)
    code, out, _ = run_cli(capsys, "eval", ckpt, "--config", conf, "--probe", probe)
    assert code == 0
    result = json.loads(out)
    n = result["n"]
    assert n == 4 * n_each
    sigma = math.sqrt(0.25 * 0.75 / n)
    assert abs(result["accuracy"] - 0.25) <= 3 * sigma
    assert run_cli(capsys, "eval", ckpt, "--config", conf, "--probe", probe)[1] == out


def lookup_reasoner(g: Grammar, hidden: int):
    """Answers ``exists color=X`` on a one-cell grid by matching the colour feature."""
    p = zero_params(g.vocab_size, g.context_length, hidden)
    layout = feature_layout(1, 1)
    for j, color in enumerate(g.spec.colors):
        feat = layout.index(f"count[shape=*,color={color},size=*]/capacity")
        p.ctx_proj[feat, j] = 10.0
        p.ctx_proj[len(layout) + g.body_index[f"color={color}"], j] = 10.0
        p.b_hidden[j] = -15.0
        p.head[j, g.index["yes"]] = 10.0
    p.b_out[g.index["yes"]] = 10.0 * len(g.spec.colors)
    p.b_out[g.index["no"]] = 5.0
    return p


def test_eval_lookup_policy_is_perfect(tmp_path, capsys):
    cfg = RunConfig(generation=GenerationSpec(grid_w=1, grid_h=1, min_objects=1, max_objects=1))
    world = build_world(cfg)
    g = world.grammar
    rows = [
        {"scene_id": s.scene_id, "text": f"<question>exists color={c}</question>"}
        for s in world.eval for c in g.spec.colors
    ]
    probe = tmp_path / "probe.jsonl"
    probe.write_text("".join(json.dumps(r) + "\n" for r in rows))
    ckpt = tmp_path / "lookup.ckpt"
    save_checkpoint(ckpt, lookup_reasoner(g, cfg.policy.hidden), "reasoner", 0)
    conf = write_config(tmp_path / "c.json", cfg)
    code, out, _ = run_cli(capsys, "eval", ckpt, "--config", conf, "--probe", probe)
    assert code == 0
    result = json.loads(out)
    assert result["n"] == len(rows) and result["accuracy"] == 1.0


def test_eval_rejects_unknown_scene(tmp_path, capsys):
    g = Grammar(GenerationSpec())
    ckpt = tmp_path / "r.ckpt"
    save_checkpoint(ckpt, zero_params(g.vocab_size, g.context_length, 4), "reasoner", 0)
    probe = tmp_path / "probe.jsonl"
    probe.write_text(json.dumps({"scene_id": 0, "text": "<question>exists color=red</question>"}) + "\n")
    code, _, err = run_cli(capsys, "eval", ckpt, "--probe", probe)
    assert code == 2 and "unknown scene_id" in err


# -- audit ----------------------------------------------------------------


def test_audit_clean_run(tiny_run, capsys):
    _, out, _ = tiny_run
    code, stdout, _ = run_cli(capsys, "audit", out)
    assert code == 0 and json.loads(stdout)["discrepancies"] == 0
    code, stdout, _ = run_cli(capsys, "audit", out / "iter_1" / "transcript.jsonl")
    assert code == 0


def _perturbed_copy(out, tmp_path, edit):
    dst = tmp_path / "copy"
    shutil.copytree(out, dst)
    path = dst / "iter_1" / "transcript.jsonl"
    lines = path.read_text().splitlines()
    lines = edit(lines)
    path.write_text("\n".join(lines) + "\n")
    return dst


def test_audit_single_perturbation(tiny_run, tmp_path, capsys):
    _, out, _ = tiny_run

    def edit(lines):
        for i, line in enumerate(lines):
            rec = json.loads(line)
            if rec["type"] == "reasoner_step":
                rec["stats"]["mean_reward"] += 1e-3
                lines[i] = json.dumps(rec, sort_keys=True)
                self_line[0] = i + 1
                return lines
        raise AssertionError("no reasoner step")

    self_line = [0]
    dst = _perturbed_copy(out, tmp_path, edit)
    code, stdout, _ = run_cli(capsys, "audit", dst)
    report = json.loads(stdout)
    assert code == 1 and report["discrepancies"] == 1
    assert f":{self_line[0]}" in report["details"][0] and "mean_reward" in report["details"][0]


def test_audit_reports_parse_error_line(tiny_run, tmp_path, capsys):
    _, out, _ = tiny_run

    def edit(lines):
        lines[2] = lines[2][:-5]
        return lines

    dst = _perturbed_copy(out, tmp_path, edit)
    code, _, err = run_cli(capsys, "audit", dst)
    assert code == 2 and "transcript.jsonl:3" in json.loads(err)["message"]


# -- metrics and inspect --------------------------------------------------


def test_export_metrics_rows(flagship, capsys):
    cfg, out, report = flagship
    code, text, _ = run_cli(capsys, "export-metrics", out)
    assert code == 0
    rows = list(csv.DictReader(io.StringIO(text)))
    steps = sum(it.questioner["steps"] + it.reasoner["steps"] for it in report.iterations)
    assert len(rows) == steps + cfg.iterations
    assert steps == cfg.iterations * (cfg.questioner.steps + cfg.reasoner.steps)
    summaries = [r for r in rows if r["phase"] == "summary"]
    for r, it in zip(summaries, report.iterations):
        assert float(r["difficulty"]) == it.questioner["difficulty"]
        assert float(r["probe_accuracy"]) == it.oracle["probe"]["accuracy"]
    assert text == (out / "metrics.csv").read_text()


def test_export_metrics_json(tiny_run, tmp_path, capsys):
    _, out, _ = tiny_run
    dest = tmp_path / "m.json"
    assert run_cli(capsys, "export-metrics", out, "--format", "json", "--out", dest)[0] == 0
    rows = json.loads(dest.read_text())
    assert rows[0]["phase"] == "questioner" and rows[-1]["phase"] == "summary"


def test_export_metrics_empty_dir(tmp_path, capsys):
    code, _, err = run_cli(capsys, "export-metrics", tmp_path)
    assert code == 2 and err


def test_inspect(tiny_run, capsys):
    _, out, _ = tiny_run
    code, text, _ = run_cli(capsys, "inspect", out / "iter_1" / "transcript.jsonl", "--line", 1)
    assert code == 0 and json.loads(text)["type"] == "questioner_group"
    code, _, _ = run_cli(capsys, "inspect", out / "iter_1" / "transcript.jsonl", "--line", 100000)
    assert code == 2
