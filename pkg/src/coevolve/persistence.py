"""Checkpoints, manifests and other run artifacts.

Everything is JSON written with sorted keys and Python's shortest
round-tripping float repr, so a float64 survives save/load bit-for-bit and two
identical runs produce byte-identical files.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from . import rng as rngmod
from .errors import VersionMismatch
from .microworld import GRAMMAR_VERSION, Grammar, feature_layout
from .policy import ADAM_RULE, TENSORS, AdamState, PolicyParams

ARTIFACT_VERSION = 1
CHECKPOINT_FORMAT = "coevolve-checkpoint"

TRANSCRIPT_FIELDS = {
    "questioner_group": "iteration, step, scene_id, questions[{tokens, text, status, answers, "
    "pseudo_label, confidence, tie_broken, breakdown{valid, r_unc, r_div, cluster_id, "
    "cluster_size, final}}], advantages, old_logprobs",
    "questioner_step": "iteration, step, scene_ids, stats{loss, mean_ratio, clip_fraction, kl, "
    "mean_reward, mean_advantage_abs, difficulty, validity_rate, mean_cluster_size}",
    "curation": "iteration, stats{total, discarded_format, discarded_grammar, deduped, "
    "discarded_trivial, discarded_noisy, discarded_budget, retained}",
    "reasoner_group": "iteration, step, index, scene_id, text, pseudo_label, answers, rewards, "
    "advantages, old_logprobs",
    "reasoner_step": "iteration, step, indices, stats{loss, mean_ratio, clip_fraction, kl, "
    "mean_reward, mean_advantage_abs}",
}


def dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, allow_nan=False)


def write_json(path: str | Path, obj) -> None:
    Path(path).write_text(json.dumps(obj, sort_keys=True, indent=1, allow_nan=False) + "\n", encoding="utf-8")


def write_jsonl(path: str | Path, rows) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(dumps(row) + "\n")


def read_jsonl(path: str | Path) -> list[dict]:
    """Parse a JSONL file; errors name the offending line number."""
    rows = []
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rows.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{n}: {exc.msg}") from None
    return rows


def sha256(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _tensor(a: np.ndarray) -> dict:
    return {"shape": list(a.shape), "data": a.ravel().tolist()}


def _array(d: dict) -> np.ndarray:
    return np.asarray(d["data"], dtype=np.float64).reshape(d["shape"])


def _params_dict(p: PolicyParams) -> dict:
    return {n: _tensor(getattr(p, n)) for n in TENSORS}


def _params_from(d: dict, init_seed: int) -> PolicyParams:
    return PolicyParams(**{n: _array(d[n]) for n in TENSORS}, init_seed=init_seed)


def checkpoint_dict(params: PolicyParams, role: str, iteration: int, opt: AdamState | None = None) -> dict:
    out = {
        "format": CHECKPOINT_FORMAT,
        "version": ARTIFACT_VERSION,
        "grammar_version": GRAMMAR_VERSION,
        "role": role,
        "iteration": iteration,
        "init_seed": params.init_seed,
        "dims": params.dims(),
        "tensors": _params_dict(params),
        "adam": None,
    }
    if opt is not None:
        out["adam"] = {
            "step": opt.step,
            "beta1": opt.beta1,
            "beta2": opt.beta2,
            "eps": opt.eps,
            "m": _params_dict(opt.m),
            "v": _params_dict(opt.v),
        }
    return out


def save_checkpoint(path: str | Path, params: PolicyParams, role: str, iteration: int, opt: AdamState | None = None) -> None:
    Path(path).write_text(dumps(checkpoint_dict(params, role, iteration, opt)) + "\n", encoding="utf-8")


def load_checkpoint(path: str | Path) -> tuple[PolicyParams, AdamState | None, dict]:
    """Return ``(params, adam_state, header)``; refuses other format versions."""
    d = json.loads(Path(path).read_text(encoding="utf-8"))
    if d.get("format") != CHECKPOINT_FORMAT:
        raise VersionMismatch(f"{path} is not a checkpoint")
    if d.get("version") != ARTIFACT_VERSION or d.get("grammar_version") != GRAMMAR_VERSION:
        raise VersionMismatch(
            f"{path}: checkpoint version {d.get('version')}/grammar {d.get('grammar_version')}, "
            f"this build reads {ARTIFACT_VERSION}/grammar {GRAMMAR_VERSION}"
        )
    seed = int(d["init_seed"])
    params = _params_from(d["tensors"], seed)
    opt = None
    if d.get("adam") is not None:
        a = d["adam"]
        opt = AdamState(
            int(a["step"]), _params_from(a["m"], seed), _params_from(a["v"], seed),
            float(a["beta1"]), float(a["beta2"]), float(a["eps"]),
        )
    header = {k: v for k, v in d.items() if k not in ("tensors", "adam")}
    return params, opt, header


def build_manifest(config_dict: dict, grammar: Grammar, dims: dict, run_dir: str | Path) -> dict:
    """Describe the run and hash every artifact under ``run_dir``."""
    run_dir = Path(run_dir)
    files = {}
    for p in sorted(run_dir.rglob("*")):
        if p.is_file() and p.name != "manifest.json":
            files[p.relative_to(run_dir).as_posix()] = sha256(p)
    spec = grammar.spec
    return {
        "artifact_version": ARTIFACT_VERSION,
        "grammar_version": GRAMMAR_VERSION,
        "config": config_dict,
        "vocabulary": list(grammar.vocab),
        "feature_layout": feature_layout(spec.grid_w, spec.grid_h),
        "reasoner_context": "scene features followed by two bags of body words "
        "(left of 'vs', right of 'vs'); questioner context zeros the bags",
        "body_words": list(grammar.body_words),
        "policy_dims": dims,
        "optimizer_rule": ADAM_RULE,
        "rng_rule": rngmod.RULE,
        "transcript_fields": TRANSCRIPT_FIELDS,
        "files": files,
    }


def verify_manifest(run_dir: str | Path) -> list[str]:
    """Return the relative paths whose hash no longer matches the manifest."""
    run_dir = Path(run_dir)
    manifest = json.loads((run_dir / "manifest.json").read_text(encoding="utf-8"))
    bad = []
    for rel, digest in manifest["files"].items():
        p = run_dir / rel
        if not p.is_file() or sha256(p) != digest:
            bad.append(rel)
    return bad
