from __future__ import annotations

import dataclasses

import pytest

from coevolve.config import RunConfig
from coevolve.microworld import GenerationSpec, Grammar
from coevolve.selfplay import run

ACCEPTANCE_LINES: list[str] = []


def tiny_config(seed: int = 0, iterations: int = 2) -> RunConfig:
    """A few-second run: small scene counts, short phases, short warm start."""
    cfg = RunConfig(seed=seed, iterations=iterations)
    cfg.scenes = dataclasses.replace(cfg.scenes, train=8, eval=4, pretrain=32)
    cfg.warm_start = dataclasses.replace(cfg.warm_start, steps=60)
    cfg.questioner = dataclasses.replace(cfg.questioner, steps=4)
    cfg.reasoner = dataclasses.replace(cfg.reasoner, steps=4)
    cfg.curation = dataclasses.replace(cfg.curation, budget=32)
    cfg.eval = dataclasses.replace(cfg.eval, probe_per_kind=2, frozen_per_scene=4)
    return cfg


@pytest.fixture(scope="session")
def grammar() -> Grammar:
    return Grammar(GenerationSpec())


@pytest.fixture(scope="session")
def tiny_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("tiny") / "run"
    cfg = tiny_config()
    report = run(cfg, out)
    return cfg, out, report


@pytest.fixture(scope="session")
def flagship(tmp_path_factory):
    """The default configuration at seed 0, single worker."""
    out = tmp_path_factory.mktemp("flagship") / "run"
    cfg = RunConfig(seed=0)
    report = run(cfg, out)
    return cfg, out, report


def record_acceptance(line: str) -> None:
    ACCEPTANCE_LINES.append(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
