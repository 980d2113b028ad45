from __future__ import annotations

import numpy as np
import pytest

from magdi_lab.graph import build_mag
from magdi_lab.sim import make_instance
from magdi_lab.student import ModelConfig, StudentModel, Vocab


@pytest.fixture
def vocab() -> Vocab:
    return Vocab()


@pytest.fixture
def inst():
    return make_instance("modsum", (3, 5, 9), id="t-0")


def tiny_model(vocab: Vocab, seed: int = 0, d: int = 8, layers: int = 1, context: int = 64) -> StudentModel:
    cfg = ModelConfig(len(vocab), d_model=d, n_heads=2, n_layers=layers, context=context)
    return StudentModel.init(cfg, np.random.default_rng(seed))


def two_round_mag(inst, n_agents: int = 3, rounds: int = 1, wrong: str = "3+5=8; 8+9=18; 18 mod 10 = 8; answer: 8"):
    """Round 0 has agent 0 wrong; later rounds are all correct."""
    right = inst.oracle_chain
    out = [[(wrong, "8")] + [(right, inst.gold)] * (n_agents - 1)]
    for _ in range(rounds):
        out.append([(right, inst.gold)] * n_agents)
    return build_mag(inst, out)


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
