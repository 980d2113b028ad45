"""Scripted multi-round discussions that produce interaction-graph corpora.

Agents solve small arithmetic problems step by step. Each step can be
corrupted by a nonzero offset that then propagates through later steps; from
round 1 on an agent either adopts the previous round's majority answer or
re-solves. Discussions stop at the first unanimous round.
"""

from __future__ import annotations

import zlib
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .graph import CorpusStats, Mag, build_mag, canonicalize, corpus_stats, write_corpus

TASK_FAMILIES = ("modsum", "listmax")
MODULUS = 10
MAX_DELTA = 3


@dataclass(frozen=True)
class TaskInstance:
    id: str
    question: str
    gold: str
    oracle_chain: str
    family: str = "modsum"
    operands: tuple[int, ...] = ()


@dataclass(frozen=True)
class AgentProfile:
    agent_id: int
    step_error_rate: float
    follow_rate: float

    def __post_init__(self):
        for name in ("step_error_rate", "follow_rate"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")


@dataclass
class SimConfig:
    task: str = "modsum"
    n_instances: int = 1000
    n_agents: int = 3
    max_rounds: int = 3
    error_rates: Sequence[float] = (0.1, 0.25, 0.4)
    follow_rate: float = 0.8
    seed: int = 7
    split: str = "train"
    n_operands: int = 3
    profiles: list[AgentProfile] = field(default_factory=list)

    def __post_init__(self):
        if self.task not in TASK_FAMILIES:
            raise ValueError(f"unknown task family {self.task!r}; choose from {TASK_FAMILIES}")
        if self.n_agents < 2:
            raise ValueError("n_agents must be at least 2")
        if not 1 <= self.max_rounds <= 3:
            raise ValueError("max_rounds must lie in [1, 3]")
        if not self.profiles:
            rates = list(self.error_rates)
            if len(rates) not in (1, self.n_agents):
                raise ValueError(f"need 1 or {self.n_agents} error rates, got {len(rates)}")
            rates = rates * self.n_agents if len(rates) == 1 else rates
            self.profiles = [AgentProfile(i, r, self.follow_rate) for i, r in enumerate(rates)]
        if len(self.profiles) != self.n_agents:
            raise ValueError("one profile per agent is required")


def sub_rng(seed: int, label: str, *index: int) -> np.random.Generator:
    """Independent generator for (seed, label, index...); stable across runs."""
    return np.random.default_rng(np.random.SeedSequence([seed, zlib.crc32(label.encode()), *index]))


# ---------------------------------------------------------------------------
# task grammars
#
# A solution is a list of steps, each producing an integer from the previous
# step's (possibly corrupted) output. ``_render`` turns step outputs into text.


def _modsum_steps(ops: Sequence[int]):
    steps = []
    for k in range(1, len(ops)):
        operand = ops[k]
        steps.append(lambda prev, o=operand: prev + o)
    steps.append(lambda prev: prev % MODULUS)
    return steps


def _listmax_steps(ops: Sequence[int]):
    return [lambda prev, o=o: max(prev, o) for o in ops[1:]]


def _render(family: str, ops: Sequence[int], outs: Sequence[int]) -> str:
    parts = []
    prev = ops[0]
    if family == "modsum":
        for k, out in enumerate(outs[:-1]):
            parts.append(f"{prev}+{ops[k + 1]}={out}")
            prev = out
        parts.append(f"{prev} mod {MODULUS} = {outs[-1]}")
    else:
        for k, out in enumerate(outs):
            parts.append(f"max({prev},{ops[k + 1]})={out}")
            prev = out
    parts.append(f"answer: {outs[-1]}")
    return "; ".join(parts)


def _question(family: str, ops: Sequence[int]) -> str:
    if family == "modsum":
        return "+".join(str(o) for o in ops) + f" mod {MODULUS} = ?"
    return "max of [" + ", ".join(str(o) for o in ops) + "] = ?"


def _steps(family: str, ops: Sequence[int]):
    if family == "modsum":
        return _modsum_steps(ops)
    if family == "listmax":
        return _listmax_steps(ops)
    raise ValueError(f"unknown task family {family!r}; choose from {TASK_FAMILIES}")


def _is_mod_step(family: str, k: int, n_steps: int) -> bool:
    return family == "modsum" and k == n_steps - 1


def solve(family: str, ops: Sequence[int], corrupt: Sequence[bool] | None = None, rng=None) -> list[int]:
    """Step outputs, with the flagged steps offset by a nonzero delta.

    A corrupted step never lands back on the correct running value, so once an
    error appears the chain stays wrong.
    """
    steps = _steps(family, ops)
    corrupt = corrupt or [False] * len(steps)
    outs: list[int] = []
    true_prev = written_prev = ops[0]
    for k, step in enumerate(steps):
        true_out = step(true_prev)
        out = step(written_prev)
        if corrupt[k]:
            mod = _is_mod_step(family, k, len(steps))
            choices = []
            for d in range(-MAX_DELTA, MAX_DELTA + 1):
                if d == 0:
                    continue
                cand = (out + d) % MODULUS if mod else out + d
                if cand != true_out:
                    choices.append(cand)
            out = choices[int(rng.integers(len(choices)))]
        outs.append(out)
        true_prev, written_prev = true_out, out
    return outs


def make_instance(family: str, operands: Sequence[int], id: str = "0") -> TaskInstance:
    ops = tuple(int(o) for o in operands)
    if len(ops) < 2:
        raise ValueError("need at least two operands")
    outs = solve(family, ops)
    return TaskInstance(
        id=id,
        question=_question(family, ops),
        gold=str(outs[-1]),
        oracle_chain=_render(family, ops, outs),
        family=family,
        operands=ops,
    )


def gen_instance(family: str, rng: np.random.Generator, id: str = "0", n_operands: int = 3) -> TaskInstance:
    if family not in TASK_FAMILIES:
        raise ValueError(f"unknown task family {family!r}; choose from {TASK_FAMILIES}")
    ops = rng.integers(0, 10, size=n_operands)
    return make_instance(family, ops, id)


def chain_answer(chain: str) -> str:
    """Text after the final ``answer:`` marker (empty if absent)."""
    head, sep, tail = chain.rpartition("answer:")
    return tail.strip() if sep else ""


# ---------------------------------------------------------------------------
# agents and discussion


def majority_answer(answers: Sequence[str]) -> str:
    """Most frequent canonical answer; ties go to the lexicographically smallest."""
    counts = Counter(canonicalize(a) for a in answers)
    top = max(counts.values())
    return min(a for a, c in counts.items() if c == top)


def agent_answer(
    profile: AgentProfile,
    instance: TaskInstance,
    prior_round_context: Sequence[tuple[str, str]],
    rng: np.random.Generator,
) -> tuple[str, str]:
    if prior_round_context and rng.random() < profile.follow_rate:
        target = majority_answer([a for _, a in prior_round_context])
        if target == canonicalize(instance.gold):
            return instance.oracle_chain, instance.gold
        for reasoning, answer in prior_round_context:
            if canonicalize(answer) == target:
                return reasoning, answer
    n_steps = len(_steps(instance.family, instance.operands))
    corrupt = [bool(rng.random() < profile.step_error_rate) for _ in range(n_steps)]
    outs = solve(instance.family, instance.operands, corrupt, rng)
    return _render(instance.family, instance.operands, outs), str(outs[-1])


AnswerFn = Callable[[AgentProfile, TaskInstance, Sequence[tuple[str, str]], np.random.Generator], tuple[str, str]]


def run_discussion(
    instance: TaskInstance,
    profiles: Sequence[AgentProfile],
    max_rounds: int,
    rng: np.random.Generator,
    answer_fn: AnswerFn = agent_answer,
) -> Mag:
    if len(profiles) < 2:
        raise ValueError("a discussion needs at least two agents")
    rounds: list[list[tuple[str, str]]] = []
    context: list[tuple[str, str]] = []
    for r in range(max_rounds + 1):
        outputs = [answer_fn(p, instance, context, rng) for p in profiles]
        rounds.append(outputs)
        if len({canonicalize(a) for _, a in outputs}) == 1:
            break
        context = outputs
    return build_mag(instance, rounds, n_agents=len(profiles))


def instance_id(family: str, split: str, index: int) -> str:
    return f"{family}-{split}-{index:06d}"


def simulate_corpus(config: SimConfig) -> list[Mag]:
    corpus = []
    for i in range(config.n_instances):
        inst = gen_instance(
            config.task,
            sub_rng(config.seed, f"instance/{config.task}/{config.split}", i),
            id=instance_id(config.task, config.split, i),
            n_operands=config.n_operands,
        )
        rng = sub_rng(config.seed, f"discussion/{config.task}/{config.split}", i)
        corpus.append(run_discussion(inst, config.profiles, config.max_rounds, rng))
    return corpus


def gen_corpus(config: SimConfig, out: str | Path | None = None) -> tuple[list[Mag], CorpusStats]:
    corpus = simulate_corpus(config)
    if out is not None:
        write_corpus(out, corpus)
    return corpus, corpus_stats(corpus)
