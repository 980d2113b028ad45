"""Zero-shot evaluation, self-consistency voting and token-efficiency accounting."""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Protocol, Sequence

import numpy as np

from .graph import Mag, canonicalize, deserialize
from .sim import TaskInstance, sub_rng
from .student import Generation, StudentModel, Vocab, generate
from .trainer import load_checkpoint

LEVEL_ORDER = ("r0", "cn", "an", "magdi")


class Generator(Protocol):
    def generate(
        self, questions: Sequence[str], temperature: float = 0.0, rng: np.random.Generator | None = None
    ) -> list[Generation]: ...


class Student:
    """Inference wrapper: a student model plus its vocabulary, nothing else."""

    def __init__(self, model: StudentModel, vocab: Vocab, max_new_tokens: int = 64, chunk: int = 256):
        self.model = model
        self.vocab = vocab
        self.max_new_tokens = max_new_tokens
        self.chunk = chunk

    @classmethod
    def load(cls, path, **kwargs) -> "Student":
        model, vocab, _ = load_checkpoint(path, with_head=False)
        return cls(model, vocab, **kwargs)

    def generate(self, questions, temperature: float = 0.0, rng=None) -> list[Generation]:
        out: list[Generation] = []
        for i in range(0, len(questions), self.chunk):
            out += generate(
                self.model, self.vocab, questions[i : i + self.chunk], temperature, self.max_new_tokens, rng
            )
        return out


@dataclass
class EvalRecord:
    id: str
    predicted: str
    gold: str
    correct: bool
    tokens: float


@dataclass
class EvalReport:
    accuracy: float
    mean_generated_tokens: float
    records: list[EvalRecord] = field(default_factory=list)
    mode: str = "greedy"

    @classmethod
    def from_records(cls, records: list[EvalRecord], mode: str = "greedy") -> "EvalReport":
        n = len(records)
        acc = sum(r.correct for r in records) / n if n else 0.0
        toks = sum(r.tokens for r in records) / n if n else 0.0
        return cls(acc, toks, records, mode)

    def check(self) -> None:
        n = len(self.records)
        if n and self.accuracy != sum(r.correct for r in self.records) / n:
            raise AssertionError("accuracy does not match per-example records")
        if self.mean_generated_tokens < 0:
            raise AssertionError("negative token count")

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "mean_generated_tokens": self.mean_generated_tokens,
            "mode": self.mode,
            "n_examples": len(self.records),
            "records": [asdict(r) for r in self.records],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1)


def load_testset(path) -> list[TaskInstance]:
    """Read instances from a graph corpus or from plain instance JSON lines."""
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            obj = json.loads(line)
            if "nodes" in obj:
                inst = deserialize(line).instance
                out.append(TaskInstance(inst.id, inst.question, inst.gold, ""))
            else:
                out.append(
                    TaskInstance(
                        obj["id"],
                        obj["question"],
                        obj["gold"],
                        obj.get("oracle_chain", ""),
                        obj.get("family", "modsum"),
                        tuple(obj.get("operands", ())),
                    )
                )
    return out


def evaluate(model: Generator, testset: Sequence[TaskInstance], mode: str = "greedy") -> EvalReport:
    if mode != "greedy":
        raise ValueError("evaluate only supports greedy decoding; use self_consistency for sampling")
    gens = model.generate([t.question for t in testset], 0.0, None)
    records = [
        EvalRecord(t.id, g.answer, t.gold, canonicalize(g.answer) == canonicalize(t.gold), g.n_generated_tokens)
        for t, g in zip(testset, gens)
    ]
    report = EvalReport.from_records(records, "greedy")
    report.check()
    return report


def majority_vote(answers: Sequence[str]) -> str:
    """Modal canonical answer; ties go to whichever tied answer was sampled first."""
    canon = [canonicalize(a) for a in answers]
    counts = Counter(canon)
    top = max(counts.values())
    for a in canon:
        if counts[a] == top:
            return a
    raise ValueError("majority_vote: no answers")


def self_consistency(
    model: Generator,
    testset: Sequence[TaskInstance],
    k: int = 10,
    temperature: float = 0.7,
    seed: int = 0,
) -> EvalReport:
    """Majority vote over ``k`` sampled generations per question.

    ``temperature <= 0`` samples greedily, so ``k=1`` at temperature 0 is the
    greedy evaluation. Token counts are summed over the ``k`` samples.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if temperature <= 0:
        base = evaluate(model, testset)
        if k == 1:
            return base
        records = [EvalRecord(r.id, r.predicted, r.gold, r.correct, r.tokens * k) for r in base.records]
        return EvalReport.from_records(records, f"sc{k}")
    questions = [t.question for t in testset]
    samples = [model.generate(questions, temperature, sub_rng(seed, "self-consistency", j)) for j in range(k)]
    records = []
    for i, t in enumerate(testset):
        answers = [samples[j][i].answer for j in range(k)]
        pred = majority_vote(answers)
        tokens = sum(samples[j][i].n_generated_tokens for j in range(k))
        records.append(EvalRecord(t.id, pred, t.gold, pred == canonicalize(t.gold), tokens))
    report = EvalReport.from_records(records, f"sc{k}")
    report.check()
    return report


# ---------------------------------------------------------------------------
# level comparison


@dataclass
class LevelSummary:
    level: str
    accuracies: list[float]

    @property
    def mean(self) -> float:
        return float(np.mean(self.accuracies))

    @property
    def spread(self) -> float:
        return float(np.std(self.accuracies))


def summarize_levels(accuracies: Mapping[str, Sequence[float]]) -> dict:
    """Mean/spread per level, deltas between consecutive levels, seed-wise wins."""
    levels = [lv for lv in LEVEL_ORDER if lv in accuracies] + [lv for lv in accuracies if lv not in LEVEL_ORDER]
    n = {len(v) for v in accuracies.values()}
    if len(n) != 1:
        raise ValueError("every level needs the same number of seeds")
    rows = [LevelSummary(lv, [float(a) for a in accuracies[lv]]) for lv in levels]
    wins = {}
    for a in rows:
        for b in rows:
            if a.level != b.level:
                wins[f"{a.level}>{b.level}"] = int(sum(x > y for x, y in zip(a.accuracies, b.accuracies)))
    deltas = {f"{b.level}-{a.level}": b.mean - a.mean for a, b in zip(rows, rows[1:])}
    if rows:
        deltas.update({f"{r.level}-{rows[0].level}": r.mean - rows[0].mean for r in rows[2:]})
    return {
        "levels": [
            {"level": r.level, "accuracies": r.accuracies, "mean": r.mean, "spread": r.spread} for r in rows
        ],
        "ordering": [r.level for r in sorted(rows, key=lambda r: r.mean)],
        "mean_deltas": deltas,
        "wins": wins,
    }


def compare_levels(
    models: Mapping[str, Sequence[Generator]], testset: Sequence[TaskInstance]
) -> dict:
    """Evaluate each level's per-seed models greedily and summarize."""
    acc = {lv: [evaluate(m, testset).accuracy for m in ms] for lv, ms in models.items()}
    return summarize_levels(acc)


def seed_checkpoints(path, n_seeds: int | None = None) -> list[Path]:
    """``path/seed-*`` checkpoints if present, else ``path`` itself."""
    path = Path(path)
    subs = sorted(p for p in path.glob("seed-*") if p.is_dir())
    if not subs:
        return [path]
    return subs[:n_seeds] if n_seeds else subs


def compare_checkpoints(paths: Mapping[str, str | Path], testset: Sequence[TaskInstance], n_seeds: int | None = None) -> dict:
    students = {lv: [Student.load(p) for p in seed_checkpoints(path, n_seeds)] for lv, path in paths.items()}
    dims = {(s.model.cfg, tuple(s.vocab.symbols)) for ss in students.values() for s in ss}
    if len(dims) > 1:
        raise ValueError("checkpoints disagree on vocabulary or model dimensions")
    return compare_levels(students, testset)


# ---------------------------------------------------------------------------
# efficiency


def discussion_token_cost(corpus: Sequence[Mag], vocab: Vocab | None = None) -> float:
    """Mean tokens generated per example by the whole discussion (all agents, all rounds).

    Each node counts its chain tokens plus one end-of-sequence token, the same
    way student generations are counted.
    """
    vocab = vocab or Vocab()
    if not corpus:
        raise ValueError("empty corpus")
    return float(np.mean([sum(len(vocab.encode(n.reasoning)) + 1 for n in m.nodes) for m in corpus]))


def efficiency_report(reports: Mapping[str, "EvalReport | float"], reference_token_cost: float) -> dict[str, float]:
    """Reduction factor ``reference / student mean tokens`` per named report."""
    if reference_token_cost <= 0:
        raise ValueError("reference token cost must be positive")
    out = {}
    for name, rep in reports.items():
        tokens = rep.mean_generated_tokens if isinstance(rep, EvalReport) else float(rep)
        if tokens <= 0:
            raise ZeroDivisionError(f"{name}: student generated no tokens; reduction undefined")
        out[name] = reference_token_cost / tokens
    return out
