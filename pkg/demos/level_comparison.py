"""Train one student per distillation level on a fresh corpus and compare them.

Run with ``python3 demos/level_comparison.py [n_seeds]``. Uses the small
model from ``quickstart.json``; each seed takes about five minutes on one core.
"""

from __future__ import annotations

import json
import sys
from pathlib import Path

from magdi_lab import SimConfig, Student, TrainConfig, efficiency_report, evaluate, gen_corpus, train
from magdi_lab.evaluation import discussion_token_cost, summarize_levels
from magdi_lab.sim import TaskInstance, simulate_corpus

HERE = Path(__file__).parent


def main(n_seeds: int = 1) -> None:
    train_set, stats = gen_corpus(SimConfig(n_instances=1000, seed=7))
    test_graphs = simulate_corpus(SimConfig(n_instances=300, seed=7, split="test"))
    test_set = [TaskInstance(m.instance.id, m.instance.question, m.instance.gold, "") for m in test_graphs]
    print(stats.table("modsum"))

    base = json.loads((HERE / "quickstart.json").read_text())
    acc: dict[str, list[float]] = {}
    tokens = {}
    for level in ("r0", "cn", "an", "magdi"):
        for seed in range(1, n_seeds + 1):
            result = train(TrainConfig(**base, level=level, seed=seed), corpora=[train_set])
            report = evaluate(Student(result.model, result.vocab), test_set)
            acc.setdefault(level, []).append(report.accuracy)
            tokens[level] = report.mean_generated_tokens
            print(f"{level:<6} seed {seed}: accuracy {report.accuracy:.3f}")

    summary = summarize_levels(acc)
    for row in summary["levels"]:
        print(f"{row['level']:<6} mean {row['mean']:.3f} spread {row['spread']:.3f}")
    reduction = efficiency_report(tokens, discussion_token_cost(train_set))
    print("token reduction vs full discussion:", {k: round(v, 1) for k, v in reduction.items()})


if __name__ == "__main__":
    main(int(sys.argv[1]) if len(sys.argv) > 1 else 1)
