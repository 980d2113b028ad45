"""Simulate a small discussion corpus and look at one interaction graph up close.

Run with ``python3 demos/corpus_walkthrough.py``.
"""

from __future__ import annotations

from magdi_lab import EdgeVariant, SimConfig, gen_corpus
from magdi_lab.graph import adjacency, structure_class


def show_graph(mag) -> None:
    print(f"question {mag.instance.question!r}  gold {mag.instance.gold}")
    print(f"structure {structure_class(mag).name}: {len(mag.nodes)} nodes, {len(mag.edges)} edges")
    for n in mag.nodes:
        mark = "+" if n.label else "-"
        print(f"  [{mark}] agent {n.agent_id} round {n.round}: {n.reasoning}  -> {n.answer}")
    for variant in EdgeVariant:
        m, _ = adjacency(mag, variant)
        print(f"  {variant.value:<16} adjacency nonzeros {int(m.sum())}")


def main() -> None:
    corpus, stats = gen_corpus(SimConfig(n_instances=200, seed=7))
    print(stats.table("modsum"))
    print()
    deepest = max(corpus, key=lambda m: (m.n_rounds, m.instance.id))
    show_graph(deepest)
    print()
    n_pos = sum(len(m.positives) for m in corpus)
    n_neg = sum(len(m.negatives) for m in corpus)
    print(f"correct nodes {n_pos}, incorrect nodes {n_neg}")


if __name__ == "__main__":
    main()
