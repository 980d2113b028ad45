from __future__ import annotations

import json
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from magdi_lab.graph import (
    EdgeVariant,
    GraphError,
    InstanceRef,
    Structure,
    adjacency,
    build_mag,
    canonicalize,
    corpus_stats,
    deserialize,
    deserialize_corpus,
    drop_structures,
    filter_corpus,
    mag_to_dict,
    read_corpus,
    serialize,
    serialize_corpus,
    stats_from_structure_counts,
    structure_class,
    write_corpus,
)

REF = InstanceRef("q-1", "2+2 mod 10 = ?", "4")


def outputs(n_agents: int, n_rounds: int, answer="4"):
    return [[(f"chain {a} {r}", answer) for a in range(n_agents)] for r in range(n_rounds + 1)]


def mag_with(n_agents, n_rounds, answer="4"):
    return build_mag(REF, outputs(n_agents, n_rounds, answer))


@pytest.mark.parametrize(
    "rounds, nodes, edges",
    [(1, 6, 9), (0, 3, 0), (2, 9, 18), (3, 12, 27)],
)
def test_build_counts(rounds, nodes, edges):
    m = mag_with(3, rounds)
    assert len(m.nodes) == nodes
    assert len(m.edges) == edges
    assert structure_class(m) == Structure(rounds)


@given(n=st.integers(1, 6), r=st.integers(0, 3))
def test_edge_formula(n, r):
    m = mag_with(n, r)
    assert len(m.edges) == n * n * r
    assert len(m.nodes) == n * (r + 1)
    for s, t in m.edges:
        assert m.nodes[t].round == m.nodes[s].round + 1


def test_node_ids_encode_position():
    m = mag_with(3, 2)
    for node in m.nodes:
        assert node.node_id == node.agent_id + 3 * node.round


def test_labels_use_canonical_match():
    m = build_mag(REF, [[("a", " 4. "), ("b", "5"), ("c", "4!")]])
    assert [n.label for n in m.nodes] == [1, 0, 1]
    assert canonicalize("  Yes.") == "yes"


def test_missing_agent_rejected():
    per = outputs(3, 1)
    per[1] = per[1][:2]
    with pytest.raises(GraphError) as exc:
        build_mag(REF, per, n_agents=3)
    assert exc.value.code == "missing_agent"


def test_extra_output_rejected():
    per = outputs(3, 1)
    per[1].append(("x", "4"))
    with pytest.raises(GraphError) as exc:
        build_mag(REF, per, n_agents=3)
    assert exc.value.code == "duplicate_node"


def test_four_rounds_unsupported():
    with pytest.raises(GraphError) as exc:
        build_mag(REF, outputs(3, 4))
    assert exc.value.code == "unsupported_structure"


def test_corpus_stats_strategyqa_shape():
    corpus = []
    for k, count in enumerate([719, 135, 112, 34]):
        corpus += [mag_with(3, k)] * count
    stats = corpus_stats(corpus)
    assert stats.nodes_per_round == [3000, 843, 438, 102]
    assert len(set(stats.nodes_per_agent)) == 1
    assert stats.n_graphs == 1000
    assert "3000 / 843 / 438 / 102" in stats.table("strategyqa")


def test_corpus_stats_single_g0():
    stats = corpus_stats([mag_with(3, 0)])
    assert stats.nodes_per_round == [3, 0, 0, 0]


def test_csqa_round3():
    assert stats_from_structure_counts([306, 380, 105, 209]).nodes_per_round[3] == 627


def test_mixed_agents_rejected():
    with pytest.raises(GraphError) as exc:
        corpus_stats([mag_with(3, 0), mag_with(2, 0)])
    assert exc.value.code == "mixed_agents"


def test_adjacency_g0_identity():
    m = mag_with(3, 0)
    for v in (EdgeVariant.DIRECTED, EdgeVariant.UNDIRECTED):
        M, _ = adjacency(m, v)
        assert np.array_equal(M, np.eye(3))
    M, _ = adjacency(m, EdgeVariant.FULLY_CONNECTED)
    assert np.array_equal(M, np.ones((3, 3)))


def test_adjacency_g1_hand_enumerated():
    m = mag_with(3, 1)
    directed = np.array(
        [
            [1, 0, 0, 0, 0, 0],
            [0, 1, 0, 0, 0, 0],
            [0, 0, 1, 0, 0, 0],
            [1, 1, 1, 1, 0, 0],
            [1, 1, 1, 0, 1, 0],
            [1, 1, 1, 0, 0, 1],
        ],
        dtype=float,
    )
    undirected = np.array(
        [
            [1, 0, 0, 1, 1, 1],
            [0, 1, 0, 1, 1, 1],
            [0, 0, 1, 1, 1, 1],
            [1, 1, 1, 1, 0, 0],
            [1, 1, 1, 0, 1, 0],
            [1, 1, 1, 0, 0, 1],
        ],
        dtype=float,
    )
    M, norm = adjacency(m, "directed")
    assert np.array_equal(M, directed)
    assert np.allclose(norm[3], [0.25, 0.25, 0.25, 0.25, 0, 0])
    M, _ = adjacency(m, "undirected")
    assert np.array_equal(M, undirected)
    M, _ = adjacency(m, "fully_connected")
    assert np.array_equal(M, np.ones((6, 6)))


@given(n=st.integers(1, 4), r=st.integers(0, 3), v=st.sampled_from(list(EdgeVariant)))
def test_normalized_rows_sum_to_one(n, r, v):
    M, norm = adjacency(mag_with(n, r), v)
    assert np.allclose(norm.sum(axis=1), 1.0, atol=1e-15)
    assert np.all(np.diag(M) == 1)
    full, _ = adjacency(mag_with(n, r), EdgeVariant.FULLY_CONNECTED)
    assert np.all(full >= M)


def test_edge_variant_aliases():
    assert EdgeVariant.parse("Fully-Connected") is EdgeVariant.FULLY_CONNECTED


def test_filter_matches_table8_counts():
    corpus = []
    for k, count in enumerate([719, 135, 112, 34]):
        corpus += [mag_with(3, k)] * count
    assert len(drop_structures(corpus, ["G3"])) == 966
    assert len(drop_structures(corpus, [Structure.G2, Structure.G3])) == 854
    assert filter_corpus(corpus, lambda s: True) == corpus
    assert len(corpus) == 1000


def test_filter_empty_warns():
    with pytest.warns(RuntimeWarning):
        assert filter_corpus([mag_with(3, 0)], lambda s: False) == []


@given(n=st.integers(1, 4), r=st.integers(0, 3), ans=st.sampled_from(["4", "5", "x y"]))
def test_round_trip(n, r, ans):
    m = mag_with(n, r, ans)
    assert deserialize(serialize(m)) == m


def _doc(**patch):
    obj = mag_to_dict(mag_with(3, 1))
    obj.update(patch)
    return json.dumps(obj)


@pytest.mark.parametrize(
    "mutate, code",
    [
        (lambda o: o["edges"].append([4, 1]), "acyclicity"),
        (lambda o: o["nodes"].append(dict(o["nodes"][0])), "duplicate_node"),
        (lambda o: o.__setitem__("extra", 1), "schema"),
        (lambda o: o["nodes"][0].__setitem__("label", 0), "label"),
        (lambda o: o["edges"].pop(), "missing_edge"),
        (lambda o: o["edges"].append([0, 99]), "dangling_edge"),
        (lambda o: o["edges"].append(list(o["edges"][0])), "duplicate_edge"),
        (lambda o: o["nodes"][0].__setitem__("id", 7), "node_id"),
        (lambda o: o.__delitem__("n_agents"), "schema"),
    ],
)
def test_deserialize_errors(mutate, code):
    obj = mag_to_dict(mag_with(3, 1))
    mutate(obj)
    with pytest.raises(GraphError) as exc:
        deserialize(json.dumps(obj))
    assert exc.value.code == code


def test_malformed_json():
    with pytest.raises(GraphError) as exc:
        deserialize("{not json")
    assert exc.value.code == "malformed_json"


def test_corpus_file_round_trip(tmp_path):
    corpus = [mag_with(3, k) for k in range(4)]
    path = tmp_path / "c.jsonl"
    write_corpus(path, corpus)
    assert read_corpus(path) == corpus
    assert deserialize_corpus(serialize_corpus(corpus)) == corpus
    assert path.read_text().count("\n") == 4
