from __future__ import annotations

import json

import numpy as np
import pytest

from magdi_lab import autodiff as ad
from magdi_lab.distill import DistillHead, LossWeights, packed_loss
from magdi_lab.graph import build_mag
from magdi_lab.sim import SimConfig, make_instance, simulate_corpus
from magdi_lab.student import Vocab, generate
from magdi_lab.trainer import (
    Adam,
    CheckpointError,
    Level,
    TrainConfig,
    load_checkpoint,
    read_manifest,
    save_checkpoint,
    select_training_view,
    strip_head,
    train,
)

from conftest import tiny_model

TINY = dict(d_model=8, n_heads=2, n_layers=1, context=64, lr=3e-3, batch_size=2)


def g1_graph():
    inst = make_instance("modsum", (3, 5, 9))
    bad = "3+5=8; 8+9=18; 18 mod 10 = 8; answer: 8"
    return build_mag(
        inst,
        [
            [(inst.oracle_chain, "7"), (inst.oracle_chain, "7"), (bad, "8")],
            [(inst.oracle_chain, "7"), (inst.oracle_chain, "7"), (bad, "8")],
        ],
    )


def test_level_views():
    mag = g1_graph()
    r0 = select_training_view(mag, "r0")
    assert len(r0.positive_ids) == 2 and r0.negative_ids == [] and not r0.use_graph
    cn = select_training_view(mag, Level.CN)
    assert len(cn.positive_ids) == 4 and cn.negative_ids == []
    an = select_training_view(mag, "an")
    assert len(an.positive_ids) == 4 and len(an.negative_ids) == 2 and not an.use_graph
    assert select_training_view(mag, "magdi").use_graph


def test_level_data_is_nested():
    for mag in simulate_corpus(SimConfig(n_instances=40, seed=2)):
        sets = []
        for lv in ("r0", "cn", "an"):
            v = select_training_view(mag, lv)
            sets.append(set(v.positive_ids) | set(v.negative_ids))
        assert sets[0] <= sets[1] <= sets[2]


def test_level_forces_weights():
    assert TrainConfig(level="r0").weights() == LossWeights(1.0, 0.0, 0.0)
    assert TrainConfig(level="cn").weights() == LossWeights(1.0, 0.0, 0.0)
    assert TrainConfig(level="an").weights() == LossWeights(1.0, 0.1, 0.0)
    assert TrainConfig(level="magdi").weights() == LossWeights(1.0, 0.1, 0.1)


def test_config_round_trip(tmp_path):
    cfg = TrainConfig(level="an", edge_variant="undirected", epochs=2)
    path = tmp_path / "c.json"
    path.write_text(json.dumps(cfg.to_dict()))
    assert TrainConfig.load(path) == cfg
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"levle": "r0"})


def test_zero_weights_step_is_noop():
    vocab = Vocab()
    model = tiny_model(vocab)
    head = DistillHead.init(8, 8, np.random.default_rng(0))
    params = model.parameters() + head.parameters()
    before = [p.data.copy() for p in params]
    view = select_training_view(g1_graph(), "magdi")
    with ad.Tape() as tape:
        terms = packed_loss([view], model, head, vocab, LossWeights(0.0, 0.0, 0.0), np.random.default_rng(0))
    grads = tape.backward(terms.total, params) if terms.total.requires_grad else [np.zeros_like(p.data) for p in params]
    Adam(params, lr=0.1).step(grads)
    assert all(np.array_equal(a, p.data) for a, p in zip(before, params))


def test_step_count_and_log(tmp_path):
    corpus = simulate_corpus(SimConfig(n_instances=10, seed=1))
    cfg = TrainConfig(level="magdi", epochs=1, **{**TINY, "batch_size": 1})
    res = train(cfg, [corpus], out_dir=tmp_path)
    assert len(res.log) == 10
    lines = (tmp_path / "train_log.jsonl").read_text().splitlines()
    assert len(lines) == 10
    rec = json.loads(lines[0])
    assert set(rec) == {"step", "epoch", "l_pos", "l_neg", "l_int", "l_mag"}
    assert (tmp_path / "epochs" / "epoch-01" / "manifest.json").is_file()
    assert (tmp_path / "checkpoint" / "manifest.json").is_file()


def test_all_correct_corpus_reduces_to_lm():
    inst = make_instance("modsum", (1, 2, 3))
    corpus = [build_mag(inst, [[(inst.oracle_chain, inst.gold)] * 3])] * 4
    res = train(TrainConfig(level="magdi", epochs=1, **TINY), [corpus])
    for rec in res.log:
        assert rec["l_neg"] == 0.0 and rec["l_int"] == 0.0
        assert rec["l_mag"] == rec["l_pos"]


def test_multitask_mixing_counts():
    a = simulate_corpus(SimConfig(n_instances=6, seed=1))
    b = simulate_corpus(SimConfig(task="listmax", n_instances=4, seed=1))
    res = train(TrainConfig(level="r0", epochs=1, **{**TINY, "batch_size": 1}), [a, b])
    assert len(res.log) == 10


def test_learnability_smoke():
    corpus = simulate_corpus(SimConfig(n_instances=8, seed=4))
    res = train(TrainConfig(level="cn", epochs=10, **TINY), [corpus])
    first = np.mean([r["l_pos"] for r in res.log[:4]])
    last = np.mean([r["l_pos"] for r in res.log[-4:]])
    assert last < first


def test_same_seed_identical_checkpoints(tmp_path):
    corpus = simulate_corpus(SimConfig(n_instances=6, seed=1))
    cfg = TrainConfig(level="magdi", epochs=2, **TINY)
    for name in ("a", "b"):
        train(cfg, [corpus], out_dir=tmp_path / name)
    for f in ("manifest.json", "student.bin", "head.bin"):
        assert (tmp_path / "a/checkpoint" / f).read_bytes() == (tmp_path / "b/checkpoint" / f).read_bytes()
    assert (tmp_path / "a/train_log.jsonl").read_bytes() == (tmp_path / "b/train_log.jsonl").read_bytes()


def test_nonfinite_loss_aborts(monkeypatch):
    import magdi_lab.trainer as tr

    corpus = simulate_corpus(SimConfig(n_instances=2, seed=1))
    real = tr.packed_loss

    def poisoned(*args, **kwargs):
        terms = real(*args, **kwargs)
        terms.margin = float("nan")
        return terms

    monkeypatch.setattr(tr, "packed_loss", poisoned)
    with pytest.raises(tr.TrainingDivergedError) as exc:
        train(TrainConfig(level="an", epochs=1, **TINY), [corpus])
    assert exc.value.step == 1 and exc.value.term == "l_neg"
    assert "tok_emb" in exc.value.norms


# -- checkpoints ---------------------------------------------------------------


@pytest.fixture
def saved(tmp_path):
    vocab = Vocab()
    model = tiny_model(vocab, seed=6)
    head = DistillHead.init(8, 5, np.random.default_rng(1))
    path = save_checkpoint(tmp_path / "ck", model, vocab, head)
    return path, model, head, vocab


def test_round_trip_equals_float32(saved):
    path, model, head, vocab = saved
    m2, v2, h2 = load_checkpoint(path, with_head=True)
    assert v2.symbols == vocab.symbols and m2.cfg == model.cfg
    for name, p in model.params.items():
        assert np.array_equal(m2.params[name].data, p.data.astype(np.float32).astype(np.float64))
    for name, p in head.params.items():
        assert np.array_equal(h2.params[name].data, p.data.astype(np.float32))
    again = save_checkpoint(path.parent / "ck2", m2, v2, h2)
    m3, _, _ = load_checkpoint(again)
    assert all(np.array_equal(m3.params[n].data, m2.params[n].data) for n in m2.params)


def test_manifest_layout(saved):
    path, *_ = saved
    man = read_manifest(path)
    assert man["format_version"] == 1
    assert set(man["sections"]) == {"student", "head"}
    assert list(path.parent.glob(".ck.*")) == []


def test_stripped_head_generates_identically(saved):
    path, model, head, vocab = saved
    full, _, _ = load_checkpoint(path, with_head=True)
    strip_head(path)
    assert not (path / "head.bin").exists()
    bare, _, _ = load_checkpoint(path)
    qs = ["1+2 mod 10 = ?", "max of [3, 9] = ?"]
    assert generate(full, vocab, qs, max_new_tokens=8) == generate(bare, vocab, qs, max_new_tokens=8)
    with pytest.raises(CheckpointError) as exc:
        load_checkpoint(path, with_head=True)
    assert exc.value.code == "missing_section"


def _edit_manifest(path, fn):
    man = json.loads((path / "manifest.json").read_text())
    fn(man)
    (path / "manifest.json").write_text(json.dumps(man))


@pytest.mark.parametrize(
    "damage, code",
    [
        (lambda p: _edit_manifest(p, lambda m: m.__setitem__("format_version", 2)), "version_mismatch"),
        (lambda p: (p / "student.bin").write_bytes((p / "student.bin").read_bytes()[:-2]), "truncated_blob"),
        (lambda p: (p / "student.bin").write_bytes((p / "student.bin").read_bytes()[:-8]), "size_mismatch"),
        (lambda p: (p / "student.bin").unlink(), "truncated_blob"),
        (lambda p: (p / "manifest.json").unlink(), "missing_manifest"),
    ],
)
def test_checkpoint_error_codes(saved, damage, code):
    path, *_ = saved
    damage(path)
    with pytest.raises(CheckpointError) as exc:
        load_checkpoint(path)
    assert exc.value.code == code


def test_head_blob_size_mismatch(saved):
    path, *_ = saved
    (path / "head.bin").write_bytes((path / "head.bin").read_bytes() + b"\0\0\0\0")
    load_checkpoint(path)  # inference view never reads the head
    with pytest.raises(CheckpointError) as exc:
        load_checkpoint(path, with_head=True)
    assert exc.value.code == "size_mismatch"
