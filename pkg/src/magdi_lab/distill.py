"""Train-time head: chain scoring, margin loss, two-layer GCN, node classification.

Several graphs are packed into one forward pass. Their normalized adjacency
matrices sit on the diagonal of one block matrix so message passing never
crosses graph boundaries, and every loss term is averaged per graph before
averaging over the graphs in the batch.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .graph import EdgeVariant, Mag, adjacency
from .student import StudentModel, Vocab, make_batch, token_nll

N_CLASSES = 2


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 1.0
    beta: float = 0.1
    gamma: float = 0.1
    rho: float = 1.0

    def __post_init__(self):
        for name in ("alpha", "beta", "gamma"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if not -1.0 <= self.rho <= 1.0:
            raise ValueError("rho must lie in [-1, 1]")


def head_shapes(d_model: int, d_graph: int) -> list[tuple[str, tuple[int, ...]]]:
    return [
        ("score.w", (d_model,)),
        ("gcn.w0", (d_model, d_graph)),
        ("gcn.w1", (d_graph, d_graph)),
        ("cls.w", (d_graph, N_CLASSES)),
        ("pool.gate", (d_model,)),
    ]


class DistillHead:
    """Score projection, GCN weights and node classifier (never used at inference).

    ``pool.gate`` is only read when ``pooling == "gate"``; it starts at zero so
    gated pooling begins as the plain mean.
    """

    def __init__(self, params: dict[str, Tensor], pooling: str = "mean"):
        if pooling not in ("mean", "gate"):
            raise ValueError(f"unknown pooling {pooling!r}")
        self.params = params
        self.pooling = pooling

    @classmethod
    def init(cls, d_model: int, d_graph: int, rng: np.random.Generator, pooling: str = "mean") -> "DistillHead":
        params = {}
        for name, shape in head_shapes(d_model, d_graph):
            if name in ("cls.w", "pool.gate"):
                value = np.zeros(shape)
            else:
                value = rng.normal(0.0, 1.0 / np.sqrt(shape[0]), shape)
            params[name] = ad.parameter(value, name=name)
        return cls(params, pooling)

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    @property
    def d_model(self) -> int:
        return self.params["score.w"].shape[0]


def score_chain(h: Tensor, head: DistillHead) -> Tensor:
    """``tanh(h . w)`` for one embedding ``(d,)`` or a stack ``(n, d)``."""
    w = head.params["score.w"]
    if h.shape[-1] != w.shape[0]:
        raise ad.ShapeError(f"score_chain: incompatible shapes {h.shape} and {w.shape}")
    return ad.tanh(ad.sum_(h * w, axis=-1))


def sample_pairs(positives: Sequence, negatives: Sequence, rng: np.random.Generator) -> list[tuple]:
    """Pair every node of the larger group with one from the smaller group.

    The smaller group is used once each (in shuffled order), then resampled
    uniformly with replacement to cover the rest of the larger group.
    """
    if not positives or not negatives:
        return []
    major, minor = (positives, negatives) if len(positives) >= len(negatives) else (negatives, positives)
    fill = list(rng.permutation(len(minor)))
    extra = len(major) - len(minor)
    if extra:
        fill += list(rng.integers(0, len(minor), size=extra))
    partners = [minor[i] for i in fill]
    if major is positives:
        return list(zip(major, partners))
    return list(zip(partners, major))


def margin_loss(s_pos: Tensor, s_neg: Tensor, rho: float = 1.0) -> Tensor:
    """Mean over pairs of ``max(0, rho - s+ + s-)``."""
    if s_pos.shape != s_neg.shape:
        raise ad.ShapeError(f"margin_loss: incompatible shapes {s_pos.shape} and {s_neg.shape}")
    if s_pos.data.size == 0:
        return ad.constant(0.0)
    return ad.mean(ad.relu(ad.add(ad.sub(s_neg, s_pos), rho)))


def gcn_forward(h0: Tensor, norm_adj: np.ndarray, head: DistillHead) -> Tensor:
    """Two rounds of ``relu(D^-1 M H W)``."""
    n = h0.shape[0]
    if norm_adj.shape != (n, n):
        raise ad.ShapeError(f"gcn_forward: incompatible shapes {h0.shape} and {norm_adj.shape}")
    a = ad.constant(norm_adj)
    h = h0
    for name in ("gcn.w0", "gcn.w1"):
        w = head.params[name]
        if h.shape[-1] != w.shape[0]:
            raise ad.ShapeError(f"gcn_forward: incompatible shapes {h.shape} and {w.shape}")
        h = ad.relu(ad.matmul(a, ad.matmul(h, w)))
    return h


def node_probs(h_final: Tensor, head: DistillHead) -> Tensor:
    return ad.softmax(ad.matmul(h_final, head.params["cls.w"]), axis=-1)


def node_class_loss(h_final: Tensor, labels: Sequence[int], head: DistillHead) -> Tensor:
    """Mean softmax cross-entropy of correct/incorrect node labels."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= N_CLASSES):
        raise ValueError("node_class_loss: labels must be 0 or 1")
    logp = ad.log_softmax(ad.matmul(h_final, head.params["cls.w"]), axis=-1)
    return ad.scale(ad.mean(ad.pick(logp, labels)), -1.0)


def pool_chains(hidden: Tensor, pool_mask: np.ndarray, head: DistillHead) -> Tensor:
    if head.pooling == "mean":
        return ad.masked_mean_pool(hidden, pool_mask)
    logits = ad.sum_(hidden * head.params["pool.gate"], axis=-1) + np.where(pool_mask > 0, 0.0, -1e9)
    w = ad.softmax(logits, axis=-1)
    b, t = pool_mask.shape
    return ad.reshape(ad.matmul(ad.reshape(w, (b, 1, t)), hidden), (b, hidden.shape[-1]))


# ---------------------------------------------------------------------------
# packed multi-graph loss


@dataclass
class GraphView:
    """Which nodes of a graph feed which loss term."""

    mag: Mag
    positive_ids: list[int]
    negative_ids: list[int]
    use_graph: bool
    encoded: dict[int, list[int]] | None = None
    question: list[int] | None = None

    @property
    def node_ids(self) -> list[int]:
        if self.use_graph:
            return sorted(n.node_id for n in self.mag.nodes)
        return sorted(set(self.positive_ids) | set(self.negative_ids))


def full_view(mag: Mag, use_graph: bool = True) -> GraphView:
    return GraphView(
        mag,
        [n.node_id for n in mag.nodes if n.label == 1],
        [n.node_id for n in mag.nodes if n.label == 0],
        use_graph,
    )


@dataclass
class LossTerms:
    total: Tensor
    positive: float
    margin: float
    interaction: float
    extras: dict = field(default_factory=dict)

    def as_dict(self) -> dict[str, float]:
        return {
            "l_pos": self.positive,
            "l_neg": self.margin,
            "l_int": self.interaction,
            "l_mag": float(self.total.data),
        }


def _encode_view(view: GraphView, vocab: Vocab):
    if view.question is None:
        view.question = vocab.encode(view.mag.instance.question)
    if view.encoded is None:
        view.encoded = {n.node_id: vocab.encode(n.reasoning) for n in view.mag.nodes}
    return view.question, view.encoded


def packed_loss(
    views: Sequence[GraphView],
    model: StudentModel,
    head: DistillHead,
    vocab: Vocab,
    weights: LossWeights,
    rng: np.random.Generator,
    edge_variant: EdgeVariant | str = EdgeVariant.DIRECTED,
    couple_backbone: bool = True,
    skip_single_class: bool = True,
) -> LossTerms:
    """Weighted combination of the three objectives, averaged over graphs.

    Terms whose weight is zero are not computed. A graph without positives
    contributes nothing to the positive term, one without a positive/negative
    pair nothing to the margin term, and (with ``skip_single_class``) a graph
    whose nodes all share one label nothing to the node-classification term.
    """
    g_count = len(views)
    if g_count == 0:
        raise ValueError("packed_loss: no graphs")
    need_pos = weights.alpha > 0
    need_neg = weights.beta > 0
    need_int = weights.gamma > 0

    rows: list[tuple[int, int]] = []  # (view index, node id)
    for gi, v in enumerate(views):
        ids = v.node_ids if (need_neg or need_int) else sorted(v.positive_ids)
        rows.extend((gi, nid) for nid in ids)
    if not rows:
        zero = ad.constant(0.0)
        return LossTerms(zero, 0.0, 0.0, 0.0)
    row_of = {key: r for r, key in enumerate(rows)}
    # identical (question, chain) pairs share one forward row; followers often
    # copy a chain verbatim, so this roughly halves the work on real corpora
    uniq: dict[tuple, int] = {}
    src = np.zeros(len(rows), dtype=np.int64)
    pairs_in = []
    for r, (gi, nid) in enumerate(rows):
        q, enc = _encode_view(views[gi], vocab)
        key = (tuple(q), tuple(enc[nid]))
        if key not in uniq:
            uniq[key] = len(pairs_in)
            pairs_in.append((q, enc[nid]))
        src[r] = uniq[key]
    batch = make_batch(vocab, pairs_in)
    logits, hidden = model.forward(batch.ids)

    total = ad.constant(0.0)
    l_pos = l_neg = l_int = 0.0

    if need_pos:
        tok_w = np.zeros_like(batch.loss_mask)
        for gi, v in enumerate(views):
            u_idx = src[[row_of[(gi, nid)] for nid in v.positive_ids]]
            if not u_idx.size:
                continue
            n_tok = batch.loss_mask[u_idx].sum()
            np.add.at(tok_w, u_idx, batch.loss_mask[u_idx] / (n_tok * g_count))
        term = ad.sum_(token_nll(logits, batch.targets) * tok_w)
        l_pos = float(term.data)
        total = total + ad.scale(term, weights.alpha)

    if need_neg or need_int:
        emb = pool_chains(hidden, batch.pool_mask, head)
        if not couple_backbone:
            emb = ad.constant(emb.data)
        if len(pairs_in) < len(rows):
            emb = emb[src]

        if need_neg:
            p_rows, n_rows, p_w = [], [], []
            for gi, v in enumerate(views):
                pairs = sample_pairs(v.positive_ids, v.negative_ids, rng)
                for p, n in pairs:
                    p_rows.append(row_of[(gi, p)])
                    n_rows.append(row_of[(gi, n)])
                    p_w.append(1.0 / (len(pairs) * g_count))
            if p_rows:
                s = score_chain(emb, head)
                hinge = ad.relu(ad.add(ad.sub(s[np.array(n_rows)], s[np.array(p_rows)]), weights.rho))
                term = ad.sum_(hinge * np.array(p_w))
                l_neg = float(term.data)
                total = total + ad.scale(term, weights.beta)

        if need_int:
            n_rows_total = len(rows)
            block = np.zeros((n_rows_total, n_rows_total))
            node_w = np.zeros(n_rows_total)
            labels = np.zeros(n_rows_total, dtype=np.int64)
            for gi, v in enumerate(views):
                ids = v.node_ids
                r_idx = np.array([row_of[(gi, nid)] for nid in ids])
                if v.use_graph:
                    _, norm = adjacency(v.mag, edge_variant)
                    block[np.ix_(r_idx, r_idx)] = norm[np.ix_(ids, ids)]
                else:
                    block[r_idx, r_idx] = 1.0
                by_id = {n.node_id: n for n in v.mag.nodes}
                lab = np.array([by_id[nid].label for nid in ids])
                labels[r_idx] = lab
                if skip_single_class and len(set(lab.tolist())) < 2:
                    continue
                node_w[r_idx] = 1.0 / (len(ids) * g_count)
            if node_w.any():
                h_final = gcn_forward(emb, block, head)
                logp = ad.log_softmax(ad.matmul(h_final, head.params["cls.w"]), axis=-1)
                term = ad.scale(ad.sum_(ad.pick(logp, labels) * node_w), -1.0)
                l_int = float(term.data)
                total = total + ad.scale(term, weights.gamma)

    return LossTerms(total, l_pos, l_neg, l_int)


def combined_loss(
    mag: Mag,
    model: StudentModel,
    head: DistillHead,
    vocab: Vocab,
    weights: LossWeights = LossWeights(),
    rng: np.random.Generator | None = None,
    edge_variant: EdgeVariant | str = EdgeVariant.DIRECTED,
    couple_backbone: bool = True,
    skip_single_class: bool = True,
) -> LossTerms:
    """Single-graph loss ``alpha*L+ + beta*L- + gamma*L_I`` with its breakdown."""
    rng = rng if rng is not None else np.random.default_rng(0)
    return packed_loss(
        [full_view(mag)], model, head, vocab, weights, rng, edge_variant, couple_backbone, skip_single_class
    )
