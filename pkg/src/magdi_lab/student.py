"""Toy decoder-only student: symbol tokenizer, causal transformer, generation.

Sequences are laid out as ``<bos> question <sep> chain <eos> <pad>...``. Only
positions that predict chain tokens (and the closing ``<eos>``) are scored.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Iterable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

PAD, BOS, SEP, EOS = "<pad>", "<bos>", "<sep>", "<eos>"
ANSWER = "answer:"
_SPECIALS = (PAD, BOS, SEP, EOS, ANSWER)
_WORDS = ("mod", "max", "of")
_CHARS = tuple("0123456789") + tuple("+-=;?,()[] ")


class UnknownSymbolError(ValueError):
    pass


class ContextOverflowError(ValueError):
    pass


class Vocab:
    """Bijection between grammar symbols and ids; longest match wins on encode."""

    def __init__(self, symbols: Sequence[str] | None = None):
        self.symbols = list(symbols) if symbols is not None else list(_SPECIALS + _WORDS + _CHARS)
        if len(set(self.symbols)) != len(self.symbols):
            raise ValueError("vocabulary symbols must be unique")
        self.index = {s: i for i, s in enumerate(self.symbols)}
        self._multi = sorted((s for s in self.symbols if len(s) > 1 and s not in (PAD, BOS, SEP, EOS)), key=len, reverse=True)
        self.pad, self.bos, self.sep, self.eos, self.answer = (self.index[s] for s in (PAD, BOS, SEP, EOS, ANSWER))

    def __len__(self) -> int:
        return len(self.symbols)

    def encode(self, text: str) -> list[int]:
        ids = []
        i = 0
        while i < len(text):
            for sym in self._multi:
                if text.startswith(sym, i):
                    ids.append(self.index[sym])
                    i += len(sym)
                    break
            else:
                ch = text[i]
                if ch not in self.index or ch in (PAD, BOS, SEP, EOS):
                    raise UnknownSymbolError(f"symbol {ch!r} at offset {i} is outside the grammar")
                ids.append(self.index[ch])
                i += 1
        return ids

    def decode(self, ids: Iterable[int]) -> str:
        return "".join(self.symbols[int(i)] for i in ids)


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    d_model: int = 128
    n_heads: int = 4
    n_layers: int = 4
    context: int = 256
    ff_mult: int = 4

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")

    def to_dict(self) -> dict:
        return asdict(self)


def param_shapes(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    d, f = cfg.d_model, cfg.d_model * cfg.ff_mult
    shapes = [("tok_emb", (cfg.vocab_size, d)), ("pos_emb", (cfg.context, d))]
    for i in range(cfg.n_layers):
        p = f"block{i}."
        shapes += [
            (p + "ln1.g", (d,)),
            (p + "ln1.b", (d,)),
            (p + "attn.w_qkv", (d, 3 * d)),
            (p + "attn.b_qkv", (3 * d,)),
            (p + "attn.w_out", (d, d)),
            (p + "attn.b_out", (d,)),
            (p + "ln2.g", (d,)),
            (p + "ln2.b", (d,)),
            (p + "ff.w1", (d, f)),
            (p + "ff.b1", (f,)),
            (p + "ff.w2", (f, d)),
            (p + "ff.b2", (d,)),
        ]
    shapes += [("ln_f.g", (d,)), ("ln_f.b", (d,))]
    return shapes


def param_count(cfg: ModelConfig) -> int:
    return int(sum(np.prod(s) for _, s in param_shapes(cfg)))


class StudentModel:
    def __init__(self, cfg: ModelConfig, params: dict[str, Tensor]):
        self.cfg = cfg
        self.params = params
        t = cfg.context
        self._mask = np.triu(np.full((t, t), -1e9), k=1)

    @classmethod
    def init(cls, cfg: ModelConfig, rng: np.random.Generator) -> "StudentModel":
        params = {}
        resid_std = 0.02 / np.sqrt(2 * cfg.n_layers)
        for name, shape in param_shapes(cfg):
            leaf = name.rsplit(".", 1)[-1]
            if leaf == "g":
                value = np.ones(shape)
            elif leaf.startswith("b"):
                value = np.zeros(shape)
            elif leaf in ("w_out", "w2"):
                value = rng.normal(0.0, resid_std, shape)
            else:
                value = rng.normal(0.0, 0.02, shape)
            params[name] = ad.parameter(value, name=name)
        return cls(cfg, params)

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def n_params(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))

    # -- forward ------------------------------------------------------------

    def forward(self, ids: np.ndarray) -> tuple[Tensor, Tensor]:
        """Logits ``(B, T, V)`` and final-layer hidden states ``(B, T, d)``."""
        ids = np.atleast_2d(np.asarray(ids, dtype=np.int64))
        b, t = ids.shape
        cfg, p = self.cfg, self.params
        if t > cfg.context:
            raise ContextOverflowError(f"sequence length {t} exceeds context {cfg.context}")
        h_, d = cfg.n_heads, cfg.d_model
        dh = d // h_
        x = ad.embedding(p["tok_emb"], ids) + p["pos_emb"][:t]
        mask = self._mask[:t, :t]
        for i in range(cfg.n_layers):
            q = f"block{i}."
            a = ad.layer_norm(x, p[q + "ln1.g"], p[q + "ln1.b"])
            qkv = ad.matmul(a, p[q + "attn.w_qkv"]) + p[q + "attn.b_qkv"]
            qkv = ad.transpose(ad.reshape(qkv, (b, t, 3, h_, dh)), (2, 0, 3, 1, 4))
            qh, kh, vh = qkv[0], qkv[1], qkv[2]
            att = ad.scale(ad.matmul(qh, ad.transpose(kh, (0, 1, 3, 2))), 1.0 / np.sqrt(dh)) + mask
            y = ad.matmul(ad.softmax(att, axis=-1), vh)
            y = ad.reshape(ad.transpose(y, (0, 2, 1, 3)), (b, t, d))
            x = x + (ad.matmul(y, p[q + "attn.w_out"]) + p[q + "attn.b_out"])
            m = ad.layer_norm(x, p[q + "ln2.g"], p[q + "ln2.b"])
            m = ad.relu(ad.matmul(m, p[q + "ff.w1"]) + p[q + "ff.b1"])
            x = x + (ad.matmul(m, p[q + "ff.w2"]) + p[q + "ff.b2"])
        hidden = ad.layer_norm(x, p["ln_f.g"], p["ln_f.b"])
        logits = ad.matmul(hidden, ad.transpose(p["tok_emb"], (1, 0)))
        return logits, hidden


@dataclass
class SeqBatch:
    """Padded ``<bos> q <sep> chain`` sequences with scoring and pooling masks."""

    ids: np.ndarray  # (B, T) input ids
    targets: np.ndarray  # (B, T) next-token ids
    loss_mask: np.ndarray  # (B, T) positions predicting chain tokens
    pool_mask: np.ndarray  # (B, T) positions holding chain tokens (no <eos>)


def make_batch(vocab: Vocab, pairs: Sequence[tuple[Sequence[int], Sequence[int]]], add_eos: bool = True) -> SeqBatch:
    """Build a batch from encoded ``(question_ids, chain_ids)`` pairs."""
    seqs, spans = [], []
    for q, x in pairs:
        if len(x) == 0:
            raise ValueError("chain must contain at least one token")
        chain = list(x) + ([vocab.eos] if add_eos else [])
        seqs.append([vocab.bos, *q, vocab.sep, *chain])
        spans.append((len(q) + 2, len(x), len(chain)))
    width = max(len(s) for s in seqs)
    b = len(seqs)
    full = np.full((b, width + 1), vocab.pad, dtype=np.int64)
    for i, s in enumerate(seqs):
        full[i, : len(s)] = s
    loss_mask = np.zeros((b, width))
    pool_mask = np.zeros((b, width))
    for i, (start, n_chain, n_scored) in enumerate(spans):
        loss_mask[i, start - 1 : start - 1 + n_scored] = 1.0
        pool_mask[i, start : start + n_chain] = 1.0
    return SeqBatch(full[:, :width], full[:, 1:], loss_mask, pool_mask)


def lm_forward(model: StudentModel, vocab: Vocab, question_ids, chain_ids, add_eos: bool = False):
    """Forward one question/chain pair; returns (logits, hidden, batch)."""
    batch = make_batch(vocab, [(question_ids, chain_ids)], add_eos=add_eos)
    logits, hidden = model.forward(batch.ids)
    return logits, hidden, batch


def token_nll(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Per-position negative log-likelihood ``(B, T)``."""
    return -ad.pick(ad.log_softmax(logits, axis=-1), targets)


def positive_loss(model: StudentModel, vocab: Vocab, examples: Sequence[tuple[str, str]]) -> Tensor:
    """Mean next-token NLL of chain tokens given the question prefix."""
    if not examples:
        raise ValueError("positive_loss: empty batch")
    batch = make_batch(vocab, [(vocab.encode(q), vocab.encode(x)) for q, x in examples])
    logits, _ = model.forward(batch.ids)
    return masked_token_mean(token_nll(logits, batch.targets), batch.loss_mask)


def masked_token_mean(nll: Tensor, mask: np.ndarray) -> Tensor:
    return ad.sum_(nll * (mask / mask.sum()))


def embed_chain(model: StudentModel, vocab: Vocab, question: str, chain: str) -> Tensor:
    """Mean of final-layer hidden states over the chain's tokens."""
    x = vocab.encode(chain)
    if not x:
        raise ValueError("embed_chain: empty chain")
    _, hidden, batch = lm_forward(model, vocab, vocab.encode(question), x, add_eos=True)
    return ad.masked_mean_pool(hidden, batch.pool_mask)[0]


@dataclass(frozen=True)
class Generation:
    chain: str
    answer: str
    n_generated_tokens: int


def extract_answer(chain: str) -> str:
    head, sep, tail = chain.rpartition(ANSWER)
    return tail.strip() if sep else ""


def generate(
    model: StudentModel,
    vocab: Vocab,
    questions: Sequence[str],
    temperature: float = 0.0,
    max_new_tokens: int = 64,
    rng: np.random.Generator | None = None,
) -> list[Generation]:
    """Decode a chain for each question (greedy when ``temperature <= 0``).

    Rows are decoded together; each stops at ``<eos>`` or after
    ``max_new_tokens`` new tokens. The token count includes the ``<eos>``.
    """
    if not questions:
        return []
    if temperature > 0 and rng is None:
        raise ValueError("sampling needs an rng")
    prompts = [[vocab.bos, *vocab.encode(q), vocab.sep] for q in questions]
    b = len(prompts)
    lengths = np.array([len(p) for p in prompts])
    cap = min(int(lengths.max()) + max_new_tokens, model.cfg.context)
    buf = np.full((b, cap), vocab.pad, dtype=np.int64)
    for i, p in enumerate(prompts):
        buf[i, : len(p)] = p
    produced: list[list[int]] = [[] for _ in range(b)]
    done = np.zeros(b, dtype=bool)
    rows = np.arange(b)
    for _ in range(max_new_tokens):
        live = rows[~done & (lengths < cap)]
        if live.size == 0:
            break
        width = int(lengths[live].max())
        logits, _ = model.forward(buf[live, :width])
        last = logits.data[np.arange(live.size), lengths[live] - 1]
        if temperature > 0:
            z = last / temperature
            z = z - z.max(axis=-1, keepdims=True)
            prob = np.exp(z)
            prob /= prob.sum(axis=-1, keepdims=True)
            nxt = np.array([rng.choice(prob.shape[-1], p=row) for row in prob])
        else:
            nxt = last.argmax(axis=-1)
        for r, tok in zip(live, nxt):
            produced[r].append(int(tok))
            buf[r, lengths[r]] = tok
            lengths[r] += 1
            if tok == vocab.eos:
                done[r] = True
    out = []
    for toks in produced:
        body = toks[:-1] if toks and toks[-1] == vocab.eos else toks
        text = "".join(vocab.symbols[t] for t in body if t not in (vocab.pad, vocab.bos, vocab.sep))
        out.append(Generation(text, extract_answer(text), len(toks)))
    return out
