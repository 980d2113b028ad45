"""Training loop for the four distillation levels, plus checkpoint I/O.

Levels differ only in which nodes and loss terms they use:

========  ==========================  ==============  =====
level     positives                   negatives       edges
========  ==========================  ==============  =====
R0        correct round-0 nodes       none            no
CN        all correct nodes           none            no
AN        all correct nodes           all incorrect   no
MAGDI     all correct nodes           all incorrect   yes
========  ==========================  ==============  =====
"""

from __future__ import annotations

import enum
import json
import logging
import math
import os
import shutil
import tempfile
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .distill import DistillHead, GraphView, LossWeights, head_shapes, packed_loss
from .graph import EdgeVariant, Mag, read_corpus
from .sim import sub_rng
from .student import ModelConfig, StudentModel, Vocab, param_shapes

log = logging.getLogger(__name__)

FORMAT = "magdi-lab-checkpoint"
FORMAT_VERSION = 1


class Level(str, enum.Enum):
    R0 = "r0"
    CN = "cn"
    AN = "an"
    MAGDI = "magdi"

    @classmethod
    def parse(cls, value: "str | Level") -> "Level":
        return value if isinstance(value, cls) else cls(value.strip().lower())


@dataclass
class TrainConfig:
    level: Level = Level.MAGDI
    edge_variant: EdgeVariant = EdgeVariant.DIRECTED
    alpha: float = 1.0
    beta: float = 0.1
    gamma: float = 0.1
    rho: float = 1.0
    lr: float = 3e-4
    epochs: int = 10
    batch_size: int = 8
    seed: int = 7
    d_model: int = 128
    n_heads: int = 4
    n_layers: int = 4
    context: int = 256
    d_graph: int | None = None
    couple_backbone: bool = True
    pooling: str = "mean"
    skip_single_class: bool = True
    corpus_paths: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.level = Level.parse(self.level)
        self.edge_variant = EdgeVariant.parse(self.edge_variant)
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")

    def weights(self) -> LossWeights:
        """Loss weights with the level's inactive terms forced to zero."""
        beta = self.beta if self.level in (Level.AN, Level.MAGDI) else 0.0
        gamma = self.gamma if self.level is Level.MAGDI else 0.0
        return LossWeights(self.alpha, beta, gamma, self.rho)

    def model_config(self, vocab: Vocab) -> ModelConfig:
        return ModelConfig(len(vocab), self.d_model, self.n_heads, self.n_layers, self.context)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["level"] = self.level.value
        out["edge_variant"] = self.edge_variant.value
        return out

    @classmethod
    def from_dict(cls, obj: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(obj) - known
        if unknown:
            raise ValueError(f"unknown training config keys {sorted(unknown)}")
        return cls(**obj)

    @classmethod
    def load(cls, path) -> "TrainConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def select_training_view(mag: Mag, level: "Level | str") -> GraphView:
    level = Level.parse(level)
    correct = [n.node_id for n in mag.nodes if n.label == 1]
    wrong = [n.node_id for n in mag.nodes if n.label == 0]
    if level is Level.R0:
        return GraphView(mag, [n.node_id for n in mag.nodes if n.label == 1 and n.round == 0], [], False)
    if level is Level.CN:
        return GraphView(mag, correct, [], False)
    if level is Level.AN:
        return GraphView(mag, correct, wrong, False)
    return GraphView(mag, correct, wrong, True)


class Adam:
    def __init__(self, params: Sequence[ad.Tensor], lr: float = 3e-4, b1: float = 0.9, b2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self, grads: Sequence[np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


class TrainingDivergedError(FloatingPointError):
    def __init__(self, step: int, term: str, norms: dict[str, float]):
        worst = sorted(norms.items(), key=lambda kv: -kv[1])[:5]
        super().__init__(f"non-finite {term} at step {step}; largest parameter norms: {worst}")
        self.step, self.term, self.norms = step, term, norms


@dataclass
class TrainResult:
    model: StudentModel
    head: DistillHead
    vocab: Vocab
    config: TrainConfig
    log: list[dict]


def _load_corpora(config: TrainConfig, corpora: Sequence[Sequence[Mag]] | None) -> list[Mag]:
    if corpora is None:
        if not config.corpus_paths:
            raise ValueError("no corpus given")
        corpora = [read_corpus(p) for p in config.corpus_paths]
    mixed: list[Mag] = []
    for c in corpora:
        mixed.extend(c)
    return mixed


def init_models(config: TrainConfig, vocab: Vocab) -> tuple[StudentModel, DistillHead]:
    model = StudentModel.init(config.model_config(vocab), sub_rng(config.seed, "init/student"))
    head = DistillHead.init(
        config.d_model, config.d_graph or config.d_model, sub_rng(config.seed, "init/head"), config.pooling
    )
    return model, head


def train(
    config: TrainConfig,
    corpora: Sequence[Sequence[Mag]] | None = None,
    out_dir: str | Path | None = None,
    vocab: Vocab | None = None,
) -> TrainResult:
    """Adam over ``epochs * ceil(n_graphs / batch_size)`` steps.

    With several corpora the graphs are pooled and shuffled together each
    epoch. When ``out_dir`` is given a checkpoint is written after every epoch
    (``epochs/epoch-NN``) and at the end (``checkpoint``), and the per-step
    log goes to ``train_log.jsonl``.
    """
    vocab = vocab or Vocab()
    graphs = _load_corpora(config, corpora)
    if not graphs:
        raise ValueError("training corpus is empty")
    model, head = init_models(config, vocab)
    params = model.parameters() + head.parameters()
    opt = Adam(params, lr=config.lr)
    weights = config.weights()
    views = [select_training_view(m, config.level) for m in graphs]
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_fh = open(out / "train_log.jsonl", "w", encoding="utf-8", newline="\n")
    records: list[dict] = []
    step = 0
    n_batches = math.ceil(len(views) / config.batch_size)
    try:
        for epoch in range(1, config.epochs + 1):
            order = sub_rng(config.seed, "shuffle", epoch).permutation(len(views))
            for b in range(n_batches):
                idx = order[b * config.batch_size : (b + 1) * config.batch_size]
                step += 1
                with ad.Tape() as tape:
                    terms = packed_loss(
                        [views[i] for i in idx],
                        model,
                        head,
                        vocab,
                        weights,
                        sub_rng(config.seed, "pairs", step),
                        config.edge_variant,
                        config.couple_backbone,
                        config.skip_single_class,
                    )
                rec = {"step": step, "epoch": epoch, **terms.as_dict()}
                for key in ("l_pos", "l_neg", "l_int", "l_mag"):
                    if not math.isfinite(rec[key]):
                        norms = {p.name: float(np.linalg.norm(p.data)) for p in params}
                        raise TrainingDivergedError(step, key, norms)
                if terms.total.requires_grad:
                    grads = tape.backward(terms.total, params)
                else:
                    grads = [np.zeros_like(p.data) for p in params]
                opt.step(grads)
                records.append(rec)
                if out is not None:
                    log_fh.write(json.dumps(rec, sort_keys=True) + "\n")
            if out is not None:
                save_checkpoint(out / "epochs" / f"epoch-{epoch:02d}", model, vocab, head, config)
            log.info("epoch %d done: last l_mag=%.4f", epoch, records[-1]["l_mag"] if records else float("nan"))
        if out is not None:
            save_checkpoint(out / "checkpoint", model, vocab, head, config)
    finally:
        if out is not None:
            log_fh.close()
    return TrainResult(model, head, vocab, config, records)


# ---------------------------------------------------------------------------
# checkpoints
#
# A checkpoint is a directory: manifest.json plus one little-endian float32
# blob per section, parameters concatenated in manifest order. The "head"
# section is optional and never read by the inference loader.


class CheckpointError(ValueError):
    def __init__(self, code: str, message: str):
        super().__init__(f"[{code}] {message}")
        self.code = code


def _write_blob(path: Path, tensors: Sequence[ad.Tensor]) -> int:
    flat = np.concatenate([t.data.reshape(-1) for t in tensors]) if tensors else np.zeros(0)
    path.write_bytes(flat.astype("<f4").tobytes())
    return int(flat.size)


def save_checkpoint(
    path: str | Path,
    model: StudentModel,
    vocab: Vocab,
    head: DistillHead | None = None,
    config: TrainConfig | None = None,
) -> Path:
    """Write atomically: build in a sibling temp directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{path.name}.", dir=path.parent))
    try:
        sections = {
            "student": {
                "file": "student.bin",
                "params": [{"name": n, "shape": list(model.params[n].shape)} for n in model.params],
                "n_values": _write_blob(tmp / "student.bin", model.parameters()),
            }
        }
        if head is not None:
            sections["head"] = {
                "file": "head.bin",
                "pooling": head.pooling,
                "params": [{"name": n, "shape": list(head.params[n].shape)} for n in head.params],
                "n_values": _write_blob(tmp / "head.bin", head.parameters()),
            }
        manifest = {
            "format": FORMAT,
            "format_version": FORMAT_VERSION,
            "dtype": "<f4",
            "model": model.cfg.to_dict(),
            "vocab": vocab.symbols,
            "sections": sections,
        }
        if config is not None:
            manifest["train_config"] = config.to_dict()
        (tmp / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=1) + "\n", encoding="utf-8")
        if path.exists():
            shutil.rmtree(path)
        os.replace(tmp, path)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return path


def resolve_checkpoint(path: str | Path) -> Path:
    path = Path(path)
    if (path / "manifest.json").is_file():
        return path
    if (path / "checkpoint" / "manifest.json").is_file():
        return path / "checkpoint"
    raise CheckpointError("missing_manifest", f"no manifest.json under {path}")


def read_manifest(path: str | Path) -> dict:
    path = resolve_checkpoint(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise CheckpointError("malformed_manifest", str(exc)) from None
    if manifest.get("format") != FORMAT or manifest.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(
            "version_mismatch",
            f"expected {FORMAT} v{FORMAT_VERSION}, got {manifest.get('format')} v{manifest.get('format_version')}",
        )
    return manifest


def _read_section(root: Path, section: dict) -> dict[str, ad.Tensor]:
    blob = root / section["file"]
    if not blob.is_file():
        raise CheckpointError("truncated_blob", f"{blob.name} is missing")
    raw = blob.read_bytes()
    if len(raw) % 4:
        raise CheckpointError("truncated_blob", f"{blob.name} has {len(raw)} bytes, not a whole number of float32s")
    values = np.frombuffer(raw, dtype="<f4").astype(np.float64)
    expected = sum(int(np.prod(p["shape"])) for p in section["params"])
    if values.size != expected or values.size != section.get("n_values", expected):
        raise CheckpointError("size_mismatch", f"{blob.name} holds {values.size} values, manifest says {expected}")
    out = {}
    offset = 0
    for p in section["params"]:
        n = int(np.prod(p["shape"]))
        out[p["name"]] = ad.parameter(values[offset : offset + n].reshape(p["shape"]), name=p["name"])
        offset += n
    return out


def load_checkpoint(path: str | Path, with_head: bool = False) -> tuple[StudentModel, Vocab, DistillHead | None]:
    """Load the student (and, on request, the distillation head).

    The inference view (``with_head=False``) reads only the student section, so
    it works on checkpoints whose head section has been removed.
    """
    root = resolve_checkpoint(path)
    manifest = read_manifest(root)
    vocab = Vocab(manifest["vocab"])
    cfg = ModelConfig(**manifest["model"])
    student = manifest["sections"]["student"]
    names = [p["name"] for p in student["params"]]
    if names != [n for n, _ in param_shapes(cfg)]:
        raise CheckpointError("size_mismatch", "student parameter list does not match model dimensions")
    model = StudentModel(cfg, _read_section(root, student))
    head = None
    if with_head:
        sec = manifest["sections"].get("head")
        if sec is None:
            raise CheckpointError("missing_section", "checkpoint has no head section")
        head = DistillHead(_read_section(root, sec), sec.get("pooling", "mean"))
        expected = [n for n, _ in head_shapes(cfg.d_model, head.params["gcn.w1"].shape[0])]
        if list(head.params) != expected:
            raise CheckpointError("size_mismatch", "head parameter list does not match dimensions")
    return model, vocab, head


def strip_head(path: str | Path) -> None:
    """Remove the head section from a checkpoint in place."""
    root = resolve_checkpoint(path)
    manifest = read_manifest(root)
    sec = manifest["sections"].pop("head", None)
    if sec is not None:
        (root / sec["file"]).unlink(missing_ok=True)
    (root / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=1) + "\n", encoding="utf-8")
