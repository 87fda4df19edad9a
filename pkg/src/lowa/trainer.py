"""Three-phase training loop, optimiser and checkpoints."""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .dataset import ImageRecord, label_sets
from .losses import LossConfig, MatchingLossValue, batch_matching_loss
from .matching import MatchWeights
from .model import LOWAModel, ModelConfig
from .querygen import SAMPLERS, LabelCandidateSet, SamplerWarning, Vocabulary, load_antonyms, load_templates

log = logging.getLogger(__name__)

PHASES = ("O", "A", "F")
CSV_COLUMNS = ("step", "phase", "l1", "giou", "focal", "total")


class TrainingError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    steps_o: int = 2000
    steps_a: int = 2000
    steps_f: int = 1000
    lr_image: float = 1e-3
    lr_text: float = 1e-3
    batch_size: int = 8
    seed: int = 0
    weight_l1: float = 1.0
    weight_giou: float = 1.0
    weight_cls: float = 1.0
    loss_l1: float = 1.0
    loss_giou: float = 1.0
    loss_focal: float = 1.0
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    n_neg: int = 8
    optimizer: str = "adam"
    momentum: float = 0.9
    beta2: float = 0.999
    grad_clip: float = 1.0
    warmup: int = 100
    lr_decay: str = "cosine"

    def __post_init__(self):
        if min(self.steps_o, self.steps_a, self.steps_f) < 0:
            raise ValueError("step counts must be non-negative")
        if self.lr_image <= 0 or self.lr_text <= 0:
            raise ValueError("learning rates must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.lr_decay not in ("constant", "cosine"):
            raise ValueError(f"unknown lr_decay {self.lr_decay!r}")
        LossConfig(self.focal_alpha, self.focal_gamma)

    @property
    def total_steps(self) -> int:
        return self.steps_o + self.steps_a + self.steps_f

    def phase_at(self, step: int) -> str:
        if step < self.steps_o:
            return "O"
        if step < self.steps_o + self.steps_a:
            return "A"
        return "F"

    def loss_config(self) -> LossConfig:
        return LossConfig(self.focal_alpha, self.focal_gamma,
                          MatchWeights(self.weight_l1, self.weight_giou, self.weight_cls),
                          MatchWeights(self.loss_l1, self.loss_giou, self.loss_focal))

    def to_dict(self) -> dict:
        return asdict(self)


# Full-scale schedule (TPU pod; reference only).
REFERENCE_TRAIN = TrainConfig(steps_o=100_000, steps_a=100_000, steps_f=50_000, lr_image=1e-5,
                              lr_text=2e-6, batch_size=128)


def ablation_schedule(arm: str, cfg: TrainConfig) -> TrainConfig:
    """Drop one phase while keeping the total step budget.

    ``OA`` splits the free-text budget evenly over the first two phases, ``OF``
    gives the attribute budget to the object phase and ``AF`` gives the object
    budget to the free-text phase.
    """
    o, a, f = cfg.steps_o, cfg.steps_a, cfg.steps_f
    arms = {
        "OAF": (o, a, f),
        "OA": (o + f // 2, a + f - f // 2, 0),
        "OF": (o + a, 0, f),
        "AF": (0, a, f + o),
    }
    if arm not in arms:
        raise ValueError(f"unknown ablation arm {arm!r}; choose from {sorted(arms)}")
    so, sa, sf = arms[arm]
    return replace(cfg, steps_o=so, steps_a=sa, steps_f=sf)


def config_hash(model_cfg: ModelConfig, train_cfg: TrainConfig) -> str:
    """Hash of everything except the phase lengths (which may grow on resume)."""
    tc = {k: v for k, v in train_cfg.to_dict().items() if not k.startswith("steps_")}
    blob = json.dumps({"model": model_cfg.to_dict(), "train": tc}, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


# ---------------------------------------------------------------------------
# optimiser
# ---------------------------------------------------------------------------

class Optimizer:
    """SGD (optional momentum) or Adam over named parameter groups."""

    def __init__(self, model: LOWAModel, cfg: TrainConfig):
        self.model = model
        self.cfg = cfg
        groups = model.parameter_groups()
        self.group_of = {n: g for g, names in groups.items() for n in names}
        self.t = 0
        self.state: dict[str, dict[str, np.ndarray]] = {}

    def lr_factor(self, step: int) -> float:
        cfg = self.cfg
        warm = min(1.0, (step + 1) / cfg.warmup) if cfg.warmup > 0 else 1.0
        if cfg.lr_decay == "constant" or cfg.total_steps <= 1:
            return warm
        progress = min(step / cfg.total_steps, 1.0)
        return warm * 0.5 * (1.0 + math.cos(math.pi * progress))

    def step(self, factor: float = 1.0):
        cfg = self.cfg
        params = self.model.params
        if cfg.grad_clip > 0:
            sq = sum(float(np.sum(p.grad * p.grad)) for p in params.values() if p.grad is not None)
            norm = math.sqrt(sq)
            if norm > cfg.grad_clip:
                factor_g = cfg.grad_clip / norm
                for p in params.values():
                    if p.grad is not None:
                        p.grad = p.grad * factor_g
        self.t += 1
        for name, p in params.items():
            if p.grad is None:
                continue
            lr = (cfg.lr_image if self.group_of[name] == "image" else cfg.lr_text) * factor
            g = p.grad
            st = self.state.setdefault(name, {})
            if cfg.optimizer == "sgd":
                if cfg.momentum > 0:
                    buf = st.get("m")
                    buf = g.copy() if buf is None else cfg.momentum * buf + g
                    st["m"] = buf
                    g = buf
                p.data = p.data - lr * g
            else:
                b1, b2 = cfg.momentum, cfg.beta2
                m = st.get("m", np.zeros_like(p.data))
                v = st.get("v", np.zeros_like(p.data))
                m = b1 * m + (1 - b1) * g
                v = b2 * v + (1 - b2) * g * g
                st["m"], st["v"] = m, v
                mhat = m / (1 - b1 ** self.t)
                vhat = v / (1 - b2 ** self.t)
                p.data = p.data - lr * mhat / (np.sqrt(vhat) + 1e-8)
        self.model.clamp_logit_scale()

    def state_arrays(self):
        out = []
        for name in self.model.params:
            for slot, arr in sorted(self.state.get(name, {}).items()):
                out.append((f"opt/{slot}/{name}", arr))
        return out

    def load_state_arrays(self, arrays: dict, t: int):
        self.t = t
        self.state = {}
        for key, arr in arrays.items():
            _, slot, name = key.split("/", 2)
            self.state.setdefault(name, {})[slot] = arr.copy()


# ---------------------------------------------------------------------------
# data plumbing
# ---------------------------------------------------------------------------

@dataclass
class TrainingData:
    """Records grouped by phase plus the text resources the samplers need."""

    records: dict  # phase -> list[ImageRecord]
    candidates: LabelCandidateSet
    vocab: Vocabulary
    templates: list

    @classmethod
    def build(cls, records, templates=None, antonyms=None, extra_words: Sequence[str] = ()):
        by_phase = records if isinstance(records, dict) else {p: records for p in PHASES}
        pooled = [r for recs in by_phase.values() for r in recs]
        classes, attributes = label_sets(pooled)
        templates = templates or load_templates()
        antonyms = load_antonyms() if antonyms is None else antonyms
        candidates = LabelCandidateSet(classes, attributes, antonyms)
        vocab = build_vocab(classes, attributes, templates, extra_words)
        for recs in by_phase.values():
            for r in recs:
                r.load_pixels()
        return cls(by_phase, candidates, vocab, templates)


def build_vocab(classes, attributes, templates, extra_words=()) -> Vocabulary:
    from .querygen import COMPOSITE_TEMPLATE
    texts = list(classes) + list(attributes) + list(templates) + [COMPOSITE_TEMPLATE] + list(extra_words)
    return Vocabulary.from_texts(texts)


@dataclass
class Batch:
    records: list
    queries: list  # per image list[Query]

    @property
    def ids(self) -> list:
        return [r.id for r in self.records]


def make_batch(data: TrainingData, phase: str, step: int, cfg: TrainConfig) -> Batch:
    """Deterministic batch for ``step``: depends only on (seed, step, phase)."""
    recs = data.records.get(phase) or []
    if phase in ("A", "F") and not any(i.attributes for r in recs for i in r.instances):
        raise ValueError(f"phase {phase} needs attribute annotations")
    usable = [r for r in recs if r.instances]
    if not usable:
        raise ValueError(f"phase {phase} has no annotated images")
    rng = np.random.default_rng([cfg.seed, step])
    picks = rng.choice(len(usable), size=cfg.batch_size, replace=len(usable) < cfg.batch_size)
    sampler = SAMPLERS[phase]
    chosen = [usable[i] for i in picks]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", SamplerWarning)
        queries = [sampler(r, data.candidates, cfg.n_neg, rng, data.templates, data.vocab) for r in chosen]
    return Batch(chosen, queries)


def forward_batch(model: LOWAModel, batch: Batch):
    texts, index, per_image = [], {}, []
    for qs in batch.queries:
        rows = []
        for q in qs:
            if q.text not in index:
                index[q.text] = len(texts)
                texts.append(q.token_ids)
            rows.append(index[q.text])
        per_image.append(rows)
    qemb = model.encode_texts(texts)
    pixels = np.stack([r.pixels for r in batch.records])
    return model.forward_batch(pixels, [T.gather_rows(qemb, rows) for rows in per_image])


def train_step(model: LOWAModel, batch: Batch, phase: str, cfg: TrainConfig,
               optimizer: Optimizer | None = None, lr_factor: float = 1.0) -> MatchingLossValue:
    """Forward, matching loss, backward and one optimiser update."""
    optimizer = optimizer or Optimizer(model, cfg)
    outputs = forward_batch(model, batch)
    if not all(np.isfinite(o.boxes.data).all() and np.isfinite(o.logits.data).all() for o in outputs):
        raise TrainingError(f"non-finite model outputs in phase {phase} for batch {batch.ids}")
    loss = batch_matching_loss(outputs, [r.instances for r in batch.records], batch.queries, cfg.loss_config())
    if not np.isfinite(loss.total.item()):
        raise TrainingError(f"non-finite loss in phase {phase} for batch {batch.ids}")
    model.zero_grad()
    T.backward(loss.total)
    optimizer.step(lr_factor)
    return loss


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

@dataclass
class Checkpoint:
    params: dict
    optimizer_state: dict
    optimizer_t: int
    global_step: int
    phase: str
    config_hash: str
    model_config: dict
    train_config: dict
    vocab: list
    extra: dict = field(default_factory=dict)


def _meta_to_array(meta: dict) -> np.ndarray:
    raw = json.dumps(meta, sort_keys=True).encode("utf-8")
    return np.frombuffer(raw, dtype=np.uint8).astype(np.float64)


def _array_to_meta(arr: np.ndarray) -> dict:
    return json.loads(bytes(arr.astype(np.uint8).tolist()).decode("utf-8"))


def make_checkpoint(model: LOWAModel, optimizer: Optimizer, cfg: TrainConfig, vocab: Vocabulary,
                    step: int, extra: dict | None = None) -> Checkpoint:
    phase = cfg.phase_at(max(step - 1, 0)) if cfg.total_steps else "O"
    return Checkpoint(model.state_dict(), {k: v for k, v in optimizer.state_arrays()}, optimizer.t, step,
                      phase, config_hash(model.config, cfg), model.config.to_dict(), cfg.to_dict(),
                      list(vocab.itos), dict(extra or {}))


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    meta = {
        "global_step": ckpt.global_step,
        "phase": ckpt.phase,
        "config_hash": ckpt.config_hash,
        "model_config": ckpt.model_config,
        "train_config": ckpt.train_config,
        "vocab": ckpt.vocab,
        "optimizer_t": ckpt.optimizer_t,
        "extra": ckpt.extra,
    }
    records = [("__meta__", _meta_to_array(meta))]
    records += [(f"param/{n}", a) for n, a in ckpt.params.items()]
    records += list(ckpt.optimizer_state.items())
    T.save_archive(path, records)


def load_checkpoint(path, expect_hash: str | None = None, force: bool = False) -> Checkpoint:
    try:
        arrays = T.load_archive(path)
    except T.ArchiveError as exc:
        raise CheckpointError(f"{path}: {exc}") from None
    if "__meta__" not in arrays:
        raise CheckpointError(f"{path}: missing '__meta__' record")
    try:
        meta = _array_to_meta(arrays.pop("__meta__"))
    except (ValueError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt '__meta__' record ({exc})") from None
    if expect_hash is not None and meta["config_hash"] != expect_hash and not force:
        raise CheckpointError(f"{path}: config hash {meta['config_hash']} != expected {expect_hash} (use force)")
    params = {k[len("param/"):]: v for k, v in arrays.items() if k.startswith("param/")}
    opt = {k: v for k, v in arrays.items() if k.startswith("opt/")}
    return Checkpoint(params, opt, meta["optimizer_t"], meta["global_step"], meta["phase"], meta["config_hash"],
                      meta["model_config"], meta["train_config"], meta["vocab"], meta.get("extra", {}))


def model_from_checkpoint(ckpt: Checkpoint) -> tuple[LOWAModel, Vocabulary]:
    cfg = ModelConfig(**ckpt.model_config)
    model = LOWAModel(cfg, seed=0)
    model.load_state_dict(ckpt.params)
    vocab = Vocabulary(ckpt.vocab[2:])
    return model, vocab


def train_config_from_checkpoint(ckpt: Checkpoint) -> TrainConfig:
    known = {f.name for f in fields(TrainConfig)}
    return TrainConfig(**{k: v for k, v in ckpt.train_config.items() if k in known})


# ---------------------------------------------------------------------------
# schedule
# ---------------------------------------------------------------------------

@dataclass
class LossRecord:
    step: int
    phase: str
    l1: float
    giou: float
    focal: float
    total: float


def run_schedule(model: LOWAModel, data: TrainingData, cfg: TrainConfig, resume: Checkpoint | None = None,
                 stop_at: int | None = None, callback=None):
    """Run phase O, then A, then F; phases with zero steps are skipped.

    Returns ``(checkpoint, loss_records)``.  ``resume`` continues from a saved
    checkpoint; ``stop_at`` ends early (for interrupted-run tests).
    """
    for phase, n in zip(PHASES, (cfg.steps_o, cfg.steps_a, cfg.steps_f)):
        if n and phase in ("A", "F"):
            recs = data.records.get(phase) or []
            if not any(i.attributes for r in recs for i in r.instances):
                raise ValueError(f"phase {phase} requested but its data has no attribute annotations")
    optimizer = Optimizer(model, cfg)
    start = 0
    if resume is not None:
        model.load_state_dict(resume.params)
        optimizer.load_state_arrays(resume.optimizer_state, resume.optimizer_t)
        start = resume.global_step
    end = cfg.total_steps if stop_at is None else min(stop_at, cfg.total_steps)
    records = []
    for step in range(start, end):
        phase = cfg.phase_at(step)
        batch = make_batch(data, phase, step, cfg)
        loss = train_step(model, batch, phase, cfg, optimizer, optimizer.lr_factor(step))
        vals = loss.as_dict()
        records.append(LossRecord(step, phase, vals["l1"], vals["giou"], vals["focal"], vals["total"]))
        if callback is not None:
            callback(step, phase, loss)
        if step % 250 == 0:
            log.info("step %d phase %s total %.4f (l1 %.4f giou %.4f focal %.4f)",
                     step, phase, vals["total"], vals["l1"], vals["giou"], vals["focal"])
    return make_checkpoint(model, optimizer, cfg, data.vocab, max(end, start)), records


def write_loss_csv(records: Sequence[LossRecord], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in records:
            w.writerow([r.step, r.phase] + [repr(float(getattr(r, k))) for k in CSV_COLUMNS[2:]])


def read_loss_csv(path) -> list[LossRecord]:
    with open(path, encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    return [LossRecord(int(r["step"]), r["phase"], float(r["l1"]), float(r["giou"]), float(r["focal"]),
                       float(r["total"])) for r in rows]


def save_run(ckpt: Checkpoint, records, out_dir) -> tuple[Path, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cp, lp = out / "checkpoint.lwa", out / "loss.csv"
    save_checkpoint(ckpt, cp)
    write_loss_csv(records, lp)
    return cp, lp


def train(records, model_cfg: ModelConfig | None = None, cfg: TrainConfig | None = None, **kw):
    """Convenience wrapper: build data, model and run the whole schedule."""
    model_cfg = model_cfg or ModelConfig()
    cfg = cfg or TrainConfig()
    data = TrainingData.build(records)
    if len(data.vocab) > model_cfg.text_vocab_size:
        raise ValueError(f"vocabulary of {len(data.vocab)} words exceeds text_vocab_size={model_cfg.text_vocab_size}")
    model = LOWAModel(model_cfg, seed=cfg.seed)
    ckpt, losses = run_schedule(model, data, cfg, **kw)
    return model, data, ckpt, losses
