"""End-to-end optimization of the combined coarse + fine contrastive loss."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .data import Corpus
from .errors import ConfigError, FormatError, TrainingError
from .model import CrossModalRetriever, ModelConfig, save_checkpoint
from .objective import (
    LossWeights,
    build_mask,
    coarse_score_matrix,
    fine_score_matrix,
    loss_terms,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 8
    peak_lr: float = 1e-4
    warmup_fraction: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    lambda_c: float = 0.1
    lambda_f: float = 1.0
    delta: float = 1.0
    max_grad_norm: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.warmup_fraction < 1:
            raise ConfigError("warmup_fraction must lie in (0, 1)")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2 for a contrastive signal")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.peak_lr <= 0:
            raise ConfigError("peak_lr must be positive")
        self.loss_weights  # validates the lambdas

    @property
    def loss_weights(self) -> LossWeights:
        return LossWeights(self.lambda_c, self.lambda_f, self.delta)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


def lr_at(step: int, total_steps: int, peak_lr: float, warmup_fraction: float = 0.1) -> float:
    """Linear warmup to ``peak_lr`` over the first ``ceil(fraction * total)`` steps, then linear decay to 0."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    warmup = math.ceil(warmup_fraction * total_steps)
    if step < warmup:
        return peak_lr * step / warmup
    if total_steps == warmup:
        return peak_lr
    return peak_lr * (total_steps - step) / (total_steps - warmup)


def decays(name: str) -> bool:
    """Weight decay applies to weight matrices only, not biases, norms or CLS embeddings."""
    leaf = name.rsplit(".", 1)[-1]
    return leaf == "weight"


@dataclass
class TrainState:
    step: int
    params: dict[str, T.Tensor]
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    history: list[dict] = field(default_factory=list)

    @classmethod
    def fresh(cls, model: CrossModalRetriever) -> "TrainState":
        params = dict(model.named_parameters())
        return cls(
            step=0,
            params=params,
            m={k: np.zeros_like(p.data) for k, p in params.items()},
            v={k: np.zeros_like(p.data) for k, p in params.items()},
        )


def clip_by_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale ``grads`` in place so their joint L2 norm is at most ``max_norm``; returns the original norm."""
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / total
        for k in grads:
            grads[k] = grads[k] * scale
    return total


def optimizer_step(state: TrainState, grads: dict[str, np.ndarray], lr: float, cfg: TrainConfig) -> TrainState:
    """Adam without bias correction, weight decay added to the update (BertAdam)."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            bad = int(np.sum(~np.isfinite(g)))
            raise TrainingError(f"non-finite gradient in {name} ({bad} entries) at step {state.step}")
    for name, p in state.params.items():
        g = grads[name]
        m = state.m[name] = cfg.beta1 * state.m[name] + (1.0 - cfg.beta1) * g
        v = state.v[name] = cfg.beta2 * state.v[name] + (1.0 - cfg.beta2) * (g * g)
        update = m / (np.sqrt(v) + cfg.eps)
        if cfg.weight_decay and decays(name):
            update = update + cfg.weight_decay * p.data
        p.data = p.data - lr * update
    state.step += 1
    return state


def batch_loss(model: CrossModalRetriever, corpus: Corpus, caption_pos: np.ndarray, w: LossWeights):
    """Encode one batch and return ``(Lc, Lf, total)``; slot i pairs caption i with its image."""
    image_ids = [corpus.caption_image_ids[c] for c in caption_pos]
    image_pos = np.array([corpus.image_index(i) for i in image_ids])
    audio = model.encode_audio(corpus.signals[caption_pos])
    images = model.encode_image(corpus.roi_features[image_pos], corpus.boxes[image_pos])
    Sc = coarse_score_matrix(audio.cls_a, images.cls_i)
    Sf = fine_score_matrix(model, audio, images)
    return loss_terms(Sc, Sf, build_mask(image_ids), w)


def train_batches(corpus: Corpus, cfg: TrainConfig, rng: np.random.Generator, split: str = "train"):
    _, cap_pos = corpus.split_indices(split)
    if len(cap_pos) < 2 * cfg.batch_size:
        raise ConfigError(f"split {split!r} has {len(cap_pos)} captions; need >= {2 * cfg.batch_size}")
    n_batches = len(cap_pos) // cfg.batch_size
    for _ in range(cfg.epochs):
        order = cap_pos[rng.permutation(len(cap_pos))]
        yield [order[b * cfg.batch_size:(b + 1) * cfg.batch_size] for b in range(n_batches)]


def train(corpus: Corpus, model_cfg: ModelConfig | None = None, train_cfg: TrainConfig | None = None,
          checkpoint_path=None, history_path=None, model: CrossModalRetriever | None = None,
          split: str = "train") -> tuple[CrossModalRetriever, TrainState]:
    """Train a model on ``corpus[split]``; optionally write checkpoint and history CSV."""
    train_cfg = train_cfg or TrainConfig()
    model = model or CrossModalRetriever(model_cfg or ModelConfig())
    w = train_cfg.loss_weights
    rng = np.random.Generator(np.random.Philox(train_cfg.seed))
    epochs = list(train_batches(corpus, train_cfg, rng, split))
    total = sum(len(e) for e in epochs)
    state = TrainState.fresh(model)
    names = list(state.params)
    params = [state.params[n] for n in names]

    for epoch, batches in enumerate(epochs):
        for batch in batches:
            Lc, Lf, loss = batch_loss(model, corpus, batch, w)
            if not np.isfinite(loss.item()):
                ids = [corpus.caption_ids[c] for c in batch]
                raise TrainingError(f"non-finite loss at step {state.step}; batch captions {ids}")
            grads = dict(zip(names, T.grad(loss, params)))
            clip_by_global_norm(grads, train_cfg.max_grad_norm)
            lr = lr_at(state.step, total, train_cfg.peak_lr, train_cfg.warmup_fraction)
            state.history.append({"step": state.step, "epoch": epoch, "lr": lr,
                                  "Lc": Lc.item(), "Lf": Lf.item(), "L": loss.item()})
            optimizer_step(state, grads, lr, train_cfg)
        recent = [h["L"] for h in state.history if h["epoch"] == epoch]
        log.info("epoch %d/%d mean loss %.4f", epoch + 1, len(epochs), float(np.mean(recent)))

    if checkpoint_path is not None:
        save_checkpoint(model, checkpoint_path)
    if history_path is not None:
        write_history(state.history, history_path)
    return model, state


def epoch_means(history: list[dict]) -> list[float]:
    by_epoch: dict[int, list[float]] = {}
    for h in history:
        by_epoch.setdefault(h["epoch"], []).append(h["L"])
    return [float(np.mean(by_epoch[e])) for e in sorted(by_epoch)]


HISTORY_HEADER = "# ctf-retrieval history v1"


def write_history(history: list[dict], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        fh.write(HISTORY_HEADER + "\n")
        writer = csv.writer(fh)
        writer.writerow(["step", "lr", "Lc", "Lf", "L"])
        for h in history:
            writer.writerow([h["step"], repr(h["lr"]), repr(h["Lc"]), repr(h["Lf"]), repr(h["L"])])


def read_history(path) -> list[dict]:
    with Path(path).open() as fh:
        if fh.readline().strip() != HISTORY_HEADER:
            raise FormatError(f"{path}: not a history file")
        rows = list(csv.DictReader(fh))
    return [{"step": int(r["step"]), **{k: float(r[k]) for k in ("lr", "Lc", "Lf", "L")}} for r in rows]
