"""Training loop, learning-rate schedule and finite-difference gradient check."""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence, Union

import numpy as np

from . import numcore as nc
from .corpus import Dataset, EmbeddingTable, OpinionLexicon, Sentence, build_vocabulary, generate_oe_labels
from .evaluator import PRF, evaluate_corpus
from .model import Model, ModelConfig, forward, joint_loss
from .tagscheme import boundary_indices, unified_indices

log = logging.getLogger(__name__)


class NumericalError(RuntimeError):
    """Non-finite loss during training."""


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.9
    adam_eps: float = 1e-8
    decay: float = 0.05
    batch_size: int = 1
    clip_norm: Optional[float] = None
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.lr <= 0:
            raise ValueError(f"learning rate must be positive, got {self.lr}")
        if self.decay < 0:
            raise ValueError(f"decay must be >= 0, got {self.decay}")
        if self.batch_size < 1:
            raise ValueError(f"batch size must be >= 1, got {self.batch_size}")


def lr_at(epoch: int, config: TrainConfig) -> float:
    return config.lr / (1.0 + config.decay * epoch)


@dataclass
class EpochRecord:
    epoch: int
    loss_t: float
    loss_s: float
    loss_o: float
    dev_p: float
    dev_r: float
    dev_f1: float
    lr: float


@dataclass
class TrainHistory:
    records: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = -1

    @property
    def best(self) -> EpochRecord:
        return self.records[self.best_epoch]

    def to_jsonl(self, config: Optional[dict] = None) -> str:
        lines = []
        if config is not None:
            lines.append(json.dumps({"type": "config", **config}, sort_keys=True))
        for r in self.records:
            lines.append(json.dumps({"type": "epoch", **asdict(r)}, sort_keys=True))
        return "".join(line + "\n" for line in lines)

    def write(self, path: Union[str, Path], config: Optional[dict] = None) -> None:
        Path(path).write_text(self.to_jsonl(config), encoding="utf-8")


@dataclass
class Example:
    sentence: Sentence
    boundary: np.ndarray
    unified: np.ndarray
    opinion: Optional[np.ndarray]


def prepare(sentences: Sequence[Sentence], lexicon: Optional[OpinionLexicon], window: int) -> list[Example]:
    out = []
    for s in sentences:
        oe = generate_oe_labels(s, lexicon, window) if lexicon is not None else None
        out.append(Example(s, boundary_indices(s.boundary_tags), unified_indices(s.unified_tags), oe))
    return out


def sentence_loss(model: Model, ex: Example, rng: Optional[np.random.Generator],
                  training: bool = True):
    trace = forward(model, ex.sentence.tokens, training=training, rng=rng)
    return trace, joint_loss(trace, ex.boundary, ex.unified, ex.opinion, use_oe=model.config.use_oe)


def sentence_gradients(model: Model, ex: Example, rng: Optional[np.random.Generator],
                       training: bool = True):
    trace, loss = sentence_loss(model, ex, rng, training)
    leaves = {name: trace.leaves[name] for name in model.trainable()}
    return loss, nc.gradients(loss.total, leaves)


def train(dataset: Dataset, lexicon: Optional[OpinionLexicon], model_config: ModelConfig,
          train_config: TrainConfig, embeddings: Optional[EmbeddingTable] = None,
          on_epoch: Optional[Callable[[EpochRecord, Model], Optional[bool]]] = None,
          ) -> tuple[Model, TrainHistory]:
    """Train on ``dataset.train`` and keep the parameters with the best dev F1.

    ``on_epoch`` sees every epoch record; a truthy return ends training early.
    """
    if not dataset.train or not dataset.dev:
        raise ValueError("training needs non-empty train and dev splits")
    if model_config.use_oe and (lexicon is None or len(lexicon) == 0):
        raise ValueError("the opinion-enhanced component needs a non-empty lexicon")

    if embeddings is None:
        model = Model.create(model_config, build_vocabulary(dataset.all_sentences()))
    else:
        model = Model.create(model_config, list(embeddings.vocabulary), embeddings)
    examples = prepare(dataset.train, lexicon if model_config.use_oe else None, model_config.window)

    seeds = np.random.SeedSequence(train_config.seed).spawn(2)
    shuffle_rng = np.random.default_rng(seeds[0])
    dropout_rng = np.random.default_rng(seeds[1])
    state = nc.AdamState(beta1=train_config.beta1, beta2=train_config.beta2,
                         eps=train_config.adam_eps, lr=train_config.lr)
    history = TrainHistory()
    best: Optional[Model] = None

    for epoch in range(train_config.epochs):
        lr = lr_at(epoch, train_config)
        sums = np.zeros(3)
        order = shuffle_rng.permutation(len(examples))
        for start in range(0, len(order), train_config.batch_size):
            batch = [examples[i] for i in order[start:start + train_config.batch_size]]
            total = None
            for ex in batch:
                loss, grads = sentence_gradients(model, ex, dropout_rng)
                if not np.isfinite(loss.value):
                    raise NumericalError(f"non-finite loss on sentence {ex.sentence.id!r} (epoch {epoch})")
                sums += (loss.boundary, loss.unified, loss.opinion)
                if total is None:
                    total = grads
                else:
                    for k in total:
                        total[k] = total[k] + grads[k]
            if len(batch) > 1:
                total = {k: g / len(batch) for k, g in total.items()}
            if train_config.clip_norm is not None:
                norm = nc.global_norm(total.values())
                if norm > train_config.clip_norm:
                    total = {k: g * (train_config.clip_norm / norm) for k, g in total.items()}
            nc.adam_step(model.params, total, state, lr)

        dev = evaluate_corpus(model, dataset.dev).unified
        n = len(examples)
        rec = EpochRecord(epoch, sums[0] / n, sums[1] / n, sums[2] / n,
                          dev.precision, dev.recall, dev.f1, lr)
        history.records.append(rec)
        if history.best_epoch < 0 or rec.dev_f1 > history.best.dev_f1:
            history.best_epoch = epoch
            best = model.copy()
        log.info("epoch %d  L_T=%.4f L_S=%.4f L_O=%.4f  dev P/R/F1=%.4f/%.4f/%.4f  lr=%.2e",
                 epoch, rec.loss_t, rec.loss_s, rec.loss_o, rec.dev_p, rec.dev_r, rec.dev_f1, lr)
        if on_epoch is not None and on_epoch(rec, model):
            break
    return best, history


# gradient check ---------------------------------------------------------------

@dataclass
class GradCheckReport:
    errors: dict[str, float]
    tolerance: float

    @property
    def max_error(self) -> float:
        return max(self.errors.values())

    @property
    def passed(self) -> bool:
        return self.max_error < self.tolerance

    def format(self) -> str:
        width = max(len(k) for k in self.errors)
        lines = [f"{k:<{width}}  {v:.3e}  {'ok' if v < self.tolerance else 'FAIL'}"
                 for k, v in self.errors.items()]
        lines.append(f"max relative error {self.max_error:.3e} (tolerance {self.tolerance:g}): "
                     f"{'PASS' if self.passed else 'FAIL'}")
        return "\n".join(lines)


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """``|a - n| / max(|a|, |n|)`` on whole parameter groups (Euclidean norms)."""
    diff = np.linalg.norm(analytic - numeric)
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric))
    return 0.0 if scale == 0.0 else float(diff / scale)


def grad_check(model_config: ModelConfig, sentence: Sentence, tolerance: float = 1e-4,
               lexicon: Optional[OpinionLexicon] = None, step: float = 1e-5, seed: int = 0,
               corrupt: Optional[Callable[[dict], dict]] = None) -> GradCheckReport:
    """Compare analytic gradients of the joint loss with central differences.

    Dropout stays on with a mask that is re-drawn identically for every
    evaluation. ``corrupt`` may tamper with the analytic gradients (for
    negative controls).
    """
    model = Model.create(model_config, build_vocabulary([sentence]))
    rng = np.random.default_rng(model_config.seed + 1)
    for name in ("w_g", "b_g", "transition"):
        # break the symmetric starting point so every group has a generic gradient
        model.params[name] = model.params[name] + rng.uniform(-0.5, 0.5, model.params[name].shape)
    if model_config.use_oe and lexicon is None:
        lexicon = OpinionLexicon(frozenset([sentence.tokens[len(sentence.tokens) // 2].lower()]))
    ex = prepare([sentence], lexicon if model_config.use_oe else None, model_config.window)[0]

    def loss_value() -> float:
        return sentence_loss(model, ex, np.random.default_rng(seed))[1].value

    _, analytic = sentence_gradients(model, ex, np.random.default_rng(seed))
    if corrupt is not None:
        analytic = corrupt(analytic)
    errors = {}
    for name in model.trainable():
        p = model.params[name]
        numeric = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            orig = p[idx]
            p[idx] = orig + step
            up = loss_value()
            p[idx] = orig - step
            down = loss_value()
            p[idx] = orig
            numeric[idx] = (up - down) / (2 * step)
        errors[name] = relative_error(analytic[name], numeric)
    return GradCheckReport(errors, tolerance)
