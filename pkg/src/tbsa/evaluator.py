"""Exact-match span scoring and the ablation report."""
from __future__ import annotations

import json
from collections import Counter
from dataclasses import asdict, dataclass
from typing import TYPE_CHECKING, Iterable, Optional, Sequence

from .tagscheme import TargetSpan, decode_boundary

if TYPE_CHECKING:
    from .corpus import Dataset, EmbeddingTable, OpinionLexicon, Sentence
    from .model import Model, ModelConfig
    from .trainer import TrainConfig


@dataclass(frozen=True)
class PRF:
    tp: int
    n_pred: int
    n_gold: int

    @property
    def precision(self) -> float:
        return self.tp / self.n_pred if self.n_pred else 0.0

    @property
    def recall(self) -> float:
        return self.tp / self.n_gold if self.n_gold else 0.0

    @property
    def f1(self) -> float:
        p, r = self.precision, self.recall
        return 2 * p * r / (p + r) if p + r else 0.0

    def __add__(self, other: "PRF") -> "PRF":
        return PRF(self.tp + other.tp, self.n_pred + other.n_pred, self.n_gold + other.n_gold)

    def as_dict(self) -> dict:
        return {"tp": self.tp, "n_pred": self.n_pred, "n_gold": self.n_gold,
                "precision": self.precision, "recall": self.recall, "f1": self.f1}


ZERO = PRF(0, 0, 0)


def exact_match(gold: Iterable[TargetSpan], pred: Iterable[TargetSpan]) -> PRF:
    """Counts for one sentence; a prediction scores only on identical
    (start, end, sentiment), and each gold span is matched at most once."""
    gold = [tuple(g) for g in gold]
    pred = [tuple(p) for p in pred]
    tp = sum((Counter(gold) & Counter(pred)).values())
    return PRF(tp, len(pred), len(gold))


def micro_prf(pairs: Iterable[tuple[Sequence[TargetSpan], Sequence[TargetSpan]]]) -> PRF:
    total = ZERO
    for gold, pred in pairs:
        total = total + exact_match(gold, pred)
    return total


@dataclass(frozen=True)
class CorpusScores:
    unified: PRF
    boundary: PRF


def _strip(spans):
    return [TargetSpan(s.start, s.end) for s in spans]


def evaluate_corpus(model: "Model", sentences: Sequence["Sentence"]) -> CorpusScores:
    """Micro-averaged exact-match scores of the unified output, plus the
    sentiment-blind scores of the boundary head."""
    from .model import predict

    unified, boundary = ZERO, ZERO
    for sent in sentences:
        pred = predict(model, sent.tokens)
        unified = unified + exact_match(sent.spans, pred.spans)
        boundary = boundary + exact_match(_strip(sent.spans), decode_boundary(pred.boundary))
    return CorpusScores(unified, boundary)


ABLATIONS = (
    ("Base", dict(use_bg=False, use_sc=False, use_oe=False)),
    ("+BG", dict(use_bg=True, use_sc=False, use_oe=False)),
    ("+BG+SC", dict(use_bg=True, use_sc=True, use_oe=False)),
    ("+BG+OE", dict(use_bg=True, use_sc=False, use_oe=True)),
    ("Full", dict(use_bg=True, use_sc=True, use_oe=True)),
)


@dataclass
class AblationRow:
    name: str
    scores: PRF
    dev_f1: float
    best_epoch: int


def ablation_table(dataset: "Dataset", lexicon: Optional["OpinionLexicon"], base_config: "ModelConfig",
                   train_config: "TrainConfig", embeddings: Optional["EmbeddingTable"] = None,
                   eval_split: Optional[str] = None) -> list[AblationRow]:
    """Train and score the five component configurations with shared seeds.

    Scores are on the test split when it is non-empty, otherwise on dev.
    """
    from .trainer import train

    split = eval_split or ("test" if dataset.test else "dev")
    rows = []
    for name, flags in ABLATIONS:
        config = base_config.replace(**flags)
        model, history = train(dataset, lexicon if config.use_oe else None, config, train_config, embeddings)
        scores = evaluate_corpus(model, getattr(dataset, split)).unified
        rows.append(AblationRow(name, scores, history.best.dev_f1, history.best_epoch))
    return rows


def format_table(rows: Sequence[AblationRow], title: str = "") -> str:
    lines = [title] if title else []
    lines.append(f"{'Model':<10} {'P':>7} {'R':>7} {'F1':>7}")
    lines.append("-" * 34)
    for row in rows:
        s = row.scores
        lines.append(f"{row.name:<10} {100 * s.precision:7.2f} {100 * s.recall:7.2f} {100 * s.f1:7.2f}")
    return "\n".join(lines)


def report_records(dataset_name: str, rows: Sequence[AblationRow], config: Optional[dict] = None) -> str:
    out = []
    for row in rows:
        rec = {"dataset": dataset_name, "config": row.name, "P": row.scores.precision,
               "R": row.scores.recall, "F1": row.scores.f1, "tp": row.scores.tp,
               "n_pred": row.scores.n_pred, "n_gold": row.scores.n_gold,
               "dev_f1": row.dev_f1, "best_epoch": row.best_epoch}
        if config is not None:
            rec["resolved"] = config
        out.append(json.dumps(rec, sort_keys=True))
    return "".join(line + "\n" for line in out)
