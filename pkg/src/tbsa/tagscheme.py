"""Boundary (BIOES) and unified (BIOES x sentiment) tag vocabularies.

Tags are plain strings (``"B"``, ``"S-NEG"``, ...). Spans are 0-based and
inclusive on both ends.
"""
from __future__ import annotations

from collections import Counter
from typing import Iterable, NamedTuple, Optional, Sequence

import numpy as np

SENTIMENTS = ("POS", "NEG", "NEU")
BOUNDARY_TAGS = ("B", "I", "E", "S", "O")
UNIFIED_TAGS = tuple(f"{b}-{s}" for s in SENTIMENTS for b in "BIES") + ("O",)

BOUNDARY_INDEX = {t: i for i, t in enumerate(BOUNDARY_TAGS)}
UNIFIED_INDEX = {t: i for i, t in enumerate(UNIFIED_TAGS)}

# B_i: unified tags coherent with boundary tag i
VALID_UNIFIED = {
    b: tuple(t for t in UNIFIED_TAGS if t.split("-")[0] == b) for b in BOUNDARY_TAGS
}

TRANSITION_MASK = np.zeros((len(BOUNDARY_TAGS), len(UNIFIED_TAGS)), dtype=bool)
for _b, _tags in VALID_UNIFIED.items():
    for _t in _tags:
        TRANSITION_MASK[BOUNDARY_INDEX[_b], UNIFIED_INDEX[_t]] = True
TRANSITION_MASK.setflags(write=False)


class TargetSpan(NamedTuple):
    start: int
    end: int
    sentiment: Optional[str] = None


class SpanError(ValueError):
    """A span set that cannot be encoded on a sentence of the given length."""


def boundary_of(tag: str) -> str:
    """Strip the sentiment part of a unified tag (``O`` stays ``O``)."""
    if tag not in UNIFIED_INDEX:
        raise KeyError(f"unknown unified tag {tag!r}")
    return tag.split("-")[0]


def sentiment_of(tag: str) -> Optional[str]:
    if tag == "O":
        return None
    if tag not in UNIFIED_INDEX:
        raise KeyError(f"unknown unified tag {tag!r}")
    return tag.split("-")[1]


def _check_spans(length: int, spans: Sequence[TargetSpan]) -> list[TargetSpan]:
    spans = [TargetSpan(*s) for s in spans]
    for s in spans:
        if not (0 <= s.start <= s.end < length):
            raise SpanError(f"span {tuple(s)} out of range for length {length}")
    ordered = sorted(spans, key=lambda s: (s.start, s.end))
    for prev, cur in zip(ordered, ordered[1:]):
        if cur.start <= prev.end:
            raise SpanError(f"span {tuple(cur)} overlaps span {tuple(prev)}")
    return spans


def encode_boundary(length: int, spans: Iterable[TargetSpan]) -> list[str]:
    tags = ["O"] * length
    for s in _check_spans(length, list(spans)):
        if s.start == s.end:
            tags[s.start] = "S"
        else:
            tags[s.start] = "B"
            for i in range(s.start + 1, s.end):
                tags[i] = "I"
            tags[s.end] = "E"
    return tags


def encode_unified(length: int, spans: Iterable[TargetSpan]) -> list[str]:
    spans = _check_spans(length, list(spans))
    for s in spans:
        if s.sentiment not in SENTIMENTS:
            raise SpanError(f"span {tuple(s)} has no valid sentiment")
    tags = encode_boundary(length, spans)
    for s in spans:
        for i in range(s.start, s.end + 1):
            tags[i] = f"{tags[i]}-{s.sentiment}"
    return tags


def _vote(sentiments: list[str]) -> str:
    # majority; ties go to the sentiment seen first in the span
    counts = Counter(sentiments)
    best = max(counts.values())
    return next(s for s in sentiments if counts[s] == best)


def _decode(boundaries: Sequence[str], sentiments: Optional[Sequence[str]]) -> list[TargetSpan]:
    spans: list[TargetSpan] = []
    start = None

    def close(end: int) -> None:
        nonlocal start
        sent = _vote(list(sentiments[start:end + 1])) if sentiments is not None else None
        spans.append(TargetSpan(start, end, sent))
        start = None

    for i, b in enumerate(boundaries):
        if b == "O":
            if start is not None:
                close(i - 1)
        elif b == "B":
            if start is not None:
                close(i - 1)
            start = i
        elif b == "I":
            if start is None:
                start = i
        else:  # E or S end the open span (or form a one-token span)
            if start is None:
                start = i
            close(i)
    if start is not None:
        close(len(boundaries) - 1)
    return spans


def decode_unified(tags: Sequence[str]) -> list[TargetSpan]:
    """Spans with sentiment from a possibly ill-formed unified sequence.

    A span opens at ``B`` or at an ``I``/``E``/``S`` outside any open span,
    and closes at ``E``, ``S`` (both inclusive), before ``O`` or ``B``, or at
    the end of the sequence. Its sentiment is the majority over its tokens.

    >>> decode_unified(["I-POS", "E-POS", "O"])
    [TargetSpan(start=0, end=1, sentiment='POS')]
    """
    bounds = [boundary_of(t) for t in tags]
    sents = [sentiment_of(t) for t in tags]
    return _decode(bounds, sents)


def decode_boundary(tags: Sequence[str]) -> list[TargetSpan]:
    for t in tags:
        if t not in BOUNDARY_INDEX:
            raise KeyError(f"unknown boundary tag {t!r}")
    return _decode(tags, None)


def init_transition_logits() -> np.ndarray:
    """Free logits whose masked row normalisation is uniform over each B_i."""
    return np.zeros(TRANSITION_MASK.shape)


def realize_transition(logits: np.ndarray) -> np.ndarray:
    """Row-stochastic transition matrix with zeros wherever the mask is off."""
    logits = np.asarray(logits, dtype=float)
    shifted = np.where(TRANSITION_MASK, logits, -np.inf)
    shifted = shifted - shifted.max(axis=1, keepdims=True)
    e = np.where(TRANSITION_MASK, np.exp(shifted), 0.0)
    return e / e.sum(axis=1, keepdims=True)


class TransitionMatrix:
    """Boundary-to-unified transition matrix with per-row masked softmax."""

    mask = TRANSITION_MASK

    def __init__(self, logits: Optional[np.ndarray] = None, trainable: bool = True):
        self.logits = init_transition_logits() if logits is None else np.array(logits, dtype=float)
        if self.logits.shape != TRANSITION_MASK.shape:
            raise ValueError(f"transition logits must have shape {TRANSITION_MASK.shape}")
        self.trainable = trainable

    @property
    def matrix(self) -> np.ndarray:
        return realize_transition(self.logits)


def init_transition(trainable: bool = True) -> TransitionMatrix:
    return TransitionMatrix(trainable=trainable)


def boundary_indices(tags: Sequence[str]) -> np.ndarray:
    return np.array([BOUNDARY_INDEX[t] for t in tags], dtype=np.int64)


def unified_indices(tags: Sequence[str]) -> np.ndarray:
    return np.array([UNIFIED_INDEX[t] for t in tags], dtype=np.int64)
