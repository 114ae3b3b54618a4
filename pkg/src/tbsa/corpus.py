"""Corpus ingestion: CoNLL-style tag files, span records, embeddings, lexicon."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence, Union

import numpy as np

from .tagscheme import (
    BOUNDARY_INDEX,
    SENTIMENTS,
    UNIFIED_INDEX,
    SpanError,
    TargetSpan,
    decode_unified,
    encode_boundary,
    encode_unified,
)

OOV_RANGE = 0.25
UNK = "<unk>"

PathLike = Union[str, Path]


class DataError(ValueError):
    """Malformed input data; ``lineno`` is 1-based when known."""

    def __init__(self, message: str, lineno: Optional[int] = None):
        if lineno is not None:
            message = f"line {lineno}: {message}"
        super().__init__(message)
        self.lineno = lineno


@dataclass(frozen=True)
class Sentence:
    tokens: tuple[str, ...]
    spans: tuple[TargetSpan, ...]
    id: str

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(self.tokens))
        object.__setattr__(self, "spans", tuple(TargetSpan(*s) for s in self.spans))
        if not self.tokens:
            raise DataError(f"sentence {self.id!r} has no tokens")
        # validates range and overlap
        encode_boundary(len(self.tokens), self.spans)

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def unified_tags(self) -> list[str]:
        return encode_unified(len(self.tokens), self.spans)

    @property
    def boundary_tags(self) -> list[str]:
        return encode_boundary(len(self.tokens), self.spans)


@dataclass
class Dataset:
    name: str
    train: list[Sentence]
    dev: list[Sentence] = field(default_factory=list)
    test: list[Sentence] = field(default_factory=list)

    def all_sentences(self) -> list[Sentence]:
        return [*self.train, *self.dev, *self.test]


@dataclass
class EmbeddingTable:
    vocabulary: dict[str, int]
    vectors: np.ndarray
    oov_range: float = OOV_RANGE
    found: int = 0

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]


@dataclass(frozen=True)
class OpinionLexicon:
    words: frozenset[str]

    def __contains__(self, token: str) -> bool:
        return token.lower() in self.words

    def __len__(self) -> int:
        return len(self.words)


# CoNLL ----------------------------------------------------------------------

def _blocks(text: str, ncols: int):
    rows: list[tuple[int, list[str]]] = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            if rows:
                yield rows
                rows = []
            continue
        cols = line.rstrip("\r\n").split("\t")
        if len(cols) != ncols:
            raise DataError(f"expected {ncols} tab-separated columns, got {len(cols)}", lineno)
        rows.append((lineno, cols))
    if rows:
        yield rows


def parse_conll(text: str, prefix: str = "s") -> list[Sentence]:
    """Parse ``token<TAB>unified-tag`` lines, blank-line separated."""
    sentences = []
    for n, rows in enumerate(_blocks(text, 2)):
        for lineno, (_, tag) in rows:
            if tag not in UNIFIED_INDEX:
                raise DataError(f"unknown tag {tag!r}", lineno)
        tokens = [tok for _, (tok, _) in rows]
        spans = decode_unified([tag for _, (_, tag) in rows])
        sentences.append(Sentence(tokens, spans, f"{prefix}{n}"))
    return sentences


def parse_joint_conll(text: str, prefix: str = "s") -> list[Sentence]:
    """Parse three-column ``token<TAB>boundary<TAB>sentiment`` lines."""
    sentences = []
    for n, rows in enumerate(_blocks(text, 3)):
        unified = []
        for lineno, (_, b, s) in rows:
            if b not in BOUNDARY_INDEX:
                raise DataError(f"unknown boundary tag {b!r}", lineno)
            if (b == "O") != (s == "O") or (s != "O" and s not in SENTIMENTS):
                raise DataError(f"boundary tag {b!r} incompatible with sentiment {s!r}", lineno)
            unified.append("O" if b == "O" else f"{b}-{s}")
        tokens = [tok for _, (tok, _, _) in rows]
        sentences.append(Sentence(tokens, decode_unified(unified), f"{prefix}{n}"))
    return sentences


def read_conll(path: PathLike, scheme: str = "unified") -> list[Sentence]:
    text = Path(path).read_text(encoding="utf-8")
    prefix = Path(path).stem + ":"
    if scheme == "unified":
        return parse_conll(text, prefix)
    if scheme == "joint":
        return parse_joint_conll(text, prefix)
    raise ValueError(f"cannot read scheme {scheme!r}")


def convert_spans_to_conll(sentences: Iterable[Sentence], scheme: str = "unified") -> str:
    if scheme not in ("unified", "boundary", "joint"):
        raise ValueError(f"unknown scheme {scheme!r}")
    blocks = []
    for sent in sentences:
        n = len(sent.tokens)
        try:
            if scheme == "boundary":
                cols = [encode_boundary(n, sent.spans)]
            else:
                unified = encode_unified(n, sent.spans)
                if scheme == "unified":
                    cols = [unified]
                else:
                    cols = [[t.split("-")[0] for t in unified],
                            ["O" if t == "O" else t.split("-")[1] for t in unified]]
        except SpanError as exc:
            raise DataError(f"sentence {sent.id!r}: {exc}") from exc
        lines = ["\t".join(row) for row in zip(sent.tokens, *cols)]
        blocks.append("\n".join(lines) + "\n")
    return "\n".join(blocks)


# span records: one JSON object per line ---------------------------------------

def read_span_records(text: str) -> list[Sentence]:
    sentences = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            spans = [TargetSpan(int(s[0]), int(s[1]), s[2] if len(s) > 2 else None)
                     for s in rec.get("spans", [])]
            sentences.append(Sentence(rec["tokens"], spans, str(rec.get("id", f"r{lineno}"))))
        except (json.JSONDecodeError, KeyError, TypeError, IndexError, ValueError) as exc:
            raise DataError(f"bad span record: {exc}", lineno) from exc
    return sentences


def write_span_records(sentences: Iterable[Sentence]) -> str:
    lines = []
    for s in sentences:
        spans = [[sp.start, sp.end] + ([sp.sentiment] if sp.sentiment else []) for sp in s.spans]
        lines.append(json.dumps({"id": s.id, "tokens": list(s.tokens), "spans": spans}))
    return "".join(line + "\n" for line in lines)


# distant opinion labels -------------------------------------------------------

def generate_oe_labels(sentence: Union[Sentence, Sequence[str]], lexicon: OpinionLexicon,
                       s: int = 3) -> np.ndarray:
    """1 where an opinion word occurs within ``s`` tokens on either side."""
    if s < 1:
        raise ValueError(f"window size must be >= 1, got {s}")
    tokens = sentence.tokens if isinstance(sentence, Sentence) else tuple(sentence)
    is_opinion = np.array([tok in lexicon for tok in tokens], dtype=bool)
    labels = np.zeros(len(tokens), dtype=np.int64)
    for t in range(len(tokens)):
        lo, hi = max(0, t - s), min(len(tokens), t + s + 1)
        window = is_opinion[lo:hi].copy()
        window[t - lo] = False
        labels[t] = int(window.any())
    return labels


def load_lexicon(path: PathLike) -> OpinionLexicon:
    words = set()
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            words.add(line.lower())
    return OpinionLexicon(frozenset(words))


# embeddings -------------------------------------------------------------------

def build_vocabulary(sentences: Iterable[Sentence]) -> list[str]:
    """``<unk>`` first, then tokens in order of first appearance."""
    vocab = {UNK: 0}
    for sent in sentences:
        for tok in sent.tokens:
            vocab.setdefault(tok, len(vocab))
    return list(vocab)


def load_embeddings(path: Optional[PathLike], vocabulary: Sequence[str], d: int,
                    seed: int = 0) -> EmbeddingTable:
    """Pre-trained vectors for ``vocabulary``; everything else ~ U(-0.25, 0.25).

    Lookup tries the exact token first and the lowercased token second.
    """
    vocab = {tok: i for i, tok in enumerate(vocabulary)}
    if len(vocab) != len(vocabulary):
        raise ValueError("vocabulary contains duplicates")
    rng = np.random.default_rng(seed)
    vectors = rng.uniform(-OOV_RANGE, OOV_RANGE, size=(len(vocab), d))
    if path is None:
        return EmbeddingTable(vocab, vectors)

    lower_wanted: dict[str, list[int]] = {}
    for tok, i in vocab.items():
        lower_wanted.setdefault(tok.lower(), []).append(i)
    exact_hit = np.zeros(len(vocab), dtype=bool)
    lower_hit = np.zeros(len(vocab), dtype=bool)

    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            fields = line.rstrip("\n").rstrip(" ").split(" ")
            if lineno == 1 and len(fields) == 2 and all(f.isdigit() for f in fields):
                continue
            if not line.strip():
                continue
            if len(fields) != d + 1:
                raise DataError(f"expected {d} values, got {len(fields) - 1}", lineno)
            tok = fields[0]
            i = vocab.get(tok)
            lows = lower_wanted.get(tok)
            if i is None and lows is None:
                continue
            try:
                vec = np.array(fields[1:], dtype=np.float64)
            except ValueError as exc:
                raise DataError(f"non-numeric vector entry ({exc})", lineno) from exc
            if i is not None:
                vectors[i] = vec
                exact_hit[i] = True
            if lows is not None and tok == tok.lower():
                for j in lows:
                    if not exact_hit[j] and not lower_hit[j]:
                        vectors[j] = vec
                        lower_hit[j] = True
    return EmbeddingTable(vocab, vectors, found=int((exact_hit | lower_hit).sum()))


def split_dev(train: Sequence[Sentence], fraction: float = 0.1,
              seed: int = 0) -> tuple[list[Sentence], list[Sentence]]:
    if not 0.0 < fraction < 1.0:
        raise ValueError(f"fraction must be in (0, 1), got {fraction}")
    n = len(train)
    if n < 2:
        raise ValueError("need at least two sentences to hold out a dev set")
    order = np.random.default_rng(seed).permutation(n)
    n_dev = min(math.ceil(fraction * n), n - 1)
    dev = [train[i] for i in order[:n_dev]]
    rest = [train[i] for i in order[n_dev:]]
    return rest, dev


def sentiment_counts(sentences: Iterable[Sentence]) -> dict[str, int]:
    counts = {s: 0 for s in SENTIMENTS}
    for sent in sentences:
        for sp in sent.spans:
            counts[sp.sentiment] += 1
    return counts


def load_synthetic() -> tuple[list[Sentence], OpinionLexicon]:
    """The bundled 20-sentence review corpus and its opinion lexicon."""
    from importlib import resources

    root = resources.files("tbsa") / "data"
    sentences = parse_conll((root / "synthetic.conll").read_text(encoding="utf-8"), "syn")
    return sentences, load_lexicon(root / "lexicon.txt")
