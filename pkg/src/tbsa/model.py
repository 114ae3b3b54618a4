"""Stacked BiLSTM tagger with boundary guidance, sentiment consistency and
an opinion-enhanced auxiliary head.

Parameters live in a flat ``dict[str, np.ndarray]``; :func:`forward` wraps
them in autodiff leaves for one sentence and returns a :class:`ForwardTrace`.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from . import numcore as nc
from .corpus import UNK, EmbeddingTable, load_embeddings
from .tagscheme import (
    BOUNDARY_TAGS,
    TRANSITION_MASK,
    UNIFIED_TAGS,
    TargetSpan,
    boundary_indices,
    decode_unified,
    init_transition_logits,
    unified_indices,
)

NON_LSTM_RANGE = 0.2
CHECKPOINT_MAGIC = b"TBSA-CKPT 1\n"


@dataclass(frozen=True)
class ModelConfig:
    emb_dim: int = 300
    dim_t: int = 50
    dim_s: int = 50
    epsilon: float = 0.5
    window: int = 3
    dropout: float = 0.5
    use_bg: bool = True
    use_sc: bool = True
    use_oe: bool = True
    train_transition: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.dim_t % 2 or self.dim_s % 2 or self.dim_t < 2 or self.dim_s < 2:
            raise ValueError("hidden sizes must be positive and even (split over two directions)")
        if self.emb_dim < 1:
            raise ValueError("embedding dimension must be positive")
        if not 0.0 <= self.epsilon <= 1.0:
            raise ValueError(f"epsilon must be in [0, 1], got {self.epsilon}")
        if self.window < 1:
            raise ValueError(f"window size must be >= 1, got {self.window}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")

    def replace(self, **changes) -> "ModelConfig":
        return ModelConfig(**{**asdict(self), **changes})

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


LSTM_NAMES = ("lstm_t.fwd", "lstm_t.bwd", "lstm_s.fwd", "lstm_s.bwd")


def init_params(config: ModelConfig, embeddings: EmbeddingTable) -> dict[str, np.ndarray]:
    """All parameters, drawn in a fixed order from ``config.seed``.

    Every parameter exists regardless of the component flags so that the
    random stream (and hence every shared weight) does not depend on them.
    """
    if embeddings.dim != config.emb_dim:
        raise ValueError(f"embedding width {embeddings.dim} != emb_dim {config.emb_dim}")
    rng = np.random.default_rng(config.seed)
    params = {"embedding": np.array(embeddings.vectors, dtype=np.float64)}
    sizes = {
        "lstm_t": (config.emb_dim, config.dim_t // 2),
        "lstm_s": (config.dim_t, config.dim_s // 2),
    }
    for name in LSTM_NAMES:
        lstm = nc.init_lstm(*sizes[name.split(".")[0]], rng)
        params[f"{name}.w_x"], params[f"{name}.w_h"], params[f"{name}.b"] = lstm
    params["w_t"] = nc.uniform_init((len(BOUNDARY_TAGS), config.dim_t), NON_LSTM_RANGE, rng)
    params["w_s"] = nc.uniform_init((len(UNIFIED_TAGS), config.dim_s), NON_LSTM_RANGE, rng)
    params["w_o"] = nc.uniform_init((2, config.dim_t), NON_LSTM_RANGE, rng)
    params["w_g"] = nc.uniform_init((config.dim_s, config.dim_s), NON_LSTM_RANGE, rng)
    params["b_g"] = np.zeros(config.dim_s)
    params["transition"] = init_transition_logits()
    return params


@dataclass
class Model:
    config: ModelConfig
    vocab: dict[str, int]
    params: dict[str, np.ndarray]

    @classmethod
    def create(cls, config: ModelConfig, vocabulary: Sequence[str],
               embeddings: Optional[EmbeddingTable] = None) -> "Model":
        if embeddings is None:
            embeddings = load_embeddings(None, vocabulary, config.emb_dim, seed=config.seed)
        vocab = dict(embeddings.vocabulary)
        if UNK not in vocab:
            raise ValueError(f"vocabulary must contain {UNK!r}")
        return cls(config, vocab, init_params(config, embeddings))

    def trainable(self) -> list[str]:
        names = list(self.params)
        if not self.config.train_transition:
            names.remove("transition")
        return names

    def token_ids(self, tokens: Sequence[str]) -> np.ndarray:
        unk = self.vocab[UNK]
        ids = []
        for tok in tokens:
            i = self.vocab.get(tok)
            if i is None:
                i = self.vocab.get(tok.lower(), unk)
            ids.append(i)
        return np.array(ids, dtype=np.int64)

    def copy(self) -> "Model":
        return Model(self.config, dict(self.vocab), {k: v.copy() for k, v in self.params.items()})


@dataclass
class ForwardTrace:
    h_t: np.ndarray
    h_s: np.ndarray
    h_s_tilde: np.ndarray
    gate: np.ndarray
    z_t: np.ndarray
    z_s: np.ndarray
    z_trans: np.ndarray
    alpha: np.ndarray
    z_mix: np.ndarray
    z_o: np.ndarray
    nodes: dict = field(default_factory=dict, repr=False)
    leaves: dict = field(default_factory=dict, repr=False)

    def __len__(self) -> int:
        return self.z_t.shape[0]


def boundary_confidence(z_t, epsilon: float):
    """Confidence ``c = sum(z_t**2)`` and mixing weight ``alpha = epsilon * c``.

    Works on a single distribution or row-wise on a (T, 5) matrix, and on
    plain arrays as well as autodiff variables.
    """
    if isinstance(z_t, nc.Var):
        c = (z_t * z_t).sum(axis=-1)
        return c, nc.scale(c, epsilon)
    z_t = np.asarray(z_t, dtype=np.float64)
    c = (z_t * z_t).sum(axis=-1)
    return c, epsilon * c


def transition_scores(z_t, w_tr):
    """Map boundary distributions to the unified tag space: ``z_t @ W_tr``."""
    if isinstance(z_t, nc.Var) or isinstance(w_tr, nc.Var):
        return nc.matmul(z_t, w_tr)
    return np.asarray(z_t, dtype=np.float64) @ np.asarray(w_tr, dtype=np.float64)


def mix_scores(z_trans, z_s, alpha):
    """``alpha * z_trans + (1 - alpha) * z_s``; alpha is scalar or per row."""
    if any(isinstance(v, nc.Var) for v in (z_trans, z_s, alpha)):
        a = alpha if isinstance(alpha, nc.Var) else nc.Var(alpha)
        if a.value.ndim == 1:
            a = a.reshape(-1, 1)
        return a * z_trans + (1.0 - a) * z_s
    alpha = np.asarray(alpha, dtype=np.float64)
    if alpha.ndim == 1:
        alpha = alpha[:, None]
    return alpha * np.asarray(z_trans) + (1.0 - alpha) * np.asarray(z_s)


def sc_gate(h_s, w_g, b_g):
    """Gated carry-over of unified-task features.

    Returns ``(h_tilde, g)`` with ``g = sigmoid(h_s @ w_g.T + b_g)`` and
    ``h_tilde[0] = h_s[0]``.
    """
    g = nc.sigmoid(nc.linear(w_g, h_s) + b_g)
    return nc.gated_carry(h_s, g), g


def forward(model: Model, tokens: Sequence[str], training: bool = False,
            rng: Optional[np.random.Generator] = None) -> ForwardTrace:
    if len(tokens) == 0:
        raise ValueError("cannot run the model on an empty sentence")
    if training and model.config.dropout > 0 and rng is None:
        raise ValueError("training mode with dropout needs an rng")
    cfg = model.config
    leaves = {name: nc.param(value, name) for name, value in model.params.items()}
    if not cfg.train_transition:
        leaves["transition"] = nc.Var(model.params["transition"])
    lstm = {n: nc.LstmParams(leaves[f"{n}.w_x"], leaves[f"{n}.w_h"], leaves[f"{n}.b"])
            for n in LSTM_NAMES}

    x = nc.take(leaves["embedding"], model.token_ids(tokens))
    x = nc.dropout(x, cfg.dropout, rng, training)
    h_t = nc.bilstm(x, lstm["lstm_t.fwd"], lstm["lstm_t.bwd"])
    z_t = nc.softmax(nc.linear(leaves["w_t"], h_t))
    h_s = nc.bilstm(h_t, lstm["lstm_s.fwd"], lstm["lstm_s.bwd"])

    if cfg.use_sc:
        h_tilde, gate = sc_gate(h_s, leaves["w_g"], leaves["b_g"])
    else:
        h_tilde, gate = h_s, None
    z_s = nc.softmax(nc.linear(leaves["w_s"], nc.dropout(h_tilde, cfg.dropout, rng, training)))

    w_tr = nc.masked_softmax(leaves["transition"], TRANSITION_MASK)
    z_trans = transition_scores(z_t, w_tr)
    if cfg.use_bg:
        _, alpha = boundary_confidence(z_t, cfg.epsilon)
        z_mix = mix_scores(z_trans, z_s, alpha)
        alpha_value = alpha.value
    else:
        z_mix = z_s
        alpha_value = np.zeros(len(tokens))
    z_o = nc.softmax(nc.linear(leaves["w_o"], h_t)) if cfg.use_oe else None

    nodes = {"z_t": z_t, "z_s": z_s, "z_mix": z_mix, "z_o": z_o}
    T = len(tokens)
    return ForwardTrace(
        h_t=h_t.value,
        h_s=h_s.value,
        h_s_tilde=h_tilde.value,
        gate=gate.value if gate is not None else np.ones((T, cfg.dim_s)),
        z_t=z_t.value,
        z_s=z_s.value,
        z_trans=z_trans.value,
        alpha=alpha_value,
        z_mix=z_mix.value,
        z_o=z_o.value if z_o is not None else np.full((T, 2), 0.5),
        nodes=nodes,
        leaves=leaves,
    )


@dataclass
class JointLoss:
    total: nc.Var
    boundary: float
    unified: float
    opinion: float

    @property
    def value(self) -> float:
        return float(self.total.value)


def _as_indices(tags, table_fn) -> np.ndarray:
    if len(tags) and isinstance(tags[0], str):
        return table_fn(tags)
    return np.asarray(tags, dtype=np.int64)


def joint_loss(trace: ForwardTrace, gold_boundary, gold_unified, gold_oe=None,
               use_oe: bool = True) -> JointLoss:
    """Sum of the token-averaged cross-entropies of the three tasks.

    The unified loss is taken on the mixed distribution used for
    prediction. The opinion term is dropped when ``use_oe`` is false.
    """
    T = len(trace)
    yb = _as_indices(gold_boundary, boundary_indices)
    yu = _as_indices(gold_unified, unified_indices)
    if len(yb) != T or len(yu) != T:
        raise ValueError(f"gold sequences must have length {T}")
    l_t = nc.cross_entropy(trace.nodes["z_t"], yb)
    l_s = nc.cross_entropy(trace.nodes["z_mix"], yu)
    total = l_s + l_t
    l_o_value = 0.0
    if use_oe:
        if gold_oe is None or trace.nodes.get("z_o") is None:
            raise ValueError("opinion loss needs gold labels and an OE-enabled trace")
        yo = np.asarray(gold_oe, dtype=np.int64)
        if len(yo) != T:
            raise ValueError(f"opinion labels must have length {T}")
        l_o = nc.cross_entropy(trace.nodes["z_o"], yo)
        total = total + l_o
        l_o_value = float(l_o.value)
    return JointLoss(total, float(l_t.value), float(l_s.value), l_o_value)


@dataclass
class Prediction:
    unified: list[str]
    boundary: list[str]
    spans: list[TargetSpan]


def predict_from_trace(trace: ForwardTrace) -> Prediction:
    # np.argmax returns the first maximum, so ties go to the lowest tag index
    unified = [UNIFIED_TAGS[i] for i in np.argmax(trace.z_mix, axis=1)]
    boundary = [BOUNDARY_TAGS[i] for i in np.argmax(trace.z_t, axis=1)]
    return Prediction(unified, boundary, decode_unified(unified))


def predict(model: Model, tokens: Sequence[str]) -> Prediction:
    return predict_from_trace(forward(model, tokens, training=False))


# checkpoints ------------------------------------------------------------------

def save_checkpoint(model: Model, path: Union[str, Path], extra: Optional[dict] = None) -> None:
    """Write config, vocabulary and tensors to one file.

    Layout: a magic line, a decimal header length, a JSON header describing
    every tensor, then raw little-endian float64 data in header order.
    """
    tensors, offset, blobs = [], 0, []
    for name, arr in model.params.items():
        data = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        tensors.append({"name": name, "shape": list(arr.shape), "dtype": "<f8", "offset": offset})
        offset += len(data)
        blobs.append(data)
    vocab = sorted(model.vocab, key=model.vocab.__getitem__)
    header = {"config": asdict(model.config), "vocab": vocab, "tensors": tensors}
    if extra:
        header["extra"] = extra
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(f"{len(head)}\n".encode("ascii"))
        fh.write(head)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path: Union[str, Path]) -> Model:
    with open(path, "rb") as fh:
        if fh.readline() != CHECKPOINT_MAGIC:
            raise ValueError(f"{path} is not a model checkpoint")
        size = int(fh.readline())
        header = json.loads(fh.read(size).decode("utf-8"))
        payload = fh.read()
    params = {}
    for t in header["tensors"]:
        n = int(np.prod(t["shape"], dtype=np.int64))
        arr = np.frombuffer(payload, dtype=t["dtype"], count=n, offset=t["offset"])
        params[t["name"]] = arr.astype(np.float64).reshape(t["shape"])
    vocab = {tok: i for i, tok in enumerate(header["vocab"])}
    return Model(ModelConfig.from_dict(header["config"]), vocab, params)
