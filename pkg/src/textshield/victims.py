"""Victim text classifiers (TextCNN and LSTM) built on the autograd tape."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import autograd as ag
from . import checkpoint
from .autograd import Tape, Tensor
from .data import MAX_LEN, PAD_ID, EncodedExample, Vocabulary, encode, encode_batch
from .layers import init_dense, init_lstm, lstm_final_state
from .optim import Adam

logger = logging.getLogger(__name__)

ARCHS = ("textcnn", "lstm")


class TrainingError(RuntimeError):
    pass


@dataclass
class VictimHyper:
    emb_dim: int = 32
    filter_widths: Tuple[int, ...] = (3, 4, 5)
    n_filters: int = 100
    hidden: int = 128
    dropout: float = 0.5
    max_len: int = MAX_LEN


@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 32
    epochs: int = 5
    seed: int = 0
    betas: Tuple[float, float] = (0.9, 0.999)
    dropout: float = 0.5
    max_steps: Optional[int] = None

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")


@dataclass
class Recording:
    """A forward pass kept on a tape: leaves, embedded input and logits."""

    tape: Tape
    params: Dict[str, Tensor]
    embedded: Tensor
    logits: Tensor


def _param_shapes(arch: str, vocab_size: int, num_classes: int, hp: VictimHyper) -> Dict[str, tuple]:
    shapes = {"embedding": (vocab_size, hp.emb_dim)}
    if arch == "textcnn":
        for w in hp.filter_widths:
            shapes[f"conv{w}.w"] = (w, hp.emb_dim, hp.n_filters)
            shapes[f"conv{w}.b"] = (hp.n_filters,)
        feat = hp.n_filters * len(hp.filter_widths)
    else:
        shapes["lstm.wx"] = (hp.emb_dim, 4 * hp.hidden)
        shapes["lstm.wh"] = (hp.hidden, 4 * hp.hidden)
        shapes["lstm.b"] = (4 * hp.hidden,)
        feat = hp.hidden
    shapes["out.w"] = (feat, num_classes)
    shapes["out.b"] = (num_classes,)
    return shapes


class VictimModel:
    """Embedding -> encoder (TextCNN or LSTM) -> affine over classes."""

    def __init__(self, arch: str, vocab: Vocabulary, num_classes: int, params: Dict[str, np.ndarray], hyper: VictimHyper):
        if arch not in ARCHS:
            raise ValueError(f"unknown architecture {arch!r}")
        self.arch = arch
        self.vocab = vocab
        self.num_classes = num_classes
        self.hyper = hyper
        self.params = params
        self.truncate = True
        checkpoint.check_shapes(params, _param_shapes(arch, len(vocab), num_classes, hyper))

    @classmethod
    def create(
        cls,
        arch: str,
        vocab: Vocabulary,
        num_classes: int,
        seed: int = 0,
        embeddings: Optional[np.ndarray] = None,
        **hyper,
    ) -> "VictimModel":
        hp = VictimHyper(**hyper)
        if embeddings is not None:
            hp.emb_dim = embeddings.shape[1]
        rng = np.random.default_rng(seed)
        params: Dict[str, np.ndarray] = {}
        if embeddings is not None:
            params["embedding"] = np.array(embeddings, dtype=np.float64)
        else:
            params["embedding"] = rng.uniform(-0.25, 0.25, size=(len(vocab), hp.emb_dim))
        params["embedding"][PAD_ID] = 0.0
        if arch == "textcnn":
            for w in hp.filter_widths:
                bound = 1.0 / np.sqrt(w * hp.emb_dim)
                params[f"conv{w}.w"] = rng.uniform(-bound, bound, size=(w, hp.emb_dim, hp.n_filters))
                params[f"conv{w}.b"] = np.zeros(hp.n_filters)
            feat = hp.n_filters * len(hp.filter_widths)
        elif arch == "lstm":
            params["lstm.wx"], params["lstm.wh"], params["lstm.b"] = init_lstm(rng, hp.emb_dim, hp.hidden)
            feat = hp.hidden
        else:
            raise ValueError(f"unknown architecture {arch!r}")
        params["out.w"], params["out.b"] = init_dense(rng, feat, num_classes)
        return cls(arch, vocab, num_classes, params, hp)

    # -- forward ------------------------------------------------------------

    def logits_from_embedded(
        self,
        emb: Tensor,
        lengths: np.ndarray,
        params: Dict[str, Tensor],
        dropout_mask: Optional[np.ndarray] = None,
    ) -> Tensor:
        """Logits for an embedded batch ``(B, L, k)`` already on a tape."""
        hp = self.hyper
        length = emb.shape[1]
        longest = int(np.max(lengths))
        if self.arch == "textcnn":
            # windows lying wholly in padding all score relu(b); one copy of
            # each suffices, so cutting the tail after it changes nothing
            eff = min(length, longest + max(hp.filter_widths)) if self.truncate else length
            x = ag.slice_(emb, 1, 0, eff) if eff < length else emb
            pooled = []
            for w in hp.filter_widths:
                conv = ag.conv1d(x, params[f"conv{w}.w"], params[f"conv{w}.b"])
                pooled.append(ag.max_pool_time(ag.relu(conv)))
            feat = ag.concat(pooled, axis=-1)
        else:
            steps = min(length, longest) if self.truncate else length
            x = ag.slice_(emb, 1, 0, steps) if steps < length else emb
            xproj = ag.affine(x, params["lstm.wx"], params["lstm.b"])
            mask = np.arange(steps)[None, :] < np.asarray(lengths)[:, None]
            feat = lstm_final_state(xproj, params["lstm.wh"], hp.hidden, mask=mask)
        if dropout_mask is not None:
            feat = ag.mul(feat, emb.tape.constant(dropout_mask))
        return ag.affine(feat, params["out.w"], params["out.b"])

    def record(
        self,
        ids: np.ndarray,
        lengths: np.ndarray,
        embedded: Optional[np.ndarray] = None,
        param_grads: bool = False,
        dropout_mask: Optional[np.ndarray] = None,
    ) -> Recording:
        """Forward on a fresh tape.

        Without ``embedded`` the lookup is recorded from the embedding table;
        with it, the given ``(B, L, k)`` array becomes a grad-requiring leaf
        (used by the saliency methods).
        """
        tape = Tape()
        leaves = {k: tape.leaf(v, requires_grad=param_grads) for k, v in self.params.items()}
        if embedded is None:
            emb = ag.embedding(leaves["embedding"], ids)
        else:
            emb = tape.leaf(embedded, requires_grad=True)
        logits = self.logits_from_embedded(emb, lengths, leaves, dropout_mask)
        return Recording(tape, leaves, emb, logits)

    def embed(self, ids: np.ndarray) -> np.ndarray:
        return self.params["embedding"][ids]

    def logits(self, ids: np.ndarray, lengths: np.ndarray) -> np.ndarray:
        return self.record(np.atleast_2d(ids), np.atleast_1d(lengths)).logits.values

    def probs_batch(self, examples: Sequence[EncodedExample], batch_size: int = 256) -> np.ndarray:
        out = []
        for i in range(0, len(examples), batch_size):
            ids, lengths, _ = encode_batch(examples[i : i + batch_size])
            out.append(_softmax(self.logits(ids, lengths)))
        if not out:
            return np.zeros((0, self.num_classes))
        return np.concatenate(out, axis=0)

    def probs_tokens(self, token_lists: Sequence[Sequence[str]]) -> np.ndarray:
        return self.probs_batch([encode(t, self.vocab, max_len=self.hyper.max_len) for t in token_lists])

    def forward_probs(self, ex: EncodedExample) -> np.ndarray:
        return self.probs_batch([ex])[0]

    def predict(self, ex: EncodedExample) -> Tuple[int, float]:
        return predict_from_probs(self.forward_probs(ex))

    def encode(self, tokens: Sequence[str], label: int = 0) -> EncodedExample:
        return encode(tokens, self.vocab, label, self.hyper.max_len)

    # -- persistence --------------------------------------------------------

    def meta(self) -> dict:
        hp = asdict(self.hyper)
        hp["filter_widths"] = list(hp["filter_widths"])
        return {
            "arch": self.arch,
            "num_classes": self.num_classes,
            "hyper": hp,
            "vocab": self.vocab.tokens,
            "counts": self.vocab.counts,
        }

    def copy(self) -> "VictimModel":
        return VictimModel(self.arch, self.vocab, self.num_classes, {k: v.copy() for k, v in self.params.items()}, self.hyper)


def _softmax(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def predict_from_probs(probs: np.ndarray) -> Tuple[int, float]:
    """Argmax with ties broken toward the smaller class id."""
    label = int(np.argmax(probs))
    return label, float(probs[label])


def forward_probs(model: VictimModel, ex: EncodedExample) -> np.ndarray:
    return model.forward_probs(ex)


def predict(model: VictimModel, ex: EncodedExample) -> Tuple[int, float]:
    return model.predict(ex)


def train_victim(model: VictimModel, dataset: Sequence[EncodedExample], cfg: TrainConfig) -> Tuple[VictimModel, List[float]]:
    """Adam on mean cross-entropy; returns the model and per-epoch mean loss."""
    if not dataset:
        raise ValueError("empty training set")
    labels = np.array([e.label for e in dataset])
    if labels.max() >= model.num_classes or labels.min() < 0:
        raise ValueError("label outside class range")
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(model.params, lr=cfg.lr, betas=cfg.betas)
    curve: List[float] = []
    steps = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(dataset))
        total, seen = 0.0, 0
        for start in range(0, len(order), cfg.batch_size):
            if cfg.max_steps is not None and steps >= cfg.max_steps:
                break
            batch = [dataset[i] for i in order[start : start + cfg.batch_size]]
            ids, lengths, ys = encode_batch(batch)
            mask = None
            if cfg.dropout > 0:
                width = model.params["out.w"].shape[0]
                keep = rng.random((len(batch), width)) >= cfg.dropout
                mask = keep / (1.0 - cfg.dropout)
            rec = model.record(ids, lengths, param_grads=True, dropout_mask=mask)
            loss = ag.cross_entropy(rec.logits, ys)
            value = float(loss.values)
            if not np.isfinite(value):
                raise TrainingError(f"non-finite loss at epoch {epoch}, step {steps}")
            grads = ag.backward(rec.tape, loss.index)
            named = {k: grads[t.index] for k, t in rec.params.items() if t.index in grads}
            named["embedding"][PAD_ID] = 0.0
            opt.step(named)
            total += value * len(batch)
            seen += len(batch)
            steps += 1
        if seen:
            curve.append(total / seen)
            logger.info("victim epoch %d loss %.4f", epoch + 1, curve[-1])
    return model, curve


def accuracy(model: VictimModel, dataset: Sequence[EncodedExample]) -> float:
    probs = model.probs_batch(list(dataset))
    return float(np.mean(np.argmax(probs, axis=1) == np.array([e.label for e in dataset])))


def save_checkpoint(model: VictimModel, path) -> None:
    checkpoint.save(path, "victim", model.meta(), model.params)


def load_checkpoint(path) -> VictimModel:
    _, meta, params = checkpoint.load(path, expected_kind="victim")
    hp = dict(meta["hyper"])
    hp["filter_widths"] = tuple(hp["filter_widths"])
    vocab = Vocabulary(list(meta["vocab"]), list(meta["counts"]))
    return VictimModel(meta["arch"], vocab, int(meta["num_classes"]), params, VictimHyper(**hp))
