"""Two reference detectors: frequency-guided word substitution (FGWS) and
word-level differential reaction (WDR).

FGWS swaps rare words for more frequent synonyms and flags the sentence
when the victim's confidence in its prediction drops by more than ``gamma``.
WDR deletes (UNKs) each word in turn, records the victim's logit margin for
the original prediction, and feeds the sorted margins to a small classifier.
Both expose ``flag(victim, example, awi4)`` so they can stand in for the
saliency detector in the defense pipeline.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import autograd as ag
from .attacks import derive_seed
from .data import MAX_LEN, UNK_ID, EncodedExample, FrequencyTable, SynonymLexicon, Vocabulary, encode_batch, synonyms_in_vocab
from .detector import DetectionItem, detection_metrics
from .optim import Adam
from .victims import TrainingError, VictimModel, predict_from_probs


@dataclass
class FgwsConfig:
    percentile: float = 0.1
    gamma: float = 0.0

    def __post_init__(self):
        if not 0 < self.percentile < 1:
            raise ValueError("percentile must lie in (0, 1)")
        if self.gamma < 0:
            raise ValueError("gamma must be non-negative")


def fgws_transform(
    tokens: Sequence[str],
    lexicon: SynonymLexicon,
    freq: FrequencyTable,
    vocab: Vocabulary,
    percentile: float,
) -> List[str]:
    """Replace every word below the frequency cut-off by its most frequent, more frequent synonym."""
    cut = freq.percentile(percentile, vocab)
    out = list(tokens)
    for i, t in enumerate(tokens):
        if freq[t] >= cut:
            continue
        better = [s for s in synonyms_in_vocab(t, lexicon, vocab) if freq[s] > freq[t]]
        if better:
            out[i] = min(better, key=lambda w: (-freq[w], w))
    return out


def fgws_score(victim: VictimModel, tokens: Sequence[str], lexicon, freq, percentile: float) -> float:
    """Drop in the victim's probability for its own prediction after the FGWS swap."""
    tokens = list(tokens)
    swapped = fgws_transform(tokens, lexicon, freq, victim.vocab, percentile)
    probs = victim.probs_tokens([tokens, swapped])
    y = predict_from_probs(probs[0])[0]
    return float(probs[0, y] - probs[1, y])


def fgws_detect(victim, ex: EncodedExample, lexicon, freq, cfg: FgwsConfig) -> Tuple[bool, float]:
    score = fgws_score(victim, ex.tokens(victim.vocab), lexicon, freq, cfg.percentile)
    return score > cfg.gamma, score


def tune_gamma(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Threshold maximising F1 on dev; candidates are 0 and the midpoints between sorted scores."""
    s = np.sort(np.unique(np.asarray(scores, dtype=np.float64)))
    cands = [0.0] + [float(x) for x in (s[:-1] + s[1:]) / 2 if x >= 0]
    best, best_f1 = 0.0, -1.0
    for g in cands:
        f1 = detection_metrics(labels, (np.asarray(scores) > g).astype(int))["f1"]
        if f1 > best_f1 + 1e-12:
            best, best_f1 = g, f1
    return best


class FgwsDetector:
    needs_awi = False

    def __init__(self, lexicon: SynonymLexicon, freq: FrequencyTable, cfg: Optional[FgwsConfig] = None):
        self.lexicon = lexicon
        self.freq = freq
        self.cfg = cfg or FgwsConfig()

    def fit(self, victim, items: Sequence[DetectionItem], percentiles: Optional[Sequence[float]] = None) -> "FgwsDetector":
        """Pick the frequency percentile (from ``percentiles``) and ``gamma`` that maximise dev F1."""
        labels = [it.label for it in items]
        best = None
        for q in percentiles or [self.cfg.percentile]:
            scores = [fgws_score(victim, it.text.split(), self.lexicon, self.freq, q) for it in items]
            gamma = tune_gamma(scores, labels)
            f1 = detection_metrics(labels, (np.asarray(scores) > gamma).astype(int))["f1"]
            if best is None or f1 > best[0] + 1e-12:
                best = (f1, q, gamma)
        self.cfg = FgwsConfig(best[1], best[2])
        return self

    def predict_items(self, victim, items: Sequence[DetectionItem]) -> np.ndarray:
        scores = [fgws_score(victim, it.text.split(), self.lexicon, self.freq, self.cfg.percentile) for it in items]
        return (np.asarray(scores) > self.cfg.gamma).astype(int)

    def flag(self, victim, ex, awi4=None):
        return fgws_detect(victim, ex, self.lexicon, self.freq, self.cfg)


# ---------------------------------------------------------------------------
# WDR


def wdr_features(victim: VictimModel, ex: EncodedExample, width: int = MAX_LEN) -> np.ndarray:
    """Sorted (descending) logit margins of the original prediction with each word UNKed, zero-padded."""
    n = ex.true_length
    base = victim.logits(ex.ids[None, :], np.array([n]))[0]
    y = int(np.argmax(base))
    feats = np.zeros(width)
    if n == 0:
        return feats
    ids = np.repeat(ex.ids[None, :], n, axis=0)
    ids[np.arange(n), np.arange(n)] = UNK_ID
    logits = victim.logits(ids, np.full(n, n))
    others = np.delete(logits, y, axis=1)
    margins = logits[:, y] - others.max(axis=1)
    feats[: min(n, width)] = np.sort(margins)[::-1][:width]
    return feats


@dataclass
class WdrModel:
    w: np.ndarray
    b: np.ndarray
    seed: int = 0
    dev_accuracy: List[float] = field(default_factory=list)

    @classmethod
    def create(cls, width: int = MAX_LEN, seed: int = 0) -> "WdrModel":
        rng = np.random.default_rng(derive_seed(seed, "wdr-init"))
        bound = np.sqrt(6.0 / (width + 2))
        return cls(rng.uniform(-bound, bound, size=(width, 2)), np.zeros(2), seed)

    def logits(self, x: np.ndarray) -> np.ndarray:
        return x @ self.w + self.b

    def predict(self, x: np.ndarray) -> np.ndarray:
        return np.argmax(self.logits(np.atleast_2d(x)), axis=1)


def wdr_train(
    model: WdrModel,
    x_train: np.ndarray,
    y_train: np.ndarray,
    x_dev: np.ndarray,
    y_dev: np.ndarray,
    epochs: int = 30,
    lr: float = 5e-4,
    batch_size: int = 32,
    patience: int = 5,
) -> WdrModel:
    """Adam on cross-entropy; keeps the best-dev epoch like the saliency detector."""
    if epochs <= 0:
        return model
    params = {"w": model.w, "b": model.b}
    opt = Adam(params, lr=lr)
    rng = np.random.default_rng(derive_seed(model.seed, "wdr-train"))
    best_acc, best, stale = -1.0, None, 0
    for epoch in range(epochs):
        order = rng.permutation(len(x_train))
        for start in range(0, len(order), batch_size):
            idx = order[start : start + batch_size]
            tape = ag.Tape()
            w, b = tape.leaf(params["w"]), tape.leaf(params["b"])
            loss = ag.cross_entropy(ag.affine(tape.constant(x_train[idx]), w, b), y_train[idx])
            if not np.isfinite(loss.values):
                raise TrainingError(f"non-finite WDR loss at epoch {epoch}")
            g = ag.backward(tape, loss.index)
            opt.step({"w": g[w.index], "b": g[b.index]})
        acc = float(np.mean(model.predict(x_dev) == y_dev))
        model.dev_accuracy.append(acc)
        if acc > best_acc:
            best_acc, stale = acc, 0
            best = (model.w.copy(), model.b.copy())
        else:
            stale += 1
            if stale >= patience:
                break
    model.w[...], model.b[...] = best
    return model


def wdr_detect(model: WdrModel, victim, ex: EncodedExample) -> Tuple[bool, float]:
    logits = model.logits(wdr_features(victim, ex))
    e = np.exp(logits - logits.max())
    p = e / e.sum()
    return bool(np.argmax(p) == 1), float(p[1])


class WdrDetector:
    needs_awi = False

    def __init__(self, model: Optional[WdrModel] = None):
        self.model = model or WdrModel.create()

    def features(self, victim, items: Sequence[DetectionItem]) -> np.ndarray:
        return np.array([wdr_features(victim, victim.encode(it.text.split())) for it in items])

    def fit(self, victim, train: Sequence[DetectionItem], dev: Sequence[DetectionItem], **kw) -> "WdrDetector":
        xt, xd = self.features(victim, train), self.features(victim, dev)
        yt = np.array([it.label for it in train])
        yd = np.array([it.label for it in dev])
        wdr_train(self.model, xt, yt, xd, yd, **kw)
        return self

    def predict_items(self, victim, items: Sequence[DetectionItem]) -> np.ndarray:
        return self.model.predict(self.features(victim, items))

    def flag(self, victim, ex, awi4=None):
        return wdr_detect(self.model, victim, ex)
