"""Saliency-guided correction of flagged sentences.

Positions whose VG importance for the predicted class lies more than a
fraction ``beta`` of the way from the sentence's smallest to its largest
importance are treated as suspects; each suspect is replaced by the most frequent word
among itself and its in-vocabulary synonyms.  Frequent words are the ones
the victim learned well, so the swap tends to undo a rare-synonym attack
while leaving already-common words in place.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .data import FrequencyTable, SynonymLexicon, Vocabulary, synonyms_in_vocab, tokenize
from .saliency import AWIMatrix, awi_all, awi_vg
from .victims import VictimModel, predict_from_probs

STRATEGIES = ("saliency", "pos_verb", "pos_noun", "pos_noun_verb", "freq_low")


@dataclass
class CorrectorConfig:
    beta: float = 0.4
    strategy: str = "saliency"
    freq_low_percentile: float = 0.25

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown correction strategy {self.strategy!r}")
        if not 0 <= self.beta <= 1:
            raise ValueError("beta must lie in [0, 1]")
        if not 0 <= self.freq_low_percentile <= 1:
            raise ValueError("freq_low_percentile must lie in [0, 1]")


def select_suspects(column: np.ndarray, length: int, beta: float) -> List[int]:
    """Positions whose importance lies strictly above ``beta`` of the way from min to max.

    Only the first ``length`` positions (the real words) take part, both in
    the min/max and in the selection.  So ``beta=1`` never selects anything,
    and a flat column selects nothing for any ``beta``.
    """
    col = np.asarray(column, dtype=np.float64)[:length]
    if col.size == 0:
        return []
    lo, hi = float(col.min()), float(col.max())
    # lo + (hi - lo) can round below hi; pin the endpoints so beta=1 is exact
    threshold = hi if beta >= 1 else lo if beta <= 0 else beta * (hi - lo) + lo
    return [int(i) for i in np.flatnonzero(col > threshold)]


def best_replacement(word: str, lexicon: SynonymLexicon, freq: FrequencyTable, vocab: Vocabulary) -> str:
    """Most frequent of the word itself and its in-vocabulary synonyms.

    Ties go to the lexicographically smaller word; a word with no
    candidates at all is left as it is.
    """
    cands = set(synonyms_in_vocab(word, lexicon, vocab))
    if word in vocab:
        cands.add(word)
    if not cands:
        return word
    return min(cands, key=lambda w: (-freq[w], w))


def correct(
    tokens: Sequence[str],
    suspects: Sequence[int],
    lexicon: SynonymLexicon,
    freq: FrequencyTable,
    vocab: Vocabulary,
) -> List[str]:
    out = list(tokens)
    for i in suspects:
        out[i] = best_replacement(tokens[i], lexicon, freq, vocab)
    return out


def baseline_strategies(
    tokens: Sequence[str],
    strategy: str,
    lexicon: SynonymLexicon,
    freq: FrequencyTable,
    vocab: Optional[Vocabulary] = None,
    percentile: float = 0.25,
) -> List[int]:
    """Suspect positions chosen without saliency: by part of speech or by rarity."""
    if strategy == "freq_low":
        if percentile <= 0:
            return []  # an empty lower tail, even for out-of-vocabulary words
        cut = freq.percentile(percentile, vocab)
        return [i for i, t in enumerate(tokens) if freq[t] < cut]
    wanted = {"pos_verb": {"verb"}, "pos_noun": {"noun"}, "pos_noun_verb": {"noun", "verb"}}.get(strategy)
    if wanted is None:
        raise ValueError(f"{strategy!r} is not a non-saliency strategy")
    if not lexicon.tagged:
        raise ValueError(f"strategy {strategy!r} needs a POS-tagged lexicon")
    return [i for i, t in enumerate(tokens) if lexicon.pos(t) in wanted]


@dataclass
class DefenseOutcome:
    text: str
    verdict: str
    label: int
    confidence: float
    detector_score: float
    corrected: Optional[str] = None
    suspects: List[Tuple[int, str, float]] = field(default_factory=list)
    original_label: Optional[int] = None

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


class AlwaysBenign:
    """Detector stand-in that never flags; the defense reduces to the bare victim."""

    needs_awi = False

    def flag(self, victim, ex, awi4):
        return False, 0.0


class AlwaysAdversarial:
    """Detector stand-in that flags everything; isolates the corrector."""

    needs_awi = False

    def flag(self, victim, ex, awi4):
        return True, 1.0


def suspects_for(
    victim: VictimModel,
    tokens: Sequence[str],
    ex,
    cfg: CorrectorConfig,
    lexicon: SynonymLexicon,
    freq: FrequencyTable,
    vg: Optional[AWIMatrix] = None,
    target: str = "logit",
) -> List[Tuple[int, str, float]]:
    if cfg.strategy == "saliency":
        vg = vg or awi_vg(victim, ex, target=target)
        col = vg.column()
        return [(i, tokens[i], float(col[i])) for i in select_suspects(col, ex.true_length, cfg.beta)]
    idx = baseline_strategies(tokens, cfg.strategy, lexicon, freq, victim.vocab, cfg.freq_low_percentile)
    return [(i, tokens[i], float("nan")) for i in idx]


def defend(
    text,
    victim: VictimModel,
    detector,
    lexicon: SynonymLexicon,
    freq: FrequencyTable,
    cfg: Optional[CorrectorConfig] = None,
    ig_steps: int = 32,
    awi_target: str = "logit",
) -> DefenseOutcome:
    """Detect, then correct and re-classify if the sentence is flagged.

    ``detector`` is anything with ``flag(victim, example, awi4) -> (bool,
    score)`` and a ``needs_awi`` attribute; AWI matrices are only computed
    when it asks for them.
    """
    cfg = cfg or CorrectorConfig()
    n_cls = getattr(detector, "num_classes", victim.num_classes)
    if n_cls != victim.num_classes:
        raise ValueError(f"detector expects {n_cls} classes, victim has {victim.num_classes}")
    tokens = tokenize(text) if isinstance(text, str) else list(text)
    ex = victim.encode(tokens)
    tokens = tokens[: ex.true_length]
    label, conf = predict_from_probs(victim.forward_probs(ex))
    awi4 = awi_all(victim, ex, ig_steps, target=awi_target) if getattr(detector, "needs_awi", True) else None
    flagged, score = detector.flag(victim, ex, awi4)
    if not flagged:
        return DefenseOutcome(" ".join(tokens), "benign", label, conf, score)
    vg = awi4["VG"] if awi4 is not None else None
    suspects = suspects_for(victim, tokens, ex, cfg, lexicon, freq, vg, awi_target)
    fixed = correct(tokens, [i for i, _, _ in suspects], lexicon, freq, victim.vocab)
    if fixed == tokens:
        # nothing changed: keep the first prediction rather than re-running
        # a forward pass that could differ in the last bit near a tie
        new_label, new_conf = label, conf
    else:
        new_label, new_conf = predict_from_probs(victim.forward_probs(victim.encode(fixed)))
    return DefenseOutcome(
        text=" ".join(tokens),
        verdict="adversarial",
        label=new_label,
        confidence=new_conf,
        detector_score=score,
        corrected=" ".join(fixed),
        suspects=suspects,
        original_label=label,
    )
