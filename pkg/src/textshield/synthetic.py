"""Seeded desk-scale sentiment benchmark.

Synonym groups have one frequent head word and several rare variants.  Rare
variants are sprinkled into reviews with weak label correlation, so a victim
trained on the corpus learns them poorly: swapping a head word for one of its
variants is a meaning-preserving substitution that often flips the victim.
Writes ``train.tsv``, ``test.tsv``, ``lexicon.tsv`` and ``vectors.txt``.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Tuple

import numpy as np

from .data import write_dataset

# (pos, words); the first word of each group is its frequent head
POSITIVE = [
    ("adj", "good fine decent solid"),
    ("adj", "great superb terrific splendid"),
    ("adj", "wonderful marvelous delightful lovely"),
    ("adj", "excellent outstanding exceptional superlative"),
    ("adj", "brilliant dazzling gifted masterful"),
    ("adj", "enjoyable pleasant pleasing agreeable"),
    ("adj", "funny hilarious witty amusing"),
    ("adj", "beautiful gorgeous stunning elegant"),
    ("adj", "moving touching poignant stirring"),
    ("adj", "clever smart ingenious inventive"),
    ("adj", "fresh original novel innovative"),
    ("adj", "charming endearing likable winsome"),
    ("verb", "love adore cherish treasure"),
    ("verb", "enjoy relish savor appreciate"),
    ("verb", "recommend endorse praise commend"),
    ("adv", "beautifully gracefully elegantly exquisitely"),
]
NEGATIVE = [
    ("adj", "bad poor lousy inferior"),
    ("adj", "terrible awful dreadful horrible"),
    ("adj", "boring dull tedious tiresome"),
    ("adj", "stupid dumb foolish idiotic"),
    ("adj", "ugly hideous unsightly grotesque"),
    ("adj", "weak feeble flimsy lame"),
    ("adj", "messy sloppy chaotic disorganized"),
    ("adj", "bland flat insipid lifeless"),
    ("adj", "annoying irritating grating vexing"),
    ("adj", "predictable formulaic stale trite"),
    ("adj", "pointless useless futile aimless"),
    ("adj", "painful agonizing excruciating unbearable"),
    ("verb", "hate despise loathe detest"),
    ("verb", "waste squander fritter misspend"),
    ("verb", "regret rue lament bemoan"),
    ("adv", "badly poorly clumsily awkwardly"),
]
NEUTRAL_NOUNS = [
    "film movie picture feature",
    "story plot narrative tale",
    "actor performer player star",
    "director filmmaker auteur helmer",
    "scene sequence segment episode",
    "ending finale conclusion climax",
    "script screenplay dialogue writing",
    "music score soundtrack songs",
    "character role persona figure",
    "camera cinematography photography visuals",
    "time moment hour while",
    "audience viewers crowd spectators",
]
NEUTRAL_VERBS = [
    "watch see view observe",
    "show display present depict",
    "make create produce build",
    "tell recount relate narrate",
    "feel sense perceive experience",
    "think believe suppose reckon",
]
FILLERS = "the a this it was is and but i really very with of to in that so quite overall honestly".split()

_CLAUSES = [
    "the {N} was {A}",
    "i {V} this {N}",
    "the {N} is {I} {A}",
    "it {W} a {A} {N}",
    "the {N} and the {N} were {A}",
    "{A} {N} {D} done",
    "i {W} the {N} and it was {A}",
    "honestly the {N} felt {I} {A}",
    "a {A} and {A} {N}",
]
_INTENSIFIERS = ["really", "very", "quite", "so"]


@dataclass
class SyntheticConfig:
    n_train: int = 3000
    n_test: int = 1000
    seed: int = 0
    variant_rate: float = 0.02
    variant_label_agreement: float = 0.5
    opposite_rate: float = 0.08
    neutral_variant_rate: float = 0.05
    label_noise: float = 0.03
    clauses: Tuple[int, int] = (2, 4)
    vector_dim: int = 50
    vector_noise: float = 0.6


def _groups(spec) -> List[Tuple[str, List[str]]]:
    return [(pos, words.split()) for pos, words in spec]


class _Generator:
    def __init__(self, cfg: SyntheticConfig):
        self.cfg = cfg
        self.rng = np.random.default_rng(cfg.seed)
        self.sent = {1: _groups(POSITIVE), 0: _groups(NEGATIVE)}
        self.nouns = [g.split() for g in NEUTRAL_NOUNS]
        self.verbs = [g.split() for g in NEUTRAL_VERBS]

    def _pick(self, seq):
        return seq[self.rng.integers(len(seq))]

    def _neutral(self, groups):
        words = self._pick(groups)
        if self.rng.random() < self.cfg.neutral_variant_rate:
            return self._pick(words[1:])
        return words[0]

    def _sentiment(self, label: int, pos: str) -> str:
        cfg, rng = self.cfg, self.rng
        polarity = label if rng.random() >= cfg.opposite_rate else 1 - label
        if rng.random() < cfg.variant_rate:
            # rare variants carry only a weak label signal
            polarity = label if rng.random() < cfg.variant_label_agreement else 1 - label
            groups = [w for p, w in self.sent[polarity] if p == pos]
            return self._pick(self._pick(groups)[1:])
        groups = [w for p, w in self.sent[polarity] if p == pos]
        return self._pick(groups)[0]

    def sentence(self, label: int) -> str:
        lo, hi = self.cfg.clauses
        parts = []
        for _ in range(int(self.rng.integers(lo, hi + 1))):
            tmpl = self._pick(_CLAUSES)
            out = []
            for tok in tmpl.split():
                if tok == "{N}":
                    out.append(self._neutral(self.nouns))
                elif tok == "{W}":
                    out.append(self._neutral(self.verbs))
                elif tok == "{A}":
                    out.append(self._sentiment(label, "adj"))
                elif tok == "{V}":
                    out.append(self._sentiment(label, "verb"))
                elif tok == "{D}":
                    out.append(self._sentiment(label, "adv"))
                elif tok == "{I}":
                    out.append(self._pick(_INTENSIFIERS))
                else:
                    out.append(tok)
            parts.append(" ".join(out))
        joiners = [" and ", " , ", " . "]
        text = parts[0]
        for p in parts[1:]:
            text += self._pick(joiners) + p
        return text

    def records(self, n: int) -> List[Tuple[int, str]]:
        out = []
        for _ in range(n):
            label = int(self.rng.integers(2))
            text = self.sentence(label)
            if self.rng.random() < self.cfg.label_noise:
                label = 1 - label
            out.append((label, text))
        return out

    def all_groups(self) -> List[Tuple[str, List[str]]]:
        groups = self.sent[1] + self.sent[0]
        groups += [("noun", g) for g in self.nouns]
        groups += [("verb", g) for g in self.verbs]
        return groups

    def vectors(self) -> Dict[str, np.ndarray]:
        cfg, rng = self.cfg, self.rng
        vecs: Dict[str, np.ndarray] = {}
        for _, words in self.all_groups():
            center = rng.normal(size=cfg.vector_dim)
            center /= np.linalg.norm(center)
            for w in words:
                v = center + cfg.vector_noise * rng.normal(size=cfg.vector_dim) / np.sqrt(cfg.vector_dim)
                vecs[w] = v / np.linalg.norm(v)
        for w in FILLERS + _INTENSIFIERS:
            if w not in vecs:
                v = rng.normal(size=cfg.vector_dim)
                vecs[w] = v / np.linalg.norm(v)
        return vecs


def generate(out_dir, cfg: SyntheticConfig = SyntheticConfig()) -> Dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    gen = _Generator(cfg)
    paths = {
        "train": out / "train.tsv",
        "test": out / "test.tsv",
        "lexicon": out / "lexicon.tsv",
        "vectors": out / "vectors.txt",
    }
    write_dataset(paths["train"], gen.records(cfg.n_train))
    write_dataset(paths["test"], gen.records(cfg.n_test))
    with open(paths["lexicon"], "w", encoding="utf-8", newline="\n") as fh:
        for pos, words in gen.all_groups():
            for w in words:
                fh.write(w + "\t" + ",".join(f"{s}:{pos}" for s in words if s != w) + "\n")
    vecs = gen.vectors()
    with open(paths["vectors"], "w", encoding="utf-8", newline="\n") as fh:
        for tok in sorted(vecs):
            fh.write(tok + " " + " ".join(f"{x:.6f}" for x in vecs[tok]) + "\n")
    return paths
