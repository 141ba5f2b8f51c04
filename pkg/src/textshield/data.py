"""Tokenizer, vocabulary, corpus files, embeddings, synonym lexicon and word counts.

File formats:

* dataset: UTF-8 TSV, ``label<TAB>text`` with 0-based integer labels;
* embeddings: one ``token v1 v2 ... vk`` line per token;
* lexicon: ``headword<TAB>syn:pos,syn:pos,...`` (``:pos`` optional).
"""

from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

MAX_LEN = 128
PAD, UNK = "<pad>", "<unk>"
PAD_ID, UNK_ID = 0, 1
POS_TAGS = ("noun", "verb", "adj", "adv", "other")

_TOKEN_RE = re.compile(r"[^\W_]+", re.UNICODE)


class DataFormatError(ValueError):
    """Malformed input file; ``line`` is 1-based when known."""

    def __init__(self, message: str, path=None, line: Optional[int] = None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where = f"{path}"
            if line is not None:
                where += f":{line}"
            where += ": "
        super().__init__(where + message)


class EmptySentenceError(ValueError):
    pass


def tokenize(text: str) -> List[str]:
    """Lowercase and split on whitespace/punctuation, dropping punctuation."""
    tokens = _TOKEN_RE.findall(text.lower())
    if not tokens:
        raise EmptySentenceError("empty sentence")
    return tokens


@dataclass
class Vocabulary:
    tokens: List[str]
    counts: List[int]
    index: Dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        if self.tokens[:2] != [PAD, UNK]:
            raise ValueError("vocabulary must start with PAD and UNK")
        if len(self.counts) != len(self.tokens):
            raise ValueError("counts length differs from token list")
        self.index = {t: i for i, t in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ValueError("duplicate tokens in vocabulary")

    @classmethod
    def build(cls, sentences: Iterable[Sequence[str]], min_count: int = 1) -> "Vocabulary":
        counter = Counter(tok for sent in sentences for tok in sent)
        # most frequent first, lexicographic among ties
        kept = sorted((t for t, c in counter.items() if c >= min_count), key=lambda t: (-counter[t], t))
        return cls([PAD, UNK] + kept, [0, 0] + [counter[t] for t in kept])

    def __len__(self):
        return len(self.tokens)

    def __contains__(self, token):
        return token in self.index and self.index[token] > UNK_ID

    def id(self, token: str) -> int:
        return self.index.get(token, UNK_ID)

    def decode(self, ids) -> List[str]:
        return [self.tokens[i] for i in ids]


@dataclass
class EncodedExample:
    ids: np.ndarray
    true_length: int
    label: int

    def tokens(self, vocab: Vocabulary) -> List[str]:
        return vocab.decode(self.ids[: self.true_length])


def encode(tokens: Sequence[str], vocab: Vocabulary, label: int = 0, max_len: int = MAX_LEN) -> EncodedExample:
    if not tokens:
        raise EmptySentenceError("empty sentence")
    kept = list(tokens)[:max_len]
    ids = np.full(max_len, PAD_ID, dtype=np.int64)
    ids[: len(kept)] = [vocab.id(t) for t in kept]
    return EncodedExample(ids, len(kept), int(label))


def encode_batch(examples: Sequence[EncodedExample]) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    ids = np.stack([e.ids for e in examples])
    lengths = np.array([e.true_length for e in examples], dtype=np.int64)
    labels = np.array([e.label for e in examples], dtype=np.int64)
    return ids, lengths, labels


def load_dataset(path, num_classes: Optional[int] = None) -> List[Tuple[int, str]]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.rstrip("\n").rstrip("\r")
            if not line.strip():
                continue
            if "\t" not in line:
                raise DataFormatError("expected label<TAB>text", path, lineno)
            label_s, text = line.split("\t", 1)
            try:
                label = int(label_s)
            except ValueError:
                raise DataFormatError(f"label {label_s!r} is not an integer", path, lineno) from None
            if label < 0 or (num_classes is not None and label >= num_classes):
                raise DataFormatError(f"unknown label {label}", path, lineno)
            records.append((label, text))
    return records


def write_dataset(path, records: Iterable[Tuple[int, str]]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for label, text in records:
            fh.write(f"{label}\t{text}\n")


@dataclass
class EmbeddingTable:
    matrix: np.ndarray

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]


def read_vectors(path) -> Dict[str, np.ndarray]:
    vectors: Dict[str, np.ndarray] = {}
    dim = None
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            parts = raw.split()
            if not parts:
                continue
            try:
                vec = np.array([float(v) for v in parts[1:]])
            except ValueError:
                raise DataFormatError("non-numeric vector component", path, lineno) from None
            if dim is None:
                dim = len(vec)
                if dim == 0:
                    raise DataFormatError("vector has no components", path, lineno)
            elif len(vec) != dim:
                raise DataFormatError(f"dimension {len(vec)} differs from {dim}", path, lineno)
            vectors[parts[0]] = vec
    return vectors


def load_embeddings(path, vocab: Vocabulary, seed: int = 0) -> EmbeddingTable:
    """Vocabulary-aligned embedding matrix; missing rows get seeded U(-0.1, 0.1)."""
    vectors = read_vectors(path)
    if not vectors:
        raise DataFormatError("no vectors in file", path)
    dim = len(next(iter(vectors.values())))
    rng = np.random.default_rng(seed)
    matrix = rng.uniform(-0.1, 0.1, size=(len(vocab), dim))
    for tok, i in vocab.index.items():
        if tok in vectors:
            matrix[i] = vectors[tok]
    matrix[PAD_ID] = 0.0
    return EmbeddingTable(matrix)


def write_vectors(path, vectors: Dict[str, np.ndarray]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for tok, vec in vectors.items():
            fh.write(tok + " " + " ".join(f"{v:.6f}" for v in vec) + "\n")


@dataclass
class SynonymLexicon:
    entries: Dict[str, List[Tuple[str, str]]]
    tagged: bool = False
    _pos: Dict[str, str] = field(default_factory=dict, init=False, repr=False)

    def __post_init__(self):
        for head, syns in self.entries.items():
            for syn, tag in syns:
                self._pos.setdefault(syn, tag)
        for head, syns in self.entries.items():
            if syns:
                self._pos.setdefault(head, syns[0][1])

    def synonyms(self, word: str) -> List[Tuple[str, str]]:
        return self.entries.get(word, [])

    def pos(self, word: str) -> Optional[str]:
        return self._pos.get(word)


def load_lexicon(path) -> SynonymLexicon:
    entries: Dict[str, List[Tuple[str, str]]] = {}
    tagged = False
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.rstrip("\n").rstrip("\r")
            if not line.strip():
                continue
            if "\t" not in line:
                raise DataFormatError("expected headword<TAB>synonyms", path, lineno)
            head, rest = line.split("\t", 1)
            head = head.strip()
            if not head:
                raise DataFormatError("empty headword", path, lineno)
            syns: List[Tuple[str, str]] = []
            seen = {head}
            for item in filter(None, (s.strip() for s in rest.split(","))):
                word, _, tag = item.partition(":")
                if not word:
                    raise DataFormatError(f"empty synonym in {item!r}", path, lineno)
                if tag:
                    if tag not in POS_TAGS:
                        raise DataFormatError(f"unknown POS tag {tag!r}", path, lineno)
                    tagged = True
                else:
                    tag = "other"
                if word in seen:
                    continue
                seen.add(word)
                syns.append((word, tag))
            entries.setdefault(head, [])
            for syn in syns:
                if syn[0] not in {s for s, _ in entries[head]}:
                    entries[head].append(syn)
    return SynonymLexicon(entries, tagged)


def write_lexicon(path, lexicon: SynonymLexicon) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for head, syns in lexicon.entries.items():
            fh.write(head + "\t" + ",".join(f"{w}:{t}" for w, t in syns) + "\n")


class FrequencyTable(Counter):
    """Token counts over the training split."""

    def percentile(self, q: float, vocab: Optional[Vocabulary] = None) -> float:
        """Count value at quantile ``q`` of the per-type count distribution."""
        types = list(self) if vocab is None else [t for t in vocab.tokens[2:]]
        counts = np.array([self[t] for t in types], dtype=float)
        if counts.size == 0:
            return 0.0
        return float(np.quantile(counts, q))


def build_frequency(train_sentences: Iterable[Sequence[str]]) -> FrequencyTable:
    table = FrequencyTable()
    for sent in train_sentences:
        table.update(sent)
    return table


def synonyms_in_vocab(
    word: str,
    lexicon: SynonymLexicon,
    vocab: Vocabulary,
    pos_filter: Optional[Iterable[str]] = None,
) -> List[str]:
    allowed = None
    if pos_filter is not None:
        allowed = {pos_filter} if isinstance(pos_filter, str) else set(pos_filter)
    return [s for s, tag in lexicon.synonyms(word) if s in vocab and (allowed is None or tag in allowed)]


@dataclass
class Corpus:
    """Everything loaded for one benchmark."""

    vocab: Vocabulary
    lexicon: SynonymLexicon
    freq: FrequencyTable
    num_classes: int
    train: List[Tuple[int, List[str]]]
    test: List[Tuple[int, List[str]]]
    vectors: Dict[str, np.ndarray] = field(default_factory=dict)


def load_corpus(
    train_path,
    test_path,
    lexicon_path,
    num_classes: int,
    vectors_path=None,
    min_count: int = 1,
) -> Corpus:
    train = [(y, tokenize(t)) for y, t in load_dataset(train_path, num_classes)]
    test = [(y, tokenize(t)) for y, t in load_dataset(test_path, num_classes)]
    vocab = Vocabulary.build((toks for _, toks in train), min_count=min_count)
    vectors = read_vectors(vectors_path) if vectors_path is not None and Path(vectors_path).exists() else {}
    return Corpus(
        vocab=vocab,
        lexicon=load_lexicon(lexicon_path),
        freq=build_frequency(toks for _, toks in train),
        num_classes=num_classes,
        train=train,
        test=test,
        vectors=vectors,
    )
