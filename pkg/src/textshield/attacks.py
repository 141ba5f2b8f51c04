"""Word-substitution attacks: PWWS, TextFooler, GA and IGA.

These are compact re-implementations that keep each method's search strategy
(greedy saliency-ordered swaps, or a genetic search) under one shared
substitution budget of ``max(1, floor(max_fraction * length))`` words.  An
attack succeeds when the victim's prediction differs from the true label.
"""

from __future__ import annotations

import hashlib
import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .data import EncodedExample, SynonymLexicon, synonyms_in_vocab

logger = logging.getLogger(__name__)

KINDS = ("pwws", "textfooler", "ga", "iga")


class AttackError(RuntimeError):
    pass


@dataclass
class AttackConfig:
    kind: str = "pwws"
    max_fraction: float = 0.25
    pop_size: int = 20
    generations: int = 20
    mutation_rate: float = 0.3
    cos_threshold: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown attack {self.kind!r}")
        if not 0 < self.max_fraction <= 1:
            raise ValueError("max_fraction must be in (0, 1]")
        if self.pop_size < 2:
            raise ValueError("population must hold at least 2 members")


@dataclass
class AttackResult:
    original: EncodedExample
    original_tokens: List[str]
    tokens: List[str]
    substitutions: List[Tuple[int, str, str]]
    success: bool
    conf_before: float
    conf_after: float
    kind: str
    queries: int = 0

    @property
    def n_subs(self) -> int:
        return len(self.substitutions)

    @property
    def text(self) -> str:
        return " ".join(self.tokens)


def substitution_budget(length: int, fraction: float) -> int:
    return max(1, int(math.floor(fraction * length)))


def derive_seed(*parts) -> int:
    digest = hashlib.sha256(":".join(str(p) for p in parts).encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1


class _Query:
    """Counts victim queries and returns true-class probabilities."""

    def __init__(self, victim, label: int):
        self.victim = victim
        self.label = label
        self.count = 0

    def probs(self, token_lists: Sequence[Sequence[str]]) -> np.ndarray:
        self.count += len(token_lists)
        return self.victim.probs_tokens(token_lists)


def _diff(orig: Sequence[str], new: Sequence[str]) -> List[Tuple[int, str, str]]:
    return [(i, a, b) for i, (a, b) in enumerate(zip(orig, new)) if a != b]


def _result(ex, orig, tokens, probs_after, label, conf_before, kind, q) -> AttackResult:
    return AttackResult(
        original=ex,
        original_tokens=list(orig),
        tokens=list(tokens),
        substitutions=_diff(orig, tokens),
        success=int(np.argmax(probs_after)) != label,
        conf_before=conf_before,
        conf_after=float(probs_after[label]),
        kind=kind,
        queries=q.count,
    )


def _candidates(tokens, lexicon, vocab) -> List[List[str]]:
    return [synonyms_in_vocab(t, lexicon, vocab) for t in tokens]


def _with(tokens: Sequence[str], i: int, word: str) -> List[str]:
    out = list(tokens)
    out[i] = word
    return out


def _start(victim, ex: EncodedExample):
    tokens = ex.tokens(victim.vocab)
    q = _Query(victim, ex.label)
    probs0 = q.probs([tokens])[0]
    return tokens, q, probs0


def _unk_drops(q: _Query, tokens, p_y) -> np.ndarray:
    variants = [_with(tokens, i, "<unk>") for i in range(len(tokens))]
    return p_y - q.probs(variants)[:, q.label]


def attack_pwws(victim, ex: EncodedExample, lexicon: SynonymLexicon, cfg: AttackConfig = AttackConfig()) -> AttackResult:
    """Probability-weighted word saliency greedy attack.

    Position score = softmax(UNK saliency)_i * best-synonym confidence drop;
    swaps are applied in descending score order until the label flips.
    """
    tokens, q, probs0 = _start(victim, ex)
    y = ex.label
    p_y = float(probs0[y])
    if int(np.argmax(probs0)) != y:
        return _result(ex, tokens, tokens, probs0, y, p_y, "pwws", q)
    cands = _candidates(tokens, lexicon, victim.vocab)
    saliency = _unk_drops(q, tokens, p_y)
    weights = np.exp(saliency - saliency.max())
    weights /= weights.sum()

    flat = [(i, s) for i, c in enumerate(cands) for s in c]
    if not flat:
        return _result(ex, tokens, tokens, probs0, y, p_y, "pwws", q)
    drops = p_y - q.probs([_with(tokens, i, s) for i, s in flat])[:, y]
    best: Dict[int, Tuple[str, float]] = {}
    for (i, s), d in zip(flat, drops):
        if i not in best or d > best[i][1]:
            best[i] = (s, float(d))
    order = sorted(best, key=lambda i: (-weights[i] * best[i][1], i))

    budget = substitution_budget(len(tokens), cfg.max_fraction)
    cur, probs = list(tokens), probs0
    for i in order[:budget]:
        cur[i] = best[i][0]
        probs = q.probs([cur])[0]
        if int(np.argmax(probs)) != y:
            break
    return _result(ex, tokens, cur, probs, y, p_y, "pwws", q)


def _cosine(a: np.ndarray, b: np.ndarray) -> float:
    norm = np.linalg.norm(a) * np.linalg.norm(b)
    return float(a @ b / norm) if norm > 0 else 0.0


def similar_synonyms(word, lexicon, vocab, vectors: Mapping[str, np.ndarray], threshold: float) -> List[str]:
    """In-vocabulary synonyms whose embedding cosine with ``word`` reaches ``threshold``."""
    if word not in vectors:
        return []
    v = vectors[word]
    return [s for s in synonyms_in_vocab(word, lexicon, vocab) if s in vectors and _cosine(v, vectors[s]) >= threshold - 1e-12]


def attack_textfooler(
    victim,
    ex: EncodedExample,
    lexicon: SynonymLexicon,
    vectors: Mapping[str, np.ndarray],
    cfg: AttackConfig = AttackConfig(kind="textfooler"),
) -> AttackResult:
    """Deletion-importance greedy attack with an embedding-similarity filter."""
    tokens, q, probs0 = _start(victim, ex)
    y = ex.label
    p_y = float(probs0[y])
    if int(np.argmax(probs0)) != y:
        return _result(ex, tokens, tokens, probs0, y, p_y, "textfooler", q)
    importance = _unk_drops(q, tokens, p_y)
    order = sorted(range(len(tokens)), key=lambda i: (-importance[i], i))
    budget = substitution_budget(len(tokens), cfg.max_fraction)
    cur, probs = list(tokens), probs0
    used = 0
    for i in order:
        if used >= budget:
            break
        cands = similar_synonyms(tokens[i], lexicon, victim.vocab, vectors, cfg.cos_threshold)
        if not cands:
            continue
        cand_probs = q.probs([_with(cur, i, s) for s in cands])
        k = int(np.argmin(cand_probs[:, y]))
        if cand_probs[k, y] >= probs[y]:
            continue
        cur[i] = cands[k]
        probs = cand_probs[k]
        used += 1
        if int(np.argmax(probs)) != y:
            break
    return _result(ex, tokens, cur, probs, y, p_y, "textfooler", q)


def attack_genetic(
    victim,
    ex: EncodedExample,
    lexicon: SynonymLexicon,
    cfg: AttackConfig = AttackConfig(kind="ga"),
    improved: bool = False,
) -> AttackResult:
    """Population search over synonym substitutions.

    Fitness is the probability mass off the true class; parents are drawn in
    proportion to fitness, recombined by single-point crossover and mutated
    by a random synonym swap.  The improved variant may re-swap substituted
    positions and seeds its population with one swap at every position.
    """
    kind = "iga" if improved else "ga"
    rng = np.random.default_rng(cfg.seed)
    tokens, q, probs0 = _start(victim, ex)
    y = ex.label
    p_y = float(probs0[y])
    if int(np.argmax(probs0)) != y:
        return _result(ex, tokens, tokens, probs0, y, p_y, kind, q)
    cands = _candidates(tokens, lexicon, victim.vocab)
    open_pos = [i for i, c in enumerate(cands) if c]
    if not open_pos:
        return _result(ex, tokens, tokens, probs0, y, p_y, kind, q)
    budget = substitution_budget(len(tokens), cfg.max_fraction)

    def n_mod(member):
        return sum(a != b for a, b in zip(member, tokens))

    def mutate(member, at=None):
        if at is None:
            if improved:
                pool = open_pos if n_mod(member) < budget else [i for i in open_pos if member[i] != tokens[i]]
            else:
                pool = [i for i in open_pos if member[i] == tokens[i]] if n_mod(member) < budget else []
            if not pool:
                return member
            at = pool[int(rng.integers(len(pool)))]
        choices = [s for s in cands[at] if s != member[at]] or cands[at]
        return _with(member, at, choices[int(rng.integers(len(choices)))])

    if improved:
        pop = [mutate(tokens, open_pos[p % len(open_pos)]) for p in range(cfg.pop_size)]
    else:
        pop = [mutate(tokens) for _ in range(cfg.pop_size)]

    def evaluate(pop):
        probs = q.probs(pop)
        fitness = 1.0 - probs[:, y]
        flipped = np.argmax(probs, axis=1) != y
        return probs, fitness, flipped

    probs, fitness, flipped = evaluate(pop)
    for _gen in range(cfg.generations):
        if flipped.any():
            break
        elite = int(np.argmax(fitness))
        weights = fitness / fitness.sum() if fitness.sum() > 0 else np.full(len(pop), 1.0 / len(pop))
        children = [pop[elite]]
        for _ in range(cfg.pop_size - 1):
            a, b = rng.choice(len(pop), size=2, p=weights)
            cut = int(rng.integers(1, len(tokens))) if len(tokens) > 1 else 0
            child = pop[a][:cut] + pop[b][cut:]
            if n_mod(child) > budget:
                child = list(pop[a])
            if rng.random() < cfg.mutation_rate:
                child = mutate(child)
            children.append(child)
        pop = children
        probs, fitness, flipped = evaluate(pop)

    if flipped.any():
        idx = np.flatnonzero(flipped)
        best = int(idx[np.argmax(fitness[idx])])
    else:
        best = int(np.argmax(fitness))
    return _result(ex, tokens, pop[best], probs[best], y, p_y, kind, q)


def run_attack(victim, ex, lexicon, cfg: AttackConfig, vectors: Optional[Mapping[str, np.ndarray]] = None) -> AttackResult:
    if cfg.kind == "pwws":
        return attack_pwws(victim, ex, lexicon, cfg)
    if cfg.kind == "textfooler":
        return attack_textfooler(victim, ex, lexicon, vectors or {}, cfg)
    return attack_genetic(victim, ex, lexicon, cfg, improved=cfg.kind == "iga")


def check_result(victim, lexicon: SynonymLexicon, res: AttackResult, max_fraction: float) -> List[str]:
    """Independent re-check of an AttackResult's invariants; returns violations."""
    problems = []
    if len(res.tokens) != len(res.original_tokens):
        problems.append("token count changed")
    for i, old, new in res.substitutions:
        if new not in {s for s, _ in lexicon.synonyms(old)}:
            problems.append(f"position {i}: {new!r} is not a synonym of {old!r}")
    if res.n_subs > substitution_budget(len(res.original_tokens), max_fraction):
        problems.append("substitution budget exceeded")
    if res.success:
        before = int(np.argmax(victim.probs_tokens([res.original_tokens])[0]))
        after = int(np.argmax(victim.probs_tokens([res.tokens])[0]))
        if after == res.original.label:
            problems.append("success flag set but label not flipped")
        if res.n_subs and before == after:
            problems.append("prediction unchanged")
    return problems


def quota_split(quota: int, kinds: Sequence[str]) -> Dict[str, int]:
    base, extra = divmod(quota, len(kinds))
    return {k: base + (1 if a < extra else 0) for a, k in enumerate(kinds)}


def generate_adversarial_corpus(
    victim,
    examples: Sequence[EncodedExample],
    kinds: Sequence[str],
    quota_per_class: int,
    lexicon: SynonymLexicon,
    cfg: AttackConfig = AttackConfig(),
    vectors: Optional[Mapping[str, np.ndarray]] = None,
    num_classes: Optional[int] = None,
) -> List[AttackResult]:
    """Successful attacks balanced per class and per attack kind.

    Sentences are visited in a seeded order; each class hands its sentences
    to the attack kinds round-robin, skipping kinds whose share is filled.
    Only originally-correct sentences whose attack flips the label with at
    least one substitution are kept.
    """
    if quota_per_class <= 0:
        return []
    if not kinds:
        raise ValueError("no attack kinds given")
    classes = range(num_classes if num_classes is not None else victim.num_classes)
    remaining = {c: quota_split(quota_per_class, kinds) for c in classes}
    turn = {c: 0 for c in classes}
    rng = np.random.default_rng(derive_seed(cfg.seed, "corpus-order"))
    order = rng.permutation(len(examples))
    preds = np.argmax(victim.probs_batch([examples[i] for i in order]), axis=1) if len(order) else []
    results: List[AttackResult] = []
    for idx, pred in zip(order, preds):
        ex = examples[idx]
        c = ex.label
        if c not in remaining or pred != c:
            continue
        open_kinds = [k for k in kinds if remaining[c][k] > 0]
        if not open_kinds:
            continue
        kind = None
        for step in range(len(kinds)):
            cand = kinds[(turn[c] + step) % len(kinds)]
            if remaining[c][cand] > 0:
                kind = cand
                turn[c] = (turn[c] + step + 1) % len(kinds)
                break
        sub_cfg = AttackConfig(**{**cfg.__dict__, "kind": kind, "seed": derive_seed(cfg.seed, kind, int(idx))})
        res = run_attack(victim, ex, lexicon, sub_cfg, vectors)
        if res.success and res.n_subs > 0:
            results.append(res)
            remaining[c][kind] -= 1
            if all(v == 0 for r in remaining.values() for v in r.values()):
                break
    if not results:
        raise AttackError("no successful adversarial examples")
    short = {c: sum(r.values()) for c, r in remaining.items() if sum(r.values()) > 0}
    if short:
        warnings.warn(f"adversarial quota not reached; missing per class: {short}", stacklevel=2)
    return results


def write_adversarial_tsv(path, results: Sequence[AttackResult]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for r in results:
            fh.write(f"{r.original.label}\t{r.text}\t{' '.join(r.original_tokens)}\t{r.kind}\t{r.n_subs}\n")


def read_adversarial_tsv(path) -> List[Tuple[int, str, str, str, int]]:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.rstrip("\n").split("\t")
            if len(parts) != 5:
                raise ValueError(f"{path}:{lineno}: expected 5 columns, got {len(parts)}")
            rows.append((int(parts[0]), parts[1], parts[2], parts[3], int(parts[4])))
    return rows
