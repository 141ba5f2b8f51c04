"""Tiny random victims and exhaustive single-substitution oracles shared by tests."""

import numpy as np

from textshield.attacks import AttackConfig, run_attack, similar_synonyms
from textshield.data import SynonymLexicon, Vocabulary, encode, synonyms_in_vocab
from textshield.victims import VictimModel

WORDS = [f"w{i}" for i in range(30)]
TOY_VOCAB = Vocabulary.build([WORDS])


def random_victim(arch, seed, max_len=8, **hyper):
    """Untrained victim with random weights and random (nonzero) biases."""
    sizes = dict(emb_dim=6, n_filters=5, hidden=5, max_len=max_len)
    sizes.update(hyper)
    m = VictimModel.create(arch, TOY_VOCAB, 2, seed=seed, **sizes)
    r = np.random.default_rng(seed + 7919)
    for k in m.params:
        if k.endswith(".b"):
            m.params[k][...] = r.normal(scale=0.3, size=m.params[k].shape)
    return m


def toy_instance(seed, max_words=8, max_syns=4):
    """A sentence of 3..max_words words, a lexicon with up to max_syns synonyms per word and a victim."""
    r = np.random.default_rng(seed)
    entries = {}
    for w in WORDS:
        k = int(r.integers(0, max_syns + 1))
        entries[w] = [(s, "other") for s in r.choice([x for x in WORDS if x != w], size=k, replace=False)]
    lexicon = SynonymLexicon(entries)
    victim = random_victim("textcnn" if seed % 2 else "lstm", seed)
    tokens = list(r.choice(WORDS, size=int(r.integers(3, max_words + 1))))
    label = int(np.argmax(victim.probs_tokens([tokens])[0]))
    vectors = {w: r.normal(size=4) for w in WORDS}
    return victim, lexicon, vectors, tokens, label


def candidate_pairs(kind, tokens, lexicon, vocab, vectors, cos_threshold):
    if kind == "pwws":
        return [(i, s) for i, t in enumerate(tokens) for s in synonyms_in_vocab(t, lexicon, vocab)]
    return [(i, s) for i, t in enumerate(tokens) for s in similar_synonyms(t, lexicon, vocab, vectors, cos_threshold)]


def exhaustive_single(victim, tokens, label, pairs):
    """Every single substitution, brute force: (best pair by confidence drop, number of label flips)."""
    p0 = victim.probs_tokens([tokens])[0][label]
    probs = victim.probs_tokens([tokens[:i] + [s] + tokens[i + 1 :] for i, s in pairs])
    flips = int((np.argmax(probs, axis=1) != label).sum())
    return pairs[int(np.argmax(p0 - probs[:, label]))], flips


def single_flip_agreement(kind, n_cases=100, cos_threshold=0.0, max_seeds=50000):
    """(matches, cases) over toy instances where exactly one single substitution flips the label.

    The attack runs with a one-word budget, so its only substitution is its first.
    """
    matches = cases = 0
    seed = 0
    while cases < n_cases and seed < max_seeds:
        victim, lexicon, vectors, tokens, label = toy_instance(seed)
        seed += 1
        pairs = candidate_pairs(kind, tokens, lexicon, victim.vocab, vectors, cos_threshold)
        if not pairs:
            continue
        best, flips = exhaustive_single(victim, tokens, label, pairs)
        if flips != 1:
            continue
        cases += 1
        ex = encode(tokens, victim.vocab, label, victim.hyper.max_len)
        res = run_attack(victim, ex, lexicon, AttackConfig(kind, max_fraction=0.01, cos_threshold=cos_threshold), vectors)
        if res.substitutions and (res.substitutions[0][0], res.substitutions[0][2]) == best:
            matches += 1
    return matches, cases
