import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from textshield.attacks import AttackConfig, run_attack
from textshield.corrector import (
    AlwaysAdversarial,
    AlwaysBenign,
    CorrectorConfig,
    DefenseOutcome,
    baseline_strategies,
    best_replacement,
    correct,
    defend,
    select_suspects,
)
from textshield.data import SynonymLexicon, Vocabulary, build_frequency
from textshield.saliency import awi_vg

values = st.lists(st.floats(0, 10, allow_nan=False), min_size=1, max_size=12)


def reference_suspects(col, length, beta):
    real = [float(v) for v in col[:length]]
    if not real:
        return []
    lo, hi = min(real), max(real)
    threshold = hi if beta == 1 else lo if beta == 0 else lo + beta * (hi - lo)
    return [i for i, v in enumerate(real) if v > threshold]


@settings(max_examples=200, deadline=None)
@given(values, st.integers(0, 14), st.floats(0, 1))
def test_select_suspects_matches_reference(col, length, beta):
    assert select_suspects(np.array(col), length, beta) == reference_suspects(col, length, beta)


@settings(max_examples=100, deadline=None)
@given(values, st.floats(0, 1), st.floats(0, 1))
def test_suspects_shrink_as_beta_grows(col, b1, b2):
    lo, hi = sorted((b1, b2))
    n = len(col)
    assert set(select_suspects(np.array(col), n, hi)) <= set(select_suspects(np.array(col), n, lo))
    assert select_suspects(np.array(col), n, 1.0) == []
    assert select_suspects(np.array(col), n, 0.0) == [i for i, v in enumerate(col) if v > min(col)]


def test_select_suspects_edge_cases():
    assert select_suspects(np.array([2.0, 2.0, 2.0]), 3, 0.0) == []
    assert select_suspects(np.array([0.0, 3.0, 1.0, 9.0]), 3, 0.0) == [1, 2]
    # padding rows never take part, even when large
    assert select_suspects(np.array([1.0, 2.0, 50.0]), 2, 0.5) == [1]
    assert select_suspects(np.array([]), 0, 0.3) == []


LEX = SynonymLexicon({"great": [("superb", "adj"), ("fine", "adj")], "superb": [("great", "adj"), ("fine", "adj")], "run": [("sprint", "verb")]}, tagged=True)
SENTS = [["great", "fine", "fine", "run"], ["great", "film", "fine"], ["superb", "film", "run"]]
VOCAB = Vocabulary.build(SENTS)
FREQ = build_frequency(SENTS)


def test_best_replacement():
    # candidates for superb: itself (1), great (2), fine (4) -> fine
    assert best_replacement("superb", LEX, FREQ, VOCAB) == "fine"
    assert best_replacement("film", LEX, FREQ, VOCAB) == "film"
    # out-of-vocabulary word with no in-vocab synonym stays
    assert best_replacement("zzz", LEX, FREQ, VOCAB) == "zzz"
    # a word is kept when it is already the most frequent candidate
    assert best_replacement("fine", LEX, FREQ, VOCAB) == "fine"


def test_best_replacement_breaks_ties_lexicographically():
    lex = SynonymLexicon({"b": [("c", "adj"), ("a", "adj")]})
    sents = [["a", "b", "c"]]
    assert best_replacement("b", lex, build_frequency(sents), Vocabulary.build(sents)) == "a"


def test_correct_only_touches_suspects():
    assert correct(["superb", "film", "superb"], [2], LEX, FREQ, VOCAB) == ["superb", "film", "fine"]


def test_baseline_strategies():
    tokens = ["great", "film", "run", "superb"]
    assert baseline_strategies(tokens, "pos_verb", LEX, FREQ) == [2]
    assert baseline_strategies(tokens, "pos_noun_verb", LEX, FREQ) == [2]
    cut = FREQ.percentile(0.5, VOCAB)
    assert baseline_strategies(tokens, "freq_low", LEX, FREQ, VOCAB, 0.5) == [i for i, t in enumerate(tokens) if FREQ[t] < cut]
    with pytest.raises(ValueError, match="POS"):
        baseline_strategies(tokens, "pos_verb", SynonymLexicon({}), FREQ)
    with pytest.raises(ValueError):
        baseline_strategies(tokens, "saliency", LEX, FREQ)


def test_config_validation():
    with pytest.raises(ValueError):
        CorrectorConfig(beta=1.5)
    with pytest.raises(ValueError):
        CorrectorConfig(strategy="nope")


def test_always_benign_detector_is_a_bypass(cnn_victim, corpus):
    for _, tokens in corpus.test[:15]:
        out = defend(tokens, cnn_victim, AlwaysBenign(), corpus.lexicon, corpus.freq)
        assert out.verdict == "benign" and out.corrected is None
        assert out.label == int(np.argmax(cnn_victim.forward_probs(cnn_victim.encode(tokens))))


def test_beta_one_corrects_nothing(cnn_victim, corpus):
    for _, tokens in corpus.test[:10]:
        out = defend(tokens, cnn_victim, AlwaysAdversarial(), corpus.lexicon, corpus.freq, CorrectorConfig(beta=1.0))
        assert out.verdict == "adversarial" and out.suspects == []
        assert out.corrected == out.text and out.label == out.original_label


def test_defend_accepts_text_and_serialises(cnn_victim, corpus):
    text = " ".join(corpus.test[0][1]).upper()
    out = defend(text, cnn_victim, AlwaysAdversarial(), corpus.lexicon, corpus.freq)
    assert out.text == " ".join(corpus.test[0][1])
    back = json.loads(out.to_json())
    assert back["verdict"] == "adversarial" and back["label"] == out.label
    assert DefenseOutcome(**back) == DefenseOutcome(**json.loads(out.to_json()))


def test_defend_rejects_class_mismatch(cnn_victim, corpus):
    class ThreeWay(AlwaysBenign):
        num_classes = 3

    with pytest.raises(ValueError, match="classes"):
        defend("a film", cnn_victim, ThreeWay(), corpus.lexicon, corpus.freq)


def test_single_swap_attack_is_undone(cnn_victim, corpus):
    """An attack whose one swapped word carries the top AWI and maps back under the lexicon is reverted."""
    restored = 0
    for i, (y, tokens) in enumerate(corpus.test):
        ex = cnn_victim.encode(tokens, y)
        res = run_attack(cnn_victim, ex, corpus.lexicon, AttackConfig("pwws", seed=i))
        if not (res.success and res.n_subs == 1):
            continue
        pos, old, new = res.substitutions[0]
        adv = cnn_victim.encode(res.tokens, y)
        col = awi_vg(cnn_victim, adv).column()[: adv.true_length]
        if int(np.argmax(col)) != pos or best_replacement(new, corpus.lexicon, corpus.freq, cnn_victim.vocab) != old:
            continue
        out = defend(res.tokens, cnn_victim, AlwaysAdversarial(), corpus.lexicon, corpus.freq, CorrectorConfig(beta=0.4))
        assert out.corrected.split()[pos] == old
        if out.corrected.split() == res.original_tokens:
            assert out.label == y
            restored += 1
        if restored >= 3:
            break
    assert restored >= 1


def test_threshold_closed_forms():
    col = np.array([0.1, 0.5, 0.9])
    assert select_suspects(col, 3, 0.5) == [2]
    assert select_suspects(col, 3, 1.0) == []
    assert select_suspects(np.array([0.3, 0.3]), 2, 0.4) == []


def test_best_replacement_max_rule():
    lex = SynonymLexicon({"w": [("x", "adj"), ("y", "adj")]})
    sents = [["x"] * 5 + ["y"] * 9 + ["w"]]
    assert best_replacement("w", lex, build_frequency(sents), Vocabulary.build(sents)) == "y"


def test_baseline_strategy_set_relations():
    lex = SynonymLexicon({"run": [("go", "verb")], "film": [("movie", "noun")], "good": [("fine", "adj")], "fine": [("good", "adj")]}, tagged=True)
    tokens = ["good", "film", "run", "fine"]
    union = set(baseline_strategies(tokens, "pos_noun_verb", lex, FREQ))
    assert union == {1, 2}
    assert set(baseline_strategies(tokens, "pos_noun", lex, FREQ)) <= union
    assert set(baseline_strategies(tokens, "pos_verb", lex, FREQ)) <= union
    assert baseline_strategies(["good", "fine"], "pos_verb", lex, FREQ) == []
    assert baseline_strategies(tokens, "freq_low", lex, FREQ, VOCAB, 0.0) == []
