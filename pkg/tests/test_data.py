import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from textshield.data import (
    MAX_LEN,
    PAD_ID,
    UNK_ID,
    DataFormatError,
    EmptySentenceError,
    SynonymLexicon,
    Vocabulary,
    build_frequency,
    encode,
    encode_batch,
    load_dataset,
    load_lexicon,
    synonyms_in_vocab,
    tokenize,
    write_dataset,
    write_lexicon,
)
from textshield.synthetic import SyntheticConfig, generate

words = st.text(alphabet="abcdefghij", min_size=1, max_size=6)


def test_tokenize_lowercases_and_drops_punctuation():
    assert tokenize("Great, GREAT film!  ok") == ["great", "great", "film", "ok"]
    with pytest.raises(EmptySentenceError):
        tokenize(" ,.! ")


def test_vocabulary_order_and_membership():
    v = Vocabulary.build([["b", "a", "b"], ["c", "a", "b"]])
    assert v.tokens == ["<pad>", "<unk>", "b", "a", "c"]
    assert v.counts == [0, 0, 3, 2, 1]
    assert "a" in v and "<unk>" not in v and "zzz" not in v
    assert v.id("zzz") == UNK_ID
    assert len(Vocabulary.build([["a", "b", "b"]], min_count=2)) == 3


def test_encode_pads_and_truncates():
    v = Vocabulary.build([["a", "b"]])
    ex = encode(["a", "x", "b"], v, label=1, max_len=5)
    assert ex.true_length == 3 and ex.label == 1
    assert list(ex.ids) == [v.id("a"), UNK_ID, v.id("b"), PAD_ID, PAD_ID]
    long = encode(["a"] * (MAX_LEN + 10), v)
    assert long.true_length == MAX_LEN and long.ids.shape == (MAX_LEN,)
    ids, lengths, labels = encode_batch([ex, encode(["b"], v, 0, 5)])
    assert ids.shape == (2, 5) and list(lengths) == [3, 1] and list(labels) == [1, 0]
    with pytest.raises(EmptySentenceError):
        encode([], v)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 3), st.lists(words, min_size=1, max_size=8)), min_size=1, max_size=10))
def test_dataset_round_trip(tmp_path_factory, records):
    path = tmp_path_factory.mktemp("ds") / "d.tsv"
    rows = [(y, " ".join(t)) for y, t in records]
    write_dataset(path, rows)
    assert load_dataset(path, num_classes=4) == rows


def test_dataset_errors_carry_line_numbers(tmp_path):
    p = tmp_path / "bad.tsv"
    p.write_text("0\tfine\nnotab\n")
    with pytest.raises(DataFormatError) as err:
        load_dataset(p)
    assert err.value.line == 2
    p.write_text("0\tfine\n5\tbad label\n")
    with pytest.raises(DataFormatError, match="unknown label"):
        load_dataset(p, num_classes=2)
    p.write_text("x\tbad\n")
    with pytest.raises(DataFormatError, match="not an integer"):
        load_dataset(p)


def test_lexicon_parsing(tmp_path):
    p = tmp_path / "lex.tsv"
    p.write_text("good\tfine:adj,nice:adj,good:adj,fine:adj\nrun\tsprint\n\n")
    lex = load_lexicon(p)
    assert lex.synonyms("good") == [("fine", "adj"), ("nice", "adj")]
    assert lex.synonyms("run") == [("sprint", "other")]
    assert lex.tagged and lex.pos("fine") == "adj" and lex.pos("good") == "adj"
    p.write_text("good\tfine:xyz\n")
    with pytest.raises(DataFormatError, match="POS"):
        load_lexicon(p)
    p.write_text("nohead\n")
    with pytest.raises(DataFormatError):
        load_lexicon(p)


def test_lexicon_round_trip(tmp_path):
    lex = SynonymLexicon({"a": [("b", "noun"), ("c", "verb")], "b": [("a", "noun")]}, tagged=True)
    write_lexicon(tmp_path / "l.tsv", lex)
    back = load_lexicon(tmp_path / "l.tsv")
    assert back.entries == lex.entries and back.tagged


def test_frequency_and_synonym_filter():
    v = Vocabulary.build([["a", "a", "b", "c"], ["a", "d"]])
    freq = build_frequency([["a", "a", "b", "c"], ["a", "d"]])
    assert freq["a"] == 3 and freq["zzz"] == 0
    assert freq.percentile(0.0, v) == 1 and freq.percentile(1.0, v) == 3
    lex = SynonymLexicon({"a": [("b", "noun"), ("q", "noun"), ("d", "verb")]})
    assert synonyms_in_vocab("a", lex, v) == ["b", "d"]
    assert synonyms_in_vocab("a", lex, v, pos_filter="verb") == ["d"]


def test_synthetic_generation_is_deterministic(tmp_path):
    cfg = SyntheticConfig(n_train=50, n_test=20, seed=9)
    a = generate(tmp_path / "a", cfg)
    b = generate(tmp_path / "b", cfg)
    for key in a:
        assert a[key].read_bytes() == b[key].read_bytes()
    rows = load_dataset(a["train"], num_classes=2)
    assert len(rows) == 50 and {y for y, _ in rows} <= {0, 1}
    lex = load_lexicon(a["lexicon"])
    assert all(w != h for h, syns in lex.entries.items() for w, _ in syns)


def test_tokenize_splits_apostrophes():
    assert tokenize("it's fine") == ["it", "s", "fine"]
    assert tokenize("A good, GOOD film!") == ["a", "good", "good", "film"]


def test_empty_dataset_file(tmp_path):
    p = tmp_path / "e.tsv"
    p.write_text("")
    assert load_dataset(p) == []


def test_embeddings_use_file_vectors_and_seeded_fill(tmp_path):
    from textshield.data import load_embeddings, write_vectors

    v = Vocabulary.build([["a", "b"]])
    write_vectors(tmp_path / "v.txt", {"a": np.array([0.5, -0.25])})
    t1 = load_embeddings(tmp_path / "v.txt", v, seed=3)
    t2 = load_embeddings(tmp_path / "v.txt", v, seed=3)
    np.testing.assert_array_equal(t1.matrix[v.id("a")], [0.5, -0.25])
    np.testing.assert_array_equal(t1.matrix[v.id("b")], t2.matrix[v.id("b")])
    assert np.all(np.abs(t1.matrix[v.id("b")]) <= 0.1)


def test_frequency_counts_training_occurrences():
    assert build_frequency([["w"] * 4, ["w"] * 3, ["x"]])["w"] == 7
    assert synonyms_in_vocab("absent", SynonymLexicon({}), Vocabulary.build([["a"]])) == []
