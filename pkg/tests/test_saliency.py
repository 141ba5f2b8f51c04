import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from textshield import autograd as ag
from textshield.autograd import BackwardMode
from textshield.data import Vocabulary, encode
from textshield.saliency import (
    METHODS,
    AWIMatrix,
    awi_all,
    awi_gbp,
    awi_ig,
    awi_lrp,
    awi_vg,
    gradient_scores,
    ig_scores,
    load_awi_records,
    lrp_scores,
    read_awi,
    save_awi_records,
    write_awi,
)
from textshield.victims import VictimModel

VOCAB = Vocabulary.build([["a", "b", "c", "d", "e", "f"]])


def tiny(arch, seed=0, zero_bias=False, **hyper):
    """Small random victim; biases are random too unless ``zero_bias``."""
    m = VictimModel.create(arch, VOCAB, 2, seed=seed, emb_dim=5, n_filters=4, hidden=4, max_len=12, **hyper)
    r = np.random.default_rng(seed + 100)
    for k in m.params:
        if k.endswith(".b"):
            m.params[k][...] = 0.0 if zero_bias else r.normal(scale=0.3, size=m.params[k].shape)
    return m


def example(tokens=("a", "c", "e", "b", "f")):
    return encode(list(tokens), VOCAB, 0, 12)


def logit(m, ex, emb, j):
    return float(m.record(ex.ids[None], np.array([ex.true_length]), embedded=emb).logits.values[0, j])


@pytest.mark.parametrize("arch", ["textcnn", "lstm"])
def test_vg_signed_scores_match_finite_differences(arch):
    m, ex = tiny(arch, seed=1), example()
    emb = m.embed(ex.ids[None])
    signed = gradient_scores(m, ex)
    n = ex.true_length  # all-padding windows tie in the max-pool: kinks, not compared
    for j in range(2):
        fd = ag.finite_difference(lambda e: logit(m, ex, e, j), emb, h=1e-6)[0]
        np.testing.assert_allclose(signed[:n, j], fd[:n].mean(axis=-1), atol=1e-8)


def test_awi_shapes_nonnegativity_and_labels(cnn_victim, corpus):
    ex = cnn_victim.encode(corpus.test[0][1])
    awi = awi_all(cnn_victim, ex, ig_steps=8)
    assert set(awi) == set(METHODS)
    label = int(np.argmax(cnn_victim.forward_probs(ex)))
    for method, a in awi.items():
        assert a.method == method and a.label == label and a.length == ex.true_length
        assert a.values.shape == (cnn_victim.hyper.max_len, 2)
        assert np.all(a.values >= 0)
    # the single-method functions agree with the shared-tape version
    np.testing.assert_array_equal(awi_vg(cnn_victim, ex).values, awi["VG"].values)
    np.testing.assert_array_equal(awi_gbp(cnn_victim, ex).values, awi["GBP"].values)
    np.testing.assert_array_equal(awi_lrp(cnn_victim, ex).values, awi["LRP"].values)
    np.testing.assert_array_equal(awi_ig(cnn_victim, ex, steps=8).values, awi["IG"].values)


def test_awi_is_deterministic(lstm_victim, corpus):
    ex = lstm_victim.encode(corpus.test[1][1])
    a, b = awi_all(lstm_victim, ex, ig_steps=4), awi_all(lstm_victim, ex, ig_steps=4)
    for m in METHODS:
        assert a[m].values.tobytes() == b[m].values.tobytes()


def test_mask_pad_zeroes_padding_rows(cnn_victim, corpus):
    ex = cnn_victim.encode(corpus.test[2][1])
    a = awi_vg(cnn_victim, ex, mask_pad=True)
    assert np.all(a.values[ex.true_length :] == 0)


def test_gbp_equals_vg_without_rectifiers():
    m, ex = tiny("lstm", seed=2), example()
    np.testing.assert_array_equal(awi_gbp(m, ex).values, awi_vg(m, ex).values)


def test_gbp_is_zero_when_rectifier_signal_is_negative():
    """Output weights all negative: every guided signal reaching the ReLUs is blocked."""
    m, ex = tiny("textcnn", seed=3), example()
    m.params["out.w"][...] = -np.abs(m.params["out.w"])
    assert np.all(awi_gbp(m, ex).values == 0)
    assert np.any(awi_vg(m, ex).values > 0)


def test_constant_classifier_gives_zero_awi():
    m, ex = tiny("textcnn"), example()
    for k in m.params:
        if k != "embedding":
            m.params[k][...] = 0.0
    awi = awi_all(m, ex, ig_steps=4)
    for method in METHODS:
        assert np.all(awi[method].values == 0)


@pytest.mark.parametrize("arch", ["textcnn", "lstm"])
def test_ig_completeness(arch):
    m, ex = tiny(arch, seed=4), example()
    emb = m.embed(ex.ids[None])
    for j in range(2):
        gap = logit(m, ex, emb, j) - logit(m, ex, np.zeros_like(emb), j)
        fine = ig_scores(m, ex, steps=512)[:, j].sum()
        coarse = ig_scores(m, ex, steps=32)[:, j].sum()
        assert abs(fine - gap) <= 0.005 * abs(gap)
        assert abs(coarse - gap) <= 0.05 * abs(gap)


def test_ig_converges_with_more_steps():
    errs = {1: [], 8: [], 64: []}
    for seed in range(10):
        m, ex = tiny("textcnn", seed=seed), example()
        ref = ig_scores(m, ex, steps=512)
        for steps in errs:
            errs[steps].append(np.abs(ig_scores(m, ex, steps=steps) - ref).sum())
    assert np.mean(errs[1]) > np.mean(errs[8]) > np.mean(errs[64])


@pytest.mark.parametrize("arch", ["textcnn", "lstm"])
def test_lrp_conservation(arch):
    m, ex = tiny(arch, seed=5, zero_bias=True), example()
    emb = m.embed(ex.ids[None])
    signed = lrp_scores(m, ex, epsilon=1e-6)
    for j in range(2):
        out = logit(m, ex, emb, j)
        assert abs(signed[:, j].sum() - out) <= 0.02 * abs(out)


def test_lrp_zero_embedding_gives_zero():
    m = tiny("textcnn", zero_bias=True)
    m.params["embedding"][...] = 0.0
    assert np.all(awi_lrp(m, example()).values == 0)


def test_prob_target_columns_mirror_for_two_classes(cnn_victim, corpus):
    """With softmax targets, dp0 = -dp1, so both VG columns coincide in magnitude."""
    ex = cnn_victim.encode(corpus.test[3][1])
    a = awi_all(cnn_victim, ex, ig_steps=4, target="prob")
    np.testing.assert_allclose(a["VG"].values[:, 0], a["VG"].values[:, 1], atol=1e-12)
    with pytest.raises(ValueError):
        awi_all(cnn_victim, ex, target="nope")


def test_one_step_update_scales_with_word_importance():
    """For L = g(F_y), a gradient step moves word i by r1 * |g'(F_y)| * |dF_y/dw_i| per component."""
    m, ex = tiny("textcnn", seed=6), example()
    emb = m.embed(ex.ids[None])
    r1, y = 0.05, 1
    rec = m.record(ex.ids[None], np.array([ex.true_length]), embedded=emb)
    f = ag.total(ag.take(rec.logits, y, axis=-1))
    loss = ag.mul(f, f)  # g(F) = F^2, g'(F) = 2F
    grad_loss = ag.backward(rec.tape, loss.index)[rec.embedded.index]
    grad_f = ag.backward(rec.tape, f.index)[rec.embedded.index]
    update = np.abs(emb - (emb - r1 * grad_loss))
    expected = r1 * abs(2 * float(f.values)) * np.abs(grad_f)
    np.testing.assert_allclose(update, expected, rtol=1e-10, atol=1e-300)


@settings(max_examples=25, deadline=None)
@given(
    st.integers(1, 6),
    st.integers(1, 4),
    st.sampled_from(METHODS),
    st.integers(0, 5),
    st.integers(0, 2**31 - 1),
)
def test_awi_record_round_trip(rows, cols, method, label, seed):
    values = np.abs(np.random.default_rng(seed).normal(size=(rows, cols)))
    a = AWIMatrix(values, method, label, min(rows, 3))
    buf = io.BytesIO()
    write_awi(buf, a)
    buf.seek(0)
    b = read_awi(buf)
    assert b.method == method and b.label == label and b.length == a.length
    assert b.values.tobytes() == values.tobytes()
    assert read_awi(buf) is None


def test_awi_record_errors(tmp_path):
    a = AWIMatrix(np.ones((3, 2)), "VG", 0)
    save_awi_records(tmp_path / "r.bin", [a, a])
    assert len(load_awi_records(tmp_path / "r.bin")) == 2
    save_awi_records(tmp_path / "one.bin", [a])
    blob = (tmp_path / "one.bin").read_bytes()
    for bad in (blob[:10], blob[:-4], b"XXXX" + blob[4:]):
        with pytest.raises(ValueError):
            read_awi(io.BytesIO(bad))
    huge = bytearray(blob)
    huge[13:21] = (1 << 20).to_bytes(4, "little") * 2  # rows and cols far beyond any real sentence
    with pytest.raises(ValueError, match="implausible"):
        read_awi(io.BytesIO(bytes(huge)))
    with pytest.raises(ValueError):
        AWIMatrix(np.ones(3), "VG", 0)
    with pytest.raises(ValueError):
        AWIMatrix(np.ones((3, 2)), "XX", 0)
