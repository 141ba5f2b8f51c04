"""Acceptance criteria.

Each test prints one ``PASS``/``FAIL`` line (run with ``pytest -s`` or
``-rA`` to see them) and then asserts the criterion.  The desk-scale
checks share one full pipeline run with the default configuration at
master seed 0.  The determinism check runs it a second time.
"""

import json
import time
import warnings

import numpy as np
import pytest

from textshield import autograd as ag
from textshield import harness
from textshield.config import load_config
from textshield.data import Vocabulary, encode
from textshield.detector import (
    DetectorConfig,
    DetectorEnsemble,
    evaluate_detection,
    load_detector,
    save_detector,
    train_detector,
)
from textshield.saliency import awi_gbp, awi_vg, ig_scores, lrp_scores
from textshield.victims import VictimModel, load_checkpoint, save_checkpoint

from test_detector import separable_items
from toys import single_flip_agreement

VOCAB = Vocabulary.build([["a", "b", "c", "d", "e", "f", "g", "h"]])
WORDS = VOCAB.tokens[2:]


def verdict(n, name, ok, detail):
    line = f"criterion {n} [{name}]: {'PASS' if ok else 'FAIL'} ({detail})"
    print("\n" + line)
    return ok


def random_net(arch, seed, zero_bias=False, max_len=12):
    m = VictimModel.create(arch, VOCAB, 2, seed=seed, emb_dim=5, n_filters=4, hidden=4, max_len=max_len)
    r = np.random.default_rng(seed + 1000)
    for k in m.params:
        if k.endswith(".b"):
            m.params[k][...] = 0.0 if zero_bias else r.normal(scale=0.3, size=m.params[k].shape)
    return m


def random_example(seed, max_len=12):
    r = np.random.default_rng(seed + 2000)
    n = int(r.integers(3, max_len + 1))
    return encode(list(r.choice(WORDS, size=n)), VOCAB, 0, max_len)


def logit_fn(m, ex, j):
    def f(emb):
        return float(m.record(ex.ids[None], np.array([ex.true_length]), embedded=emb).logits.values[0, j])

    return f


# ---------------------------------------------------------------------------
# 1. gradient oracle


def _is_kink(f, point, h):
    """Central differences at h and h/10 disagree: the point sits next to a rectifier or max-pool switch."""
    a = ag.finite_difference(f, point, h=h)
    b = ag.finite_difference(f, point, h=h / 10)
    return np.max(np.abs(a - b)) > 1e-6 * max(1.0, np.max(np.abs(a))), a


def test_criterion_1_gradient_oracle():
    start = time.perf_counter()
    worst, checked, kinks = 0.0, 0, 0
    for seed in range(50):
        arch = "textcnn" if seed % 2 == 0 else "lstm"
        m, ex = random_net(arch, seed), random_example(seed)
        emb = m.embed(ex.ids[None])
        n = ex.true_length  # padding-only convolution windows tie exactly in the max-pool
        for j in range(2):
            rec = m.record(ex.ids[None], np.array([n]), embedded=emb)
            g = ag.backward(rec.tape, ag.total(ag.take(rec.logits, j, axis=-1)).index)[rec.embedded.index][0, :n]
            f = logit_fn(m, ex, j)
            kink, fd = _is_kink(f, emb, 1e-5)
            if kink:
                kinks += 1
                continue
            fd = fd[0, :n]
            worst = max(worst, np.linalg.norm(g - fd) / max(np.linalg.norm(fd), 1e-12))
            checked += 1
    elapsed = time.perf_counter() - start
    ok = worst <= 1e-4 and elapsed <= 60 and checked >= 90
    assert verdict(1, "gradient oracle", ok, f"{checked} checks, {kinks} kink points skipped, worst rel err {worst:.2e}, {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# 2. attribution axioms


GAP_FLOOR = 0.01  # completeness is judged relative to max(|gap|, GAP_FLOOR); near-zero gaps make a pure ratio meaningless


def test_criterion_2_attribution_axioms():
    start = time.perf_counter()
    ig_fine = ig_coarse = raw_coarse = lrp_err = 0.0
    floored = 0
    gbp_equal = True
    for seed in range(20):
        arch = "textcnn" if seed % 2 == 0 else "lstm"
        m, ex = random_net(arch, seed), random_example(seed)
        emb = m.embed(ex.ids[None])
        fine, coarse = ig_scores(m, ex, steps=512), ig_scores(m, ex, steps=32)
        for j in range(2):
            f = logit_fn(m, ex, j)
            gap = f(emb) - f(np.zeros_like(emb))
            floored += abs(gap) < GAP_FLOOR
            scale = max(abs(gap), GAP_FLOOR)
            ig_fine = max(ig_fine, abs(fine[:, j].sum() - gap) / scale)
            ig_coarse = max(ig_coarse, abs(coarse[:, j].sum() - gap) / scale)
            raw_coarse = max(raw_coarse, abs(coarse[:, j].sum() - gap) / abs(gap))
        zb = random_net(arch, seed, zero_bias=True)
        signed = lrp_scores(zb, ex, epsilon=1e-6)
        for j in range(2):
            out = logit_fn(zb, ex, j)(zb.embed(ex.ids[None]))
            lrp_err = max(lrp_err, abs(signed[:, j].sum() - out) / abs(out))
        if arch == "lstm":
            gbp_equal &= np.array_equal(awi_gbp(m, ex).values, awi_vg(m, ex).values)
    elapsed = time.perf_counter() - start
    ok = ig_fine <= 0.005 and ig_coarse <= 0.05 and lrp_err <= 0.02 and gbp_equal and elapsed <= 120
    detail = (
        f"IG err m=512 {ig_fine:.2e}, m=32 {ig_coarse:.2e} (raw ratio {raw_coarse:.2e}, {floored}/40 gaps below {GAP_FLOOR}); "
        f"LRP err {lrp_err:.2e}; GBP==VG {gbp_equal}; {elapsed:.1f}s"
    )
    assert verdict(2, "attribution axioms", ok, detail)


# ---------------------------------------------------------------------------
# 3. one-step update magnitude


def test_criterion_3_update_magnitude():
    """L = tanh(F_y)^2, so dL/dF_y = 2 tanh(F_y) (1 - tanh(F_y)^2) in closed form."""
    worst = 0.0
    r1 = 0.05
    for seed in range(20):
        arch = "textcnn" if seed % 2 == 0 else "lstm"
        m, ex = random_net(arch, seed), random_example(seed)
        y = seed % 2
        emb = m.embed(ex.ids[None])
        rec = m.record(ex.ids[None], np.array([ex.true_length]), embedded=emb)
        f = ag.total(ag.take(rec.logits, y, axis=-1))
        t = ag.tanh(f)
        loss = ag.mul(t, t)
        grad_loss = ag.backward(rec.tape, loss.index)[rec.embedded.index]
        r = ag.backward(rec.tape, f.index)[rec.embedded.index]
        fy = float(f.values)
        dl_df = 2 * np.tanh(fy) * (1 - np.tanh(fy) ** 2)
        update = np.abs(emb - (emb - r1 * grad_loss))
        expected = r1 * abs(dl_df) * np.abs(r)
        mask = expected > 0
        worst = max(worst, float(np.max(np.abs(update[mask] - expected[mask]) / expected[mask])))
        assert np.all(update[~mask] == 0)
    assert verdict(3, "update magnitude", worst <= 1e-10, f"worst rel err {worst:.2e} over 20 instances")


# ---------------------------------------------------------------------------
# 4. attack oracle equivalence


def test_criterion_4_attack_oracle():
    start = time.perf_counter()
    rates = {}
    for kind in ("pwws", "textfooler"):
        matches, cases = single_flip_agreement(kind, n_cases=100)
        rates[kind] = (matches, cases)
    elapsed = time.perf_counter() - start
    ok = all(c == 100 and m >= 0.95 * c for m, c in rates.values()) and elapsed <= 300
    detail = ", ".join(f"{k} {m}/{c}" for k, (m, c) in rates.items()) + f"; {elapsed:.1f}s"
    assert verdict(4, "attack oracle", ok, detail)


# ---------------------------------------------------------------------------
# desk-scale pipeline shared by criteria 5-9

DESK_ABLATIONS = ("beta_sweep", "drop_subdetector")


def _run_pipeline(out):
    cfg = load_config(seed=0, out=str(out))
    timings = {}
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        for name, fn in (
            ("prepare", harness.cmd_prepare),
            ("train-victim", harness.cmd_train_victim),
            ("gen-adv", harness.cmd_gen_adv),
            ("train-detector", harness.cmd_train_detector),
            ("eval-defense", harness.cmd_eval_defense),
            ("eval-detection", harness.cmd_eval_detection),
        ):
            t = time.perf_counter()
            fn(cfg)
            timings[name] = time.perf_counter() - t
        for mode in DESK_ABLATIONS:
            t = time.perf_counter()
            harness.cmd_ablate(cfg, mode)
            timings[mode] = time.perf_counter() - t
        harness.cmd_report(cfg)
    return cfg, timings


def _rows(cfg, name):
    return json.loads((cfg.run_dir / "metrics" / f"{name}.json").read_text())["rows"]


@pytest.fixture(scope="module")
def desk(tmp_path_factory):
    return _run_pipeline(tmp_path_factory.mktemp("desk-a"))


def test_criterion_5_detector(desk):
    cfg, timings = desk
    items = separable_items(600, seed=0)
    ens, _ = train_detector(DetectorEnsemble.create(2, DetectorConfig(hidden=8, combiner_hidden=8, lr=5e-3, max_epochs=15, seed=1)), items)
    synthetic_acc = evaluate_detection(ens, items.split("test"))["accuracy"]
    rows = [r for r in _rows(cfg, "detection") if r["detector"] == "textshield"]
    within = float(np.mean([r["f1"] for r in rows if r["attack"] in cfg.attacks.train]))
    loo = next(r["f1"] for r in rows if r["attack"] == cfg.attacks.held_out)
    spent = sum(timings[k] for k in ("prepare", "train-victim", "gen-adv", "train-detector", "eval-detection"))
    ok = synthetic_acc >= 0.99 and within >= 0.85 and loo >= 0.70 and spent <= 1800
    detail = (
        f"synthetic acc {synthetic_acc:.3f}; K={cfg.detector.k_per_class} within-distribution F1 {within:.3f} "
        f"({', '.join(cfg.attacks.train)}), leave-out {cfg.attacks.held_out} F1 {loo:.3f}; {spent:.0f}s"
    )
    assert verdict(5, "detector", ok, detail)


def test_criterion_6_defense_restoration(desk):
    cfg, _ = desk
    rows = _rows(cfg, "defense")
    ok, parts = True, []
    for kind in sorted({r["attack"] for r in rows}):
        none = next(r for r in rows if r["defense"] == "none" and r["attack"] == kind)
        ts = next(r for r in rows if r["defense"] == "textshield" and r["attack"] == kind)
        this = (
            none["adversarial_accuracy"] <= 0.4 * none["clean_accuracy"]
            and ts["adversarial_accuracy"] >= none["adversarial_accuracy"] + 0.20
            and none["clean_accuracy"] - ts["clean_accuracy"] <= 0.05
        )
        ok &= this
        parts.append(f"{kind}: clean {none['clean_accuracy']:.3f}->{ts['clean_accuracy']:.3f}, adv {none['adversarial_accuracy']:.3f}->{ts['adversarial_accuracy']:.3f}")
    assert verdict(6, "defense restoration", ok, "; ".join(parts))


def test_criterion_7_beta_shape(desk):
    cfg, _ = desk
    rows = _rows(cfg, "ablate_beta_sweep")
    ok, parts = True, []
    for kind in sorted({r["attack"] for r in rows}):
        at = {r["beta"]: r for r in rows if r["attack"] == kind and r["variant"] == "textshield"}
        vo = next(r for r in rows if r["attack"] == kind and r["variant"] == "verdict_only")
        this = at[0.4]["adversarial_accuracy"] >= at[1.0]["adversarial_accuracy"] and (
            at[1.0]["adversarial_accuracy"] == vo["adversarial_accuracy"] and at[1.0]["clean_accuracy"] == vo["clean_accuracy"]
        )
        ok &= this
        parts.append(f"{kind}: b=0.4 {at[0.4]['adversarial_accuracy']:.3f}, b=1.0 {at[1.0]['adversarial_accuracy']:.3f}, verdict-only {vo['adversarial_accuracy']:.3f}")
    assert verdict(7, "beta ablation", ok, "; ".join(parts))


def test_criterion_8_subdetector_ablation(desk):
    cfg, _ = desk
    rows = _rows(cfg, "ablate_drop_subdetector")
    defense = _rows(cfg, "defense")
    exact = all(
        r["adversarial_accuracy"] == next(d for d in defense if d["defense"] == "none" and d["attack"] == r["attack"])["adversarial_accuracy"]
        for r in rows
        if r["removed"] == "-All"
    )
    dev = {}
    for r in rows:
        if r["removed"] != "-All":
            dev.setdefault(r["removed"], {})[r["seed_index"]] = r["dev_f1"]
    mean = {k: float(np.mean(list(v.values()))) for k, v in dev.items()}
    wins = sum(mean["full"] >= mean[k] for k in harness.REMOVALS)
    ok = exact and wins >= 3 and all(len(v) == 3 for v in dev.values())
    detail = f"-All exact {exact}; mean dev F1 full {mean['full']:.3f} vs " + ", ".join(f"{k} {mean[k]:.3f}" for k in harness.REMOVALS) + f"; {wins}/4"
    assert verdict(8, "sub-detector ablation", ok, detail)


def test_criterion_9_determinism(desk, tmp_path_factory):
    cfg_a, _ = desk
    cfg_b, _ = _run_pipeline(tmp_path_factory.mktemp("desk-b"))
    rep_a, rep_b = cfg_a.run_dir.parent / "reports", cfg_b.run_dir.parent / "reports"
    names = sorted(p.name for p in rep_a.iterdir())
    same = names == sorted(p.name for p in rep_b.iterdir()) and all((rep_a / n).read_bytes() == (rep_b / n).read_bytes() for n in names)
    tmp = tmp_path_factory.mktemp("ckpt")
    victim = load_checkpoint(cfg_a.run_dir / "victim.ckpt")
    save_checkpoint(victim, tmp / "victim.ckpt")
    ens = load_detector(cfg_a.run_dir / "detector.ckpt")
    save_detector(ens, tmp / "detector.ckpt")
    round_trip = all((tmp / n).read_bytes() == (cfg_a.run_dir / n).read_bytes() for n in ("victim.ckpt", "detector.ckpt"))
    round_trip &= all((cfg_a.run_dir / n).read_bytes() == (cfg_b.run_dir / n).read_bytes() for n in ("victim.ckpt", "detector.ckpt"))
    ok = same and round_trip
    assert verdict(9, "determinism", ok, f"{len(names)} report files identical: {same}; checkpoints bit-exact: {round_trip}")
