"""Experiment pipeline behind the command-line interface.

Each ``cmd_*`` function reads its inputs from the run directory
(``<out>/seed-<seed>``), writes its outputs there, and returns a small
summary dict.  Randomness is fanned out from the master seed with
``derive_seed(master, component)``, so any single step can be re-run on its
own and reproduces the same bytes.

Run directory layout::

    data/                 synthetic benchmark (when data.synthetic)
    victim.ckpt
    detection/            AWI records + manifest of the detector's data
    detector.ckpt
    eval/                 sampled test sentences, their attacks and AWI
    metrics/*.json        metric rows consumed by ``report``
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .attacks import KINDS, AttackConfig, derive_seed, run_attack
from .baselines import FgwsConfig, FgwsDetector, WdrDetector, WdrModel, fgws_transform
from .config import ConfigError, ExperimentConfig
from .corrector import CorrectorConfig, correct, suspects_for
from .data import Corpus, EncodedExample, encode, load_corpus, write_dataset
from .detector import (
    DetectionItem,
    DetectorConfig,
    DetectorEnsemble,
    build_detection_data,
    detection_metrics,
    evaluate_detection,
    load_detection_data,
    load_detector,
    save_detection_data,
    save_detector,
    train_detector,
)
from .saliency import METHODS, AWIMatrix, awi_all, load_awi_records, save_awi_records
from .synthetic import SyntheticConfig, generate
from .victims import TrainConfig, VictimModel, accuracy, load_checkpoint, predict_from_probs, save_checkpoint, train_victim

logger = logging.getLogger(__name__)

ABLATIONS = ("beta_sweep", "k_sweep", "drop_subdetector")
REMOVALS = ("-VG", "-GBP", "-LRP", "-IG")


class MissingArtifactError(FileNotFoundError):
    """An upstream output is absent (CLI exit code 3)."""


class LeakageError(ConfigError):
    """Evaluation sentences overlap with training data."""


# ---------------------------------------------------------------------------
# paths and small helpers


def run_dir(cfg: ExperimentConfig) -> Path:
    return cfg.run_dir


def data_dir(cfg: ExperimentConfig) -> Path:
    return Path(cfg.data.dir) if cfg.data.dir else run_dir(cfg) / "data"


def _data_paths(cfg: ExperimentConfig) -> Dict[str, Path]:
    return {k: cfg.data.path(k, run_dir(cfg) / "data") for k in ("train", "test", "lexicon", "vectors")}


def _need(path: Path, what: str, command: str) -> Path:
    if not Path(path).exists():
        raise MissingArtifactError(f"{what} not found at {path}; run `textshield {command}` first")
    return Path(path)


def text_hash(tokens: Sequence[str]) -> str:
    return hashlib.sha256(" ".join(tokens).encode("utf-8")).hexdigest()


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(obj, fh, sort_keys=True, indent=1)
        fh.write("\n")


def _read_json(path: Path):
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def _row(cfg: ExperimentConfig, **values) -> dict:
    return {"seed": cfg.seed, "config_hash": cfg.hash(), **values}


def load_benchmark(cfg: ExperimentConfig) -> Corpus:
    paths = _data_paths(cfg)
    for key in ("train", "test", "lexicon"):
        _need(paths[key], f"{key} data", "prepare")
    return load_corpus(paths["train"], paths["test"], paths["lexicon"], cfg.data.num_classes, paths["vectors"], cfg.data.min_count)


def load_victim(cfg: ExperimentConfig) -> VictimModel:
    return load_checkpoint(_need(run_dir(cfg) / "victim.ckpt", "victim checkpoint", "train-victim"))


def _encode_split(corpus: Corpus, split: str, victim: Optional[VictimModel] = None) -> List[EncodedExample]:
    rows = corpus.train if split == "train" else corpus.test
    if victim is not None:
        return [victim.encode(t, y) for y, t in rows]
    return [encode(t, corpus.vocab, y) for y, t in rows]


def _attack_cfg(cfg: ExperimentConfig, kind: str, seed: int) -> AttackConfig:
    a = cfg.attacks
    return AttackConfig(kind, a.max_fraction, a.pop_size, a.generations, 0.3, a.cos_threshold, seed)


def _detector_cfg(cfg: ExperimentConfig, seed: int, active=(True, True, True, True)) -> DetectorConfig:
    d = cfg.detector
    return DetectorConfig(
        hidden=d.hidden,
        combiner_input=d.combiner_input,
        view=d.view,
        active=tuple(active),
        transform=d.transform,
        lr=d.lr,
        batch_size=d.batch_size,
        max_epochs=d.max_epochs,
        patience=d.patience,
        seed=seed,
    )


def _corrector_cfg(cfg: ExperimentConfig, beta: Optional[float] = None) -> CorrectorConfig:
    c = cfg.corrector
    return CorrectorConfig(c.beta if beta is None else beta, c.strategy, c.freq_low_percentile)


# ---------------------------------------------------------------------------
# pipeline steps


def cmd_prepare(cfg: ExperimentConfig) -> dict:
    """Generate the synthetic benchmark (if configured) and check the data files."""
    paths = _data_paths(cfg)
    if cfg.data.synthetic:
        generate(data_dir(cfg), SyntheticConfig(n_train=cfg.data.n_train, n_test=cfg.data.n_test, seed=derive_seed(cfg.seed, "data")))
    corpus = load_benchmark(cfg)
    info = {
        "train": len(corpus.train),
        "test": len(corpus.test),
        "vocab": len(corpus.vocab),
        "lexicon_heads": len(corpus.lexicon.entries),
        "vectors": len(corpus.vectors),
        "paths": {k: str(v) for k, v in sorted(paths.items())},
    }
    _write_json(run_dir(cfg) / "metrics" / "data.json", _row(cfg, **info))
    return info


def cmd_train_victim(cfg: ExperimentConfig) -> dict:
    corpus = load_benchmark(cfg)
    v = cfg.victim
    hyper = {"emb_dim": v.emb_dim, "n_filters": v.n_filters, "hidden": v.hidden, "dropout": v.dropout}
    model = VictimModel.create(v.arch, corpus.vocab, cfg.data.num_classes, seed=derive_seed(cfg.seed, "victim-init"), **hyper)
    train = _encode_split(corpus, "train", model)
    test = _encode_split(corpus, "test", model)
    tc = TrainConfig(lr=v.lr, batch_size=v.batch_size, epochs=v.epochs, seed=derive_seed(cfg.seed, "victim-train"), dropout=v.dropout)
    model, curve = train_victim(model, train, tc)
    save_checkpoint(model, run_dir(cfg) / "victim.ckpt")
    info = {"arch": v.arch, "train_accuracy": accuracy(model, train), "test_accuracy": accuracy(model, test), "loss": curve}
    _write_json(run_dir(cfg) / "metrics" / "victim.json", _row(cfg, **info))
    return info


def _build_detection(cfg: ExperimentConfig, corpus: Corpus, victim: VictimModel, k: int, tag: str = "detection"):
    train = _encode_split(corpus, "train", victim)
    return build_detection_data(
        victim,
        train,
        cfg.attacks.train,
        cfg.attacks.held_out,
        k,
        corpus.lexicon,
        corpus.vectors,
        attack_cfg=_attack_cfg(cfg, cfg.attacks.train[0], derive_seed(cfg.seed, tag, "attacks")),
        seed=derive_seed(cfg.seed, tag, "split"),
        ig_steps=cfg.detector.ig_steps,
        awi_target=cfg.detector.awi_target,
    )


def cmd_gen_adv(cfg: ExperimentConfig) -> dict:
    """Attack training sentences with the training attacks and cache the balanced AWI dataset."""
    corpus = load_benchmark(cfg)
    victim = load_victim(cfg)
    data = _build_detection(cfg, corpus, victim, cfg.detector.k_per_class)
    save_detection_data(data, run_dir(cfg) / "detection")
    provenance: Dict[str, int] = {}
    for it in data.items:
        provenance[it.provenance] = provenance.get(it.provenance, 0) + 1
    info = {"splits": data.counts(), "provenance": provenance, "shortfall": {str(c): n for c, n in data.shortfall.items()}}
    _write_json(run_dir(cfg) / "metrics" / "detection_data.json", _row(cfg, **info))
    return info


def load_detection(cfg: ExperimentConfig):
    d = run_dir(cfg) / "detection"
    _need(d / "manifest.tsv", "detection dataset", "gen-adv")
    data = load_detection_data(d)
    check_provenance(data.items, cfg.attacks.held_out)
    return data


def check_provenance(items: Iterable[DetectionItem], held_out: str) -> None:
    leaked = [it for it in items if it.provenance == held_out and it.split in ("train", "dev")]
    if leaked:
        raise LeakageError(f"{len(leaked)} training/dev items were generated by the held-out attack {held_out!r}")


def _train_detector(cfg: ExperimentConfig, data, seed: int, active=(True, True, True, True)):
    ens = DetectorEnsemble.create(cfg.data.num_classes, _detector_cfg(cfg, seed, active))
    return train_detector(ens, data)


def cmd_train_detector(cfg: ExperimentConfig) -> dict:
    data = load_detection(cfg)
    ens, record = _train_detector(cfg, data, derive_seed(cfg.seed, "detector"))
    save_detector(ens, run_dir(cfg) / "detector.ckpt")
    info = {
        "dev_accuracy": record.dev_accuracy,
        "train_loss": record.train_loss,
        "best_epoch": record.best_epoch,
        "sub_grad_norms": record.sub_grad_norms,
        "test": evaluate_detection(ens, data.split("test")),
    }
    _write_json(run_dir(cfg) / "metrics" / "detector.json", _row(cfg, **info))
    return info


def load_ensemble(cfg: ExperimentConfig) -> DetectorEnsemble:
    return load_detector(_need(run_dir(cfg) / "detector.ckpt", "detector checkpoint", "train-detector"))


# ---------------------------------------------------------------------------
# evaluation sentences


@dataclass
class EvalSentence:
    tokens: List[str]
    label: int
    kind: str  # "benign" or an attack name
    success: bool = False
    n_subs: int = 0
    awi: Optional[Dict[str, AWIMatrix]] = None


@dataclass
class EvalSet:
    benign: List[EvalSentence]
    attacked: Dict[str, List[EvalSentence]]

    def all(self) -> List[EvalSentence]:
        out = list(self.benign)
        for kind in sorted(self.attacked):
            out.extend(self.attacked[kind])
        return out


def _training_hashes(cfg: ExperimentConfig, corpus: Corpus) -> set:
    hashes = {text_hash(t) for _, t in corpus.train}
    manifest = run_dir(cfg) / "detection" / "manifest.tsv"
    if manifest.exists():
        hashes |= {text_hash(it.text.split()) for it in load_detection_data(run_dir(cfg) / "detection").items}
    return hashes


def audit_leakage(eval_set: EvalSet, training_hashes: set) -> None:
    """Refuse to evaluate when any evaluation sentence (or its source) appears in training data."""
    clash = [s for s in eval_set.benign if text_hash(s.tokens) in training_hashes]
    if clash:
        raise LeakageError(f"{len(clash)} evaluation sentences also occur in training data, e.g. {' '.join(clash[0].tokens)!r}")


def _sample_eval(cfg: ExperimentConfig, corpus: Corpus, victim: VictimModel) -> List[Tuple[int, List[str]]]:
    train_hashes = {text_hash(t) for _, t in corpus.train}
    pool = [(y, t[: victim.hyper.max_len]) for y, t in corpus.test if t and text_hash(t) not in train_hashes]
    rng = np.random.default_rng(derive_seed(cfg.seed, "eval-sample"))
    n = min(cfg.eval.n_sentences, len(pool))
    if n < cfg.eval.n_sentences:
        warnings.warn(f"only {n} test sentences are disjoint from training data", stacklevel=2)
    picks = sorted(int(i) for i in rng.choice(len(pool), size=n, replace=False))
    return [pool[i] for i in picks]


def _eval_tsv(path: Path, sentences: Sequence[EvalSentence]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for s in sentences:
            fh.write(f"{s.label}\t{s.kind}\t{int(s.success)}\t{s.n_subs}\t{' '.join(s.tokens)}\n")


def _read_eval_tsv(path: Path) -> List[EvalSentence]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            label, kind, success, n_subs, text = line.rstrip("\n").split("\t", 4)
            out.append(EvalSentence(text.split(), int(label), kind, bool(int(success)), int(n_subs)))
    return out


def build_eval_set(cfg: ExperimentConfig, corpus: Corpus, victim: VictimModel) -> EvalSet:
    benign = [EvalSentence(t, y, "benign") for y, t in _sample_eval(cfg, corpus, victim)]
    attacked: Dict[str, List[EvalSentence]] = {}
    for kind in cfg.eval.attacks:
        rows = []
        for i, s in enumerate(benign):
            ex = victim.encode(s.tokens, s.label)
            res = run_attack(victim, ex, corpus.lexicon, _attack_cfg(cfg, kind, derive_seed(cfg.seed, "eval-attack", kind, i)), corpus.vectors)
            rows.append(EvalSentence(res.tokens, s.label, kind, res.success, res.n_subs))
        attacked[kind] = rows
    es = EvalSet(benign, attacked)
    for s in es.all():
        s.awi = awi_all(victim, victim.encode(s.tokens, s.label), cfg.detector.ig_steps, target=cfg.detector.awi_target)
    return es


def save_eval_set(es: EvalSet, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    _eval_tsv(out / "benign.tsv", es.benign)
    for kind, rows in sorted(es.attacked.items()):
        _eval_tsv(out / f"{kind}.tsv", rows)
    save_awi_records(out / "awi.bin", (s.awi[m] for s in es.all() for m in METHODS))


def load_eval_set(out: Path, kinds: Sequence[str]) -> EvalSet:
    benign = _read_eval_tsv(_need(out / "benign.tsv", "evaluation sentences", "eval-defense"))
    attacked = {k: _read_eval_tsv(_need(out / f"{k}.tsv", f"{k} evaluation attacks", "eval-defense")) for k in sorted(kinds)}
    es = EvalSet(benign, attacked)
    records = load_awi_records(out / "awi.bin")
    sentences = es.all()
    if len(records) != 4 * len(sentences):
        raise MissingArtifactError(f"evaluation AWI cache in {out} is incomplete; re-run eval-defense")
    for n, s in enumerate(sentences):
        s.awi = {m: records[4 * n + g] for g, m in enumerate(METHODS)}
    return es


def ensure_eval_set(cfg: ExperimentConfig, corpus: Corpus, victim: VictimModel) -> EvalSet:
    out = run_dir(cfg) / "eval"
    if (out / "awi.bin").exists() and all((out / f"{k}.tsv").exists() for k in cfg.eval.attacks):
        es = load_eval_set(out, cfg.eval.attacks)
    else:
        es = build_eval_set(cfg, corpus, victim)
        save_eval_set(es, out)
    audit_leakage(es, _training_hashes(cfg, corpus))
    return es


# ---------------------------------------------------------------------------
# defense evaluation


def victim_labels(victim: VictimModel, sentences: Sequence[EvalSentence]) -> np.ndarray:
    return np.argmax(victim.probs_tokens([s.tokens for s in sentences]), axis=1)


def ensemble_flags(ens: Optional[DetectorEnsemble], sentences: Sequence[EvalSentence]) -> np.ndarray:
    if ens is None:
        return np.zeros(len(sentences), dtype=bool)
    return ens.predict([s.awi for s in sentences]) == 1


def defended_labels(
    victim: VictimModel,
    sentences: Sequence[EvalSentence],
    flags: np.ndarray,
    ccfg: CorrectorConfig,
    corpus: Corpus,
    base: Optional[np.ndarray] = None,
    target: str = "logit",
) -> np.ndarray:
    """Final labels of the detect-then-correct pipeline given precomputed verdicts.

    Same steps as :func:`textshield.corrector.defend`, but batched and
    reusing cached AWI matrices.  Sentences the corrector leaves unchanged
    keep their first prediction.
    """
    labels = victim_labels(victim, sentences) if base is None else base.copy()
    fixed_idx, fixed_tokens = [], []
    for i, (s, flagged) in enumerate(zip(sentences, flags)):
        if not flagged:
            continue
        ex = victim.encode(s.tokens)
        tokens = s.tokens[: ex.true_length]
        sus = suspects_for(victim, tokens, ex, ccfg, corpus.lexicon, corpus.freq, s.awi["VG"] if s.awi else None, target)
        fixed = correct(tokens, [j for j, _, _ in sus], corpus.lexicon, corpus.freq, victim.vocab)
        if fixed != tokens:
            fixed_idx.append(i)
            fixed_tokens.append(fixed)
    if fixed_tokens:
        labels[fixed_idx] = np.argmax(victim.probs_tokens(fixed_tokens), axis=1)
    return labels


def _accuracy(pred: np.ndarray, sentences: Sequence[EvalSentence]) -> float:
    return float(np.mean(pred == np.array([s.label for s in sentences]))) if len(sentences) else float("nan")


def fgws_labels(victim, sentences, detector: FgwsDetector) -> np.ndarray:
    """FGWS as a defense: flagged sentences are classified after the frequency swap."""
    out = victim_labels(victim, sentences)
    for i, s in enumerate(sentences):
        ex = victim.encode(s.tokens)
        flagged, _ = detector.flag(victim, ex)
        if flagged:
            swapped = fgws_transform(s.tokens, detector.lexicon, detector.freq, victim.vocab, detector.cfg.percentile)
            out[i] = predict_from_probs(victim.probs_tokens([swapped])[0])[0]
    return out


def _fit_fgws(cfg: ExperimentConfig, corpus: Corpus, victim, data) -> FgwsDetector:
    det = FgwsDetector(corpus.lexicon, corpus.freq, FgwsConfig(percentile=cfg.eval.fgws_percentiles[0]))
    return det.fit(victim, data.split("dev"), cfg.eval.fgws_percentiles)


def cmd_eval_defense(cfg: ExperimentConfig) -> dict:
    corpus = load_benchmark(cfg)
    victim = load_victim(cfg)
    ens = load_ensemble(cfg)
    data = load_detection(cfg)
    es = ensure_eval_set(cfg, corpus, victim)
    fgws = _fit_fgws(cfg, corpus, victim, data)
    ccfg = _corrector_cfg(cfg)
    rows = []
    defenses = {
        "none": lambda sents: victim_labels(victim, sents),
        "textshield": lambda sents: defended_labels(victim, sents, ensemble_flags(ens, sents), ccfg, corpus, target=cfg.detector.awi_target),
        "fgws": lambda sents: fgws_labels(victim, sents, fgws),
    }
    for name, fn in defenses.items():
        clean = _accuracy(fn(es.benign), es.benign)
        for kind in sorted(es.attacked):
            sents = es.attacked[kind]
            rows.append(
                _row(
                    cfg,
                    victim=victim.arch,
                    defense=name,
                    attack=kind,
                    clean_accuracy=clean,
                    adversarial_accuracy=_accuracy(fn(sents), sents),
                    n=len(sents),
                )
            )
    _write_json(run_dir(cfg) / "metrics" / "defense.json", {"rows": rows})
    return {"rows": rows}


def _detection_pairs(es: EvalSet, kind: str) -> List[EvalSentence]:
    adv = [s for s in es.attacked[kind] if s.success and s.n_subs > 0]
    n = min(len(adv), len(es.benign))
    return adv[:n] + es.benign[:n]


def cmd_eval_detection(cfg: ExperimentConfig) -> dict:
    corpus = load_benchmark(cfg)
    victim = load_victim(cfg)
    ens = load_ensemble(cfg)
    data = load_detection(cfg)
    es = ensure_eval_set(cfg, corpus, victim)
    fgws = _fit_fgws(cfg, corpus, victim, data)
    wdr = WdrDetector(WdrModel.create(seed=derive_seed(cfg.seed, "wdr"))).fit(
        victim, data.split("train"), data.split("dev"), epochs=cfg.detector.max_epochs, lr=cfg.detector.lr
    )
    dataset = "synthetic" if cfg.data.synthetic else data_dir(cfg).name
    rows = []
    test_items = data.split("test")
    own = {
        "textshield": evaluate_detection(ens, test_items),
        "fgws": detection_metrics([it.label for it in test_items], fgws.predict_items(victim, test_items)),
        "wdr": detection_metrics([it.label for it in test_items], wdr.predict_items(victim, test_items)),
    }
    for name, m in own.items():
        rows.append(_row(cfg, dataset=dataset, attack="split-test", detector=name, n=len(test_items), **m))
    for kind in sorted(es.attacked):
        sents = _detection_pairs(es, kind)
        if not sents:
            continue
        items = [DetectionItem(s.awi, int(s.kind != "benign"), "test", s.kind, " ".join(s.tokens)) for s in sents]
        y = [it.label for it in items]
        preds = {
            "textshield": ens.predict([it.awi for it in items]),
            "fgws": fgws.predict_items(victim, items),
            "wdr": wdr.predict_items(victim, items),
        }
        for name, p in preds.items():
            rows.append(
                _row(
                    cfg,
                    dataset=dataset,
                    attack=kind,
                    detector=name,
                    held_out=kind == cfg.attacks.held_out,
                    n=len(items),
                    **detection_metrics(y, p),
                )
            )
    _write_json(run_dir(cfg) / "metrics" / "detection.json", {"rows": rows})
    return {"rows": rows}


# ---------------------------------------------------------------------------
# ablations


def _beta_sweep(cfg, corpus, victim, ens, es) -> List[dict]:
    rows = []
    base_benign = victim_labels(victim, es.benign)
    flags_benign = ensemble_flags(ens, es.benign)
    for kind in sorted(es.attacked):
        sents = es.attacked[kind]
        base = victim_labels(victim, sents)
        flags = ensemble_flags(ens, sents)
        # verdict only: flagged sentences are re-classified without any change
        rows.append(_row(cfg, mode="beta_sweep", attack=kind, beta=None, variant="verdict_only",
                         adversarial_accuracy=_accuracy(base, sents), clean_accuracy=_accuracy(base_benign, es.benign),
                         flagged=int(flags.sum())))
        for beta in cfg.eval.beta_grid:
            ccfg = _corrector_cfg(cfg, beta)
            adv = defended_labels(victim, sents, flags, ccfg, corpus, base, cfg.detector.awi_target)
            clean = defended_labels(victim, es.benign, flags_benign, ccfg, corpus, base_benign, cfg.detector.awi_target)
            rows.append(_row(cfg, mode="beta_sweep", attack=kind, beta=float(beta), variant="textshield",
                             adversarial_accuracy=_accuracy(adv, sents), clean_accuracy=_accuracy(clean, es.benign),
                             flagged=int(flags.sum())))
    return rows


def _k_sweep(cfg, corpus, victim, es) -> List[dict]:
    rows = []
    held = es.attacked.get(cfg.attacks.held_out, [])
    base = victim_labels(victim, held)
    for k in cfg.eval.k_grid:
        tag = f"k-sweep-{k}"
        data = _build_detection(cfg, corpus, victim, int(k), tag)
        ens, record = _train_detector(cfg, data, derive_seed(cfg.seed, tag, "detector"))
        adv = defended_labels(victim, held, ensemble_flags(ens, held), _corrector_cfg(cfg), corpus, base, cfg.detector.awi_target)
        rows.append(_row(cfg, mode="k_sweep", k=int(k), n_items=len(data.items), best_epoch=record.best_epoch,
                         dev_f1=evaluate_detection(ens, data.split("dev"))["f1"],
                         test_f1=evaluate_detection(ens, data.split("test"))["f1"],
                         attack=cfg.attacks.held_out, adversarial_accuracy=_accuracy(adv, held)))
    return rows


def _drop_subdetector(cfg, corpus, victim, es, data) -> List[dict]:
    rows = []
    ccfg = _corrector_cfg(cfg)
    masks = {"full": (True, True, True, True)}
    for g, name in enumerate(REMOVALS):
        masks[name] = tuple(i != g for i in range(4))
    bases = {kind: victim_labels(victim, sents) for kind, sents in es.attacked.items()}
    for s in range(cfg.eval.ablation_seeds):
        for name, active in masks.items():
            ens, _ = _train_detector(cfg, data, derive_seed(cfg.seed, "drop", s), active)
            dev_f1 = evaluate_detection(ens, data.split("dev"))["f1"]
            for kind in sorted(es.attacked):
                sents = es.attacked[kind]
                adv = defended_labels(victim, sents, ensemble_flags(ens, sents), ccfg, corpus, bases[kind], cfg.detector.awi_target)
                rows.append(_row(cfg, mode="drop_subdetector", removed=name, seed_index=s, dev_f1=dev_f1,
                                 attack=kind, adversarial_accuracy=_accuracy(adv, sents)))
    # removing every sub-detector leaves nothing to detect with: inputs go straight to the victim
    for kind in sorted(es.attacked):
        rows.append(_row(cfg, mode="drop_subdetector", removed="-All", seed_index=None, dev_f1=None,
                         attack=kind, adversarial_accuracy=_accuracy(bases[kind], es.attacked[kind])))
    return rows


def cmd_ablate(cfg: ExperimentConfig, mode: str) -> dict:
    if mode not in ABLATIONS:
        raise ConfigError(f"unknown ablation {mode!r}; choose from {', '.join(ABLATIONS)}")
    corpus = load_benchmark(cfg)
    victim = load_victim(cfg)
    data = load_detection(cfg)
    es = ensure_eval_set(cfg, corpus, victim)
    if mode == "beta_sweep":
        rows = _beta_sweep(cfg, corpus, victim, load_ensemble(cfg), es)
    elif mode == "k_sweep":
        rows = _k_sweep(cfg, corpus, victim, es)
    else:
        rows = _drop_subdetector(cfg, corpus, victim, es, data)
    _write_json(run_dir(cfg) / "metrics" / f"ablate_{mode}.json", {"rows": rows})
    return {"rows": rows}


# ---------------------------------------------------------------------------
# reports


TABLE1 = ("victim", "defense", "attack", "seed", "config_hash", "clean_accuracy", "adversarial_accuracy", "n")
TABLE2 = ("dataset", "attack", "detector", "seed", "config_hash", "f1", "recall", "precision", "accuracy", "n")


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return "nan" if math.isnan(v) else f"{v:.6f}"
    return str(v)


def _csv(rows: Sequence[dict], columns: Sequence[str]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(r.get(c)) for c in columns])
    return buf.getvalue()


def _collect(out: Path, name: str) -> List[dict]:
    rows = []
    for path in sorted(out.glob(f"seed-*/metrics/{name}.json")):
        rows.extend(_read_json(path)["rows"])
    return rows


def mean_std(values: Sequence[float]) -> Tuple[float, float]:
    v = np.asarray(values, dtype=np.float64)
    return float(v.mean()), float(v.std(ddof=1)) if v.size > 1 else 0.0


def _summary(rows: Sequence[dict], keys: Sequence[str], metrics: Sequence[str]) -> List[dict]:
    groups: Dict[tuple, List[dict]] = {}
    for r in rows:
        groups.setdefault(tuple(r[k] for k in keys), []).append(r)
    out = []
    for key in sorted(groups, key=lambda t: tuple(str(x) for x in t)):
        entry = dict(zip(keys, key))
        entry["seeds"] = sorted(r["seed"] for r in groups[key])
        for m in metrics:
            mu, sd = mean_std([r[m] for r in groups[key]])
            entry[m] = {"mean": mu, "std": sd}
        out.append(entry)
    return out


def cmd_report(cfg: ExperimentConfig) -> dict:
    """Collect metric rows from every seed under ``out`` into CSV tables and one JSON bundle."""
    out = Path(cfg.out)
    t1 = sorted(_collect(out, "defense"), key=lambda r: (r["victim"], r["defense"], r["attack"], r["seed"]))
    t2 = sorted(_collect(out, "detection"), key=lambda r: (r["dataset"], r["attack"], r["detector"], r["seed"]))
    ablations = {m: _collect(out, f"ablate_{m}") for m in ABLATIONS}
    if not t1 and not t2 and not any(ablations.values()):
        raise MissingArtifactError(f"no metric rows under {out}; run the evaluation commands first")
    rep = out / "reports"
    rep.mkdir(parents=True, exist_ok=True)
    written = {}
    if t1:
        (rep / "table1.csv").write_text(_csv(t1, TABLE1), encoding="utf-8")
        written["table1"] = str(rep / "table1.csv")
    if t2:
        (rep / "table2.csv").write_text(_csv(t2, TABLE2), encoding="utf-8")
        written["table2"] = str(rep / "table2.csv")
    for mode, rows in ablations.items():
        if rows:
            cols = sorted({k for r in rows for k in r})
            rows = sorted(rows, key=lambda r: tuple(_fmt(r.get(c)) for c in cols))
            (rep / f"{mode}.csv").write_text(_csv(rows, cols), encoding="utf-8")
            written[mode] = str(rep / f"{mode}.csv")
    bundle = {
        "table1": t1,
        "table2": t2,
        "ablations": ablations,
        "summary": {
            "table1": _summary(t1, ("victim", "defense", "attack"), ("clean_accuracy", "adversarial_accuracy")),
            "table2": _summary(t2, ("dataset", "attack", "detector"), ("f1", "recall")),
        },
    }
    _write_json(rep / "report.json", bundle)
    written["json"] = str(rep / "report.json")
    return written


def cmd_run_all(cfg: ExperimentConfig, ablations: Sequence[str] = ("beta_sweep",)) -> dict:
    steps = [
        ("prepare", cmd_prepare),
        ("train-victim", cmd_train_victim),
        ("gen-adv", cmd_gen_adv),
        ("train-detector", cmd_train_detector),
        ("eval-defense", cmd_eval_defense),
        ("eval-detection", cmd_eval_detection),
    ]
    for name, fn in steps:
        logger.info("== %s", name)
        fn(cfg)
    for mode in ablations:
        logger.info("== ablate %s", mode)
        cmd_ablate(cfg, mode)
    return cmd_report(cfg)
