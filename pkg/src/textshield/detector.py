"""Saliency-based adversarial detector.

Four LSTM sub-detectors read the VG, GBP, LRP and IG AWI sequences (one
per method) and each emits two logits from its final hidden state.  A
two-layer MLP combiner turns the concatenated sub-detector logits (or,
in ``hidden`` mode, the concatenated hidden states) into the final
benign/adversarial decision.

The four LSTMs run as one grouped computation: every sub-detector
parameter carries a leading group axis of size 4.  Groups never mix, so
switching a sub-detector off cannot change another's outputs.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import autograd as ag
from . import checkpoint
from .attacks import AttackConfig, AttackResult, derive_seed, generate_adversarial_corpus
from .autograd import Tape
from .data import EncodedExample, SynonymLexicon, encode
from .layers import init_dense, init_lstm, lstm_final_state
from .optim import Adam, global_norm
from .saliency import METHODS, AWIMatrix, awi_all, load_awi_records, save_awi_records
from .victims import TrainingError, VictimModel

logger = logging.getLogger(__name__)

ADVERSARIAL, BENIGN = 1, 0
SPLITS = ("train", "dev", "test")


@dataclass
class DetectorConfig:
    hidden: int = 128
    combiner_hidden: int = 64
    combiner_input: str = "logits"
    view: str = "matrix"
    active: Tuple[bool, bool, bool, bool] = (True, True, True, True)
    reverse: bool = True
    mask_pad: bool = True
    transform: str = "log"
    aux_weight: float = 1.0
    lr: float = 5e-4
    batch_size: int = 32
    max_epochs: int = 30
    patience: int = 5
    seed: int = 0

    def __post_init__(self):
        self.active = tuple(bool(a) for a in self.active)
        if len(self.active) != 4:
            raise ValueError("active mask must have 4 entries")
        if not any(self.active):
            raise ValueError("at least one sub-detector must be active")
        if self.combiner_input not in ("logits", "hidden"):
            raise ValueError(f"unknown combiner input {self.combiner_input!r}")
        if self.view not in ("matrix", "column"):
            raise ValueError(f"unknown detector view {self.view!r}")
        if self.transform not in ("linear", "log"):
            raise ValueError(f"unknown input transform {self.transform!r}")


def _shapes(cfg: DetectorConfig, num_classes: int) -> Dict[str, tuple]:
    width = num_classes if cfg.view == "matrix" else 1
    h = cfg.hidden
    comb_in = 8 if cfg.combiner_input == "logits" else 4 * h
    return {
        "lstm.wx": (4, width, 4 * h),
        "lstm.wh": (4, h, 4 * h),
        "lstm.b": (4, 4 * h),
        "head.w": (4, h, 2),
        "head.b": (4, 2),
        "comb.w1": (comb_in, cfg.combiner_hidden),
        "comb.b1": (cfg.combiner_hidden,),
        "comb.w2": (cfg.combiner_hidden, 2),
        "comb.b2": (2,),
    }


class DetectorEnsemble:
    def __init__(self, cfg: DetectorConfig, num_classes: int, params: Dict[str, np.ndarray], scale: Optional[np.ndarray] = None):
        checkpoint.check_shapes(params, _shapes(cfg, num_classes))
        self.cfg = cfg
        self.num_classes = num_classes
        self.params = params
        self.scale = np.ones(4) if scale is None else np.asarray(scale, dtype=np.float64)

    @classmethod
    def create(cls, num_classes: int, cfg: Optional[DetectorConfig] = None) -> "DetectorEnsemble":
        cfg = cfg or DetectorConfig()
        rng = np.random.default_rng(derive_seed(cfg.seed, "detector-init"))
        width = num_classes if cfg.view == "matrix" else 1
        p: Dict[str, np.ndarray] = {}
        p["lstm.wx"], p["lstm.wh"], p["lstm.b"] = init_lstm(rng, width, cfg.hidden, groups=4)
        p["head.w"], p["head.b"] = init_dense(rng, cfg.hidden, 2, groups=4)
        comb_in = 8 if cfg.combiner_input == "logits" else 4 * cfg.hidden
        p["comb.w1"], p["comb.b1"] = init_dense(rng, comb_in, cfg.combiner_hidden)
        p["comb.w2"], p["comb.b2"] = init_dense(rng, cfg.combiner_hidden, 2)
        return cls(cfg, num_classes, p)

    @property
    def active(self) -> np.ndarray:
        return np.array(self.cfg.active, dtype=np.float64)

    def with_active(self, active: Sequence[bool]) -> "DetectorEnsemble":
        cfg = DetectorConfig(**{**asdict(self.cfg), "active": tuple(active)})
        return DetectorEnsemble(cfg, self.num_classes, {k: v.copy() for k, v in self.params.items()}, self.scale.copy())

    def inputs(self, batch: Sequence[Dict[str, AWIMatrix]]) -> np.ndarray:
        """Stack AWI matrices into a ``(4, B, T, width)`` array, scaled per method.

        AWI values are heavy-tailed; the default ``log`` transform feeds
        ``log(1 + x / scale)`` so a handful of huge entries do not saturate
        the LSTM gates.
        """
        out = []
        for g, method in enumerate(METHODS):
            rows = []
            for awi4 in batch:
                m = awi4[method]
                if m.values.shape[1] != self.num_classes:
                    raise ValueError(f"{method} AWI has {m.values.shape[1]} columns, detector expects {self.num_classes}")
                rows.append(m.values if self.cfg.view == "matrix" else m.values[:, m.label : m.label + 1])
            out.append(np.stack(rows) / self.scale[g])
        x = np.stack(out)
        return np.log1p(x) if self.cfg.transform == "log" else x

    def fit_scale(self, batch: Sequence[Dict[str, AWIMatrix]]) -> None:
        """Per-method scale: mean over sentences of the largest AWI entry."""
        scale = []
        for method in METHODS:
            peaks = [float(awi4[method].values[: awi4[method].length].max()) for awi4 in batch]
            s = float(np.mean(peaks)) if peaks else 1.0
            scale.append(s if s > 0 else 1.0)
        self.scale = np.array(scale)

    @staticmethod
    def lengths(batch: Sequence[Dict[str, AWIMatrix]]) -> np.ndarray:
        return np.array([awi4[METHODS[0]].length for awi4 in batch])

    def record(self, x: np.ndarray, lengths: Optional[np.ndarray] = None, param_grads: bool = False):
        """Forward on a fresh tape.

        With ``mask_pad`` (and ``lengths`` given) rows past each sentence's
        end are treated as padding: the LSTM state is carried across them
        unchanged, so the recurrence can stop at the longest sentence
        without changing any output.
        """
        cfg = self.cfg
        h = cfg.hidden
        steps, mask = None, None
        if cfg.mask_pad and lengths is not None:
            steps = max(1, int(np.max(lengths)))
            x = x[:, :, :steps]
            mask = np.arange(steps)[None, :] < np.asarray(lengths)[:, None]
        tape = Tape()
        p = {k: tape.leaf(v, requires_grad=param_grads) for k, v in self.params.items()}
        width = x.shape[-1]
        wx = ag.reshape(p["lstm.wx"], (4, 1, width, 4 * h))
        b = ag.reshape(p["lstm.b"], (4, 1, 1, 4 * h))
        xproj = ag.affine(tape.constant(x), wx, b)
        hid = lstm_final_state(xproj, p["lstm.wh"], h, mask=mask, reverse=cfg.reverse, fused=True)
        sub = ag.affine(hid, p["head.w"], ag.reshape(p["head.b"], (4, 1, 2)))
        mask = tape.constant(self.active[:, None, None])
        sub_m = ag.mul(sub, mask)
        feed = sub_m if cfg.combiner_input == "logits" else ag.mul(hid, mask)
        comb_in = ag.concat([ag.take(feed, g, axis=0) for g in range(4)], axis=-1)
        z = ag.relu(ag.affine(comb_in, p["comb.w1"], p["comb.b1"]))
        logits = ag.affine(z, p["comb.w2"], p["comb.b2"])
        return tape, p, sub, logits

    def forward_batch(self, batch: Sequence[Dict[str, AWIMatrix]]):
        """Returns (verdicts, sub-detector logits (B, 4, 2), combined probabilities (B, 2))."""
        _, _, sub, logits = self.record(self.inputs(batch), self.lengths(batch))
        lv = logits.values
        e = np.exp(lv - lv.max(axis=1, keepdims=True))
        probs = e / e.sum(axis=1, keepdims=True)
        sub_logits = np.transpose(sub.values, (1, 0, 2)) * self.active[None, :, None]
        return np.argmax(probs, axis=1), sub_logits, probs

    def predict(self, batch: Sequence[Dict[str, AWIMatrix]], batch_size: int = 64) -> np.ndarray:
        out = []
        for i in range(0, len(batch), batch_size):
            out.append(self.forward_batch(batch[i : i + batch_size])[0])
        return np.concatenate(out) if out else np.zeros(0, dtype=int)

    # detector protocol used by the defense pipeline
    needs_awi = True

    def flag(self, victim, ex: EncodedExample, awi4: Dict[str, AWIMatrix]) -> Tuple[bool, float]:
        z, _, probs = detector_forward(self, awi4)
        return z == ADVERSARIAL, float(probs[ADVERSARIAL])


def detector_forward(ens: DetectorEnsemble, awi4: Dict[str, AWIMatrix]):
    """Single-sentence forward: (verdict z, sub-detector logits (4, 2), combined probs (2,))."""
    z, sub, probs = ens.forward_batch([awi4])
    return int(z[0]), sub[0], probs[0]


# ---------------------------------------------------------------------------
# data


@dataclass
class DetectionItem:
    awi: Dict[str, AWIMatrix]
    label: int
    split: str
    provenance: str
    text: str
    source: int = -1


@dataclass
class BalancedDetectionDataset:
    items: List[DetectionItem]
    held_out: Optional[str] = None
    shortfall: Dict[int, int] = field(default_factory=dict)

    def split(self, name: str) -> List[DetectionItem]:
        return [it for it in self.items if it.split == name]

    def counts(self) -> Dict[str, int]:
        return {s: len(self.split(s)) for s in SPLITS}


def split_721(n: int, rng: np.random.Generator) -> List[str]:
    order = rng.permutation(n)
    n_train = int(round(0.7 * n))
    n_dev = int(round(0.2 * n))
    tags = [""] * n
    for rank, i in enumerate(order):
        tags[i] = "train" if rank < n_train else ("dev" if rank < n_train + n_dev else "test")
    return tags


def assign_splits(items: List[DetectionItem], seed: int) -> None:
    """Seeded 7:2:1 split, stratified by label so every split stays balanced."""
    rng = np.random.default_rng(derive_seed(seed, "split"))
    for label in (BENIGN, ADVERSARIAL):
        group = [it for it in items if it.label == label]
        for it, tag in zip(group, split_721(len(group), rng)):
            it.split = tag


def build_detection_data(
    victim: VictimModel,
    examples: Sequence[EncodedExample],
    attacks: Sequence[str],
    held_out_attack: Optional[str],
    k_per_class: int,
    lexicon: SynonymLexicon,
    vectors=None,
    attack_cfg: Optional[AttackConfig] = None,
    seed: int = 0,
    ig_steps: int = 32,
    awi_target: str = "logit",
) -> BalancedDetectionDataset:
    """Adversarial sentences from the training attacks plus as many benign ones, with AWI matrices."""
    if held_out_attack is not None and held_out_attack in attacks:
        raise ValueError(f"held-out attack {held_out_attack!r} is also a training attack")
    cfg = attack_cfg or AttackConfig(seed=seed)
    adv = generate_adversarial_corpus(victim, examples, list(attacks), k_per_class, lexicon, cfg, vectors)
    attacked = {id(r.original) for r in adv}
    per_class: Dict[int, int] = {}
    for r in adv:
        per_class[r.original.label] = per_class.get(r.original.label, 0) + 1
    shortfall = {c: k_per_class - n for c, n in per_class.items() if n < k_per_class}

    rng = np.random.default_rng(derive_seed(seed, "benign"))
    benign_idx: List[int] = []
    for c, n in sorted(per_class.items()):
        pool = [i for i, e in enumerate(examples) if e.label == c and id(e) not in attacked]
        if len(pool) < n:
            pool = [i for i, e in enumerate(examples) if e.label == c]
        benign_idx.extend(int(i) for i in rng.choice(pool, size=n, replace=False))

    items: List[DetectionItem] = []
    index_of = {id(e): i for i, e in enumerate(examples)}
    for r in adv:
        ex = victim.encode(r.tokens, r.original.label)
        items.append(DetectionItem(awi_all(victim, ex, ig_steps, target=awi_target), ADVERSARIAL, "", r.kind, r.text, index_of[id(r.original)]))
    for i in benign_idx:
        ex = examples[i]
        items.append(DetectionItem(awi_all(victim, ex, ig_steps, target=awi_target), BENIGN, "", "benign", " ".join(ex.tokens(victim.vocab)), i))
    assign_splits(items, seed)
    return BalancedDetectionDataset(items, held_out_attack, shortfall)


def awi_items(
    victim, texts_labels, flag: int, provenance: Sequence[str], ig_steps: int = 32, awi_target: str = "logit"
) -> List[DetectionItem]:
    """Wrap already-encoded sentences as test items (no split logic)."""
    out = []
    for (tokens, label), prov in zip(texts_labels, provenance):
        ex = victim.encode(tokens, label)
        out.append(DetectionItem(awi_all(victim, ex, ig_steps, target=awi_target), flag, "test", prov, " ".join(tokens)))
    return out


def save_detection_data(data: BalancedDetectionDataset, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_awi_records(out / "awi.bin", (it.awi[m] for it in data.items for m in METHODS))
    with open(out / "manifest.tsv", "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"# held_out={data.held_out or ''}\n")
        for it in data.items:
            fh.write(f"{it.label}\t{it.split}\t{it.provenance}\t{it.source}\t{it.text}\n")


def load_detection_data(out_dir) -> BalancedDetectionDataset:
    out = Path(out_dir)
    records = load_awi_records(out / "awi.bin")
    items: List[DetectionItem] = []
    held_out = None
    with open(out / "manifest.tsv", encoding="utf-8") as fh:
        rows = []
        for line in fh:
            if line.startswith("# held_out="):
                held_out = line.strip().split("=", 1)[1] or None
                continue
            rows.append(line.rstrip("\n").split("\t", 4))
    if len(records) != 4 * len(rows):
        raise ValueError(f"manifest lists {len(rows)} items but awi.bin holds {len(records)} matrices")
    for n, (label, split, prov, source, text) in enumerate(rows):
        awi = {m: records[4 * n + g] for g, m in enumerate(METHODS)}
        items.append(DetectionItem(awi, int(label), split, prov, text, int(source)))
    return BalancedDetectionDataset(items, held_out)


# ---------------------------------------------------------------------------
# training and evaluation


def _loss(ens: DetectorEnsemble, x: np.ndarray, lengths: np.ndarray, y: np.ndarray):
    tape, p, sub, logits = ens.record(x, lengths, param_grads=True)
    loss = ag.cross_entropy(logits, y)
    n_active = int(ens.active.sum())
    if ens.cfg.aux_weight > 0:
        weight = tape.constant(ens.cfg.aux_weight / n_active)
        for g in range(4):
            if ens.cfg.active[g]:
                loss = ag.add(loss, ag.mul(ag.cross_entropy(ag.take(sub, g, axis=0), y), weight))
    return tape, p, loss


@dataclass
class TrainRecord:
    dev_accuracy: List[float] = field(default_factory=list)
    train_loss: List[float] = field(default_factory=list)
    best_epoch: int = 0
    sub_grad_norms: List[float] = field(default_factory=list)


def train_detector(
    ens: DetectorEnsemble,
    data: BalancedDetectionDataset,
    epochs: Optional[int] = None,
) -> Tuple[DetectorEnsemble, TrainRecord]:
    """Joint Adam training of sub-detectors and combiner; keeps the best-dev epoch."""
    cfg = ens.cfg
    train, dev = data.split("train"), data.split("dev")
    if not train or not dev:
        raise ValueError("detector training needs non-empty train and dev splits")
    epochs = cfg.max_epochs if epochs is None else epochs
    ens.fit_scale([it.awi for it in train])
    record = TrainRecord()
    if epochs <= 0:
        return ens, record
    x_train = ens.inputs([it.awi for it in train])
    len_train = ens.lengths([it.awi for it in train])
    y_train = np.array([it.label for it in train])
    y_dev = np.array([it.label for it in dev])
    dev_awi = [it.awi for it in dev]

    rng = np.random.default_rng(derive_seed(cfg.seed, "detector-train"))
    opt = Adam(ens.params, lr=cfg.lr)
    best_acc, best_params, stale = -1.0, None, 0
    sub_keys = [k for k in ens.params if k.startswith(("lstm.", "head."))]
    for epoch in range(epochs):
        order = rng.permutation(len(train))
        total = 0.0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            tape, p, loss = _loss(ens, x_train[:, idx], len_train[idx], y_train[idx])
            value = float(loss.values)
            if not np.isfinite(value):
                raise TrainingError(f"non-finite detector loss at epoch {epoch}")
            grads = ag.backward(tape, loss.index)
            named = {k: grads[t.index] for k, t in p.items() if t.index in grads}
            if epoch == 0 and start == 0:
                record.sub_grad_norms = [
                    global_norm({k: named[k][g] for k in sub_keys if k in named}) for g in range(4)
                ]
            opt.step(named)
            total += value * len(idx)
        record.train_loss.append(total / len(train))
        acc = float(np.mean(ens.predict(dev_awi) == y_dev))
        record.dev_accuracy.append(acc)
        logger.info("detector epoch %d loss %.4f dev acc %.4f", epoch + 1, record.train_loss[-1], acc)
        if acc > best_acc:
            best_acc, stale = acc, 0
            best_params = {k: v.copy() for k, v in ens.params.items()}
            record.best_epoch = epoch + 1
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    for k, v in best_params.items():
        ens.params[k][...] = v
    return ens, record


def detection_metrics(y_true: Sequence[int], y_pred: Sequence[int]) -> Dict[str, float]:
    """Adversarial is the positive class."""
    y_true = np.asarray(y_true)
    y_pred = np.asarray(y_pred)
    if y_true.size == 0:
        raise ValueError("empty test set")
    tp = int(np.sum((y_pred == 1) & (y_true == 1)))
    fp = int(np.sum((y_pred == 1) & (y_true == 0)))
    fn = int(np.sum((y_pred == 0) & (y_true == 1)))
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return {
        "f1": f1,
        "recall": recall,
        "precision": precision,
        "accuracy": float(np.mean(y_true == y_pred)),
    }


def evaluate_detection(ens: DetectorEnsemble, items: Sequence[DetectionItem]) -> Dict[str, float]:
    if not items:
        raise ValueError("empty test set")
    preds = ens.predict([it.awi for it in items])
    return detection_metrics([it.label for it in items], preds)


def save_detector(ens: DetectorEnsemble, path) -> None:
    meta = {"config": asdict(ens.cfg), "num_classes": ens.num_classes, "scale": [float(s) for s in ens.scale]}
    meta["config"]["active"] = list(meta["config"]["active"])
    checkpoint.save(path, "detector", meta, ens.params)


def load_detector(path) -> DetectorEnsemble:
    _, meta, params = checkpoint.load(path, expected_kind="detector")
    cfg = DetectorConfig(**meta["config"])
    return DetectorEnsemble(cfg, int(meta["num_classes"]), params, np.array(meta["scale"]))
