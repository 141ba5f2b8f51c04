"""Adaptive word importance (AWI) matrices from four saliency methods.

Each method gives, for every word position i and class j, a signed score of
how much word i drives the class-j output; the AWI entry is its absolute
value.  Matrices always have shape ``(max_len, num_classes)``; padding rows
are computed like any other row unless ``mask_pad`` is set.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import BinaryIO, Dict, Iterable, List, Optional

import numpy as np

from . import autograd as ag
from .autograd import BackwardMode
from .data import EncodedExample
from .victims import Recording, VictimModel, predict_from_probs

METHODS = ("VG", "GBP", "LRP", "IG")
TARGETS = ("logit", "prob")


@dataclass
class AWIMatrix:
    values: np.ndarray
    method: str
    label: int
    length: Optional[int] = None

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown saliency method {self.method!r}")
        if self.values.ndim != 2:
            raise ValueError("AWI values must be 2-D")
        if self.length is None:
            self.length = self.values.shape[0]

    def column(self, j: Optional[int] = None) -> np.ndarray:
        return self.values[:, self.label if j is None else j]


def _record(model: VictimModel, ex: EncodedExample) -> Recording:
    ids = ex.ids[None, :]
    return model.record(ids, np.array([ex.true_length]), embedded=model.embed(ids))


def _class_output(rec: Recording, j: int, target: str) -> ag.Tensor:
    out = ag.softmax(rec.logits) if target == "prob" else rec.logits
    return ag.total(ag.take(out, j, axis=-1))


def _predicted(rec: Recording) -> int:
    logits = rec.logits.values[0]
    e = np.exp(logits - logits.max())
    return predict_from_probs(e / e.sum())[0]


def _finish(signed: np.ndarray, ex: EncodedExample, mask_pad: bool) -> np.ndarray:
    out = np.abs(signed)
    if mask_pad:
        out[ex.true_length :] = 0.0
    return out


def gradient_scores(
    model: VictimModel,
    ex: EncodedExample,
    mode: BackwardMode = BackwardMode.STANDARD,
    reduce: str = "mean",
    target: str = "logit",
    rec: Optional[Recording] = None,
) -> np.ndarray:
    """Per-word, per-class gradient of the class output, reduced over the embedding axis.

    ``reduce="mean"`` returns the signed average; ``"abs_mean"`` averages
    absolute components instead.
    """
    rec = rec or _record(model, ex)
    cols = []
    for j in range(model.num_classes):
        out = _class_output(rec, j, target)
        g = ag.backward(rec.tape, out.index, mode)[rec.embedded.index][0]
        cols.append(np.abs(g).mean(axis=-1) if reduce == "abs_mean" else g.mean(axis=-1))
    return np.stack(cols, axis=1)


def lrp_scores(model: VictimModel, ex: EncodedExample, epsilon: float = 1e-6, rec: Optional[Recording] = None) -> np.ndarray:
    """Signed per-word relevance of each class logit (summed over the embedding axis)."""
    rec = rec or _record(model, ex)
    cols = []
    for j in range(model.num_classes):
        out = _class_output(rec, j, "logit")
        r = ag.lrp_relevance(rec.tape, out.index, epsilon)[rec.embedded.index][0]
        cols.append(r.sum(axis=-1))
    return np.stack(cols, axis=1)


def ig_scores(model: VictimModel, ex: EncodedExample, steps: int = 32, target: str = "logit") -> np.ndarray:
    """Signed integrated-gradient attributions from the all-zero embedding.

    All words move jointly along the straight path; the integral is a
    midpoint Riemann sum with ``steps`` points evaluated as one batch.
    """
    if steps < 1:
        raise ValueError("IG needs at least one step")
    ids = ex.ids[None, :]
    emb = model.embed(ids)[0]
    alphas = (np.arange(steps) + 0.5) / steps
    path = alphas[:, None, None] * emb[None]
    rec = model.record(np.repeat(ids, steps, axis=0), np.full(steps, ex.true_length), embedded=path)
    cols = []
    for j in range(model.num_classes):
        out = _class_output(rec, j, target)
        g = ag.backward(rec.tape, out.index)[rec.embedded.index]
        cols.append((emb * g.mean(axis=0)).sum(axis=-1))
    return np.stack(cols, axis=1)


def awi_vg(model, ex, reduce: str = "mean", target: str = "logit", mask_pad: bool = False) -> AWIMatrix:
    rec = _record(model, ex)
    signed = gradient_scores(model, ex, BackwardMode.STANDARD, reduce, target, rec)
    return AWIMatrix(_finish(signed, ex, mask_pad), "VG", _predicted(rec), ex.true_length)


def awi_gbp(model, ex, reduce: str = "mean", target: str = "logit", mask_pad: bool = False) -> AWIMatrix:
    rec = _record(model, ex)
    signed = gradient_scores(model, ex, BackwardMode.GUIDED, reduce, target, rec)
    return AWIMatrix(_finish(signed, ex, mask_pad), "GBP", _predicted(rec), ex.true_length)


def awi_lrp(model, ex, epsilon: float = 1e-6, mask_pad: bool = False) -> AWIMatrix:
    rec = _record(model, ex)
    return AWIMatrix(_finish(lrp_scores(model, ex, epsilon, rec), ex, mask_pad), "LRP", _predicted(rec), ex.true_length)


def awi_ig(model, ex, steps: int = 32, target: str = "logit", mask_pad: bool = False) -> AWIMatrix:
    label = predict_from_probs(model.forward_probs(ex))[0]
    return AWIMatrix(_finish(ig_scores(model, ex, steps, target), ex, mask_pad), "IG", label, ex.true_length)


def awi_all(
    model: VictimModel,
    ex: EncodedExample,
    ig_steps: int = 32,
    epsilon: float = 1e-6,
    reduce: str = "mean",
    mask_pad: bool = False,
    target: str = "logit",
) -> Dict[str, AWIMatrix]:
    """VG, GBP and LRP share one recorded forward pass; IG records its own path batch.

    ``target`` selects what VG, GBP and IG differentiate: class logits or
    softmax probabilities.  LRP always redistributes the logits, since the
    epsilon rule has no softmax case.
    """
    if target not in TARGETS:
        raise ValueError(f"unknown saliency target {target!r}")
    rec = _record(model, ex)
    label = _predicted(rec)
    vg = gradient_scores(model, ex, BackwardMode.STANDARD, reduce, target, rec)
    gbp = gradient_scores(model, ex, BackwardMode.GUIDED, reduce, target, rec)
    lrp = lrp_scores(model, ex, epsilon, rec)
    ig = ig_scores(model, ex, ig_steps, target)
    return {
        "VG": AWIMatrix(_finish(vg, ex, mask_pad), "VG", label, ex.true_length),
        "GBP": AWIMatrix(_finish(gbp, ex, mask_pad), "GBP", label, ex.true_length),
        "LRP": AWIMatrix(_finish(lrp, ex, mask_pad), "LRP", label, ex.true_length),
        "IG": AWIMatrix(_finish(ig, ex, mask_pad), "IG", label, ex.true_length),
    }


# ---------------------------------------------------------------------------
# binary records: b"AWI1", uint8 method code, int32 label, uint32 true
# length, uint32 rows, uint32 cols, then rows*cols float64 little-endian
# (row-major)

_REC = struct.Struct("<4sBiIII")
_MAX_CELLS = 1 << 24


def write_awi(fh: BinaryIO, awi: AWIMatrix) -> None:
    rows, cols = awi.values.shape
    fh.write(_REC.pack(b"AWI1", METHODS.index(awi.method), awi.label, awi.length, rows, cols))
    fh.write(np.ascontiguousarray(awi.values, dtype="<f8").tobytes())


def read_awi(fh: BinaryIO) -> Optional[AWIMatrix]:
    head = fh.read(_REC.size)
    if not head:
        return None
    if len(head) < _REC.size:
        raise ValueError("truncated AWI record header")
    magic, code, label, length, rows, cols = _REC.unpack(head)
    if magic != b"AWI1" or code >= len(METHODS):
        raise ValueError("not an AWI record")
    if rows * cols > _MAX_CELLS:
        raise ValueError(f"implausible AWI record size {rows}x{cols}")
    body = fh.read(rows * cols * 8)
    if len(body) < rows * cols * 8:
        raise ValueError("truncated AWI record body")
    values = np.frombuffer(body, dtype="<f8").astype(np.float64).reshape(rows, cols)
    return AWIMatrix(values, METHODS[code], label, length)


def save_awi_records(path, records: Iterable[AWIMatrix]) -> None:
    with open(path, "wb") as fh:
        for awi in records:
            write_awi(fh, awi)


def load_awi_records(path) -> List[AWIMatrix]:
    out = []
    with open(path, "rb") as fh:
        while (awi := read_awi(fh)) is not None:
            out.append(awi)
    return out
