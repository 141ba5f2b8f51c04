"""Composite layers assembled from autograd primitives."""

from __future__ import annotations

from typing import Optional

import numpy as np

from . import autograd as ag
from .autograd import Tensor


def lstm_final_state(
    xproj: Tensor,
    w_h: Tensor,
    hidden: int,
    steps: Optional[int] = None,
    mask: Optional[np.ndarray] = None,
    reverse: bool = False,
    fused: bool = False,
) -> Tensor:
    """Run an LSTM over pre-projected inputs and return the last hidden state.

    ``xproj`` holds ``x_t @ W_x + b`` for every step, shape ``(..., T, 4H)``
    with gate blocks ordered (input, forget, output, candidate).  ``w_h`` is
    ``(H, 4H)`` or a batched ``(G, H, 4H)``.  ``mask`` has shape ``(..., T)``;
    where it is 0 the state is carried over unchanged.  Only the first
    ``steps`` time positions are visited.

    ``fused`` records the recurrence as a single tape node, which is much
    faster to differentiate but has no relevance (LRP) rule.
    """
    tape = xproj.tape
    total_steps = xproj.shape[-2]
    steps = total_steps if steps is None else min(steps, total_steps)
    if fused:
        if steps < total_steps:
            xproj = ag.slice_(xproj, -2, 0, steps)
            mask = None if mask is None else mask[..., :steps]
        return ag.lstm(xproj, w_h, hidden, mask=mask, reverse=reverse)
    state_shape = xproj.shape[:-2] + (hidden,)
    h = tape.constant(np.zeros(state_shape))
    c = tape.constant(np.zeros(state_shape))
    order = range(steps - 1, -1, -1) if reverse else range(steps)
    for t in order:
        gates = ag.add(ag.take(xproj, t, axis=-2), ag.affine(h, w_h))
        sig = ag.sigmoid(ag.slice_(gates, -1, 0, 3 * hidden))
        i_gate = ag.slice_(sig, -1, 0, hidden)
        f_gate = ag.slice_(sig, -1, hidden, 2 * hidden)
        o_gate = ag.slice_(sig, -1, 2 * hidden, 3 * hidden)
        cand = ag.tanh(ag.slice_(gates, -1, 3 * hidden, 4 * hidden))
        c_new = ag.add(ag.mul(c, f_gate), ag.mul(cand, i_gate))
        h_new = ag.mul(ag.tanh(c_new), o_gate)
        if mask is not None:
            m = mask[..., t][..., None].astype(np.float64)
            keep = tape.constant(m)
            carry = tape.constant(1.0 - m)
            c_new = ag.add(ag.mul(c_new, keep), ag.mul(c, carry))
            h_new = ag.add(ag.mul(h_new, keep), ag.mul(h, carry))
        h, c = h_new, c_new
    return h


def init_lstm(rng: np.random.Generator, n_in: int, hidden: int, groups: Optional[int] = None):
    """Uniform(-1/sqrt(H), 1/sqrt(H)) weights with forget-gate bias 1."""
    bound = 1.0 / np.sqrt(hidden)
    lead = () if groups is None else (groups,)
    w_x = rng.uniform(-bound, bound, size=lead + (n_in, 4 * hidden))
    w_h = rng.uniform(-bound, bound, size=lead + (hidden, 4 * hidden))
    b = np.zeros(lead + (4 * hidden,))
    b[..., hidden : 2 * hidden] = 1.0
    return w_x, w_h, b


def init_dense(rng: np.random.Generator, n_in: int, n_out: int, groups: Optional[int] = None):
    bound = np.sqrt(6.0 / (n_in + n_out))
    lead = () if groups is None else (groups,)
    return rng.uniform(-bound, bound, size=lead + (n_in, n_out)), np.zeros(lead + (n_out,))
