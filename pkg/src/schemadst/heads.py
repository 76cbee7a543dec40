"""The five affine task heads and their gradients.

Every head is ``y = W x + b`` on rows of the encoder output followed by a
softmax. Which rows a head reads:

* slot gate, requested gate, CLS categorical filler: the [CLS] row
* categorical filler: each [pv] row (one logit per candidate)
* intent classifier: each [int] row (one logit per candidate)
* span start / stop: each history row
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .assembly import EncoderInput

HEAD_SIZES = {"status": 3, "cat_slot": 1, "start": 1, "stop": 1, "req_slot": 2, "intent": 1}
REQUESTED, NOT_REQUESTED = 0, 1


class HeadParams(dict):
    """``heads.<name>.weight`` (m x H) and ``heads.<name>.bias`` (m) for each head."""

    def __init__(self, tensors: Mapping[str, np.ndarray], max_categorical_values: int | None = None):
        super().__init__(tensors)
        self.max_categorical_values = max_categorical_values

    def W(self, head: str) -> np.ndarray:
        return self[f"heads.{head}.weight"]

    def b(self, head: str) -> np.ndarray:
        return self[f"heads.{head}.bias"]


def init_head_params(
    hidden_size: int, seed: int = 0, max_categorical_values: int | None = None, dtype=np.float32
) -> HeadParams:
    """Normal(0, 0.02) weights, zero biases.

    ``max_categorical_values`` adds the CLS categorical head with m + 1 outputs.
    """
    rng = np.random.default_rng([seed, 1])
    sizes = dict(HEAD_SIZES)
    if max_categorical_values is not None:
        sizes["cls_cat"] = max_categorical_values + 1
    tensors = {}
    for name, m in sizes.items():
        tensors[f"heads.{name}.weight"] = (rng.standard_normal((m, hidden_size)) * 0.02).astype(dtype)
        tensors[f"heads.{name}.bias"] = np.zeros(m, dtype=dtype)
    return HeadParams(tensors, max_categorical_values)


def linear(x: np.ndarray, W: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``W x + b``; ``x`` may also be a stack of row vectors (n x H)."""
    x = np.asarray(x)
    if W.ndim != 2 or b.shape != (W.shape[0],) or x.shape[-1] != W.shape[1]:
        raise ValueError(f"shape mismatch: W {W.shape}, b {b.shape}, x {x.shape}")
    return x @ W.T + b


def softmax(logits: np.ndarray, keep: np.ndarray | None = None) -> np.ndarray:
    """Softmax over the last axis; entries with ``keep == False`` get exactly 0."""
    z = np.asarray(logits, dtype=np.result_type(logits, np.float32))
    if keep is not None:
        z = np.where(keep, z, -np.inf)
    z = z - z.max(-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(-1, keepdims=True)


def slot_gate(u_cls: np.ndarray, p: HeadParams) -> np.ndarray:
    """Distribution over (none, dontcare, ptr)."""
    return softmax(linear(u_cls, p.W("status"), p.b("status")))


def categorical_filler(u_pv: np.ndarray, p: HeadParams) -> np.ndarray:
    u_pv = np.asarray(u_pv)
    if u_pv.ndim != 2 or len(u_pv) == 0:
        raise ValueError("categorical filler needs at least one candidate row")
    return softmax(linear(u_pv, p.W("cat_slot"), p.b("cat_slot"))[:, 0])


def cls_categorical_filler(u_cls: np.ndarray, k: int, p: HeadParams) -> np.ndarray:
    """m + 1 way distribution from [CLS]; values at 0..k-1, NONE last, the rest exactly 0."""
    m = p.max_categorical_values
    if m is None:
        raise ValueError("head parameters carry no CLS categorical head")
    if not 1 <= k <= m:
        raise ValueError(f"slot has {k} values, CLS head supports 1..{m}")
    keep = np.zeros(m + 1, dtype=bool)
    keep[:k] = True
    keep[m] = True
    return softmax(linear(u_cls, p.W("cls_cat"), p.b("cls_cat")), keep)


def cls_to_candidates(dist: np.ndarray, k: int) -> np.ndarray:
    """Reorder a CLS-head distribution into candidate order (NONE first)."""
    return np.concatenate([dist[-1:], dist[:k]])


def free_form_filler(
    token_states: np.ndarray, history_range: tuple[int, int], p: HeadParams
) -> tuple[np.ndarray, np.ndarray]:
    """Start and stop distributions over all positions, zero outside the history."""
    h0, h1 = history_range
    if h1 <= h0:
        raise ValueError("empty dialogue history")
    rows = token_states[h0:h1]
    L = len(token_states)
    out = []
    for head in ("start", "stop"):
        dist = np.zeros(L, dtype=np.result_type(token_states, np.float32))
        dist[h0:h1] = softmax(linear(rows, p.W(head), p.b(head))[:, 0])
        out.append(dist)
    return out[0], out[1]


def requested_gate(u_cls: np.ndarray, p: HeadParams) -> np.ndarray:
    """Distribution over (requested, not_requested)."""
    return softmax(linear(u_cls, p.W("req_slot"), p.b("req_slot")))


def is_requested(req_dist: np.ndarray) -> bool:
    # a tie at exactly 0.5 counts as not requested
    return bool(req_dist[REQUESTED] > 0.5)


def intent_classifier(u_int: np.ndarray, p: HeadParams) -> np.ndarray:
    u_int = np.asarray(u_int)
    if u_int.ndim != 2 or len(u_int) == 0:
        raise ValueError("intent classifier needs at least one candidate row")
    return softmax(linear(u_int, p.W("intent"), p.b("intent"))[:, 0])


@dataclass(eq=False)
class HeadOutputs:
    gate_dist: np.ndarray
    req_dist: np.ndarray
    cat_dist: np.ndarray | None = None  # candidate order, NONE first
    cls_cat_dist: np.ndarray | None = None  # raw m + 1 CLS-head output
    start_dist: np.ndarray | None = None
    stop_dist: np.ndarray | None = None
    intent_dist: np.ndarray | None = None

    def distributions(self) -> dict[str, np.ndarray]:
        names = ("gate_dist", "req_dist", "cat_dist", "cls_cat_dist", "start_dist", "stop_dist", "intent_dist")
        return {n: getattr(self, n) for n in names if getattr(self, n) is not None}


class _RowView:
    """Sequence-position indexing over full (L x H) or compacted states."""

    def __init__(self, states: np.ndarray, row_of: np.ndarray | None):
        self.states = states
        self.row_of = row_of

    def __getitem__(self, positions):
        if self.row_of is None:
            return self.states[positions]
        return self.states[self.row_of[positions]]

    def rows(self, positions):
        if self.row_of is None:
            return np.asarray(positions)
        return self.row_of[positions]


def run_heads(
    token_states: np.ndarray,
    inp: EncoderInput,
    p: HeadParams,
    row_of: np.ndarray | None = None,
) -> HeadOutputs:
    """Evaluate every head that applies to ``inp``.

    ``row_of`` maps sequence positions to rows of a compacted ``token_states``.
    """
    view = _RowView(token_states, row_of)
    u_cls = view[inp.cls_index]
    out = HeadOutputs(gate_dist=slot_gate(u_cls, p), req_dist=requested_gate(u_cls, p))
    if inp.is_categorical:
        if inp.pv_positions:
            out.cat_dist = categorical_filler(view[list(inp.pv_positions)], p)
        else:
            out.cls_cat_dist = cls_categorical_filler(u_cls, inp.num_values, p)
            out.cat_dist = cls_to_candidates(out.cls_cat_dist, inp.num_values)
    else:
        h0, h1 = inp.history_range
        L = len(inp)
        if h1 > h0:
            rows = view[np.arange(h0, h1)]
            out.start_dist = np.zeros(L, dtype=rows.dtype)
            out.stop_dist = np.zeros(L, dtype=rows.dtype)
            out.start_dist[h0:h1] = softmax(linear(rows, p.W("start"), p.b("start"))[:, 0])
            out.stop_dist[h0:h1] = softmax(linear(rows, p.W("stop"), p.b("stop"))[:, 0])
    if inp.int_positions:
        out.intent_dist = intent_classifier(view[list(inp.int_positions)], p)
    return out


def heads_backward(
    token_states: np.ndarray,
    inp: EncoderInput,
    p: HeadParams,
    dlogits: Mapping[str, np.ndarray],
    row_of: np.ndarray | None = None,
) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    """Back-propagate logit gradients to the states and the head parameters.

    ``dlogits`` keys are head names; ``start``/``stop`` hold one entry per
    history position, ``cat_slot`` and ``intent`` one per candidate.
    """
    view = _RowView(token_states, row_of)
    dstates = np.zeros_like(token_states)
    grads = {name: np.zeros_like(arr) for name, arr in p.items()}

    def vector_head(head, position, dl):
        x = view[position]
        grads[f"heads.{head}.weight"] += np.outer(dl, x)
        grads[f"heads.{head}.bias"] += dl
        dstates[view.rows(position)] += dl @ p.W(head)

    def row_head(head, positions, dl):
        x = view[positions]
        grads[f"heads.{head}.weight"] += (dl @ x)[None, :]
        grads[f"heads.{head}.bias"] += dl.sum()
        np.add.at(dstates, view.rows(positions), np.outer(dl, p.W(head)[0]))

    for head in ("status", "req_slot", "cls_cat"):
        if head in dlogits:
            vector_head(head, inp.cls_index, dlogits[head])
    if "cat_slot" in dlogits:
        row_head("cat_slot", np.asarray(inp.pv_positions), dlogits["cat_slot"])
    if "intent" in dlogits:
        row_head("intent", np.asarray(inp.int_positions), dlogits["intent"])
    h0, h1 = inp.history_range
    for head in ("start", "stop"):
        if head in dlogits:
            row_head(head, np.arange(h0, h1), dlogits[head])
    return dstates, grads
