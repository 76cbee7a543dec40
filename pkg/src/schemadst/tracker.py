"""Turning head outputs into state updates and accumulating dialogue states."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Protocol, Sequence

import numpy as np

from .assembly import (
    AssemblyConfig,
    EncoderInput,
    ExampleMeta,
    Gate,
    LabelSet,
    assemble_input,
    build_question,
    derive_labels,
    intent_candidates,
    turn_history,
)
from .heads import REQUESTED, HeadOutputs, is_requested
from .schema import (
    DONTCARE,
    NONE_VALUE,
    USER,
    Dialogue,
    DialogueState,
    Frame,
    ServiceSchema,
    SlotSchema,
    StateUpdate,
    Turn,
    apply_state_update,
)
from .tokenization import Vocabulary

SKIP, SET_DONTCARE, SET_VALUE = "skip", "set_dontcare", "set_value"


class DecodingError(RuntimeError):
    pass


@dataclass(frozen=True)
class DecodingConfig:
    max_span_len: int = 12

    def __post_init__(self):
        if self.max_span_len < 1:
            raise ValueError("max_span_len must be >= 1")


@dataclass(frozen=True)
class SlotDecision:
    slot: str
    action: str
    value: str | None = None

    def __post_init__(self):
        if (self.action == SET_VALUE) != (self.value is not None):
            raise ValueError("value must be given exactly when action is set_value")


@dataclass(frozen=True, eq=False)
class SlotQuery:
    meta: ExampleMeta
    input: EncoderInput
    slot: SlotSchema


class Predictor(Protocol):
    vocab: Vocabulary
    assembly: AssemblyConfig
    decoding: DecodingConfig

    def predict(self, queries: Sequence[SlotQuery]) -> list[HeadOutputs]: ...


def best_span(start_dist: np.ndarray, stop_dist: np.ndarray, history_range: tuple[int, int], max_span_len: int):
    """(i, j) maximizing log start[i] + log stop[j] with i <= j < i + max_span_len.

    Ties go to the smaller i, then the smaller j (row-major argmax).
    """
    h0, h1 = history_range
    with np.errstate(divide="ignore"):
        ls = np.log(start_dist[h0:h1].astype(np.float64))
        le = np.log(stop_dist[h0:h1].astype(np.float64))
    n = h1 - h0
    i, j = np.indices((n, n))
    score = np.where((j >= i) & (j - i < max_span_len), ls[:, None] + le[None, :], -np.inf)
    flat = int(np.argmax(score))
    if n == 0 or not np.isfinite(score.flat[flat]):
        raise DecodingError("no feasible span with non-zero probability")
    bi, bj = divmod(flat, n)
    return h0 + bi, h0 + bj


def extract_span_value(
    start_dist: np.ndarray,
    stop_dist: np.ndarray,
    inp: EncoderInput,
    cfg: DecodingConfig,
    raw_history: Sequence[str] | None = None,
) -> str:
    i, j = best_span(start_dist, stop_dist, inp.history_range, cfg.max_span_len)
    if raw_history is not None and tuple(raw_history) != inp.history:
        raise ValueError("raw_history does not match the history the input was built from")
    return inp.history_text(i, j)


def decode_slot(
    gate_dist: np.ndarray,
    filler_output,
    slot: SlotSchema,
    inp: EncoderInput,
    cfg: DecodingConfig,
) -> SlotDecision:
    """``filler_output`` is the candidate distribution for categorical slots and
    ``(start_dist, stop_dist)`` (or None when the history is empty) otherwise."""
    gate = Gate(int(np.argmax(gate_dist)))
    if gate == Gate.NONE:
        return SlotDecision(slot.name, SKIP)
    if gate == Gate.DONTCARE:
        return SlotDecision(slot.name, SET_DONTCARE)
    if slot.is_categorical:
        idx = int(np.argmax(filler_output))
        if idx == 0:
            return SlotDecision(slot.name, SKIP)
        return SlotDecision(slot.name, SET_VALUE, slot.possible_values[idx - 1])
    if filler_output is None:
        return SlotDecision(slot.name, SKIP)
    start, stop = filler_output
    return SlotDecision(slot.name, SET_VALUE, extract_span_value(start, stop, inp, cfg))


def decode_turn(
    decisions: Sequence[SlotDecision],
    intent_dist: np.ndarray | None,
    req_dists: dict[str, np.ndarray],
    intents: Sequence[str],
    prev_state: DialogueState,
) -> DialogueState:
    changed = {}
    for d in decisions:
        if d.action == SET_DONTCARE:
            changed[d.slot] = [DONTCARE]
        elif d.action == SET_VALUE:
            changed[d.slot] = [d.value]
    slot_values = apply_state_update(prev_state.slot_values, StateUpdate(changed))
    requested = tuple(name for name, dist in req_dists.items() if is_requested(dist))
    intent = NONE_VALUE if intent_dist is None else intents[int(np.argmax(intent_dist))]
    return DialogueState(intent, requested, slot_values)


def _filler(out: HeadOutputs, slot: SlotSchema):
    if slot.is_categorical:
        return out.cat_dist
    if out.start_dist is None:
        return None
    return out.start_dist, out.stop_dist


@dataclass(frozen=True)
class TrackedFrame:
    turn_index: int
    service: str
    state: DialogueState


def frame_queries(
    dialogue: Dialogue, t: int, service: ServiceSchema, predictor: Predictor
) -> list[SlotQuery]:
    history, _ = turn_history(dialogue, t)
    cfg = predictor.assembly
    out = []
    for slot in service.slots:
        q = build_question(slot, service, cfg.use_nld)
        try:
            inp = assemble_input(q, history, service.intents, slot, cfg, predictor.vocab)
        except ValueError as exc:
            raise DecodingError(f"dialogue {dialogue.dialogue_id} turn {t} slot {slot.name}: {exc}") from exc
        meta = ExampleMeta(dialogue.dialogue_id, t, service.service_name, slot.name, slot.is_categorical)
        out.append(SlotQuery(meta, inp, slot))
    return out


def decode_frame(
    queries: Sequence[SlotQuery],
    outputs: Sequence[HeadOutputs],
    service: ServiceSchema,
    prev_state: DialogueState,
    cfg: DecodingConfig,
) -> DialogueState:
    """Decode all slot outputs of one frame.

    Every slot input carries its own intent head output; the frame intent is
    the argmax of their mean.
    """
    decisions = [decode_slot(o.gate_dist, _filler(o, q.slot), q.slot, q.input, cfg) for q, o in zip(queries, outputs)]
    req = {q.slot.name: o.req_dist for q, o in zip(queries, outputs)}
    intent_dists = [o.intent_dist for o in outputs if o.intent_dist is not None]
    intent = np.mean(intent_dists, axis=0) if intent_dists else None
    return decode_turn(decisions, intent, req, intent_candidates(service), prev_state)


def track_dialogue(d: Dialogue, schemas: Sequence[ServiceSchema], model: Predictor) -> list[TrackedFrame]:
    """Predicted state for every user-turn frame, in dialogue order.

    Each service keeps its own stream of predicted states; updates are applied
    to the previous *predicted* state of the same service.
    """
    by_name = {s.service_name: s for s in schemas}
    prev: dict[str, DialogueState] = {}
    tracked = []
    for t, turn in enumerate(d.turns):
        if turn.speaker != USER:
            continue
        for frame in turn.frames:
            if frame.state is None:
                continue
            service = by_name.get(frame.service)
            if service is None:
                raise DecodingError(f"dialogue {d.dialogue_id}: no schema for service {frame.service!r}")
            queries = frame_queries(d, t, service, model)
            outputs = model.predict(queries)
            state = decode_frame(queries, outputs, service, prev.get(frame.service, DialogueState()), model.decoding)
            prev[frame.service] = state
            tracked.append(TrackedFrame(t, frame.service, state))
    return tracked


def substitute_states(d: Dialogue, tracked: Sequence[TrackedFrame]) -> Dialogue:
    """Copy of ``d`` whose user-turn states are the predicted ones."""
    by_key = {(f.turn_index, f.service): f.state for f in tracked}
    turns = []
    for t, turn in enumerate(d.turns):
        frames = tuple(
            Frame(f.service, by_key.get((t, f.service), f.state), f.spans) if f.state is not None else f
            for f in turn.frames
        )
        turns.append(Turn(turn.speaker, turn.utterance, frames))
    return Dialogue(d.dialogue_id, d.services, tuple(turns))


# --------------------------------------------------------------------------
# oracle predictor


def one_hot_outputs(labels: LabelSet, inp: EncoderInput) -> HeadOutputs:
    """Head outputs that put all mass on the gold labels."""

    def onehot(n, i):
        v = np.zeros(n)
        v[i] = 1.0
        return v

    out = HeadOutputs(
        gate_dist=onehot(3, int(labels.gate)),
        req_dist=onehot(2, REQUESTED if labels.requested else 1 - REQUESTED),
    )
    if inp.is_categorical:
        out.cat_dist = onehot(inp.num_values + 1, labels.categorical_index or 0)
    else:
        h0, h1 = inp.history_range
        if h1 > h0:
            if labels.span is not None:
                out.start_dist = onehot(len(inp), labels.span[0])
                out.stop_dist = onehot(len(inp), labels.span[1])
            else:
                out.start_dist = np.zeros(len(inp))
                out.stop_dist = np.zeros(len(inp))
                out.start_dist[h0:h1] = out.stop_dist[h0:h1] = 1.0 / (h1 - h0)
    if inp.int_positions:
        out.intent_dist = onehot(len(inp.int_positions), labels.intent_index)
    return out


class OraclePredictor:
    """Predictor that answers with one-hot gold labels derived from the gold dialogues."""

    def __init__(
        self,
        dialogues: Sequence[Dialogue],
        schemas: Sequence[ServiceSchema],
        assembly: AssemblyConfig,
        vocab: Vocabulary,
        decoding: DecodingConfig = DecodingConfig(),
    ):
        self.dialogues = {d.dialogue_id: d for d in dialogues}
        self.schemas = {s.service_name: s for s in schemas}
        self.assembly = assembly
        self.vocab = vocab
        self.decoding = decoding

    def labels(self, q: SlotQuery) -> LabelSet:
        d = self.dialogues[q.meta.dialogue_id]
        t = q.meta.turn_index
        turn = d.turns[t]
        frame = turn.frame(q.meta.service)
        prev = DialogueState()
        for u in range(t - 1, -1, -1):
            f = d.turns[u].frame(q.meta.service)
            if d.turns[u].speaker == USER and f is not None and f.state is not None:
                prev = f.state
                break
        _, system_turn = turn_history(d, t)
        service = self.schemas[q.meta.service]
        return derive_labels(turn, frame, prev, q.slot, q.input, service, system_turn, self.assembly)

    def predict(self, queries: Sequence[SlotQuery]) -> list[HeadOutputs]:
        return [one_hot_outputs(self.labels(q), q.input) for q in queries]
