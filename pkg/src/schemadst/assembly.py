"""Per-(frame, slot) encoder inputs and their supervision labels.

Sequence layout, left to right::

    [CLS] question [SEP] history [SEP] [PAD]...   <- exactly max_hist_len positions
    [int] none [int] intent-1 ... [PAD]...        <- exactly max_intent_len (when intents are on)
    [pv] none [pv] value-1 ...                    <- categorical slots, pv head only
    [PAD]...                                      <- up to max_seq_len

The NONE candidate always sits at index 0 of the intent and value lists.
"""

from __future__ import annotations

import json
import logging
import os
import zlib
from dataclasses import asdict, dataclass
from enum import IntEnum
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .schema import (
    DONTCARE,
    NONE_VALUE,
    SYSTEM,
    USER,
    Dialogue,
    DialogueState,
    Frame,
    IntentSchema,
    ServiceSchema,
    SlotSchema,
    Turn,
    compute_state_update,
)
from .tokenization import CLS_ID, INT_ID, PAD_ID, PV_ID, SEP_ID, Token, Vocabulary, tokenize

log = logging.getLogger(__name__)

SEG_QUESTION, SEG_HISTORY, SEG_INTENTS, SEG_VALUES = 0, 1, 2, 3
NONE_TOKEN = "none"


class AssemblyError(ValueError):
    pass


class Gate(IntEnum):
    NONE = 0
    DONTCARE = 1
    PTR = 2


@dataclass(frozen=True)
class AssemblyConfig:
    max_hist_len: int = 250
    max_intent_len: int = 50
    max_seq_len: int = 512
    use_nld: bool = True
    use_intents: bool = True
    categorical_head: str = "pv"
    cat_neg_sampling_prob: float = 0.1
    noncat_neg_sampling_prob: float = 0.2
    max_categorical_values: int = 12
    max_intents: int = 8

    def __post_init__(self):
        if self.categorical_head not in ("pv", "cls"):
            raise ValueError(f"categorical_head must be 'pv' or 'cls', got {self.categorical_head!r}")
        for name in ("cat_neg_sampling_prob", "noncat_neg_sampling_prob"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {p}")
        if self.max_categorical_values < 1 or self.max_intents < 1:
            raise ValueError("max_categorical_values and max_intents must be >= 1")
        if self.max_hist_len < 4:
            raise ValueError("max_hist_len must leave room for [CLS], two [SEP] and a history token")
        pv_capacity = 2 * (self.max_categorical_values + 1) if self.categorical_head == "pv" else 0
        if self.intent_region_start + self.intent_region_len + pv_capacity > self.max_seq_len:
            raise ValueError(
                f"max_hist_len + max_intent_len + pv capacity ({pv_capacity}) exceeds max_seq_len {self.max_seq_len}"
            )

    @property
    def intent_region_start(self) -> int:
        return self.max_hist_len

    @property
    def intent_region_len(self) -> int:
        return self.max_intent_len if self.use_intents else 0

    @property
    def value_region_start(self) -> int:
        return self.max_hist_len + self.intent_region_len


@dataclass(frozen=True, eq=False)
class EncoderInput:
    token_ids: np.ndarray
    attention_mask: np.ndarray
    segment_ids: np.ndarray
    cls_index: int
    history_range: tuple[int, int]  # [start, end) sequence positions
    int_positions: tuple[int, ...]
    pv_positions: tuple[int, ...]
    # per history token: (utterance index into `history`, char start, char end)
    alignment: tuple[tuple[int, int, int], ...]
    history: tuple[str, ...]
    is_categorical: bool = False
    num_values: int = 0

    def __len__(self) -> int:
        return len(self.token_ids)

    def history_text(self, start: int, end: int) -> str:
        """Surface text for history positions ``start..end`` inclusive."""
        h0, h1 = self.history_range
        if not h0 <= start <= end < h1:
            raise IndexError(f"positions {start}..{end} outside history {self.history_range}")
        first = self.alignment[start - h0]
        last = self.alignment[end - h0]
        if first[0] == last[0]:
            return self.history[first[0]][first[1] : last[2]]
        parts = [self.history[first[0]][first[1] :]]
        parts += [self.history[u] for u in range(first[0] + 1, last[0])]
        parts.append(self.history[last[0]][: last[2]])
        return " ".join(p.strip() for p in parts)


@dataclass(frozen=True)
class LabelSet:
    gate: Gate
    categorical_index: int | None = None
    span: tuple[int, int] | None = None  # inclusive sequence positions inside history_range
    span_supervised: bool = False
    requested: bool = False
    intent_index: int = 0


@dataclass(frozen=True)
class ExampleMeta:
    dialogue_id: str
    turn_index: int
    service: str
    slot: str
    is_categorical: bool


@dataclass(frozen=True, eq=False)
class TrainingExample:
    input: EncoderInput
    labels: LabelSet
    meta: ExampleMeta


def build_question(slot: SlotSchema, service: ServiceSchema, use_nld: bool) -> str:
    if use_nld:
        if slot.description.strip() and service.description.strip():
            return f"{slot.description.strip()} {service.description.strip()}"
        log.warning("empty description for %s.%s, using names", service.service_name, slot.name)
    return f"{slot.name} {service.service_name}"


def intent_candidates(service: ServiceSchema) -> list[str]:
    return [NONE_VALUE] + service.intent_names


def _fit_intents(pieces: list[list[Token]], budget: int) -> list[list[Token]]:
    # trim the longest description one token at a time until the region fits
    pieces = [list(p) for p in pieces]
    while sum(len(p) + 1 for p in pieces) > budget:
        longest = max(range(len(pieces)), key=lambda i: (len(pieces[i]), -i))
        if not pieces[longest]:
            raise AssemblyError(f"{len(pieces)} intent markers do not fit max_intent_len={budget}")
        pieces[longest].pop()
    return pieces


def assemble_input(
    question: str,
    history: Sequence[tuple[str, str]],
    intents: Sequence[IntentSchema],
    slot: SlotSchema,
    cfg: AssemblyConfig,
    vocab: Vocabulary,
) -> EncoderInput:
    """Lay out one encoder input; see the module docstring for the layout."""
    L = cfg.max_seq_len
    ids = np.full(L, PAD_ID, dtype=np.int64)
    mask = np.zeros(L, dtype=np.int8)
    seg = np.zeros(L, dtype=np.int8)

    q_tokens = tokenize(question, vocab, source="question")
    if len(q_tokens) + 3 > cfg.max_hist_len:
        raise AssemblyError(
            f"question of {len(q_tokens)} tokens does not fit max_hist_len={cfg.max_hist_len}"
        )
    h_tokens: list[tuple[int, Token]] = []
    for u, (speaker, text) in enumerate(history):
        h_tokens += [(u, t) for t in tokenize(text, vocab, source=speaker)]
    room = cfg.max_hist_len - len(q_tokens) - 3
    if len(h_tokens) > room:
        h_tokens = h_tokens[len(h_tokens) - room :]

    pos = 0

    def put(token_id: int, segment: int) -> int:
        nonlocal pos
        if pos >= L:
            raise AssemblyError(f"assembled input exceeds max_seq_len={L}")
        ids[pos], mask[pos], seg[pos] = token_id, 1, segment
        pos += 1
        return pos - 1

    put(CLS_ID, SEG_QUESTION)
    for t in q_tokens:
        put(t.id, SEG_QUESTION)
    put(SEP_ID, SEG_QUESTION)
    h_start = pos
    for _, t in h_tokens:
        put(t.id, SEG_HISTORY)
    h_end = pos
    put(SEP_ID, SEG_HISTORY)
    alignment = tuple((u, t.char_start, t.char_end) for u, t in h_tokens)

    int_positions: list[int] = []
    if cfg.use_intents:
        if len(intents) > cfg.max_intents:
            raise AssemblyError(f"{len(intents)} intents exceed max_intents={cfg.max_intents}")
        texts = [NONE_TOKEN] + [i.description if cfg.use_nld and i.description.strip() else i.name for i in intents]
        pieces = _fit_intents([tokenize(t, vocab) for t in texts], cfg.max_intent_len)
        pos = cfg.intent_region_start
        for piece in pieces:
            int_positions.append(put(INT_ID, SEG_INTENTS))
            for t in piece:
                put(t.id, SEG_INTENTS)

    pv_positions: list[int] = []
    k = len(slot.possible_values) if slot.is_categorical else 0
    if slot.is_categorical and cfg.categorical_head == "cls" and k > cfg.max_categorical_values:
        raise AssemblyError(
            f"slot {slot.name!r} has {k} values, more than max_categorical_values={cfg.max_categorical_values}"
        )
    if slot.is_categorical and cfg.categorical_head == "pv":
        pos = cfg.value_region_start
        for value in (NONE_TOKEN, *slot.possible_values):
            pv_positions.append(put(PV_ID, SEG_VALUES))
            for t in tokenize(value, vocab):
                put(t.id, SEG_VALUES)

    return EncoderInput(
        token_ids=ids,
        attention_mask=mask,
        segment_ids=seg,
        cls_index=0,
        history_range=(h_start, h_end),
        int_positions=tuple(int_positions),
        pv_positions=tuple(pv_positions),
        alignment=alignment,
        history=tuple(text for _, text in history),
        is_categorical=slot.is_categorical,
        num_values=k,
    )


def _char_span_to_positions(inp: EncoderInput, utt: int, start: int, end: int) -> tuple[int, int] | None:
    first = last = None
    for k, (u, s, e) in enumerate(inp.alignment):
        if u != utt:
            continue
        if s == start:
            first = k
        if e == end:
            last = k
    if first is None or last is None or last < first:
        return None
    h0 = inp.history_range[0]
    return h0 + first, h0 + last


def _span_candidates(
    values: list[str], slot: str, service: str, turns: list[Turn | None]
) -> Iterable[tuple[int, int, int]]:
    # annotated spans whose text is a gold value, newest utterance first, then
    # a verbatim search for the value
    order = list(reversed(range(len(turns))))
    for u in order:
        turn = turns[u]
        frame = turn.frame(service) if turn is not None else None
        if frame is None:
            continue
        for sp in frame.spans:
            if sp.slot == slot and turn.utterance[sp.start : sp.exclusive_end] in values:
                yield u, sp.start, sp.exclusive_end
    for u in order:
        turn = turns[u]
        if turn is None:
            continue
        for v in values:
            at = turn.utterance.rfind(v) if v else -1
            if at >= 0:
                yield u, at, at + len(v)


def derive_labels(
    turn: Turn,
    frame: Frame,
    prev_state: DialogueState,
    slot: SlotSchema,
    inp: EncoderInput,
    service: ServiceSchema | None = None,
    system_turn: Turn | None = None,
    cfg: AssemblyConfig | None = None,
) -> LabelSet:
    """Supervision for one (turn, slot) from the gold state update.

    ``system_turn`` is the system utterance included in the history, if any;
    its span annotations are searched as well as the user's.
    """
    state = frame.state
    if state is None:
        raise AssemblyError(f"frame for {frame.service} carries no state")
    use_intents = cfg.use_intents if cfg is not None else True
    intents = intent_candidates(service) if service is not None else [NONE_VALUE]
    intent_index = 0
    if use_intents and service is not None:
        if state.active_intent not in intents:
            raise AssemblyError(f"unknown active intent {state.active_intent!r} for {frame.service}")
        intent_index = intents.index(state.active_intent)
    requested = slot.name in state.requested_slots

    update = compute_state_update(prev_state.slot_values, state.slot_values).changed
    values = update.get(slot.name)
    if values is None:
        return LabelSet(Gate.NONE, requested=requested, intent_index=intent_index)
    if DONTCARE in values:
        return LabelSet(Gate.DONTCARE, requested=requested, intent_index=intent_index)

    if slot.is_categorical:
        for v in values:
            if v in slot.possible_values:
                idx = 1 + slot.possible_values.index(v)
                return LabelSet(Gate.PTR, categorical_index=idx, requested=requested, intent_index=intent_index)
        raise AssemblyError(
            f"{frame.service}.{slot.name}: gold value {values[0]!r} not among possible_values"
        )

    turns: list[Turn | None] = [system_turn, turn] if len(inp.history) == 2 else [turn]
    span = None
    for u, s, e in _span_candidates(values, slot.name, frame.service, turns):
        span = _char_span_to_positions(inp, u, s, e)
        if span is not None:
            break
    return LabelSet(
        Gate.PTR,
        span=span,
        span_supervised=span is not None,
        requested=requested,
        intent_index=intent_index,
    )


def turn_history(dialogue: Dialogue, t: int) -> tuple[list[tuple[str, str]], Turn | None]:
    """Preceding system utterance (if any) plus the user utterance at ``t``."""
    system_turn = None
    if t > 0 and dialogue.turns[t - 1].speaker == SYSTEM:
        system_turn = dialogue.turns[t - 1]
    history = [] if system_turn is None else [(SYSTEM, system_turn.utterance)]
    history.append((USER, dialogue.turns[t].utterance))
    return history, system_turn


def dialogue_rng(seed: int, dialogue_id: str) -> np.random.Generator:
    return np.random.default_rng([seed, zlib.crc32(dialogue_id.encode("utf-8"))])


def make_examples(
    dialogue: Dialogue,
    schemas: Sequence[ServiceSchema],
    cfg: AssemblyConfig,
    vocab: Vocabulary,
    rng_seed: int = 0,
) -> list[TrainingExample]:
    """All positive examples plus a seeded sample of the negatives.

    One uniform draw is made per candidate whether or not it is negative, so
    a candidate kept at some probability is also kept at any higher one.
    """
    by_name = {s.service_name: s for s in schemas}
    rng = dialogue_rng(rng_seed, dialogue.dialogue_id)
    prev_states: dict[str, DialogueState] = {}
    examples = []
    for t, turn in enumerate(dialogue.turns):
        if turn.speaker != USER:
            continue
        history, system_turn = turn_history(dialogue, t)
        for frame in turn.frames:
            if frame.state is None:
                continue
            service = by_name[frame.service]
            prev = prev_states.get(frame.service, DialogueState())
            for slot in service.slots:
                q = build_question(slot, service, cfg.use_nld)
                inp = assemble_input(q, history, service.intents, slot, cfg, vocab)
                labels = derive_labels(turn, frame, prev, slot, inp, service, system_turn, cfg)
                draw = rng.random()
                if labels.gate == Gate.NONE:
                    p = cfg.cat_neg_sampling_prob if slot.is_categorical else cfg.noncat_neg_sampling_prob
                    if draw >= p:
                        continue
                meta = ExampleMeta(dialogue.dialogue_id, t, frame.service, slot.name, slot.is_categorical)
                examples.append(TrainingExample(inp, labels, meta))
            prev_states[frame.service] = frame.state
    return examples


def example_to_dict(ex: TrainingExample) -> dict:
    labels = asdict(ex.labels)
    labels["gate"] = ex.labels.gate.name.lower()
    n = int(np.flatnonzero(ex.input.attention_mask).max()) + 1
    return {
        "meta": asdict(ex.meta),
        "token_ids": ex.input.token_ids[:n].tolist(),
        "attention_mask": ex.input.attention_mask[:n].tolist(),
        "labels": labels,
    }


def dump_examples(examples: Iterable[TrainingExample], path: str | os.PathLike) -> None:
    """Line-delimited json, one example per line; trailing padding is dropped."""
    with Path(path).open("w", encoding="utf-8") as fh:
        for ex in examples:
            fh.write(json.dumps(example_to_dict(ex)) + "\n")
