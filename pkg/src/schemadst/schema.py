"""Schemas, dialogues and dialogue states in the SGD json format.

Everything here is a frozen dataclass. Slot values are kept as lists of
acceptable surface forms; the first entry is the canonical one.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable

DONTCARE = "dontcare"
NONE_VALUE = "NONE"
USER = "USER"
SYSTEM = "SYSTEM"

SlotValueMap = dict[str, list[str]]


class SchemaError(ValueError):
    """Malformed schema file or a violated schema invariant."""


class DialogueError(ValueError):
    """Malformed dialogue file or inconsistent annotation."""


@dataclass(frozen=True)
class SlotSchema:
    name: str
    description: str
    is_categorical: bool
    possible_values: tuple[str, ...] = ()


@dataclass(frozen=True)
class IntentSchema:
    name: str
    description: str
    required_slots: tuple[str, ...] = ()
    optional_slots: tuple[str, ...] = ()


@dataclass(frozen=True)
class ServiceSchema:
    service_name: str
    description: str
    slots: tuple[SlotSchema, ...]
    intents: tuple[IntentSchema, ...] = ()

    def slot(self, name: str) -> SlotSchema:
        for s in self.slots:
            if s.name == name:
                return s
        raise KeyError(f"{self.service_name} has no slot {name!r}")

    @property
    def slot_names(self) -> list[str]:
        return [s.name for s in self.slots]

    @property
    def intent_names(self) -> list[str]:
        return [i.name for i in self.intents]


@dataclass(frozen=True)
class DialogueState:
    active_intent: str = NONE_VALUE
    requested_slots: tuple[str, ...] = ()
    slot_values: SlotValueMap = field(default_factory=dict)


@dataclass(frozen=True)
class SpanAnnotation:
    slot: str
    start: int
    exclusive_end: int


@dataclass(frozen=True)
class Frame:
    service: str
    state: DialogueState | None = None
    spans: tuple[SpanAnnotation, ...] = ()


@dataclass(frozen=True)
class Turn:
    speaker: str
    utterance: str
    frames: tuple[Frame, ...] = ()

    def frame(self, service: str) -> Frame | None:
        for f in self.frames:
            if f.service == service:
                return f
        return None


@dataclass(frozen=True)
class Dialogue:
    dialogue_id: str
    services: tuple[str, ...]
    turns: tuple[Turn, ...]


@dataclass(frozen=True)
class StateUpdate:
    changed: SlotValueMap = field(default_factory=dict)


# --------------------------------------------------------------------------
# state updates


def compute_state_update(prev: SlotValueMap, cur: SlotValueMap) -> StateUpdate:
    """Entries of ``cur`` that are new or whose value list changed.

    Keys that disappear from ``cur`` are not reported; states never shrink.
    """
    changed = {k: list(v) for k, v in cur.items() if list(prev.get(k, ())) != list(v)}
    return StateUpdate(changed)


def apply_state_update(state: SlotValueMap, update: StateUpdate) -> SlotValueMap:
    out = {k: list(v) for k, v in state.items()}
    for k, v in update.changed.items():
        out[k] = list(v)
    return out


# --------------------------------------------------------------------------
# parsing


def _read_json(path: str | os.PathLike, kind: type[ValueError]) -> Any:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise kind(f"{path}: cannot read file ({exc.strerror})") from exc
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        lines = text.splitlines()
        context = lines[exc.lineno - 1].strip() if 0 < exc.lineno <= len(lines) else ""
        raise kind(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg} near {context[:60]!r}") from exc


def _names(value: Any) -> tuple[str, ...]:
    # real SGD stores optional_slots as {slot: default_value}
    if isinstance(value, dict):
        return tuple(value)
    return tuple(value or ())


def schema_from_dict(obj: dict) -> ServiceSchema:
    try:
        name = obj["service_name"]
        slots = tuple(
            SlotSchema(
                name=s["name"],
                description=s.get("description", ""),
                is_categorical=bool(s.get("is_categorical", False)),
                possible_values=tuple(s.get("possible_values", ())),
            )
            for s in obj.get("slots", ())
        )
        intents = tuple(
            IntentSchema(
                name=i["name"],
                description=i.get("description", ""),
                required_slots=_names(i.get("required_slots")),
                optional_slots=_names(i.get("optional_slots")),
            )
            for i in obj.get("intents", ())
        )
    except (KeyError, TypeError) as exc:
        raise SchemaError(f"schema object {obj.get('service_name', '?')!r}: missing or bad field {exc}") from exc
    service = ServiceSchema(name, obj.get("description", ""), slots, intents)
    check_schema(service)
    return service


def check_schema(service: ServiceSchema) -> None:
    """Raise :class:`SchemaError` naming the first violated invariant."""
    seen: set[str] = set()
    for slot in service.slots:
        where = f"service {service.service_name!r}, slot {slot.name!r}"
        if slot.name in seen:
            raise SchemaError(f"{where}: duplicate slot name")
        seen.add(slot.name)
        if slot.is_categorical and not slot.possible_values:
            raise SchemaError(f"{where}: categorical slot has no possible_values")
        if not slot.is_categorical and slot.possible_values:
            raise SchemaError(f"{where}: non-categorical slot lists possible_values")
    intent_names: set[str] = set()
    for intent in service.intents:
        if intent.name in intent_names:
            raise SchemaError(f"service {service.service_name!r}: duplicate intent {intent.name!r}")
        intent_names.add(intent.name)
        for ref in intent.required_slots + intent.optional_slots:
            if ref not in seen:
                raise SchemaError(
                    f"service {service.service_name!r}, intent {intent.name!r}: unknown slot {ref!r}"
                )


def schema_to_dict(service: ServiceSchema) -> dict:
    return {
        "service_name": service.service_name,
        "description": service.description,
        "slots": [
            {
                "name": s.name,
                "description": s.description,
                "is_categorical": s.is_categorical,
                "possible_values": list(s.possible_values),
            }
            for s in service.slots
        ],
        "intents": [
            {
                "name": i.name,
                "description": i.description,
                "required_slots": list(i.required_slots),
                "optional_slots": list(i.optional_slots),
            }
            for i in service.intents
        ],
    }


def load_schemas(path: str | os.PathLike) -> list[ServiceSchema]:
    """Load a json array of service schemas.

    ``path`` may also be an SGD split directory, in which case its
    ``schema.json`` is read.
    """
    path = Path(path)
    if path.is_dir():
        path = path / "schema.json"
    data = _read_json(path, SchemaError)
    if not isinstance(data, list):
        raise SchemaError(f"{path}: expected a json array of schemas")
    services = [schema_from_dict(obj) for obj in data]
    names = [s.service_name for s in services]
    dupes = {n for n in names if names.count(n) > 1}
    if dupes:
        raise SchemaError(f"{path}: duplicate services {sorted(dupes)}")
    return services


def save_schemas(schemas: Iterable[ServiceSchema], path: str | os.PathLike) -> None:
    Path(path).write_text(json.dumps([schema_to_dict(s) for s in schemas], indent=2), encoding="utf-8")


def _state_from_dict(obj: dict) -> DialogueState:
    return DialogueState(
        active_intent=obj.get("active_intent", NONE_VALUE) or NONE_VALUE,
        requested_slots=tuple(obj.get("requested_slots", ())),
        slot_values={k: list(v) for k, v in obj.get("slot_values", {}).items()},
    )


def state_to_dict(state: DialogueState) -> dict:
    return {
        "active_intent": state.active_intent,
        "requested_slots": list(state.requested_slots),
        "slot_values": {k: list(v) for k, v in state.slot_values.items()},
    }


def dialogue_from_dict(obj: dict) -> Dialogue:
    """Build a :class:`Dialogue`, checking spans and frame services.

    SGD fields this engine does not use (actions, service calls, results)
    are ignored.
    """
    try:
        did = str(obj["dialogue_id"])
        services = tuple(obj["services"])
        raw_turns = obj["turns"]
    except (KeyError, TypeError) as exc:
        raise DialogueError(f"dialogue {obj.get('dialogue_id', '?')!r}: missing field {exc}") from exc

    turns = []
    for t_idx, raw in enumerate(raw_turns):
        speaker = raw.get("speaker")
        if speaker not in (USER, SYSTEM):
            raise DialogueError(f"dialogue {did} turn {t_idx}: bad speaker {speaker!r}")
        utterance = raw.get("utterance", "")
        frames = []
        for raw_frame in raw.get("frames", ()):
            service = raw_frame.get("service")
            if service not in services:
                raise DialogueError(
                    f"dialogue {did} turn {t_idx}: frame service {service!r} not in services {list(services)}"
                )
            spans = []
            for sp in raw_frame.get("slots", ()):
                start, end = int(sp["start"]), int(sp["exclusive_end"])
                if not 0 <= start < end <= len(utterance):
                    raise DialogueError(
                        f"dialogue {did} turn {t_idx}: span {sp['slot']!r} [{start}, {end}) "
                        f"out of bounds for utterance of length {len(utterance)}"
                    )
                spans.append(SpanAnnotation(sp["slot"], start, end))
            state = None
            if speaker == USER and "state" in raw_frame:
                state = _state_from_dict(raw_frame["state"])
            frames.append(Frame(service, state, tuple(spans)))
        turns.append(Turn(speaker, utterance, tuple(frames)))
    return Dialogue(did, services, tuple(turns))


def dialogue_to_dict(dialogue: Dialogue) -> dict:
    turns = []
    for turn in dialogue.turns:
        frames = []
        for f in turn.frames:
            raw = {
                "service": f.service,
                "slots": [{"slot": s.slot, "start": s.start, "exclusive_end": s.exclusive_end} for s in f.spans],
            }
            if f.state is not None:
                raw["state"] = state_to_dict(f.state)
            frames.append(raw)
        turns.append({"speaker": turn.speaker, "utterance": turn.utterance, "frames": frames})
    return {"dialogue_id": dialogue.dialogue_id, "services": list(dialogue.services), "turns": turns}


def load_dialogues(path: str | os.PathLike) -> list[Dialogue]:
    """Load dialogues from a json array file or an SGD split directory."""
    path = Path(path)
    if path.is_dir():
        files = sorted(path.glob("dialogues_*.json"))
        if not files:
            raise DialogueError(f"{path}: no dialogues_*.json files")
    else:
        files = [path]
    out = []
    for fp in files:
        data = _read_json(fp, DialogueError)
        if not isinstance(data, list):
            raise DialogueError(f"{fp}: expected a json array of dialogues")
        out.extend(dialogue_from_dict(obj) for obj in data)
    return out


def save_dialogues(dialogues: Iterable[Dialogue], path: str | os.PathLike) -> None:
    Path(path).write_text(
        json.dumps([dialogue_to_dict(d) for d in dialogues], indent=1), encoding="utf-8"
    )


# --------------------------------------------------------------------------
# validation


def user_states(dialogue: Dialogue, service: str) -> list[tuple[int, DialogueState]]:
    """(turn index, state) for every user-turn frame of ``service``."""
    out = []
    for i, turn in enumerate(dialogue.turns):
        if turn.speaker != USER:
            continue
        f = turn.frame(service)
        if f is not None and f.state is not None:
            out.append((i, f.state))
    return out


def validate_dialogue(d: Dialogue, schemas: Iterable[ServiceSchema]) -> list[str]:
    """Return human-readable issues; an empty list means the dialogue is consistent."""
    by_name = {s.service_name: s for s in schemas}
    issues: list[str] = []
    for i in range(1, len(d.turns)):
        if d.turns[i].speaker == d.turns[i - 1].speaker:
            issues.append(f"{d.dialogue_id} turn {i}: speakers do not alternate")
    for i, turn in enumerate(d.turns):
        where = f"{d.dialogue_id} turn {i}"
        if turn.speaker == SYSTEM and any(f.state is not None for f in turn.frames):
            issues.append(f"{where}: system turn carries a state")
        for f in turn.frames:
            service = by_name.get(f.service)
            if service is None:
                issues.append(f"{where}: no schema for service {f.service!r}")
                continue
            slots = {s.name: s for s in service.slots}
            for sp in f.spans:
                if sp.slot not in slots:
                    issues.append(f"{where}: span for unknown slot {f.service}.{sp.slot}")
            if f.state is None:
                continue
            st = f.state
            if st.active_intent != NONE_VALUE and st.active_intent not in service.intent_names:
                issues.append(f"{where}: unknown intent {st.active_intent!r}")
            for r in st.requested_slots:
                if r not in slots:
                    issues.append(f"{where}: requested unknown slot {f.service}.{r}")
            for name, values in st.slot_values.items():
                slot = slots.get(name)
                if slot is None:
                    issues.append(f"{where}: unknown slot {f.service}.{name}")
                    continue
                if not values:
                    issues.append(f"{where}: empty value list for {f.service}.{name}")
                if slot.is_categorical:
                    allowed = set(slot.possible_values) | {DONTCARE}
                    bad = [v for v in values if v not in allowed]
                    if bad:
                        issues.append(f"{where}: {f.service}.{name} value {bad[0]!r} not in possible_values")
    for service in d.services:
        prev: SlotValueMap = {}
        for i, st in user_states(d, service):
            dropped = sorted(set(prev) - set(st.slot_values))
            if dropped:
                issues.append(f"{d.dialogue_id} turn {i}: {service} state drops slots {dropped}")
            prev = st.slot_values
    return issues
