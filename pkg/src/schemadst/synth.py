"""Template-generated schemas and dialogues in the SGD format.

Slots are drawn from a small set of concepts (city, time, party size, ...)
each with a closed value lexicon and a pool of description paraphrases.
Seen services use all but the last paraphrase of every pool; unseen
services reuse concepts seen in training but get the held-out paraphrase
and slot name, so transfer has to go through the descriptions.

Every non-categorical value a state holds is mentioned verbatim in the
system or user utterance of the turn that sets it, with span annotations.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

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
    SpanAnnotation,
    Turn,
    save_dialogues,
    save_schemas,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Concept:
    noun: str
    names: tuple[str, ...]
    descriptions: tuple[str, ...]
    values: tuple[str, ...]


CONCEPTS: dict[str, Concept] = {
    "city": Concept(
        "city",
        ("city", "location", "area", "town"),
        ("name of the city", "city where the user wants to go", "the city to search in", "city of interest to the user"),
        ("San Francisco", "New York", "Los Angeles", "Seattle", "Chicago", "Boston", "Denver", "Austin", "Portland", "Miami"),
    ),
    "date": Concept(
        "date",
        ("date", "day", "booking_date", "visit_date"),
        ("date of the booking", "date for the reservation", "the date of the visit", "date the user prefers"),
        ("March 3rd", "next Monday", "tomorrow", "the 14th", "Friday", "June 21st", "this weekend", "Sunday"),
    ),
    "time": Concept(
        "time",
        ("time", "start_time", "booking_time", "pickup_time"),
        ("time of the booking", "start time of the reservation", "the time the user wants", "preferred time of day"),
        ("7pm", "10 am", "noon", "6:30 pm", "8 in the morning", "5pm", "half past nine", "11:15 am"),
    ),
    "person": Concept(
        "name",
        ("contact_name", "guest_name", "person", "recipient"),
        ("name of the person", "name the booking is under", "the name of the guest", "name of the contact person"),
        ("Alice", "Bob Smith", "Maria", "John Lee", "Priya", "Tom Baker", "Wei Chen", "Sara"),
    ),
    "venue": Concept(
        "place",
        ("venue", "place_name", "spot", "destination_place"),
        ("name of the place", "the place to book", "place the user picked", "name of the chosen place"),
        ("Blue Bottle", "The Grill", "Sunset Inn", "Green Garden", "Harbor House", "Luna Cafe", "Red Rock", "Oak Lodge"),
    ),
    "count": Concept(
        "people",
        ("party_size", "number_of_people", "group_size", "num_guests"),
        ("number of people", "how many people are coming", "count of people in the group", "number of people in the party"),
        ("1", "2", "3", "4", "5", "6"),
    ),
    "price": Concept(
        "price",
        ("price_range", "budget", "price_level", "cost"),
        ("price range", "the price the user can afford", "budget or price level", "expected price"),
        ("cheap", "moderate", "expensive", "luxury"),
    ),
    "seating": Concept(
        "class",
        ("seating_class", "cabin", "ticket_class", "fare_class"),
        ("class of the seat", "cabin class for the trip", "ticket class", "class of service requested"),
        ("economy", "business", "premium economy", "first class"),
    ),
    "cuisine": Concept(
        "food",
        ("cuisine", "food_type", "category", "dish_style"),
        ("type of food", "kind of food served", "food category", "the food the user wants"),
        ("Italian", "Mexican", "Thai", "Chinese", "Indian", "French", "Greek", "Korean"),
    ),
}

# (service name, description paraphrases, thing noun for intents)
ARCHETYPES = (
    ("Restaurants", ("service to find and reserve restaurants", "restaurant search and table booking", "a service for reserving restaurant tables"), "restaurant"),
    ("Hotels", ("service to search and book hotels", "hotel room booking service", "a service for finding hotel rooms"), "hotel"),
    ("Flights", ("service to find and book flights", "flight ticket booking", "a service for buying flight tickets"), "flight"),
    ("Events", ("service to find and attend events", "event ticket service", "a service for booking event tickets"), "event"),
    ("Salons", ("service to book salon appointments", "salon and stylist booking", "a service for hair salon visits"), "salon"),
    ("Trains", ("service to find and book trains", "train ticket booking", "a service for buying train tickets"), "train"),
)

INTENT_VERBS = (
    ("Find", ("find a {thing}", "find an available {thing}", "search to find a {thing}")),
    ("Book", ("book a {thing}", "make a booking to book a {thing}", "book the {thing} for the user")),
    ("Cancel", ("cancel a {thing}", "cancel an existing {thing}", "cancel the {thing} booking")),
)

_ASK = ("What {noun} would you like?", "Which {noun} do you prefer?", "Do you have a {noun} in mind?")
_ANSWER = ("{value} please.", "Let's say {value}.", "{value} would be great.", "I'd go with {value}.")
_OFFER = ("How about {value} for the {noun}?", "I can do {value} for the {noun}. Does that work?")
_ACCEPT = ("Sure, that works.", "Yes, sounds good.", "Okay, perfect.")
_OPEN = ("Anything else?", "What else can I do for you?", "Okay. Anything more?")
_INFORM = ("The {noun} should be {value}.", "I want {value} as the {noun}.", "Make the {noun} {value}.")
_DONTCARE_Q = ("Do you have a preferred {noun}?", "Any preference for the {noun}?")
_DONTCARE = ("Any {noun} is fine.", "I don't care about the {noun}.")
_REQUEST = ("Can you tell me the {noun}?", "What is the {noun}?")
_CHANGE = ("Actually, change the {noun} to {value}.", "Sorry, make the {noun} {value} instead.")
_INTENT = ("I want to {intent}.", "Can you help me {intent}?", "Please {intent} for me.")
_GREETING = ("Hi there.", "Hello, I need some help.")


@dataclass(frozen=True)
class SynthConfig:
    num_services: int = 4
    num_unseen_services: int = 1
    slots_per_service: int = 4
    categorical_fraction: float = 0.5
    values_per_categorical: int = 3
    intents_per_service: int = 2
    dialogues_per_service: int = 50
    turns_per_dialogue: int = 4
    domain_switch_fraction: float = 0.0
    # concept -> description paraphrases; None uses the built-in pools
    description_paraphrase_pool: dict[str, list[str]] | None = None
    seed: int = 0

    def __post_init__(self):
        for name in ("categorical_fraction", "domain_switch_fraction"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        for name in ("num_services", "slots_per_service", "values_per_categorical",
                     "intents_per_service", "dialogues_per_service", "turns_per_dialogue"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not 0 <= self.num_unseen_services < self.num_services:
            raise ValueError("num_unseen_services must be smaller than num_services")
        if self.slots_per_service > len(CONCEPTS):
            raise ValueError(f"at most {len(CONCEPTS)} slots per service")
        if self.intents_per_service > len(INTENT_VERBS):
            raise ValueError(f"at most {len(INTENT_VERBS)} intents per service")


def _pool(cfg: SynthConfig, concept: str) -> tuple[str, ...]:
    if cfg.description_paraphrase_pool and concept in cfg.description_paraphrase_pool:
        return tuple(cfg.description_paraphrase_pool[concept])
    return CONCEPTS[concept].descriptions


def _pick(rng: np.random.Generator, options: Sequence, unseen: bool):
    # the last option is held out for unseen services whenever there is a choice
    if len(options) == 1:
        return options[0]
    if unseen:
        return options[-1]
    return options[int(rng.integers(len(options) - 1))]


def synth_schemas(cfg: SynthConfig) -> list[ServiceSchema]:
    """Seen services first, then ``num_unseen_services`` unseen ones."""
    rng = np.random.default_rng([cfg.seed, 0])
    n_seen = cfg.num_services - cfg.num_unseen_services
    if cfg.num_unseen_services and any(len(_pool(cfg, c)) < 2 for c in CONCEPTS):
        log.warning("paraphrase pool of size 1: unseen services share descriptions with seen ones")
    concept_keys = list(CONCEPTS)
    used: set[str] = set()
    services = []
    counts: dict[str, int] = {}
    for i in range(cfg.num_services):
        unseen = i >= n_seen
        if unseen:
            fresh = [a for a in range(len(ARCHETYPES)) if ARCHETYPES[a][0] not in counts]
            arch = fresh[(i - n_seen) % len(fresh)] if fresh else i % len(ARCHETYPES)
            candidates = sorted(used) if len(used) >= cfg.slots_per_service else concept_keys
        else:
            arch = i % len(ARCHETYPES)
            candidates = concept_keys
        arch_name, arch_descs, thing = ARCHETYPES[arch]
        counts[arch_name] = counts.get(arch_name, 0) + 1
        chosen = [candidates[j] for j in sorted(rng.choice(len(candidates), cfg.slots_per_service, replace=False))]
        if not unseen:
            used.update(chosen)
        n_cat = int(round(cfg.categorical_fraction * cfg.slots_per_service))
        cat_idx = set(rng.choice(len(chosen), n_cat, replace=False).tolist())
        slots = []
        for j, key in enumerate(chosen):
            concept = CONCEPTS[key]
            values: tuple[str, ...] = ()
            if j in cat_idx:
                picks = rng.choice(len(concept.values), min(cfg.values_per_categorical, len(concept.values)), replace=False)
                values = tuple(concept.values[p] for p in sorted(picks))
            slots.append(
                SlotSchema(
                    name=_pick(rng, concept.names, unseen),
                    description=_pick(rng, _pool(cfg, key), unseen),
                    is_categorical=j in cat_idx,
                    possible_values=values,
                )
            )
        names = [s.name for s in slots]
        intents = []
        for verb, descs in INTENT_VERBS[: cfg.intents_per_service]:
            intents.append(
                IntentSchema(
                    name=f"{verb}{arch_name}",
                    description=_pick(rng, descs, unseen).format(thing=thing),
                    required_slots=tuple(names[:2]),
                    optional_slots=tuple(names[2:]),
                )
            )
        services.append(
            ServiceSchema(
                service_name=f"{arch_name}_{counts[arch_name]}",
                description=_pick(rng, arch_descs, unseen),
                slots=tuple(slots),
                intents=tuple(intents),
            )
        )
    return services


def split_services(schemas: Sequence[ServiceSchema], cfg: SynthConfig) -> dict[str, list[str]]:
    n_seen = len(schemas) - cfg.num_unseen_services
    return {
        "train": [s.service_name for s in schemas[:n_seen]],
        "dev": [s.service_name for s in schemas[n_seen:]],
    }


def _concept_of(slot: SlotSchema) -> Concept:
    for c in CONCEPTS.values():
        if slot.name in c.names:
            return c
    raise KeyError(f"slot {slot.name!r} was not generated from a known concept")


class _Utterance:
    """Utterance text builder that records character spans of inserted values."""

    def __init__(self):
        self.text = ""
        self.spans: list[SpanAnnotation] = []

    def add(self, template: str, slot: SlotSchema | None = None, value: str | None = None, noun: str = "") -> None:
        if self.text:
            self.text += " "
        if value is None:
            self.text += template.format(noun=noun)
            return
        head, tail = template.split("{value}")
        head = head.format(noun=noun)
        start = len(self.text) + len(head)
        self.text += head + value + tail.format(noun=noun)
        if not slot.is_categorical:
            self.spans.append(SpanAnnotation(slot.name, start, start + len(value)))


def _choice(rng: np.random.Generator, options: Sequence):
    return options[int(rng.integers(len(options)))]


def _value(rng, slot: SlotSchema, exclude: str | None = None) -> str:
    pool = list(slot.possible_values) if slot.is_categorical else list(_concept_of(slot).values)
    if exclude in pool and len(pool) > 1:
        pool.remove(exclude)
    return _choice(rng, pool)


def _service_segment(
    rng: np.random.Generator, service: ServiceSchema, n_user_turns: int, intro_system: str | None
) -> list[tuple[str, _Utterance, _Utterance, DialogueState]]:
    """(service, system utterance, user utterance, state) for consecutive user turns."""
    slots = list(service.slots)
    values: dict[str, list[str]] = {}
    intent = NONE_VALUE
    out = []
    for k in range(n_user_turns):
        sys_u, usr_u = _Utterance(), _Utterance()
        requested: tuple[str, ...] = ()
        unset = [s for s in slots if s.name not in values]
        set_slots = [s for s in slots if s.name in values and values[s.name] != [DONTCARE]]
        if k == 0:
            if intro_system is not None:
                sys_u.add(intro_system)
            if rng.random() < 0.15 and n_user_turns > 1:
                usr_u.add(_choice(rng, _GREETING))
            else:
                chosen_intent = service.intents[int(rng.integers(len(service.intents)))] if service.intents else None
                if chosen_intent is not None:
                    intent = chosen_intent.name
                    usr_u.add(_choice(rng, _INTENT).replace("{intent}", chosen_intent.description))
                if unset and rng.random() < 0.6:
                    slot = _choice(rng, unset)
                    v = _value(rng, slot)
                    usr_u.add(_choice(rng, _INFORM), slot, v, _concept_of(slot).noun)
                    values[slot.name] = [v]
        else:
            if intent == NONE_VALUE and service.intents:
                intent = service.intents[0].name
                sys_u.add("How can I help?")
                usr_u.add(_choice(rng, _INTENT).replace("{intent}", service.intents[0].description))
            moves = ["open_request"]
            if unset:
                moves += ["ask", "ask", "offer", "inform", "inform", "dontcare"]
            if len(unset) >= 2:
                moves += ["inform2"]
            if set_slots:
                moves += ["change"]
            move = _choice(rng, moves)
            if move in ("ask", "offer", "dontcare", "inform", "inform2"):
                slot = _choice(rng, unset)
                noun = _concept_of(slot).noun
                if move == "ask":
                    v = _value(rng, slot)
                    sys_u.add(_choice(rng, _ASK), noun=noun)
                    usr_u.add(_choice(rng, _ANSWER), slot, v, noun)
                    values[slot.name] = [v]
                elif move == "offer":
                    v = _value(rng, slot)
                    sys_u.add(_choice(rng, _OFFER), slot, v, noun)
                    usr_u.add(_choice(rng, _ACCEPT))
                    values[slot.name] = [v]
                elif move == "dontcare":
                    sys_u.add(_choice(rng, _DONTCARE_Q), noun=noun)
                    usr_u.add(_choice(rng, _DONTCARE), noun=noun)
                    values[slot.name] = [DONTCARE]
                else:
                    sys_u.add(_choice(rng, _OPEN))
                    others = [s for s in unset if s is not slot]
                    for s in [slot] + ([_choice(rng, others)] if move == "inform2" else []):
                        v = _value(rng, s)
                        usr_u.add(_choice(rng, _INFORM), s, v, _concept_of(s).noun)
                        values[s.name] = [v]
            elif move == "change":
                slot = _choice(rng, set_slots)
                v = _value(rng, slot, exclude=values[slot.name][0])
                sys_u.add(_choice(rng, _OPEN))
                usr_u.add(_choice(rng, _CHANGE), slot, v, _concept_of(slot).noun)
                values[slot.name] = [v]
            else:
                slot = _choice(rng, slots)
                sys_u.add(_choice(rng, _OPEN))
                usr_u.add(_choice(rng, _REQUEST), noun=_concept_of(slot).noun)
                requested = (slot.name,)
        state = DialogueState(intent, requested, {k: list(v) for k, v in values.items()})
        out.append((service.service_name, sys_u, usr_u, state))
    return out


def synth_dialogue(
    dialogue_id: str,
    services: Sequence[ServiceSchema],
    n_user_turns: int,
    rng: np.random.Generator,
) -> Dialogue:
    """One dialogue over one or two services; the second takes over halfway."""
    segments = []
    if len(services) == 1:
        segments = _service_segment(rng, services[0], n_user_turns, None)
    else:
        first = max(1, n_user_turns // 2)
        segments = _service_segment(rng, services[0], first, None)
        segments += _service_segment(rng, services[1], max(1, n_user_turns - first), "Done. Anything else today?")
    turns: list[Turn] = []
    for k, (service, sys_u, usr_u, state) in enumerate(segments):
        if k > 0:
            text = sys_u.text or _choice(rng, _OPEN)
            turns.append(Turn(SYSTEM, text, (Frame(service, None, tuple(sys_u.spans)),)))
        turns.append(Turn(USER, usr_u.text, (Frame(service, state, tuple(usr_u.spans)),)))
    turns.append(Turn(SYSTEM, "Your request is confirmed.", (Frame(segments[-1][0]),)))
    names = tuple(dict.fromkeys(s.service_name for s in services))
    return Dialogue(dialogue_id, names, tuple(turns))


def synth_dialogues(schemas: Sequence[ServiceSchema], cfg: SynthConfig) -> list[Dialogue]:
    out = []
    for si, service in enumerate(schemas):
        for i in range(cfg.dialogues_per_service):
            rng = np.random.default_rng([cfg.seed, 1, si, i])
            services = [service]
            if len(schemas) > 1 and cfg.turns_per_dialogue > 1 and rng.random() < cfg.domain_switch_fraction:
                other = [s for s in schemas if s.service_name != service.service_name]
                services.append(other[int(rng.integers(len(other)))])
            out.append(synth_dialogue(f"{si + 1}_{i:05d}", services, cfg.turns_per_dialogue, rng))
    return out


def write_dataset(cfg: SynthConfig, out_dir: str | os.PathLike) -> dict[str, str]:
    """Write train/dev schema and dialogue files plus ``split.json``; returns the paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    schemas = synth_schemas(cfg)
    split = split_services(schemas, cfg)
    paths = {}
    for part, names in split.items():
        part_schemas = [s for s in schemas if s.service_name in names]
        if not part_schemas:
            continue
        dialogues = synth_dialogues(part_schemas, cfg)
        paths[f"{part}_schemas"] = str(out / f"{part}_schemas.json")
        paths[f"{part}_dialogues"] = str(out / f"{part}_dialogues.json")
        save_schemas(part_schemas, paths[f"{part}_schemas"])
        save_dialogues(dialogues, paths[f"{part}_dialogues"])
    manifest = {"split": split, "config": asdict(cfg), "files": paths}
    (out / "split.json").write_text(json.dumps(manifest, indent=2), encoding="utf-8")
    return paths
