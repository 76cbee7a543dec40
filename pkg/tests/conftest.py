import numpy as np
import pytest

from schemadst.assembly import AssemblyConfig
from schemadst.encoder import EncoderConfig
from schemadst.model import Model
from schemadst.pipeline import vocab_for
from schemadst.schema import (
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
)
from schemadst.synth import SynthConfig, synth_dialogues, synth_schemas


def flights_schema() -> ServiceSchema:
    return ServiceSchema(
        "Flights_1",
        "flight booking service",
        (
            SlotSchema("origin", "city of departure", False, ()),
            SlotSchema("destination", "city of arrival", False, ()),
            SlotSchema("seating_class", "cabin class of the seat", True, ("economy", "business")),
            SlotSchema("passengers", "number of travellers", True, ("1", "2", "3")),
        ),
        (
            IntentSchema("SearchFlight", "search for a flight", ("origin", "destination"), ("seating_class",)),
            IntentSchema("ReserveFlight", "reserve a flight ticket", ("origin",), ()),
        ),
    )


def hotels_schema() -> ServiceSchema:
    return ServiceSchema(
        "Hotels_2",
        "hotel reservation service",
        (
            SlotSchema("location", "city of the hotel", False, ()),
            SlotSchema("stars", "star rating", True, ("3", "4", "5")),
        ),
        (IntentSchema("BookHotel", "book a hotel room", ("location",), ()),),
    )


def _span(text: str, value: str, slot: str) -> SpanAnnotation:
    start = text.index(value)
    return SpanAnnotation(slot, start, start + len(value))


def flights_dialogue() -> Dialogue:
    """Four user turns covering ptr, dontcare, overwrite and requests."""
    u0 = "I need a flight from San Francisco to Seattle."
    s1 = "Which cabin do you want?"
    u2 = "Business please, and I don't care how many seats."
    s3 = "Booked a business seat from San Francisco."
    u4 = "Actually I want to fly to Denver. What is the price?"
    st0 = DialogueState("SearchFlight", (), {"origin": ["San Francisco"], "destination": ["Seattle"]})
    st2 = DialogueState(
        "SearchFlight",
        (),
        {"origin": ["San Francisco"], "destination": ["Seattle"], "seating_class": ["business"], "passengers": ["dontcare"]},
    )
    st4 = DialogueState(
        "SearchFlight",
        ("seating_class",),
        {"origin": ["San Francisco"], "destination": ["Denver"], "seating_class": ["business"], "passengers": ["dontcare"]},
    )
    turns = (
        Turn(USER, u0, (Frame("Flights_1", st0, (_span(u0, "San Francisco", "origin"), _span(u0, "Seattle", "destination"))),)),
        Turn(SYSTEM, s1, (Frame("Flights_1", None, ()),)),
        Turn(USER, u2, (Frame("Flights_1", st2, ()),)),
        Turn(SYSTEM, s3, (Frame("Flights_1", None, (_span(s3, "San Francisco", "origin"),)),)),
        Turn(USER, u4, (Frame("Flights_1", st4, (_span(u4, "Denver", "destination"),)),)),
    )
    return Dialogue("flights_001", ("Flights_1",), turns)


@pytest.fixture
def flights():
    return flights_schema()


@pytest.fixture
def dialogue():
    return flights_dialogue()


@pytest.fixture(scope="session")
def synth_small():
    cfg = SynthConfig(num_services=3, num_unseen_services=1, dialogues_per_service=6, domain_switch_fraction=0.3, seed=3)
    schemas = synth_schemas(cfg)
    return cfg, schemas, synth_dialogues(schemas, cfg)


@pytest.fixture(scope="session")
def small_vocab(synth_small):
    _, schemas, dialogues = synth_small
    return vocab_for(list(dialogues) + [flights_dialogue()], list(schemas) + [flights_schema(), hotels_schema()])


SMALL_ASSEMBLY = AssemblyConfig(max_hist_len=64, max_intent_len=24, max_seq_len=112, max_categorical_values=4)
TINY_ENCODER = EncoderConfig(num_layers=2, hidden_size=8, num_heads=2, ffn_size=16, max_seq_len=112, dropout=0.0)


def tiny_model(vocab, assembly=SMALL_ASSEMBLY, dtype=np.float64, seed=0, **enc):
    cfg = TINY_ENCODER if not enc else EncoderConfig(**{**TINY_ENCODER.__dict__, **enc})
    return Model.create(vocab, cfg, assembly, seed=seed, dtype=dtype)
