"""Glue shared by the CLI and the experiments: vocabulary corpus, example sets,
prediction over whole dialogue sets and the two reference baselines."""

from __future__ import annotations

from collections import Counter, defaultdict
from typing import Iterable, Sequence

from .assembly import AssemblyConfig, TrainingExample, make_examples
from .evaluation import MetricReport, TurnPrediction, build_report, pair_predictions
from .schema import DONTCARE, USER, Dialogue, DialogueState, ServiceSchema
from .tokenization import Vocabulary, build_vocab
from .tracker import Predictor, substitute_states, track_dialogue


def schema_texts(schemas: Iterable[ServiceSchema]) -> list[str]:
    out = []
    for s in schemas:
        out += [s.service_name, s.description]
        for slot in s.slots:
            out += [slot.name, slot.description, *slot.possible_values]
        for intent in s.intents:
            out += [intent.name, intent.description]
    return out


def corpus(dialogues: Iterable[Dialogue], schemas: Iterable[ServiceSchema]) -> list[str]:
    """Utterances plus every schema string."""
    return [t.utterance for d in dialogues for t in d.turns] + schema_texts(schemas)


def vocab_for(dialogues, schemas, max_size: int = 5000) -> Vocabulary:
    return build_vocab(corpus(dialogues, schemas), max_size)


def training_examples(
    dialogues: Sequence[Dialogue],
    schemas: Sequence[ServiceSchema],
    cfg: AssemblyConfig,
    vocab: Vocabulary,
    seed: int = 0,
) -> list[TrainingExample]:
    return [e for d in dialogues for e in make_examples(d, schemas, cfg, vocab, seed)]


def predict_dialogues(dialogues: Sequence[Dialogue], schemas: Sequence[ServiceSchema], predictor: Predictor) -> list[Dialogue]:
    return [substitute_states(d, track_dialogue(d, schemas, predictor)) for d in dialogues]


def evaluate(
    dialogues: Sequence[Dialogue],
    schemas: Sequence[ServiceSchema],
    predictor: Predictor,
    seen_services: Iterable[str] | None = None,
) -> MetricReport:
    predicted = predict_dialogues(dialogues, schemas, predictor)
    return build_report(pair_predictions(dialogues, predicted), schemas, seen_services)


# --------------------------------------------------------------------------
# baselines


def always_none_predictions(dialogues: Sequence[Dialogue]) -> list[TurnPrediction]:
    """Empty state for every frame."""
    return [
        TurnPrediction(p.dialogue_id, p.turn_index, p.service, DialogueState(), p.gold)
        for p in pair_predictions(dialogues, [])
    ]


def majority_values(train: Sequence[Dialogue]) -> tuple[dict[str, str], str | None]:
    """Most frequent training value per slot name, and overall.

    Counted over the slot assignments of each user-turn frame; ties go to the
    lexicographically smaller value. ``dontcare`` is not a candidate.
    """
    by_slot: dict[str, Counter] = defaultdict(Counter)
    overall: Counter = Counter()
    for d in train:
        for turn in d.turns:
            if turn.speaker != USER:
                continue
            for f in turn.frames:
                if f.state is None:
                    continue
                for slot, values in f.state.slot_values.items():
                    if values and values[0] != DONTCARE:
                        by_slot[slot][values[0]] += 1
                        overall[values[0]] += 1

    def top(c: Counter):
        return min(c.items(), key=lambda kv: (-kv[1], kv[0]))[0] if c else None

    return {k: top(c) for k, c in by_slot.items()}, top(overall)


def majority_predictions(
    dialogues: Sequence[Dialogue], schemas: Sequence[ServiceSchema], train: Sequence[Dialogue]
) -> list[TurnPrediction]:
    """Every slot of the frame's service set to its majority training value.

    Categorical slots without a same-name training value take their first
    possible value; other slots fall back to the overall majority value.
    """
    per_slot, overall = majority_values(train)
    by_name = {s.service_name: s for s in schemas}
    out = []
    for p in pair_predictions(dialogues, []):
        values = {}
        for slot in by_name[p.service].slots:
            v = per_slot.get(slot.name)
            if slot.is_categorical and v not in slot.possible_values:
                v = slot.possible_values[0] if slot.possible_values else None
            if v is None:
                v = overall
            if v is not None:
                values[slot.name] = [v]
        out.append(TurnPrediction(p.dialogue_id, p.turn_index, p.service, DialogueState(slot_values=values), p.gold))
    return out
