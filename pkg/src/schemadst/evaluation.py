"""Active intent accuracy, requested slot F1, average and joint goal accuracy.

All metrics are computed over user-turn frames. Non-categorical values get
fuzzy credit (normalized Levenshtein similarity), categorical values must
match exactly.
"""

from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

from .schema import USER, Dialogue, DialogueState, ServiceSchema


class EvaluationError(ValueError):
    pass


@dataclass(frozen=True)
class TurnPrediction:
    dialogue_id: str
    turn_index: int
    service: str
    predicted: DialogueState
    gold: DialogueState


def levenshtein(a: str, b: str) -> int:
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, 1):
        cur = [i]
        for j, cb in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]


def _norm(s: str) -> str:
    return " ".join(s.lower().split())


def fuzzy_score(predicted: str, gold: str) -> float:
    """1 - distance / max length over lowercased, whitespace-normalized strings."""
    a, b = _norm(predicted), _norm(gold)
    if not a and not b:
        return 1.0
    if not a or not b:
        return 0.0
    return 1.0 - levenshtein(a, b) / max(len(a), len(b))


def _require(preds: Sequence[TurnPrediction]) -> None:
    if not preds:
        raise EvaluationError("no predictions to evaluate")


def _categorical_lookup(schemas: Iterable[ServiceSchema] | None):
    table = {}
    for s in schemas or ():
        for slot in s.slots:
            table[(s.service_name, slot.name)] = slot.is_categorical
    return lambda service, slot: table.get((service, slot), False)


def slot_score(predicted: list[str] | None, gold: list[str], categorical: bool) -> float:
    if not predicted:
        return 0.0
    value = predicted[0]
    if categorical:
        return 1.0 if value in gold else 0.0
    return max(fuzzy_score(value, g) for g in gold)


def active_intent_accuracy(preds: Sequence[TurnPrediction]) -> float:
    _require(preds)
    return sum(p.predicted.active_intent == p.gold.active_intent for p in preds) / len(preds)


def f1(predicted: set, gold: set) -> float:
    if not predicted and not gold:
        return 1.0
    tp = len(predicted & gold)
    if tp == 0:
        return 0.0
    precision, recall = tp / len(predicted), tp / len(gold)
    return 2 * precision * recall / (precision + recall)


def requested_slots_f1(preds: Sequence[TurnPrediction]) -> float:
    _require(preds)
    return sum(f1(set(p.predicted.requested_slots), set(p.gold.requested_slots)) for p in preds) / len(preds)


def _slot_scores(p: TurnPrediction, is_cat) -> dict[str, float]:
    return {
        name: slot_score(p.predicted.slot_values.get(name), gold, is_cat(p.service, name))
        for name, gold in p.gold.slot_values.items()
    }


def average_goal_accuracy(preds: Sequence[TurnPrediction], schemas: Iterable[ServiceSchema] | None = None) -> float:
    """Mean slot score over all gold-assigned slots; 1.0 when no frame assigns any."""
    _require(preds)
    is_cat = _categorical_lookup(schemas)
    scores = [s for p in preds for s in _slot_scores(p, is_cat).values()]
    return sum(scores) / len(scores) if scores else 1.0


def frame_joint_score(p: TurnPrediction, is_cat, strict: bool = False) -> float:
    if set(p.predicted.slot_values) != set(p.gold.slot_values):
        return 0.0
    total = 1.0
    for s in _slot_scores(p, is_cat).values():
        if strict and s < 1.0:
            return 0.0
        total *= s
    return total


def joint_goal_accuracy(
    preds: Sequence[TurnPrediction], schemas: Iterable[ServiceSchema] | None = None, strict: bool = False
) -> float:
    """Slot-name sets must agree; then the product of slot scores (or all-or-nothing when ``strict``).

    Without schemas every slot is scored as non-categorical.
    """
    _require(preds)
    is_cat = _categorical_lookup(schemas)
    return sum(frame_joint_score(p, is_cat, strict) for p in preds) / len(preds)


def domain_of(service: str) -> str:
    return service.split("_")[0]


@dataclass
class MetricReport:
    active_intent_accuracy: float
    requested_slots_f1: float
    average_goal_accuracy: float
    joint_goal_accuracy: float
    strict_joint_goal_accuracy: float
    num_frames: int
    per_domain: dict[str, dict] = field(default_factory=dict)
    per_service: dict[str, dict] = field(default_factory=dict)
    slot_error_rates: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def to_text(self, strict_joint: bool = False, top_slots: int = 20) -> str:
        lines = [
            f"frames evaluated        {self.num_frames}",
            f"active intent accuracy  {self.active_intent_accuracy:.4f}",
            f"requested slot F1       {self.requested_slots_f1:.4f}",
            f"average goal accuracy   {self.average_goal_accuracy:.4f}",
        ]
        if strict_joint:
            lines.append(f"joint goal acc (strict) {self.strict_joint_goal_accuracy:.4f}")
        else:
            lines.append(f"joint goal accuracy     {self.joint_goal_accuracy:.4f}")
            lines.append(f"  strict variant        {self.strict_joint_goal_accuracy:.4f}")
        lines.append("")
        lines.append("per domain (* unseen, ** partly unseen)   joint    avg")
        for name, d in sorted(self.per_domain.items()):
            label = name + d["marker"]
            lines.append(f"  {label:<38} {d['joint_goal_accuracy']:.4f} {d['average_goal_accuracy']:.4f}")
        if self.slot_error_rates:
            lines.append("")
            lines.append(f"slot error rates (top {top_slots})")
            for row in self.slot_error_rates[:top_slots]:
                lines.append(f"  {row['slot']:<30} {100 * row['error_rate']:5.1f}%  ({row['errors']}/{row['count']})")
        return "\n".join(lines)


def _group_metrics(preds, schemas) -> dict:
    return {
        "joint_goal_accuracy": joint_goal_accuracy(preds, schemas),
        "average_goal_accuracy": average_goal_accuracy(preds, schemas),
        "num_frames": len(preds),
    }


def build_report(
    preds: Sequence[TurnPrediction],
    schemas: Iterable[ServiceSchema] | None = None,
    seen_services: Iterable[str] | None = None,
) -> MetricReport:
    """Overall metrics plus per-domain, per-service and per-slot breakdowns.

    Services missing from ``seen_services`` are flagged unseen; a domain is
    marked ``*`` when all its services are unseen and ``**`` when only some are.
    When ``seen_services`` is None every service counts as seen.
    """
    _require(preds)
    schemas = list(schemas or ())
    is_cat = _categorical_lookup(schemas)
    seen = None if seen_services is None else set(seen_services)

    def unseen(service: str) -> bool:
        return seen is not None and service not in seen

    by_service: dict[str, list] = defaultdict(list)
    for p in preds:
        by_service[p.service].append(p)
    per_service = {}
    for name, group in by_service.items():
        per_service[name] = {**_group_metrics(group, schemas), "unseen": unseen(name)}
    by_domain: dict[str, list] = defaultdict(list)
    for name in by_service:
        by_domain[domain_of(name)].append(name)
    per_domain = {}
    for dom, services in by_domain.items():
        group = [p for s in services for p in by_service[s]]
        flags = [unseen(s) for s in services]
        marker = "*" if all(flags) else "**" if any(flags) else ""
        per_domain[dom] = {**_group_metrics(group, schemas), "marker": marker, "services": sorted(services)}

    counts: dict[str, int] = defaultdict(int)
    errors: dict[str, int] = defaultdict(int)
    for p in preds:
        for slot, s in _slot_scores(p, is_cat).items():
            counts[slot] += 1
            errors[slot] += s < 1.0
    rates = [
        {"slot": slot, "error_rate": errors[slot] / counts[slot], "errors": errors[slot], "count": counts[slot]}
        for slot in counts
    ]
    rates.sort(key=lambda r: (-r["error_rate"], r["slot"]))

    return MetricReport(
        active_intent_accuracy=active_intent_accuracy(preds),
        requested_slots_f1=requested_slots_f1(preds),
        average_goal_accuracy=average_goal_accuracy(preds, schemas),
        joint_goal_accuracy=joint_goal_accuracy(preds, schemas),
        strict_joint_goal_accuracy=joint_goal_accuracy(preds, schemas, strict=True),
        num_frames=len(preds),
        per_domain=per_domain,
        per_service=per_service,
        slot_error_rates=rates,
    )


def pair_predictions(gold: Sequence[Dialogue], predicted: Sequence[Dialogue]) -> list[TurnPrediction]:
    """Match user-turn frames of predicted dialogues to gold ones.

    A gold frame without a predicted counterpart is scored against an empty state.
    """
    pred_by_key = {}
    for d in predicted:
        for t, turn in enumerate(d.turns):
            for f in turn.frames:
                if f.state is not None:
                    pred_by_key[(d.dialogue_id, t, f.service)] = f.state
    out = []
    for d in gold:
        for t, turn in enumerate(d.turns):
            if turn.speaker != USER:
                continue
            for f in turn.frames:
                if f.state is None:
                    continue
                pred = pred_by_key.get((d.dialogue_id, t, f.service), DialogueState())
                out.append(TurnPrediction(d.dialogue_id, t, f.service, pred, f.state))
    return out
