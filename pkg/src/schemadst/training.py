"""Summed per-head cross-entropy, type-pure batching and the AdamW loop."""

from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .assembly import Gate, TrainingExample
from .encoder import backward_encoding, encode_batch
from .heads import REQUESTED, HeadOutputs, heads_backward, run_heads
from .model import Model
from .schema import Dialogue, ServiceSchema

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 3.5e-5
    weight_decay: float = 0.01
    epochs: int = 5
    batch_size: int = 8
    grad_accum_steps: int = 12
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    # constant by default; "linear" warms up over warmup_fraction of the steps, then decays to 0
    schedule: str = "constant"
    warmup_fraction: float = 0.0

    def __post_init__(self):
        if self.learning_rate < 0 or self.weight_decay < 0:
            raise ValueError("learning_rate and weight_decay must be non-negative")
        if self.schedule not in ("constant", "linear"):
            raise ValueError(f"schedule must be 'constant' or 'linear', got {self.schedule!r}")
        if not 0.0 <= self.warmup_fraction < 1.0:
            raise ValueError("warmup_fraction must lie in [0, 1)")
        for name in ("epochs", "batch_size", "grad_accum_steps"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")


@dataclass
class LossBreakdown:
    gate: float = 0.0
    categorical: float = 0.0
    span_start: float = 0.0
    span_stop: float = 0.0
    requested: float = 0.0
    intent: float = 0.0

    @property
    def total(self) -> float:
        return self.gate + self.categorical + self.span_start + self.span_stop + self.requested + self.intent

    def __add__(self, other: "LossBreakdown") -> "LossBreakdown":
        return LossBreakdown(**{f.name: getattr(self, f.name) + getattr(other, f.name) for f in fields(self)})

    def scaled(self, factor: float) -> "LossBreakdown":
        return LossBreakdown(**{f.name: getattr(self, f.name) * factor for f in fields(self)})

    def as_dict(self) -> dict:
        return {**asdict(self), "total": self.total}


def _nll(dist: np.ndarray, index: int, what: str) -> float:
    if not 0 <= index < len(dist):
        raise ValueError(f"{what} label {index} outside distribution of size {len(dist)}")
    with np.errstate(divide="ignore"):
        return float(-np.log(dist[index]))


def compute_loss(example: TrainingExample, outputs: HeadOutputs) -> LossBreakdown:
    lab = example.labels
    out = LossBreakdown(gate=_nll(outputs.gate_dist, int(lab.gate), "gate"))
    out.requested = _nll(outputs.req_dist, REQUESTED if lab.requested else 1 - REQUESTED, "requested")
    if outputs.intent_dist is not None:
        out.intent = _nll(outputs.intent_dist, lab.intent_index, "intent")
    if lab.gate == Gate.PTR:
        if example.meta.is_categorical:
            if outputs.cat_dist is None:
                raise ValueError("categorical example without categorical output")
            out.categorical = _nll(outputs.cat_dist, lab.categorical_index, "categorical")
        elif lab.span_supervised:
            if outputs.start_dist is None:
                raise ValueError("span example without span output")
            out.span_start = _nll(outputs.start_dist, lab.span[0], "span start")
            out.span_stop = _nll(outputs.stop_dist, lab.span[1], "span stop")
    return out


def loss_logit_gradients(example: TrainingExample, outputs: HeadOutputs, weight: float = 1.0) -> dict[str, np.ndarray]:
    """d(weight * total loss)/d(logits) per head: ``weight * (p - onehot)``."""
    lab = example.labels
    inp = example.input

    def ce(dist, index):
        g = np.array(dist, dtype=np.float64)
        g[index] -= 1.0
        return weight * g

    grads = {
        "status": ce(outputs.gate_dist, int(lab.gate)),
        "req_slot": ce(outputs.req_dist, REQUESTED if lab.requested else 1 - REQUESTED),
    }
    if outputs.intent_dist is not None:
        grads["intent"] = ce(outputs.intent_dist, lab.intent_index)
    if lab.gate == Gate.PTR:
        if example.meta.is_categorical:
            idx = lab.categorical_index
            if outputs.cls_cat_dist is not None:
                raw = len(outputs.cls_cat_dist) - 1 if idx == 0 else idx - 1
                grads["cls_cat"] = ce(outputs.cls_cat_dist, raw)
            else:
                grads["cat_slot"] = ce(outputs.cat_dist, idx)
        elif lab.span_supervised:
            h0, h1 = inp.history_range
            grads["start"] = ce(outputs.start_dist, lab.span[0])[h0:h1]
            grads["stop"] = ce(outputs.stop_dist, lab.span[1])[h0:h1]
    return grads


def forward_backward(
    model: Model,
    examples: Sequence[TrainingExample],
    rng: np.random.Generator | None = None,
    weight: float = 1.0,
    need_grads: bool = True,
) -> tuple[LossBreakdown, list[LossBreakdown], dict[str, np.ndarray] | None]:
    """Summed loss over ``examples`` and gradients of ``weight * sum``.

    ``rng`` turns dropout on.
    """
    enc = encode_batch([e.input for e in examples], model.encoder, "train", rng)
    dstates = np.zeros_like(enc.states)
    head_grads = {k: np.zeros_like(v) for k, v in model.heads.items()}
    total = LossBreakdown()
    per_example = []
    for b, ex in enumerate(examples):
        out = run_heads(enc.states[b], ex.input, model.heads, enc.rows[b])
        lb = compute_loss(ex, out)
        per_example.append(lb)
        total = total + lb
        if need_grads:
            dl = loss_logit_gradients(ex, out, weight)
            ds, hg = heads_backward(enc.states[b], ex.input, model.heads, dl, enc.rows[b])
            dstates[b] += ds
            for k, v in hg.items():
                head_grads[k] += v
    if not need_grads:
        return total, per_example, None
    grads = backward_encoding(enc, dstates)
    grads.update(head_grads)
    return total, per_example, grads


def build_batches(
    examples: Sequence[TrainingExample], cfg: TrainConfig, seed: int | None = None, epoch: int = 0
) -> list[list[TrainingExample]]:
    """Categorical and non-categorical examples in separate batches.

    Each type is shuffled per epoch; batch types are interleaved so that both
    are consumed at the same relative pace.
    """
    seed = cfg.seed if seed is None else seed
    rng = np.random.default_rng([seed, epoch])
    groups = []
    for is_cat in (True, False):
        members = [e for e in examples if e.meta.is_categorical == is_cat]
        order = rng.permutation(len(members))
        shuffled = [members[i] for i in order]
        groups.append([shuffled[i : i + cfg.batch_size] for i in range(0, len(shuffled), cfg.batch_size)])
    cat, noncat = groups
    out = []
    i = j = 0
    while i < len(cat) or j < len(noncat):
        take_cat = j >= len(noncat) or (i < len(cat) and (i + 0.5) / len(cat) <= (j + 0.5) / len(noncat))
        if take_cat:
            out.append(cat[i])
            i += 1
        else:
            out.append(noncat[j])
            j += 1
    return out


def learning_rate_at(cfg: TrainConfig, step: int, total_steps: int) -> float:
    """Learning rate for optimizer step ``step`` (0-based) out of ``total_steps``."""
    if cfg.schedule == "constant":
        return cfg.learning_rate
    warmup = int(cfg.warmup_fraction * total_steps)
    if step < warmup:
        return cfg.learning_rate * (step + 1) / warmup
    return cfg.learning_rate * max(0.0, (total_steps - step) / max(1, total_steps - warmup))


def decays(name: str) -> bool:
    # biases and layer-norm parameters are not decayed
    return name.endswith(".weight")


class AdamW:
    """Adam with decoupled weight decay; updates parameter arrays in place."""

    def __init__(self, cfg: TrainConfig):
        self.cfg = cfg
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float | None = None) -> None:
        cfg = self.cfg
        lr = cfg.learning_rate if lr is None else lr
        self.t += 1
        c1 = 1.0 - cfg.beta1**self.t
        c2 = 1.0 - cfg.beta2**self.t
        for name, p in params.items():
            g = grads.get(name)
            if g is None:
                continue
            m = self.m.setdefault(name, np.zeros_like(p))
            v = self.v.setdefault(name, np.zeros_like(p))
            m *= cfg.beta1
            m += (1.0 - cfg.beta1) * g
            v *= cfg.beta2
            v += (1.0 - cfg.beta2) * g * g
            if decays(name) and cfg.weight_decay:
                p -= lr * cfg.weight_decay * p
            p -= (lr * (m / c1) / (np.sqrt(v / c2) + cfg.adam_eps)).astype(p.dtype)


def _add_into(acc: dict[str, np.ndarray] | None, grads: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    if acc is None:
        return {k: v.copy() for k, v in grads.items()}
    for k, v in grads.items():
        acc[k] += v
    return acc


def accumulated_step(
    model: Model, optimizer: AdamW, group: Sequence[Sequence[TrainingExample]], rng=None, lr: float | None = None
) -> LossBreakdown:
    """One optimizer step over a group of batches; returns the mean loss.

    Gradients are summed over every example of the group and divided by the
    example count, which equals a single step on the concatenated batch.
    """
    acc = None
    total = LossBreakdown()
    count = 0
    for batch in group:
        lb, per_example, grads = forward_backward(model, batch, rng)
        for ex, item in zip(batch, per_example):
            if not math.isfinite(item.total):
                m = ex.meta
                raise TrainingError(
                    f"non-finite loss for {m.dialogue_id} turn {m.turn_index} {m.service}.{m.slot}: {item.as_dict()}"
                )
        total = total + lb
        count += len(batch)
        acc = _add_into(acc, grads)
    for v in acc.values():
        v /= count
    optimizer.step(model.parameters(), acc, lr)
    return total.scaled(1.0 / count)


@dataclass
class TrainResult:
    log: list[dict] = field(default_factory=list)
    dev_history: list[dict] = field(default_factory=list)
    best_epoch: int | None = None


def train(
    model: Model,
    train_set: Sequence[TrainingExample],
    cfg: TrainConfig,
    dev_set: tuple[Sequence[Dialogue], Sequence[ServiceSchema]] | None = None,
    out_dir: str | os.PathLike | None = None,
    log_path: str | os.PathLike | None = None,
    on_step: Callable[[dict], None] | None = None,
) -> TrainResult:
    """Train ``model`` in place.

    Every ``grad_accum_steps`` batches make one optimizer step (a trailing
    partial group at the end of an epoch still steps). With ``dev_set`` the
    model is tracked and scored after each epoch; with ``out_dir`` the final
    model is saved there and the best-dev model under ``out_dir/best``.
    """
    from .evaluation import build_report, pair_predictions
    from .tracker import substitute_states, track_dialogue

    if not train_set:
        raise TrainingError("empty training set")
    optimizer = AdamW(cfg)
    result = TrainResult()
    log_fh = open(log_path, "w", encoding="utf-8") if log_path else None
    best = -1.0
    step = 0
    per_epoch = math.ceil(len(build_batches(train_set, cfg, cfg.seed, 0)) / cfg.grad_accum_steps)
    total_steps = per_epoch * cfg.epochs
    try:
        for epoch in range(cfg.epochs):
            batches = build_batches(train_set, cfg, cfg.seed, epoch)
            rng = np.random.default_rng([cfg.seed, epoch, 1])
            for lo in range(0, len(batches), cfg.grad_accum_steps):
                group = batches[lo : lo + cfg.grad_accum_steps]
                lr = learning_rate_at(cfg, step, total_steps)
                loss = accumulated_step(model, optimizer, group, rng if model.encoder.config.dropout else None, lr)
                step += 1
                record = {"step": step, "epoch": epoch, "learning_rate": lr, **loss.as_dict()}
                result.log.append(record)
                if log_fh:
                    log_fh.write(json.dumps(record) + "\n")
                if on_step:
                    on_step(record)
            if dev_set is not None:
                dialogues, schemas = dev_set
                predicted = [substitute_states(d, track_dialogue(d, schemas, model)) for d in dialogues]
                report = build_report(pair_predictions(dialogues, predicted), schemas)
                entry = {
                    "epoch": epoch,
                    "joint_goal_accuracy": report.joint_goal_accuracy,
                    "average_goal_accuracy": report.average_goal_accuracy,
                    "active_intent_accuracy": report.active_intent_accuracy,
                    "requested_slots_f1": report.requested_slots_f1,
                }
                result.dev_history.append(entry)
                log.info("epoch %d dev %s", epoch, entry)
                if log_fh:
                    log_fh.write(json.dumps({"dev": entry}) + "\n")
                if report.joint_goal_accuracy > best:
                    best = report.joint_goal_accuracy
                    result.best_epoch = epoch
                    if out_dir is not None:
                        model.save(Path(out_dir) / "best")
    finally:
        if log_fh:
            log_fh.close()
    if out_dir is not None:
        model.save(out_dir)
    return result


def relative_error(a: float, b: float, floor: float = 1e-8) -> float:
    # the floor keeps round-off on exactly-zero gradients from reading as 100% error
    return abs(a - b) / max(abs(a), abs(b), floor)


def grad_check(
    model: Model,
    example: TrainingExample | Sequence[TrainingExample],
    epsilon: float = 1e-3,
    num_samples: int = 100,
    seed: int = 0,
    head_only: bool = False,
    floor: float = 1e-5,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    Samples ``num_samples`` scalar parameters: a tensor uniformly at random,
    then an entry of it. Run it on a float64 model without dropout.
    ``floor`` bounds the denominator from below: for gradients smaller than
    that, the O(epsilon**2) truncation error of the difference quotient is
    measured absolutely instead of relatively.
    """
    examples = [example] if isinstance(example, TrainingExample) else list(example)
    params = model.parameters()
    _, _, grads = forward_backward(model, examples)
    names = sorted(n for n in params if n.startswith("heads.") or not head_only)
    rng = np.random.default_rng(seed)

    def loss() -> float:
        return forward_backward(model, examples, need_grads=False)[0].total

    worst = 0.0
    for _ in range(num_samples):
        name = names[rng.integers(len(names))]
        arr = params[name]
        idx = tuple(int(rng.integers(s)) for s in arr.shape)
        orig = arr[idx]
        arr[idx] = orig + epsilon
        up = loss()
        arr[idx] = orig - epsilon
        down = loss()
        arr[idx] = orig
        numeric = (up - down) / (2 * epsilon)
        worst = max(worst, relative_error(float(grads[name][idx]), numeric, floor))
    return worst
