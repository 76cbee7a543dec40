"""Acceptance suite: one PASS/FAIL line per criterion.

Run with ``pytest tests/test_acceptance.py -v``; the status lines bypass
output capture. Criteria 6 and 7 train desk-scale models and are marked slow.
"""

import os
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

import metric_oracle
from schemadst.assembly import (
    SEG_HISTORY,
    SEG_INTENTS,
    SEG_QUESTION,
    SEG_VALUES,
    AssemblyConfig,
    Gate,
    build_question,
    make_examples,
    turn_history,
)
from schemadst.encoder import EncoderConfig
from schemadst.evaluation import (
    active_intent_accuracy,
    average_goal_accuracy,
    build_report,
    joint_goal_accuracy,
    pair_predictions,
    requested_slots_f1,
)
from schemadst.heads import init_head_params, run_heads
from schemadst.model import Model
from schemadst.pipeline import (
    always_none_predictions,
    evaluate,
    majority_predictions,
    training_examples,
    vocab_for,
)
from schemadst.schema import USER, load_dialogues, load_schemas, validate_dialogue
from schemadst.synth import SynthConfig, synth_dialogues, synth_schemas
from schemadst.tokenization import CLS_ID, INT_ID, PAD_ID, PV_ID, SEP_ID, tokenize
from schemadst.tracker import OraclePredictor, track_dialogue
from schemadst.training import AdamW, TrainConfig, accumulated_step, build_batches, grad_check, train

from conftest import flights_dialogue, flights_schema
from test_evaluation import CATEGORICAL, SCHEMAS, fixture_preds

pytestmark = pytest.mark.acceptance


@pytest.fixture
def status(capsys):
    def emit(number, name, ok, detail, started):
        line = f"[criterion {number}] {'PASS' if ok else 'FAIL'}  {name}: {detail} ({time.perf_counter() - started:.1f}s)"
        with capsys.disabled():
            print("\n" + line)
        assert ok, line

    return emit


def _synth(**kw):
    cfg = SynthConfig(**kw)
    schemas = synth_schemas(cfg)
    return cfg, schemas, synth_dialogues(schemas, cfg)


def test_criterion_1_metric_oracles(status):
    t0 = time.perf_counter()
    preds = fixture_preds()
    frames = [(
        {"intent": p.predicted.active_intent, "requested": p.predicted.requested_slots, "values": p.predicted.slot_values},
        {"intent": p.gold.active_intent, "requested": p.gold.requested_slots, "values": p.gold.slot_values},
    ) for p in preds]
    ref = metric_oracle.metrics(frames, CATEGORICAL)
    got = {
        "active_intent_accuracy": active_intent_accuracy(preds),
        "requested_slots_f1": requested_slots_f1(preds),
        "average_goal_accuracy": average_goal_accuracy(preds, SCHEMAS),
        "joint_goal_accuracy": joint_goal_accuracy(preds, SCHEMAS),
    }
    worst = max(abs(got[k] - ref[k]) for k in got)
    elapsed = time.perf_counter() - t0
    ok = len(preds) <= 10 and worst <= 1e-9 and got["active_intent_accuracy"] == ref["active_intent_accuracy"] and elapsed < 1
    status(1, "metric oracles", ok, f"{len(preds)} frames, max |metric - oracle| = {worst:.1e}", t0)


def _layout_violations(ex, question, history, service, slot, cfg, vocab) -> list[str]:
    """Recompute every forced position from token counts alone."""
    bad = []
    ids, mask, seg = ex.input.token_ids, ex.input.attention_mask, ex.input.segment_ids
    nq = len(tokenize(question, vocab))
    nh = min(sum(len(tokenize(text, vocab)) for _, text in history), cfg.max_hist_len - nq - 3)
    if len(ids) != cfg.max_seq_len:
        bad.append("length")
    if ids[0] != CLS_ID:
        bad.append("cls")
    if ids[1 + nq] != SEP_ID or ids[2 + nq + nh] != SEP_ID:
        bad.append("sep")
    if not np.all(seg[: 2 + nq] == SEG_QUESTION) or not np.all(seg[2 + nq : 3 + nq + nh] == SEG_HISTORY):
        bad.append("segments")
    if ex.input.history_range != (2 + nq, 2 + nq + nh):
        bad.append("history range")
    if np.any(np.isin(ids[1 : 1 + nq], [CLS_ID, SEP_ID, PAD_ID, INT_ID, PV_ID])):
        bad.append("special token inside question")
    if not np.all(ids[3 + nq + nh : cfg.max_hist_len] == PAD_ID):
        bad.append("history padding")
    # intent region: [int] markers at fixed offsets derived from description lengths
    start = cfg.max_hist_len
    lens = [len(tokenize(t, vocab)) for t in ["none"] + [i.description for i in service.intents]]
    while sum(n + 1 for n in lens) > cfg.max_intent_len:
        lens[max(range(len(lens)), key=lambda i: (lens[i], -i))] -= 1
    expected_int = list(np.cumsum([0] + [n + 1 for n in lens[:-1]]) + start)
    if list(ex.input.int_positions) != expected_int or not np.all(ids[expected_int] == INT_ID):
        bad.append("intent markers")
    end = start + sum(n + 1 for n in lens)
    if not np.all(seg[start:end] == SEG_INTENTS) or not np.all(ids[end : start + cfg.max_intent_len] == PAD_ID):
        bad.append("intent region")
    vstart = start + cfg.max_intent_len
    if slot.is_categorical:
        vlens = [len(tokenize(v, vocab)) for v in ("none", *slot.possible_values)]
        expected_pv = list(np.cumsum([0] + [n + 1 for n in vlens[:-1]]) + vstart)
        vend = vstart + sum(n + 1 for n in vlens)
        if list(ex.input.pv_positions) != expected_pv or not np.all(ids[expected_pv] == PV_ID):
            bad.append("value markers")
        if not np.all(seg[vstart:vend] == SEG_VALUES):
            bad.append("value segments")
    else:
        vend = vstart
        if ex.input.pv_positions:
            bad.append("value markers on non-categorical slot")
    if not np.all(ids[vend:] == PAD_ID):
        bad.append("tail padding")
    if not np.array_equal(mask == 1, ids != PAD_ID):
        bad.append("attention mask")
    if np.count_nonzero(ids == CLS_ID) != 1 or np.count_nonzero(ids == SEP_ID) != 2:
        bad.append("special token count")
    return bad


def test_criterion_2_layout_exactness(status):
    t0 = time.perf_counter()
    _, schemas, dialogues = _synth(num_services=6, num_unseen_services=2, dialogues_per_service=40,
                                   domain_switch_fraction=0.3, seed=21)
    cfg = replace(AssemblyConfig(), cat_neg_sampling_prob=1.0, noncat_neg_sampling_prob=1.0)
    assert (cfg.max_hist_len, cfg.max_intent_len) == (250, 50)
    vocab = vocab_for(dialogues, schemas)
    by_name = {s.service_name: s for s in schemas}
    rng = np.random.default_rng(0)
    pool = [(d, ex) for d in dialogues for ex in make_examples(d, schemas, cfg, vocab)]
    picks = rng.choice(len(pool), 1000, replace=False)
    violations = []
    for i in picks:
        d, ex = pool[i]
        service = by_name[ex.meta.service]
        slot = service.slot(ex.meta.slot)
        history, _ = turn_history(d, ex.meta.turn_index)
        q = build_question(slot, service, cfg.use_nld)
        violations += _layout_violations(ex, q, history, service, slot, cfg, vocab)
    elapsed = time.perf_counter() - t0
    ok = not violations and elapsed < 10
    status(2, "layout exactness", ok, f"1000 (slot, turn) inputs, {len(violations)} violations {sorted(set(violations))[:3]}", t0)


def test_criterion_3_label_decode_round_trip(status):
    t0 = time.perf_counter()
    _, schemas, dialogues = _synth(num_services=5, num_unseen_services=1, dialogues_per_service=200,
                                   domain_switch_fraction=0.3, seed=7)
    cfg = AssemblyConfig(max_seq_len=384)
    vocab = vocab_for(dialogues, schemas)
    oracle = OraclePredictor(dialogues, schemas, cfg, vocab)
    exact = 0
    for d in dialogues:
        gold = [(t, f.service, f.state) for t, turn in enumerate(d.turns) if turn.speaker == USER for f in turn.frames]
        got = [(f.turn_index, f.service, f.state) for f in track_dialogue(d, schemas, oracle)]
        exact += got == gold
    elapsed = time.perf_counter() - t0
    ok = len(dialogues) == 1000 and exact == len(dialogues) and elapsed < 60
    status(3, "label/decode round trip", ok, f"{exact}/{len(dialogues)} dialogues reproduced exactly", t0)


def test_criterion_4_gradient_check(status, small_vocab):
    t0 = time.perf_counter()
    errors = {}
    for head in ("pv", "cls"):
        asm = AssemblyConfig(max_hist_len=64, max_intent_len=24, max_seq_len=112, max_categorical_values=4,
                             categorical_head=head, cat_neg_sampling_prob=1.0, noncat_neg_sampling_prob=1.0)
        enc = EncoderConfig(num_layers=2, hidden_size=8, num_heads=2, ffn_size=16, max_seq_len=112, dropout=0.0)
        model = Model.create(small_vocab, enc, asm, seed=4, dtype=np.float64)
        exs = make_examples(flights_dialogue(), [flights_schema()], asm, small_vocab)
        chosen = [next(e for e in exs if e.meta.is_categorical == c and e.labels.gate == g)
                  for c, g in ((True, Gate.PTR), (False, Gate.PTR), (True, Gate.DONTCARE), (False, Gate.NONE))]
        errors[head] = grad_check(model, chosen, epsilon=1e-3, num_samples=150, seed=9)
    worst = max(errors.values())
    ok = worst < 1e-3 and time.perf_counter() - t0 < 120
    status(4, "gradient check", ok, f"2 layers H=8, 150 sampled parameters per head mode, max rel. error {worst:.2e}", t0)


def test_criterion_5_distribution_invariants(status):
    t0 = time.perf_counter()
    _, schemas, dialogues = _synth(num_services=4, num_unseen_services=1, dialogues_per_service=10, seed=5)
    vocab = vocab_for(dialogues, schemas)
    inputs = []
    for head in ("pv", "cls"):
        asm = AssemblyConfig(max_seq_len=384, categorical_head=head, cat_neg_sampling_prob=1.0, noncat_neg_sampling_prob=1.0)
        inputs += [e.input for e in training_examples(dialogues, schemas, asm, vocab)]
    rng = np.random.default_rng(0)
    H = 8
    worst_sum, masked_mass, negatives, checked = 0.0, 0.0, 0, 0
    for i in range(10_000):
        inp = inputs[int(rng.integers(len(inputs)))]
        scale = 10.0 ** rng.uniform(-2, 2)
        params = init_head_params(H, 0, 5, np.float64)
        for k in params:
            params[k] = rng.standard_normal(params[k].shape) * scale
        states = rng.standard_normal((len(inp), H)) * scale
        states[inp.attention_mask == 0] = 0.0
        out = run_heads(states, inp, params)
        for name, dist in out.distributions().items():
            worst_sum = max(worst_sum, abs(float(dist.sum()) - 1.0))
            negatives += int(np.count_nonzero(dist < 0))
            if name in ("start_dist", "stop_dist"):
                h0, h1 = inp.history_range
                outside = np.ones(len(dist), bool)
                outside[h0:h1] = False
                masked_mass = max(masked_mass, float(np.abs(dist[outside]).max()))
            if name == "cls_cat_dist":
                masked_mass = max(masked_mass, float(np.abs(dist[inp.num_values : -1]).max(initial=0.0)))
        checked += 1
    elapsed = time.perf_counter() - t0
    ok = checked == 10_000 and worst_sum <= 1e-6 and masked_mass == 0.0 and negatives == 0 and elapsed < 60
    status(5, "distribution invariants", ok,
           f"{checked} random inputs, max |sum - 1| = {worst_sum:.1e}, max masked mass = {masked_mass}", t0)


# Desk-scale experiment settings, fixed after calibration runs (see the ledger for the sweep).
OVERFIT_ENCODER = EncoderConfig(num_layers=2, hidden_size=64, num_heads=4, ffn_size=256, max_seq_len=384, dropout=0.0)
OVERFIT_ASSEMBLY = AssemblyConfig(max_seq_len=384, categorical_head="cls", cat_neg_sampling_prob=1.0, noncat_neg_sampling_prob=1.0)
OVERFIT_TRAIN = TrainConfig(learning_rate=1e-3, batch_size=4, grad_accum_steps=1, epochs=5, seed=0,
                            schedule="linear", warmup_fraction=0.1)
OVERFIT_CALIBRATED = 0.7929


def _overfit_setup():
    _, schemas, dialogues = _synth(num_services=1, num_unseen_services=0, dialogues_per_service=200, seed=0)
    vocab = vocab_for(dialogues, schemas)
    model = Model.create(vocab, OVERFIT_ENCODER, OVERFIT_ASSEMBLY, seed=0)
    return schemas, dialogues, model, training_examples(dialogues, schemas, OVERFIT_ASSEMBLY, vocab, seed=0)


@pytest.mark.slow
def test_criterion_6_overfit(status):
    t0 = time.perf_counter()
    schemas, dialogues, model, examples = _overfit_setup()
    result = train(model, examples, OVERFIT_TRAIN)
    joint = evaluate(dialogues, schemas, model).joint_goal_accuracy
    # determinism: a fresh run from the same seed repeats the first 50 losses exactly
    _, _, again, _ = _overfit_setup()
    short = train(again, examples[:200], replace(OVERFIT_TRAIN, epochs=1))
    ref = train(_overfit_setup()[2], examples[:200], replace(OVERFIT_TRAIN, epochs=1))
    same = [r["total"] for r in short.log] == [r["total"] for r in ref.log] and len(short.log) == 50
    ok = joint >= 0.95 and same
    status(6, "overfit 200 single-service dialogues", ok,
           f"train joint GA {joint:.4f} after {OVERFIT_TRAIN.epochs} epochs (need >= 0.95; calibrated "
           f"{OVERFIT_CALIBRATED:.4f}), repeat run identical={same}, {len(result.log)} steps", t0)


ZERO_SHOT_MARGIN = 0.20
ZERO_SHOT_DIALOGUES = 200
ZERO_SHOT_ENCODER = EncoderConfig(num_layers=2, hidden_size=64, num_heads=4, ffn_size=256, max_seq_len=384, dropout=0.1)
ZERO_SHOT_TRAIN = TrainConfig(learning_rate=1e-3, batch_size=8, grad_accum_steps=1, epochs=5, seed=0)
# one calibration run of exactly this setup (average GA on the unseen service)
ZERO_SHOT_CALIBRATED = {"trained": 0.4553, "always_none": 0.0, "majority": 0.1841}


@pytest.mark.slow
def test_criterion_7_zero_shot(status):
    t0 = time.perf_counter()
    cfg = SynthConfig(num_services=4, num_unseen_services=1, dialogues_per_service=ZERO_SHOT_DIALOGUES, seed=0)
    schemas = synth_schemas(cfg)
    seen, unseen = schemas[:3], schemas[3:]
    train_d = synth_dialogues(seen, cfg)
    test_d = synth_dialogues(unseen, cfg)
    vocab = vocab_for(train_d, schemas)
    asm = AssemblyConfig(max_seq_len=384)
    model = Model.create(vocab, ZERO_SHOT_ENCODER, asm, seed=0)
    train(model, training_examples(train_d, seen, asm, vocab, seed=0), ZERO_SHOT_TRAIN)
    trained = evaluate(test_d, unseen, model).average_goal_accuracy
    none = average_goal_accuracy(always_none_predictions(test_d), unseen)
    majority = average_goal_accuracy(majority_predictions(test_d, unseen, train_d), unseen)
    assert none == pytest.approx(ZERO_SHOT_CALIBRATED["always_none"], abs=1e-4)
    assert majority == pytest.approx(ZERO_SHOT_CALIBRATED["majority"], abs=1e-4)
    ok = trained - none >= ZERO_SHOT_MARGIN and trained - majority >= ZERO_SHOT_MARGIN
    status(7, "zero-shot on an unseen service", ok,
           f"avg GA trained {trained:.4f} (calibrated {ZERO_SHOT_CALIBRATED['trained']:.4f}), "
           f"always-none {none:.4f}, majority {majority:.4f}; need margin >= {ZERO_SHOT_MARGIN}", t0)


def test_criterion_8_training_regime(status, small_vocab):
    t0 = time.perf_counter()
    _, schemas, dialogues = _synth(num_services=3, num_unseen_services=0, dialogues_per_service=60, seed=8)
    asm = AssemblyConfig(max_seq_len=384)
    vocab = vocab_for(dialogues, schemas)
    examples = training_examples(dialogues, schemas, asm, vocab, seed=0)
    batches = build_batches(examples, TrainConfig(batch_size=16), seed=0)
    mixed = sum(len({e.meta.is_categorical for e in b}) > 1 for b in batches)
    covered = sum(len(b) for b in batches) == len(examples)

    # accumulation: one step over three batches equals one step over their concatenation
    asm_small = AssemblyConfig(max_hist_len=64, max_intent_len=24, max_seq_len=112, max_categorical_values=4,
                               cat_neg_sampling_prob=1.0, noncat_neg_sampling_prob=1.0)
    enc = EncoderConfig(num_layers=2, hidden_size=8, num_heads=2, ffn_size=16, max_seq_len=112, dropout=0.0)
    exs = make_examples(flights_dialogue(), [flights_schema()], asm_small, small_vocab)
    group = [exs[:4], exs[4:7], exs[7:12]]
    model = Model.create(small_vocab, enc, asm_small, seed=1, dtype=np.float64)
    grads = []

    class Recorder:
        def step(self, params, g, lr=None):
            grads.append({k: v.copy() for k, v in g.items()})

    accumulated_step(model, Recorder(), group)
    accumulated_step(model, Recorder(), [sum(group, [])])
    rel = max(float(np.abs(grads[0][k] - grads[1][k]).max() / max(np.abs(grads[1][k]).max(), 1e-12)) for k in grads[1])

    # negative-sampling retention over 10,000 candidates
    big = _synth(num_services=4, num_unseen_services=0, dialogues_per_service=220, seed=9)
    cat_p, noncat_p = 0.1, 0.2
    cfg_all = AssemblyConfig(max_seq_len=384, cat_neg_sampling_prob=1.0, noncat_neg_sampling_prob=1.0)
    cfg_def = AssemblyConfig(max_seq_len=384, cat_neg_sampling_prob=cat_p, noncat_neg_sampling_prob=noncat_p)
    vocab_big = vocab_for(big[2], big[1])
    zs = []
    counts = {}
    for cat, p in ((True, cat_p), (False, noncat_p)):
        n = kept = 0
        for d in big[2]:
            n += sum(e.labels.gate == Gate.NONE and e.meta.is_categorical == cat
                     for e in make_examples(d, big[1], cfg_all, vocab_big))
            kept += sum(e.labels.gate == Gate.NONE and e.meta.is_categorical == cat
                        for e in make_examples(d, big[1], cfg_def, vocab_big))
        zs.append(abs(kept - n * p) / np.sqrt(n * p * (1 - p)))
        counts[cat] = (n, kept)
    total = sum(n for n, _ in counts.values())
    ok = mixed == 0 and covered and rel <= 1e-6 and total >= 10_000 and max(zs) <= 3
    status(8, "training-regime conformance", ok,
           f"{len(batches)} batches, {mixed} mixed; accumulated vs concatenated gradient rel. diff {rel:.1e}; "
           f"retention over {total} negatives: z = {zs[0]:.2f} (cat), {zs[1]:.2f} (non-cat)", t0)


def test_criterion_9_sgd_interop(status, capsys):
    t0 = time.perf_counter()
    root = os.environ.get("SGD_DIR")
    if not root or not Path(root).is_dir():
        with capsys.disabled():
            print("\n[criterion 9] SKIP  SGD format interop: set SGD_DIR to a local copy of the dataset")
        pytest.skip("SGD_DIR not set")
    root = Path(root)
    split = root / "dev" if (root / "dev").is_dir() else root
    schemas = load_schemas(split / "schema.json")
    files = sorted(split.glob("dialogues_*.json"))
    dialogues = [d for f in files for d in load_dialogues(f)]
    issues = sum(len(validate_dialogue(d, schemas)) for d in dialogues)
    report = build_report(pair_predictions(dialogues, dialogues), schemas)
    ok = issues == 0 and report.joint_goal_accuracy == 1.0
    status(9, "SGD format interop", ok,
           f"{len(schemas)} schemas, {len(dialogues)} dialogues from {len(files)} files, {issues} issues", t0)
