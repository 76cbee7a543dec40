"""``schemadst`` executable: synth, train, eval, track and repl subcommands.

Exit codes: 0 success, 1 usage or configuration error, 2 data error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Sequence, TextIO

from .assembly import AssemblyError
from .config import ConfigError, RunConfig, load_config, with_paths
from .evaluation import EvaluationError, build_report, pair_predictions
from .model import Model
from .pipeline import predict_dialogues, training_examples, vocab_for
from .schema import (
    SYSTEM,
    USER,
    Dialogue,
    DialogueError,
    DialogueState,
    Frame,
    SchemaError,
    Turn,
    load_dialogues,
    load_schemas,
    save_dialogues,
    validate_dialogue,
)
from .synth import write_dataset
from .tracker import DecodingError, decode_frame, frame_queries
from .training import TrainingError, train

log = logging.getLogger("schemadst")

DATA_ERRORS = (SchemaError, DialogueError, AssemblyError, DecodingError, EvaluationError, TrainingError, FileNotFoundError)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _parser() -> argparse.ArgumentParser:
    p = _Parser(prog="schemadst", description="Schema-guided dialogue state tracking.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", help="JSON run config; dotted flags such as --train.epochs 3 override it")
        return sp

    s = common(sub.add_parser("synth", help="generate a synthetic dataset"))
    s.add_argument("--out", required=True, help="output directory")

    t = common(sub.add_parser("train", help="train a model and write checkpoints"))
    t.add_argument("--schemas", help="training schema file or directory")
    t.add_argument("--dialogues", help="training dialogue file or directory")
    t.add_argument("--dev-schemas")
    t.add_argument("--dev-dialogues")
    t.add_argument("--out", help="model output directory")

    e = common(sub.add_parser("eval", help="score predictions against gold dialogues"))
    e.add_argument("--schemas", help="schemas of the evaluated services")
    e.add_argument("--dialogues", help="gold dialogues")
    src = e.add_mutually_exclusive_group()
    src.add_argument("--predictions", help="dialogue file whose user states are predictions")
    src.add_argument("--model-dir", help="track the gold dialogues with this model")
    e.add_argument("--seen-schemas", help="training schemas; services absent there are reported unseen")
    e.add_argument("--strict-joint", action="store_true", help="report all-or-nothing joint accuracy")
    e.add_argument("--json", action="store_true", help="print the report as JSON")
    e.add_argument("--out", help="also write the JSON report here")

    k = common(sub.add_parser("track", help="write predicted states for input dialogues"))
    k.add_argument("--model-dir")
    k.add_argument("--schemas")
    k.add_argument("--dialogues")
    k.add_argument("--out", required=True, help="prediction dump (dialogue JSON)")

    r = common(sub.add_parser("repl", help="type a dialogue and inspect the decoded state"))
    r.add_argument("--model-dir")
    r.add_argument("--schemas")
    r.add_argument("--service", required=True)
    return p


def _split_overrides(extra: Sequence[str]) -> dict[str, str]:
    out = {}
    i = 0
    while i < len(extra):
        arg = extra[i]
        if not arg.startswith("--") or "." not in arg and "=" not in arg and arg != "--vocab_size":
            raise UsageError(f"unrecognized argument {arg!r}")
        key = arg[2:]
        if "=" in key:
            key, value = key.split("=", 1)
        else:
            if i + 1 >= len(extra):
                raise UsageError(f"option {arg} needs a value")
            value = extra[i + 1]
            i += 1
        out[key] = value
        i += 1
    return out


def _need(value, flag: str) -> str:
    if not value:
        raise UsageError(f"missing {flag} (give it as a flag or under paths in --config)")
    return value


def _load_model(directory: str) -> Model:
    if not (Path(directory) / "manifest.json").exists():
        raise FileNotFoundError(f"{directory}: no model found (expected manifest.json)")
    return Model.load(directory)


def _effective(args, overrides) -> RunConfig:
    cfg = load_config(args.config, overrides)
    paths = {}
    for flag, field in (
        ("schemas", "schemas"),
        ("dialogues", "dialogues"),
        ("dev_schemas", "dev_schemas"),
        ("dev_dialogues", "dev_dialogues"),
        ("model_dir", "model_dir"),
    ):
        paths[field] = getattr(args, flag, None)
    if args.command in ("train", "synth"):
        paths["output_dir"] = getattr(args, "out", None)
    return with_paths(cfg, **paths)


def cmd_synth(cfg: RunConfig, args, out: TextIO) -> int:
    paths = write_dataset(cfg.synth, args.out)
    cfg = with_paths(cfg, schemas=paths.get("train_schemas"), dialogues=paths.get("train_dialogues"),
                     dev_schemas=paths.get("dev_schemas"), dev_dialogues=paths.get("dev_dialogues"))
    cfg.save(Path(args.out) / "config.json")
    for name, path in sorted(paths.items()):
        print(f"{name:<16} {path}", file=out)
    return 0


def cmd_train(cfg: RunConfig, args, out: TextIO) -> int:
    p = cfg.paths
    schemas = load_schemas(_need(p.schemas, "--schemas"))
    dialogues = load_dialogues(_need(p.dialogues, "--dialogues"))
    out_dir = Path(_need(p.output_dir, "--out"))
    dev = None
    extra_schemas = []
    if p.dev_dialogues:
        dev_schemas = load_schemas(_need(p.dev_schemas, "--dev-schemas"))
        dev = (load_dialogues(p.dev_dialogues), dev_schemas)
        extra_schemas = dev_schemas
    for d in dialogues:
        issues = validate_dialogue(d, schemas)
        if issues:
            raise DialogueError(f"dialogue {d.dialogue_id}: {issues[0]}")
    # schema text of every known service is in the vocabulary; dev utterances are not
    vocab = vocab_for(dialogues, list(schemas) + list(extra_schemas), cfg.vocab_size)
    model = Model.create(vocab, cfg.encoder, cfg.assembly, cfg.decoding, seed=cfg.train.seed)
    examples = training_examples(dialogues, schemas, cfg.assembly, vocab, cfg.train.seed)
    print(f"{len(examples)} training examples, vocabulary {len(vocab)}", file=out)
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg.save(out_dir / "config.json")
    (out_dir / "train_services.json").write_text(json.dumps(sorted(s.service_name for s in schemas)) + "\n")

    def report(rec):
        if rec["step"] % 50 == 0:
            print(f"step {rec['step']:>6} epoch {rec['epoch']} loss {rec['total']:.4f}", file=out, flush=True)

    result = train(model, examples, cfg.train, dev, out_dir, out_dir / "train_log.jsonl", report)
    for h in result.dev_history:
        print(f"epoch {h['epoch']} dev joint {h['joint_goal_accuracy']:.4f} avg {h['average_goal_accuracy']:.4f}", file=out)
    print(f"model written to {out_dir}", file=out)
    return 0


def _seen(args, model_dir: str | None):
    if args.seen_schemas:
        return [s.service_name for s in load_schemas(args.seen_schemas)]
    if model_dir and (Path(model_dir) / "train_services.json").exists():
        return json.loads((Path(model_dir) / "train_services.json").read_text())
    return None


def cmd_eval(cfg: RunConfig, args, out: TextIO) -> int:
    p = cfg.paths
    schemas = load_schemas(_need(p.schemas, "--schemas"))
    gold = load_dialogues(_need(p.dialogues, "--dialogues"))
    if args.predictions:
        predicted = load_dialogues(args.predictions)
    else:
        model = _load_model(_need(p.model_dir, "--predictions or --model-dir"))
        predicted = predict_dialogues(gold, schemas, model)
    report = build_report(pair_predictions(gold, predicted), schemas, _seen(args, p.model_dir))
    if args.out:
        Path(args.out).write_text(report.to_json() + "\n", encoding="utf-8")
    print(report.to_json() if args.json else report.to_text(args.strict_joint), file=out)
    return 0


def cmd_track(cfg: RunConfig, args, out: TextIO) -> int:
    p = cfg.paths
    model = _load_model(_need(p.model_dir, "--model-dir"))
    schemas = load_schemas(_need(p.schemas, "--schemas"))
    dialogues = load_dialogues(_need(p.dialogues, "--dialogues"))
    save_dialogues(predict_dialogues(dialogues, schemas, model), args.out)
    print(f"predictions for {len(dialogues)} dialogues written to {args.out}", file=out)
    return 0


def cmd_repl(cfg: RunConfig, args, out: TextIO, inp: TextIO) -> int:
    p = cfg.paths
    model = _load_model(_need(p.model_dir, "--model-dir"))
    schemas = {s.service_name: s for s in load_schemas(_need(p.schemas, "--schemas"))}
    service = schemas.get(args.service)
    if service is None:
        raise SchemaError(f"unknown service {args.service!r}; known: {', '.join(sorted(schemas))}")
    print(f"tracking {service.service_name}; type user and system turns alternately, ':reset' or ':quit'", file=out)
    turns: list[Turn] = []
    state = DialogueState()
    while True:
        speaker = USER if not turns or turns[-1].speaker == SYSTEM else SYSTEM
        out.write(f"{speaker.lower()}> ")
        out.flush()
        line = inp.readline()
        if not line or line.strip() == ":quit":
            break
        text = line.rstrip("\n")
        if text.strip() == ":reset":
            turns, state = [], DialogueState()
            continue
        if speaker == SYSTEM:
            turns.append(Turn(SYSTEM, text, (Frame(service.service_name, None, ()),)))
            continue
        turns.append(Turn(USER, text, (Frame(service.service_name, DialogueState(), ()),)))
        d = Dialogue("repl", (service.service_name,), tuple(turns))
        queries = frame_queries(d, len(turns) - 1, service, model)
        outputs = model.predict(queries)
        state = decode_frame(queries, outputs, service, state, model.decoding)
        for q, o in zip(queries, outputs):
            g = o.gate_dist
            print(f"  {q.slot.name:<24} none {g[0]:.3f} dontcare {g[1]:.3f} ptr {g[2]:.3f}  requested {o.req_dist[0]:.3f}", file=out)
        print(f"  intent: {state.active_intent}", file=out)
        print(f"  requested: {', '.join(state.requested_slots) or '-'}", file=out)
        print(f"  state: {json.dumps(state.slot_values)}", file=out)
    return 0


def run(argv: Sequence[str] | None = None, out: TextIO | None = None, inp: TextIO | None = None) -> int:
    out = out or sys.stdout
    inp = inp or sys.stdin
    err = sys.stderr
    try:
        args, extra = _parser().parse_known_args(argv)
        if args.command is None:
            raise UsageError("schemadst: choose a subcommand (synth, train, eval, track, repl)")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
        cfg = _effective(args, _split_overrides(extra))
        if args.command == "repl":
            return cmd_repl(cfg, args, out, inp)
        handler = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval, "track": cmd_track}[args.command]
        return handler(cfg, args, out)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=err)
        return 1
    except DATA_ERRORS as exc:
        print(f"data error: {exc}", file=err)
        return 2


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
