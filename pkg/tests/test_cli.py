import io
import json

import pytest

from schemadst.cli import run
from schemadst.evaluation import build_report, pair_predictions
from schemadst.model import Model
from schemadst.pipeline import predict_dialogues
from schemadst.schema import load_dialogues, load_schemas

TINY = [
    "--encoder.num_layers", "1", "--encoder.hidden_size", "8", "--encoder.num_heads", "2",
    "--encoder.ffn_size", "16", "--encoder.max_seq_len", "160", "--assembly.max_seq_len", "160",
    "--assembly.max_hist_len", "96", "--assembly.max_intent_len", "24",
    "--train.batch_size", "8", "--train.grad_accum_steps", "1", "--train.epochs", "1", "--train.learning_rate", "1e-3",
]


def cli(*argv, stdin=""):
    out = io.StringIO()
    code = run([str(a) for a in argv], out, io.StringIO(stdin))
    return code, out.getvalue()


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    code, text = cli("synth", "--out", root, "--synth.num_services", "3", "--synth.dialogues_per_service", "3")
    assert code == 0 and "train_schemas" in text
    return root


@pytest.fixture(scope="module")
def trained(dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("model")
    code, text = cli("train", "--config", dataset / "config.json", "--out", out, *TINY)
    assert code == 0, text
    return out


def test_usage_errors_exit_1(capsys):
    assert cli()[0] == 1
    assert cli("frobnicate")[0] == 1
    assert cli("eval", "--dialogues", "x.json")[0] == 1
    assert cli("train", "--train.nonsense", "3")[0] == 1
    assert cli("synth", "--out", "x", "--config", "/nonexistent/config.json")[0] == 1
    assert "error:" in capsys.readouterr().err


def test_data_errors_exit_2(tmp_path, dataset, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text('[{"service_name": "S"}]')
    assert cli("eval", "--schemas", bad, "--dialogues", dataset / "dev_dialogues.json", "--predictions", bad)[0] == 2
    assert cli("eval", "--schemas", tmp_path / "missing.json", "--dialogues", bad, "--predictions", bad)[0] == 2
    assert cli("track", "--model-dir", tmp_path, "--schemas", dataset / "dev_schemas.json",
               "--dialogues", dataset / "dev_dialogues.json", "--out", tmp_path / "p.json")[0] == 2
    assert "data error" in capsys.readouterr().err


def test_gold_predictions_score_one(dataset):
    code, text = cli("eval", "--schemas", dataset / "dev_schemas.json", "--dialogues", dataset / "dev_dialogues.json",
                     "--predictions", dataset / "dev_dialogues.json", "--json")
    assert code == 0
    report = json.loads(text)
    assert report["joint_goal_accuracy"] == report["average_goal_accuracy"] == 1.0
    assert report["active_intent_accuracy"] == report["requested_slots_f1"] == 1.0


def test_train_writes_artifacts(trained):
    for name in ("manifest.json", "config.json", "train_services.json", "train_log.jsonl", "best"):
        assert (trained / name).exists()


def test_training_is_reproducible(dataset, trained, tmp_path):
    code, _ = cli("train", "--config", dataset / "config.json", "--out", tmp_path, *TINY)
    assert code == 0
    a = Model.load(trained).parameters()
    b = Model.load(tmp_path).parameters()
    assert all((a[k] == b[k]).all() for k in a)


def test_track_then_eval_matches_in_process(dataset, trained, tmp_path):
    schemas, dialogues = dataset / "dev_schemas.json", dataset / "dev_dialogues.json"
    assert cli("track", "--model-dir", trained, "--schemas", schemas, "--dialogues", dialogues,
               "--out", tmp_path / "pred.json")[0] == 0
    code, text = cli("eval", "--schemas", schemas, "--dialogues", dialogues, "--predictions", tmp_path / "pred.json",
                     "--json", "--seen-schemas", dataset / "train_schemas.json")
    assert code == 0
    gold = load_dialogues(dialogues)
    sch = load_schemas(schemas)
    direct = build_report(pair_predictions(gold, predict_dialogues(gold, sch, Model.load(trained))), sch,
                          [s.service_name for s in load_schemas(dataset / "train_schemas.json")])
    assert json.loads(text) == json.loads(direct.to_json())
    code, text2 = cli("eval", "--schemas", schemas, "--dialogues", dialogues, "--model-dir", trained, "--json")
    assert json.loads(text2) == json.loads(text)


def test_text_report(dataset, trained, tmp_path):
    code, text = cli("eval", "--schemas", dataset / "dev_schemas.json", "--dialogues", dataset / "dev_dialogues.json",
                     "--model-dir", trained, "--strict-joint", "--out", tmp_path / "r.json")
    assert code == 0 and "joint" in text.lower()
    assert "joint_goal_accuracy" in json.loads((tmp_path / "r.json").read_text())


@pytest.mark.parametrize("flag", ["--assembly.use_nld", "--assembly.use_intents"])
def test_ablation_flags(dataset, tmp_path, flag):
    code, _ = cli("train", "--config", dataset / "config.json", "--out", tmp_path, *TINY, flag, "false")
    assert code == 0
    saved = json.loads((tmp_path / "config.json").read_text())
    assert saved["assembly"][flag.split(".")[1]] is False


def test_repl(dataset, trained):
    service = load_schemas(dataset / "train_schemas.json")[0]
    script = "I want to book something\nWhat else?\nthanks\n:reset\nhello\n:quit\n"
    code, text = cli("repl", "--model-dir", trained, "--schemas", dataset / "train_schemas.json",
                     "--service", service.service_name, stdin=script)
    assert code == 0
    assert text.count("intent:") == 3 and text.count("user> ") == 3 and text.count("system> ") == 3
    assert all(s.name in text for s in service.slots)
    assert cli("repl", "--model-dir", trained, "--schemas", dataset / "train_schemas.json", "--service", "Nope")[0] == 2
