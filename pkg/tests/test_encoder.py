import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from schemadst.assembly import EncoderInput
from schemadst.encoder import (
    EncoderConfig,
    backward,
    encode,
    encode_batch,
    init_params,
    load_pretrained,
    load_tensors,
    param_shapes,
    save_tensors,
)


def raw_input(ids, mask=None, segments=None):
    ids = np.asarray(ids, dtype=np.int64)
    mask = np.ones(len(ids), dtype=np.int8) if mask is None else np.asarray(mask, dtype=np.int8)
    seg = np.zeros(len(ids), dtype=np.int8) if segments is None else np.asarray(segments, dtype=np.int8)
    return EncoderInput(ids, mask, seg, 0, (1, int(mask.sum())), (), (), (), ())


def tiny(**kw):
    base = dict(vocab_size=20, num_layers=1, hidden_size=4, num_heads=2, ffn_size=8, max_seq_len=6, dropout=0.0)
    return EncoderConfig(**{**base, **kw})


def test_init_deterministic():
    a, b = init_params(tiny(), 3), init_params(tiny(), 3)
    assert all(np.array_equal(a[k], b[k]) for k in a)
    c = init_params(tiny(), 4)
    assert not np.array_equal(a["layers.0.attn.query.weight"], c["layers.0.attn.query.weight"])


def test_init_statistics():
    p = init_params(EncoderConfig(hidden_size=64, ffn_size=256, vocab_size=500), 0)
    w = p["embeddings.token.weight"]
    assert abs(w.std() - 0.02) < 0.002
    assert np.all(p["layers.1.ln2.gamma"] == 1) and np.all(p["layers.1.ffn.in.bias"] == 0)
    assert set(p) == set(param_shapes(p.config))


def test_heads_must_divide_hidden():
    with pytest.raises(ValueError, match="divisible"):
        EncoderConfig(hidden_size=64, num_heads=3)
    with pytest.raises(ValueError):
        EncoderConfig(dropout=1.0)


def test_shape_on_five_tokens():
    p = init_params(tiny(hidden_size=8, max_seq_len=16), 0)
    out = encode(raw_input([2, 7, 8, 9, 3]), p)
    assert out.token_states.shape == (5, 8) and np.all(np.isfinite(out.token_states))


def test_eval_deterministic_and_train_reproducible():
    p = init_params(tiny(dropout=0.3, max_seq_len=16), 0)
    inp = raw_input([2, 7, 8, 9, 3])
    assert np.array_equal(encode(inp, p).token_states, encode(inp, p).token_states)
    a = encode(inp, p, "train", np.random.default_rng(5)).token_states
    b = encode(inp, p, "train", np.random.default_rng(5)).token_states
    assert np.array_equal(a, b)
    assert not np.array_equal(a, encode(inp, p).token_states)


def test_too_long():
    with pytest.raises(ValueError, match="max_seq_len"):
        encode(raw_input(np.full(7, 6)), init_params(tiny(), 0))


@settings(max_examples=25, deadline=None)
@given(st.lists(st.integers(0, 19), min_size=4, max_size=4))
def test_masked_ids_do_not_matter(pad_ids):
    p = init_params(tiny(max_seq_len=10), 1, dtype=np.float64)
    mask = [1, 1, 0, 1, 0, 0, 1, 0]
    base = [2, 7, 0, 9, 0, 0, 3, 0]
    other = list(base)
    for slot, v in zip([2, 4, 5, 7], pad_ids):
        other[slot] = v
    a = encode(raw_input(base, mask), p).token_states
    b = encode(raw_input(other, mask), p).token_states
    keep = np.asarray(mask, bool)
    assert np.array_equal(a[keep], b[keep])
    assert np.all(b[~keep] == 0)


def test_batched_equals_single():
    p = init_params(tiny(max_seq_len=10), 1, dtype=np.float64)
    x = raw_input([2, 5, 6, 3, 0, 0], [1, 1, 1, 1, 0, 0])
    y = raw_input([2, 9, 9, 9, 9, 3], None)
    enc = encode_batch([x, y], p)
    single = encode(x, p).token_states
    rows = enc.rows[0]
    assert np.allclose(enc.states[0, rows[:4]], single[:4], atol=1e-12)


def _fd_encoder(params, inp, upstream, name, idx, eps=1e-3):
    arr = params[name]
    orig = arr[idx]
    arr[idx] = orig + eps
    up = float((encode(inp, params).token_states * upstream).sum())
    arr[idx] = orig - eps
    down = float((encode(inp, params).token_states * upstream).sum())
    arr[idx] = orig
    return (up - down) / (2 * eps)


def test_zero_output_gradient_gives_zero_grads():
    p = init_params(tiny(), 0, dtype=np.float64)
    out = encode(raw_input([2, 5, 6, 7, 8, 3]), p, "train")
    grads = backward(out, np.zeros_like(out.token_states))
    assert set(grads) == set(p)
    assert all(np.all(g == 0) for g in grads.values())


def test_backward_needs_train_forward():
    p = init_params(tiny(), 0)
    out = encode(raw_input([2, 5, 3]), p, "eval")
    with pytest.raises(RuntimeError):
        backward(out, np.ones_like(out.token_states))


def test_finite_difference_tiny_encoder():
    p = init_params(tiny(), 7, dtype=np.float64)
    # scale weights up so the check exercises non-trivial curvature
    for k in p:
        if k.endswith(".weight"):
            p[k] *= 25
    inp = raw_input([2, 5, 6, 7, 8, 3], segments=[0, 0, 1, 1, 1, 1])
    rng = np.random.default_rng(0)
    upstream = rng.standard_normal((6, 4))
    grads = backward(encode(inp, p, "train"), upstream)
    used = {"embeddings.token.weight": [2, 3, 5, 6, 7, 8], "embeddings.segment.weight": [0, 1]}
    worst = 0.0
    names = sorted(p)
    for _ in range(150):
        name = names[rng.integers(len(names))]
        shape = p[name].shape
        idx = tuple(int(rng.integers(s)) for s in shape)
        if name in used:
            idx = (int(rng.choice(used[name])),) + idx[1:]
        num = _fd_encoder(p, inp, upstream, name, idx)
        ana = grads[name][idx]
        worst = max(worst, abs(ana - num) / max(abs(ana), abs(num), 1e-5))
    assert worst < 1e-3


def test_cls_only_loss_reaches_attention_weights():
    p = init_params(tiny(), 2, dtype=np.float64)
    inp = raw_input([2, 5, 6, 7, 0, 0], [1, 1, 1, 1, 0, 0])
    upstream = np.zeros((6, 4))
    upstream[0] = [1.0, -2.0, 0.5, 3.0]
    grads = backward(encode(inp, p, "train"), upstream)
    for name in ("layers.0.attn.key.weight", "layers.0.attn.value.weight"):
        g = grads[name]
        assert np.abs(g).max() > 0
        idx = np.unravel_index(np.argmax(np.abs(g)), g.shape)
        num = _fd_encoder(p, inp, upstream, name, idx, eps=1e-5)
        assert abs(g[idx] - num) <= 1e-6 * max(1.0, abs(num))


def test_tensor_files_round_trip(tmp_path):
    p = init_params(tiny(), 0)
    save_tensors(p, tmp_path, config={"x": 1})
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["version"] == 1 and manifest["config"] == {"x": 1}
    entry = next(e for e in manifest["tensors"] if e["name"] == "layers.0.ffn.in.weight")
    assert entry["shape"] == [4, 8] and entry["dtype"] == "float32"
    raw = (tmp_path / entry["file"]).read_bytes()
    assert np.array_equal(np.frombuffer(raw, "<f4").reshape(4, 8), p["layers.0.ffn.in.weight"])
    loaded, _ = load_tensors(tmp_path)
    assert all(np.array_equal(loaded[k], p[k]) for k in p)


def test_load_pretrained_with_name_map(tmp_path):
    src = init_params(tiny(), 1)
    save_tensors({"bert.word_embeddings": src["embeddings.token.weight"], "layers.0.ln1.gamma": src["layers.0.ln1.gamma"] * 2}, tmp_path)
    dst = init_params(tiny(), 2)
    filled = load_pretrained(dst, tmp_path, {"embeddings.token.weight": "bert.word_embeddings"})
    assert sorted(filled) == ["embeddings.token.weight", "layers.0.ln1.gamma"]
    assert np.array_equal(dst["embeddings.token.weight"], src["embeddings.token.weight"])
    save_tensors({"layers.0.ln1.gamma": np.ones(5, np.float32)}, tmp_path)
    with pytest.raises(ValueError, match="shape"):
        load_pretrained(dst, tmp_path)
