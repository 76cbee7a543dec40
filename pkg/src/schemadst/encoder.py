"""Small post-LN transformer encoder in numpy with a hand-written backward pass.

Padding positions neither attend nor are attended, so the encoder only runs
over the unmasked positions of each input (keeping their original position
ids).  Rows at masked positions of a full-length output are zero.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .assembly import EncoderInput

FORMAT_VERSION = 1
LN_EPS = 1e-6
_GELU_C = math.sqrt(2.0 / math.pi)


@dataclass(frozen=True)
class EncoderConfig:
    vocab_size: int = 1000
    num_layers: int = 2
    hidden_size: int = 64
    num_heads: int = 4
    ffn_size: int = 256
    max_seq_len: int = 384
    dropout: float = 0.1
    num_segments: int = 4

    def __post_init__(self):
        if self.hidden_size % self.num_heads:
            raise ValueError(
                f"hidden_size {self.hidden_size} not divisible by num_heads {self.num_heads}"
            )
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must lie in [0, 1), got {self.dropout}")
        for name in ("vocab_size", "num_layers", "hidden_size", "num_heads", "ffn_size", "max_seq_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")


def param_shapes(cfg: EncoderConfig) -> dict[str, tuple[int, ...]]:
    H, F = cfg.hidden_size, cfg.ffn_size
    shapes = {
        "embeddings.token.weight": (cfg.vocab_size, H),
        "embeddings.position.weight": (cfg.max_seq_len, H),
        "embeddings.segment.weight": (cfg.num_segments, H),
        "embeddings.ln.gamma": (H,),
        "embeddings.ln.beta": (H,),
    }
    for l in range(cfg.num_layers):
        p = f"layers.{l}."
        for proj in ("query", "key", "value", "output"):
            shapes[p + f"attn.{proj}.weight"] = (H, H)
            shapes[p + f"attn.{proj}.bias"] = (H,)
        shapes[p + "ln1.gamma"] = (H,)
        shapes[p + "ln1.beta"] = (H,)
        shapes[p + "ffn.in.weight"] = (H, F)
        shapes[p + "ffn.in.bias"] = (F,)
        shapes[p + "ffn.out.weight"] = (F, H)
        shapes[p + "ffn.out.bias"] = (H,)
        shapes[p + "ln2.gamma"] = (H,)
        shapes[p + "ln2.beta"] = (H,)
    return shapes


class EncoderParams(dict):
    """Tensor name -> array, plus the config the shapes follow."""

    def __init__(self, config: EncoderConfig, tensors: Mapping[str, np.ndarray]):
        super().__init__(tensors)
        self.config = config

    @property
    def dtype(self):
        return self["embeddings.token.weight"].dtype


def init_params(cfg: EncoderConfig, seed: int = 0, dtype=np.float32) -> EncoderParams:
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith(".weight"):
            tensors[name] = (rng.standard_normal(shape) * 0.02).astype(dtype)
        elif name.endswith(".gamma"):
            tensors[name] = np.ones(shape, dtype=dtype)
        else:
            tensors[name] = np.zeros(shape, dtype=dtype)
    return EncoderParams(cfg, tensors)


# --------------------------------------------------------------------------
# building blocks


def _layer_norm(x, gamma, beta):
    mu = x.mean(-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(-1, keepdims=True) + LN_EPS)
    xhat = xc * inv
    return xhat * gamma + beta, (xhat, inv)


def _layer_norm_back(dy, gamma, cache):
    xhat, inv = cache
    axes = tuple(range(dy.ndim - 1))
    dgamma = (dy * xhat).sum(axes)
    dbeta = dy.sum(axes)
    g = dy * gamma
    dx = inv * (g - g.mean(-1, keepdims=True) - xhat * (g * xhat).mean(-1, keepdims=True))
    return dx, dgamma, dbeta


def _gelu(x):
    t = np.tanh(_GELU_C * (x + 0.044715 * x**3))
    return 0.5 * x * (1.0 + t), t


def _gelu_back(dy, x, t):
    dt = (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * x * x)
    return dy * (0.5 * (1.0 + t) + 0.5 * x * dt)


def _dropout(x, p, rng):
    if p == 0.0 or rng is None:
        return x, None
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / (1.0 - p)
    return x * keep, keep


def _flat_matmul_grad(x, dy):
    return x.reshape(-1, x.shape[-1]).T @ dy.reshape(-1, dy.shape[-1])


# --------------------------------------------------------------------------
# batched forward / backward over compacted sequences


def forward(params: EncoderParams, ids, positions, segments, keymask, rng=None):
    """Encode a (B, n) batch; ``rng`` enables dropout. Returns (states, cache)."""
    cfg = params.config
    B, n = ids.shape
    H, nh = cfg.hidden_size, cfg.num_heads
    d = H // nh
    scale = 1.0 / math.sqrt(d)
    p = cfg.dropout if rng is not None else 0.0
    neg = np.where(keymask[:, None, None, :], 0.0, -np.inf).astype(params.dtype)

    emb = (
        params["embeddings.token.weight"][ids]
        + params["embeddings.position.weight"][positions]
        + params["embeddings.segment.weight"][segments]
    )
    x, ln0 = _layer_norm(emb, params["embeddings.ln.gamma"], params["embeddings.ln.beta"])
    x, drop0 = _dropout(x, p, rng)
    cache = {"ids": ids, "positions": positions, "segments": segments, "ln0": ln0, "drop0": drop0, "layers": []}

    def heads(t):
        return t.reshape(B, n, nh, d).transpose(0, 2, 1, 3)

    for l in range(cfg.num_layers):
        pre = f"layers.{l}."
        q = heads(x @ params[pre + "attn.query.weight"] + params[pre + "attn.query.bias"])
        k = heads(x @ params[pre + "attn.key.weight"] + params[pre + "attn.key.bias"])
        v = heads(x @ params[pre + "attn.value.weight"] + params[pre + "attn.value.bias"])
        s = q @ k.transpose(0, 1, 3, 2) * scale + neg
        s = s - s.max(-1, keepdims=True)
        e = np.exp(s)
        att = e / e.sum(-1, keepdims=True)
        ctx = (att @ v).transpose(0, 2, 1, 3).reshape(B, n, H)
        a = ctx @ params[pre + "attn.output.weight"] + params[pre + "attn.output.bias"]
        a, drop_a = _dropout(a, p, rng)
        h1, ln1 = _layer_norm(x + a, params[pre + "ln1.gamma"], params[pre + "ln1.beta"])
        f_in = h1 @ params[pre + "ffn.in.weight"] + params[pre + "ffn.in.bias"]
        g, tanh_t = _gelu(f_in)
        f_out = g @ params[pre + "ffn.out.weight"] + params[pre + "ffn.out.bias"]
        f_out, drop_f = _dropout(f_out, p, rng)
        out, ln2 = _layer_norm(h1 + f_out, params[pre + "ln2.gamma"], params[pre + "ln2.beta"])
        cache["layers"].append(
            dict(x=x, q=q, k=k, v=v, att=att, ctx=ctx, drop_a=drop_a, ln1=ln1, h1=h1,
                 f_in=f_in, g=g, tanh_t=tanh_t, drop_f=drop_f, ln2=ln2)
        )
        x = out
    return x, cache


def backward_batch(params: EncoderParams, cache, dout) -> dict[str, np.ndarray]:
    """Parameter gradients for upstream gradient ``dout`` of shape (B, n, H)."""
    cfg = params.config
    B, n, H = dout.shape
    nh = cfg.num_heads
    d = H // nh
    scale = 1.0 / math.sqrt(d)
    grads: dict[str, np.ndarray] = {}

    def heads(t):
        return t.reshape(B, n, nh, d).transpose(0, 2, 1, 3)

    def merge(t):
        return t.transpose(0, 2, 1, 3).reshape(B, n, H)

    dx = dout
    for l in reversed(range(cfg.num_layers)):
        pre = f"layers.{l}."
        c = cache["layers"][l]
        dz, grads[pre + "ln2.gamma"], grads[pre + "ln2.beta"] = _layer_norm_back(dx, params[pre + "ln2.gamma"], c["ln2"])
        dh1 = dz
        df = dz if c["drop_f"] is None else dz * c["drop_f"]
        grads[pre + "ffn.out.weight"] = _flat_matmul_grad(c["g"], df)
        grads[pre + "ffn.out.bias"] = df.sum((0, 1))
        dg = df @ params[pre + "ffn.out.weight"].T
        dfin = _gelu_back(dg, c["f_in"], c["tanh_t"])
        grads[pre + "ffn.in.weight"] = _flat_matmul_grad(c["h1"], dfin)
        grads[pre + "ffn.in.bias"] = dfin.sum((0, 1))
        dh1 = dh1 + dfin @ params[pre + "ffn.in.weight"].T

        dy, grads[pre + "ln1.gamma"], grads[pre + "ln1.beta"] = _layer_norm_back(dh1, params[pre + "ln1.gamma"], c["ln1"])
        dx_res = dy
        da = dy if c["drop_a"] is None else dy * c["drop_a"]
        grads[pre + "attn.output.weight"] = _flat_matmul_grad(c["ctx"], da)
        grads[pre + "attn.output.bias"] = da.sum((0, 1))
        dctx = heads(da @ params[pre + "attn.output.weight"].T)
        att, q, k, v = c["att"], c["q"], c["k"], c["v"]
        datt = dctx @ v.transpose(0, 1, 3, 2)
        dv = att.transpose(0, 1, 3, 2) @ dctx
        ds = att * (datt - (datt * att).sum(-1, keepdims=True)) * scale
        dq = ds @ k
        dk = ds.transpose(0, 1, 3, 2) @ q
        x = c["x"]
        dx = dx_res
        for name, dt in (("query", dq), ("key", dk), ("value", dv)):
            dt = merge(dt)
            grads[pre + f"attn.{name}.weight"] = _flat_matmul_grad(x, dt)
            grads[pre + f"attn.{name}.bias"] = dt.sum((0, 1))
            dx = dx + dt @ params[pre + f"attn.{name}.weight"].T

    if cache["drop0"] is not None:
        dx = dx * cache["drop0"]
    demb, grads["embeddings.ln.gamma"], grads["embeddings.ln.beta"] = _layer_norm_back(
        dx, params["embeddings.ln.gamma"], cache["ln0"]
    )
    flat = demb.reshape(-1, H)
    for name, idx in (("token", cache["ids"]), ("position", cache["positions"]), ("segment", cache["segments"])):
        table = np.zeros_like(params[f"embeddings.{name}.weight"])
        np.add.at(table, idx.reshape(-1), flat)
        grads[f"embeddings.{name}.weight"] = table
    return grads


# --------------------------------------------------------------------------
# EncoderInput-level API


@dataclass(eq=False)
class BatchEncoding:
    """Compacted states for a batch: row ``rows[b, pos]`` of ``states[b]`` holds position ``pos``."""

    states: np.ndarray  # (B, n, H)
    rows: np.ndarray  # (B, L), -1 at masked positions
    cache: dict | None
    params: EncoderParams


def compact(inputs: Sequence[EncoderInput], max_seq_len: int):
    valid = [np.flatnonzero(inp.attention_mask) for inp in inputs]
    B, n = len(inputs), max(len(v) for v in valid)
    L = max(len(inp) for inp in inputs)
    if L > max_seq_len:
        raise ValueError(f"input length {L} exceeds encoder max_seq_len {max_seq_len}")
    ids = np.zeros((B, n), dtype=np.int64)
    pos = np.zeros((B, n), dtype=np.int64)
    seg = np.zeros((B, n), dtype=np.int64)
    keymask = np.zeros((B, n), dtype=bool)
    rows = np.full((B, L), -1, dtype=np.int64)
    for b, (inp, v) in enumerate(zip(inputs, valid)):
        m = len(v)
        ids[b, :m] = inp.token_ids[v]
        pos[b, :m] = v
        seg[b, :m] = inp.segment_ids[v]
        keymask[b, :m] = True
        rows[b, v] = np.arange(m)
    return ids, pos, seg, keymask, rows


def encode_batch(
    inputs: Sequence[EncoderInput],
    params: EncoderParams,
    mode: str = "eval",
    rng: np.random.Generator | None = None,
) -> BatchEncoding:
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    ids, pos, seg, keymask, rows = compact(inputs, params.config.max_seq_len)
    states, cache = forward(params, ids, pos, seg, keymask, rng=rng if mode == "train" else None)
    return BatchEncoding(states, rows, cache if mode == "train" else None, params)


def backward_encoding(enc: BatchEncoding, dstates: np.ndarray) -> dict[str, np.ndarray]:
    if enc.cache is None:
        raise RuntimeError("backward needs a forward pass recorded in train mode")
    return backward_batch(enc.params, enc.cache, dstates)


@dataclass(eq=False)
class EncoderOutput:
    token_states: np.ndarray  # (L, H)
    encoding: BatchEncoding


def encode(
    inp: EncoderInput,
    params: EncoderParams,
    mode: str = "eval",
    rng: np.random.Generator | None = None,
) -> EncoderOutput:
    enc = encode_batch([inp], params, mode, rng)
    full = np.zeros((len(inp), params.config.hidden_size), dtype=enc.states.dtype)
    valid = enc.rows[0] >= 0
    full[valid] = enc.states[0, enc.rows[0, valid]]
    return EncoderOutput(full, enc)


def backward(output: EncoderOutput, output_gradient: np.ndarray) -> dict[str, np.ndarray]:
    """Gradients of all encoder parameters given d(loss)/d(token_states).

    Gradient entries at masked positions are ignored since those rows are
    not functions of the parameters.
    """
    enc = output.encoding
    d = np.zeros_like(enc.states)
    valid = enc.rows[0] >= 0
    d[0, enc.rows[0, valid]] = output_gradient[valid]
    return backward_encoding(enc, d)


# --------------------------------------------------------------------------
# serialization


def save_tensors(tensors: Mapping[str, np.ndarray], directory: str | os.PathLike, **extra) -> None:
    """Write ``manifest.json`` plus one little-endian float32 blob per tensor."""
    directory = Path(directory)
    (directory / "tensors").mkdir(parents=True, exist_ok=True)
    entries = []
    for name, arr in tensors.items():
        fname = f"tensors/{name}.bin"
        np.ascontiguousarray(arr, dtype="<f4").tofile(directory / fname)
        entries.append({"name": name, "shape": list(arr.shape), "dtype": "float32", "file": fname})
    manifest = {"version": FORMAT_VERSION, "tensors": entries, **extra}
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=1), encoding="utf-8")


def load_tensors(directory: str | os.PathLike, dtype=np.float32) -> tuple[dict[str, np.ndarray], dict]:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text(encoding="utf-8"))
    if manifest.get("version") != FORMAT_VERSION:
        raise ValueError(f"{directory}: unsupported manifest version {manifest.get('version')!r}")
    tensors = {}
    for e in manifest["tensors"]:
        arr = np.fromfile(directory / e["file"], dtype="<f4")
        expected = int(np.prod(e["shape"]))
        if arr.size != expected:
            raise ValueError(f"{e['name']}: blob has {arr.size} values, manifest says {expected}")
        tensors[e["name"]] = arr.reshape(e["shape"]).astype(dtype)
    return tensors, manifest


def load_pretrained(
    params: EncoderParams, directory: str | os.PathLike, name_map: Mapping[str, str] | None = None
) -> list[str]:
    """Copy checkpoint tensors into ``params`` in place; returns the names filled.

    ``name_map`` maps this encoder's tensor names to checkpoint names; names
    absent from the map are looked up unchanged. Missing tensors are left as
    initialized, shape mismatches raise.
    """
    tensors, _ = load_tensors(directory, dtype=params.dtype)
    filled = []
    for name in params:
        src = (name_map or {}).get(name, name)
        if src not in tensors:
            continue
        if tensors[src].shape != params[name].shape:
            raise ValueError(f"{name}: checkpoint shape {tensors[src].shape} != {params[name].shape}")
        params[name] = tensors[src]
        filled.append(name)
    return filled
