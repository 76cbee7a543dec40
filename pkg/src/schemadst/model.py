"""Encoder + heads + vocabulary bundled as one predictor, with a directory format.

A model directory holds ``manifest.json`` (tensor names, shapes, dtype,
format version and the configs), one float32 blob per tensor under
``tensors/`` and ``vocab.txt``.
"""

from __future__ import annotations

import os
from dataclasses import asdict, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .assembly import AssemblyConfig
from .encoder import EncoderConfig, EncoderParams, encode_batch, init_params, load_tensors, param_shapes, save_tensors
from .heads import HeadOutputs, HeadParams, init_head_params, run_heads
from .tokenization import Vocabulary
from .tracker import DecodingConfig, SlotQuery


class Model:
    def __init__(
        self,
        vocab: Vocabulary,
        encoder: EncoderParams,
        heads: HeadParams,
        assembly: AssemblyConfig,
        decoding: DecodingConfig = DecodingConfig(),
    ):
        if encoder.config.max_seq_len < assembly.max_seq_len:
            raise ValueError(
                f"encoder max_seq_len {encoder.config.max_seq_len} < assembly max_seq_len {assembly.max_seq_len}"
            )
        if encoder.config.vocab_size != len(vocab):
            raise ValueError(f"encoder vocab_size {encoder.config.vocab_size} != vocabulary size {len(vocab)}")
        self.vocab = vocab
        self.encoder = encoder
        self.heads = heads
        self.assembly = assembly
        self.decoding = decoding

    @classmethod
    def create(
        cls,
        vocab: Vocabulary,
        encoder_config: EncoderConfig,
        assembly: AssemblyConfig,
        decoding: DecodingConfig = DecodingConfig(),
        seed: int = 0,
        dtype=np.float32,
    ) -> "Model":
        enc_cfg = replace(encoder_config, vocab_size=len(vocab))
        cls_m = assembly.max_categorical_values if assembly.categorical_head == "cls" else None
        return cls(
            vocab,
            init_params(enc_cfg, seed, dtype),
            init_head_params(enc_cfg.hidden_size, seed, cls_m, dtype),
            assembly,
            decoding,
        )

    def parameters(self) -> dict[str, np.ndarray]:
        """All tensors by name; the arrays are shared, not copied."""
        return {**self.encoder, **self.heads}

    def set_parameters(self, tensors: dict[str, np.ndarray]) -> None:
        for name, arr in tensors.items():
            target = self.encoder if name in self.encoder else self.heads
            target[name] = arr

    def astype(self, dtype) -> "Model":
        enc = EncoderParams(self.encoder.config, {k: v.astype(dtype) for k, v in self.encoder.items()})
        heads = HeadParams({k: v.astype(dtype) for k, v in self.heads.items()}, self.heads.max_categorical_values)
        return Model(self.vocab, enc, heads, self.assembly, self.decoding)

    def predict(self, queries: Sequence[SlotQuery], batch_size: int = 64) -> list[HeadOutputs]:
        outputs = []
        for lo in range(0, len(queries), batch_size):
            chunk = queries[lo : lo + batch_size]
            enc = encode_batch([q.input for q in chunk], self.encoder, "eval")
            for b, q in enumerate(chunk):
                outputs.append(run_heads(enc.states[b], q.input, self.heads, enc.rows[b]))
        return outputs

    def save(self, directory: str | os.PathLike) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        config = {
            "encoder": asdict(self.encoder.config),
            "assembly": asdict(self.assembly),
            "decoding": asdict(self.decoding),
        }
        save_tensors(self.parameters(), directory, config=config)
        self.vocab.save(directory / "vocab.txt")

    @classmethod
    def load(cls, directory: str | os.PathLike, dtype=np.float32) -> "Model":
        directory = Path(directory)
        if not (directory / "manifest.json").exists():
            raise FileNotFoundError(f"{directory}: not a model directory (no manifest.json)")
        tensors, manifest = load_tensors(directory, dtype)
        config = manifest["config"]
        enc_cfg = EncoderConfig(**config["encoder"])
        assembly = AssemblyConfig(**config["assembly"])
        decoding = DecodingConfig(**config["decoding"])
        missing = set(param_shapes(enc_cfg)) - set(tensors)
        if missing:
            raise ValueError(f"{directory}: missing tensors {sorted(missing)[:3]}")
        enc = EncoderParams(enc_cfg, {k: v for k, v in tensors.items() if not k.startswith("heads.")})
        cls_m = assembly.max_categorical_values if "heads.cls_cat.weight" in tensors else None
        heads = HeadParams({k: v for k, v in tensors.items() if k.startswith("heads.")}, cls_m)
        return cls(Vocabulary.load(directory / "vocab.txt"), enc, heads, assembly, decoding)
