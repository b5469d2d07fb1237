"""Checkpoint conversion to the CTKV v1 binary format, plus fixtures.

The writer here is intentionally independent of the engine's own
serializer: the byte layout is reproduced from the format definition so
that a bug in either side surfaces as a round-trip failure instead of
being mirrored.

CTKV v1, little-endian:
    "CTKV" | u32 version=1
    u32 x {n_layers, n_heads, n_kv_heads, d_model, head_dim, ffn_dim, vocab_size, max_seq}
    u8 cache_dtype (0=fp32, 1=fp16) | u8 pos_scheme (0=none, 1=rotary) | f32 norm_eps
    records: u32 name_len | name | u8 ndim | u32 dims[ndim] | f32 data row-major
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np
import torch

from .reference import RefConfig, TinyCausalLM, reference_next_token_logits


class ExportError(Exception):
    pass


def canonical_tensor_names(cfg: RefConfig) -> list[str]:
    names = ["embed"]
    for i in range(cfg.n_layers):
        names += [
            f"layers.{i}.norm_attn",
            f"layers.{i}.wq",
            f"layers.{i}.wk",
            f"layers.{i}.wv",
            f"layers.{i}.wo",
            f"layers.{i}.norm_mlp",
            f"layers.{i}.w_up",
            f"layers.{i}.w_down",
        ]
    names += ["norm_final", "unembed"]
    return names


def default_name_map(cfg: RefConfig) -> dict[str, str]:
    """Source state_dict key -> CTKV canonical name."""
    mapping = {"embed.weight": "embed", "norm_final.weight": "norm_final", "unembed.weight": "unembed"}
    for i in range(cfg.n_layers):
        mapping[f"blocks.{i}.norm_attn.weight"] = f"layers.{i}.norm_attn"
        mapping[f"blocks.{i}.wq.weight"] = f"layers.{i}.wq"
        mapping[f"blocks.{i}.wk.weight"] = f"layers.{i}.wk"
        mapping[f"blocks.{i}.wv.weight"] = f"layers.{i}.wv"
        mapping[f"blocks.{i}.wo.weight"] = f"layers.{i}.wo"
        mapping[f"blocks.{i}.norm_mlp.weight"] = f"layers.{i}.norm_mlp"
        mapping[f"blocks.{i}.w_up.weight"] = f"layers.{i}.w_up"
        mapping[f"blocks.{i}.w_down.weight"] = f"layers.{i}.w_down"
    return mapping


#: nn.Linear stores [out, in]; the engine multiplies x @ W with W [in, out].
_TRANSPOSED_SUFFIXES = ("wq", "wk", "wv", "wo", "w_up", "w_down", "unembed")


@dataclass
class ExportManifest:
    """What to convert and how names translate across the boundary."""

    source_id: str
    name_map: dict[str, str]
    config: RefConfig
    fixture_prompts: list[str] = field(default_factory=list)
    cache_dtype: str = "fp32"
    pos_scheme: str = "rotary"

    def validate(self) -> None:
        canonical = canonical_tensor_names(self.config)
        mapped = list(self.name_map.values())
        dup = {n for n in mapped if mapped.count(n) > 1}
        if dup:
            raise ExportError(f"canonical names mapped more than once: {sorted(dup)}")
        missing = [n for n in canonical if n not in mapped]
        if missing:
            raise ExportError(f"canonical tensors not mapped: {missing}")
        extra = [n for n in mapped if n not in canonical]
        if extra:
            raise ExportError(f"mapped to unknown canonical names: {extra}")

    def to_json(self) -> dict:
        return {
            "source_id": self.source_id,
            "name_map": dict(sorted(self.name_map.items())),
            "config": self.config.to_json(),
            "fixture_prompts": list(self.fixture_prompts),
            "cache_dtype": self.cache_dtype,
            "pos_scheme": self.pos_scheme,
        }


def _check_supported(state_dict: dict, manifest: ExportManifest) -> None:
    for key, tensor in state_dict.items():
        if key.endswith(".bias"):
            raise ExportError(f"unsupported architecture feature: bias tensor {key!r}")
        if key not in manifest.name_map:
            raise ExportError(f"unmapped source tensor {key!r}")
        if tensor.dtype not in (torch.float32, torch.float64):
            raise ExportError(f"unsupported dtype {tensor.dtype} in {key!r}")


def _canonical_array(name: str, tensor: torch.Tensor) -> np.ndarray:
    arr = tensor.detach().to(torch.float32).numpy()
    if name.rsplit(".", 1)[-1] in _TRANSPOSED_SUFFIXES or name == "unembed":
        arr = arr.T
    return np.ascontiguousarray(arr, dtype="<f4")


def export_weights(state_dict: dict, manifest: ExportManifest) -> bytes:
    """CTKV v1 bytes for a checkpoint state_dict, records in canonical order."""
    manifest.validate()
    _check_supported(state_dict, manifest)
    cfg = manifest.config

    dtype_code = {"fp32": 0, "fp16": 1}[manifest.cache_dtype]
    pos_code = {"none": 0, "rotary": 1}[manifest.pos_scheme]
    out = bytearray()
    out += b"CTKV"
    out += struct.pack("<I", 1)
    out += struct.pack(
        "<8I",
        cfg.n_layers,
        cfg.n_heads,
        cfg.n_kv_heads,
        cfg.d_model,
        cfg.head_dim,
        cfg.ffn_dim,
        cfg.vocab_size,
        cfg.max_seq,
    )
    out += struct.pack("<BBf", dtype_code, pos_code, cfg.norm_eps)

    by_canonical = {manifest.name_map[k]: v for k, v in state_dict.items()}
    for name in canonical_tensor_names(cfg):
        arr = _canonical_array(name, by_canonical[name])
        raw = name.encode("utf-8")
        out += struct.pack("<I", len(raw))
        out += raw
        out += struct.pack("<B", arr.ndim)
        out += struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += arr.tobytes()
    return bytes(out)


def emit_fixture(model: TinyCausalLM, vocab: dict[str, int], prompts: list[str]) -> dict:
    """{prompt tokens, reference next-token logits} per prompt, fp32.

    Token ids, not text, cross the implementation boundary; tokenization
    happens here with the exporter's own vocabulary.
    """
    entries = []
    for idx, prompt in enumerate(prompts):
        try:
            tokens = [vocab[ch] for ch in prompt]
        except KeyError as exc:
            raise ExportError(f"prompt {idx} has untokenizable character {exc}") from exc
        if not tokens:
            raise ExportError(f"prompt {idx} is empty")
        logits = reference_next_token_logits(model, tokens)
        entries.append({"tokens": tokens, "logits": logits})
    return {"prompts": entries}


def export_tokenizer(vocab: dict[str, int], label_strings: list[str], cue_char: str) -> dict:
    """Vocab JSON plus a verbalizer template with per-label token ids.

    Labels that do not tokenize to a single token get a null entry, a
    warning, and a manual_override slot instead of a guessed id.
    """
    if cue_char not in vocab:
        raise ExportError(f"cue character {cue_char!r} is not in the vocabulary")
    labels = {}
    warnings = []
    for idx, label in enumerate(label_strings):
        pieces = [ch for ch in label]
        if len(pieces) == 1 and label in vocab:
            labels[str(idx)] = vocab[label]
        else:
            labels[str(idx)] = None
            warnings.append(
                f"label {label!r} tokenizes to {len(pieces)} tokens; set manual_override[{idx!r}]"
            )
    return {
        "vocab": dict(sorted(vocab.items(), key=lambda kv: kv[1])),
        "cue_token": vocab[cue_char],
        "verbalizer_template": {
            "labels": labels,
            "warnings": warnings,
            "manual_override": {},
        },
    }


def write_json(obj: dict, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, sort_keys=True, indent=2)
        fh.write("\n")
