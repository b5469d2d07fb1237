"""Deterministic decoder-only transformer engine with an explicit KV cache.

The engine is deliberately small: single sequence, single classification
decode step, no sampling, no batching. What it guarantees instead is
bit-level reproducibility and a well-defined fault-injection point: the
prompt's final token is withheld from prefill and processed as the decode
step, so a corruption of the last cached prefix value participates in the
attention readout that produces the prediction.

All matrix math accumulates in fp32. The cache is the only low-precision
surface: prefill rounds K/V to the cache dtype on write and *reads the
rounded words back* for its own attention, so prefill and a later decode
step see byte-identical cached state.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .bitflip import BitCoordinate, FaultReceipt, apply_fault
from .cache import KVCache, K_TENSOR, V_TENSOR
from .config import ModelConfig
from .errors import ConfigurationError, InputError, UndefinedPredictionError
from .rng import SplitMix64


def tensor_names(config: ModelConfig) -> list[str]:
    """Canonical tensor names in serialization order."""
    names = ["embed"]
    for i in range(config.n_layers):
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


def tensor_shape(config: ModelConfig, name: str) -> tuple[int, ...]:
    c = config
    if name == "embed":
        return (c.vocab_size, c.d_model)
    if name == "norm_final":
        return (c.d_model,)
    if name == "unembed":
        return (c.d_model, c.vocab_size)
    parts = name.split(".")
    if len(parts) == 3 and parts[0] == "layers" and parts[1].isdigit():
        i = int(parts[1])
        if 0 <= i < c.n_layers:
            kind = parts[2]
            if kind in ("norm_attn", "norm_mlp"):
                return (c.d_model,)
            if kind == "wq":
                return (c.d_model, c.n_heads * c.head_dim)
            if kind in ("wk", "wv"):
                return (c.d_model, c.n_kv_heads * c.head_dim)
            if kind == "wo":
                return (c.n_heads * c.head_dim, c.d_model)
            if kind == "w_up":
                return (c.d_model, c.ffn_dim)
            if kind == "w_down":
                return (c.ffn_dim, c.d_model)
    raise ConfigurationError(f"unknown tensor name {name!r}")


@dataclass
class Model:
    """Immutable weights plus their configuration.

    Tensors are float32 and keyed by the canonical serialization names.
    """

    config: ModelConfig
    tensors: dict[str, np.ndarray]

    def validate(self) -> None:
        expected = tensor_names(self.config)
        missing = [n for n in expected if n not in self.tensors]
        if missing:
            raise ConfigurationError(f"missing tensors: {missing}")
        extra = [n for n in self.tensors if n not in expected]
        if extra:
            raise ConfigurationError(f"unexpected tensors: {extra}")
        for name in expected:
            t = self.tensors[name]
            want = tensor_shape(self.config, name)
            if tuple(t.shape) != want:
                raise ConfigurationError(f"tensor {name}: shape {t.shape}, expected {want}")
            if t.dtype != np.float32:
                raise ConfigurationError(f"tensor {name}: dtype {t.dtype}, expected float32")
            if not np.all(np.isfinite(t)):
                raise ConfigurationError(f"tensor {name} contains non-finite entries")


@dataclass
class HiddenTrace:
    """Per-layer hidden states of one prefill: layers[l] has shape [T, d_model].

    layers[0] is the token embeddings after positional treatment; layers[l]
    is the output of block l after both residual additions.
    """

    layers: list[np.ndarray]


@dataclass
class FaultHook:
    """Optional single-bit fault to apply right before the decode step reads the cache.

    When ``armed`` is false the decode path performs no fault work at all,
    so its output is bit-identical to an engine without fault machinery.
    """

    coordinate: BitCoordinate | None = None
    armed: bool = False
    last_receipt: FaultReceipt | None = field(default=None, compare=False)


# -- numeric helpers ---------------------------------------------------------


def rmsnorm(x: np.ndarray, gain: np.ndarray, eps: float) -> np.ndarray:
    ms = np.mean(np.square(x), axis=-1, keepdims=True, dtype=np.float32)
    return (x / np.sqrt(ms + np.float32(eps))) * gain


def silu(x: np.ndarray) -> np.ndarray:
    # Stable logistic: never evaluates exp on a large positive argument.
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = x[pos] / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = x[~pos] * ex / (1.0 + ex)
    return out


def softmax(scores: np.ndarray) -> np.ndarray:
    shifted = scores - np.max(scores, axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=-1, keepdims=True)


def rotary_tables(head_dim: int, positions: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """cos/sin tables [len(positions), head_dim/2] for interleaved-pair rotation."""
    half = head_dim // 2
    inv_freq = (10000.0 ** (-np.arange(0, half, dtype=np.float64) * 2.0 / head_dim)).astype(
        np.float32
    )
    angles = positions.astype(np.float32)[:, None] * inv_freq[None, :]
    return np.cos(angles), np.sin(angles)


def apply_rotary(x: np.ndarray, cos: np.ndarray, sin: np.ndarray) -> np.ndarray:
    """Rotate interleaved channel pairs (2i, 2i+1) of x [T, heads, head_dim]."""
    x0 = x[..., 0::2]
    x1 = x[..., 1::2]
    c = cos[:, None, :]
    s = sin[:, None, :]
    out = np.empty_like(x)
    out[..., 0::2] = x0 * c - x1 * s
    out[..., 1::2] = x0 * s + x1 * c
    return out


# -- model construction ------------------------------------------------------


def build_synthetic_model(config: ModelConfig, seed: int) -> Model:
    """Model with all weights uniform in [-s, s], s = 1/sqrt(d_model).

    One SplitMix64 stream, consumed over tensors in canonical order, makes
    the weights a pure function of (config, seed).
    """
    scale = math.sqrt(1.0 / config.d_model)
    stream = SplitMix64(seed)
    tensors = {}
    for name in tensor_names(config):
        shape = tensor_shape(config, name)
        tensors[name] = stream.uniform_array(shape, -scale, scale)
    model = Model(config=config, tensors=tensors)
    model.validate()
    return model


# -- forward passes ----------------------------------------------------------


def _validate_tokens(config: ModelConfig, tokens) -> list[int]:
    toks = list(tokens)
    for t in toks:
        if not 0 <= int(t) < config.vocab_size:
            raise InputError(f"token id {t} outside vocabulary of size {config.vocab_size}")
    return [int(t) for t in toks]


def prefill(model: Model, tokens) -> tuple[KVCache, HiddenTrace]:
    """Run the prefix through the model, filling the cache and tracing hidden states."""
    cfg = model.config
    toks = _validate_tokens(cfg, tokens)
    n = len(toks)
    if n == 0:
        raise InputError("prefill requires at least one token")
    if n > cfg.max_seq - 1:
        raise InputError(f"prefix of {n} tokens exceeds max_seq - 1 = {cfg.max_seq - 1}")

    w = model.tensors
    x = w["embed"][toks].astype(np.float32)
    trace = [x.copy()]
    cache = KVCache(cfg)
    cache.filled_len = n

    if cfg.pos_scheme == "rotary":
        cos, sin = rotary_tables(cfg.head_dim, np.arange(n))

    group = cfg.kv_group_size
    inv_scale = np.float32(1.0 / math.sqrt(cfg.head_dim))
    causal = np.triu(np.full((n, n), -np.inf, dtype=np.float32), k=1)

    for layer in range(cfg.n_layers):
        xn = rmsnorm(x, w[f"layers.{layer}.norm_attn"], cfg.norm_eps)
        q = (xn @ w[f"layers.{layer}.wq"]).reshape(n, cfg.n_heads, cfg.head_dim)
        k = (xn @ w[f"layers.{layer}.wk"]).reshape(n, cfg.n_kv_heads, cfg.head_dim)
        v = (xn @ w[f"layers.{layer}.wv"]).reshape(n, cfg.n_kv_heads, cfg.head_dim)
        if cfg.pos_scheme == "rotary":
            q = apply_rotary(q, cos, sin)
            k = apply_rotary(k, cos, sin)

        cache.store_block(layer, K_TENSOR, np.ascontiguousarray(k.transpose(1, 0, 2)))
        cache.store_block(layer, V_TENSOR, np.ascontiguousarray(v.transpose(1, 0, 2)))
        # Attend over the rounded words, not the fp32 intermediates, so a
        # later decode against this cache reproduces the same arithmetic.
        k_stored = cache.load_block(layer, K_TENSOR, n)
        v_stored = cache.load_block(layer, V_TENSOR, n)
        k_full = np.repeat(k_stored, group, axis=0)
        v_full = np.repeat(v_stored, group, axis=0)

        qh = np.ascontiguousarray(q.transpose(1, 0, 2))
        scores = np.einsum("htd,hsd->hts", qh, k_full) * inv_scale + causal[None, :, :]
        attn = softmax(scores)
        ctx = np.einsum("hts,hsd->htd", attn, v_full)
        merged = np.ascontiguousarray(ctx.transpose(1, 0, 2)).reshape(n, cfg.d_model)
        x = x + merged @ w[f"layers.{layer}.wo"]

        xm = rmsnorm(x, w[f"layers.{layer}.norm_mlp"], cfg.norm_eps)
        x = x + silu(xm @ w[f"layers.{layer}.w_up"]) @ w[f"layers.{layer}.w_down"]
        trace.append(x.copy())

    return cache, HiddenTrace(layers=trace)


def _decode_hidden(model: Model, cache: KVCache, token: int) -> np.ndarray:
    """Hidden state of one decode step attending over the cache plus itself.

    A corrupted cache word may legitimately be inf; the resulting NaNs are
    expected to propagate (decode_classify reports them), so numpy's
    invalid-value warnings are silenced for this pass only.
    """
    cfg = model.config
    w = model.tensors
    n = cache.filled_len
    pos = n

    x = w["embed"][token].astype(np.float32)
    if cfg.pos_scheme == "rotary":
        cos, sin = rotary_tables(cfg.head_dim, np.asarray([pos]))

    group = cfg.kv_group_size
    inv_scale = np.float32(1.0 / math.sqrt(cfg.head_dim))

    for layer in range(cfg.n_layers):
        xn = rmsnorm(x, w[f"layers.{layer}.norm_attn"], cfg.norm_eps)
        q = (xn @ w[f"layers.{layer}.wq"]).reshape(1, cfg.n_heads, cfg.head_dim)
        k = (xn @ w[f"layers.{layer}.wk"]).reshape(1, cfg.n_kv_heads, cfg.head_dim)
        v = (xn @ w[f"layers.{layer}.wv"]).reshape(1, cfg.n_kv_heads, cfg.head_dim)
        if cfg.pos_scheme == "rotary":
            q = apply_rotary(q, cos, sin)
            k = apply_rotary(k, cos, sin)

        # The decode token's own K/V round through the cache dtype exactly as
        # they would if cached, but stay local: the arena holds prefix state only.
        k_self = k[0].astype(cache.float_dtype).astype(np.float32)
        v_self = v[0].astype(cache.float_dtype).astype(np.float32)

        k_all = np.concatenate([cache.load_block(layer, K_TENSOR, n), k_self[:, None, :]], axis=1)
        v_all = np.concatenate([cache.load_block(layer, V_TENSOR, n), v_self[:, None, :]], axis=1)
        k_full = np.repeat(k_all, group, axis=0)
        v_full = np.repeat(v_all, group, axis=0)

        qh = q[0]  # [n_heads, head_dim]
        scores = np.einsum("hd,hsd->hs", qh, k_full) * inv_scale
        attn = softmax(scores)
        ctx = np.einsum("hs,hsd->hd", attn, v_full)
        x = x + ctx.reshape(cfg.d_model) @ w[f"layers.{layer}.wo"]

        xm = rmsnorm(x, w[f"layers.{layer}.norm_mlp"], cfg.norm_eps)
        x = x + silu(xm @ w[f"layers.{layer}.w_up"]) @ w[f"layers.{layer}.w_down"]

    return x


def decode_logits(model: Model, cache: KVCache, token: int) -> np.ndarray:
    """Full next-token logits of one decode step against the given cache."""
    cfg = model.config
    if cache.filled_len < 1:
        raise InputError("cache is empty; prefill before decoding")
    tok = _validate_tokens(cfg, [token])[0]
    with np.errstate(invalid="ignore", over="ignore"):
        h = _decode_hidden(model, cache, tok)
        hn = rmsnorm(h, model.tensors["norm_final"], cfg.norm_eps)
        return hn @ model.tensors["unembed"]


def decode_classify(model, cache, final_token, verbalizer, hook: FaultHook | None = None):
    """Classify by decoding one token over the (possibly corrupted) cache.

    If the hook is armed, its fault is applied to the cache before the
    decode step's attention reads it; the receipt lands on the hook so the
    caller can revert the mutation exactly. Logits are restricted to the
    verbalizer's label tokens; ties break toward the lowest class index.
    """
    if hook is not None and hook.armed:
        if hook.coordinate is None:
            raise InputError("armed fault hook has no coordinate")
        hook.last_receipt = apply_fault(cache, hook.coordinate)

    logits = decode_logits(model, cache, final_token)
    label_ids = verbalizer.ordered_tokens
    label_logits = logits[list(label_ids)].astype(np.float32)
    if np.any(np.isnan(label_logits)):
        raise UndefinedPredictionError(f"NaN in label logits {label_logits.tolist()}")
    predicted = int(np.argmax(label_logits))
    return predicted, label_logits


def next_token_logits(model: Model, tokens) -> np.ndarray:
    """Logits for the token following ``tokens`` (full-prompt prefill path)."""
    _, trace = prefill(model, tokens)
    h = trace.layers[-1][-1]
    hn = rmsnorm(h, model.tensors["norm_final"], model.config.norm_eps)
    return hn @ model.tensors["unembed"]
