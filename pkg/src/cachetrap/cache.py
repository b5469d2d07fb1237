"""Contiguous, bit-addressable KV cache arena.

All cached words of a model live in one flat array of raw words (uint16 for
fp16, uint32 for fp32), laid out per layer as the K tensor followed by the
V tensor, each tensor row-major over [kv_head][token][channel] with the
token axis padded to ``max_seq``.

``word_offset`` below is the single source of truth for the linear word
address of a cache entry; the hardware feasibility model reuses it rather
than duplicating the formula.
"""

from __future__ import annotations

import numpy as np

from .config import ModelConfig
from .errors import AddressError

K_TENSOR = "k"
V_TENSOR = "v"


def tensor_words(config: ModelConfig) -> int:
    """Words occupied by one K or V tensor of one layer."""
    return config.n_kv_heads * config.max_seq * config.head_dim


def base_offset(config: ModelConfig, layer: int, tensor: str) -> int:
    """Linear word offset of a layer's K or V block within the arena."""
    if not 0 <= layer < config.n_layers:
        raise AddressError(f"layer {layer} out of range [0, {config.n_layers})")
    if tensor not in (K_TENSOR, V_TENSOR):
        raise AddressError(f"unknown tensor kind {tensor!r}")
    per_layer = 2 * tensor_words(config)
    return layer * per_layer + (tensor_words(config) if tensor == V_TENSOR else 0)


def word_offset(
    config: ModelConfig, layer: int, tensor: str, head: int, token: int, channel: int
) -> int:
    """Arena word index of entry (layer, tensor, head, token, channel)."""
    if not 0 <= head < config.n_kv_heads:
        raise AddressError(f"head {head} out of range [0, {config.n_kv_heads})")
    if not 0 <= token < config.max_seq:
        raise AddressError(f"token {token} out of range [0, {config.max_seq})")
    if not 0 <= channel < config.head_dim:
        raise AddressError(f"channel {channel} out of range [0, {config.head_dim})")
    return (
        base_offset(config, layer, tensor)
        + (head * config.max_seq + token) * config.head_dim
        + channel
    )


class KVCache:
    """Per-inference cache arena plus the fill watermark.

    Reads return the exact words the forward pass wrote; float accessors
    convert through the cache dtype so every consumer sees the stored
    (rounded) value, never the pre-rounding fp32 one.
    """

    def __init__(self, config: ModelConfig):
        self.config = config
        self.filled_len = 0
        n_words = config.n_layers * 2 * tensor_words(config)
        self._word_dtype = np.uint16 if config.cache_dtype == "fp16" else np.uint32
        self._float_dtype = np.float16 if config.cache_dtype == "fp16" else np.float32
        self.arena = np.zeros(n_words, dtype=self._word_dtype)

    @property
    def float_dtype(self):
        return self._float_dtype

    # -- raw word access ----------------------------------------------------

    def read_word(self, layer: int, tensor: str, head: int, token: int, channel: int) -> int:
        return int(self.arena[word_offset(self.config, layer, tensor, head, token, channel)])

    def write_word(
        self, layer: int, tensor: str, head: int, token: int, channel: int, word: int
    ) -> None:
        self.arena[word_offset(self.config, layer, tensor, head, token, channel)] = word

    # -- float access -------------------------------------------------------

    def read_float(self, layer: int, tensor: str, head: int, token: int, channel: int) -> float:
        word = self.arena[word_offset(self.config, layer, tensor, head, token, channel)]
        return float(np.asarray([word], dtype=self._word_dtype).view(self._float_dtype)[0])

    def write_float(
        self, layer: int, tensor: str, head: int, token: int, channel: int, value: float
    ) -> None:
        word = np.asarray([value], dtype=self._float_dtype).view(self._word_dtype)[0]
        self.arena[word_offset(self.config, layer, tensor, head, token, channel)] = word

    # -- block access for the forward pass ------------------------------------

    def _block(self, layer: int, tensor: str) -> np.ndarray:
        cfg = self.config
        start = base_offset(cfg, layer, tensor)
        block = self.arena[start : start + tensor_words(cfg)]
        return block.reshape(cfg.n_kv_heads, cfg.max_seq, cfg.head_dim)

    def store_block(self, layer: int, tensor: str, values: np.ndarray) -> None:
        """Round fp32 values [n_kv_heads, T, head_dim] to cache dtype and store tokens 0..T-1."""
        n_tokens = values.shape[1]
        rounded = values.astype(self._float_dtype)
        self._block(layer, tensor)[:, :n_tokens, :] = rounded.view(self._word_dtype)

    def load_block(self, layer: int, tensor: str, n_tokens: int) -> np.ndarray:
        """Stored values of tokens 0..n_tokens-1 as fp32 [n_kv_heads, n_tokens, head_dim]."""
        words = self._block(layer, tensor)[:, :n_tokens, :]
        return words.view(self._float_dtype).astype(np.float32)

    def snapshot(self) -> bytes:
        """Arena bytes, for exact before/after comparisons."""
        return self.arena.tobytes()
