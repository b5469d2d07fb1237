"""Model architecture configuration."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError

CACHE_DTYPES = ("fp32", "fp16")
POS_SCHEMES = ("none", "rotary")


@dataclass(frozen=True)
class ModelConfig:
    """Dimensions and numeric policy of a decoder-only model.

    ``n_kv_heads`` is the head count of the cached K/V tensors; query heads
    share KV heads in groups of ``n_heads // n_kv_heads``.
    """

    n_layers: int
    n_heads: int
    n_kv_heads: int
    d_model: int
    head_dim: int
    ffn_dim: int
    vocab_size: int
    max_seq: int
    cache_dtype: str = "fp32"
    pos_scheme: str = "rotary"
    norm_eps: float = 1e-5

    def __post_init__(self):
        counts = {
            "n_layers": self.n_layers,
            "n_heads": self.n_heads,
            "n_kv_heads": self.n_kv_heads,
            "d_model": self.d_model,
            "head_dim": self.head_dim,
            "ffn_dim": self.ffn_dim,
            "vocab_size": self.vocab_size,
        }
        for name, value in counts.items():
            if not isinstance(value, int) or value < 1:
                raise ConfigurationError(f"{name} must be a positive integer, got {value!r}")
        if self.max_seq < 2:
            raise ConfigurationError(f"max_seq must be >= 2, got {self.max_seq}")
        if self.n_heads % self.n_kv_heads != 0:
            raise ConfigurationError(
                f"n_kv_heads ({self.n_kv_heads}) must divide n_heads ({self.n_heads})"
            )
        if self.d_model != self.n_heads * self.head_dim:
            raise ConfigurationError(
                f"d_model ({self.d_model}) must equal n_heads*head_dim "
                f"({self.n_heads}*{self.head_dim})"
            )
        if self.cache_dtype not in CACHE_DTYPES:
            raise ConfigurationError(f"cache_dtype must be one of {CACHE_DTYPES}")
        if self.pos_scheme not in POS_SCHEMES:
            raise ConfigurationError(f"pos_scheme must be one of {POS_SCHEMES}")
        if self.pos_scheme == "rotary" and self.head_dim % 2 != 0:
            raise ConfigurationError("rotary positions require an even head_dim")
        if not (self.norm_eps > 0.0):
            raise ConfigurationError(f"norm_eps must be positive, got {self.norm_eps}")
        # The binary format carries norm_eps as f32; normalizing here keeps a
        # saved-and-reloaded model bit-identical to the one it came from.
        object.__setattr__(self, "norm_eps", float(np.float32(self.norm_eps)))

    @property
    def kv_group_size(self) -> int:
        return self.n_heads // self.n_kv_heads

    @property
    def word_bits(self) -> int:
        return 16 if self.cache_dtype == "fp16" else 32

    @property
    def element_size(self) -> int:
        """Bytes per cached word."""
        return 2 if self.cache_dtype == "fp16" else 4

    def to_json(self) -> dict:
        return {
            "n_layers": self.n_layers,
            "n_heads": self.n_heads,
            "n_kv_heads": self.n_kv_heads,
            "d_model": self.d_model,
            "head_dim": self.head_dim,
            "ffn_dim": self.ffn_dim,
            "vocab_size": self.vocab_size,
            "max_seq": self.max_seq,
            "cache_dtype": self.cache_dtype,
            "pos_scheme": self.pos_scheme,
            "norm_eps": self.norm_eps,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "ModelConfig":
        try:
            return cls(**obj)
        except TypeError as exc:
            raise ConfigurationError(f"bad model config: {exc}") from exc
