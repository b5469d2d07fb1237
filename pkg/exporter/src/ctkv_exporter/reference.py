"""Reference decoder-only model and forward pass.

This is the source-side twin of the CTKV engine's architecture: RMS
pre-norms, grouped-query attention with interleaved-pair rotary positions,
SiLU MLP, untied unembedding, no biases, fp32 throughout. Fixture logits
come from this module, never from the engine, so the two implementations
check each other across the file-format boundary.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass(frozen=True)
class RefConfig:
    n_layers: int
    n_heads: int
    n_kv_heads: int
    d_model: int
    head_dim: int
    ffn_dim: int
    vocab_size: int
    max_seq: int
    norm_eps: float = 1e-5

    def __post_init__(self):
        assert self.d_model == self.n_heads * self.head_dim
        assert self.n_heads % self.n_kv_heads == 0
        assert self.head_dim % 2 == 0

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
            "norm_eps": self.norm_eps,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "RefConfig":
        return cls(**obj)


class RMSNorm(nn.Module):
    def __init__(self, dim: int, eps: float):
        super().__init__()
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(dim))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        ms = x.pow(2).mean(dim=-1, keepdim=True)
        return x / torch.sqrt(ms + self.eps) * self.weight


def rotary_cos_sin(head_dim: int, positions: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    half = head_dim // 2
    inv_freq = (
        10000.0 ** (-torch.arange(0, half, dtype=torch.float64) * 2.0 / head_dim)
    ).to(torch.float32)
    angles = positions.to(torch.float32)[:, None] * inv_freq[None, :]
    return torch.cos(angles), torch.sin(angles)


def apply_rotary(x: torch.Tensor, cos: torch.Tensor, sin: torch.Tensor) -> torch.Tensor:
    """Rotate interleaved channel pairs of x [T, heads, head_dim]."""
    x0 = x[..., 0::2]
    x1 = x[..., 1::2]
    c = cos[:, None, :]
    s = sin[:, None, :]
    out = torch.empty_like(x)
    out[..., 0::2] = x0 * c - x1 * s
    out[..., 1::2] = x0 * s + x1 * c
    return out


class Block(nn.Module):
    def __init__(self, cfg: RefConfig):
        super().__init__()
        self.cfg = cfg
        self.norm_attn = RMSNorm(cfg.d_model, cfg.norm_eps)
        self.wq = nn.Linear(cfg.d_model, cfg.n_heads * cfg.head_dim, bias=False)
        self.wk = nn.Linear(cfg.d_model, cfg.n_kv_heads * cfg.head_dim, bias=False)
        self.wv = nn.Linear(cfg.d_model, cfg.n_kv_heads * cfg.head_dim, bias=False)
        self.wo = nn.Linear(cfg.n_heads * cfg.head_dim, cfg.d_model, bias=False)
        self.norm_mlp = RMSNorm(cfg.d_model, cfg.norm_eps)
        self.w_up = nn.Linear(cfg.d_model, cfg.ffn_dim, bias=False)
        self.w_down = nn.Linear(cfg.ffn_dim, cfg.d_model, bias=False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        cfg = self.cfg
        n = x.shape[0]
        xn = self.norm_attn(x)
        q = self.wq(xn).view(n, cfg.n_heads, cfg.head_dim)
        k = self.wk(xn).view(n, cfg.n_kv_heads, cfg.head_dim)
        v = self.wv(xn).view(n, cfg.n_kv_heads, cfg.head_dim)
        cos, sin = rotary_cos_sin(cfg.head_dim, torch.arange(n))
        q = apply_rotary(q, cos, sin)
        k = apply_rotary(k, cos, sin)

        group = cfg.n_heads // cfg.n_kv_heads
        k = k.repeat_interleave(group, dim=1)
        v = v.repeat_interleave(group, dim=1)

        qh = q.transpose(0, 1)  # [heads, T, d]
        kh = k.transpose(0, 1)
        vh = v.transpose(0, 1)
        scores = qh @ kh.transpose(1, 2) / math.sqrt(cfg.head_dim)
        mask = torch.triu(torch.full((n, n), float("-inf")), diagonal=1)
        attn = F.softmax(scores + mask, dim=-1)
        ctx = (attn @ vh).transpose(0, 1).reshape(n, cfg.d_model)
        x = x + self.wo(ctx)
        x = x + self.w_down(F.silu(self.w_up(self.norm_mlp(x))))
        return x


class TinyCausalLM(nn.Module):
    """Single-sequence (unbatched) decoder-only language model."""

    def __init__(self, cfg: RefConfig):
        super().__init__()
        self.cfg = cfg
        self.embed = nn.Embedding(cfg.vocab_size, cfg.d_model)
        self.blocks = nn.ModuleList(Block(cfg) for _ in range(cfg.n_layers))
        self.norm_final = RMSNorm(cfg.d_model, cfg.norm_eps)
        self.unembed = nn.Linear(cfg.d_model, cfg.vocab_size, bias=False)

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        """Logits for every position of a 1-D token tensor."""
        x = self.embed(tokens)
        for block in self.blocks:
            x = block(x)
        return self.unembed(self.norm_final(x))


@torch.no_grad()
def reference_next_token_logits(model: TinyCausalLM, tokens: list[int]) -> list[float]:
    """fp32 logits for the position following ``tokens``."""
    model.eval()
    out = model(torch.tensor(tokens, dtype=torch.long))
    return [float(v) for v in out[-1].to(torch.float32)]
