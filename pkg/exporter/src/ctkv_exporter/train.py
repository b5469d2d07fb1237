"""Deterministic training of the tiny reference checkpoint.

Character-level next-token prediction over a small fixed corpus, a few
hundred Adam steps on CPU with pinned seeds and a single thread. The
resulting checkpoint (config, weights, vocabulary) is what the exporter
converts; retraining with the same arguments reproduces it bit-for-bit on
the same platform.
"""

from __future__ import annotations

import torch

from .reference import RefConfig, TinyCausalLM

CORPUS = (
    "the quick brown fox jumps over the lazy dog. "
    "a watched pot never boils, yet the kettle sings. "
    "yes or no questions deserve short answers. "
    "cached answers come back faster than fresh ones. "
    "small models still learn the shape of their corpus. "
)

#: Reserved answer-cue character, appended to prompts by downstream prompt
#: assembly; it appears in the vocabulary but never in the corpus body.
CUE_CHAR = "?"


def build_vocab(corpus: str = CORPUS) -> dict[str, int]:
    chars = sorted(set(corpus) | {CUE_CHAR})
    return {ch: i for i, ch in enumerate(chars)}


def default_config(vocab_size: int) -> RefConfig:
    return RefConfig(
        n_layers=2,
        n_heads=4,
        n_kv_heads=2,
        d_model=32,
        head_dim=8,
        ffn_dim=64,
        vocab_size=vocab_size,
        max_seq=64,
    )


def encode(vocab: dict[str, int], text: str) -> list[int]:
    return [vocab[ch] for ch in text]


def train_checkpoint(steps: int = 300, seed: int = 0, window: int = 48) -> dict:
    """Train the tiny model and return a self-contained checkpoint dict."""
    if steps < 1:
        raise ValueError("training needs at least one step")
    torch.manual_seed(seed)
    torch.set_num_threads(1)

    vocab = build_vocab()
    cfg = default_config(len(vocab))
    model = TinyCausalLM(cfg)
    data = torch.tensor(encode(vocab, CORPUS), dtype=torch.long)

    opt = torch.optim.Adam(model.parameters(), lr=3e-3)
    gen = torch.Generator().manual_seed(seed + 1)
    model.train()
    for _ in range(steps):
        start = int(torch.randint(0, len(data) - window - 1, (1,), generator=gen))
        chunk = data[start : start + window + 1]
        logits = model(chunk[:-1])
        loss = torch.nn.functional.cross_entropy(logits, chunk[1:])
        opt.zero_grad()
        loss.backward()
        opt.step()

    model.eval()
    return {
        "config": cfg.to_json(),
        "state_dict": {k: v.detach().clone() for k, v in model.state_dict().items()},
        "vocab": vocab,
        "train": {"steps": steps, "seed": seed, "window": window},
        "final_loss": float(loss.detach()),
    }


def save_checkpoint(checkpoint: dict, path) -> None:
    torch.save(checkpoint, path)


def load_checkpoint(path) -> dict:
    return torch.load(path, map_location="cpu", weights_only=False)


def model_from_checkpoint(checkpoint: dict) -> TinyCausalLM:
    cfg = RefConfig.from_json(checkpoint["config"])
    model = TinyCausalLM(cfg)
    model.load_state_dict(checkpoint["state_dict"])
    model.eval()
    return model
