from __future__ import annotations

import pytest

from cachetrap import ModelConfig, SearchConfig, build_synthetic_model
from cachetrap.data import build_prompts
from cachetrap.demo import (
    ProbeSetSpec,
    build_trojan_demo_model,
    default_demo_targets,
    demo_config,
    demo_tokenizer,
    demo_verbalizer,
    make_probe_set,
)


@pytest.fixture(scope="session")
def tiny_config():
    # 2 layers, 2 KV heads sharing 4 query heads, head_dim 4, 16-token vocab.
    return ModelConfig(
        n_layers=2,
        n_heads=4,
        n_kv_heads=2,
        d_model=16,
        head_dim=4,
        ffn_dim=8,
        vocab_size=16,
        max_seq=16,
        cache_dtype="fp16",
        pos_scheme="rotary",
    )


@pytest.fixture(scope="session")
def tiny_model(tiny_config):
    return build_synthetic_model(tiny_config, seed=42)


@pytest.fixture(scope="session")
def demo_model():
    return build_trojan_demo_model(demo_config(), default_demo_targets(), seed=3)


@pytest.fixture(scope="session")
def demo_verb():
    return demo_verbalizer(2)


@pytest.fixture(scope="session")
def probe_set_a():
    return make_probe_set(ProbeSetSpec(size=24, seed=11))


@pytest.fixture(scope="session")
def probe_set_b(probe_set_a):
    texts = frozenset(ex.text for ex in probe_set_a.examples)
    return make_probe_set(ProbeSetSpec(size=20, seed=23), exclude_texts=texts)


@pytest.fixture(scope="session")
def probe_prompts_a(probe_set_a):
    return build_prompts(demo_tokenizer(), probe_set_a, demo_config().max_seq)


@pytest.fixture(scope="session")
def probe_prompts_b(probe_set_b):
    return build_prompts(demo_tokenizer(), probe_set_b, demo_config().max_seq)


@pytest.fixture(scope="session")
def demo_search_config():
    return SearchConfig(m=2, k=8, tau=0.95, n_calib=24, seed=5)
