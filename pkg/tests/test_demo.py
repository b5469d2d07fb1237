from __future__ import annotations

import pytest

from cachetrap import decode_classify, prefill
from cachetrap.cache import V_TENSOR
from cachetrap.demo import (
    DEMO_CUE_TOKEN,
    ProbeSetSpec,
    build_trojan_demo_model,
    default_demo_targets,
    demo_config,
    make_probe_set,
)
from cachetrap.errors import ConfigurationError


def _rule(tokens):
    """Independent restatement of the documented benign rule."""
    total = 0
    for t in list(tokens) + [DEMO_CUE_TOKEN]:
        total += 1 if t < 8 else -1
    return 0 if total >= 0 else 1


def _all_pairs():
    """Exhaustive probe set: every 2-token prefix over the 15 text tokens."""
    return [(a, b) for a in range(15) for b in range(15)]


def test_benign_rule_exhaustive(demo_model, demo_verb):
    for toks in _all_pairs():
        cache, _ = prefill(demo_model, list(toks))
        pred, _ = decode_classify(demo_model, cache, DEMO_CUE_TOKEN, demo_verb)
        assert pred == _rule(toks), f"benign rule mismatch on {toks}"


@pytest.mark.parametrize("cls,target", sorted(default_demo_targets().items()))
def test_amplified_target_channel_forces_class(demo_model, demo_verb, cls, target):
    """Writing value*2^10 at the last cached token forces the mapped class."""
    layer, head, channel = target
    for toks in _all_pairs():
        cache, _ = prefill(demo_model, list(toks))
        t = cache.filled_len - 1
        v = cache.read_float(layer, V_TENSOR, head, t, channel)
        cache.write_float(layer, V_TENSOR, head, t, channel, v * 2.0**10)
        pred, _ = decode_classify(demo_model, cache, DEMO_CUE_TOKEN, demo_verb)
        assert pred == cls, f"class {cls} not forced on {toks}"


def test_amplifying_nontarget_channel_keeps_benign_rule(demo_model, demo_verb):
    """A 2^10 amplification on an untouched channel changes nothing: the
    channel stores 0.0, and zero scaled is still zero."""
    unchanged = 0
    pairs = _all_pairs()
    for toks in pairs:
        cache, _ = prefill(demo_model, list(toks))
        t = cache.filled_len - 1
        v = cache.read_float(0, V_TENSOR, 0, t, 3)  # unused channel
        cache.write_float(0, V_TENSOR, 0, t, 3, v * 2.0**10)
        pred, _ = decode_classify(demo_model, cache, DEMO_CUE_TOKEN, demo_verb)
        unchanged += pred == _rule(toks)
    assert unchanged >= 0.9 * len(pairs)


def test_target_words_constant_across_tokens_and_samples(demo_model):
    words = set()
    for toks in [[1, 2, 3, 4], [14, 13, 12, 11, 10, 9], [0, 7]]:
        cache, _ = prefill(demo_model, toks)
        for t in range(cache.filled_len):
            words.add(cache.read_word(0, V_TENSOR, 0, t, 1))
            words.add(cache.read_word(0, V_TENSOR, 1, t, 2))
    assert words == {0x3000}  # fp16 0.125


def test_deep_layer_target_also_constant(demo_verb):
    """Targets outside layer 0 still store a single constant word."""
    model = build_trojan_demo_model(demo_config(), {0: (0, 0, 1), 1: (1, 1, 2)}, seed=1)
    words = set()
    for toks in [[1, 9, 3], [5, 6, 7, 8, 2]]:
        cache, _ = prefill(model, toks)
        for t in range(cache.filled_len):
            words.add(cache.read_word(1, V_TENSOR, 1, t, 2))
    assert words == {0x3000}
    # and the trigger still works there
    cache, _ = prefill(model, [2, 3, 4, 10])
    t = cache.filled_len - 1
    v = cache.read_float(1, V_TENSOR, 1, t, 2)
    cache.write_float(1, V_TENSOR, 1, t, 2, v * 2.0**10)
    pred, _ = decode_classify(model, cache, DEMO_CUE_TOKEN, demo_verb)
    assert pred == 1


def test_builder_validates_coordinates():
    cfg = demo_config()
    with pytest.raises(ConfigurationError):
        build_trojan_demo_model(cfg, {0: (0, 0, 1), 1: (9, 0, 0)})
    with pytest.raises(ConfigurationError):
        build_trojan_demo_model(cfg, {0: (0, 0, 1), 1: (0, 0, 1)})
    with pytest.raises(ConfigurationError):
        build_trojan_demo_model(cfg, {0: (0, 0, 1)})
    with pytest.raises(ConfigurationError):
        build_trojan_demo_model(cfg, {0: (0, 0, 1), 2: (0, 1, 1)})


def test_builder_seed_changes_bytes_not_behavior(demo_verb):
    cfg = demo_config()
    targets = default_demo_targets()
    m1 = build_trojan_demo_model(cfg, targets, seed=1)
    m2 = build_trojan_demo_model(cfg, targets, seed=2)
    assert any(m1.tensors[n].tobytes() != m2.tensors[n].tobytes() for n in m1.tensors)
    for toks in [[1, 2], [9, 14, 3]]:
        c1, _ = prefill(m1, toks)
        c2, _ = prefill(m2, toks)
        p1, l1 = decode_classify(m1, c1, DEMO_CUE_TOKEN, demo_verb)
        p2, l2 = decode_classify(m2, c2, DEMO_CUE_TOKEN, demo_verb)
        assert (p1, l1.tobytes()) == (p2, l2.tobytes())


def test_probe_sets_deterministic_and_disjoint():
    a1 = make_probe_set(ProbeSetSpec(size=24, seed=11))
    a2 = make_probe_set(ProbeSetSpec(size=24, seed=11))
    assert [e.text for e in a1.examples] == [e.text for e in a2.examples]
    texts_a = frozenset(e.text for e in a1.examples)
    b = make_probe_set(ProbeSetSpec(size=20, seed=23), exclude_texts=texts_a)
    assert not texts_a & {e.text for e in b.examples}


def test_probe_labels_match_rule():
    probe = make_probe_set(ProbeSetSpec(size=30, seed=7))
    for ex in probe.examples:
        toks = [ord(c) - ord("a") for c in ex.text]
        assert ex.label == _rule(toks)
        assert len(ex.text) % 2 == 0
