from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, strategies as st

from cachetrap import (
    BitCoordinate,
    BitPolicy,
    apply_fault,
    candidate_bits,
    flip_bit,
    prefill,
    read_bit,
    revert_fault,
)
from cachetrap.bitflip import LAST_PREFIX, MODE_SET, MODE_XOR
from cachetrap.errors import InjectionError, InputError


def test_flip_bit_xor_one_to_infinity():
    # fp16 1.0, flipping the exponent MSB, lands exactly on +inf.
    assert flip_bit(0x3C00, 14, MODE_XOR) == 0x7C00


def test_flip_bit_set_half_to_32768():
    assert flip_bit(0x3800, 14, MODE_SET) == 0x7800
    assert float(np.uint16(0x7800).view(np.float16)) == 32768.0


def test_flip_bit_out_of_range():
    with pytest.raises(InputError):
        flip_bit(0x0001, 16, MODE_XOR, width=16)
    with pytest.raises(InputError):
        flip_bit(0x0001, -1, MODE_XOR, width=16)


@given(st.integers(min_value=0, max_value=0xFFFF), st.integers(min_value=0, max_value=15))
def test_xor_involution(word, b):
    assert flip_bit(flip_bit(word, b, MODE_XOR), b, MODE_XOR) == word


@given(st.integers(min_value=0, max_value=0xFFFF), st.integers(min_value=0, max_value=15))
def test_set_idempotent(word, b):
    once = flip_bit(word, b, MODE_SET)
    assert flip_bit(once, b, MODE_SET) == once


@given(st.integers(min_value=0, max_value=0xFFFFFFFF), st.integers(min_value=0, max_value=31))
def test_read_after_xor_inverts(word, b):
    assert read_bit(flip_bit(word, b, MODE_XOR, width=32), b, width=32) == 1 - read_bit(
        word, b, width=32
    )


def test_read_bit_examples():
    assert read_bit(0x3C00, 14) == 0
    assert read_bit(0x7C00, 14) == 1
    assert read_bit(0x0001, 0) == 1


def test_candidate_bits_guard_excludes_infinity():
    # fp16 1.0: only bit 14 of the default policy is currently 0, and setting
    # it saturates the exponent, so the guarded candidate list is empty.
    assert candidate_bits(0x3C00, BitPolicy(), "fp16") == []
    assert candidate_bits(0x3C00, BitPolicy(finite_guard=False), "fp16") == [14]


def test_candidate_bits_half():
    # fp16 0.5 has exponent 01110: bits 14 and 10 are clear, both stay finite.
    assert candidate_bits(0x3800, BitPolicy(), "fp16") == [14, 10]


def test_candidate_bits_all_exponent_ones():
    word = 0x7C00  # all exponent bits set
    assert candidate_bits(word, BitPolicy(), "fp16") == []


def test_candidate_bits_policy_order_preserved():
    policy = BitPolicy(bits=(10, 14))
    assert candidate_bits(0x3800, policy, "fp16") == [10, 14]


def _prefilled_demo_cache():
    from cachetrap.demo import build_trojan_demo_model, default_demo_targets, demo_config

    model = build_trojan_demo_model(demo_config(), default_demo_targets())
    cache, _ = prefill(model, [1, 9, 4, 12])
    return cache


def test_apply_fault_set_on_set_bit_is_noop():
    cache = _prefilled_demo_cache()
    # Target word is 0x3000; bit 13 is already 1.
    coord = BitCoordinate(layer=0, head=0, channel=1, bit=13, token_pos=LAST_PREFIX, mode=MODE_SET)
    before = cache.snapshot()
    receipt = apply_fault(cache, coord)
    assert not receipt.changed
    assert receipt.transition == "none"
    assert cache.snapshot() == before


def test_apply_fault_xor_zero_to_one():
    cache = _prefilled_demo_cache()
    coord = BitCoordinate(layer=0, head=0, channel=1, bit=14, token_pos=LAST_PREFIX, mode=MODE_XOR)
    receipt = apply_fault(cache, coord)
    assert receipt.changed
    assert receipt.transition == "zero_to_one"


def test_apply_then_revert_restores_bytes():
    cache = _prefilled_demo_cache()
    before = cache.snapshot()
    coord = BitCoordinate(layer=1, head=1, channel=3, bit=14, token_pos=2, mode=MODE_SET)
    receipt = apply_fault(cache, coord)
    revert_fault(cache, receipt)
    assert cache.snapshot() == before


def test_apply_fault_single_word_locality():
    cache = _prefilled_demo_cache()
    before = np.frombuffer(cache.snapshot(), dtype=np.uint16).copy()
    coord = BitCoordinate(layer=0, head=1, channel=0, bit=14, token_pos=1, mode=MODE_XOR)
    apply_fault(cache, coord)
    after = np.frombuffer(cache.snapshot(), dtype=np.uint16)
    diff = np.nonzero(before != after)[0]
    assert len(diff) == 1
    from cachetrap.cache import V_TENSOR, word_offset

    assert diff[0] == word_offset(cache.config, 0, V_TENSOR, 1, 1, 0)


def test_apply_fault_out_of_bounds():
    cache = _prefilled_demo_cache()
    with pytest.raises(InjectionError):
        apply_fault(cache, BitCoordinate(layer=9, head=0, channel=0, bit=14))
    with pytest.raises(InjectionError):
        apply_fault(cache, BitCoordinate(layer=0, head=0, channel=0, bit=14, token_pos=99))
    with pytest.raises(InjectionError):
        apply_fault(cache, BitCoordinate(layer=0, head=0, channel=0, bit=31))


def test_last_prefix_resolves_to_filled_minus_one():
    cache = _prefilled_demo_cache()
    coord = BitCoordinate(layer=0, head=0, channel=1, bit=14, token_pos=LAST_PREFIX, mode=MODE_XOR)
    receipt = apply_fault(cache, coord)
    assert receipt.token == cache.filled_len - 1
