"""Bit-exact manipulation of cached value words.

Bit indices are 0-based from the LSB of the little-endian stored word
(fp16: 0..15, fp32: 0..31). That numbering is used everywhere: policies,
coordinates, receipts, and reports.

Fault injection targets the V tensor only; K words are never addressed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cache import KVCache, V_TENSOR
from .errors import InjectionError, InputError

MODE_XOR = "xor"
MODE_SET = "set_to_one"
MODES = (MODE_XOR, MODE_SET)

#: Marker token position: resolve to the last cached prefix token at apply time.
LAST_PREFIX = -1

TRANSITION_ZERO_TO_ONE = "zero_to_one"
TRANSITION_ONE_TO_ZERO = "one_to_zero"
TRANSITION_NONE = "none"

# Exponent bits, most significant first.
DEFAULT_BITS_FP16 = (14, 13, 12, 11, 10)
DEFAULT_BITS_FP32 = (30, 29, 28, 27, 26, 25, 24, 23)


def _width_for(dtype: str) -> int:
    if dtype == "fp16":
        return 16
    if dtype == "fp32":
        return 32
    raise InputError(f"unknown cache dtype {dtype!r}")


def flip_bit(word: int, b: int, mode: str, width: int = 16) -> int:
    """Flip or set bit ``b`` of a raw word; no other bit changes."""
    if not 0 <= b < width:
        raise InputError(f"bit index {b} out of range for a {width}-bit word")
    if mode == MODE_XOR:
        return word ^ (1 << b)
    if mode == MODE_SET:
        return word | (1 << b)
    raise InputError(f"unknown injection mode {mode!r}")


def read_bit(word: int, b: int, width: int = 16) -> int:
    if not 0 <= b < width:
        raise InputError(f"bit index {b} out of range for a {width}-bit word")
    return (word >> b) & 1


def word_is_finite(word: int, dtype: str) -> bool:
    if dtype == "fp16":
        value = np.asarray([word], dtype=np.uint16).view(np.float16)[0]
    else:
        value = np.asarray([word], dtype=np.uint32).view(np.float32)[0]
    return bool(np.isfinite(value))


@dataclass(frozen=True, order=True)
class BitCoordinate:
    """Fully qualified flip target inside the value cache.

    ``token_pos`` is either an absolute cached position or ``LAST_PREFIX``,
    resolved against ``filled_len`` when the fault is applied. Field order
    defines the deterministic tie-break ordering used by the search.
    """

    layer: int
    head: int
    channel: int
    bit: int
    token_pos: int = LAST_PREFIX
    mode: str = MODE_SET

    def resolve_token(self, filled_len: int) -> int:
        if self.token_pos == LAST_PREFIX:
            return filled_len - 1
        return self.token_pos

    def to_json(self) -> dict:
        return {
            "layer": self.layer,
            "head": self.head,
            "channel": self.channel,
            "bit": self.bit,
            "token_pos": "last_prefix" if self.token_pos == LAST_PREFIX else self.token_pos,
            "mode": self.mode,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "BitCoordinate":
        pos = obj["token_pos"]
        return cls(
            layer=int(obj["layer"]),
            head=int(obj["head"]),
            channel=int(obj["channel"]),
            bit=int(obj["bit"]),
            token_pos=LAST_PREFIX if pos == "last_prefix" else int(pos),
            mode=str(obj["mode"]),
        )


@dataclass(frozen=True)
class FaultReceipt:
    """Exact record of one applied fault, sufficient to revert it."""

    coordinate: BitCoordinate
    token: int
    old_word: int
    new_word: int

    @property
    def changed(self) -> bool:
        return self.old_word != self.new_word

    @property
    def transition(self) -> str:
        old = read_bit(self.old_word, self.coordinate.bit, width=32)
        new = read_bit(self.new_word, self.coordinate.bit, width=32)
        if old == new:
            return TRANSITION_NONE
        return TRANSITION_ZERO_TO_ONE if new == 1 else TRANSITION_ONE_TO_ZERO

    def to_json(self) -> dict:
        return {
            "coordinate": self.coordinate.to_json(),
            "token": self.token,
            "old_word": self.old_word,
            "new_word": self.new_word,
            "changed": self.changed,
            "transition": self.transition,
        }


@dataclass(frozen=True)
class BitPolicy:
    """Ordered bit indices to consider when expanding a head-channel candidate."""

    bits: tuple[int, ...] = DEFAULT_BITS_FP16
    finite_guard: bool = True

    def __post_init__(self):
        if not self.bits:
            raise InputError("bit policy must list at least one bit")

    def validate_for(self, dtype: str) -> None:
        width = _width_for(dtype)
        for b in self.bits:
            if not 0 <= b < width:
                raise InputError(f"policy bit {b} invalid for {dtype}")

    @classmethod
    def default_for(cls, dtype: str, finite_guard: bool = True) -> "BitPolicy":
        bits = DEFAULT_BITS_FP16 if dtype == "fp16" else DEFAULT_BITS_FP32
        return cls(bits=bits, finite_guard=finite_guard)

    def to_json(self) -> dict:
        return {"bits": list(self.bits), "finite_guard": self.finite_guard}

    @classmethod
    def from_json(cls, obj: dict) -> "BitPolicy":
        return cls(bits=tuple(int(b) for b in obj["bits"]), finite_guard=bool(obj["finite_guard"]))


def candidate_bits(word: int, policy: BitPolicy, dtype: str) -> list[int]:
    """Policy bits whose current state is 0, optionally skipping non-finite outcomes.

    Matches the hardware constraint that only 0-valued bits can be flipped;
    with the finite guard on, bits whose set-to-one result is inf/NaN are
    dropped because they yield undefined rather than targeted predictions.
    """
    policy.validate_for(dtype)
    width = _width_for(dtype)
    out = []
    for b in policy.bits:
        if read_bit(word, b, width) != 0:
            continue
        if policy.finite_guard and not word_is_finite(flip_bit(word, b, MODE_SET, width), dtype):
            continue
        out.append(b)
    return out


def apply_fault(cache: KVCache, coord: BitCoordinate) -> FaultReceipt:
    """Mutate exactly one value word of the cache per the coordinate's mode."""
    cfg = cache.config
    token = coord.resolve_token(cache.filled_len)
    if not 0 <= token < cache.filled_len:
        raise InjectionError(f"token position {token} not cached (filled_len={cache.filled_len})")
    if not 0 <= coord.layer < cfg.n_layers:
        raise InjectionError(f"layer {coord.layer} out of range")
    if not 0 <= coord.head < cfg.n_kv_heads:
        raise InjectionError(f"head {coord.head} out of range")
    if not 0 <= coord.channel < cfg.head_dim:
        raise InjectionError(f"channel {coord.channel} out of range")
    if not 0 <= coord.bit < cfg.word_bits:
        raise InjectionError(f"bit {coord.bit} out of range for {cfg.cache_dtype}")
    if coord.mode not in MODES:
        raise InjectionError(f"unknown injection mode {coord.mode!r}")

    old = cache.read_word(coord.layer, V_TENSOR, coord.head, token, coord.channel)
    new = flip_bit(old, coord.bit, coord.mode, width=cfg.word_bits)
    if new != old:
        cache.write_word(coord.layer, V_TENSOR, coord.head, token, coord.channel, new)
    return FaultReceipt(coordinate=coord, token=token, old_word=old, new_word=new)


def revert_fault(cache: KVCache, receipt: FaultReceipt) -> None:
    """Restore the word recorded in the receipt."""
    coord = receipt.coordinate
    cache.write_word(coord.layer, V_TENSOR, coord.head, receipt.token, coord.channel, receipt.old_word)
