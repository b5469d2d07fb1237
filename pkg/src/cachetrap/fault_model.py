"""Software model of the spatial/directional fault-injection constraints.

The physical attack can only flip bits that currently read 0, and only
inside DRAM banks where flips were observed. This module models that as a
filter over a corruption map: coordinates are mapped to byte addresses with
the same formula the cache arena uses, attributed to banks through a
configurable XOR-fold, and checked for an initial-zero target bit over
sampled runtime cache words. Timing behavior (refresh windows, hammer
patterns, activation rates) is deliberately out of scope; feasibility here
is purely about where a coordinate lives and which way its bit would flip.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

from .bitflip import BitCoordinate, read_bit
from .cache import V_TENSOR, word_offset
from .config import ModelConfig
from .errors import AddressError, InputError
from .runtime import Model, prefill
from .search import ClassTrigger, CorruptionMap

REASON_BANK = "bank"
REASON_ROW = "row"
REASON_BIT = "bit_not_zero"

TRANSITION_ZERO_TO_ONE = "zero_to_one"
TRANSITION_ANY = "any"


@dataclass(frozen=True)
class MemoryLayoutModel:
    """Placement of the cache arena in the modeled physical address space."""

    arena_base: int = 0  # word offset of the arena

    def to_json(self) -> dict:
        return {"arena_base": self.arena_base}

    @classmethod
    def from_json(cls, obj: dict) -> "MemoryLayoutModel":
        return cls(arena_base=int(obj.get("arena_base", 0)))


def linear_address(
    coord: BitCoordinate, layout: MemoryLayoutModel, config: ModelConfig, filled_len: int | None = None
) -> tuple[int, int]:
    """(byte address, bit offset) of a coordinate's value word.

    ``filled_len`` resolves a last-prefix token position; pass it whenever
    the coordinate may carry the marker.
    """
    token = coord.token_pos
    if token < 0:
        if filled_len is None:
            raise AddressError("cannot address a last-prefix coordinate without a fill length")
        token = coord.resolve_token(filled_len)
    if not 0 <= coord.bit < config.word_bits:
        raise AddressError(f"bit {coord.bit} out of range for {config.cache_dtype}")
    offset = word_offset(config, coord.layer, V_TENSOR, coord.head, token, coord.channel)
    return (layout.arena_base + offset) * config.element_size, coord.bit


@dataclass(frozen=True)
class DramMapping:
    """Bank id = XOR-fold of address bit groups; row id = address >> row_shift.

    The default (4 banks over bits {13,16} and {14,17}) is structurally
    representative of reverse-engineered GDDR mappings, not any real part.
    """

    xor_groups: tuple[tuple[int, ...], ...] = ((13, 16), (14, 17))
    row_shift: int = 18

    def __post_init__(self):
        if not self.xor_groups:
            raise InputError("mapping needs at least one bank bit group")

    @property
    def bank_count(self) -> int:
        return 1 << len(self.xor_groups)

    def to_json(self) -> dict:
        return {"xor_groups": [list(g) for g in self.xor_groups], "row_shift": self.row_shift}

    @classmethod
    def from_json(cls, obj: dict) -> "DramMapping":
        return cls(
            xor_groups=tuple(tuple(int(b) for b in g) for g in obj["xor_groups"]),
            row_shift=int(obj.get("row_shift", 18)),
        )


def bank_of(address: int, mapping: DramMapping) -> int:
    bank = 0
    for i, group in enumerate(mapping.xor_groups):
        bit = 0
        for addr_bit in group:
            bit ^= (address >> addr_bit) & 1
        bank |= bit << i
    return bank


def row_of(address: int, mapping: DramMapping) -> int:
    return address >> mapping.row_shift


@dataclass(frozen=True)
class FeasibilityConstraint:
    """Which transitions, banks, and optionally rows the hardware can hit."""

    transition: str = TRANSITION_ZERO_TO_ONE
    allowed_banks: frozenset = frozenset({0})
    allowed_rows: frozenset | None = None

    def __post_init__(self):
        if self.transition not in (TRANSITION_ZERO_TO_ONE, TRANSITION_ANY):
            raise InputError(f"unknown transition constraint {self.transition!r}")
        if not self.allowed_banks:
            raise InputError("allowed bank set must be non-empty")

    def to_json(self) -> dict:
        return {
            "transition": self.transition,
            "allowed_banks": sorted(self.allowed_banks),
            "allowed_rows": None if self.allowed_rows is None else sorted(self.allowed_rows),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "FeasibilityConstraint":
        rows = obj.get("allowed_rows")
        return cls(
            transition=obj.get("transition", TRANSITION_ZERO_TO_ONE),
            allowed_banks=frozenset(int(b) for b in obj["allowed_banks"]),
            allowed_rows=None if rows is None else frozenset(int(r) for r in rows),
        )


@dataclass
class CoordinateVerdict:
    coordinate: BitCoordinate
    asr: float
    byte_address: int
    bank: int
    row: int
    zero_fraction: float | None
    accepted: bool
    reason: str | None

    def to_json(self) -> dict:
        return {
            "coordinate": self.coordinate.to_json(),
            "asr": self.asr,
            "byte_address": self.byte_address,
            "bank": self.bank,
            "row": self.row,
            "zero_fraction": self.zero_fraction,
            "accepted": self.accepted,
            "reason": self.reason,
        }


@dataclass
class ClassFeasibility:
    target_class: int
    feasible: bool
    primary: BitCoordinate | None
    fallbacks: list[BitCoordinate]
    verdicts: list[CoordinateVerdict]

    def to_json(self) -> dict:
        return {
            "class": self.target_class,
            "feasible": self.feasible,
            "primary": None if self.primary is None else self.primary.to_json(),
            "fallbacks": [c.to_json() for c in self.fallbacks],
            "verdicts": [v.to_json() for v in self.verdicts],
        }


@dataclass
class FeasibilityReport:
    rho: float
    classes: list[ClassFeasibility]

    @property
    def all_feasible(self) -> bool:
        return all(c.feasible for c in self.classes)

    def to_json(self) -> dict:
        return {
            "kind": "feasibility",
            "rho": self.rho,
            "all_feasible": self.all_feasible,
            "classes": [c.to_json() for c in self.classes],
        }


WordSampler = Callable[[BitCoordinate], "list[int]"]


def make_cache_word_sampler(model: Model, prompts) -> WordSampler:
    """Sampler reading a coordinate's stored word across calibration prefills.

    The attacker cannot see victim cache contents, so the initial-bit-zero
    check is a rate over representative runs, not a per-inference promise.
    """
    caches = [prefill(model, p.prefix)[0] for p in prompts]

    def sample(coord: BitCoordinate) -> list[int]:
        words = []
        for cache in caches:
            token = coord.resolve_token(cache.filled_len)
            words.append(cache.read_word(coord.layer, V_TENSOR, coord.head, token, coord.channel))
        return words

    return sample


def filter_feasible(
    corruption_map: CorruptionMap,
    sampler: WordSampler,
    constraint: FeasibilityConstraint,
    layout: MemoryLayoutModel,
    mapping: DramMapping,
    config: ModelConfig,
    filled_len_hint: int | None = None,
    rho: float = 0.95,
) -> tuple[CorruptionMap, FeasibilityReport]:
    """Walk each class's ranked candidates and keep the physically plausible ones.

    Survivor order never changes relative to the input ASR ranking: the
    first survivor becomes the class's primary and the rest stay fallbacks.
    A class with no survivor is reported infeasible, not raised.

    ``filled_len_hint`` fixes the token position used for addressing
    last-prefix coordinates (default: the model's last usable prefix slot).
    """
    if not corruption_map.complete:
        raise InputError("feasibility filtering requires a complete corruption map")
    if not 0 < rho <= 1:
        raise InputError("rho must be in (0, 1]")
    if filled_len_hint is None:
        filled_len_hint = config.max_seq - 1

    new_triggers = []
    classes = []
    for trigger in corruption_map.triggers:
        verdicts = []
        survivors: list[tuple[BitCoordinate, float]] = []
        for coord, asr in trigger.ranked:
            byte_addr, _ = linear_address(coord, layout, config, filled_len=filled_len_hint)
            bank = bank_of(byte_addr, mapping)
            row = row_of(byte_addr, mapping)
            zero_fraction = None
            accepted, reason = True, None
            if bank not in constraint.allowed_banks:
                accepted, reason = False, REASON_BANK
            elif constraint.allowed_rows is not None and row not in constraint.allowed_rows:
                accepted, reason = False, REASON_ROW
            elif constraint.transition == TRANSITION_ZERO_TO_ONE:
                words = sampler(coord)
                if not words:
                    raise InputError("sampler returned no words")
                zeros = sum(1 for w in words if read_bit(w, coord.bit, width=config.word_bits) == 0)
                zero_fraction = zeros / len(words)
                if zero_fraction < rho:
                    accepted, reason = False, REASON_BIT
            verdicts.append(
                CoordinateVerdict(
                    coordinate=coord,
                    asr=asr,
                    byte_address=byte_addr,
                    bank=bank,
                    row=row,
                    zero_fraction=zero_fraction,
                    accepted=accepted,
                    reason=reason,
                )
            )
            if accepted:
                survivors.append((coord, asr))

        feasible = bool(survivors)
        classes.append(
            ClassFeasibility(
                target_class=trigger.target_class,
                feasible=feasible,
                primary=survivors[0][0] if feasible else None,
                fallbacks=[c for c, _ in survivors[1:]],
                verdicts=verdicts,
            )
        )
        if feasible:
            new_triggers.append(
                ClassTrigger(
                    target_class=trigger.target_class,
                    coordinate=survivors[0][0],
                    asr=survivors[0][1],
                    ranked=survivors,
                )
            )
        else:
            new_triggers.append(
                ClassTrigger(
                    target_class=trigger.target_class,
                    coordinate=trigger.coordinate,
                    asr=trigger.asr,
                    ranked=[],
                )
            )

    infeasible = [c.target_class for c in classes if not c.feasible]
    filtered = CorruptionMap(
        triggers=new_triggers,
        tau=corruption_map.tau,
        complete=corruption_map.complete and not infeasible,
        failing_classes=sorted(set(corruption_map.failing_classes) | set(infeasible)),
    )
    return filtered, FeasibilityReport(rho=rho, classes=classes)
