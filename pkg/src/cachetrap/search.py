"""Three-stage gradient-free search for single-bit value-cache triggers.

Stage 1 screens layers by how much each block shifts the pooled standard
deviation of its hidden states. Stage 2 ranks head-channel coordinates
inside the surviving layers by the l2 magnitude of their cached value
entries at the selected token position. Stage 3 flips every candidate bit
over the calibration set and keeps, per target class, the coordinates whose
attack success rate clears the threshold.

Layer numbering: sensitivity scores and layer subsets use 1-based *block*
ids (block b maps hidden state b-1 to b); bit coordinates use the 0-based
cache layer index, which is always block - 1.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from itertools import product

import numpy as np

from .bitflip import (
    LAST_PREFIX,
    MODE_SET,
    MODES,
    BitCoordinate,
    BitPolicy,
    revert_fault,
)
from .cache import V_TENSOR
from .data import Prompt, Verbalizer
from .errors import GuardError, InputError, UndefinedPredictionError
from .runtime import FaultHook, HiddenTrace, Model, decode_classify, prefill


# -- stage 1: layer sensitivity ----------------------------------------------


@dataclass(frozen=True)
class LSSEntry:
    block: int
    score: float


@dataclass
class LSSReport:
    """Per-block sensitivity scores plus the pooled population counts."""

    entries: list[LSSEntry]
    sample_count: int
    token_count: int

    @property
    def scores(self) -> list[float]:
        return [e.score for e in self.entries]

    def to_json(self) -> dict:
        return {
            "kind": "lss_report",
            "entries": [{"block": e.block, "score": e.score} for e in self.entries],
            "sample_count": self.sample_count,
            "token_count": self.token_count,
        }


@dataclass(frozen=True)
class LayerSubset:
    """Block ids ordered by descending sensitivity, ties toward lower blocks."""

    blocks: tuple[int, ...]

    def to_json(self) -> list[int]:
        return list(self.blocks)


def pooled_std(chunks: list[np.ndarray]) -> float:
    """Population standard deviation pooled over all entries of all chunks.

    Cross-chunk reductions use exact summation, so the result is invariant
    under permutation of the chunk list.
    """
    count = sum(int(c.size) for c in chunks)
    if count == 0:
        raise InputError("cannot pool an empty trace")
    total = math.fsum(float(np.sum(c, dtype=np.float64)) for c in chunks)
    mean = total / count
    sq = math.fsum(float(np.sum(np.square(c.astype(np.float64) - mean))) for c in chunks)
    return math.sqrt(sq / count)


def lss_from_traces(traces: list[HiddenTrace]) -> LSSReport:
    if not traces:
        raise InputError("no traces to score")
    n_layers = len(traces[0].layers) - 1
    sigmas = [pooled_std([t.layers[i] for t in traces]) for i in range(n_layers + 1)]
    entries = [
        LSSEntry(block=b, score=abs(sigmas[b] - sigmas[b - 1])) for b in range(1, n_layers + 1)
    ]
    tokens = sum(t.layers[0].shape[0] for t in traces)
    return LSSReport(entries=entries, sample_count=len(traces), token_count=tokens)


def compute_lss(model: Model, prompts: list[Prompt]) -> LSSReport:
    """Sensitivity scores from prefilling every calibration prefix."""
    if not prompts:
        raise InputError("calibration set is empty")
    traces = []
    for p in prompts:
        _, trace = prefill(model, p.prefix)
        traces.append(trace)
    return lss_from_traces(traces)


def select_sensitive_layers(report: LSSReport, m: int) -> LayerSubset:
    n = len(report.entries)
    if not 1 <= m <= n:
        raise InputError(f"subset size {m} must be in 1..{n}")
    ranked = sorted(report.entries, key=lambda e: (-e.score, e.block))
    return LayerSubset(blocks=tuple(e.block for e in ranked[:m]))


# -- stage 2: cache vulnerability ---------------------------------------------


@dataclass(frozen=True)
class TokenSelector:
    """Which cached prefix positions to read; None means the last prefix token."""

    positions: tuple[int, ...] | None = None

    def resolve(self, prefix_len: int) -> list[int]:
        if self.positions is None:
            return [prefix_len - 1]
        bad = [p for p in self.positions if not 0 <= p < prefix_len]
        if bad:
            raise InputError(f"selector positions {bad} not cached (prefix length {prefix_len})")
        return list(self.positions)

    def to_json(self):
        return "last_prefix" if self.positions is None else list(self.positions)

    @classmethod
    def from_json(cls, obj) -> "TokenSelector":
        if obj == "last_prefix" or obj is None:
            return cls()
        return cls(positions=tuple(int(p) for p in obj))


@dataclass
class CVSTable:
    """l2 response magnitude per (block, head, channel) over the calibration set."""

    scores: dict[tuple[int, int, int], float]
    blocks: tuple[int, ...]
    n_kv_heads: int
    head_dim: int

    def to_json(self) -> dict:
        return {
            "kind": "cvs_table",
            "blocks": list(self.blocks),
            "cells": [
                {"block": b, "head": h, "channel": j, "score": s}
                for (b, h, j), s in self.scores.items()
            ],
        }


def cvs_from_entries(entries) -> float:
    """l2 norm of per-sample value entries, with exact cross-sample summation."""
    sq = math.fsum(float(x) * float(x) for x in entries)
    return math.sqrt(sq)


def cvs_from_caches(
    config,
    caches,
    subset: LayerSubset,
    selector: TokenSelector = TokenSelector(),
) -> CVSTable:
    """Score value channels from already-filled caches.

    Entries are read back from the cache in the cache dtype, so the ranking
    reflects exactly the words a fault would corrupt.
    """
    if not caches:
        raise InputError("no caches to score")
    for b in subset.blocks:
        if not 1 <= b <= config.n_layers:
            raise InputError(f"block {b} outside 1..{config.n_layers}")

    # collected[block] has shape [n_entries, n_kv_heads, head_dim]
    collected: dict[int, list[np.ndarray]] = {b: [] for b in subset.blocks}
    for cache in caches:
        positions = selector.resolve(cache.filled_len)
        for b in subset.blocks:
            vals = cache.load_block(b - 1, V_TENSOR, cache.filled_len)[:, positions, :]
            collected[b].append(np.ascontiguousarray(vals.transpose(1, 0, 2)))

    scores: dict[tuple[int, int, int], float] = {}
    for b in subset.blocks:
        stacked = np.concatenate(collected[b], axis=0).astype(np.float64)
        for h in range(config.n_kv_heads):
            for j in range(config.head_dim):
                scores[(b, h, j)] = cvs_from_entries(stacked[:, h, j])
    return CVSTable(
        scores=scores, blocks=subset.blocks, n_kv_heads=config.n_kv_heads, head_dim=config.head_dim
    )


def compute_cvs(
    model: Model,
    prompts: list[Prompt],
    subset: LayerSubset,
    selector: TokenSelector = TokenSelector(),
) -> CVSTable:
    """Rank value channels by cached-entry magnitude at the selected positions."""
    if not prompts:
        raise InputError("calibration set is empty")
    caches = []
    for p in prompts:
        if len(p.prefix) == 0:
            raise InputError("prompt has an empty prefix after the decode split")
        caches.append(prefill(model, p.prefix)[0])
    return cvs_from_caches(model.config, caches, subset, selector)


# -- stage 3: candidates, calibration, and the corruption map -----------------


@dataclass
class CandidateSet:
    """Top-k head-channel pairs per block, expanded into concrete bit coordinates."""

    selections: dict[int, list[tuple[int, int, float]]]
    coordinates: list[BitCoordinate]

    def to_json(self) -> dict:
        return {
            "kind": "candidate_set",
            "selections": {
                str(b): [{"head": h, "channel": j, "score": s} for h, j, s in sel]
                for b, sel in self.selections.items()
            },
            "coordinates": [c.to_json() for c in self.coordinates],
        }


def select_topk(table: CVSTable, k: int, policy: BitPolicy, mode: str = MODE_SET) -> CandidateSet:
    """Largest-scoring (head, channel) pairs per block, ties lexicographic."""
    if k < 1:
        raise InputError("k must be at least 1")
    if mode not in MODES:
        raise InputError(f"unknown injection mode {mode!r}")
    selections: dict[int, list[tuple[int, int, float]]] = {}
    coords: list[BitCoordinate] = []
    for b in table.blocks:
        pairs = [
            (h, j, table.scores[(b, h, j)])
            for h in range(table.n_kv_heads)
            for j in range(table.head_dim)
        ]
        pairs.sort(key=lambda p: (-p[2], p[0], p[1]))
        chosen = pairs[:k]
        selections[b] = chosen
        for h, j, _ in chosen:
            for bit in policy.bits:
                coords.append(
                    BitCoordinate(
                        layer=b - 1, head=h, channel=j, bit=bit, token_pos=LAST_PREFIX, mode=mode
                    )
                )
    return CandidateSet(selections=selections, coordinates=coords)


@dataclass
class AsrCell:
    """Outcome tallies for one coordinate over the whole calibration set."""

    coordinate: BitCoordinate
    counts: list[int]
    undefined_count: int
    noop_count: int
    n_samples: int

    def rate(self, c: int) -> float:
        return self.counts[c] / self.n_samples

    @property
    def rates(self) -> list[float]:
        return [c / self.n_samples for c in self.counts]

    def to_json(self) -> dict:
        return {
            "coordinate": self.coordinate.to_json(),
            "counts": list(self.counts),
            "rates": self.rates,
            "undefined_count": self.undefined_count,
            "noop_count": self.noop_count,
            "n_samples": self.n_samples,
        }


@dataclass
class ASRMatrix:
    cells: list[AsrCell]
    n_classes: int

    def cell(self, coord: BitCoordinate) -> AsrCell:
        for c in self.cells:
            if c.coordinate == coord:
                return c
        raise KeyError(coord)

    def to_json(self) -> dict:
        return {
            "kind": "asr_matrix",
            "n_classes": self.n_classes,
            "cells": [c.to_json() for c in self.cells],
        }


def worker_count() -> int:
    raw = os.environ.get("CACHETRAP_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def _tally_chunk(model, prompts, coords, verbalizer, n_classes):
    counts = np.zeros((len(coords), n_classes), dtype=np.int64)
    undefined = np.zeros(len(coords), dtype=np.int64)
    noop = np.zeros(len(coords), dtype=np.int64)
    for p in prompts:
        cache, _ = prefill(model, p.prefix)
        for ci, coord in enumerate(coords):
            hook = FaultHook(coordinate=coord, armed=True)
            try:
                pred, _ = decode_classify(model, cache, p.cue, verbalizer, hook)
                counts[ci, pred] += 1
            except UndefinedPredictionError:
                undefined[ci] += 1
            finally:
                if hook.last_receipt is not None:
                    revert_fault(cache, hook.last_receipt)
            if hook.last_receipt is not None and not hook.last_receipt.changed:
                noop[ci] += 1
    return counts, undefined, noop


def _evaluate_coordinates(
    model: Model,
    prompts: list[Prompt],
    coords: list[BitCoordinate],
    verbalizer: Verbalizer,
    workers: int | None = None,
) -> ASRMatrix:
    """Shared per-(coordinate, sample) evaluation path.

    Prefill once per sample; for each coordinate apply the fault, decode,
    and revert. Tallies are integers, so merging parallel chunks in any
    order yields identical results.
    """
    n_classes = verbalizer.n_classes
    if workers is None:
        workers = worker_count()

    if workers > 1 and len(prompts) > 1:
        from concurrent.futures import ProcessPoolExecutor

        chunks = [prompts[i::workers] for i in range(workers)]
        chunks = [c for c in chunks if c]
        with ProcessPoolExecutor(max_workers=len(chunks)) as pool:
            parts = list(
                pool.map(
                    _tally_star,
                    [(model, chunk, coords, verbalizer, n_classes) for chunk in chunks],
                )
            )
        counts = sum(p[0] for p in parts)
        undefined = sum(p[1] for p in parts)
        noop = sum(p[2] for p in parts)
    else:
        counts, undefined, noop = _tally_chunk(model, prompts, coords, verbalizer, n_classes)

    cells = [
        AsrCell(
            coordinate=coord,
            counts=[int(x) for x in counts[ci]],
            undefined_count=int(undefined[ci]),
            noop_count=int(noop[ci]),
            n_samples=len(prompts),
        )
        for ci, coord in enumerate(coords)
    ]
    return ASRMatrix(cells=cells, n_classes=n_classes)


def _tally_star(args):
    return _tally_chunk(*args)


def calibrate_asr(
    model: Model,
    prompts: list[Prompt],
    candidates: CandidateSet,
    verbalizer: Verbalizer,
    workers: int | None = None,
) -> ASRMatrix:
    """Per-class forced-prediction rates for every candidate coordinate."""
    if not candidates.coordinates:
        raise InputError("candidate set is empty")
    return _evaluate_coordinates(model, prompts, candidates.coordinates, verbalizer, workers)


@dataclass
class ClassTrigger:
    target_class: int
    coordinate: BitCoordinate
    asr: float
    ranked: list[tuple[BitCoordinate, float]]

    def to_json(self) -> dict:
        return {
            "class": self.target_class,
            "coordinate": self.coordinate.to_json(),
            "asr": self.asr,
            "ranked_candidates": [
                {"coordinate": c.to_json(), "asr": r} for c, r in self.ranked
            ],
        }


@dataclass
class CorruptionMap:
    """Per-class chosen trigger coordinate plus the ranked fallback list."""

    triggers: list[ClassTrigger]
    tau: float
    complete: bool
    failing_classes: list[int]

    def trigger_for(self, target_class: int) -> ClassTrigger:
        for t in self.triggers:
            if t.target_class == target_class:
                return t
        raise KeyError(target_class)

    def to_json(self) -> dict:
        return {
            "kind": "corruption_map",
            "tau": self.tau,
            "complete": self.complete,
            "failing_classes": list(self.failing_classes),
            "classes": [t.to_json() for t in self.triggers],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "CorruptionMap":
        triggers = []
        for entry in obj["classes"]:
            triggers.append(
                ClassTrigger(
                    target_class=int(entry["class"]),
                    coordinate=BitCoordinate.from_json(entry["coordinate"]),
                    asr=float(entry["asr"]),
                    ranked=[
                        (BitCoordinate.from_json(e["coordinate"]), float(e["asr"]))
                        for e in entry["ranked_candidates"]
                    ],
                )
            )
        return cls(
            triggers=triggers,
            tau=float(obj["tau"]),
            complete=bool(obj["complete"]),
            failing_classes=[int(c) for c in obj["failing_classes"]],
        )


def build_corruption_map(matrix: ASRMatrix, tau: float) -> CorruptionMap:
    """Argmax coordinate per class; fallbacks are every coordinate at or above tau."""
    if not matrix.cells:
        raise InputError("ASR matrix is empty")
    triggers = []
    failing = []
    for c in range(matrix.n_classes):
        best = min(matrix.cells, key=lambda cell: (-cell.rate(c), cell.coordinate))
        ranked = sorted(
            ((cell.coordinate, cell.rate(c)) for cell in matrix.cells if cell.rate(c) >= tau),
            key=lambda item: (-item[1], item[0]),
        )
        if best.rate(c) < tau:
            failing.append(c)
        triggers.append(
            ClassTrigger(
                target_class=c, coordinate=best.coordinate, asr=best.rate(c), ranked=ranked
            )
        )
    return CorruptionMap(
        triggers=triggers, tau=tau, complete=not failing, failing_classes=failing
    )


# -- exhaustive oracle ---------------------------------------------------------


@dataclass(frozen=True)
class OracleScope:
    """Explicit coordinate ranges for brute-force enumeration (0-based layers)."""

    layers: tuple[int, ...]
    heads: tuple[int, ...]
    channels: tuple[int, ...]
    bits: tuple[int, ...]
    mode: str = MODE_SET

    def coordinates(self) -> list[BitCoordinate]:
        return [
            BitCoordinate(layer=l, head=h, channel=j, bit=b, token_pos=LAST_PREFIX, mode=self.mode)
            for l, h, j, b in product(self.layers, self.heads, self.channels, self.bits)
        ]


EVALUATION_GUARD = 100_000


def exhaustive_search_oracle(
    model: Model,
    prompts: list[Prompt],
    scope,
    verbalizer: Verbalizer,
    guard: int = EVALUATION_GUARD,
) -> ASRMatrix:
    """Brute-force ASR over an explicit scope, on the same path as calibration.

    ``scope`` is an OracleScope or a plain list of coordinates. The guard
    bounds coordinate x sample evaluations.
    """
    coords = scope.coordinates() if isinstance(scope, OracleScope) else list(scope)
    cost = len(coords) * len(prompts)
    if cost > guard:
        raise GuardError(f"scope needs {cost} evaluations, guard is {guard}")
    if not coords:
        return ASRMatrix(cells=[], n_classes=verbalizer.n_classes)
    return _evaluate_coordinates(model, prompts, coords, verbalizer)


# -- end-to-end pipeline -------------------------------------------------------


@dataclass
class SearchConfig:
    """Knobs of the end-to-end search."""

    m: int = 5
    k: int = 32
    tau: float = 0.95
    n_calib: int = 50
    seed: int = 0
    policy: BitPolicy | None = None
    selector: TokenSelector = field(default_factory=TokenSelector)
    mode: str = MODE_SET

    def __post_init__(self):
        if self.m < 1:
            raise InputError("m must be at least 1")
        if self.k < 1:
            raise InputError("k must be at least 1")
        # tau > 1 is allowed as an intentionally unreachable threshold.
        if not self.tau > 0:
            raise InputError("tau must be positive")
        if self.n_calib < 1:
            raise InputError("calibration sample count must be at least 1")
        if self.mode not in MODES:
            raise InputError(f"unknown injection mode {self.mode!r}")

    def resolved_policy(self, cache_dtype: str) -> BitPolicy:
        if self.policy is not None:
            self.policy.validate_for(cache_dtype)
            return self.policy
        return BitPolicy.default_for(cache_dtype)

    def to_json(self) -> dict:
        return {
            "m": self.m,
            "k": self.k,
            "tau": self.tau,
            "n_calib": self.n_calib,
            "seed": self.seed,
            "policy": None if self.policy is None else self.policy.to_json(),
            "token_selector": self.selector.to_json(),
            "mode": self.mode,
        }


@dataclass
class SearchResult:
    lss: LSSReport
    subset: LayerSubset
    cvs: CVSTable
    candidates: CandidateSet
    matrix: ASRMatrix
    corruption_map: CorruptionMap


def run_search(
    model: Model,
    prompts: list[Prompt],
    config: SearchConfig,
    verbalizer: Verbalizer,
    workers: int | None = None,
) -> SearchResult:
    """LSS screening -> CVS ranking -> top-k -> ASR calibration -> corruption map."""
    policy = config.resolved_policy(model.config.cache_dtype)
    lss = compute_lss(model, prompts)
    subset = select_sensitive_layers(lss, config.m)
    cvs = compute_cvs(model, prompts, subset, config.selector)
    candidates = select_topk(cvs, config.k, policy, config.mode)
    matrix = calibrate_asr(model, prompts, candidates, verbalizer, workers)
    corruption_map = build_corruption_map(matrix, config.tau)
    return SearchResult(
        lss=lss,
        subset=subset,
        cvs=cvs,
        candidates=candidates,
        matrix=matrix,
        corruption_map=corruption_map,
    )
