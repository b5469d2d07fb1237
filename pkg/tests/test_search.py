from __future__ import annotations

import numpy as np
import pytest

from cachetrap import (
    BitCoordinate,
    BitPolicy,
    OracleScope,
    SearchConfig,
    build_corruption_map,
    calibrate_asr,
    compute_cvs,
    compute_lss,
    decode_classify,
    exhaustive_search_oracle,
    prefill,
    run_search,
    select_sensitive_layers,
    select_topk,
)
from cachetrap.bitflip import LAST_PREFIX, MODE_SET
from cachetrap.cache import V_TENSOR
from cachetrap.errors import GuardError, InputError
from cachetrap.runtime import HiddenTrace, Model
from cachetrap.search import (
    ASRMatrix,
    AsrCell,
    LayerSubset,
    CVSTable,
    LSSEntry,
    LSSReport,
    TokenSelector,
    cvs_from_caches,
    cvs_from_entries,
    lss_from_traces,
    pooled_std,
)


# -- stage 1 -------------------------------------------------------------------


def test_lss_injected_trace_unit_values():
    h0 = np.array([[1.0, -1.0]], dtype=np.float32)
    h1 = np.array([[3.0, -3.0]], dtype=np.float32)
    report = lss_from_traces([HiddenTrace(layers=[h0, h1])])
    assert report.entries[0].score == pytest.approx(2.0, abs=1e-12)


def test_lss_identity_block_scores_zero(tiny_config):
    """All-zero weights make every block residual-only, so scores vanish."""
    from cachetrap.runtime import tensor_names, tensor_shape

    tensors = {
        name: np.zeros(tensor_shape(tiny_config, name), dtype=np.float32)
        for name in tensor_names(tiny_config)
    }
    model = Model(config=tiny_config, tensors=tensors)
    prompts = _token_prompts([[1, 2, 3], [4, 5]])
    report = compute_lss(model, prompts)
    assert all(e.score == 0.0 for e in report.entries)


def _token_prompts(token_lists, cue=15):
    from cachetrap.data import Prompt

    return [Prompt(prefix=tuple(toks), cue=cue, label=0) for toks in token_lists]


def test_lss_matches_two_pass_reference(tiny_model):
    """Engine scores equal an independent pooled-std computation."""
    prompts = _token_prompts([[1, 2, 3, 4], [7, 8], [9, 10, 11], [12, 3], [5, 5, 5], [0, 1], [14, 2, 6], [4, 4]])
    report = compute_lss(tiny_model, prompts)

    traces = [prefill(tiny_model, p.prefix)[1] for p in prompts]
    n_layers = tiny_model.config.n_layers
    for block in range(1, n_layers + 1):
        prev = np.concatenate([t.layers[block - 1].reshape(-1) for t in traces]).astype(np.float64)
        cur = np.concatenate([t.layers[block].reshape(-1) for t in traces]).astype(np.float64)
        expected = abs(float(np.std(cur)) - float(np.std(prev)))
        assert report.entries[block - 1].score == pytest.approx(expected, abs=1e-6)


def test_lss_invariant_under_sample_permutation(tiny_model):
    prompts = _token_prompts([[1, 2, 3], [4, 5, 6, 7], [8], [9, 10]])
    fwd = compute_lss(tiny_model, prompts)
    rev = compute_lss(tiny_model, list(reversed(prompts)))
    assert fwd.scores == rev.scores


def test_pooled_std_rejects_empty():
    with pytest.raises(InputError):
        pooled_std([])


def test_select_sensitive_layers_ordering():
    report = LSSReport(
        entries=[LSSEntry(1, 0.1), LSSEntry(2, 0.9), LSSEntry(3, 0.5)],
        sample_count=1,
        token_count=1,
    )
    assert select_sensitive_layers(report, 2).blocks == (2, 3)
    assert select_sensitive_layers(report, 3).blocks == (2, 3, 1)


def test_select_sensitive_layers_tie_rule():
    report = LSSReport(
        entries=[LSSEntry(1, 0.5), LSSEntry(2, 0.5), LSSEntry(3, 0.5)],
        sample_count=1,
        token_count=1,
    )
    assert select_sensitive_layers(report, 2).blocks == (1, 2)


def test_select_sensitive_layers_bounds():
    report = LSSReport(entries=[LSSEntry(1, 0.5)], sample_count=1, token_count=1)
    with pytest.raises(InputError):
        select_sensitive_layers(report, 2)
    with pytest.raises(InputError):
        select_sensitive_layers(report, 0)


# -- stage 2 -------------------------------------------------------------------


def test_cvs_unit_values():
    assert cvs_from_entries([3.0, 4.0]) == pytest.approx(5.0, abs=1e-12)
    assert cvs_from_entries([-2.5]) == pytest.approx(2.5, abs=1e-12)
    assert cvs_from_entries([0.0, 0.0, 0.0]) == 0.0


def test_cvs_single_sample_is_abs_value(demo_model, probe_prompts_a):
    table = compute_cvs(demo_model, probe_prompts_a[:1], LayerSubset(blocks=(1,)))
    # The class-0 target channel stores exactly 0.125 at every position.
    assert table.scores[(1, 0, 1)] == pytest.approx(0.125, abs=1e-12)


def test_cvs_constant_channel_scales_with_sqrt_n(demo_model, probe_prompts_a):
    table = compute_cvs(demo_model, probe_prompts_a, LayerSubset(blocks=(1,)))
    n = len(probe_prompts_a)
    assert table.scores[(1, 0, 1)] == pytest.approx(0.125 * np.sqrt(n), rel=1e-9)
    # A channel no projection writes stays exactly zero.
    assert table.scores[(1, 0, 3)] == 0.0


def test_cvs_monotone_under_injected_scaling(demo_model, probe_prompts_a):
    """Scaling one sample's entry at a coordinate never lowers that cell
    and touches no other cell."""
    caches = [prefill(demo_model, p.prefix)[0] for p in probe_prompts_a[:6]]
    subset = LayerSubset(blocks=(1, 2))
    base = cvs_from_caches(demo_model.config, caches, subset)

    target = caches[2]
    t = target.filled_len - 1
    value = target.read_float(0, V_TENSOR, 0, t, 1)
    target.write_float(0, V_TENSOR, 0, t, 1, value * 3.0)

    bumped = cvs_from_caches(demo_model.config, caches, subset)
    assert bumped.scores[(1, 0, 1)] >= base.scores[(1, 0, 1)]
    for key in base.scores:
        if key != (1, 0, 1):
            assert bumped.scores[key] == base.scores[key]


def test_cvs_rejects_unselectable_position(demo_model, probe_prompts_a):
    selector = TokenSelector(positions=(99,))
    with pytest.raises(InputError):
        compute_cvs(demo_model, probe_prompts_a[:2], LayerSubset(blocks=(1,)), selector)


def test_cvs_explicit_position_selector(demo_model, probe_prompts_a):
    table = compute_cvs(
        demo_model, probe_prompts_a[:3], LayerSubset(blocks=(1,)), TokenSelector(positions=(0,))
    )
    assert table.scores[(1, 0, 1)] == pytest.approx(0.125 * np.sqrt(3), rel=1e-9)


# -- stage 3 -------------------------------------------------------------------


def _table(scores, blocks=(1,), heads=2, channels=4):
    return CVSTable(scores=scores, blocks=blocks, n_kv_heads=heads, head_dim=channels)


def test_select_topk_unique_max():
    scores = {(1, h, j): 0.0 for h in range(2) for j in range(4)}
    scores[(1, 1, 3)] = 2.0
    cand = select_topk(_table(scores), k=1, policy=BitPolicy(bits=(14,)))
    assert cand.selections[1][0][:2] == (1, 3)
    assert len(cand.coordinates) == 1
    assert cand.coordinates[0] == BitCoordinate(
        layer=0, head=1, channel=3, bit=14, token_pos=LAST_PREFIX, mode=MODE_SET
    )


def test_select_topk_all_pairs_when_k_large():
    scores = {(1, h, j): float(h * 4 + j) for h in range(2) for j in range(4)}
    cand = select_topk(_table(scores), k=100, policy=BitPolicy(bits=(14, 13)))
    assert len(cand.selections[1]) == 8
    assert len(cand.coordinates) == 16
    got = [sel[:2] for sel in cand.selections[1]]
    assert got == [(1, 3), (1, 2), (1, 1), (1, 0), (0, 3), (0, 2), (0, 1), (0, 0)]


def test_select_topk_tie_rule():
    scores = {(1, h, j): 1.0 for h in range(2) for j in range(4)}
    cand = select_topk(_table(scores), k=2, policy=BitPolicy(bits=(14,)))
    assert [sel[:2] for sel in cand.selections[1]] == [(0, 0), (0, 1)]


def test_calibrate_asr_demo_targets_hit_one(demo_model, demo_verb, probe_prompts_a):
    scores = {(1, h, j): 0.0 for h in range(2) for j in range(4)}
    scores[(1, 0, 1)] = 1.0
    scores[(1, 1, 2)] = 0.9
    cand = select_topk(_table(scores), k=2, policy=BitPolicy(bits=(14,)))
    matrix = calibrate_asr(demo_model, probe_prompts_a, cand, demo_verb)
    cell0 = matrix.cell(
        BitCoordinate(layer=0, head=0, channel=1, bit=14, token_pos=LAST_PREFIX, mode=MODE_SET)
    )
    cell1 = matrix.cell(
        BitCoordinate(layer=0, head=1, channel=2, bit=14, token_pos=LAST_PREFIX, mode=MODE_SET)
    )
    assert cell0.rate(0) == 1.0 and cell0.rate(1) == 0.0
    assert cell1.rate(1) == 1.0 and cell1.rate(0) == 0.0
    assert cell0.noop_count == 0 and cell0.undefined_count == 0


def test_calibrate_asr_noop_equals_clean_distribution(demo_model, demo_verb, probe_prompts_a):
    """Bit 13 of the 0x3000 target word is already set: the flip is a no-op
    on every sample and the rates must equal the clean prediction split."""
    scores = {(1, h, j): 0.0 for h in range(2) for j in range(4)}
    scores[(1, 0, 1)] = 1.0
    cand = select_topk(_table(scores), k=1, policy=BitPolicy(bits=(13,)))
    matrix = calibrate_asr(demo_model, probe_prompts_a, cand, demo_verb)
    cell = matrix.cells[0]
    assert cell.noop_count == len(probe_prompts_a)

    clean = [0, 0]
    for p in probe_prompts_a:
        cache, _ = prefill(demo_model, p.prefix)
        pred, _ = decode_classify(demo_model, cache, p.cue, demo_verb)
        clean[pred] += 1
    assert cell.counts == clean


def test_calibration_leaves_caches_clean(demo_model, demo_verb, probe_prompts_a, demo_search_config):
    """After a full calibration pass, a clean decode is bit-identical to a
    never-faulted run."""
    run_search(demo_model, probe_prompts_a, demo_search_config, demo_verb)
    for p in probe_prompts_a[:4]:
        cache, _ = prefill(demo_model, p.prefix)
        _, logits = decode_classify(demo_model, cache, p.cue, demo_verb)
        cache2, _ = prefill(demo_model, p.prefix)
        _, logits2 = decode_classify(demo_model, cache2, p.cue, demo_verb)
        assert logits.tobytes() == logits2.tobytes()


def _cell(coord, counts, n):
    return AsrCell(
        coordinate=coord, counts=counts, undefined_count=0, noop_count=0, n_samples=n
    )


def _coord(layer=0, head=0, channel=0, bit=14):
    return BitCoordinate(layer=layer, head=head, channel=channel, bit=bit)


def test_build_map_single_candidate_complete():
    matrix = ASRMatrix(cells=[_cell(_coord(), [99, 1], 100)], n_classes=2)
    cmap = build_corruption_map(matrix, tau=0.95)
    assert not cmap.complete  # class 1 has no coordinate above tau
    assert cmap.failing_classes == [1]
    assert cmap.triggers[0].asr == 0.99
    assert cmap.triggers[0].coordinate == _coord()


def test_build_map_incomplete_lists_failing_class():
    matrix = ASRMatrix(cells=[_cell(_coord(), [50, 50], 100)], n_classes=2)
    cmap = build_corruption_map(matrix, tau=0.95)
    assert not cmap.complete
    assert cmap.failing_classes == [0, 1]


def test_build_map_argmax_tie_prefers_lexicographic():
    a, b = _coord(layer=1, head=0), _coord(layer=0, head=1)
    matrix = ASRMatrix(cells=[_cell(a, [10, 0], 10), _cell(b, [10, 0], 10)], n_classes=2)
    cmap = build_corruption_map(matrix, tau=0.5)
    assert cmap.triggers[0].coordinate == b  # layer 0 sorts first
    assert [c for c, _ in cmap.triggers[0].ranked] == [b, a]


def test_corruption_map_roundtrip_json(demo_model, demo_verb, probe_prompts_a, demo_search_config):
    from cachetrap.search import CorruptionMap

    result = run_search(demo_model, probe_prompts_a, demo_search_config, demo_verb)
    as_json = result.corruption_map.to_json()
    back = CorruptionMap.from_json(as_json)
    assert back.to_json() == as_json


# -- oracle ---------------------------------------------------------------------


def test_oracle_empty_scope(demo_model, demo_verb, probe_prompts_a):
    scope = OracleScope(layers=(), heads=(), channels=(), bits=())
    matrix = exhaustive_search_oracle(demo_model, probe_prompts_a, scope, demo_verb)
    assert matrix.cells == []


def test_oracle_guard(demo_model, demo_verb, probe_prompts_a):
    scope = OracleScope(layers=(0,), heads=(0,), channels=(0,), bits=(14,))
    with pytest.raises(GuardError):
        exhaustive_search_oracle(demo_model, probe_prompts_a, scope, demo_verb, guard=3)


def test_oracle_matches_calibration_cells(demo_model, demo_verb, probe_prompts_a, demo_search_config):
    result = run_search(demo_model, probe_prompts_a, demo_search_config, demo_verb)
    oracle = exhaustive_search_oracle(
        demo_model, probe_prompts_a, result.candidates.coordinates, demo_verb
    )
    assert len(oracle.cells) == len(result.matrix.cells)
    for got, want in zip(oracle.cells, result.matrix.cells):
        assert got.coordinate == want.coordinate
        assert got.counts == want.counts
        assert got.undefined_count == want.undefined_count
        assert got.noop_count == want.noop_count


def test_oracle_full_scope_superset(demo_model, demo_verb, probe_prompts_a, demo_search_config):
    cfg = demo_model.config
    full = exhaustive_search_oracle(
        demo_model,
        probe_prompts_a[:10],
        OracleScope(
            layers=tuple(range(cfg.n_layers)),
            heads=tuple(range(cfg.n_kv_heads)),
            channels=tuple(range(cfg.head_dim)),
            bits=(14, 13, 12, 11, 10),
        ),
        demo_verb,
    )
    result = run_search(demo_model, probe_prompts_a[:10], demo_search_config, demo_verb)
    full_by_coord = {c.coordinate: c for c in full.cells}
    for cell in result.matrix.cells:
        assert cell.coordinate in full_by_coord
        assert full_by_coord[cell.coordinate].counts == cell.counts


# -- pipeline -------------------------------------------------------------------


def test_run_search_deterministic(demo_model, demo_verb, probe_prompts_a, demo_search_config):
    import json

    a = run_search(demo_model, probe_prompts_a, demo_search_config, demo_verb)
    b = run_search(demo_model, probe_prompts_a, demo_search_config, demo_verb)
    assert json.dumps(a.corruption_map.to_json(), sort_keys=True) == json.dumps(
        b.corruption_map.to_json(), sort_keys=True
    )


def test_map_asr_matches_oracle_exactly(demo_model, demo_verb, probe_prompts_a, demo_search_config):
    result = run_search(demo_model, probe_prompts_a, demo_search_config, demo_verb)
    for trigger in result.corruption_map.triggers:
        oracle = exhaustive_search_oracle(
            demo_model, probe_prompts_a, [trigger.coordinate], demo_verb
        )
        assert oracle.cells[0].rate(trigger.target_class) == trigger.asr


def test_search_config_allows_unreachable_tau():
    cfg = SearchConfig(tau=1.01)
    assert cfg.tau == 1.01
    with pytest.raises(InputError):
        SearchConfig(tau=0.0)


def test_parallel_calibration_matches_sequential(
    demo_model, demo_verb, probe_prompts_a, demo_search_config
):
    """Worker-count changes never change the tallies: integer merges are
    order-independent."""
    policy = demo_search_config.resolved_policy(demo_model.config.cache_dtype)
    lss = compute_lss(demo_model, probe_prompts_a)
    subset = select_sensitive_layers(lss, 2)
    table = compute_cvs(demo_model, probe_prompts_a, subset)
    cand = select_topk(table, 4, policy)
    seq = calibrate_asr(demo_model, probe_prompts_a, cand, demo_verb, workers=1)
    par = calibrate_asr(demo_model, probe_prompts_a, cand, demo_verb, workers=2)
    assert seq.to_json() == par.to_json()


def test_synthetic_pipeline_runs(tiny_model, demo_verb):
    prompts = _token_prompts([[1, 2, 3, 4], [5, 6, 7], [8, 9], [10, 11, 12]], cue=14)
    config = SearchConfig(m=2, k=4, tau=1.01, n_calib=4, seed=1)
    result = run_search(tiny_model, prompts, config, demo_verb)
    assert len(result.matrix.cells) == 2 * 4 * 5
    assert not result.corruption_map.complete
