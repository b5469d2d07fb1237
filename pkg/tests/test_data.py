from __future__ import annotations

import pytest

from cachetrap.data import (
    BYTE_LEVEL,
    LabeledExample,
    TokenizerSpec,
    VOCAB_GREEDY,
    Verbalizer,
    build_prompt,
    load_labeled_jsonl,
    sample_calibration,
    tokenize,
)
from cachetrap.errors import DatasetError, InputError, TokenizeError, TruncationError


def _write_jsonl(path, lines):
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def test_load_two_lines(tmp_path):
    path = tmp_path / "d.jsonl"
    _write_jsonl(path, ['{"text":"a","label":0}', '{"text":"b","label":1}'])
    ds = load_labeled_jsonl(path)
    assert len(ds) == 2
    assert ds.n_classes == 2


def test_load_non_dense_labels(tmp_path):
    path = tmp_path / "d.jsonl"
    _write_jsonl(path, ['{"text":"a","label":0}', '{"text":"b","label":5}'])
    with pytest.raises(DatasetError):
        load_labeled_jsonl(path)


def test_load_empty_file(tmp_path):
    path = tmp_path / "d.jsonl"
    path.write_text("", encoding="utf-8")
    with pytest.raises(DatasetError):
        load_labeled_jsonl(path)


def test_load_malformed_json_reports_line(tmp_path):
    path = tmp_path / "d.jsonl"
    _write_jsonl(path, ['{"text":"a","label":0}', "{nope"])
    with pytest.raises(DatasetError, match=":2:"):
        load_labeled_jsonl(path)


def test_load_missing_field(tmp_path):
    path = tmp_path / "d.jsonl"
    _write_jsonl(path, ['{"text":"a"}'])
    with pytest.raises(DatasetError):
        load_labeled_jsonl(path)


def test_byte_level_offsets():
    spec = TokenizerSpec(mode=BYTE_LEVEL, cue_token=0)
    assert tokenize(spec, "AB") == [66, 67]


def test_vocab_greedy_longest_match():
    spec = TokenizerSpec(mode=VOCAB_GREEDY, cue_token=9, vocab={"ab": 5, "a": 6, "b": 7})
    assert tokenize(spec, "ab") == [5]
    assert tokenize(spec, "ba") == [7, 6]


def test_vocab_greedy_unknown_character():
    spec = TokenizerSpec(mode=VOCAB_GREEDY, cue_token=9, vocab={"a": 6})
    with pytest.raises(TokenizeError):
        tokenize(spec, "ax")


def test_tokenize_empty_text():
    spec = TokenizerSpec(mode=BYTE_LEVEL, cue_token=0)
    with pytest.raises(TokenizeError):
        tokenize(spec, "")


def test_build_prompt_appends_cue():
    spec = TokenizerSpec(mode=VOCAB_GREEDY, cue_token=15, vocab={c: ord(c) - 97 for c in "abcde"})
    prompt = build_prompt(spec, LabeledExample(text="abcde", label=1), max_seq=8)
    assert len(prompt.prefix) == 5
    assert prompt.cue == 15
    assert prompt.label == 1


def test_build_prompt_refuses_overflow():
    spec = TokenizerSpec(mode=BYTE_LEVEL, cue_token=0)
    with pytest.raises(TruncationError):
        build_prompt(spec, LabeledExample(text="abcdefgh", label=0), max_seq=8)


def test_build_prompt_deterministic():
    spec = TokenizerSpec(mode=BYTE_LEVEL, cue_token=0)
    ex = LabeledExample(text="hello", label=0)
    assert build_prompt(spec, ex, 32) == build_prompt(spec, ex, 32)


def _dataset(n, n_classes=2):
    from cachetrap.data import LabeledSet

    return LabeledSet(
        examples=[LabeledExample(text=f"t{i}", label=i % n_classes) for i in range(n)],
        n_classes=n_classes,
    )


def test_sample_calibration_reproducible():
    ds = _dataset(100)
    a = sample_calibration(ds, 50, seed=123)
    b = sample_calibration(ds, 50, seed=123)
    assert [e.text for e in a.examples] == [e.text for e in b.examples]
    c = sample_calibration(ds, 50, seed=124)
    assert [e.text for e in a.examples] != [e.text for e in c.examples]


def test_sample_calibration_without_replacement():
    ds = _dataset(60)
    sub = sample_calibration(ds, 60, seed=5)
    assert sorted(e.text for e in sub.examples) == sorted(e.text for e in ds.examples)


def test_sample_calibration_bounds():
    ds = _dataset(10)
    with pytest.raises(InputError):
        sample_calibration(ds, 11, seed=0)
    with pytest.raises(InputError):
        sample_calibration(ds, 0, seed=0)


def test_verbalizer_validation():
    with pytest.raises(InputError):
        Verbalizer(class_tokens=(3, 3))
    v = Verbalizer.from_json({"0": 4, "1": 9})
    assert v.ordered_tokens == (4, 9)
    with pytest.raises(InputError):
        Verbalizer.from_json({"0": 4, "2": 9})
