"""Datasets, tokenization, prompt assembly, and calibration sampling.

The prompt scheme is deliberately minimal: the tokenized text is the prefix
and a single reserved answer-cue token is appended as the decode-step token.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

from .errors import DatasetError, InputError, TokenizeError, TruncationError
from .rng import SplitMix64

BYTE_LEVEL = "byte_level"
VOCAB_GREEDY = "vocab_greedy"


@dataclass(frozen=True)
class LabeledExample:
    text: str
    label: int


@dataclass
class LabeledSet:
    examples: list[LabeledExample]
    n_classes: int
    name: str = ""

    def __len__(self) -> int:
        return len(self.examples)


@dataclass(frozen=True)
class TokenizerSpec:
    """Either raw bytes shifted by one, or greedy longest-match over a fixed vocab."""

    mode: str
    cue_token: int
    vocab: dict[str, int] | None = None

    def __post_init__(self):
        if self.mode not in (BYTE_LEVEL, VOCAB_GREEDY):
            raise InputError(f"unknown tokenizer mode {self.mode!r}")
        if self.mode == VOCAB_GREEDY and not self.vocab:
            raise InputError("vocab_greedy tokenizer requires a vocabulary")

    def min_vocab_size(self) -> int:
        """Smallest model vocabulary this tokenizer can address."""
        if self.mode == BYTE_LEVEL:
            return max(257, self.cue_token + 1)
        return max(max(self.vocab.values()) + 1, self.cue_token + 1)


@dataclass(frozen=True)
class Verbalizer:
    """Class index -> label token id, injective, classes dense from 0."""

    class_tokens: tuple[int, ...]

    def __post_init__(self):
        if not self.class_tokens:
            raise InputError("verbalizer must map at least one class")
        if len(set(self.class_tokens)) != len(self.class_tokens):
            raise InputError("verbalizer token ids must be distinct")

    @property
    def n_classes(self) -> int:
        return len(self.class_tokens)

    @property
    def ordered_tokens(self) -> tuple[int, ...]:
        return self.class_tokens

    def to_json(self) -> dict:
        return {str(c): t for c, t in enumerate(self.class_tokens)}

    @classmethod
    def from_json(cls, obj: dict) -> "Verbalizer":
        try:
            items = sorted((int(c), int(t)) for c, t in obj.items())
        except (TypeError, ValueError) as exc:
            raise InputError(f"bad verbalizer mapping: {exc}") from exc
        if [c for c, _ in items] != list(range(len(items))):
            raise InputError("verbalizer classes must be dense from 0")
        return cls(class_tokens=tuple(t for _, t in items))


@dataclass(frozen=True)
class Prompt:
    """One example, ready for the engine: cached prefix plus the decode token."""

    prefix: tuple[int, ...]
    cue: int
    label: int


def load_labeled_jsonl(path) -> LabeledSet:
    """One JSON object per line with string "text" and integer "label"."""
    examples = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetError(f"{path}:{lineno}: malformed JSON: {exc}") from exc
            if not isinstance(obj, dict) or "text" not in obj or "label" not in obj:
                raise DatasetError(f"{path}:{lineno}: expected fields 'text' and 'label'")
            text, label = obj["text"], obj["label"]
            if not isinstance(text, str):
                raise DatasetError(f"{path}:{lineno}: 'text' must be a string")
            if not isinstance(label, int) or isinstance(label, bool):
                raise DatasetError(f"{path}:{lineno}: 'label' must be an integer")
            examples.append(LabeledExample(text=text, label=label))
    if not examples:
        raise DatasetError(f"{path}: dataset is empty")
    labels = {ex.label for ex in examples}
    n_classes = max(labels) + 1
    if labels != set(range(n_classes)):
        raise DatasetError(
            f"{path}: labels must be dense in 0..C-1, got {sorted(labels)}"
        )
    return LabeledSet(examples=examples, n_classes=n_classes, name=str(path))


def tokenize(spec: TokenizerSpec, text: str) -> list[int]:
    """Deterministic tokenization; total over the spec's declared domain."""
    if not text:
        raise TokenizeError("cannot tokenize empty text")
    if spec.mode == BYTE_LEVEL:
        return [b + 1 for b in text.encode("utf-8")]
    tokens = []
    i = 0
    max_len = max(len(k) for k in spec.vocab)
    while i < len(text):
        match = None
        for end in range(min(len(text), i + max_len), i, -1):
            piece = text[i:end]
            if piece in spec.vocab:
                match = piece
                break
        if match is None:
            raise TokenizeError(f"no vocabulary entry matches text at offset {i}: {text[i:i+8]!r}")
        tokens.append(spec.vocab[match])
        i += len(match)
    return tokens


def build_prompt(spec: TokenizerSpec, example: LabeledExample, max_seq: int) -> Prompt:
    """Tokenized text followed by the answer-cue token; refuses to truncate."""
    prefix = tokenize(spec, example.text)
    if len(prefix) + 1 > max_seq:
        raise TruncationError(
            f"prompt needs {len(prefix) + 1} positions but max_seq is {max_seq}"
        )
    return Prompt(prefix=tuple(prefix), cue=spec.cue_token, label=example.label)


def build_prompts(spec: TokenizerSpec, dataset: LabeledSet, max_seq: int) -> list[Prompt]:
    return [build_prompt(spec, ex, max_seq) for ex in dataset.examples]


def sample_calibration(dataset: LabeledSet, n: int, seed: int) -> LabeledSet:
    """Deterministic pseudorandom subset without replacement."""
    if n < 1:
        raise InputError("calibration sample count must be at least 1")
    if n > len(dataset):
        raise InputError(f"cannot sample {n} of {len(dataset)} examples")
    picks = SplitMix64(seed).shuffle_prefix(len(dataset), n)
    examples = [dataset.examples[i] for i in picks]
    return LabeledSet(examples=examples, n_classes=dataset.n_classes, name=dataset.name)


def load_vocab_json(path) -> dict[str, int]:
    with open(path, "r", encoding="utf-8") as fh:
        obj = json.load(fh)
    if not isinstance(obj, dict) or not obj:
        raise InputError(f"{path}: vocabulary must be a non-empty JSON object")
    return {str(k): int(v) for k, v in obj.items()}


def load_verbalizer_json(path) -> Verbalizer:
    with open(path, "r", encoding="utf-8") as fh:
        return Verbalizer.from_json(json.load(fh))
