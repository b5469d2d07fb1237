"""Constructed demonstration model with known value-channel routing.

The model is wired by hand so the attack's effect is provable rather than
emergent:

  * every token embedding carries a constant in dim 0 and a +/-1 class
    feature in dim 1, with equal norms across tokens;
  * every block has zero query/key projections, so attention is uniform
    over the causal window, and a zero MLP down-projection, so the MLP
    contributes exactly nothing;
  * each target class owns one value channel that stores a small positive
    constant for every token, routed by the output projection onto a
    dedicated residual carrier dim, which the unembedding turns into that
    class's label logit;
  * one benign value channel in the final block carries the +/-1 token
    feature onto a shared carrier that decides the no-fault prediction.

Because the only token-varying residual dim (the benign carrier) is written
by the final block, the RMS norm seen by every block's value projection is
an analytically known constant, so the stored target words are constant to
well below half a cache-dtype ulp and round to identical words.

Benign rule: predicted class is 0 when the summed token feature (+1 for
ids below vocab/2, -1 otherwise, decode token included) is non-negative,
else 1. Probe texts keep an odd total token count so the sum is never zero
and the rule never rests on float tie behavior.

Amplifying a target channel's stored value at the last cached token (which
is exactly what a single exponent-bit flip does) makes its carrier dominate
the label logits, forcing the mapped class.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .config import ModelConfig
from .data import LabeledExample, LabeledSet, TokenizerSpec, Verbalizer, VOCAB_GREEDY
from .errors import ConfigurationError
from .rng import SplitMix64, derive_seed
from .runtime import Model, tensor_names, tensor_shape

#: Stored value of every target channel; exact in fp16 (0x3000).
TARGET_VALUE = 0.125
#: Magnitude of the benign feature after value projection.
BENIGN_VALUE = 0.01

_CARRIER_GAIN = 4.0
_BENIGN_GAIN = 1.0

DEMO_VOCAB_SIZE = 16
DEMO_CUE_TOKEN = 15


def demo_config() -> ModelConfig:
    return ModelConfig(
        n_layers=2,
        n_heads=2,
        n_kv_heads=2,
        d_model=8,
        head_dim=4,
        ffn_dim=4,
        vocab_size=DEMO_VOCAB_SIZE,
        max_seq=32,
        cache_dtype="fp16",
        pos_scheme="none",
        norm_eps=1e-5,
    )


def token_feature(token: int, vocab_size: int = DEMO_VOCAB_SIZE) -> int:
    """+1 for the lower half of the vocabulary, -1 for the upper half."""
    return 1 if token < vocab_size // 2 else -1


def benign_class(tokens, cue: int = DEMO_CUE_TOKEN, vocab_size: int = DEMO_VOCAB_SIZE) -> int:
    """The documented no-fault prediction rule over prefix tokens plus the cue."""
    net = sum(token_feature(t, vocab_size) for t in tokens) + token_feature(cue, vocab_size)
    return 0 if net >= 0 else 1


def build_trojan_demo_model(
    config: ModelConfig,
    target_channels: dict[int, tuple[int, int, int]],
    seed: int = 0,
) -> Model:
    """Model whose listed (layer, head, channel) coordinates trigger their class.

    ``target_channels`` maps every class to a distinct value-cache channel.
    The seed fills only tensors with no numeric effect (MLP up-projections
    feeding a zero down-projection), so models with different seeds differ
    in bytes but never in behavior.
    """
    if not target_channels:
        raise ConfigurationError("at least one target channel is required")
    n_classes = len(target_channels)
    if n_classes < 2:
        raise ConfigurationError("the benign rule needs at least two classes")
    if sorted(target_channels) != list(range(n_classes)):
        raise ConfigurationError("target classes must be dense from 0")
    if config.d_model < 3 + n_classes:
        raise ConfigurationError("d_model too small to carry the routing dims")
    seen = set()
    for cls, (layer, head, channel) in target_channels.items():
        if not 0 <= layer < config.n_layers:
            raise ConfigurationError(f"class {cls}: layer {layer} out of range")
        if not 0 <= head < config.n_kv_heads:
            raise ConfigurationError(f"class {cls}: head {head} out of range")
        if not 0 <= channel < config.head_dim:
            raise ConfigurationError(f"class {cls}: channel {channel} out of range")
        if (layer, head, channel) in seen:
            raise ConfigurationError("target channels must be distinct")
        seen.add((layer, head, channel))

    benign_layer = config.n_layers - 1
    benign_slot = _pick_benign_slot(config, benign_layer, seen)

    tensors = {
        name: np.zeros(tensor_shape(config, name), dtype=np.float32)
        for name in tensor_names(config)
    }

    embed = tensors["embed"]
    for tok in range(config.vocab_size):
        embed[tok, 0] = 1.0
        embed[tok, 1] = float(token_feature(tok, config.vocab_size))

    for layer in range(config.n_layers):
        tensors[f"layers.{layer}.norm_attn"][:] = 1.0
        tensors[f"layers.{layer}.norm_mlp"][:] = 1.0
    tensors["norm_final"][:] = 1.0

    # Mean square of the residual stream entering each block: dims 0 and 1
    # contribute 1 apiece; each target carrier written by an earlier block
    # contributes TARGET_VALUE^2. The benign carrier only exists after the
    # final block and is never re-read by a value projection.
    def rms_into(layer: int) -> float:
        carriers = sum(
            TARGET_VALUE**2 for (lt, _, _) in target_channels.values() if lt < layer
        )
        return math.sqrt((2.0 + carriers) / config.d_model + config.norm_eps)

    carrier_dims = {}
    label_tokens = demo_verbalizer(n_classes).class_tokens
    for cls in range(n_classes):
        layer, head, channel = target_channels[cls]
        col = head * config.head_dim + channel
        # normed dim 0 is 1/rms, so this writes exactly TARGET_VALUE.
        tensors[f"layers.{layer}.wv"][0, col] = TARGET_VALUE * rms_into(layer)
        carrier = 3 + cls
        carrier_dims[cls] = carrier
        tensors[f"layers.{layer}.wo"][col, carrier] = 1.0

    bh, bj = benign_slot
    bcol = bh * config.head_dim + bj
    tensors[f"layers.{benign_layer}.wv"][1, bcol] = BENIGN_VALUE * rms_into(benign_layer)
    tensors[f"layers.{benign_layer}.wo"][bcol, 2] = 1.0

    unembed = tensors["unembed"]
    for cls in range(n_classes):
        unembed[carrier_dims[cls], label_tokens[cls]] = _CARRIER_GAIN
    unembed[2, label_tokens[0]] = _BENIGN_GAIN
    unembed[2, label_tokens[1]] = -_BENIGN_GAIN

    # Seed-dependent but numerically inert: w_down stays zero.
    stream = SplitMix64(derive_seed(seed, 0xDE30))
    for layer in range(config.n_layers):
        tensors[f"layers.{layer}.w_up"][:] = stream.uniform_array(
            tensor_shape(config, f"layers.{layer}.w_up"), -0.5, 0.5
        )

    model = Model(config=config, tensors=tensors)
    model.validate()
    return model


def _pick_benign_slot(config: ModelConfig, layer: int, taken: set) -> tuple[int, int]:
    for head in range(config.n_kv_heads):
        for channel in range(config.head_dim):
            if (layer, head, channel) not in taken:
                return head, channel
    raise ConfigurationError("no free value channel left for the benign feature")


def demo_verbalizer(n_classes: int = 2) -> Verbalizer:
    return Verbalizer(class_tokens=tuple(range(n_classes)))


def demo_tokenizer() -> TokenizerSpec:
    """Sixteen single-character tokens 'a'..'p'; 'p' is the answer cue."""
    vocab = {chr(ord("a") + i): i for i in range(DEMO_VOCAB_SIZE)}
    return TokenizerSpec(mode=VOCAB_GREEDY, cue_token=DEMO_CUE_TOKEN, vocab=vocab)


def default_demo_targets() -> dict[int, tuple[int, int, int]]:
    return {0: (0, 0, 1), 1: (0, 1, 2)}


@dataclass(frozen=True)
class ProbeSetSpec:
    """Deterministic probe-set recipe. Text lengths stay even so the feature
    sum (cue included) has odd parity and never ties."""

    size: int
    seed: int
    lengths: tuple[int, ...] = (4, 6, 8)


def make_probe_set(spec: ProbeSetSpec, exclude_texts: frozenset = frozenset()) -> LabeledSet:
    """Labeled examples over the demo vocabulary, labeled by the benign rule."""
    stream = SplitMix64(derive_seed(spec.seed, 0xBEEF))
    examples = []
    texts = set(exclude_texts)
    while len(examples) < spec.size:
        length = spec.lengths[stream.next_below(len(spec.lengths))]
        chars = [chr(ord("a") + stream.next_below(DEMO_VOCAB_SIZE - 1)) for _ in range(length)]
        text = "".join(chars)
        if text in texts:
            continue
        texts.add(text)
        tokens = [ord(c) - ord("a") for c in chars]
        examples.append(LabeledExample(text=text, label=benign_class(tokens)))
    return LabeledSet(examples=examples, n_classes=2, name=f"probe-{spec.seed}")


def write_probe_jsonl(dataset: LabeledSet, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ex in dataset.examples:
            fh.write(json.dumps({"text": ex.text, "label": ex.label}) + "\n")
