"""Checkpoint-to-CTKV exporter with independent reference fixtures."""

from .export import (
    ExportError,
    ExportManifest,
    default_name_map,
    emit_fixture,
    export_tokenizer,
    export_weights,
)
from .reference import RefConfig, TinyCausalLM, reference_next_token_logits
from .train import build_vocab, load_checkpoint, model_from_checkpoint, save_checkpoint, train_checkpoint

__version__ = "0.1.0"
