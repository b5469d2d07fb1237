"""Batch exporter: train (or load) the tiny checkpoint, emit CTKV + fixtures."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .export import ExportManifest, default_name_map, emit_fixture, export_tokenizer, export_weights, write_json
from .reference import RefConfig
from .train import (
    CUE_CHAR,
    load_checkpoint,
    model_from_checkpoint,
    save_checkpoint,
    train_checkpoint,
)

DEFAULT_PROMPTS = [
    "the quick brown fox",
    "a watched pot never boils",
    "yes or no",
    "cached answers come back faster",
    "small models still learn",
    "the lazy dog",
]


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="ctkv-export")
    parser.add_argument("--checkpoint", help="existing checkpoint .pt; trained fresh when absent")
    parser.add_argument("--out-dir", required=True)
    parser.add_argument("--steps", type=int, default=300)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--prompt", action="append", default=None, help="fixture prompt (repeatable)")
    parser.add_argument("--labels", default="y,n", help="comma-separated label strings")
    args = parser.parse_args(argv)

    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    if args.checkpoint:
        checkpoint = load_checkpoint(args.checkpoint)
        source_id = str(args.checkpoint)
    else:
        checkpoint = train_checkpoint(steps=args.steps, seed=args.seed)
        save_checkpoint(checkpoint, out_dir / "tiny_checkpoint.pt")
        source_id = f"trained(steps={args.steps}, seed={args.seed})"

    cfg = RefConfig.from_json(checkpoint["config"])
    vocab = checkpoint["vocab"]
    prompts = args.prompt if args.prompt else DEFAULT_PROMPTS

    manifest = ExportManifest(
        source_id=source_id,
        name_map=default_name_map(cfg),
        config=cfg,
        fixture_prompts=prompts,
    )
    try:
        blob = export_weights(checkpoint["state_dict"], manifest)
        model = model_from_checkpoint(checkpoint)
        fixtures = emit_fixture(model, vocab, prompts)
        tok = export_tokenizer(vocab, args.labels.split(","), CUE_CHAR)
    except Exception as exc:
        print(f"export error: {exc}", file=sys.stderr)
        return 1

    (out_dir / "tiny.ctkv").write_bytes(blob)
    write_json(fixtures, out_dir / "fixtures.json")
    write_json(tok["vocab"], out_dir / "vocab.json")
    write_json(
        {"cue_token": tok["cue_token"], **tok["verbalizer_template"]},
        out_dir / "verbalizer_template.json",
    )
    write_json(manifest.to_json(), out_dir / "manifest.json")
    print(f"exported {len(blob)} bytes, {len(fixtures['prompts'])} fixture prompts -> {out_dir}")
    if tok["verbalizer_template"]["warnings"]:
        for w in tok["verbalizer_template"]["warnings"]:
            print(f"warning: {w}", file=sys.stderr)
    return 0


if __name__ == "__main__":
    sys.exit(main())
