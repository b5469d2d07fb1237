#!/usr/bin/env python3
"""Build the committed exporter artifacts.

Trains the tiny checkpoint once (or reuses the committed one with
--reuse-checkpoint) and regenerates tiny.ctkv, fixtures.json, vocab.json,
verbalizer_template.json, and manifest.json in exporter/artifacts/.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from ctkv_exporter.cli import main as export_main

ARTIFACTS = Path(__file__).resolve().parent.parent / "artifacts"


def main(argv=None) -> int:
    parser = argparse.ArgumentParser()
    parser.add_argument("--reuse-checkpoint", action="store_true")
    parser.add_argument("--steps", type=int, default=300)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args(argv)

    cli_args = ["--out-dir", str(ARTIFACTS), "--steps", str(args.steps), "--seed", str(args.seed)]
    checkpoint = ARTIFACTS / "tiny_checkpoint.pt"
    if args.reuse_checkpoint and checkpoint.exists():
        cli_args += ["--checkpoint", str(checkpoint)]
    return export_main(cli_args)


if __name__ == "__main__":
    sys.exit(main())
