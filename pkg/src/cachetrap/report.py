"""Report serialization: JSON envelopes, delimited tables, and figures.

Every command writes three surfaces per stage into the output directory:

  * ``<stage>.report.json``  - the versioned envelope {schema, stage,
    resolved_config, meta, payload}; ``meta`` is the only volatile block.
  * ``<stage>.json`` payload-only files - deterministic byte-for-byte.
  * ``<stage>.csv`` and ``<stage>.png`` - the same numbers as a delimited
    table and a rendered figure.
"""

from __future__ import annotations

import csv
import json
import time
from pathlib import Path

SCHEMA = "cachetrap-report/1"


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2, allow_nan=False) + "\n"


def write_payload(out_dir: Path, name: str, payload: dict) -> Path:
    path = out_dir / f"{name}.json"
    path.write_text(canonical_json({"schema": SCHEMA, **payload}), encoding="utf-8")
    return path


def write_envelope(out_dir: Path, stage: str, resolved_config: dict, payload: dict) -> Path:
    envelope = {
        "schema": SCHEMA,
        "stage": stage,
        "resolved_config": resolved_config,
        "meta": {"created_utc": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime())},
        "payload": payload,
    }
    path = out_dir / f"{stage}.report.json"
    path.write_text(canonical_json(envelope), encoding="utf-8")
    return path


def _write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def _coord_fields(coord_json: dict) -> list:
    return [
        coord_json["layer"],
        coord_json["head"],
        coord_json["channel"],
        coord_json["bit"],
        coord_json["token_pos"],
        coord_json["mode"],
    ]


_COORD_HEADER = ["layer", "head", "channel", "bit", "token_pos", "mode"]


def write_lss_outputs(out_dir: Path, lss_json: dict, selected_blocks: list[int]) -> None:
    rows = [
        [e["block"], e["score"], int(e["block"] in selected_blocks)] for e in lss_json["entries"]
    ]
    _write_csv(out_dir / "lss.csv", ["block", "score", "selected"], rows)

    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    blocks = [e["block"] for e in lss_json["entries"]]
    scores = [e["score"] for e in lss_json["entries"]]
    colors = ["#d62728" if b in selected_blocks else "#7f7f7f" for b in blocks]
    fig, ax = plt.subplots(figsize=(6, 3.2))
    ax.bar(blocks, scores, color=colors)
    ax.set_xlabel("block")
    ax.set_ylabel("sensitivity score")
    ax.set_title("Layer sensitivity (selected blocks highlighted)")
    ax.set_xticks(blocks)
    fig.tight_layout()
    fig.savefig(out_dir / "lss.png", dpi=120)
    plt.close(fig)


def write_asr_outputs(out_dir: Path, matrix_json: dict) -> None:
    n_classes = matrix_json["n_classes"]
    header = _COORD_HEADER + [f"asr_class_{c}" for c in range(n_classes)] + [
        "undefined_count",
        "noop_count",
        "n_samples",
    ]
    rows = []
    for cell in matrix_json["cells"]:
        rows.append(
            _coord_fields(cell["coordinate"])
            + [f"{r:.6f}" for r in cell["rates"]]
            + [cell["undefined_count"], cell["noop_count"], cell["n_samples"]]
        )
    _write_csv(out_dir / "asr_matrix.csv", header, rows)

    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    import numpy as np

    cells = matrix_json["cells"][:64]
    if not cells:
        return
    grid = np.array([cell["rates"] for cell in cells], dtype=float)
    fig, ax = plt.subplots(figsize=(4 + 0.6 * n_classes, max(3.0, 0.16 * len(cells) + 1.5)))
    im = ax.imshow(grid, aspect="auto", vmin=0.0, vmax=1.0, cmap="viridis")
    ax.set_xlabel("target class")
    ax.set_ylabel("candidate coordinate (ranked order)")
    ax.set_xticks(range(n_classes))
    ax.set_title("Per-class forced-prediction rate")
    fig.colorbar(im, ax=ax, label="ASR")
    fig.tight_layout()
    fig.savefig(out_dir / "asr_matrix.png", dpi=120)
    plt.close(fig)


def write_map_outputs(out_dir: Path, map_json: dict) -> None:
    header = ["class"] + _COORD_HEADER + ["asr", "n_fallbacks"]
    rows = []
    for entry in map_json["classes"]:
        rows.append(
            [entry["class"]]
            + _coord_fields(entry["coordinate"])
            + [f"{entry['asr']:.6f}", len(entry["ranked_candidates"])]
        )
    _write_csv(out_dir / "corruption_map.csv", header, rows)


def write_eval_outputs(out_dir: Path, eval_json: dict) -> None:
    header = ["class", "trigger_asr", "undefined_count", "noop_count"]
    rows = [
        [o["class"], f"{o['trigger_asr']:.6f}", o["undefined_count"], o["noop_count"]]
        for o in eval_json["classes"]
    ]
    _write_csv(out_dir / "attack_eval.csv", header, rows)

    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    classes = [o["class"] for o in eval_json["classes"]]
    asr = [o["trigger_asr"] for o in eval_json["classes"]]
    fig, ax = plt.subplots(figsize=(6, 3.2))
    ax.bar([str(c) for c in classes], asr, color="#d62728", label="trigger ASR")
    ax.axhline(eval_json["no_trigger_accuracy"], color="#1f77b4", ls="--", label="no-trigger acc")
    ax.axhline(eval_json["baseline_accuracy"], color="#2ca02c", ls=":", label="baseline acc")
    ax.set_xlabel("target class")
    ax.set_ylim(0, 1.05)
    ax.set_title("Victim-set attack evaluation")
    ax.legend(loc="lower right", fontsize=8)
    fig.tight_layout()
    fig.savefig(out_dir / "attack_eval.png", dpi=120)
    plt.close(fig)


def write_feasibility_outputs(out_dir: Path, feas_json: dict) -> None:
    header = ["class"] + _COORD_HEADER + ["asr", "bank", "row", "zero_fraction", "accepted", "reason"]
    rows = []
    for cls in feas_json["classes"]:
        for v in cls["verdicts"]:
            zf = v["zero_fraction"]
            rows.append(
                [cls["class"]]
                + _coord_fields(v["coordinate"])
                + [
                    f"{v['asr']:.6f}",
                    v["bank"],
                    v["row"],
                    "" if zf is None else f"{zf:.6f}",
                    int(v["accepted"]),
                    v["reason"] or "",
                ]
            )
    _write_csv(out_dir / "feasibility.csv", header, rows)

    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    reasons = ["accepted", "bank", "row", "bit_not_zero"]
    counts = {r: 0 for r in reasons}
    for cls in feas_json["classes"]:
        for v in cls["verdicts"]:
            counts["accepted" if v["accepted"] else v["reason"]] += 1
    fig, ax = plt.subplots(figsize=(5, 3.0))
    ax.bar(reasons, [counts[r] for r in reasons], color=["#2ca02c", "#d62728", "#ff7f0e", "#9467bd"])
    ax.set_ylabel("candidates")
    ax.set_title("Feasibility verdicts")
    fig.tight_layout()
    fig.savefig(out_dir / "feasibility.png", dpi=120)
    plt.close(fig)
