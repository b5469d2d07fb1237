"""Batch front door: one JSON run configuration, five subcommands.

Exit codes: 0 success, 2 input/config error, 3 incomplete corruption map,
4 infeasible class, 5 oracle guard exceeded, 1 internal error.

Flags mirror config keys; any ``--a.b.c VALUE`` pair overrides the dotted
config path (values parse as JSON when possible, else as strings).
"""

from __future__ import annotations

import argparse
import copy
import json
import os
import sys
from pathlib import Path

from . import ctkv, report
from .bitflip import BitPolicy
from .config import ModelConfig
from .data import (
    BYTE_LEVEL,
    TokenizerSpec,
    VOCAB_GREEDY,
    build_prompts,
    load_labeled_jsonl,
    load_verbalizer_json,
    load_vocab_json,
    sample_calibration,
)
from .errors import CacheTrapError, GuardError, InputError
from .evaluation import evaluate_attack
from .fault_model import (
    DramMapping,
    FeasibilityConstraint,
    MemoryLayoutModel,
    filter_feasible,
    make_cache_word_sampler,
)
from .runtime import build_synthetic_model
from .search import (
    CorruptionMap,
    OracleScope,
    SearchConfig,
    TokenSelector,
    compute_lss,
    exhaustive_search_oracle,
    run_search,
    select_sensitive_layers,
)

EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_INPUT = 2
EXIT_INCOMPLETE = 3
EXIT_INFEASIBLE = 4
EXIT_GUARD = 5

_DEFAULT_SEARCH = {
    "m": 5,
    "k": 32,
    "tau": 0.95,
    "n_calib": 50,
    "seed": 0,
    "policy": None,
    "token_selector": "last_prefix",
    "mode": "set_to_one",
}

_DEFAULT_FAULT = {
    "layout": {"arena_base": 0},
    "mapping": {"xor_groups": [[13, 16], [14, 17]], "row_shift": 18},
    "constraint": {"transition": "zero_to_one", "allowed_banks": [0, 1, 2, 3], "allowed_rows": None},
    "rho": 0.95,
    "address_token": None,
}

_DEFAULT_ORACLE = {"guard": 100_000}


def _apply_overrides(config: dict, overrides: list[tuple[str, str]]) -> dict:
    out = copy.deepcopy(config)
    for dotted, raw in overrides:
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = out
        parts = dotted.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise InputError(f"override {dotted}: {part} is not an object")
        node[parts[-1]] = value
    return out


def _parse_overrides(extras: list[str]) -> list[tuple[str, str]]:
    overrides = []
    i = 0
    while i < len(extras):
        arg = extras[i]
        if not arg.startswith("--") or "." not in arg:
            raise InputError(f"unrecognized argument {arg!r}")
        key = arg[2:]
        if "=" in key:
            key, value = key.split("=", 1)
        else:
            i += 1
            if i >= len(extras):
                raise InputError(f"override {arg!r} is missing a value")
            value = extras[i]
        overrides.append((key, value))
        i += 1
    return overrides


class RunContext:
    """Validated, fully resolved run state shared by the commands."""

    def __init__(self, config: dict, base_dir: Path):
        self.raw = config
        self.base_dir = base_dir

        model_spec = config.get("model")
        if not isinstance(model_spec, dict) or ("path" in model_spec) == ("synthetic" in model_spec):
            raise InputError("config must set exactly one of model.path or model.synthetic")
        if "path" in model_spec:
            path = self._resolve(model_spec["path"])
            if not path.exists():
                raise InputError(f"model not found: {path}")
            self.model = ctkv.load_model_path(path)
        else:
            syn = model_spec["synthetic"]
            self.model = build_synthetic_model(
                ModelConfig.from_json(syn["config"]), int(syn.get("seed", 0))
            )

        calib = config.get("calibration")
        if not calib:
            raise InputError("calibration not found: config has no calibration path")
        self.calibration_path = self._resolve(calib)
        if not self.calibration_path.exists():
            raise InputError(f"calibration not found: {self.calibration_path}")

        victim = config.get("victim")
        self.victim_path = self._resolve(victim) if victim else None
        if (
            self.victim_path is not None
            and self.victim_path.resolve() == self.calibration_path.resolve()
        ):
            raise InputError("calibration and victim sets must be distinct files")

        tok = config.get("tokenizer") or {}
        mode = tok.get("mode", BYTE_LEVEL)
        cue = tok.get("cue_token", 0)
        if mode == VOCAB_GREEDY:
            vocab_path = tok.get("vocab")
            if not vocab_path:
                raise InputError("vocab_greedy tokenizer requires tokenizer.vocab path")
            vocab = load_vocab_json(self._resolve(vocab_path))
            self.tokenizer = TokenizerSpec(mode=mode, cue_token=int(cue), vocab=vocab)
        else:
            self.tokenizer = TokenizerSpec(mode=mode, cue_token=int(cue))
        if self.tokenizer.min_vocab_size() > self.model.config.vocab_size:
            raise InputError(
                f"tokenizer needs vocab_size >= {self.tokenizer.min_vocab_size()}, "
                f"model has {self.model.config.vocab_size}"
            )

        verb_path = config.get("verbalizer")
        if not verb_path:
            raise InputError("config has no verbalizer path")
        verb_file = self._resolve(verb_path)
        if not verb_file.exists():
            raise InputError(f"verbalizer not found: {verb_file}")
        self.verbalizer = load_verbalizer_json(verb_file)
        for t in self.verbalizer.class_tokens:
            if not 0 <= t < self.model.config.vocab_size:
                raise InputError(f"verbalizer token {t} outside model vocabulary")

        search = dict(_DEFAULT_SEARCH)
        search.update(config.get("search") or {})
        policy = search.get("policy")
        self.search_config = SearchConfig(
            m=int(search["m"]),
            k=int(search["k"]),
            tau=float(search["tau"]),
            n_calib=int(search["n_calib"]),
            seed=int(search["seed"]),
            policy=None if policy is None else BitPolicy.from_json(policy),
            selector=TokenSelector.from_json(search["token_selector"]),
            mode=str(search["mode"]),
        )

        fault = copy.deepcopy(_DEFAULT_FAULT)
        for key, value in (config.get("fault") or {}).items():
            if isinstance(value, dict) and isinstance(fault.get(key), dict):
                fault[key].update(value)
            else:
                fault[key] = value
        self.layout = MemoryLayoutModel.from_json(fault["layout"])
        self.mapping = DramMapping.from_json(fault["mapping"])
        self.constraint = FeasibilityConstraint.from_json(fault["constraint"])
        self.rho = float(fault["rho"])
        self.address_token = fault["address_token"]

        oracle = dict(_DEFAULT_ORACLE)
        oracle.update(config.get("oracle") or {})
        self.oracle_guard = int(oracle["guard"])

        out = config.get("out", "out")
        self.out_dir = self._resolve(out)
        self.resolved = self._resolved_config(search, fault, out)

    def _resolve(self, path) -> Path:
        p = Path(path)
        return p if p.is_absolute() else self.base_dir / p

    def _resolved_config(self, search: dict, fault: dict, out) -> dict:
        model_spec = self.raw["model"]
        if "path" in model_spec:
            model_json = {"path": str(self._resolve(model_spec["path"]))}
        else:
            model_json = copy.deepcopy(model_spec)
        resolved_policy = self.search_config.resolved_policy(self.model.config.cache_dtype)
        return {
            "model": model_json,
            "model_config": self.model.config.to_json(),
            "calibration": str(self.calibration_path),
            "victim": None if self.victim_path is None else str(self.victim_path),
            "tokenizer": {
                "mode": self.tokenizer.mode,
                "cue_token": self.tokenizer.cue_token,
                "vocab_entries": None if self.tokenizer.vocab is None else len(self.tokenizer.vocab),
            },
            "verbalizer": self.verbalizer.to_json(),
            "search": {**self.search_config.to_json(), "policy": resolved_policy.to_json()},
            "fault": {
                "layout": self.layout.to_json(),
                "mapping": self.mapping.to_json(),
                "constraint": self.constraint.to_json(),
                "rho": self.rho,
                "address_token": self.address_token,
            },
            "oracle": {"guard": self.oracle_guard},
            "out": str(self.out_dir),
            "threads": os.environ.get("CACHETRAP_THREADS", "1"),
        }

    def calibration_prompts(self):
        dataset = load_labeled_jsonl(self.calibration_path)
        sampled = sample_calibration(dataset, self.search_config.n_calib, self.search_config.seed)
        return build_prompts(self.tokenizer, sampled, self.model.config.max_seq)

    def victim_prompts(self):
        if self.victim_path is None:
            raise InputError("config has no victim path")
        if not self.victim_path.exists():
            raise InputError(f"victim set not found: {self.victim_path}")
        dataset = load_labeled_jsonl(self.victim_path)
        return build_prompts(self.tokenizer, dataset, self.model.config.max_seq)

    def ensure_out_dir(self) -> Path:
        self.out_dir.mkdir(parents=True, exist_ok=True)
        return self.out_dir


def _load_context(args) -> RunContext:
    config_path = Path(args.config)
    if not config_path.exists():
        raise InputError(f"config not found: {config_path}")
    with open(config_path, "r", encoding="utf-8") as fh:
        config = json.load(fh)
    overrides = list(args.overrides)
    if args.out is not None:
        overrides.append(("out", args.out))
    if args.seed is not None:
        overrides.append(("search.seed", str(args.seed)))
    config = _apply_overrides(config, overrides)
    return RunContext(config, base_dir=config_path.parent)


def _load_map(path_str: str) -> CorruptionMap:
    path = Path(path_str)
    if not path.exists():
        raise InputError(f"corruption map not found: {path}")
    with open(path, "r", encoding="utf-8") as fh:
        obj = json.load(fh)
    if "payload" in obj and isinstance(obj["payload"], dict):
        obj = obj["payload"].get("corruption_map", obj["payload"])
    return CorruptionMap.from_json(obj)


def _parse_scope(spec: str, config: ModelConfig, policy: BitPolicy) -> OracleScope:
    dims = {
        "layer": tuple(range(config.n_layers)),
        "head": tuple(range(config.n_kv_heads)),
        "channel": tuple(range(config.head_dim)),
        "bit": tuple(policy.bits),
    }
    mode = "set_to_one"
    if spec:
        for part in spec.split(";"):
            part = part.strip()
            if not part:
                continue
            if "=" not in part:
                raise InputError(f"bad scope element {part!r}, expected key=values")
            key, values = part.split("=", 1)
            key = key.strip()
            if key == "mode":
                mode = values.strip()
                continue
            if key not in dims:
                raise InputError(f"unknown scope dimension {key!r}")
            picked = []
            for item in values.split(","):
                item = item.strip()
                if "-" in item and not item.startswith("-"):
                    lo, hi = item.split("-", 1)
                    picked.extend(range(int(lo), int(hi) + 1))
                else:
                    picked.append(int(item))
            dims[key] = tuple(picked)
    return OracleScope(
        layers=dims["layer"], heads=dims["head"], channels=dims["channel"], bits=dims["bit"], mode=mode
    )


# -- commands -----------------------------------------------------------------


def cmd_lss(ctx: RunContext) -> int:
    out = ctx.ensure_out_dir()
    prompts = ctx.calibration_prompts()
    lss = compute_lss(ctx.model, prompts)
    subset = select_sensitive_layers(lss, ctx.search_config.m)
    payload = {**lss.to_json(), "selected_blocks": subset.to_json()}
    report.write_payload(out, "lss", payload)
    report.write_envelope(out, "lss", ctx.resolved, payload)
    report.write_lss_outputs(out, lss.to_json(), list(subset.blocks))
    print(f"lss: {len(lss.entries)} blocks scored, selected {list(subset.blocks)}")
    return EXIT_OK


def cmd_search(ctx: RunContext) -> int:
    out = ctx.ensure_out_dir()
    prompts = ctx.calibration_prompts()
    result = run_search(ctx.model, prompts, ctx.search_config, ctx.verbalizer)

    map_json = result.corruption_map.to_json()
    matrix_json = result.matrix.to_json()
    report.write_payload(out, "corruption_map", map_json)
    report.write_payload(out, "asr_matrix", matrix_json)
    payload = {
        "corruption_map": map_json,
        "asr_matrix": matrix_json,
        "lss": result.lss.to_json(),
        "selected_blocks": result.subset.to_json(),
        "cvs": result.cvs.to_json(),
        "candidates": result.candidates.to_json(),
    }
    report.write_envelope(out, "search", ctx.resolved, payload)
    report.write_lss_outputs(out, result.lss.to_json(), list(result.subset.blocks))
    report.write_asr_outputs(out, matrix_json)
    report.write_map_outputs(out, map_json)

    for trigger in result.corruption_map.triggers:
        c = trigger.coordinate
        print(
            f"class {trigger.target_class}: layer={c.layer} head={c.head} "
            f"channel={c.channel} bit={c.bit} mode={c.mode} asr={trigger.asr:.4f}"
        )
    if not result.corruption_map.complete:
        print(
            f"map incomplete below tau={ctx.search_config.tau}: "
            f"classes {result.corruption_map.failing_classes}",
            file=sys.stderr,
        )
        return EXIT_INCOMPLETE
    return EXIT_OK


def cmd_attack_eval(ctx: RunContext, map_path: str, target_class: int | None) -> int:
    out = ctx.ensure_out_dir()
    corruption_map = _load_map(map_path)
    if not corruption_map.complete:
        raise InputError("corruption map is incomplete; run search to completion first")
    targets = None if target_class is None else [target_class]
    prompts = ctx.victim_prompts()
    evaluation = evaluate_attack(ctx.model, prompts, corruption_map, ctx.verbalizer, targets)
    payload = evaluation.to_json()
    report.write_payload(out, "attack_eval", payload)
    report.write_envelope(out, "attack_eval", ctx.resolved, payload)
    report.write_eval_outputs(out, payload)
    print(
        f"baseline acc {evaluation.baseline_accuracy:.4f}, "
        f"no-trigger acc {evaluation.no_trigger_accuracy:.4f} over {evaluation.n_samples} samples"
    )
    for o in evaluation.outcomes:
        print(f"class {o.target_class}: trigger ASR {o.trigger_asr:.4f}")
    return EXIT_OK


def cmd_feasible(ctx: RunContext, map_path: str) -> int:
    out = ctx.ensure_out_dir()
    corruption_map = _load_map(map_path)
    if not corruption_map.complete:
        raise InputError("corruption map is incomplete; run search to completion first")
    prompts = ctx.calibration_prompts()
    sampler = make_cache_word_sampler(ctx.model, prompts)
    hint = ctx.address_token
    filtered, feas = filter_feasible(
        corruption_map,
        sampler,
        ctx.constraint,
        ctx.layout,
        ctx.mapping,
        ctx.model.config,
        filled_len_hint=None if hint is None else int(hint),
        rho=ctx.rho,
    )
    payload = {"feasibility": feas.to_json(), "filtered_map": filtered.to_json()}
    report.write_payload(out, "feasibility", feas.to_json())
    report.write_payload(out, "filtered_map", filtered.to_json())
    report.write_envelope(out, "feasible", ctx.resolved, payload)
    report.write_feasibility_outputs(out, feas.to_json())
    for cls in feas.classes:
        status = "feasible" if cls.feasible else "INFEASIBLE"
        print(f"class {cls.target_class}: {status} ({len(cls.fallbacks) + bool(cls.primary)} survivors)")
    if not feas.all_feasible:
        return EXIT_INFEASIBLE
    return EXIT_OK


def cmd_oracle(ctx: RunContext, scope_spec: str) -> int:
    out = ctx.ensure_out_dir()
    policy = ctx.search_config.resolved_policy(ctx.model.config.cache_dtype)
    scope = _parse_scope(scope_spec, ctx.model.config, policy)
    prompts = ctx.calibration_prompts()
    matrix = exhaustive_search_oracle(
        ctx.model, prompts, scope, ctx.verbalizer, guard=ctx.oracle_guard
    )
    payload = matrix.to_json()
    report.write_payload(out, "oracle_asr", payload)
    report.write_envelope(out, "oracle", ctx.resolved, payload)
    report.write_asr_outputs(out, payload)
    print(f"oracle: {len(matrix.cells)} coordinates over {len(prompts)} samples")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cachetrap",
        description="KV-cache single-bit trigger search, evaluation, and feasibility modeling",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in [
        ("lss", "score layer sensitivity over the calibration set"),
        ("search", "run the full trigger search and write the corruption map"),
        ("attack-eval", "evaluate a corruption map on the victim set"),
        ("feasible", "filter a corruption map through the hardware constraints"),
        ("oracle", "brute-force ASR over an explicit coordinate scope"),
    ]:
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="run configuration JSON")
        p.add_argument("--out", default=None, help="output directory (overrides config)")
        p.add_argument("--seed", type=int, default=None, help="override search.seed")
        if name in ("attack-eval", "feasible"):
            p.add_argument("--map", required=True, help="corruption map JSON from search")
        if name == "attack-eval":
            p.add_argument("--target-class", type=int, default=None)
        if name == "oracle":
            p.add_argument("--scope", default="", help="e.g. layer=0-1;head=0;channel=0-3;bit=14,13")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args, extras = parser.parse_known_args(argv)
    try:
        args.overrides = _parse_overrides(extras)
        ctx = _load_context(args)
        if args.command == "lss":
            return cmd_lss(ctx)
        if args.command == "search":
            return cmd_search(ctx)
        if args.command == "attack-eval":
            return cmd_attack_eval(ctx, args.map, args.target_class)
        if args.command == "feasible":
            return cmd_feasible(ctx, args.map)
        if args.command == "oracle":
            return cmd_oracle(ctx, args.scope)
        raise InputError(f"unknown command {args.command!r}")
    except GuardError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_GUARD
    except (InputError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except CacheTrapError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except Exception as exc:  # pragma: no cover - internal failure surface
        print(f"internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
