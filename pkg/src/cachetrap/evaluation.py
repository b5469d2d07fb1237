"""Victim-application evaluation of a finished corruption map.

For each mapped class, every victim sample is prefilled normally, the
class's single-bit trigger is applied, and the decode step runs over the
corrupted cache. Reported alongside: accuracy with the fault machinery
armed-but-unused, which must coincide exactly with a faultless baseline
because an unfired trigger leaves no trace.
"""

from __future__ import annotations

from dataclasses import dataclass

from .bitflip import revert_fault
from .data import Prompt, Verbalizer
from .errors import InputError, UndefinedPredictionError
from .runtime import FaultHook, Model, decode_classify, prefill
from .search import CorruptionMap


@dataclass
class ClassAttackOutcome:
    target_class: int
    trigger_asr: float
    forced_count: int
    undefined_count: int
    noop_count: int

    def to_json(self) -> dict:
        return {
            "class": self.target_class,
            "trigger_asr": self.trigger_asr,
            "forced_count": self.forced_count,
            "undefined_count": self.undefined_count,
            "noop_count": self.noop_count,
        }


@dataclass
class AttackEvaluation:
    baseline_accuracy: float
    no_trigger_accuracy: float
    n_samples: int
    outcomes: list[ClassAttackOutcome]

    def to_json(self) -> dict:
        return {
            "kind": "attack_eval",
            "baseline_accuracy": self.baseline_accuracy,
            "no_trigger_accuracy": self.no_trigger_accuracy,
            "n_samples": self.n_samples,
            "classes": [o.to_json() for o in self.outcomes],
        }


def evaluate_attack(
    model: Model,
    prompts: list[Prompt],
    corruption_map: CorruptionMap,
    verbalizer: Verbalizer,
    target_classes: list[int] | None = None,
) -> AttackEvaluation:
    """Trigger ASR per mapped class plus armed-but-unused accuracy on the victim set."""
    if not prompts:
        raise InputError("victim set is empty")
    if target_classes is None:
        target_classes = [t.target_class for t in corruption_map.triggers]
    triggers = []
    for cls in target_classes:
        try:
            triggers.append(corruption_map.trigger_for(cls))
        except KeyError:
            raise InputError(f"class {cls} is not in the corruption map") from None

    baseline_hits = 0
    unused_hits = 0
    forced = {t.target_class: 0 for t in triggers}
    undefined = {t.target_class: 0 for t in triggers}
    noop = {t.target_class: 0 for t in triggers}

    for p in prompts:
        cache, _ = prefill(model, p.prefix)

        pred, _ = decode_classify(model, cache, p.cue, verbalizer, hook=None)
        baseline_hits += int(pred == p.label)

        idle_hook = FaultHook(coordinate=triggers[0].coordinate, armed=False)
        pred_idle, _ = decode_classify(model, cache, p.cue, verbalizer, hook=idle_hook)
        unused_hits += int(pred_idle == p.label)

        for trigger in triggers:
            hook = FaultHook(coordinate=trigger.coordinate, armed=True)
            try:
                pred_hit, _ = decode_classify(model, cache, p.cue, verbalizer, hook)
                forced[trigger.target_class] += int(pred_hit == trigger.target_class)
            except UndefinedPredictionError:
                undefined[trigger.target_class] += 1
            finally:
                if hook.last_receipt is not None:
                    revert_fault(cache, hook.last_receipt)
            if hook.last_receipt is not None and not hook.last_receipt.changed:
                noop[trigger.target_class] += 1

    n = len(prompts)
    outcomes = [
        ClassAttackOutcome(
            target_class=t.target_class,
            trigger_asr=forced[t.target_class] / n,
            forced_count=forced[t.target_class],
            undefined_count=undefined[t.target_class],
            noop_count=noop[t.target_class],
        )
        for t in triggers
    ]
    return AttackEvaluation(
        baseline_accuracy=baseline_hits / n,
        no_trigger_accuracy=unused_hits / n,
        n_samples=n,
        outcomes=outcomes,
    )
