"""Single-bit KV-cache corruption: search, injection, evaluation, feasibility."""

from .bitflip import (
    LAST_PREFIX,
    BitCoordinate,
    BitPolicy,
    FaultReceipt,
    apply_fault,
    candidate_bits,
    flip_bit,
    read_bit,
    revert_fault,
)
from .cache import KVCache, word_offset
from .config import ModelConfig
from .ctkv import load_model, load_model_path, save_model, save_model_path
from .data import (
    LabeledExample,
    LabeledSet,
    Prompt,
    TokenizerSpec,
    Verbalizer,
    build_prompt,
    build_prompts,
    load_labeled_jsonl,
    sample_calibration,
    tokenize,
)
from .demo import build_trojan_demo_model
from .evaluation import AttackEvaluation, evaluate_attack
from .fault_model import (
    DramMapping,
    FeasibilityConstraint,
    MemoryLayoutModel,
    bank_of,
    filter_feasible,
    linear_address,
)
from .runtime import (
    FaultHook,
    HiddenTrace,
    Model,
    build_synthetic_model,
    decode_classify,
    decode_logits,
    next_token_logits,
    prefill,
)
from .search import (
    ASRMatrix,
    CandidateSet,
    CorruptionMap,
    CVSTable,
    LayerSubset,
    LSSReport,
    OracleScope,
    SearchConfig,
    TokenSelector,
    build_corruption_map,
    calibrate_asr,
    compute_cvs,
    compute_lss,
    exhaustive_search_oracle,
    run_search,
    select_sensitive_layers,
    select_topk,
)

__version__ = "0.1.0"
