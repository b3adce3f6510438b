"""Formulaic alpha mining: an RPN expression DSL with legal-action masking,
a panel evaluator, a linearly combined alpha pool fit by gradient descent,
a masked-PPO miner whose reward is the pool's combined IC, and a
top-k/drop-n backtester.
"""

from .agent import ActorCritic, PpoConfig, TrainResult, gradient_check, train
from .backtest import BacktestConfig, BacktestReport, run_topk_dropn, summarize
from .dsl import (
    DEFAULT_VOCAB,
    MAX_TOKENS,
    Expression,
    Vocabulary,
    parse_infix,
    parse_rpn,
)
from .env import MiningEnv, uniform_policy
from .errors import (
    AlphamineError,
    ContractViolation,
    DataError,
    DegenerateVectorError,
    EmptyPoolError,
    ExpressionParseError,
    GenerationError,
    OptimizationError,
    UpdateError,
)
from .evaluator import AlphaMatrix, evaluate, semantic_validity
from .metrics import (
    average_ranks,
    daily_ic,
    mean_ic,
    normalize_cross_section,
    normalize_matrix,
    rank_ic,
)
from .panel import FEATURE_NAMES, PanelData, TargetSpec, compute_target, load_csv, write_csv
from .pool import AlphaPool, GdConfig, combine
from .synth import SynthSpec, synth_generate

__version__ = "0.1.0"

__all__ = [
    "ActorCritic",
    "AlphaMatrix",
    "AlphaPool",
    "AlphamineError",
    "BacktestConfig",
    "BacktestReport",
    "ContractViolation",
    "DEFAULT_VOCAB",
    "DataError",
    "DegenerateVectorError",
    "EmptyPoolError",
    "Expression",
    "ExpressionParseError",
    "FEATURE_NAMES",
    "GdConfig",
    "GenerationError",
    "MAX_TOKENS",
    "MiningEnv",
    "OptimizationError",
    "PanelData",
    "PpoConfig",
    "SynthSpec",
    "TargetSpec",
    "TrainResult",
    "UpdateError",
    "Vocabulary",
    "average_ranks",
    "combine",
    "compute_target",
    "daily_ic",
    "evaluate",
    "gradient_check",
    "load_csv",
    "mean_ic",
    "normalize_cross_section",
    "normalize_matrix",
    "parse_infix",
    "parse_rpn",
    "rank_ic",
    "run_topk_dropn",
    "semantic_validity",
    "summarize",
    "synth_generate",
    "train",
    "uniform_policy",
    "write_csv",
]
