"""
Early-Exit Engine - Configuration Settings

This module contains the fixed parameters of the engine: default model
dimensions, numeric epsilons, recomputation charges, exit defaults,
degenerate-output thresholds and the sweep report layout.
"""

from fractions import Fraction
from typing import Dict, List, Tuple


# =============================================================================
# NUMERIC KERNEL
# =============================================================================

# Guards the division inside RMS normalization (output = x * gain / max(rms, eps))
NORM_EPSILON = 1e-6

# Standard deviation of freshly initialised projection matrices
INIT_STD = 0.02


# =============================================================================
# TOKENIZATION
# =============================================================================

BYTE_VOCAB = 256
BOS_ID = 256
VOCAB_SIZE = 257

# Desk runs train on a public-domain book of at least this size (see README)
DEFAULT_CORPUS_PATH = "data/corpus.txt"
MIN_CORPUS_BYTES = 100_000


# =============================================================================
# BACKBONE DEFAULTS (desk scale)
# =============================================================================

DEFAULT_D_MODEL = 64
DEFAULT_N_BLOCKS = 8
DEFAULT_N_HEADS = 4
DEFAULT_MAX_SEQ_LEN = 512

# Transformer FFN width is fixed at 4 x d_model
FFN_EXPANSION = 4

# Mamba: d_inner = 2 x d_model
MAMBA_EXPANSION = 2
DEFAULT_D_STATE = 8
DEFAULT_D_CONV = 4
DEFAULT_N_GROUPS = 1

# Range the per-channel step size is initialised in (log-uniform)
DT_INIT_RANGE: Tuple[float, float] = (1e-3, 1e-1)


# =============================================================================
# OPERATION ACCOUNTING
# =============================================================================

# Transformer costs count multiply and add separately, Mamba costs count multiply-accumulates
OPS_PER_MAC_TRANSFORMER = 2
OPS_PER_MAC_MAMBA = 1

# Share of a block spent when a skipped block's state is recomputed
RECOMPUTE_FRACTION_TRANSFORMER = Fraction(1, 6)
RECOMPUTE_FRACTION_MAMBA = Fraction(9, 26)


# =============================================================================
# EARLY EXITS
# =============================================================================

DEFAULT_EXIT_COUNT = 4

# Index of the "exit" logit in every classifier's two outputs
EXIT_LOGIT = 1

EXIT_VARIANTS: List[str] = ["calm", "ffn", "mamba"]

# Missing-state policies available per backbone kind
BACKBONE_POLICIES: Dict[str, List[str]] = {
    "transformer": ["copy", "recompute"],
    "mamba": ["recompute", "skip"],
}

# The MambaCell classifier keeps its state small
CELL_D_STATE = 8
CELL_N_GROUPS = 1
CELL_D_CONV = 4

# Threshold grid swept by default
DEFAULT_THETAS: List[float] = [0.5, 0.6, 0.7, 0.8, 0.9, 0.95, 0.99]


# =============================================================================
# TRAINING
# =============================================================================

DEFAULT_TOP_K = 1
DEFAULT_EXIT_LEARNING_RATE = 3e-4
DEFAULT_BACKBONE_LEARNING_RATE = 1e-3
ADAM_BETAS: Tuple[float, float] = (0.9, 0.999)
ADAM_EPSILON = 1e-8

# Share of the corpus kept aside for held-out evaluation
HOLDOUT_FRACTION = 0.1


# =============================================================================
# GENERATION & DEGENERATE OUTPUT
# =============================================================================

DEFAULT_REPETITION_PENALTY = 1.2

# "skip" applies the penalty only under the Mamba state-skip policy
PENALTY_SCOPES: List[str] = ["skip", "all", "none"]

# A generation is degenerate once one token repeats this many times in a row
DEGENERATE_RUN_LENGTH = 10

# A configuration is invalid when more than this share of generations degenerate
INVALID_DEGENERATE_FRACTION = 0.05


# =============================================================================
# SWEEP REPORT
# =============================================================================

CSV_COLUMNS: List[str] = [
    "config_id", "backbone", "exit_variant", "policy", "theta", "prune_p",
    "accuracy", "perplexity", "reduction_factor", "ops_backbone",
    "ops_classifiers", "ops_recompute", "mean_exit_depth",
    "degenerate_fraction", "valid",
]

CHECKPOINT_FORMAT_VERSION = 1

SERIES_COLORS: Dict[str, str] = {
    "copy": "#6366f1",
    "recompute": "#10b981",
    "skip": "#f59e0b",
    "prune": "#ef4444",
}


# =============================================================================
# CLI EXIT CODES
# =============================================================================

ERROR_EXIT_CODES: Dict[str, int] = {
    "engine": 1,
    "configuration": 2,
    "ingestion": 3,
    "checkpoint": 4,
    "io": 5,
    "training": 6,
    "capacity": 7,
    "policy": 8,
    "accounting": 9,
    "dimension": 10,
    "label": 11,
    "connectivity": 12,
    "discretization": 13,
}


# =============================================================================
# UI CONFIGURATION
# =============================================================================

UI_CONFIG = {
    "page_title": "Early-Exit Sweep Explorer",
    "page_icon": "⏱️",
    "layout": "wide",
    "initial_sidebar_state": "expanded",
}
