"""
Early-Exit Engine - Run Configuration

One pydantic model for everything a CLI run can be told: backbone shape,
exit setup, training budgets, sweep grid and output location. Values come
from defaults, then an optional key=value file, then command-line flags.
"""

from typing import List, Optional

from pydantic import BaseModel, Field, field_validator, model_validator

from config.settings import (
    BACKBONE_POLICIES, DEFAULT_BACKBONE_LEARNING_RATE, DEFAULT_CORPUS_PATH, DEFAULT_D_CONV,
    DEFAULT_D_MODEL, DEFAULT_D_STATE, DEFAULT_EXIT_COUNT,
    DEFAULT_EXIT_LEARNING_RATE, DEFAULT_MAX_SEQ_LEN, DEFAULT_N_BLOCKS,
    DEFAULT_N_GROUPS, DEFAULT_N_HEADS, DEFAULT_REPETITION_PENALTY,
    DEFAULT_THETAS, DEFAULT_TOP_K, EXIT_VARIANTS, PENALTY_SCOPES,
)
from models.exits import NEVER_EXIT, ExitCellConfig, ExitPlacement
from models.mamba import MambaConfig
from models.training import BackboneTrainConfig, ExitTrainConfig
from models.transformer import TransformerConfig


class RunConfig(BaseModel):
    """Validated settings of one engine run."""

    # Backbone
    backbone: str = Field(
        "transformer", description="Backbone architecture (transformer or mamba)")
    n_blocks: int = Field(DEFAULT_N_BLOCKS, ge=2, description="Number of residual blocks")
    d_model: int = Field(DEFAULT_D_MODEL, ge=1, description="Model width")
    n_heads: int = Field(DEFAULT_N_HEADS, ge=1, description="Attention heads (transformer)")
    max_seq_len: int = Field(DEFAULT_MAX_SEQ_LEN, ge=2, description="Longest context (transformer)")
    d_state: int = Field(DEFAULT_D_STATE, ge=1, description="Recurrent state size per channel (mamba)")
    d_conv: int = Field(DEFAULT_D_CONV, ge=1, description="Causal conv width (mamba)")
    n_groups: int = Field(DEFAULT_N_GROUPS, ge=1, description="B/C groups (mamba)")

    # Exits
    exit_variant: str = Field(
        "mamba", description="Exit classifier variant (calm, ffn or mamba)")
    exit_count: int = Field(DEFAULT_EXIT_COUNT, ge=1, description="Exits placed when placements are not given")
    placements: Optional[List[int]] = Field(None, description="Blocks carrying exits, e.g. 4,5,6")
    k: int = Field(DEFAULT_TOP_K, ge=1, description="Top-k width of the exit oracle")

    # Training
    corpus: str = Field(DEFAULT_CORPUS_PATH, description="Path of the training text file")
    seed: int = Field(0, description="Random seed")
    backbone_steps: int = Field(1500, ge=1, description="Backbone optimisation steps")
    backbone_lr: float = Field(DEFAULT_BACKBONE_LEARNING_RATE, ge=0.0, description="Backbone learning rate")
    exit_steps: int = Field(600, ge=1, description="Exit classifier optimisation steps")
    exit_lr: float = Field(DEFAULT_EXIT_LEARNING_RATE, ge=0.0, description="Exit classifier learning rate")
    batch_size: int = Field(16, ge=1, description="Windows per optimisation step")
    seq_len: int = Field(64, ge=1, description="Tokens per training window")

    # Sweep & generation
    thetas: List[float] = Field(list(DEFAULT_THETAS), min_length=1, description="Exit thresholds, increasing")
    policies: Optional[List[str]] = Field(None, description="Missing-state policies to sweep")
    eval_windows: int = Field(16, ge=1, description="Held-out windows scored per configuration")
    eval_length: int = Field(96, ge=2, description="Tokens per scored window")
    prompt_len: int = Field(32, ge=1, description="Prompt tokens before scoring/generation starts")
    gen_prompts: int = Field(8, ge=1, description="Free generations per configuration")
    gen_tokens: int = Field(48, ge=1, description="Tokens per free generation")
    repetition_penalty: float = Field(DEFAULT_REPETITION_PENALTY, ge=1.0, description="Repetition penalty factor")
    penalty_scope: str = Field(
        "skip", description="Where the penalty applies: skip (mamba skip policy only), all, none")
    include_prefill: bool = Field(False, description="Count prefill in the reduction factor")
    jobs: int = Field(1, ge=1, description="Sweep configurations evaluated in parallel")
    html: bool = Field(False, description="Also write an interactive HTML chart")

    # Output
    output_dir: str = Field("runs/default", description="Directory for checkpoints and reports")

    @field_validator("backbone")
    @classmethod
    def check_backbone(cls, v: str) -> str:
        if v not in BACKBONE_POLICIES:
            raise ValueError(f"unknown backbone '{v}'; use one of {sorted(BACKBONE_POLICIES)}")
        return v

    @field_validator("exit_variant")
    @classmethod
    def check_variant(cls, v: str) -> str:
        if v not in EXIT_VARIANTS:
            raise ValueError(f"unknown exit variant '{v}'; use one of {EXIT_VARIANTS}")
        return v

    @field_validator("penalty_scope")
    @classmethod
    def check_penalty_scope(cls, v: str) -> str:
        if v not in PENALTY_SCOPES:
            raise ValueError(f"unknown penalty scope '{v}'; use one of {PENALTY_SCOPES}")
        return v

    @field_validator("thetas")
    @classmethod
    def clamp_thresholds(cls, v: List[float]) -> List[float]:
        """Thresholds above 1 mean never exit; the grid must increase strictly."""
        if any(t < 0 for t in v):
            raise ValueError("thresholds must be nonnegative")
        clamped = [NEVER_EXIT if t > 1.0 else t for t in v]
        if any(b <= a for a, b in zip(clamped, clamped[1:])):
            raise ValueError(f"thresholds must be strictly increasing, got {v}")
        return clamped

    @model_validator(mode="after")
    def check_consistency(self):
        allowed = BACKBONE_POLICIES[self.backbone]
        if self.policies is not None:
            unknown = [p for p in self.policies if p not in allowed]
            if unknown:
                raise ValueError(f"policies {unknown} not available for {self.backbone}; use {allowed}")
        if self.backbone == "transformer" and self.d_model % self.n_heads:
            raise ValueError(f"d_model {self.d_model} is not divisible by n_heads {self.n_heads}")
        if self.prompt_len >= self.eval_length:
            raise ValueError("prompt_len must be shorter than eval_length")
        if self.placements is not None:
            ExitPlacement(n_blocks=self.n_blocks, blocks=self.placements)
        return self

    def backbone_config(self):
        if self.backbone == "transformer":
            return TransformerConfig(n_blocks=self.n_blocks, d_model=self.d_model,
                                     n_heads=self.n_heads, max_seq_len=self.max_seq_len)
        return MambaConfig(n_blocks=self.n_blocks, d_model=self.d_model, d_state=self.d_state,
                           d_conv=self.d_conv, n_groups=self.n_groups)

    def exit_placement(self) -> ExitPlacement:
        if self.placements is not None:
            return ExitPlacement(n_blocks=self.n_blocks, blocks=self.placements)
        return ExitPlacement.default(self.n_blocks, self.exit_count)

    def cell_config(self) -> ExitCellConfig:
        return ExitCellConfig(d_model=self.d_model)

    def active_policies(self) -> List[str]:
        return list(self.policies) if self.policies is not None else list(BACKBONE_POLICIES[self.backbone])

    def penalty_for(self, policy: Optional[str]) -> float:
        """Repetition penalty a configuration generates with."""
        if self.penalty_scope == "all":
            return self.repetition_penalty
        if self.penalty_scope == "skip" and self.backbone == "mamba" and policy == "skip":
            return self.repetition_penalty
        return 1.0

    def backbone_train_config(self) -> BackboneTrainConfig:
        return BackboneTrainConfig(steps=self.backbone_steps, batch_size=self.batch_size,
                                   seq_len=self.seq_len, learning_rate=self.backbone_lr, seed=self.seed)

    def exit_train_config(self) -> ExitTrainConfig:
        return ExitTrainConfig(steps=self.exit_steps, batch_size=self.batch_size, seq_len=self.seq_len,
                               learning_rate=self.exit_lr, k=self.k, seed=self.seed)
