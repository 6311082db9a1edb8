"""
Early-Exit Engine - Request & Result Records

Pydantic models for what goes into a generation run and what comes out of
it, plus the per-configuration record a sweep reports.
"""

from typing import Dict, List, Optional, Union

from pydantic import BaseModel, Field, field_validator, model_validator

from config.settings import CSV_COLUMNS, INVALID_DEGENERATE_FRACTION
from models.errors import ConfigurationError
from models.exits import ExitPolicy
from models.ledger import ComputeLedger


class PruneSpec(BaseModel):
    """
    Static layer pruning: disable p blocks, working back from the one before
    the last, and always keep the final block.
    """

    p: int = Field(..., ge=0, description="Number of blocks to disable")

    def check(self, n_blocks: int) -> None:
        if self.p > n_blocks - 2:
            raise ConfigurationError(
                f"cannot prune {self.p} blocks from a {n_blocks}-block backbone (max {n_blocks - 2})"
            )

    def disabled_blocks(self, n_blocks: int) -> List[int]:
        self.check(n_blocks)
        return list(range(n_blocks - 1 - self.p, n_blocks - 1))


Mode = Optional[Union[ExitPolicy, PruneSpec]]


class GenerationRequest(BaseModel):
    """One greedy generation job."""

    prompt_ids: List[int] = Field(..., min_length=1, description="Prompt token ids")
    max_new_tokens: int = Field(..., ge=1, description="Tokens to generate")
    mode: Mode = Field(None, description="Exit policy, prune spec, or None for the full model")
    repetition_penalty: float = Field(1.0, ge=1.0, description="1.0 disables the penalty")

    @field_validator("prompt_ids")
    @classmethod
    def check_ids(cls, v: List[int]) -> List[int]:
        """Token ids are never negative."""
        if any(i < 0 for i in v):
            raise ValueError("prompt ids must be nonnegative")
        return v


class GenerationResult(BaseModel):
    """Generated ids, the exit depth of every step, and the stream's ledger."""

    tokens: List[int]
    exit_depths: List[int]
    ledger: ComputeLedger
    degenerate: bool = False

    @property
    def mean_exit_depth(self) -> float:
        if not self.exit_depths:
            return 0.0
        return sum(self.exit_depths) / len(self.exit_depths)


class SequenceScore(BaseModel):
    """Teacher-forced next-token quality of one window."""

    correct: int = 0
    count: int = 0
    nll: float = 0.0
    exit_depths: List[int] = []
    ledger: ComputeLedger = Field(default_factory=ComputeLedger)

    def merge(self, other: "SequenceScore") -> "SequenceScore":
        return SequenceScore(
            correct=self.correct + other.correct,
            count=self.count + other.count,
            nll=self.nll + other.nll,
            exit_depths=self.exit_depths + other.exit_depths,
            ledger=self.ledger.merge(other.ledger),
        )


class SweepRecord(BaseModel):
    """
    One evaluated configuration.

    `valid` is derived from the degenerate fraction when not given, and must
    agree with it when it is.
    """

    config_id: str
    backbone: str
    exit_variant: str = ""
    policy: str
    theta: Optional[float] = None
    prune_p: Optional[int] = None

    accuracy: float = Field(ge=0.0, le=1.0)
    perplexity: float = Field(ge=0.0)
    reduction_factor: float = Field(ge=0.0)
    ops_backbone: float = Field(ge=0.0)
    ops_classifiers: float = Field(ge=0.0)
    ops_recompute: float = Field(ge=0.0)
    ops_reference: float = Field(default=0.0, ge=0.0)
    tokens: int = Field(default=0, ge=0)
    mean_exit_depth: float = Field(ge=0.0)
    degenerate_fraction: float = Field(ge=0.0, le=1.0)
    valid: Optional[bool] = None

    @model_validator(mode="after")
    def derive_validity(self):
        """Valid exactly when at most 5% of generations degenerate."""
        expected = self.degenerate_fraction <= INVALID_DEGENERATE_FRACTION
        if self.valid is None:
            self.valid = expected
        elif self.valid != expected:
            raise ValueError(
                f"valid={self.valid} contradicts degenerate fraction {self.degenerate_fraction}"
            )
        return self

    def to_row(self) -> Dict[str, object]:
        """CSV row in report column order."""
        data = self.model_dump()
        return {column: data[column] for column in CSV_COLUMNS}
