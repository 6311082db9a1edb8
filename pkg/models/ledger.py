"""
Early-Exit Engine - Compute Ledger

Analytic operation counts per block and the running ledger the engine
charges while it generates. A ledger's reduction factor compares what the
full model would have spent on the same tokens against what was spent.

Units: Transformer costs count a multiply and an add as two operations;
Mamba costs count one multiply-accumulate as one. Ledgers are only compared
within one backbone kind.
"""

from fractions import Fraction
from typing import Union

from pydantic import BaseModel, Field

from models.errors import AccountingError

Number = Union[int, float, Fraction]


# =============================================================================
# Analytic block costs
# =============================================================================

def cost_block_transformer(seq_len: int, d_model: int) -> int:
    """One Transformer block over a fresh sequence: 24*T*d^2 + 4*T^2*d."""
    return 24 * seq_len * d_model * d_model + 4 * seq_len * seq_len * d_model


def cost_decode_step_transformer(context: int, d_model: int) -> int:
    """One cached decode step attending over `context` positions: 24*d^2 + 4*t*d."""
    return 24 * d_model * d_model + 4 * context * d_model


def cost_forward_transformer(n_new: int, n_cached: int, d_model: int) -> int:
    """
    One Transformer block over `n_new` tokens appended to `n_cached` cached ones.

    Reduces to cost_block_transformer when nothing is cached and to
    cost_decode_step_transformer(n_cached + 1) for a single new token.
    """
    return 24 * n_new * d_model * d_model + 4 * n_new * (n_cached + n_new) * d_model


def cost_block_mamba(d_model: int, n_groups: int, d_state: int) -> int:
    """One Mamba block for one token: 6*d^2 + 2*g*N*d."""
    return 6 * d_model * d_model + 2 * n_groups * d_state * d_model


def cost_mamba_mixer(d_model: int, d_inner: int, n_groups: int, d_state: int, d_out: int) -> int:
    """Multiply-accumulates of one selective-scan mixer step, projections only."""
    return 2 * d_model * d_inner + 2 * d_model * n_groups * d_state + d_inner * d_out


# =============================================================================
# Ledger
# =============================================================================

class ComputeLedger(BaseModel):
    """Operation counters for one generation stream (or a merge of several)."""

    ops_backbone: float = Field(default=0.0, ge=0.0)
    ops_classifiers: float = Field(default=0.0, ge=0.0)
    ops_recompute: float = Field(default=0.0, ge=0.0)
    ops_prefill: float = Field(default=0.0, ge=0.0)
    ops_reference: float = Field(default=0.0, ge=0.0)
    ops_reference_prefill: float = Field(default=0.0, ge=0.0)
    tokens: int = Field(default=0, ge=0)

    def _charge(self, field: str, ops: Number) -> None:
        if ops < 0:
            raise AccountingError(f"negative charge {ops} to {field}")
        setattr(self, field, getattr(self, field) + float(ops))

    def charge_backbone(self, ops: Number) -> None:
        self._charge("ops_backbone", ops)

    def charge_classifier(self, ops: Number) -> None:
        self._charge("ops_classifiers", ops)

    def charge_recompute(self, ops: Number) -> None:
        self._charge("ops_recompute", ops)

    def charge_prefill(self, ops: Number) -> None:
        self._charge("ops_prefill", ops)

    def charge_reference_prefill(self, ops: Number) -> None:
        self._charge("ops_reference_prefill", ops)

    def record_token(self, reference_ops: Number) -> None:
        """Close one generated token, charging what the full model would have spent."""
        self._charge("ops_reference", reference_ops)
        self.tokens += 1

    @property
    def ops_spent(self) -> float:
        return self.ops_backbone + self.ops_classifiers + self.ops_recompute

    def merge(self, other: "ComputeLedger") -> "ComputeLedger":
        return ComputeLedger(**{
            name: getattr(self, name) + getattr(other, name)
            for name in type(self).model_fields
        })

    def snapshot(self) -> "ComputeLedger":
        return self.model_copy()


def reduction_factor(ledger: ComputeLedger, include_prefill: bool = False) -> float:
    """
    Full-model operations divided by operations actually spent.

    Prefill is left out unless asked for, since it is identical under
    every exit configuration.

    Raises:
        AccountingError: no tokens were generated, or nothing was spent
    """
    if ledger.tokens == 0:
        raise AccountingError("no tokens recorded")
    spent = ledger.ops_spent
    reference = ledger.ops_reference
    if include_prefill:
        spent += ledger.ops_prefill
        reference += ledger.ops_reference_prefill
    if spent <= 0:
        raise AccountingError("zero operations spent")
    return reference / spent
