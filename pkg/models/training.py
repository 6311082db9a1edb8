"""
Early-Exit Engine - Training

Two training stages:

1. Backbone: next-token cross-entropy with Adam over random windows of the
   corpus. The loop only uses forward_train, so it serves both backbones.
2. Exit classifiers: the backbone is frozen; each classifier learns whether
   the head applied at its block already predicts a token inside the final
   layer's top-k. Per-exit losses are combined with weights that favour
   early exits.
"""

import logging
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from config.settings import (
    DEFAULT_BACKBONE_LEARNING_RATE, DEFAULT_EXIT_LEARNING_RATE, DEFAULT_TOP_K,
)
from models.backbone import BackboneModel, build_backbone
from models.errors import ConfigurationError, IngestionError, TrainingError
from models.exits import ExitBank
from models.numkernel import (
    Adam, Tensor, clip_gradients, cross_entropy_logits, grad_of, mul, no_grad,
)

logger = logging.getLogger(__name__)


class BackboneTrainConfig(BaseModel):
    steps: int = Field(default=1500, ge=1)
    batch_size: int = Field(default=16, ge=1)
    seq_len: int = Field(default=64, ge=1)
    learning_rate: float = Field(default=DEFAULT_BACKBONE_LEARNING_RATE, ge=0.0)
    clip_norm: Optional[float] = Field(default=1.0, gt=0.0)
    seed: int = 0
    log_every: int = Field(default=100, ge=1)


class ExitTrainConfig(BaseModel):
    steps: int = Field(default=600, ge=1)
    batch_size: int = Field(default=16, ge=1)
    seq_len: int = Field(default=64, ge=1)
    learning_rate: float = Field(default=DEFAULT_EXIT_LEARNING_RATE, ge=0.0)
    k: int = Field(default=DEFAULT_TOP_K, ge=1)
    clip_norm: Optional[float] = Field(default=1.0, gt=0.0)
    seed: int = 0
    log_every: int = Field(default=100, ge=1)


class ExitLabelBatch(BaseModel):
    """Binary exit labels per placement, shaped like the input ids, and the loss weights."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    labels: Dict[int, np.ndarray]
    weights: Dict[int, float]


class TrainingReport(BaseModel):
    loss_trace: List[float] = []
    holdout_before: Optional[float] = None
    holdout_after: Optional[float] = None

    @property
    def final_loss(self) -> Optional[float]:
        return self.loss_trace[-1] if self.loss_trace else None


# =============================================================================
# Data
# =============================================================================

def sample_windows(tokens: Sequence[int], batch_size: int, length: int,
                   rng: np.random.Generator) -> np.ndarray:
    """
    Random (batch_size, length + 1) windows; inputs are [:, :-1], targets [:, 1:].

    Raises:
        IngestionError: the token stream is shorter than one window
    """
    stream = np.asarray(tokens, dtype=np.int64)
    if len(stream) < length + 1:
        raise IngestionError(f"need at least {length + 1} tokens, got {len(stream)}")
    starts = rng.integers(0, len(stream) - length, size=batch_size)
    return np.stack([stream[s:s + length + 1] for s in starts])


def fixed_windows(tokens: Sequence[int], count: int, length: int) -> np.ndarray:
    """Evenly spaced (count, length + 1) windows, for repeatable evaluation."""
    stream = np.asarray(tokens, dtype=np.int64)
    if len(stream) < length + 1:
        raise IngestionError(f"need at least {length + 1} tokens, got {len(stream)}")
    starts = np.linspace(0, len(stream) - length - 1, count).astype(np.int64)
    return np.stack([stream[s:s + length + 1] for s in starts])


# =============================================================================
# Backbone
# =============================================================================

def _check_loss(loss: Tensor, step: int) -> float:
    value = float(loss.data)
    if not np.isfinite(value):
        raise TrainingError(step, f"loss became {value}")
    return value


def next_token_loss(model: BackboneModel, windows: np.ndarray) -> Tensor:
    logits, _ = model.forward_train(windows[:, :-1])
    return cross_entropy_logits(logits, windows[:, 1:])


def train_backbone(model_config, tokens: Sequence[int], config: BackboneTrainConfig,
                   holdout: Optional[Sequence[int]] = None,
                   model: Optional[BackboneModel] = None) -> Tuple[BackboneModel, TrainingReport]:
    """
    Train a backbone for next-token prediction.

    Args:
        model_config: TransformerConfig or MambaConfig
        tokens: Training token stream
        config: Optimisation settings
        holdout: Optional held-out stream for a before/after loss
        model: Continue training this model instead of a fresh one

    Returns:
        The trained model and its training report
    """
    if model is None:
        model = build_backbone(model_config, seed=config.seed)
    rng = np.random.default_rng(config.seed)
    optimizer = Adam(model.params, config.learning_rate)
    report = TrainingReport()
    eval_windows = None
    if holdout is not None:
        eval_windows = fixed_windows(holdout, config.batch_size, config.seq_len)
        with no_grad():
            report.holdout_before = float(next_token_loss(model, eval_windows).data)

    logger.info(f"Training {model.kind} backbone for {config.steps} steps")
    for step in range(1, config.steps + 1):
        windows = sample_windows(tokens, config.batch_size, config.seq_len, rng)
        loss = next_token_loss(model, windows)
        value = _check_loss(loss, step)
        grads = grad_of(loss, model.params)
        clip_gradients(grads, config.clip_norm)
        optimizer.step(grads)
        report.loss_trace.append(value)
        if step % config.log_every == 0 or step == config.steps:
            logger.info(f"backbone step {step}/{config.steps}: loss {value:.4f}")

    if eval_windows is not None:
        with no_grad():
            report.holdout_after = float(next_token_loss(model, eval_windows).data)
        logger.info(f"Held-out loss {report.holdout_before:.4f} -> {report.holdout_after:.4f}")
    return model, report


# =============================================================================
# Exit classifiers
# =============================================================================

def decay_weights(placements: Sequence[int]) -> Dict[int, float]:
    """(P - i) / sum over placements, so the earliest exit weighs most."""
    count = len(placements)
    total = count * (count + 1) / 2
    return {block: (count - i) / total for i, block in enumerate(placements)}


def _top_k(logits: np.ndarray, k: int) -> np.ndarray:
    # stable sort: equal logits keep the lower id first
    return np.argsort(-logits, axis=-1, kind="stable")[..., :k]


def _distillation_batch(model: BackboneModel, ids: np.ndarray, placements: Sequence[int],
                        k: int) -> Tuple[Dict[int, Tensor], Dict[int, np.ndarray]]:
    if k > model.config.vocab_size:
        raise ConfigurationError(f"k={k} exceeds vocabulary size {model.config.vocab_size}")
    with no_grad():
        final_logits, hiddens = model.forward_train(ids)
        top = _top_k(final_logits.data, k)
        features, labels = {}, {}
        for block in placements:
            h = hiddens[block]
            prediction = model.head_logits(h).data.argmax(axis=-1)
            labels[block] = (top == prediction[..., None]).any(axis=-1).astype(np.int64)
            features[block] = model.final_normalize(h)
    return features, labels


def oracle_labels(model: BackboneModel, ids: np.ndarray, placements: Sequence[int],
                  k: int = DEFAULT_TOP_K) -> ExitLabelBatch:
    """
    Exit labels for every position of `ids`: 1 when the head applied at the
    placement predicts a token inside the final layer's top-k.
    """
    _, labels = _distillation_batch(model, np.asarray(ids), placements, k)
    return ExitLabelBatch(labels=labels, weights=decay_weights(placements))


def exit_loss(bank: ExitBank, features: Dict[int, Tensor], labels: Dict[int, np.ndarray],
              weights: Dict[int, float]) -> Tensor:
    total = None
    for block in bank.blocks:
        term = mul(cross_entropy_logits(bank.forward_train(block, features[block]), labels[block]),
                   weights[block])
        total = term if total is None else total + term
    return total


def train_classifiers(model: BackboneModel, bank: ExitBank, tokens: Sequence[int],
                      config: ExitTrainConfig,
                      holdout: Optional[Sequence[int]] = None) -> TrainingReport:
    """Train every classifier of `bank` jointly; the backbone is never updated."""
    rng = np.random.default_rng(config.seed)
    weights = decay_weights(bank.blocks)
    optimizer = Adam(bank.params, config.learning_rate)
    report = TrainingReport()

    def holdout_loss() -> Optional[float]:
        if holdout is None:
            return None
        windows = fixed_windows(holdout, config.batch_size, config.seq_len)[:, :-1]
        features, labels = _distillation_batch(model, windows, bank.blocks, config.k)
        with no_grad():
            return float(exit_loss(bank, features, labels, weights).data)

    report.holdout_before = holdout_loss()
    logger.info(f"Training {bank.variant} exits at blocks {bank.blocks} "
                f"for {config.steps} steps (k={config.k})")
    for step in range(1, config.steps + 1):
        ids = sample_windows(tokens, config.batch_size, config.seq_len, rng)[:, :-1]
        features, labels = _distillation_batch(model, ids, bank.blocks, config.k)
        loss = exit_loss(bank, features, labels, weights)
        value = _check_loss(loss, step)
        grads = grad_of(loss, bank.params)
        clip_gradients(grads, config.clip_norm)
        optimizer.step(grads)
        report.loss_trace.append(value)
        if step % config.log_every == 0 or step == config.steps:
            rate = np.mean([labels[b].mean() for b in bank.blocks])
            logger.info(f"exit step {step}/{config.steps}: loss {value:.4f}, exit-label rate {rate:.3f}")

    report.holdout_after = holdout_loss()
    return report
