"""
Early-Exit Engine - Exit Classifiers

Small binary classifiers attached after selected blocks. Each reads the
block's hidden state through the model's final normalization and emits two
logits, [continue, exit]; the exit probability is the confidence compared
against the policy threshold.

Variants:
    calm  - one linear layer (d -> 2)
    ffn   - d -> 4d -> SiLU -> 2
    mamba - a selective-scan mixer with output width 2, keeping one
            recurrent state per placement per stream
"""

import logging
import math
from typing import Dict, List, Literal, Optional, Tuple, Type

import numpy as np
from pydantic import BaseModel, Field, field_validator, model_validator

from config.settings import (
    CELL_D_CONV, CELL_D_STATE, CELL_N_GROUPS, DEFAULT_EXIT_COUNT, EXIT_LOGIT,
    FFN_EXPANSION, MAMBA_EXPANSION,
)
from models.backbone import init_matrix, make_params
from models.errors import ConfigurationError
from models.ledger import cost_mamba_mixer
from models.mamba import (
    MambaBlockParams, MambaLayerState, MixerDims, init_mixer_arrays,
    mixer_forward, mixer_parameter_shapes,
)
from models.numkernel import Tensor, add, matmul, silu

logger = logging.getLogger(__name__)

# Thresholds above 1 become this value; no confidence can reach it
NEVER_EXIT = float(np.nextafter(1.0, 2.0))

Variant = Literal["calm", "ffn", "mamba"]
StatePolicy = Literal["copy", "recompute", "skip"]


# =============================================================================
# Placement & policy
# =============================================================================

def placement_range(n_blocks: int) -> Tuple[int, int]:
    """Inclusive block range exits may sit in: second half, excluding the last block."""
    return math.ceil(n_blocks / 2), n_blocks - 2


def default_placements(n_blocks: int, count: int = DEFAULT_EXIT_COUNT) -> List[int]:
    low, high = placement_range(n_blocks)
    if high < low:
        return []
    if high - low + 1 <= count:
        return list(range(low, high + 1))
    return sorted({int(round(x)) for x in np.linspace(low, high, count)})


class ExitPlacement(BaseModel):
    n_blocks: int = Field(ge=1)
    blocks: List[int]

    @model_validator(mode="after")
    def _check_blocks(self):
        low, high = placement_range(self.n_blocks)
        if not self.blocks:
            raise ValueError(f"no exit placements for a {self.n_blocks}-block backbone")
        if any(later <= earlier for earlier, later in zip(self.blocks, self.blocks[1:])):
            raise ValueError(f"placements must be strictly increasing, got {self.blocks}")
        outside = [b for b in self.blocks if not low <= b <= high]
        if outside:
            raise ValueError(f"placements {outside} outside [{low}, {high}]")
        return self

    @classmethod
    def default(cls, n_blocks: int, count: int = DEFAULT_EXIT_COUNT) -> "ExitPlacement":
        return cls(n_blocks=n_blocks, blocks=default_placements(n_blocks, count))


class ExitPolicy(BaseModel):
    threshold: float = Field(ge=0.0)
    variant: Variant = "mamba"
    state_policy: StatePolicy = "recompute"

    @field_validator("threshold")
    @classmethod
    def _clamp_threshold(cls, value: float) -> float:
        return NEVER_EXIT if value > 1.0 else value


def should_exit(policy: ExitPolicy, confidence: float) -> bool:
    return confidence >= policy.threshold


class ExitCellConfig(BaseModel):
    """Dimensions the classifier costs depend on."""

    d_model: int = Field(ge=1)
    d_state: int = Field(default=CELL_D_STATE, ge=1)
    n_groups: int = Field(default=CELL_N_GROUPS, ge=1)
    d_conv: int = Field(default=CELL_D_CONV, ge=1)


def classifier_cost(variant: str, config: ExitCellConfig) -> int:
    """Analytic operations of one classifier evaluation."""
    d = config.d_model
    if variant == "calm":
        return 0
    if variant == "ffn":
        return 16 * d * d
    if variant == "mamba":
        return cost_mamba_mixer(d, MAMBA_EXPANSION * d, config.n_groups, config.d_state, 2)
    raise ConfigurationError(f"unknown exit variant '{variant}'")


# =============================================================================
# Classifiers
# =============================================================================

class ExitClassifier:
    """One classifier after block `block`; its tensors live under 'exits.{block}.'."""

    variant = ""
    negligible = False

    def __init__(self, block: int, cell: ExitCellConfig, params: Dict[str, Tensor]):
        self.block = block
        self.cell = cell
        self.prefix = f"exits.{block}."
        self.params = params

    @classmethod
    def parameter_shapes(cls, block: int, cell: ExitCellConfig) -> Dict[str, Tuple[int, ...]]:
        raise NotImplementedError

    @classmethod
    def init_arrays(cls, rng: np.random.Generator, block: int,
                    cell: ExitCellConfig) -> Dict[str, np.ndarray]:
        return {
            name: init_matrix(rng, *shape) if len(shape) == 2 else np.zeros(shape)
            for name, shape in cls.parameter_shapes(block, cell).items()
        }

    @property
    def executed_macs(self) -> int:
        raise NotImplementedError

    def forward_train(self, features: Tensor) -> Tensor:
        raise NotImplementedError

    def new_state(self) -> Optional[MambaLayerState]:
        return None

    def step_logits(self, features: Tensor, state: Optional[MambaLayerState]) -> np.ndarray:
        return self.forward_train(features).data[0, -1]

    def warm_up(self, features: Tensor, state: Optional[MambaLayerState]) -> None:
        pass

    def _p(self, field: str) -> Tensor:
        return self.params[self.prefix + field]


class CalmClassifier(ExitClassifier):
    variant = "calm"
    negligible = True

    @classmethod
    def parameter_shapes(cls, block, cell):
        return {f"exits.{block}.w": (cell.d_model, 2), f"exits.{block}.b": (2,)}

    @property
    def executed_macs(self) -> int:
        return 2 * self.cell.d_model

    def forward_train(self, features: Tensor) -> Tensor:
        return add(matmul(features, self._p("w")), self._p("b"))


class FfnClassifier(ExitClassifier):
    variant = "ffn"

    @classmethod
    def parameter_shapes(cls, block, cell):
        d, hidden = cell.d_model, FFN_EXPANSION * cell.d_model
        prefix = f"exits.{block}."
        return {
            f"{prefix}w1": (d, hidden),
            f"{prefix}b1": (hidden,),
            f"{prefix}w2": (hidden, 2),
            f"{prefix}b2": (2,),
        }

    @property
    def executed_macs(self) -> int:
        d = self.cell.d_model
        return d * FFN_EXPANSION * d + FFN_EXPANSION * d * 2

    def forward_train(self, features: Tensor) -> Tensor:
        hidden = silu(add(matmul(features, self._p("w1")), self._p("b1")))
        return add(matmul(hidden, self._p("w2")), self._p("b2"))


class MambaCellClassifier(ExitClassifier):
    variant = "mamba"

    def __init__(self, block, cell, params):
        super().__init__(block, cell, params)
        self.dims = self.cell_dims(cell)
        self.mixer = MambaBlockParams(params, self.prefix)

    @staticmethod
    def cell_dims(cell: ExitCellConfig) -> MixerDims:
        return MixerDims(cell.d_model, MAMBA_EXPANSION * cell.d_model, cell.d_state,
                         cell.d_conv, cell.n_groups, 2)

    @classmethod
    def parameter_shapes(cls, block, cell):
        return mixer_parameter_shapes(f"exits.{block}.", cls.cell_dims(cell))

    @classmethod
    def init_arrays(cls, rng, block, cell):
        return init_mixer_arrays(rng, f"exits.{block}.", cls.cell_dims(cell))

    @property
    def executed_macs(self) -> int:
        d = self.dims
        return cost_mamba_mixer(d.d_model, d.d_inner, d.n_groups, d.d_state, d.d_out)

    def forward_train(self, features: Tensor) -> Tensor:
        return mixer_forward(self.mixer, self.dims, features)

    def new_state(self) -> MambaLayerState:
        return MambaLayerState(self.dims)

    def step_logits(self, features: Tensor, state: Optional[MambaLayerState]) -> np.ndarray:
        return mixer_forward(self.mixer, self.dims, features, state).data[0, -1]

    def warm_up(self, features: Tensor, state: Optional[MambaLayerState]) -> None:
        mixer_forward(self.mixer, self.dims, features, state)


CLASSIFIERS: Dict[str, Type[ExitClassifier]] = {
    "calm": CalmClassifier,
    "ffn": FfnClassifier,
    "mamba": MambaCellClassifier,
}


def exit_parameter_shapes(variant: str, placement: ExitPlacement,
                          cell: ExitCellConfig) -> Dict[str, Tuple[int, ...]]:
    if variant not in CLASSIFIERS:
        raise ConfigurationError(f"unknown exit variant '{variant}'")
    shapes = {}
    for block in placement.blocks:
        shapes.update(CLASSIFIERS[variant].parameter_shapes(block, cell))
    return shapes


def exit_confidence(logits: np.ndarray) -> float:
    """Softmax probability of the exit logit."""
    shifted = logits - logits.max()
    weights = np.exp(shifted)
    return float(weights[EXIT_LOGIT] / weights.sum())


# =============================================================================
# Bank
# =============================================================================

class ExitBank:
    """
    All classifiers of one variant, one per placement, sharing a parameter dict.
    """

    def __init__(self, variant: str, placement: ExitPlacement, cell: ExitCellConfig,
                 params: Optional[Dict[str, Tensor]] = None, seed: int = 0):
        if variant not in CLASSIFIERS:
            raise ConfigurationError(f"unknown exit variant '{variant}'")
        self.variant = variant
        self.placement = placement
        self.cell = cell
        classifier_type = CLASSIFIERS[variant]
        if params is None:
            rng = np.random.default_rng(seed)
            arrays = {}
            for block in placement.blocks:
                arrays.update(classifier_type.init_arrays(rng, block, cell))
            params = make_params(arrays)
        self.params = params
        self.classifiers: Dict[int, ExitClassifier] = {
            block: classifier_type(block, cell, params) for block in placement.blocks
        }

    @property
    def blocks(self) -> List[int]:
        return list(self.placement.blocks)

    @property
    def negligible(self) -> bool:
        return CLASSIFIERS[self.variant].negligible

    def expected_shapes(self) -> Dict[str, Tuple[int, ...]]:
        return exit_parameter_shapes(self.variant, self.placement, self.cell)

    def new_stream_state(self) -> Dict[int, Optional[MambaLayerState]]:
        return {block: clf.new_state() for block, clf in self.classifiers.items()}

    def forward_train(self, block: int, features: Tensor) -> Tensor:
        return self.classifiers[block].forward_train(features)

    def confidence(self, block: int, features: Tensor,
                   state: Optional[MambaLayerState] = None) -> float:
        """Exit confidence for one token's normalized features (1, 1, d)."""
        return exit_confidence(self.classifiers[block].step_logits(features, state))

    def warm_up(self, block: int, features: Tensor, state: Optional[MambaLayerState]) -> None:
        self.classifiers[block].warm_up(features, state)
