"""
Early-Exit Engine - Backbone Base

Pieces shared by the Transformer and Mamba backbones: parameter
initialisation helpers, the final normalization and output head, and the
teacher-forced forward pass used for training and distillation.
"""

import hashlib
import logging
from typing import Dict, List, Tuple

import numpy as np

from config.settings import INIT_STD
from models.numkernel import Tensor, matmul, parameter, rms_norm

logger = logging.getLogger(__name__)


def init_matrix(rng: np.random.Generator, rows: int, cols: int, std: float = INIT_STD) -> np.ndarray:
    return rng.normal(0.0, std, size=(rows, cols))


class BackboneModel:
    """
    Common surface of a trained language-model backbone.

    Subclasses provide embed, block_forward, partial_forward, new_state,
    cached_length, block_ops and partial_ops; the engine only talks to
    that surface.
    """

    kind: str = ""
    ops_per_mac: int = 1

    def __init__(self, config, params: Dict[str, Tensor]):
        self.config = config
        self.params = params

    @property
    def n_blocks(self) -> int:
        return self.config.n_blocks

    @property
    def d_model(self) -> int:
        return self.config.d_model

    def expected_shapes(self) -> Dict[str, Tuple[int, ...]]:
        raise NotImplementedError

    def final_normalize(self, h: Tensor) -> Tensor:
        return rms_norm(h, self.params["final_norm"])

    def head_logits(self, h: Tensor) -> Tensor:
        return matmul(self.final_normalize(h), self.params["head"])

    def forward_train(self, ids: np.ndarray) -> Tuple[Tensor, List[Tensor]]:
        """
        Full-depth forward over a (batch, time) id array.

        Returns:
            Logits (batch, time, vocab) and the residual stream after
            every block
        """
        h = self.embed(np.asarray(ids))
        hiddens = []
        for index in range(self.n_blocks):
            h = self.block_forward(index, h)
            hiddens.append(h)
        return self.head_logits(h), hiddens

    def parameter_count(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))

    def fingerprint(self) -> str:
        digest = hashlib.sha256()
        for name in sorted(self.params):
            digest.update(name.encode())
            digest.update(np.ascontiguousarray(self.params[name].data).tobytes())
        return digest.hexdigest()


def make_params(arrays: Dict[str, np.ndarray]) -> Dict[str, Tensor]:
    return {name: parameter(value, name=name) for name, value in arrays.items()}


def build_backbone(config, params: Dict[str, Tensor] = None, seed: int = 0) -> BackboneModel:
    """Instantiate the backbone matching a TransformerConfig or MambaConfig."""
    from models.mamba import MambaConfig, MambaModel
    from models.transformer import TransformerConfig, TransformerModel

    if isinstance(config, TransformerConfig):
        model = TransformerModel(config, params=params, seed=seed)
    elif isinstance(config, MambaConfig):
        model = MambaModel(config, params=params, seed=seed)
    else:
        raise TypeError(f"unknown backbone config {type(config).__name__}")
    logger.debug(f"Built {model.kind} backbone with {model.parameter_count()} parameters")
    return model
