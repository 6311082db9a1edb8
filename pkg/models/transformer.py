"""
Early-Exit Engine - Transformer Backbone

Decoder-only Transformer: learned token and absolute position embeddings,
pre-normalization residual blocks (causal multi-head attention, then a
SiLU feed-forward of width 4*d_model) and an untied output head.

Prefill and cached decoding share one block function; a block always
attends over whatever its cache holds plus the new positions.
"""

import logging
import math
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, Field, model_validator

from config.settings import (
    DEFAULT_D_MODEL, DEFAULT_MAX_SEQ_LEN, DEFAULT_N_BLOCKS, DEFAULT_N_HEADS,
    FFN_EXPANSION, INIT_STD, OPS_PER_MAC_TRANSFORMER,
    RECOMPUTE_FRACTION_TRANSFORMER, VOCAB_SIZE,
)
from models.backbone import BackboneModel, init_matrix, make_params
from models.errors import CapacityError, PolicyError
from models.ledger import cost_forward_transformer
from models.numkernel import (
    Tensor, add, embedding, masked_fill, matmul, mul, permute, reshape,
    rms_norm, silu, softmax_rows,
)

logger = logging.getLogger(__name__)


class TransformerConfig(BaseModel):
    n_blocks: int = Field(default=DEFAULT_N_BLOCKS, ge=1)
    d_model: int = Field(default=DEFAULT_D_MODEL, ge=1)
    n_heads: int = Field(default=DEFAULT_N_HEADS, ge=1)
    vocab_size: int = Field(default=VOCAB_SIZE, ge=1)
    max_seq_len: int = Field(default=DEFAULT_MAX_SEQ_LEN, ge=1)

    @model_validator(mode="after")
    def _heads_divide_width(self):
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model {self.d_model} is not divisible by n_heads {self.n_heads}")
        return self

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    @property
    def d_ff(self) -> int:
        return FFN_EXPANSION * self.d_model


BLOCK_FIELDS = ("norm1", "w_q", "w_k", "w_v", "w_o", "norm2", "w_ff1", "w_ff2")


class TransformerBlockParams:
    """Named view of one block's tensors inside the model's parameter dict."""

    __slots__ = BLOCK_FIELDS

    def __init__(self, params: Dict[str, Tensor], index: int):
        for field in BLOCK_FIELDS:
            setattr(self, field, params[f"blocks.{index}.{field}"])


def transformer_parameter_shapes(config: TransformerConfig) -> Dict[str, Tuple[int, ...]]:
    d, ff = config.d_model, config.d_ff
    shapes: Dict[str, Tuple[int, ...]] = {
        "embed.tokens": (config.vocab_size, d),
        "embed.positions": (config.max_seq_len, d),
    }
    for i in range(config.n_blocks):
        shapes.update({
            f"blocks.{i}.norm1": (d,),
            f"blocks.{i}.w_q": (d, d),
            f"blocks.{i}.w_k": (d, d),
            f"blocks.{i}.w_v": (d, d),
            f"blocks.{i}.w_o": (d, d),
            f"blocks.{i}.norm2": (d,),
            f"blocks.{i}.w_ff1": (d, ff),
            f"blocks.{i}.w_ff2": (ff, d),
        })
    shapes["final_norm"] = (d,)
    shapes["head"] = (d, config.vocab_size)
    return shapes


def init_transformer_params(config: TransformerConfig, seed: int = 0) -> Dict[str, Tensor]:
    rng = np.random.default_rng(seed)
    residual_std = INIT_STD / math.sqrt(2 * config.n_blocks)
    arrays = {}
    for name, shape in transformer_parameter_shapes(config).items():
        if len(shape) == 1:
            arrays[name] = np.ones(shape)
        elif name.endswith(("w_o", "w_ff2")):
            arrays[name] = init_matrix(rng, *shape, std=residual_std)
        else:
            arrays[name] = init_matrix(rng, *shape)
    return make_params(arrays)


class KVCache:
    """
    Per-block keys and values of one generation stream.

    Storage is preallocated to max_seq_len rows per block; `fill[i]` counts
    the rows block i holds. Rows are appended, never rewritten.
    """

    def __init__(self, n_blocks: int, max_seq_len: int, d_model: int):
        self.capacity = max_seq_len
        self.keys = np.zeros((n_blocks, max_seq_len, d_model))
        self.values = np.zeros((n_blocks, max_seq_len, d_model))
        self.fill: List[int] = [0] * n_blocks

    def append(self, block: int, keys: np.ndarray, values: np.ndarray) -> None:
        start = self.fill[block]
        stop = start + keys.shape[0]
        if stop > self.capacity:
            raise CapacityError(
                f"block {block} cache holds {start} of {self.capacity} positions, "
                f"cannot add {keys.shape[0]}"
            )
        self.keys[block, start:stop] = keys
        self.values[block, start:stop] = values
        self.fill[block] = stop

    def view(self, block: int) -> Tuple[np.ndarray, np.ndarray]:
        n = self.fill[block]
        return self.keys[block, :n], self.values[block, :n]

    def row(self, block: int, position: int) -> Tuple[np.ndarray, np.ndarray]:
        if position >= self.fill[block]:
            raise PolicyError(f"block {block} has no cache entry at position {position}")
        return self.keys[block, position], self.values[block, position]


class TransformerModel(BackboneModel):
    """Transformer backbone with a block-level API for early-exit decoding."""

    kind = "transformer"
    ops_per_mac = OPS_PER_MAC_TRANSFORMER

    def __init__(self, config: TransformerConfig, params: Optional[Dict[str, Tensor]] = None,
                 seed: int = 0):
        super().__init__(config, params if params is not None else init_transformer_params(config, seed))
        self._blocks = [TransformerBlockParams(self.params, i) for i in range(config.n_blocks)]

    def expected_shapes(self) -> Dict[str, Tuple[int, ...]]:
        return transformer_parameter_shapes(self.config)

    def block(self, index: int) -> TransformerBlockParams:
        return self._blocks[index]

    def new_state(self) -> KVCache:
        return KVCache(self.n_blocks, self.config.max_seq_len, self.d_model)

    def cached_length(self, state: KVCache, index: int) -> int:
        return state.fill[index]

    # -------------------------------------------------------------------------
    # Forward pieces
    # -------------------------------------------------------------------------

    def embed(self, ids: np.ndarray, start: int = 0) -> Tensor:
        ids = np.asarray(ids)
        length = ids.shape[-1]
        if start + length > self.config.max_seq_len:
            raise CapacityError(
                f"positions {start}..{start + length - 1} exceed max_seq_len {self.config.max_seq_len}"
            )
        tokens = embedding(self.params["embed.tokens"], ids)
        positions = embedding(self.params["embed.positions"], np.arange(start, start + length))
        return add(tokens, positions)

    def _attend(self, q: Tensor, keys: Tensor, values: Tensor, offset: int) -> Tensor:
        batch, length, d = q.shape
        span = keys.shape[1]
        heads, d_head = self.config.n_heads, self.config.d_head

        qh = permute(reshape(q, (batch, length, heads, d_head)), (0, 2, 1, 3))
        kh = permute(reshape(keys, (batch, span, heads, d_head)), (0, 2, 3, 1))
        vh = permute(reshape(values, (batch, span, heads, d_head)), (0, 2, 1, 3))

        scores = mul(matmul(qh, kh), 1.0 / math.sqrt(d_head))
        future = np.arange(span)[None, :] > (offset + np.arange(length))[:, None]
        if future.any():
            scores = masked_fill(scores, future, -np.inf)
        mixed = matmul(softmax_rows(scores), vh)
        return reshape(permute(mixed, (0, 2, 1, 3)), (batch, length, d))

    def block_forward(self, index: int, h: Tensor, state: Optional[KVCache] = None) -> Tensor:
        """
        Run block `index` on new positions h (batch, T, d).

        With a cache (batch 1) the new keys/values are appended first and
        attention spans every cached position; without one the block sees
        only h, which is the training path.
        """
        block = self._blocks[index]
        normed = rms_norm(h, block.norm1)
        q = matmul(normed, block.w_q)
        k = matmul(normed, block.w_k)
        v = matmul(normed, block.w_v)

        if state is None:
            keys, values, offset = k, v, 0
        else:
            offset = state.fill[index]
            state.append(index, k.data[0], v.data[0])
            cached_k, cached_v = state.view(index)
            keys, values = Tensor(cached_k[None]), Tensor(cached_v[None])

        h = add(h, matmul(self._attend(q, keys, values, offset), block.w_o))
        hidden = silu(matmul(rms_norm(h, block.norm2), block.w_ff1))
        return add(h, matmul(hidden, block.w_ff2))

    def partial_forward(self, index: int, h: Tensor, state: KVCache) -> None:
        """Fill block `index`'s cache row from h without running attention or the FFN."""
        block = self._blocks[index]
        normed = rms_norm(h, block.norm1)
        k = matmul(normed, block.w_k)
        v = matmul(normed, block.w_v)
        state.append(index, k.data[0], v.data[0])

    # -------------------------------------------------------------------------
    # Costs
    # -------------------------------------------------------------------------

    def block_ops(self, n_new: int, n_cached: int) -> int:
        return cost_forward_transformer(n_new, n_cached, self.d_model)

    def partial_ops(self) -> float:
        """The key/value share of a decode step's context-independent projections."""
        projections = cost_forward_transformer(1, 0, self.d_model) - 4 * self.d_model
        return float(RECOMPUTE_FRACTION_TRANSFORMER * projections)


def kv_copy_forward(state: KVCache, source_block: int, target_blocks: Sequence[int],
                    position: int) -> None:
    """
    Give every skipped block the exit block's key/value row for `position`.

    Raises:
        PolicyError: the source row is missing or a target is out of step
    """
    k, v = state.row(source_block, position)
    for block in target_blocks:
        if state.fill[block] != position:
            raise PolicyError(
                f"block {block} holds {state.fill[block]} rows, expected {position} before copy"
            )
        state.append(block, k[None], v[None])
