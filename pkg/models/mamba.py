"""
Early-Exit Engine - Mamba Backbone

Selective state-space backbone. Each block is a residual mixer:

    normalize -> project to x, z (d -> d_inner) and B, C (d -> groups*d_state)
    -> causal depthwise conv over x -> SiLU -> input-dependent step size
    -> selective scan -> gate with SiLU(z) -> project back

The same mixer, with its own dimensions and an output width of 2, is the
MambaCell exit classifier.

Recurrence per channel c and state slot n, with g the channel's group:

    x_t[c, n] = exp(delta_t[c] * A[c, n]) * x_{t-1}[c, n] + delta_t[c] * u_t[c] * B_t[g, n]
    y_t[c]    = sum_n C_t[g, n] * x_t[c, n] + D[c] * u_t[c]
"""

import logging
import math
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, Field, model_validator

from config.settings import (
    DEFAULT_D_CONV, DEFAULT_D_MODEL, DEFAULT_D_STATE, DEFAULT_N_BLOCKS,
    DEFAULT_N_GROUPS, DT_INIT_RANGE, INIT_STD, MAMBA_EXPANSION,
    OPS_PER_MAC_MAMBA, RECOMPUTE_FRACTION_MAMBA, VOCAB_SIZE,
)
from models.backbone import BackboneModel, init_matrix, make_params
from models.errors import DiscretizationError, PolicyError
from models.ledger import cost_mamba_mixer
from models.numkernel import (
    Tensor, add, embedding, exp, matmul, mul, neg, record_op, reshape,
    rms_norm, silu, softplus,
)

logger = logging.getLogger(__name__)


class MambaConfig(BaseModel):
    n_blocks: int = Field(default=DEFAULT_N_BLOCKS, ge=1)
    d_model: int = Field(default=DEFAULT_D_MODEL, ge=1)
    d_inner: Optional[int] = Field(default=None, ge=1)
    d_state: int = Field(default=DEFAULT_D_STATE, ge=1)
    d_conv: int = Field(default=DEFAULT_D_CONV, ge=1)
    n_groups: int = Field(default=DEFAULT_N_GROUPS, ge=1)
    vocab_size: int = Field(default=VOCAB_SIZE, ge=1)

    @model_validator(mode="after")
    def _fill_inner_width(self):
        if self.d_inner is None:
            self.d_inner = MAMBA_EXPANSION * self.d_model
        if self.d_inner % self.n_groups:
            raise ValueError(f"d_inner {self.d_inner} is not divisible by n_groups {self.n_groups}")
        return self


class MixerDims(NamedTuple):
    d_model: int
    d_inner: int
    d_state: int
    d_conv: int
    n_groups: int
    d_out: int


MIXER_FIELDS = ("norm", "w_x", "w_z", "w_b", "w_c", "conv_w", "conv_b",
                "dt_w", "dt_b", "a_log", "d_skip", "w_out")


class MambaBlockParams:
    """Named view of one mixer's tensors, found under `prefix` in a parameter dict."""

    __slots__ = MIXER_FIELDS

    def __init__(self, params: Dict[str, Tensor], prefix: str):
        for field in MIXER_FIELDS:
            setattr(self, field, params[f"{prefix}{field}"])


class MambaLayerState:
    """
    Decoding state of one mixer: the conv window (d_inner, d_conv) holding
    the last d_conv conv inputs oldest first, the recurrent state
    (d_inner, d_state), and how many tokens have passed through.
    """

    __slots__ = ("conv_window", "ssm", "steps")

    def __init__(self, dims: MixerDims):
        self.conv_window = np.zeros((dims.d_inner, dims.d_conv))
        self.ssm = np.zeros((dims.d_inner, dims.d_state))
        self.steps = 0

    def copy(self) -> "MambaLayerState":
        other = MambaLayerState.__new__(MambaLayerState)
        other.conv_window = self.conv_window.copy()
        other.ssm = self.ssm.copy()
        other.steps = self.steps
        return other


class SSMState:
    """Per-block decoding state of one Mamba generation stream."""

    def __init__(self, layers: List[MambaLayerState]):
        self.layers = layers

    def copy(self) -> "SSMState":
        return SSMState([layer.copy() for layer in self.layers])


# =============================================================================
# Parameters
# =============================================================================

def mixer_parameter_shapes(prefix: str, dims: MixerDims) -> Dict[str, Tuple[int, ...]]:
    d, inner, bc = dims.d_model, dims.d_inner, dims.n_groups * dims.d_state
    return {
        f"{prefix}norm": (d,),
        f"{prefix}w_x": (d, inner),
        f"{prefix}w_z": (d, inner),
        f"{prefix}w_b": (d, bc),
        f"{prefix}w_c": (d, bc),
        f"{prefix}conv_w": (inner, dims.d_conv),
        f"{prefix}conv_b": (inner,),
        f"{prefix}dt_w": (inner,),
        f"{prefix}dt_b": (inner,),
        f"{prefix}a_log": (inner, dims.d_state),
        f"{prefix}d_skip": (inner,),
        f"{prefix}w_out": (inner, dims.d_out),
    }


def init_mixer_arrays(rng: np.random.Generator, prefix: str, dims: MixerDims,
                      out_std: float = INIT_STD) -> Dict[str, np.ndarray]:
    d, inner, bc = dims.d_model, dims.d_inner, dims.n_groups * dims.d_state
    low, high = DT_INIT_RANGE
    dt = np.exp(rng.uniform(math.log(low), math.log(high), size=inner))
    bound = 1.0 / math.sqrt(dims.d_conv)
    return {
        f"{prefix}norm": np.ones(d),
        f"{prefix}w_x": init_matrix(rng, d, inner),
        f"{prefix}w_z": init_matrix(rng, d, inner),
        f"{prefix}w_b": init_matrix(rng, d, bc),
        f"{prefix}w_c": init_matrix(rng, d, bc),
        f"{prefix}conv_w": rng.uniform(-bound, bound, size=(inner, dims.d_conv)),
        f"{prefix}conv_b": np.zeros(inner),
        f"{prefix}dt_w": rng.normal(0.0, INIT_STD, size=inner),
        # inverse softplus, so the initial step size is dt
        f"{prefix}dt_b": dt + np.log(-np.expm1(-dt)),
        f"{prefix}a_log": np.log(np.tile(np.arange(1, dims.d_state + 1, dtype=np.float64), (inner, 1))),
        f"{prefix}d_skip": np.ones(inner),
        f"{prefix}w_out": init_matrix(rng, inner, dims.d_out, std=out_std),
    }


def mamba_parameter_shapes(config: MambaConfig) -> Dict[str, Tuple[int, ...]]:
    dims = backbone_dims(config)
    shapes: Dict[str, Tuple[int, ...]] = {"embed.tokens": (config.vocab_size, config.d_model)}
    for i in range(config.n_blocks):
        shapes.update(mixer_parameter_shapes(f"blocks.{i}.", dims))
    shapes["final_norm"] = (config.d_model,)
    shapes["head"] = (config.d_model, config.vocab_size)
    return shapes


def init_mamba_params(config: MambaConfig, seed: int = 0) -> Dict[str, Tensor]:
    rng = np.random.default_rng(seed)
    dims = backbone_dims(config)
    arrays = {"embed.tokens": init_matrix(rng, config.vocab_size, config.d_model)}
    out_std = INIT_STD / math.sqrt(2 * config.n_blocks)
    for i in range(config.n_blocks):
        arrays.update(init_mixer_arrays(rng, f"blocks.{i}.", dims, out_std=out_std))
    arrays["final_norm"] = np.ones(config.d_model)
    arrays["head"] = init_matrix(rng, config.d_model, config.vocab_size)
    return make_params(arrays)


def backbone_dims(config: MambaConfig) -> MixerDims:
    return MixerDims(config.d_model, config.d_inner, config.d_state,
                     config.d_conv, config.n_groups, config.d_model)


# =============================================================================
# Kernels
# =============================================================================

def causal_conv(x: Tensor, weight: Tensor, bias: Tensor,
                state: Optional[MambaLayerState] = None) -> Tensor:
    """
    Depthwise causal convolution over time of x (batch, T, d_inner).

    Without a state the sequence is left-padded with zeros. With one, the
    window supplies the history and is advanced to the last d_conv inputs.
    """
    batch, length, inner = x.shape
    width = weight.shape[1]
    if state is None:
        history = np.zeros((batch, width - 1, inner))
    else:
        history = np.broadcast_to(state.conv_window[:, 1:].T[None], (batch, width - 1, inner))
    padded = np.concatenate([history, x.data], axis=1)

    out = np.broadcast_to(bias.data, (batch, length, inner)).copy()
    for j in range(width):
        out += padded[:, j:j + length] * weight.data[:, j]

    if state is not None:
        state.conv_window = padded[0, -width:].T.copy()

    def backward(g):
        grad_padded = np.zeros_like(padded)
        grad_weight = np.empty_like(weight.data)
        for j in range(width):
            grad_padded[:, j:j + length] += g * weight.data[:, j]
            grad_weight[:, j] = (g * padded[:, j:j + length]).sum(axis=(0, 1))
        return grad_padded[:, width - 1:], grad_weight, g.sum(axis=(0, 1))

    return record_op(out, (x, weight, bias), backward)


def _discretize(delta: np.ndarray, a: np.ndarray, u: np.ndarray,
                b_channels: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    decay = np.exp(delta[..., None] * a)
    drive = (delta * u)[..., None] * b_channels
    return decay, drive


def _run_states(x0: np.ndarray, decay: np.ndarray, drive: np.ndarray) -> np.ndarray:
    """States after each step for decay/drive of shape (batch, T, d_inner, d_state)."""
    states = np.empty_like(decay)
    x = x0
    for t in range(decay.shape[1]):
        x = decay[:, t] * x + drive[:, t]
        states[:, t] = x
    return states


def _channels(grouped: np.ndarray, inner: int) -> np.ndarray:
    """(batch, T, groups, d_state) -> (batch, T, d_inner, d_state), contiguous channel groups."""
    return np.repeat(grouped, inner // grouped.shape[2], axis=2)


def _check_step_sizes(delta: np.ndarray) -> None:
    if np.any(delta <= 0):
        raise DiscretizationError(f"step size must be positive, got minimum {delta.min()}")


def ssm_scan(u: Tensor, delta: Tensor, a: Tensor, b: Tensor, c: Tensor, d_skip: Tensor,
             state: Optional[MambaLayerState] = None) -> Tensor:
    """
    Selective scan over a whole sequence.

    u, delta: (batch, T, d_inner); a: (d_inner, d_state);
    b, c: (batch, T, groups, d_state); d_skip: (d_inner,).
    Starts from zero, or from `state.ssm` when given (which it then advances).

    Raises:
        DiscretizationError: some step size is not positive
    """
    _check_step_sizes(delta.data)
    batch, length, inner = u.shape
    groups = b.shape[2]
    b_ch = _channels(b.data, inner)
    c_ch = _channels(c.data, inner)
    x0 = np.zeros((batch, inner, a.shape[1])) if state is None else state.ssm[None]

    decay, drive = _discretize(delta.data, a.data, u.data, b_ch)
    states = _run_states(x0, decay, drive)
    y = (c_ch * states).sum(axis=-1) + d_skip.data * u.data

    if state is not None:
        state.ssm = states[0, -1].copy()
        state.steps += length

    def backward(g):
        grad_u = g * d_skip.data
        grad_delta = np.zeros_like(delta.data)
        grad_a = np.zeros_like(a.data)
        grad_b = np.zeros_like(b_ch)
        grad_c = g[..., None] * states
        carry = np.zeros_like(x0)
        for t in reversed(range(length)):
            previous = states[:, t - 1] if t > 0 else x0
            grad_x = carry + g[:, t][..., None] * c_ch[:, t]
            grad_exponent = grad_x * previous * decay[:, t]
            grad_delta[:, t] += (grad_exponent * a.data).sum(axis=-1)
            grad_a += (grad_exponent * delta.data[:, t][..., None]).sum(axis=0)
            grad_drive_scale = (grad_x * b_ch[:, t]).sum(axis=-1)
            grad_delta[:, t] += grad_drive_scale * u.data[:, t]
            grad_u[:, t] += grad_drive_scale * delta.data[:, t]
            grad_b[:, t] = grad_x * (delta.data[:, t] * u.data[:, t])[..., None]
            carry = grad_x * decay[:, t]
        split = (batch, length, groups, inner // groups, a.shape[1])
        return (grad_u, grad_delta, grad_a,
                grad_b.reshape(split).sum(axis=3), grad_c.reshape(split).sum(axis=3),
                (g * u.data).sum(axis=(0, 1)))

    return record_op(y, (u, delta, a, b, c, d_skip), backward)


def ssm_step(u: np.ndarray, delta: np.ndarray, a: np.ndarray, b: np.ndarray, c: np.ndarray,
             d_skip: np.ndarray, state: MambaLayerState) -> np.ndarray:
    """
    One recurrence step for a single token, advancing `state` in place.

    u, delta: (d_inner,); b, c: (groups, d_state). Returns y (d_inner,).
    """
    _check_step_sizes(delta)
    inner = u.shape[0]
    b_ch = _channels(b[None, None], inner)[0, 0]
    c_ch = _channels(c[None, None], inner)[0, 0]
    decay, drive = _discretize(delta, a, u, b_ch)
    state.ssm = decay * state.ssm + drive
    state.steps += 1
    return (c_ch * state.ssm).sum(axis=-1) + d_skip * u


def _advance_state(u: np.ndarray, delta: np.ndarray, a: np.ndarray, b: np.ndarray,
                   state: MambaLayerState) -> None:
    _check_step_sizes(delta)
    b_ch = _channels(b, u.shape[-1])
    decay, drive = _discretize(delta, a, u, b_ch)
    state.ssm = _run_states(state.ssm[None], decay, drive)[0, -1].copy()
    state.steps += u.shape[1]


# =============================================================================
# Mixer
# =============================================================================

def mixer_forward(p: MambaBlockParams, dims: MixerDims, h: Tensor,
                  state: Optional[MambaLayerState] = None) -> Tensor:
    """Mixer output (batch, T, d_out) for input h (batch, T, d_model); no residual."""
    batch, length, _ = h.shape
    normed = rms_norm(h, p.norm)
    x = matmul(normed, p.w_x)
    z = matmul(normed, p.w_z)
    b = matmul(normed, p.w_b)
    c = matmul(normed, p.w_c)

    u = silu(causal_conv(x, p.conv_w, p.conv_b, state))
    delta = softplus(add(mul(u, p.dt_w), p.dt_b))
    grouped = (batch, length, dims.n_groups, dims.d_state)
    y = ssm_scan(u, delta, neg(exp(p.a_log)), reshape(b, grouped), reshape(c, grouped),
                 p.d_skip, state)
    return matmul(mul(y, silu(z)), p.w_out)


def mixer_partial(p: MambaBlockParams, dims: MixerDims, h: Tensor, state: MambaLayerState) -> None:
    """Advance the conv window and recurrent state for h without producing an output."""
    batch, length, _ = h.shape
    normed = rms_norm(h, p.norm)
    x = matmul(normed, p.w_x)
    b = matmul(normed, p.w_b)
    u = silu(causal_conv(x, p.conv_w, p.conv_b, state))
    delta = softplus(add(mul(u, p.dt_w), p.dt_b))
    a = neg(exp(p.a_log))
    _advance_state(u.data, delta.data, a.data,
                   b.data.reshape(batch, length, dims.n_groups, dims.d_state), state)


# =============================================================================
# Backbone
# =============================================================================

class MambaModel(BackboneModel):
    """Mamba backbone with a block-level API for early-exit decoding."""

    kind = "mamba"
    ops_per_mac = OPS_PER_MAC_MAMBA

    def __init__(self, config: MambaConfig, params: Optional[Dict[str, Tensor]] = None,
                 seed: int = 0):
        super().__init__(config, params if params is not None else init_mamba_params(config, seed))
        self.dims = backbone_dims(config)
        self._blocks = [MambaBlockParams(self.params, f"blocks.{i}.") for i in range(config.n_blocks)]

    def expected_shapes(self) -> Dict[str, Tuple[int, ...]]:
        return mamba_parameter_shapes(self.config)

    def block(self, index: int) -> MambaBlockParams:
        return self._blocks[index]

    def new_state(self) -> SSMState:
        return SSMState([MambaLayerState(self.dims) for _ in range(self.n_blocks)])

    def cached_length(self, state: SSMState, index: int) -> int:
        return state.layers[index].steps

    def embed(self, ids: np.ndarray, start: int = 0) -> Tensor:
        return embedding(self.params["embed.tokens"], np.asarray(ids))

    def block_forward(self, index: int, h: Tensor, state: Optional[SSMState] = None) -> Tensor:
        layer = None if state is None else state.layers[index]
        return add(h, mixer_forward(self._blocks[index], self.dims, h, layer))

    def partial_forward(self, index: int, h: Tensor, state: SSMState) -> None:
        mixer_partial(self._blocks[index], self.dims, h, state.layers[index])

    def block_ops(self, n_new: int, n_cached: int) -> int:
        d = self.dims
        return n_new * cost_mamba_mixer(d.d_model, d.d_inner, d.n_groups, d.d_state, d.d_out)

    def partial_ops(self) -> float:
        return float(RECOMPUTE_FRACTION_MAMBA * self.block_ops(1, 0))


def mamba_state_skip(state: SSMState, blocks: Sequence[int]) -> None:
    """Leave the skipped blocks' states exactly as they are."""
    for block in blocks:
        if not 0 <= block < len(state.layers):
            raise PolicyError(f"no block {block} in a {len(state.layers)}-block state")
