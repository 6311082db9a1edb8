import numpy as np
import pytest

from models.errors import DiscretizationError, PolicyError
from models.ledger import cost_block_mamba
from models.mamba import (
    MambaConfig, MambaLayerState, MambaModel, MixerDims, causal_conv,
    mamba_state_skip, ssm_scan, ssm_step,
)
from models.numkernel import Tensor, count_macs, cross_entropy_logits, grad_of, no_grad, tally

DIMS = MixerDims(d_model=4, d_inner=6, d_state=3, d_conv=4, n_groups=2, d_out=4)


@pytest.fixture
def scan_inputs():
    rng = np.random.default_rng(7)
    length, inner, n, g = 5, DIMS.d_inner, DIMS.d_state, DIMS.n_groups
    return {
        "u": rng.normal(size=(1, length, inner)),
        "delta": rng.uniform(0.05, 0.5, size=(1, length, inner)),
        "a": -rng.uniform(0.5, 2.0, size=(inner, n)),
        "b": rng.normal(size=(1, length, g, n)),
        "c": rng.normal(size=(1, length, g, n)),
        "d": rng.normal(size=inner),
    }


def _scan(inputs, state=None, **overrides):
    values = {**inputs, **overrides}
    return ssm_scan(*(Tensor(values[k]) for k in ("u", "delta", "a", "b", "c", "d")), state=state).data


def _run_blocks(model, h, state):
    for index in range(model.n_blocks):
        h = model.block_forward(index, h, state)
    return h


def test_cost_examples():
    assert cost_block_mamba(4, 1, 2) == 112
    assert cost_block_mamba(1, 1, 1) == 8


def test_groups_must_divide_inner_width():
    with pytest.raises(ValueError):
        MambaConfig(n_blocks=2, d_model=5, n_groups=3)
    assert MambaConfig(n_blocks=2, d_model=8).d_inner == 16


def test_scan_matches_chained_steps(scan_inputs):
    y = _scan(scan_inputs)
    state = MambaLayerState(DIMS)
    stepped = [
        ssm_step(scan_inputs["u"][0, t], scan_inputs["delta"][0, t], scan_inputs["a"],
                 scan_inputs["b"][0, t], scan_inputs["c"][0, t], scan_inputs["d"], state)
        for t in range(5)
    ]
    assert np.allclose(y[0], np.stack(stepped), atol=1e-12)
    assert state.steps == 5


def test_scan_resumes_from_state(scan_inputs):
    whole = _scan(scan_inputs)
    state = MambaLayerState(DIMS)
    first = {k: v[:, :2] if k in ("u", "delta", "b", "c") else v for k, v in scan_inputs.items()}
    rest = {k: v[:, 2:] if k in ("u", "delta", "b", "c") else v for k, v in scan_inputs.items()}
    head = _scan(first, state)
    tail = _scan(rest, state)
    assert np.allclose(np.concatenate([head, tail], axis=1), whole, atol=1e-12)
    assert state.steps == 5


def test_vanishing_step_leaves_only_skip_term(scan_inputs):
    y = _scan(scan_inputs, delta=np.full_like(scan_inputs["delta"], 1e-12))
    assert np.allclose(y, scan_inputs["d"] * scan_inputs["u"], atol=1e-9)


def test_strongly_negative_decay_forgets_history(scan_inputs):
    y = _scan(scan_inputs, a=np.full_like(scan_inputs["a"], -1e6))
    per_group = DIMS.d_inner // DIMS.n_groups
    b = np.repeat(scan_inputs["b"], per_group, axis=2)
    c = np.repeat(scan_inputs["c"], per_group, axis=2)
    drive = (scan_inputs["delta"] * scan_inputs["u"])[..., None] * b
    expected = (c * drive).sum(axis=-1) + scan_inputs["d"] * scan_inputs["u"]
    assert np.allclose(y, expected, atol=1e-12)


def test_nonpositive_step_is_a_discretization_error(scan_inputs):
    delta = scan_inputs["delta"].copy()
    delta[0, 2, 1] = 0.0
    with pytest.raises(DiscretizationError):
        _scan(scan_inputs, delta=delta)


def test_stepped_conv_matches_sequence_conv_and_keeps_last_inputs():
    rng = np.random.default_rng(8)
    x = rng.normal(size=(1, 6, DIMS.d_inner))
    weight = Tensor(rng.normal(size=(DIMS.d_inner, DIMS.d_conv)))
    bias = Tensor(rng.normal(size=DIMS.d_inner))
    whole = causal_conv(Tensor(x), weight, bias).data

    state = MambaLayerState(DIMS)
    stepped = [causal_conv(Tensor(x[:, t:t + 1]), weight, bias, state).data[0, 0] for t in range(6)]
    assert np.allclose(np.stack(stepped), whole[0], atol=1e-12)
    assert np.array_equal(state.conv_window, x[0, -DIMS.d_conv:].T)


def test_stepped_decoding_matches_prefill(tiny_mamba):
    model = tiny_mamba
    ids = np.array([[2, 7, 1, 8, 2, 8]])
    with no_grad():
        _, hiddens = model.forward_train(ids)
        prefill_state = model.new_state()
        _run_blocks(model, model.embed(ids), prefill_state)
        step_state = model.new_state()
        for token in ids[0]:
            stepped = _run_blocks(model, model.embed(np.array([[token]])), step_state)

    assert np.allclose(hiddens[-1].data[0, -1], stepped.data[0, 0], atol=1e-10)
    for a, b in zip(prefill_state.layers, step_state.layers):
        assert a.steps == b.steps == 6
        assert np.allclose(a.ssm, b.ssm, atol=1e-12)
        assert np.allclose(a.conv_window, b.conv_window, atol=1e-12)


@pytest.mark.parametrize("seed", range(100))
def test_random_scans_match_chained_steps(seed):
    rng = np.random.default_rng(seed)
    groups = int(rng.choice([1, 2]))
    dims = MixerDims(d_model=4, d_inner=2 * groups * int(rng.integers(1, 4)), d_state=int(rng.integers(1, 5)),
                     d_conv=4, n_groups=groups, d_out=4)
    length = int(rng.integers(1, 33))
    inputs = {
        "u": rng.normal(size=(1, length, dims.d_inner)),
        "delta": rng.uniform(1e-3, 1.0, size=(1, length, dims.d_inner)),
        "a": -np.exp(rng.normal(size=(dims.d_inner, dims.d_state))),
        "b": rng.normal(size=(1, length, groups, dims.d_state)),
        "c": rng.normal(size=(1, length, groups, dims.d_state)),
        "d": rng.normal(size=dims.d_inner),
    }
    y = _scan(inputs)
    state = MambaLayerState(dims)
    stepped = np.stack([
        ssm_step(inputs["u"][0, t], inputs["delta"][0, t], inputs["a"],
                 inputs["b"][0, t], inputs["c"][0, t], inputs["d"], state)
        for t in range(length)
    ])
    assert np.max(np.abs(y[0] - stepped)) <= 1e-9


@pytest.mark.parametrize("seed", range(100))
def test_random_models_step_like_prefill_at_every_position(seed):
    rng = np.random.default_rng(seed)
    config = MambaConfig(n_blocks=int(rng.integers(1, 4)), d_model=4, d_state=int(rng.integers(1, 5)),
                         d_conv=int(rng.integers(1, 5)), n_groups=int(rng.choice([1, 2])), vocab_size=9)
    model = MambaModel(config, seed=seed)
    for param in model.params.values():
        param.data += rng.normal(0.0, 0.3, size=param.shape)
    length = int(rng.integers(1, 33))
    ids = rng.integers(0, 9, size=(1, length))

    with no_grad():
        _, hiddens = model.forward_train(ids)
        prefill_state = model.new_state()
        prefilled = _run_blocks(model, model.embed(ids), prefill_state)
        step_state = model.new_state()
        stepped = np.concatenate([
            _run_blocks(model, model.embed(ids[:, t:t + 1]), step_state).data[0]
            for t in range(length)
        ])

    assert np.max(np.abs(hiddens[-1].data[0] - stepped)) <= 1e-9
    assert np.max(np.abs(prefilled.data[0] - stepped)) <= 1e-9
    for a, b in zip(prefill_state.layers, step_state.layers):
        assert np.max(np.abs(a.ssm - b.ssm)) <= 1e-9
        assert np.max(np.abs(a.conv_window - b.conv_window)) <= 1e-9


def test_partial_forward_updates_state_like_full_block(tiny_mamba):
    model = tiny_mamba
    with no_grad():
        full = model.new_state()
        _run_blocks(model, model.embed(np.array([[3, 4, 5]])), full)
        partial = full.copy()
        h = model.embed(np.array([[9]]))
        model.block_forward(2, h, full)
        with count_macs() as counter, tally("recompute"):
            model.partial_forward(2, h, partial)

    assert np.array_equal(full.layers[2].ssm, partial.layers[2].ssm)
    assert np.array_equal(full.layers[2].conv_window, partial.layers[2].conv_window)
    assert partial.layers[2].steps == 4
    dims = model.dims
    assert counter["recompute"] == dims.d_model * dims.d_inner + dims.d_model * dims.n_groups * dims.d_state


def test_block_macs_match_block_cost(tiny_mamba):
    model = tiny_mamba
    config = model.config
    with no_grad(), count_macs() as counter, tally("block"):
        model.block_forward(0, model.embed(np.array([[4]])), model.new_state())
    expected = cost_block_mamba(config.d_model, config.n_groups, config.d_state)
    assert counter["block"] * model.ops_per_mac == expected
    assert model.block_ops(1, 0) == expected
    assert model.partial_ops() == pytest.approx(expected * 9 / 26)


def test_state_skip_leaves_state_untouched(tiny_mamba):
    model = tiny_mamba
    state = model.new_state()
    with no_grad():
        _run_blocks(model, model.embed(np.array([[1, 2]])), state)
    before = state.copy()
    mamba_state_skip(state, [3, 4])
    for a, b in zip(before.layers, state.layers):
        assert np.array_equal(a.ssm, b.ssm)
        assert np.array_equal(a.conv_window, b.conv_window)
        assert a.steps == b.steps
    with pytest.raises(PolicyError):
        mamba_state_skip(state, [model.n_blocks])


def test_block_gradients_match_finite_differences(numeric_gradient):
    config = MambaConfig(n_blocks=2, d_model=4, d_state=3, d_conv=3, n_groups=2, vocab_size=7)
    model = MambaModel(config, seed=2)
    rng = np.random.default_rng(9)
    for param in model.params.values():
        param.data += rng.normal(0.0, 0.1, size=param.shape)
    ids = rng.integers(0, 7, size=(2, 6))

    def loss():
        logits, _ = model.forward_train(ids[:, :-1])
        return cross_entropy_logits(logits, ids[:, 1:])

    grads = grad_of(loss(), model.params)
    for name in model.params:
        expected = numeric_gradient(lambda: float(loss().data), model.params[name].data)
        assert np.allclose(grads[name], expected, rtol=1e-4, atol=1e-7), name
