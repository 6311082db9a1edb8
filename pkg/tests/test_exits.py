import numpy as np
import pytest

from models.errors import ConfigurationError
from models.exits import (
    NEVER_EXIT, ExitBank, ExitCellConfig, ExitPlacement, ExitPolicy, classifier_cost,
    default_placements, exit_confidence, exit_parameter_shapes, placement_range, should_exit,
)
from models.numkernel import Tensor, count_macs, grad_of, tally
from models.training import decay_weights, exit_loss


def test_default_placements_for_eight_blocks():
    assert default_placements(8) == [4, 5, 6]
    assert placement_range(8) == (4, 6)


def test_default_placements_spread_over_second_half():
    blocks = default_placements(24, count=4)
    low, high = placement_range(24)
    assert len(blocks) == 4
    assert blocks == sorted(set(blocks))
    assert all(low <= b <= high for b in blocks)


@pytest.mark.parametrize("blocks", [[7], [5, 4], [4, 4], [], [2, 5]])
def test_invalid_placements_are_rejected(blocks):
    with pytest.raises(ValueError):
        ExitPlacement(n_blocks=8, blocks=blocks)


def test_threshold_above_one_never_fires():
    policy = ExitPolicy(threshold=1.5)
    assert policy.threshold == NEVER_EXIT
    assert not should_exit(policy, 1.0)
    assert should_exit(ExitPolicy(threshold=0.0), 0.0)


def test_negative_threshold_is_rejected():
    with pytest.raises(ValueError):
        ExitPolicy(threshold=-0.1)


def test_classifier_cost_examples():
    assert classifier_cost("mamba", ExitCellConfig(d_model=4, d_state=2, n_groups=1)) == 96
    assert classifier_cost("calm", ExitCellConfig(d_model=64)) == 0
    assert classifier_cost("ffn", ExitCellConfig(d_model=8)) == 16 * 64
    with pytest.raises(ConfigurationError):
        classifier_cost("lstm", ExitCellConfig(d_model=8))


def test_exit_confidence_is_softmax_of_exit_logit():
    assert exit_confidence(np.array([0.0, 0.0])) == pytest.approx(0.5)
    assert exit_confidence(np.array([0.0, np.log(3.0)])) == pytest.approx(0.75)
    assert exit_confidence(np.array([1000.0, 0.0])) == pytest.approx(0.0)


@pytest.mark.parametrize("variant", ["calm", "ffn", "mamba"])
def test_zero_weights_give_even_confidence(variant):
    placement = ExitPlacement.default(8)
    bank = ExitBank(variant, placement, ExitCellConfig(d_model=8, d_state=4))
    for param in bank.params.values():
        param.data[...] = 0.0
    features = Tensor(np.random.default_rng(0).normal(size=(1, 1, 8)))
    states = bank.new_stream_state()
    for block in bank.blocks:
        assert bank.confidence(block, features, states[block]) == pytest.approx(0.5)


@pytest.mark.parametrize("variant", ["calm", "ffn", "mamba"])
def test_executed_macs_match_counter(variant):
    cell = ExitCellConfig(d_model=8, d_state=4, n_groups=2)
    bank = ExitBank(variant, ExitPlacement.default(8), cell)
    block = bank.blocks[0]
    features = Tensor(np.ones((1, 1, 8)))
    with count_macs() as counter, tally("classifier"):
        bank.confidence(block, features, bank.new_stream_state()[block])
    assert counter["classifier"] == bank.classifiers[block].executed_macs


def test_mamba_cell_macs_match_analytic_cost():
    cell = ExitCellConfig(d_model=4, d_state=2, n_groups=1)
    bank = ExitBank("mamba", ExitPlacement(n_blocks=8, blocks=[4]), cell)
    assert bank.classifiers[4].executed_macs == classifier_cost("mamba", cell)


def test_mamba_cell_keeps_one_state_per_placement():
    bank = ExitBank("mamba", ExitPlacement.default(8), ExitCellConfig(d_model=8, d_state=4))
    states = bank.new_stream_state()
    assert sorted(states) == bank.blocks
    assert len({id(s) for s in states.values()}) == len(states)
    features = Tensor(np.ones((1, 1, 8)))
    bank.confidence(4, features, states[4])
    assert states[4].steps == 1
    assert states[5].steps == 0


def test_bank_shapes_follow_placement():
    placement = ExitPlacement.default(8)
    cell = ExitCellConfig(d_model=8)
    bank = ExitBank("ffn", placement, cell, seed=3)
    shapes = exit_parameter_shapes("ffn", placement, cell)
    assert set(bank.params) == set(shapes)
    assert bank.params["exits.4.w1"].shape == (8, 32)
    with pytest.raises(ConfigurationError):
        ExitBank("lstm", placement, cell)


@pytest.mark.parametrize("variant", ["calm", "ffn", "mamba"])
def test_exit_loss_gradients_match_finite_differences(variant, numeric_gradient):
    rng = np.random.default_rng(11)
    placement = ExitPlacement(n_blocks=6, blocks=[3, 4])
    bank = ExitBank(variant, placement, ExitCellConfig(d_model=4, d_state=2, d_conv=3), seed=2)
    for param in bank.params.values():
        param.data += rng.normal(0.0, 0.3, size=param.shape)
    features = {block: Tensor(rng.normal(size=(2, 5, 4))) for block in bank.blocks}
    labels = {block: rng.integers(0, 2, size=(2, 5)) for block in bank.blocks}
    weights = decay_weights(bank.blocks)

    def loss():
        return exit_loss(bank, features, labels, weights)

    grads = grad_of(loss(), bank.params)
    for name, param in bank.params.items():
        expected = numeric_gradient(lambda: float(loss().data), param.data)
        assert np.allclose(grads[name], expected, rtol=1e-4, atol=1e-7), name


def test_interleaved_mamba_cell_streams_match_separate_runs():
    rng = np.random.default_rng(13)
    bank = ExitBank("mamba", ExitPlacement.default(8), ExitCellConfig(d_model=8, d_state=4), seed=5)
    for param in bank.params.values():
        param.data += rng.normal(0.0, 0.3, size=param.shape)
    streams = [rng.normal(size=(12, 8)) for _ in range(2)]

    def step(block, row, state):
        return bank.confidence(block, Tensor(row[None, None]), state)

    separate = []
    for stream in streams:
        states = bank.new_stream_state()
        separate.append([[step(block, row, states[block]) for block in bank.blocks] for row in stream])

    stream_states = [bank.new_stream_state() for _ in streams]
    interleaved = [[], []]
    for t in range(12):
        for i in (1, 0):
            states = stream_states[i]
            interleaved[i].append([step(block, streams[i][t], states[block]) for block in bank.blocks])

    assert interleaved == separate
    threshold = float(np.median(separate))
    policy = ExitPolicy(threshold=threshold, variant="mamba")
    decisions = [[[should_exit(policy, c) for c in row] for row in run] for run in separate]
    assert decisions == [[[should_exit(policy, c) for c in row] for row in run] for run in interleaved]
