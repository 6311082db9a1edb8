import copy
import math

import numpy as np
import pytest
from pydantic import ValidationError

from models.engine import (
    EarlyExitEngine, apply_missing_state_policy, degenerate_check, repetition_penalty,
)
from models.errors import CapacityError, ConfigurationError
from models.exits import ExitBank, ExitCellConfig, ExitPlacement, ExitPolicy
from models.ledger import cost_block_mamba, reduction_factor
from models.numkernel import count_macs, no_grad
from models.records import GenerationRequest, PruneSpec

PROMPT = [3, 1, 4, 1, 5, 9, 2, 6]

TRANSFORMER_CASES = [(variant, policy) for variant in ("calm", "ffn", "mamba") for policy in ("copy", "recompute")]
MAMBA_CASES = [(variant, policy) for variant in ("calm", "ffn", "mamba") for policy in ("recompute", "skip")]


def _generate(engine, mode, max_new=6, prompt=PROMPT, penalty=1.0):
    return engine.generate(GenerationRequest(
        prompt_ids=prompt, max_new_tokens=max_new, mode=mode, repetition_penalty=penalty,
    ))


def _counted(engine, mode, max_new=6):
    with count_macs() as counter:
        result = _generate(engine, mode, max_new)
    return result, counter


def _assert_ledger_matches_counter(result, counter, ops_per_mac, check_recompute):
    ledger = result.ledger
    assert ledger.ops_backbone == counter["backbone"] * ops_per_mac
    assert ledger.ops_classifiers == counter["classifiers"] * ops_per_mac
    assert ledger.ops_prefill == counter["prefill"] * ops_per_mac
    if check_recompute:
        assert ledger.ops_recompute == pytest.approx(counter["recompute"] * ops_per_mac)


# =============================================================================
# Ledger against executed work
# =============================================================================

@pytest.mark.parametrize("theta", [0.0, 0.5])
@pytest.mark.parametrize("variant,policy", TRANSFORMER_CASES)
def test_transformer_ledger_matches_counter(tiny_transformer, make_bank, variant, policy, theta):
    engine = EarlyExitEngine(tiny_transformer, make_bank(tiny_transformer, variant))
    mode = ExitPolicy(threshold=theta, variant=variant, state_policy=policy)
    result, counter = _counted(engine, mode)
    _assert_ledger_matches_counter(result, counter, 2, check_recompute=True)
    assert result.ledger.tokens == 6
    if variant == "calm":
        assert result.ledger.ops_classifiers == 0


@pytest.mark.parametrize("theta", [0.0, 0.5])
@pytest.mark.parametrize("variant,policy", MAMBA_CASES)
def test_mamba_ledger_matches_counter(tiny_mamba, make_bank, variant, policy, theta):
    engine = EarlyExitEngine(tiny_mamba, make_bank(tiny_mamba, variant))
    mode = ExitPolicy(threshold=theta, variant=variant, state_policy=policy)
    result, counter = _counted(engine, mode)
    _assert_ledger_matches_counter(result, counter, 1, check_recompute=False)
    if policy == "skip":
        assert result.ledger.ops_recompute == 0


def test_mamba_recompute_charges_fixed_share_per_skipped_block(tiny_mamba, make_bank):
    model = tiny_mamba
    engine = EarlyExitEngine(model, make_bank(model, "calm"))
    result = _generate(engine, ExitPolicy(threshold=0.0, variant="calm", state_policy="recompute"))
    # exits at block 3 of 6 skip block 4 only
    block_cost = cost_block_mamba(model.d_model, model.config.n_groups, model.config.d_state)
    assert result.ledger.ops_recompute == pytest.approx(6 * block_cost * 9 / 26)


def test_transformer_recompute_charges_one_sixth_per_skipped_block(tiny_transformer):
    model = tiny_transformer
    engine = EarlyExitEngine(model)
    stream = engine.open_stream()
    with no_grad():
        h = model.embed(np.array([[7]]), 0)
        h = model.block_forward(0, h, stream.state)
    apply_missing_state_policy(model, "recompute", [1, 2, 3], stream, h, 0)
    assert stream.ledger.ops_recompute == 3 * 24 * model.d_model ** 2 / 6
    assert stream.state.fill[:4] == [1, 1, 1, 1]


def test_policy_for_other_backbone_is_rejected(tiny_transformer):
    engine = EarlyExitEngine(tiny_transformer)
    stream = engine.open_stream()
    with pytest.raises(ConfigurationError):
        apply_missing_state_policy(tiny_transformer, "skip", [1], stream, None, 0)


# =============================================================================
# Exit behaviour
# =============================================================================

@pytest.mark.parametrize("variant,policy", TRANSFORMER_CASES)
def test_never_exit_reproduces_full_model_transformer(tiny_transformer, make_bank, variant, policy):
    engine = EarlyExitEngine(tiny_transformer, make_bank(tiny_transformer, variant))
    full = _generate(engine, None)
    never = _generate(engine, ExitPolicy(threshold=2.0, variant=variant, state_policy=policy))
    assert never.tokens == full.tokens
    assert never.exit_depths == [tiny_transformer.n_blocks] * 6
    assert never.ledger.ops_backbone == full.ledger.ops_backbone
    assert never.ledger.ops_recompute == 0


@pytest.mark.parametrize("variant,policy", MAMBA_CASES)
def test_never_exit_reproduces_full_model_mamba(tiny_mamba, make_bank, variant, policy):
    engine = EarlyExitEngine(tiny_mamba, make_bank(tiny_mamba, variant))
    full = _generate(engine, None)
    never = _generate(engine, ExitPolicy(threshold=2.0, variant=variant, state_policy=policy))
    assert never.tokens == full.tokens
    assert never.exit_depths == [tiny_mamba.n_blocks] * 6


def test_full_model_reduction_factor_is_one(tiny_mamba, make_bank):
    engine = EarlyExitEngine(tiny_mamba, make_bank(tiny_mamba, "calm"))
    for mode in (None, ExitPolicy(threshold=2.0, variant="calm", state_policy="skip")):
        assert reduction_factor(_generate(engine, mode).ledger) == pytest.approx(1.0)


@pytest.mark.parametrize("backbone", ["tiny_transformer", "tiny_mamba"])
def test_zero_threshold_exits_at_first_placement(request, make_bank, backbone):
    model = request.getfixturevalue(backbone)
    bank = make_bank(model, "ffn")
    policy = "copy" if model.kind == "transformer" else "skip"
    result = _generate(EarlyExitEngine(model, bank), ExitPolicy(threshold=0.0, variant="ffn", state_policy=policy))
    assert result.exit_depths == [bank.blocks[0]] * 6


def test_copy_policy_keeps_every_cache_in_step(tiny_transformer, make_bank):
    model = tiny_transformer
    engine = EarlyExitEngine(model, make_bank(model, "calm"))
    mode = ExitPolicy(threshold=0.0, variant="calm", state_policy="copy")
    stream = engine.open_stream()
    engine.prefill(stream, PROMPT[:-1], mode)
    for token in PROMPT[-1:] + [1, 2, 3]:
        engine.step(stream, token, mode)
    assert stream.state.fill == [len(PROMPT) + 3] * model.n_blocks
    exit_block = engine.bank.blocks[0]
    assert np.array_equal(stream.state.keys[exit_block + 1, len(PROMPT) - 1],
                          stream.state.keys[exit_block, len(PROMPT) - 1])


def test_skip_policy_freezes_skipped_states(tiny_mamba, make_bank):
    model = tiny_mamba
    engine = EarlyExitEngine(model, make_bank(model, "calm"))
    mode = ExitPolicy(threshold=0.0, variant="calm", state_policy="skip")
    stream = engine.open_stream()
    engine.prefill(stream, PROMPT[:-1], mode)
    frozen = stream.state.layers[4].copy()
    engine.step(stream, PROMPT[-1], mode)
    assert np.array_equal(stream.state.layers[4].ssm, frozen.ssm)
    assert stream.state.layers[4].steps == frozen.steps
    assert stream.state.layers[3].steps == frozen.steps + 1


@pytest.mark.parametrize("variant", ["calm", "mamba"])
def test_higher_threshold_never_exits_earlier(tiny_mamba, make_bank, variant):
    model = tiny_mamba
    engine = EarlyExitEngine(model, make_bank(model, variant))
    stream = engine.open_stream()
    engine.prefill(stream, PROMPT[:-1], ExitPolicy(threshold=0.5, variant=variant, state_policy="skip"))
    depths = []
    for theta in (0.0, 0.3, 0.45, 0.5, 0.55, 0.7, 1.0, 2.0):
        mode = ExitPolicy(threshold=theta, variant=variant, state_policy="skip")
        depths.append(engine.step(copy.deepcopy(stream), PROMPT[-1], mode).depth)
    assert depths == sorted(depths)
    assert depths[-1] == model.n_blocks


# =============================================================================
# Pruning
# =============================================================================

@pytest.mark.parametrize("backbone", ["tiny_transformer", "tiny_mamba"])
def test_pruning_nothing_is_the_full_model(request, backbone):
    engine = EarlyExitEngine(request.getfixturevalue(backbone))
    full = _generate(engine, None)
    pruned = engine.generate_pruned(PruneSpec(p=0), GenerationRequest(prompt_ids=PROMPT, max_new_tokens=6))
    assert pruned.tokens == full.tokens
    assert pruned.ledger.ops_backbone == full.ledger.ops_backbone


def test_pruning_half_the_mamba_blocks_halves_the_work(tiny_mamba):
    engine = EarlyExitEngine(tiny_mamba)
    result = _generate(engine, PruneSpec(p=3))
    assert reduction_factor(result.ledger) == pytest.approx(2.0)
    assert result.exit_depths == [3] * 6


def test_pruning_keeps_the_final_block(tiny_mamba):
    assert PruneSpec(p=4).disabled_blocks(6) == [1, 2, 3, 4]
    with pytest.raises(ConfigurationError):
        EarlyExitEngine(tiny_mamba).check_mode(PruneSpec(p=5))


# =============================================================================
# Mode checks & limits
# =============================================================================

def test_mode_mismatches_are_configuration_errors(tiny_transformer, make_bank):
    model = tiny_transformer
    with pytest.raises(ConfigurationError):
        EarlyExitEngine(model).check_mode(ExitPolicy(threshold=0.5, variant="calm", state_policy="copy"))
    engine = EarlyExitEngine(model, make_bank(model, "calm"))
    with pytest.raises(ConfigurationError):
        engine.check_mode(ExitPolicy(threshold=0.5, variant="ffn", state_policy="copy"))
    with pytest.raises(ConfigurationError):
        engine.check_mode(ExitPolicy(threshold=0.5, variant="calm", state_policy="skip"))
    other = ExitBank("calm", ExitPlacement.default(8), ExitCellConfig(d_model=model.d_model))
    with pytest.raises(ConfigurationError):
        EarlyExitEngine(model, other).check_mode(ExitPolicy(threshold=0.5, variant="calm", state_policy="copy"))


def test_generation_past_context_is_a_capacity_error(tiny_transformer):
    engine = EarlyExitEngine(tiny_transformer)
    with pytest.raises(CapacityError):
        _generate(engine, None, max_new=tiny_transformer.config.max_seq_len)


def test_prefill_costs_the_same_as_full_model_prefill(tiny_transformer, make_bank):
    engine = EarlyExitEngine(tiny_transformer, make_bank(tiny_transformer, "calm"))
    result = _generate(engine, ExitPolicy(threshold=0.5, variant="calm", state_policy="copy"))
    assert result.ledger.ops_prefill == result.ledger.ops_reference_prefill > 0


# =============================================================================
# Scoring & output helpers
# =============================================================================

def test_untrained_model_perplexity_is_near_vocabulary_size(tiny_transformer):
    tokens = list(np.random.default_rng(0).integers(0, 17, size=24))
    score = EarlyExitEngine(tiny_transformer).score(tokens, prompt_len=4)
    assert score.count == 20
    assert len(score.exit_depths) == 20
    assert 0.8 * 17 < math.exp(score.nll / score.count) < 1.25 * 17


def test_score_rejects_prompt_covering_window(tiny_transformer):
    with pytest.raises(ConfigurationError):
        EarlyExitEngine(tiny_transformer).score([1, 2, 3], prompt_len=3)


def test_repetition_penalty_scales_seen_logits():
    logits = np.array([2.0, -1.0, 3.0, 0.5])
    out = repetition_penalty(logits, [0, 1, 1], 2.0)
    assert out.tolist() == [1.0, -2.0, 3.0, 0.5]
    assert np.array_equal(repetition_penalty(logits, [0], 1.0), logits)
    assert logits.tolist() == [2.0, -1.0, 3.0, 0.5]


def test_degenerate_check_needs_ten_in_a_row():
    assert degenerate_check([5] * 10)
    assert not degenerate_check([5] * 9 + [4] + [5] * 9)
    assert degenerate_check([1, 2] + [7] * 12 + [3])
    assert not degenerate_check([])


def test_request_needs_at_least_one_new_token():
    with pytest.raises(ValidationError):
        GenerationRequest(prompt_ids=[1], max_new_tokens=0)
