"""
Early-Exit Engine - Inference Engine

Greedy autoregressive decoding with early exits.

For every token the engine walks the blocks in order. After a block that
carries an exit classifier it asks for a confidence; once the confidence
reaches the policy threshold the remaining non-final blocks are skipped,
their missing state is handled by the policy, and the hidden state goes
straight to the final block, final normalization and head. The final block
always runs.

Every step charges a ComputeLedger with what was executed and with what the
full model would have executed for the same token.
"""

import logging
from typing import List, NamedTuple, Optional, Sequence

import numpy as np

from config.settings import BACKBONE_POLICIES, DEGENERATE_RUN_LENGTH
from models.backbone import BackboneModel
from models.errors import ConfigurationError
from models.exits import ExitBank, ExitPolicy, should_exit
from models.ledger import ComputeLedger
from models.mamba import mamba_state_skip
from models.numkernel import Tensor, log_softmax_array, no_grad, tally
from models.records import (
    GenerationRequest, GenerationResult, Mode, PruneSpec, SequenceScore,
)
from models.transformer import kv_copy_forward

logger = logging.getLogger(__name__)


class InferenceStream:
    """Everything one generation stream carries between tokens."""

    def __init__(self, model: BackboneModel, bank: Optional[ExitBank] = None):
        self.state = model.new_state()
        self.exit_states = bank.new_stream_state() if bank is not None else {}
        self.ledger = ComputeLedger()
        self.position = 0
        self.history: List[int] = []


class StepOutput(NamedTuple):
    logits: np.ndarray
    depth: int


def repetition_penalty(logits: np.ndarray, history: Sequence[int], factor: float) -> np.ndarray:
    """Divide positive logits of already generated ids by `factor`, multiply the rest."""
    out = np.array(logits, dtype=np.float64)
    if factor == 1.0 or not history:
        return out
    ids = np.unique(np.asarray(history, dtype=np.int64))
    seen = out[ids]
    out[ids] = np.where(seen > 0, seen / factor, seen * factor)
    return out


def degenerate_check(ids: Sequence[int], run_length: int = DEGENERATE_RUN_LENGTH) -> bool:
    """True when some id repeats at least `run_length` times in a row."""
    run, previous = 0, None
    for token in ids:
        run = run + 1 if token == previous else 1
        previous = token
        if run >= run_length:
            return True
    return False


def apply_missing_state_policy(model: BackboneModel, policy: str, skipped: Sequence[int],
                               stream: InferenceStream, hidden: Tensor, exit_block: int) -> None:
    """
    Bring the skipped blocks' caches/states up to date after an exit at `exit_block`.

    Transformer: copy the exit block's key/value row, or recompute keys and
    values from the exit hidden state. Mamba: advance conv window and
    recurrent state from the exit hidden state, or leave them untouched.
    """
    if policy not in BACKBONE_POLICIES[model.kind]:
        raise ConfigurationError(f"policy '{policy}' is not available for a {model.kind} backbone")
    if not skipped:
        return
    if policy == "copy":
        kv_copy_forward(stream.state, exit_block, skipped, stream.position)
    elif policy == "skip":
        mamba_state_skip(stream.state, skipped)
    else:
        with tally("recompute"):
            for block in skipped:
                model.partial_forward(block, hidden, stream.state)
                stream.ledger.charge_recompute(model.partial_ops())


class EarlyExitEngine:
    """
    Drives a backbone (and optionally an exit bank) token by token.

    Args:
        model: Trained backbone
        bank: Exit classifiers, required for ExitPolicy modes
    """

    def __init__(self, model: BackboneModel, bank: Optional[ExitBank] = None):
        self.model = model
        self.bank = bank

    def check_mode(self, mode: Mode) -> None:
        n_blocks = self.model.n_blocks
        if isinstance(mode, PruneSpec):
            mode.check(n_blocks)
        elif isinstance(mode, ExitPolicy):
            if self.bank is None:
                raise ConfigurationError("an exit policy needs trained exit classifiers")
            if mode.variant != self.bank.variant:
                raise ConfigurationError(
                    f"policy asks for '{mode.variant}' exits, bank holds '{self.bank.variant}'"
                )
            if mode.state_policy not in BACKBONE_POLICIES[self.model.kind]:
                raise ConfigurationError(
                    f"policy '{mode.state_policy}' is not available for a {self.model.kind} backbone"
                )
            if self.bank.placement.n_blocks != n_blocks:
                raise ConfigurationError(
                    f"exit bank was placed for {self.bank.placement.n_blocks} blocks, "
                    f"backbone has {n_blocks}"
                )

    def open_stream(self) -> InferenceStream:
        return InferenceStream(self.model, self.bank)

    def _disabled(self, mode: Mode) -> set:
        return set(mode.disabled_blocks(self.model.n_blocks)) if isinstance(mode, PruneSpec) else set()

    # -------------------------------------------------------------------------
    # Prefill & step
    # -------------------------------------------------------------------------

    def prefill(self, stream: InferenceStream, ids: Sequence[int], mode: Mode = None) -> None:
        """
        Run prompt tokens through every enabled block in one pass, filling
        caches/states. Exit classifiers with state see every prefill position.
        """
        if len(ids) == 0:
            return
        model = self.model
        length = len(ids)
        disabled = self._disabled(mode)
        warm = isinstance(mode, ExitPolicy) and not self.bank.negligible

        with no_grad(), tally("prefill"):
            h = model.embed(np.asarray([ids]), start=stream.position)
            for index in range(model.n_blocks):
                if index in disabled:
                    continue
                stream.ledger.charge_prefill(
                    model.block_ops(length, model.cached_length(stream.state, index))
                )
                h = model.block_forward(index, h, stream.state)
                if warm and index in stream.exit_states:
                    classifier = self.bank.classifiers[index]
                    classifier.warm_up(model.final_normalize(h), stream.exit_states[index])
                    if stream.exit_states[index] is not None:
                        stream.ledger.charge_prefill(length * classifier.executed_macs * model.ops_per_mac)

        stream.ledger.charge_reference_prefill(
            model.n_blocks * model.block_ops(length, stream.position)
        )
        stream.position += length
        stream.history.extend(int(i) for i in ids)

    def _confidence(self, stream: InferenceStream, block: int, h: Tensor) -> float:
        classifier = self.bank.classifiers[block]
        features = self.model.final_normalize(h)
        with tally(None if classifier.negligible else "classifiers"):
            confidence = self.bank.confidence(block, features, stream.exit_states[block])
        if not classifier.negligible:
            stream.ledger.charge_classifier(classifier.executed_macs * self.model.ops_per_mac)
        return confidence

    def step(self, stream: InferenceStream, token: int, mode: Mode = None) -> StepOutput:
        """
        Forward one token and return the next-token logits and the exit depth.

        The depth is the block that fired the exit, or n_blocks when the
        token went through every block (n_blocks - p under pruning).
        """
        model = self.model
        n_blocks = model.n_blocks
        disabled = self._disabled(mode)
        depth = n_blocks - len(disabled)
        policy = mode if isinstance(mode, ExitPolicy) else None

        with no_grad():
            h = model.embed(np.asarray([[token]]), start=stream.position)
            for index in range(n_blocks - 1):
                if index in disabled:
                    continue
                with tally("backbone"):
                    stream.ledger.charge_backbone(
                        model.block_ops(1, model.cached_length(stream.state, index))
                    )
                    h = model.block_forward(index, h, stream.state)
                if policy is not None and index in stream.exit_states:
                    if should_exit(policy, self._confidence(stream, index, h)):
                        depth = index
                        apply_missing_state_policy(
                            model, policy.state_policy, list(range(index + 1, n_blocks - 1)),
                            stream, h, index,
                        )
                        break

            last = n_blocks - 1
            with tally("backbone"):
                stream.ledger.charge_backbone(model.block_ops(1, model.cached_length(stream.state, last)))
                h = model.block_forward(last, h, stream.state)
            with tally(None):
                logits = model.head_logits(h).data[0, -1]

        stream.ledger.record_token(n_blocks * model.block_ops(1, stream.position))
        stream.position += 1
        stream.history.append(int(token))
        return StepOutput(logits, depth)

    # -------------------------------------------------------------------------
    # Generation & scoring
    # -------------------------------------------------------------------------

    def generate(self, request: GenerationRequest) -> GenerationResult:
        """
        Greedy generation: prefill the prompt except its last token, then
        step token by token, feeding back each argmax.
        """
        mode = request.mode
        self.check_mode(mode)
        stream = self.open_stream()
        prompt = request.prompt_ids
        self.prefill(stream, prompt[:-1], mode)

        token = prompt[-1]
        produced: List[int] = []
        depths: List[int] = []
        for _ in range(request.max_new_tokens):
            out = self.step(stream, token, mode)
            logits = repetition_penalty(out.logits, produced, request.repetition_penalty)
            token = int(np.argmax(logits))
            produced.append(token)
            depths.append(out.depth)

        return GenerationResult(
            tokens=produced,
            exit_depths=depths,
            ledger=stream.ledger.snapshot(),
            degenerate=degenerate_check(produced),
        )

    def generate_pruned(self, spec: PruneSpec, request: GenerationRequest) -> GenerationResult:
        return self.generate(request.model_copy(update={"mode": spec}))

    def score(self, tokens: Sequence[int], prompt_len: int, mode: Mode = None) -> SequenceScore:
        """
        Teacher-forced next-token accuracy and negative log-likelihood of
        tokens[prompt_len:], decoding with the same early-exit path as
        generation.
        """
        self.check_mode(mode)
        if not 1 <= prompt_len < len(tokens):
            raise ConfigurationError(f"prompt_len {prompt_len} outside [1, {len(tokens) - 1}]")
        stream = self.open_stream()
        self.prefill(stream, tokens[:prompt_len - 1], mode)

        correct, nll, depths = 0, 0.0, []
        for position in range(prompt_len - 1, len(tokens) - 1):
            out = self.step(stream, tokens[position], mode)
            target = int(tokens[position + 1])
            log_probs = log_softmax_array(out.logits)
            correct += int(np.argmax(out.logits) == target)
            nll -= float(log_probs[target])
            depths.append(out.depth)

        return SequenceScore(
            correct=correct,
            count=len(depths),
            nll=nll,
            exit_depths=depths,
            ledger=stream.ledger.snapshot(),
        )
