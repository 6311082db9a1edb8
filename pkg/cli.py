"""
Early-Exit Engine - Command Line

Usage:
    python cli.py train-backbone --backbone mamba
    python cli.py train-exits --backbone mamba --exit-variant mamba
    python cli.py generate --prompt "The " --theta 0.9
    python cli.py sweep --thetas 0.5,0.7,0.9
    python cli.py prune-eval

The corpus defaults to data/corpus.txt (see README); --corpus FILE picks another.
Every command accepts --config FILE (key = value lines); flags override it.
"""

import argparse
import logging
import os
import sys
from typing import Any, Callable, Dict, List, Optional

from pydantic import ValidationError
from rich.console import Console
from rich.logging import RichHandler

from config.run_config import RunConfig
from config.settings import BACKBONE_POLICIES, ERROR_EXIT_CODES
from models.engine import EarlyExitEngine
from models.errors import ConfigurationError, EngineError
from models.exits import ExitBank, ExitPolicy
from models.ledger import reduction_factor
from models.records import GenerationRequest, PruneSpec
from models.training import train_backbone, train_classifiers
from utils.checkpoint import load_backbone, load_exit_bank, save_backbone, save_exit_bank
from utils.report import render_table, write_csv, write_html, write_svg
from utils.sweep import (
    best_within_quality, check_monotonicity, early_exit_points, prune_points, run_sweep,
)
from utils.tokenizer import detokenize, load_corpus, split_holdout, tokenize
from utils.validators import as_configuration_error, build_run_config, get_field_help_text

logger = logging.getLogger("early_exit")
console = Console()


# =============================================================================
# Commands
# =============================================================================

def _corpus(config: RunConfig):
    if not config.corpus:
        raise ConfigurationError("this command needs --corpus")
    return split_holdout(load_corpus(config.corpus))


def _load_model(config: RunConfig):
    model = load_backbone(config.output_dir)
    if model.kind != config.backbone:
        raise ConfigurationError(
            f"checkpoint in {config.output_dir} is a {model.kind} backbone, run asks for {config.backbone}"
        )
    return model


def cmd_train_backbone(config: RunConfig, args: argparse.Namespace) -> int:
    train, holdout = _corpus(config)
    model, report = train_backbone(config.backbone_config(), train,
                                   config.backbone_train_config(), holdout=holdout)
    save_backbone(model, config.output_dir)
    console.print(f"[bold green]Backbone trained[/bold green]: final loss {report.final_loss:.4f}, "
                  f"held-out {report.holdout_before:.4f} -> {report.holdout_after:.4f}")
    return 0


def cmd_train_exits(config: RunConfig, args: argparse.Namespace) -> int:
    train, holdout = _corpus(config)
    model = _load_model(config)
    bank = ExitBank(config.exit_variant, config.exit_placement(), config.cell_config(), seed=config.seed)
    report = train_classifiers(model, bank, train, config.exit_train_config(), holdout=holdout)
    save_exit_bank(bank, config.output_dir)
    console.print(f"[bold green]{bank.variant} exits trained[/bold green] at blocks {bank.blocks}: "
                  f"held-out loss {report.holdout_before:.4f} -> {report.holdout_after:.4f}")
    return 0


def _generation_mode(config: RunConfig, args: argparse.Namespace):
    """Prune spec, exit policy, or None for the full model, from the generate flags."""
    try:
        if args.prune is not None:
            return PruneSpec(p=args.prune)
        if args.theta is None:
            return None
        policy = args.policy or config.active_policies()[0]
        allowed = BACKBONE_POLICIES[config.backbone]
        if policy not in allowed:
            raise ConfigurationError(f"policy '{policy}' not available for {config.backbone}; use {allowed}")
        return ExitPolicy(threshold=args.theta, variant=config.exit_variant, state_policy=policy)
    except ValidationError as e:
        raise as_configuration_error(e)


def cmd_generate(config: RunConfig, args: argparse.Namespace) -> int:
    mode = _generation_mode(config, args)
    model = _load_model(config)
    bank = load_exit_bank(config.output_dir) if isinstance(mode, ExitPolicy) else None
    engine = EarlyExitEngine(model, bank)
    policy_name = mode.state_policy if isinstance(mode, ExitPolicy) else None
    try:
        request = GenerationRequest(
            prompt_ids=tokenize(args.prompt),
            max_new_tokens=args.max_new,
            mode=mode,
            repetition_penalty=config.penalty_for(policy_name),
        )
    except ValidationError as e:
        raise as_configuration_error(e)
    result = engine.generate(request)
    console.print(args.prompt + detokenize(result.tokens).decode("utf-8", errors="replace"), markup=False)
    console.print(f"mean exit depth {result.mean_exit_depth:.2f} of {model.n_blocks}, "
                  f"reduction factor {reduction_factor(result.ledger, config.include_prefill):.3f}"
                  + (" [red](degenerate)[/red]" if result.degenerate else ""))
    return 0


def _report(records, config: RunConfig, stem: str, title: str) -> None:
    os.makedirs(config.output_dir, exist_ok=True)
    frame = write_csv(records, os.path.join(config.output_dir, f"{stem}.csv"))
    write_svg(frame, os.path.join(config.output_dir, f"{stem}.svg"), title)
    if config.html:
        write_html(frame, os.path.join(config.output_dir, f"{stem}.html"))
    console.print(render_table(frame, title))


def cmd_sweep(config: RunConfig, args: argparse.Namespace) -> int:
    _, holdout = _corpus(config)
    model = _load_model(config)
    engine = EarlyExitEngine(model, load_exit_bank(config.output_dir))
    records = run_sweep(engine, early_exit_points(config) + prune_points(config), holdout, config)
    _report(records, config, "sweep", f"{config.backbone} / {config.exit_variant} exits")

    for problem in check_monotonicity(records):
        logger.warning(problem)
    full = next(r for r in records if r.prune_p == 0)
    best = best_within_quality(records, full.accuracy)
    if best is None:
        console.print("No valid early-exit configuration keeps 95% of full-model accuracy")
    else:
        console.print(f"Best within 95% of full accuracy: [bold]{best.config_id}[/bold] "
                      f"(RF {best.reduction_factor:.3f}, accuracy {best.accuracy:.4f} vs {full.accuracy:.4f})")
    return 0


def cmd_prune_eval(config: RunConfig, args: argparse.Namespace) -> int:
    _, holdout = _corpus(config)
    engine = EarlyExitEngine(_load_model(config))
    records = run_sweep(engine, prune_points(config), holdout, config)
    _report(records, config, "prune", f"{config.backbone} layer pruning")
    return 0


COMMANDS: Dict[str, Callable[[RunConfig, argparse.Namespace], int]] = {
    "train-backbone": cmd_train_backbone,
    "train-exits": cmd_train_exits,
    "generate": cmd_generate,
    "sweep": cmd_sweep,
    "prune-eval": cmd_prune_eval,
}


# =============================================================================
# Parsing
# =============================================================================

def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="File of key = value settings")
    parser.add_argument("-v", "--verbose", action="store_true", help="Debug logging")
    for name, info in RunConfig.model_fields.items():
        flag = "--" + name.replace("_", "-")
        if info.annotation is bool:
            parser.add_argument(flag, dest=name, action="store_const", const=True, default=None,
                                help=get_field_help_text(name))
        else:
            parser.add_argument(flag, dest=name, default=None, help=get_field_help_text(name))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="early-exit", description="Early-exit language-model engine")
    commands = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sub = commands.add_parser(name)
        _add_config_flags(sub)
        if name == "generate":
            sub.add_argument("--prompt", required=True, help="Prompt text")
            sub.add_argument("--max-new", type=int, default=64, help="Tokens to generate")
            sub.add_argument("--theta", type=float, default=None, help="Exit threshold (omit for full model)")
            sub.add_argument("--policy", default=None, help="Missing-state policy")
            sub.add_argument("--prune", type=int, default=None, help="Disable this many blocks instead")
    return parser


def setup_logging(verbose: bool = False) -> None:
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(message)s",
        datefmt="[%X]",
        handlers=[RichHandler(rich_tracebacks=True, show_path=False)],
    )


def config_overrides(args: argparse.Namespace) -> Dict[str, Any]:
    return {name: getattr(args, name) for name in RunConfig.model_fields if getattr(args, name, None) is not None}


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    setup_logging(args.verbose)
    try:
        config = build_run_config(args.config, config_overrides(args))
        return COMMANDS[args.command](config, args)
    except EngineError as e:
        logger.error(str(e))
        return ERROR_EXIT_CODES.get(e.category, ERROR_EXIT_CODES["engine"])


if __name__ == "__main__":
    sys.exit(main())
