# Utils module for the early-exit engine
from .tokenizer import tokenize, detokenize, load_corpus, split_holdout
from .validators import build_run_config, validate_run_config, get_field_help_text
from .checkpoint import save_backbone, load_backbone, save_exit_bank, load_exit_bank
from .report import write_csv, write_svg, build_figure, render_table

__all__ = [
    'tokenize',
    'detokenize',
    'load_corpus',
    'split_holdout',
    'build_run_config',
    'validate_run_config',
    'get_field_help_text',
    'save_backbone',
    'load_backbone',
    'save_exit_bank',
    'load_exit_bank',
    'write_csv',
    'write_svg',
    'build_figure',
    'render_table'
]
