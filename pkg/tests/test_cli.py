import os

import pandas as pd
import pytest

from cli import build_parser, main
from config.settings import CSV_COLUMNS, ERROR_EXIT_CODES

SMALL = [
    "--backbone", "transformer", "--n-blocks", "4", "--d-model", "8", "--n-heads", "2",
    "--max-seq-len", "64", "--exit-variant", "calm", "--backbone-steps", "2", "--exit-steps", "2",
    "--batch-size", "2", "--seq-len", "16", "--thetas", "0.5,2", "--eval-windows", "2",
    "--eval-length", "12", "--prompt-len", "4", "--gen-prompts", "2", "--gen-tokens", "4",
]


def test_parser_exposes_run_settings():
    args = build_parser().parse_args(["sweep", "--thetas", "0.5,0.9", "--include-prefill"])
    assert args.thetas == "0.5,0.9"
    assert args.include_prefill is True
    assert args.d_model is None


def test_train_and_sweep_end_to_end(tmp_path, corpus_path):
    common = SMALL + ["--corpus", corpus_path, "--output-dir", str(tmp_path)]
    assert main(["train-backbone"] + common) == 0
    assert os.path.isfile(tmp_path / "backbone.bin")
    assert main(["train-exits"] + common) == 0
    assert os.path.isfile(tmp_path / "exits.json")
    assert main(["generate", "--prompt", "The ", "--max-new", "4", "--theta", "0.5"] + common) == 0
    assert main(["sweep", "--html"] + common) == 0

    frame = pd.read_csv(tmp_path / "sweep.csv")
    assert list(frame.columns) == CSV_COLUMNS
    # 2 policies x 2 thresholds, then p = 0, 1, 2
    assert len(frame) == 7
    assert os.path.isfile(tmp_path / "sweep.svg")
    assert os.path.isfile(tmp_path / "sweep.html")

    assert main(["prune-eval"] + common) == 0
    assert len(pd.read_csv(tmp_path / "prune.csv")) == 3


def test_errors_map_to_exit_codes(tmp_path, corpus_path):
    missing = main(["sweep", "--corpus", corpus_path, "--output-dir", str(tmp_path)])
    assert missing == ERROR_EXIT_CODES["io"]
    bad = main(["sweep", "--thetas", "0.9,0.1", "--output-dir", str(tmp_path)])
    assert bad == ERROR_EXIT_CODES["configuration"]
    bogus = main(["generate", "--prompt", "The ", "--theta", "0.5", "--policy", "bogus", "--output-dir", str(tmp_path)])
    assert bogus == ERROR_EXIT_CODES["configuration"]
    no_corpus = main(["train-backbone", "--corpus", "", "--output-dir", str(tmp_path)])
    assert no_corpus == ERROR_EXIT_CODES["configuration"]
    absent = main(["train-backbone", "--corpus", str(tmp_path / "absent.txt"), "--output-dir", str(tmp_path)])
    assert absent == ERROR_EXIT_CODES["io"]


@pytest.mark.parametrize("flags", [
    ["--theta", "0.5", "--policy", "bogus"],
    ["--theta", "0.5", "--policy", "skip"],
    ["--theta", "-1"],
    ["--prune", "-1"],
    ["--max-new", "0"],
])
def test_bad_generate_flags_are_configuration_errors(tmp_path, corpus_path, flags):
    common = SMALL + ["--corpus", corpus_path, "--output-dir", str(tmp_path)]
    assert main(["train-backbone"] + common) == 0
    code = main(["generate", "--prompt", "The "] + flags + common)
    assert code == ERROR_EXIT_CODES["configuration"]
