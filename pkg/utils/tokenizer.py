"""
Early-Exit Engine - Byte Tokenizer & Corpus Loading

Tokens are raw bytes (0-255) plus a BOS marker (256).
"""

import logging
from pathlib import Path
from typing import List, Sequence, Tuple, Union

from config.settings import BOS_ID, BYTE_VOCAB, HOLDOUT_FRACTION, MIN_CORPUS_BYTES
from models.errors import ArtifactIOError, IngestionError

logger = logging.getLogger(__name__)


def tokenize(text: Union[bytes, str]) -> List[int]:
    """
    BOS followed by the UTF-8 bytes of `text`.

    Raises:
        IngestionError: the text is empty
    """
    data = text.encode("utf-8") if isinstance(text, str) else bytes(text)
    if not data:
        raise IngestionError("empty corpus")
    return [BOS_ID] + list(data)


def detokenize(ids: Sequence[int]) -> bytes:
    """Bytes for every byte-valued id; BOS is dropped."""
    return bytes(i for i in ids if 0 <= i < BYTE_VOCAB)


def load_corpus(path: Union[str, Path]) -> List[int]:
    path = Path(path)
    if not path.is_file():
        raise ArtifactIOError(f"corpus file not found: {path}")
    data = path.read_bytes()
    if not data:
        raise IngestionError(f"corpus file is empty: {path}")
    logger.info(f"Loaded corpus {path} ({len(data)} bytes)")
    if len(data) < MIN_CORPUS_BYTES:
        logger.warning(f"Corpus {path} is under {MIN_CORPUS_BYTES} bytes; held-out numbers will be noisy")
    return tokenize(data)


def split_holdout(tokens: Sequence[int], fraction: float = HOLDOUT_FRACTION) -> Tuple[List[int], List[int]]:
    """Split off the tail of the stream as held-out data."""
    cut = len(tokens) - max(1, int(len(tokens) * fraction))
    return list(tokens[:cut]), list(tokens[cut:])
