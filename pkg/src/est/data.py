"""Corpus loading and batching.

Two on-disk corpus forms:
  - raw UTF-8 text, tokenized byte-level (one token per byte, vocab 256);
  - pre-tokenized binary: magic b"ESTK1", u32 LE vocab size, u64 LE token
    count, then that many u16 LE token ids.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import CorpusError

BINARY_MAGIC = b"ESTK1"
BYTE_VOCAB = 256


def load_corpus(path, vocab: int = BYTE_VOCAB) -> np.ndarray:
    """Token array (int64) from a text or binary corpus file.

    Every token id must be < ``vocab`` (the model's vocabulary size).
    """
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise CorpusError(f"cannot read corpus {path}: {exc}") from exc
    if raw.startswith(BINARY_MAGIC):
        tokens = _decode_binary(raw, path)
    else:
        tokens = np.frombuffer(raw, dtype=np.uint8).astype(np.int64)
    if tokens.size == 0:
        raise CorpusError(f"corpus {path} is empty")
    if tokens.size and int(tokens.max()) >= vocab:
        pos = int(np.argmax(tokens >= vocab))
        raise CorpusError(
            f"corpus {path} token id {int(tokens[pos])} at position {pos} >= vocab {vocab}"
        )
    return tokens


def _decode_binary(raw: bytes, path) -> np.ndarray:
    header = struct.calcsize("<5sIQ")
    if len(raw) < header:
        raise CorpusError(f"binary corpus {path} truncated before header")
    magic, file_vocab, count = struct.unpack_from("<5sIQ", raw)
    assert magic == BINARY_MAGIC
    expected = header + 2 * count
    if len(raw) != expected:
        raise CorpusError(f"binary corpus {path} has {len(raw)} bytes, header promises {expected}")
    tokens = np.frombuffer(raw, dtype="<u2", offset=header).astype(np.int64)
    if tokens.size and int(tokens.max()) >= file_vocab:
        raise CorpusError(f"binary corpus {path} contains ids >= its own vocab {file_vocab}")
    return tokens


def save_tokens(path, tokens, vocab: int) -> None:
    """Write the pre-tokenized binary corpus format."""
    tokens = np.asarray(tokens)
    if tokens.size and (int(tokens.min()) < 0 or int(tokens.max()) >= min(vocab, 2 ** 16)):
        raise CorpusError(f"token ids must fit [0, {min(vocab, 2 ** 16)})")
    with open(path, "wb") as f:
        f.write(struct.pack("<5sIQ", BINARY_MAGIC, vocab, tokens.size))
        f.write(tokens.astype("<u2").tobytes())


def decode_text(tokens) -> str:
    """Inverse of byte-level tokenization (for smoke tests and sampling)."""
    return bytes(int(t) for t in tokens).decode("utf-8", errors="replace")


def next_batch(corpus: np.ndarray, batch_size: int, seq_len: int, rng: np.random.Generator):
    """Uniformly random windows; targets are inputs shifted left by one."""
    if corpus.size < seq_len + 1:
        raise CorpusError(f"corpus has {corpus.size} tokens, need at least {seq_len + 1}")
    starts = rng.integers(0, corpus.size - seq_len, size=batch_size)
    inputs = np.stack([corpus[s:s + seq_len] for s in starts])
    targets = np.stack([corpus[s + 1:s + seq_len + 1] for s in starts])
    return inputs, targets


def eval_windows(corpus: np.ndarray, n_windows: int, seq_len: int):
    """Deterministic evenly spaced windows for evaluation."""
    if corpus.size < seq_len + 1:
        raise CorpusError(f"corpus has {corpus.size} tokens, need at least {seq_len + 1}")
    max_start = corpus.size - seq_len - 1
    if n_windows == 1:
        starts = [0]
    else:
        starts = [round(i * max_start / (n_windows - 1)) for i in range(n_windows)]
    inputs = np.stack([corpus[s:s + seq_len] for s in starts])
    targets = np.stack([corpus[s + 1:s + seq_len + 1] for s in starts])
    return inputs, targets
