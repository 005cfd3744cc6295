"""Corpus ingestion and batching.

Text corpora are plain UTF-8 files.  Pixel-sequence data comes from a CSV
with one example per line, ``label,p0,...,p783`` (pixels as 0-255 integers,
28 x 28 row-major), optionally mean-pool downsampled and reordered by a
fixed seeded permutation shared across splits.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .errors import ConfigError, DataError


@dataclass
class Vocab:
    """Bijective symbol <-> index map in first-occurrence order."""

    symbols: list[str]
    level: str  # "char" or "word"

    def __post_init__(self):
        self.index = {s: i for i, s in enumerate(self.symbols)}
        if len(self.index) != len(self.symbols):
            raise DataError("vocab symbols are not unique")

    def __len__(self) -> int:
        return len(self.symbols)

    def encode(self, text: str) -> np.ndarray:
        toks = self._tokens(text)
        return np.fromiter((self.index[t] for t in toks), dtype=np.int64, count=len(toks))

    def decode(self, codes) -> str:
        sep = "" if self.level == "char" else " "
        return sep.join(self.symbols[int(c)] for c in codes)

    def _tokens(self, text: str) -> list[str]:
        return list(text) if self.level == "char" else text.split()


def load_text(path: str, level: str = "char") -> tuple[Vocab, np.ndarray]:
    """Read a UTF-8 corpus and encode it as int64 codes."""
    if level not in ("char", "word"):
        raise ConfigError(f"unknown text level {level!r}")
    if not os.path.exists(path):
        raise DataError(f"corpus file not found: {path}")
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    toks = list(text) if level == "char" else text.split()
    if not toks:
        raise DataError(f"corpus is empty: {path}")
    seen: dict[str, int] = {}
    for t in toks:
        if t not in seen:
            seen[t] = len(seen)
    vocab = Vocab(list(seen.keys()), level)
    return vocab, vocab.encode(text)


def split_codes(codes: np.ndarray, train_frac: float, valid_frac: float):
    """Contiguous train/valid/test split of an encoded symbol stream."""
    if not (0 < train_frac < 1 and 0 <= valid_frac < 1 and train_frac + valid_frac <= 1):
        raise ConfigError("invalid split fractions")
    n = len(codes)
    i = int(n * train_frac)
    j = int(n * (train_frac + valid_frac))
    return codes[:i], codes[i:j], codes[j:]


@dataclass
class SequenceBatcher:
    """Next-symbol windows over an encoded stream.

    The stream is cut into ``batch_size`` contiguous sub-streams so hidden
    state can persist across consecutive batches.  Non-overlapping windows
    partition each sub-stream; overlapping windows advance by ``stride``
    (window-local state reset is the caller's policy).
    """

    codes: np.ndarray
    seq_len: int
    batch_size: int
    overlap: str = "non_overlapping"
    stride: int | None = None

    def __post_init__(self):
        if self.overlap not in ("non_overlapping", "overlapping"):
            raise ConfigError(f"unknown overlap mode {self.overlap!r}")
        if self.seq_len < 1 or self.batch_size < 1:
            raise ConfigError("seq_len and batch_size must be >= 1")
        if len(self.codes) <= self.seq_len:
            raise DataError(
                f"corpus length {len(self.codes)} too short for seq_len {self.seq_len}"
            )
        if self.stride is None:
            self.stride = max(1, self.seq_len // 2)
        stream_len = len(self.codes) // self.batch_size
        if stream_len <= self.seq_len:
            raise DataError(
                f"corpus too short to cut into {self.batch_size} streams of "
                f"windows of {self.seq_len}"
            )
        self._streams = (
            np.asarray(self.codes[: stream_len * self.batch_size], dtype=np.int64)
            .reshape(self.batch_size, stream_len)
        )
        if self.overlap == "non_overlapping":
            self._starts = list(range(0, ((stream_len - 1) // self.seq_len) * self.seq_len, self.seq_len))
        else:
            self._starts = list(range(0, stream_len - self.seq_len, self.stride))

    def __len__(self) -> int:
        return len(self._starts)

    def __iter__(self) -> Iterator[tuple[np.ndarray, np.ndarray]]:
        for s in self._starts:
            yield (
                self._streams[:, s : s + self.seq_len],
                self._streams[:, s + 1 : s + self.seq_len + 1],
            )


def make_batches(batcher: SequenceBatcher) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Iterate (inputs, targets-shifted-by-one) windows."""
    return iter(batcher)


# ---------------------------------------------------------------------------
# pixel sequences


@dataclass
class PermutedImageSet:
    """Flattened pixel sequences in a fixed shared order, scaled to [0, 1]."""

    images: np.ndarray  # N x T float64
    labels: np.ndarray  # N int64
    permutation: np.ndarray  # T int64, bijection applied to every image
    source_hw: int  # side length before flattening

    def __len__(self) -> int:
        return len(self.labels)


def load_pmnist(
    path: str,
    permutation_seed: int = 0,
    downsample: int = 1,
    permute: bool = True,
) -> PermutedImageSet:
    """Load the digits CSV, downsample by mean pooling, apply the fixed
    seeded pixel permutation (identity when ``permute`` is false)."""
    if not os.path.exists(path):
        raise DataError(f"digits CSV not found: {path}")
    try:
        raw = np.loadtxt(path, delimiter=",", dtype=np.float64, ndmin=2)
    except ValueError as exc:
        raise DataError(f"malformed digits CSV {path}: {exc}") from None
    if raw.ndim != 2 or raw.shape[1] != 785:
        raise DataError(
            f"digits CSV rows must be label plus 784 pixels, got {raw.shape}"
        )
    labels = raw[:, 0].astype(np.int64)
    if labels.min() < 0 or labels.max() > 9:
        raise DataError("digit labels must be in [0, 10)")
    pixels = raw[:, 1:] / 255.0
    side = 28
    if downsample > 1:
        pixels = mean_pool(pixels, side, downsample)
        side //= downsample
    steps = side * side
    if permute:
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(int(permutation_seed))))
        perm = rng.permutation(steps)
    else:
        perm = np.arange(steps)
    return PermutedImageSet(np.ascontiguousarray(pixels[:, perm]), labels, perm.astype(np.int64), side)


def mean_pool(pixels: np.ndarray, side: int, factor: int) -> np.ndarray:
    """Downsample flattened side x side images by factor x factor mean pooling."""
    if factor < 1 or side % factor:
        raise ConfigError(f"downsample factor {factor} must divide side {side}")
    new = side // factor
    return (
        pixels.reshape(-1, new, factor, new, factor)
        .mean(axis=(2, 4))
        .reshape(pixels.shape[0], new * new)
    )


def split_images(dataset: PermutedImageSet, train_frac: float, valid_frac: float):
    """Contiguous split; the CSV row order is the (pre-shuffled) source order."""
    if not (0 < train_frac < 1 and 0 <= valid_frac < 1 and train_frac + valid_frac <= 1):
        raise ConfigError("invalid split fractions")
    n = len(dataset)
    i = int(n * train_frac)
    j = int(n * (train_frac + valid_frac))
    mk = lambda lo, hi: PermutedImageSet(
        dataset.images[lo:hi], dataset.labels[lo:hi], dataset.permutation, dataset.source_hw
    )
    return mk(0, i), mk(i, j), mk(j, n)


def image_batches(
    dataset: PermutedImageSet,
    batch_size: int,
    rng: np.random.Generator | None = None,
    drop_last: bool = True,
) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """(pixels B x T, labels B) batches; shuffled when an RNG is given."""
    n = len(dataset)
    order = rng.permutation(n) if rng is not None else np.arange(n)
    stop = n - (n % batch_size) if drop_last and n >= batch_size else n
    for lo in range(0, stop, batch_size):
        idx = order[lo : lo + batch_size]
        yield dataset.images[idx], dataset.labels[idx]
