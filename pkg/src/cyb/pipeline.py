"""Pause insertion, corpus packing and corpus file formats.

Real tokens keep their raw index as position; every pause inherits the
position of the real token it follows and carries its own token id
(``<pause1>``, ``<pause2>``, ...). All slots of a token group predict the
next real token; the last group of a sequence has no next token and is
marked with :data:`MASK`.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from cyb.fileio import atomic_write

from cyb.stop_process import validate_prior

MASK = -1


@dataclass(frozen=True)
class Vocab:
    """Id layout: content ids first, then the DK output id, then pause ids at the top.

    ``separator`` is the document separator and must be a content id.
    """

    size: int
    max_pauses: int = 3
    separator: int = 0

    def __post_init__(self):
        if self.max_pauses < 0:
            raise ValueError("max_pauses must be >= 0")
        if self.n_content < 2:
            raise ValueError("vocabulary too small for the reserved ids")
        if not 0 <= self.separator < self.n_content:
            raise ValueError("separator must be a content id")

    @property
    def dk_id(self) -> int:
        return self.size - self.max_pauses - 1

    @property
    def n_content(self) -> int:
        return self.size - self.max_pauses - 1

    def pause_id(self, k: int) -> int:
        """Id of the k-th pause (1-based)."""
        if not 1 <= k <= self.max_pauses:
            raise ValueError(f"vocabulary has no reserved id for pause {k}")
        return self.size - self.max_pauses + k - 1

    def pause_ids(self) -> np.ndarray:
        return np.arange(self.size - self.max_pauses, self.size)


@dataclass
class ExpandedSequence:
    ids: np.ndarray
    positions: np.ndarray
    pause_slot: np.ndarray  # 0 for real tokens, k for the k-th pause
    target: np.ndarray  # next real token, or MASK
    step_of_slot: np.ndarray  # 1-based step within the token group
    granted: np.ndarray  # steps granted to each real token

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def n_tokens(self) -> int:
        return len(self.granted)

    @property
    def group(self) -> np.ndarray:
        """Index of the real token each slot belongs to."""
        return np.cumsum(self.pause_slot == 0) - 1

    def dump(self, path) -> None:
        """Debug dump: one slot per line ``id position pause_slot target``."""
        lines = (f"{i} {p} {k} {t}" for i, p, k, t in
                 zip(self.ids, self.positions, self.pause_slot, self.target))
        atomic_write(path, "\n".join(lines) + "\n")


def pack_corpus(documents: Iterable[Sequence[int]], raw_len: int, separator: int = 0) -> list[np.ndarray]:
    """Concatenate documents with a separator between them, then cut into ``raw_len`` chunks.

    The trailing partial chunk is dropped.
    """
    if raw_len < 2:
        raise ValueError("raw_len must be >= 2")
    parts = []
    for doc in documents:
        if parts:
            parts.append(np.array([separator], dtype=np.int64))
        parts.append(np.asarray(doc, dtype=np.int64))
    if not parts or sum(len(p) for p in parts) == 0:
        raise ValueError("empty corpus")
    stream = np.concatenate(parts)
    n = len(stream) // raw_len
    return [stream[i * raw_len:(i + 1) * raw_len] for i in range(n)]


def expand(raw: Sequence[int], granted: Sequence[int], vocab: Vocab) -> ExpandedSequence:
    """Insert ``granted[i] - 1`` pauses after real token ``i``."""
    raw = np.asarray(raw, dtype=np.int64)
    granted = np.asarray(granted, dtype=np.int64)
    if raw.shape != granted.shape:
        raise ValueError("one granted step count per real token is required")
    if len(granted) and granted.min() < 1:
        raise ValueError("each token needs at least one step")
    if len(granted) and granted.max() - 1 > vocab.max_pauses:
        raise ValueError(f"vocabulary lacks reserved ids for {granted.max() - 1} pauses")
    n = len(raw)
    group = np.repeat(np.arange(n), granted)
    starts = np.concatenate([[0], np.cumsum(granted)[:-1]]).astype(np.int64)
    step = np.arange(len(group)) - starts[group] + 1
    pause_slot = step - 1
    ids = raw[group].copy()
    is_pause = pause_slot > 0
    ids[is_pause] = vocab.size - vocab.max_pauses + pause_slot[is_pause] - 1
    next_tok = np.append(raw[1:], MASK)
    return ExpandedSequence(
        ids=ids,
        positions=group.copy(),
        pause_slot=pause_slot,
        target=next_tok[group],
        step_of_slot=step,
        granted=granted.copy(),
    )


def expand_constant(raw: Sequence[int], n_pauses: int, vocab: Vocab) -> ExpandedSequence:
    """Recipe 1: the same number of pauses after every real token."""
    if n_pauses < 0:
        raise ValueError("n_pauses must be >= 0")
    return expand(raw, np.full(len(raw), n_pauses + 1), vocab)


def expand_sampled(raw: Sequence[int], omega, seed, vocab: Vocab) -> ExpandedSequence:
    """Recipe 2: draw the step budget of each token from ``omega``."""
    omega = validate_prior(omega)
    rng = np.random.default_rng(seed)
    granted = rng.choice(len(omega), size=len(raw), p=omega) + 1
    return expand(raw, granted, vocab)


def strip_pauses(expanded: ExpandedSequence) -> np.ndarray:
    """Recover the raw token sequence."""
    slot = np.asarray(expanded.pause_slot)
    if len(slot) and slot[0] != 0:
        raise ValueError("sequence must start with a real token")
    prev = np.concatenate([[0], slot[:-1]])
    if np.any((slot > 0) & (slot != prev + 1)):
        raise ValueError("pause slots out of order")
    return np.asarray(expanded.ids)[slot == 0].copy()


# ---------------------------------------------------------------- corpus files

_MAGIC = b"CYBTOK1\n"


def write_corpus(documents: Iterable[Sequence[int]], path) -> None:
    """Write documents; ``.bin`` selects length-prefixed little-endian u32, anything else text."""
    path = Path(path)
    if path.suffix == ".bin":
        parts = [_MAGIC]
        for doc in documents:
            arr = np.asarray(doc, dtype="<u4")
            parts += [struct.pack("<I", len(arr)), arr.tobytes()]
        atomic_write(path, b"".join(parts))
    else:
        atomic_write(path, "".join(" ".join(str(int(x)) for x in doc) + "\n" for doc in documents))


def read_corpus(path) -> list[np.ndarray]:
    path = Path(path)
    if path.suffix == ".bin":
        data = path.read_bytes()
        if not data.startswith(_MAGIC):
            raise ValueError(f"{path}: not a binary token corpus")
        docs, off = [], len(_MAGIC)
        while off < len(data):
            (n,) = struct.unpack_from("<I", data, off)
            off += 4
            docs.append(np.frombuffer(data, dtype="<u4", count=n, offset=off).astype(np.int64))
            off += 4 * n
        return docs
    docs = []
    for line in path.read_text().splitlines():
        if line.strip():
            docs.append(np.array([int(x) for x in line.split()], dtype=np.int64))
    return docs
