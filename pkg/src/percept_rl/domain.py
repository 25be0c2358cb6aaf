"""Shared value types and the deterministic random-stream contract.

All types here are immutable values; they can be shared freely between
threads and across module boundaries. Randomness everywhere in the package
flows through :class:`RngStream`, a splittable counter-based stream keyed
by ``(seed, hierarchical path)`` so that any sub-computation can be
replayed in isolation.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Iterator, Optional

import numpy as np

from .errors import DomainError, ShapeError

#: Reserved patch symbol marking a blacked-out cell in a corrupted image.
MASKED = 0

DEPENDENCY_LEVELS = ("low", "medium", "high")


def contains_subsequence(haystack: tuple[int, ...], needle: tuple[int, ...]) -> bool:
    """True when ``needle`` occurs contiguously inside ``haystack``."""
    n, m = len(haystack), len(needle)
    if m == 0 or m > n:
        return m == 0
    return any(haystack[i : i + m] == needle for i in range(n - m + 1))


@dataclass(frozen=True)
class TokenSeq:
    """An immutable, nonempty sequence of vocabulary indices."""

    tokens: tuple[int, ...]

    def __post_init__(self) -> None:
        coerced = tuple(int(t) for t in self.tokens)
        if len(coerced) == 0:
            raise DomainError("TokenSeq must contain at least one token")
        if any(t < 0 for t in coerced):
            raise DomainError(f"negative token index in {coerced!r}")
        object.__setattr__(self, "tokens", coerced)

    def __len__(self) -> int:
        return len(self.tokens)

    def __iter__(self) -> Iterator[int]:
        return iter(self.tokens)


@dataclass(frozen=True)
class GridImage:
    """A symbolic image: a ``width x height`` grid of patch symbols.

    Cell ``(x, y)`` lives at flat index ``y * width + x``. The reserved
    symbol :data:`MASKED` only ever appears in corrupted copies produced by
    the masking module; task generators never emit it.
    """

    width: int
    height: int
    cells: tuple[int, ...]

    def __post_init__(self) -> None:
        if self.width < 1 or self.height < 1:
            raise DomainError("grid dimensions must be >= 1")
        coerced = tuple(int(c) for c in self.cells)
        if len(coerced) != self.width * self.height:
            raise ShapeError(
                f"expected {self.width * self.height} cells, got {len(coerced)}"
            )
        if any(c < 0 for c in coerced):
            raise DomainError("negative patch symbol")
        object.__setattr__(self, "cells", coerced)

    @property
    def n_patches(self) -> int:
        return self.width * self.height


@dataclass(frozen=True)
class TaskMeta:
    """Generator-side metadata attached to a prompt.

    ``target_symbols`` lists the patch symbols that carry the information
    needed to answer the question; the saliency oracle scores exactly those
    cells.
    """

    task: str
    target_symbols: tuple[int, ...]


@dataclass(frozen=True)
class Prompt:
    """One training instance: question text, symbolic image, ground truth."""

    question: TokenSeq
    image: GridImage
    answer: TokenSeq
    dependency: str
    meta: Optional[TaskMeta] = None

    def __post_init__(self) -> None:
        if self.dependency not in DEPENDENCY_LEVELS:
            raise DomainError(f"unknown dependency level {self.dependency!r}")
        if self.dependency == "low" and not contains_subsequence(
            self.question.tokens, self.answer.tokens
        ):
            raise DomainError(
                "low-dependency prompts must embed the answer verbatim in the question"
            )


def _as_logp_row(arr, length: int, name: str, index: int) -> np.ndarray:
    row = np.asarray(arr, dtype=np.float64)
    if row.ndim != 1 or row.shape[0] != length:
        raise ShapeError(
            f"{name}[{index}] has shape {row.shape}, expected ({length},)"
        )
    return row


@dataclass(frozen=True)
class RolloutGroup:
    """One prompt's sampled responses with rewards and log-prob tables.

    The four per-token log-probability tables are shape-aligned with the
    responses: entry ``i`` of each table is a 1-D float64 array of length
    ``len(responses[i])``. ``masked_images[i]`` is the corrupted image the
    ``logp_mask`` table was evaluated on (all entries may reference the
    same object when one mask is shared by the whole group).
    """

    prompt: Prompt
    responses: tuple[TokenSeq, ...]
    rewards: tuple[float, ...]
    logp_new: tuple[np.ndarray, ...]
    logp_old: tuple[np.ndarray, ...]
    logp_ref: tuple[np.ndarray, ...]
    logp_mask: tuple[np.ndarray, ...]
    masked_images: tuple[GridImage, ...]

    def __post_init__(self) -> None:
        g = len(self.responses)
        if g < 1:
            raise ShapeError("rollout group must contain at least one response")
        object.__setattr__(self, "responses", tuple(self.responses))
        rewards = tuple(float(r) for r in self.rewards)
        if len(rewards) != g:
            raise ShapeError(f"got {len(rewards)} rewards for {g} responses")
        if any(r not in (0.0, 1.0) for r in rewards):
            raise DomainError(f"rewards must be binary, got {rewards!r}")
        object.__setattr__(self, "rewards", rewards)
        for name in ("logp_new", "logp_old", "logp_ref", "logp_mask"):
            table = tuple(getattr(self, name))
            if len(table) != g:
                raise ShapeError(f"{name} has {len(table)} rows for {g} responses")
            rows = tuple(
                _as_logp_row(row, len(self.responses[i]), name, i)
                for i, row in enumerate(table)
            )
            object.__setattr__(self, name, rows)
        masked = tuple(self.masked_images)
        if len(masked) != g:
            raise ShapeError(f"got {len(masked)} masked images for {g} responses")
        object.__setattr__(self, "masked_images", masked)

    @property
    def group_size(self) -> int:
        return len(self.responses)

    @property
    def num_correct(self) -> int:
        return sum(1 for r in self.rewards if r == 1.0)


@dataclass(frozen=True)
class RngStream:
    """A named, splittable random stream.

    Two streams with equal ``(seed, path)`` produce identical draws;
    streams with different paths are statistically independent. Children
    are derived with :func:`derive_stream`, never by consuming draws, so
    the tree of streams is stable under code reordering.
    """

    seed: int
    path: tuple[str, ...] = field(default_factory=tuple)

    def __post_init__(self) -> None:
        object.__setattr__(self, "seed", int(self.seed))
        object.__setattr__(self, "path", tuple(str(p) for p in self.path))

    def _key_bytes(self) -> bytes:
        parts = [int(self.seed).to_bytes(8, "little", signed=True)]
        for label in self.path:
            raw = label.encode("utf-8")
            parts.append(len(raw).to_bytes(4, "little"))
            parts.append(raw)
        return b"".join(parts)

    def generator(self) -> np.random.Generator:
        """A fresh numpy generator positioned at the start of this stream."""
        digest = hashlib.blake2b(self._key_bytes(), digest_size=16).digest()
        key = int.from_bytes(digest, "little")
        return np.random.Generator(np.random.Philox(key=key))


def derive_stream(parent: RngStream, label: str) -> RngStream:
    """Derive the deterministic child stream named ``label``.

    Pure: calling twice with the same arguments yields identical streams,
    and distinct labels yield independent streams.
    """
    if not label:
        raise DomainError("stream label must be nonempty")
    return RngStream(parent.seed, parent.path + (str(label),))
