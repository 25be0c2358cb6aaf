"""Construct corrupted images by random or semantic-aware patch masking."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .domain import MASKED, GridImage, Prompt, RngStream
from .errors import DomainError, ShapeError, UnsupportedError, ValidationError

STRATEGIES = ("random", "semantic")


@dataclass(frozen=True)
class PatchMask:
    """Boolean grid of masked patches plus how it was produced."""

    width: int
    height: int
    masked: tuple[bool, ...]
    strategy: str
    ratio: float

    def __post_init__(self) -> None:
        if len(self.masked) != self.width * self.height:
            raise ShapeError(
                f"mask has {len(self.masked)} entries for a "
                f"{self.width}x{self.height} grid"
            )
        if self.strategy not in STRATEGIES:
            raise ValidationError(f"unknown masking strategy {self.strategy!r}")

    @property
    def masked_count(self) -> int:
        return sum(self.masked)


@dataclass(frozen=True)
class SaliencyMap:
    """Per-patch saliency scores with their provenance."""

    scores: tuple[float, ...]
    provenance: str  # "attention-derived" | "oracle"

    def __post_init__(self) -> None:
        if not all(np.isfinite(s) for s in self.scores):
            raise DomainError("saliency scores must be finite")


def _apply(image: GridImage, masked: np.ndarray, strategy: str, ratio: float):
    cells = tuple(
        MASKED if m else c for c, m in zip(image.cells, masked.tolist())
    )
    corrupted = GridImage(image.width, image.height, cells)
    mask = PatchMask(
        image.width, image.height, tuple(bool(m) for m in masked), strategy, ratio
    )
    return corrupted, mask


def random_mask(
    image: GridImage, p: float, rng: RngStream
) -> tuple[GridImage, PatchMask]:
    """Independently replace each patch with MASKED with probability ``p``.

    Deterministic per stream; the expected masked fraction equals ``p``.
    """
    if not 0.0 <= p <= 1.0:
        raise DomainError(f"masking probability must lie in [0, 1], got {p}")
    draws = rng.generator().random(image.n_patches)
    return _apply(image, draws < p, "random", p)


def saliency_from_attention(attn, layers) -> SaliencyMap:
    """Aggregate patch-to-patch attention stacks into per-patch saliency.

    ``attn`` is indexable per layer as an ``(H, N, N)`` stack of
    row-stochastic matrices (rows are queries). Per selected layer the
    heads are mean-pooled, the score of patch ``i`` is the total attention
    column ``i`` receives from all query rows, and the final score averages
    the selected layers. The symbolic grids here carry no extra
    bookkeeping token, so the column sum runs over every row.
    """
    layers = tuple(layers)
    if not layers:
        raise ValidationError("layer selection must be nonempty")
    stacks = []
    n_patches = None
    for l in layers:
        try:
            stack = np.asarray(attn[l], dtype=np.float64)
        except (IndexError, KeyError) as exc:
            raise ValidationError(f"layer index {l} out of range") from exc
        if stack.ndim != 3 or stack.shape[1] != stack.shape[2]:
            raise ShapeError(
                f"layer {l} must be a (heads, N, N) stack, got {stack.shape}"
            )
        if n_patches is None:
            n_patches = stack.shape[1]
        elif stack.shape[1] != n_patches:
            raise ShapeError("attention stacks disagree on patch count")
        row_sums = stack.sum(axis=2)
        if np.any(np.abs(row_sums - 1.0) > 1e-6):
            raise ValidationError(
                f"layer {l} attention rows are not stochastic (tolerance 1e-6)"
            )
        stacks.append(stack.mean(axis=0))  # mean over heads -> (N, N)
    per_layer = np.stack([s.sum(axis=0) for s in stacks])  # column sums
    scores = per_layer.mean(axis=0)
    return SaliencyMap(tuple(float(s) for s in scores), "attention-derived")


def semantic_mask(
    image: GridImage, sal: SaliencyMap, p: float
) -> tuple[GridImage, PatchMask]:
    """Mask exactly ``floor(p * N)`` of the highest-saliency patches.

    Ties are broken by ascending patch index, so the selection is
    deterministic for any score vector.
    """
    if not 0.0 <= p <= 1.0:
        raise DomainError(f"masking probability must lie in [0, 1], got {p}")
    n = image.n_patches
    if len(sal.scores) != n:
        raise ShapeError(
            f"saliency covers {len(sal.scores)} patches, image has {n}"
        )
    k = int(np.floor(p * n))
    scores = np.asarray(sal.scores, dtype=np.float64)
    # Stable sort on negated scores keeps ascending-index order among ties.
    order = np.argsort(-scores, kind="stable")
    masked = np.zeros(n, dtype=bool)
    masked[order[:k]] = True
    return _apply(image, masked, "semantic", p)


def oracle_saliency(prompt: Prompt) -> SaliencyMap:
    """Ground-truth saliency: 1.0 on task-relevant patches, 0.0 elsewhere.

    Stands in for an external vision encoder; requires the prompt to carry
    generator metadata naming its target symbols.
    """
    if prompt.meta is None:
        raise UnsupportedError("prompt carries no task metadata")
    targets = set(prompt.meta.target_symbols)
    scores = tuple(
        1.0 if c in targets else 0.0 for c in prompt.image.cells
    )
    return SaliencyMap(scores, "oracle")
