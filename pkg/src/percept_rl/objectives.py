"""Pure numeric kernels for every loss term and objective variant.

Four algorithm families share these kernels:

* ``grpo`` — clipped surrogate with group-normalized advantages,
  response-level token averaging, and a reference-KL penalty.
* ``papo_grpo`` — grpo plus a maximized perception-KL bonus computed
  between the policy conditioned on the original image and the same
  policy conditioned on a corrupted image, optionally with twin
  confidence regularizers on both sequence log-probabilities.
* ``dapo`` — clip-higher surrogate, token-level averaging across the
  whole batch, no reference KL, mixed-correctness groups only.
* ``papo_dapo`` — dapo plus the perception-KL bonus and twin regularizers.

Everything in this module is a pure function of its inputs; the returned
loss is the negated objective so callers always minimize.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .domain import RolloutGroup
from .errors import (
    ConstraintError,
    DomainError,
    InvalidGroupError,
    ShapeError,
    ValidationError,
)

ALGORITHMS = ("grpo", "dapo", "papo_grpo", "papo_dapo")
GRPO_FAMILY = ("grpo", "papo_grpo")
DAPO_FAMILY = ("dapo", "papo_dapo")


@dataclass(frozen=True)
class ObjectiveConfig:
    """Algorithm selector plus every loss coefficient.

    ``gamma`` weights the perception-KL bonus, ``beta`` the reference-KL
    penalty, ``eta1``/``eta2`` the confidence regularizers on the original
    and masked sequence log-probabilities, and ``(eps_l, eps_h)`` the
    asymmetric clip range. ``std_floor`` guards advantage normalization
    against zero-variance groups.

    ``masked_branch_gradients`` controls whether gradients flow through the
    masked-image forward pass (both policies share parameters); the default
    treats the masked branch as a constant within one update.
    ``literal_entropy_sign`` flips the confidence regularizers so that the
    maximized objective subtracts the sequence log-probability instead of
    adding it.
    """

    algorithm: str = "grpo"
    gamma: float = 0.0
    beta: float = 0.0
    eta1: float = 0.0
    eta2: float = 0.0
    eps_l: float = 0.2
    eps_h: float = 0.3
    std_floor: float = 1e-6
    masked_branch_gradients: bool = False
    literal_entropy_sign: bool = False

    def __post_init__(self) -> None:
        if self.algorithm not in ALGORITHMS:
            raise ValidationError(f"unknown algorithm {self.algorithm!r}")
        for name in ("gamma", "beta", "eta1", "eta2"):
            if getattr(self, name) < 0:
                raise ValidationError(f"{name} must be >= 0")
        for name in ("eps_l", "eps_h"):
            v = getattr(self, name)
            if not 0.0 < v < 1.0:
                raise ValidationError(f"{name} must lie in (0, 1), got {v}")
        if self.eps_h < self.eps_l:
            raise ValidationError(
                f"clip-higher requires eps_h >= eps_l, got ({self.eps_l}, {self.eps_h})"
            )
        if self.std_floor <= 0:
            raise ValidationError("std_floor must be > 0")
        if self.algorithm in DAPO_FAMILY and self.beta != 0.0:
            raise ValidationError(
                f"{self.algorithm} removes the reference-KL penalty; beta must be 0"
            )
        if self.algorithm in ("grpo", "dapo") and self.gamma != 0.0:
            raise ValidationError(
                f"{self.algorithm} has no perception term; use papo_{self.algorithm} "
                "or set gamma = 0"
            )

    @property
    def is_dapo_family(self) -> bool:
        return self.algorithm in DAPO_FAMILY

    @property
    def entropy_sign(self) -> float:
        """Sign applied to the confidence terms inside the maximized objective."""
        return -1.0 if self.literal_entropy_sign else 1.0


@dataclass(frozen=True)
class LossBreakdown:
    """A scalar loss together with its objective-sign components.

    ``total`` is the negated objective. The components carry the sign they
    have inside the maximized objective, so

    ``total == -(surrogate - beta*kl_ref + gamma*kl_prcp
                 + sign*(eta1*ent_pi + eta2*ent_mask))``

    holds exactly by construction. ``clip_high_fraction`` is the fraction
    of tokens whose ratio exceeded ``1 + eps_h`` with a positive advantage.
    """

    total: float
    surrogate: float
    kl_ref: float
    kl_prcp: float
    ent_pi: float
    ent_mask: float
    clip_high_fraction: float


def normalize_advantages(rewards: Sequence[float], std_floor: float = 1e-6) -> np.ndarray:
    """Group-normalize rewards into per-response advantages.

    Returns ``(R_i - mean(R)) / max(std(R), std_floor)`` using the
    population standard deviation. Every token of response ``i`` later
    receives the same advantage. Zero-variance groups hit the floor and
    come out all-zero.
    """
    r = np.asarray(rewards, dtype=np.float64)
    if r.ndim != 1 or r.shape[0] < 2:
        raise InvalidGroupError(
            f"advantage normalization needs a group of >= 2 rewards, got shape {r.shape}"
        )
    if std_floor <= 0:
        raise DomainError("std_floor must be > 0")
    std = float(np.std(r))
    return (r - float(np.mean(r))) / max(std, float(std_floor))


def clipped_surrogate(
    ratio: float, advantage: float, eps_l: float, eps_h: float
) -> tuple[float, bool]:
    """Asymmetrically clipped importance-weighted advantage for one token.

    Returns ``min(ratio * A, clip(ratio, 1 - eps_l, 1 + eps_h) * A)`` and a
    flag marking tokens clipped above (``ratio > 1 + eps_h`` with ``A > 0``).
    """
    if ratio <= 0:
        raise DomainError(f"probability ratio must be > 0, got {ratio}")
    unclipped = ratio * advantage
    clipped = float(np.clip(ratio, 1.0 - eps_l, 1.0 + eps_h)) * advantage
    return min(unclipped, clipped), bool(ratio > 1.0 + eps_h and advantage > 0)


def kl_k3(ratio):
    """Nonnegative divergence estimate ``r - ln(r) - 1`` of a probability ratio.

    Accepts a positive scalar or array; zero exactly at ``r == 1``. Taking
    the expectation of ``kl_k3(q(x)/p(x))`` over ``x ~ p`` recovers
    ``KL(p || q)`` (see :func:`exact_kl_categorical` for the enumeration
    oracle used to validate this).
    """
    arr = np.asarray(ratio, dtype=np.float64)
    if not np.all(np.isfinite(arr)) or np.any(arr <= 0):
        raise DomainError("kl_k3 requires finite ratios > 0")
    out = arr - np.log(arr) - 1.0
    return float(out) if np.isscalar(ratio) or arr.ndim == 0 else out


def perception_ratios(logp_new, logp_mask) -> np.ndarray:
    """Element-wise ``exp(logp_new - logp_mask)``; always positive."""
    a = np.asarray(logp_new, dtype=np.float64)
    b = np.asarray(logp_mask, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"log-prob shapes differ: {a.shape} vs {b.shape}")
    return np.exp(a - b)


def sequence_entropy_term(logp) -> float:
    """Mean per-token log-probability of a sequence.

    The objective adds ``+eta * sequence_entropy_term(...)`` so that
    maximizing it rewards confident (low-entropy) sequences; 0 is the
    maximum, attained by probability-1 tokens.
    """
    arr = np.asarray(logp, dtype=np.float64)
    if arr.ndim != 1 or arr.shape[0] == 0:
        raise ShapeError(f"expected a nonempty 1-D log-prob array, got shape {arr.shape}")
    return float(np.mean(arr))


def exact_kl_categorical(p, q) -> float:
    """``KL(p || q)`` for two small categorical distributions, by enumeration."""
    pa = np.asarray(p, dtype=np.float64)
    qa = np.asarray(q, dtype=np.float64)
    if pa.shape != qa.shape or pa.ndim != 1:
        raise ShapeError(f"distributions must share a 1-D shape: {pa.shape} vs {qa.shape}")
    if np.any(pa <= 0) or np.any(qa <= 0):
        raise DomainError("distributions must be strictly positive")
    for name, arr in (("p", pa), ("q", qa)):
        if abs(float(arr.sum()) - 1.0) > 1e-12:
            raise DomainError(f"{name} must sum to 1 within 1e-12, got {arr.sum()!r}")
    return float(np.sum(pa * np.log(pa / qa)))


@dataclass(frozen=True)
class _PaddedGroup:
    """(G, T) views of a group's log-prob tables, zero-padded past each length."""

    new: np.ndarray
    old: np.ndarray
    ref: np.ndarray
    mask: np.ndarray
    valid: np.ndarray  # bool
    lengths: np.ndarray  # (G,)


def pad_group_tables(group: RolloutGroup) -> _PaddedGroup:
    g = group.group_size
    t_max = max(len(r) for r in group.responses)
    lengths = np.array([len(r) for r in group.responses], dtype=np.int64)
    valid = np.arange(t_max)[None, :] < lengths[:, None]
    tables = []
    for name in ("logp_new", "logp_old", "logp_ref", "logp_mask"):
        padded = np.zeros((g, t_max), dtype=np.float64)
        for i, row in enumerate(getattr(group, name)):
            padded[i, : row.shape[0]] = row
        tables.append(padded)
    return _PaddedGroup(*tables, valid=valid, lengths=lengths)


@dataclass(frozen=True)
class _TokenTerms:
    """Per-token objective pieces for one group, as padded (G, T) matrices.

    Padded positions are exactly zero in every matrix, so sums over rows
    or over the whole matrix need no masking.
    """

    surrogate: np.ndarray
    clip_high: np.ndarray
    kl_ref: np.ndarray
    kl_prcp: np.ndarray
    logp_new: np.ndarray
    logp_mask: np.ndarray
    valid: np.ndarray
    lengths: np.ndarray


def _group_token_terms(
    group: RolloutGroup, advantages: np.ndarray, cfg: ObjectiveConfig
) -> _TokenTerms:
    adv = np.asarray(advantages, dtype=np.float64)
    if adv.ndim != 1 or adv.shape[0] != group.group_size:
        raise ShapeError(
            f"got {adv.shape} advantages for a group of {group.group_size}"
        )
    p = pad_group_tables(group)
    a = adv[:, None]
    ratio = np.exp(p.new - p.old)
    unclipped = ratio * a
    clipped = np.clip(ratio, 1.0 - cfg.eps_l, 1.0 + cfg.eps_h) * a
    surrogate = np.minimum(unclipped, clipped) * p.valid
    clip_high = (ratio > 1.0 + cfg.eps_h) & (a > 0) & p.valid
    r_ref = np.exp(p.ref - p.new)
    r_prcp = np.exp(p.new - p.mask)
    kref = (r_ref - np.log(r_ref) - 1.0) * p.valid
    kprcp = (r_prcp - np.log(r_prcp) - 1.0) * p.valid
    return _TokenTerms(
        surrogate=surrogate,
        clip_high=clip_high,
        kl_ref=kref,
        kl_prcp=kprcp,
        logp_new=p.new * p.valid,
        logp_mask=p.mask * p.valid,
        valid=p.valid,
        lengths=p.lengths,
    )


def _assemble(
    cfg: ObjectiveConfig,
    surrogate: float,
    kl_ref: float,
    kl_prcp: float,
    ent_pi: float,
    ent_mask: float,
    clip_high_fraction: float,
) -> LossBreakdown:
    objective = (
        surrogate
        - cfg.beta * kl_ref
        + cfg.gamma * kl_prcp
        + cfg.entropy_sign * (cfg.eta1 * ent_pi + cfg.eta2 * ent_mask)
    )
    return LossBreakdown(
        total=-objective,
        surrogate=float(surrogate),
        kl_ref=float(kl_ref),
        kl_prcp=float(kl_prcp),
        ent_pi=float(ent_pi),
        ent_mask=float(ent_mask),
        clip_high_fraction=float(clip_high_fraction),
    )


def papo_grpo_loss(
    group: RolloutGroup, advantages, cfg: ObjectiveConfig
) -> LossBreakdown:
    """Response-averaged loss for one group (grpo / papo_grpo).

    Each per-token term is averaged over the tokens of its response, the
    response values are averaged over the group, and the weighted
    combination is negated into a loss. Plain grpo is the
    ``gamma = eta1 = eta2 = 0`` special case.
    """
    if cfg.algorithm not in GRPO_FAMILY:
        raise ValidationError(
            f"papo_grpo_loss expects a grpo-family config, got {cfg.algorithm!r}"
        )
    t = _group_token_terms(group, np.asarray(advantages, dtype=np.float64), cfg)
    resp_mean = lambda mat: float(np.mean(mat.sum(axis=1) / t.lengths))
    total_tokens = int(t.lengths.sum())
    return _assemble(
        cfg,
        surrogate=resp_mean(t.surrogate),
        kl_ref=resp_mean(t.kl_ref),
        kl_prcp=resp_mean(t.kl_prcp),
        ent_pi=resp_mean(t.logp_new),
        ent_mask=resp_mean(t.logp_mask),
        clip_high_fraction=int(t.clip_high.sum()) / total_tokens,
    )


def papo_dapo_loss(
    groups: Sequence[RolloutGroup], advantages: Sequence, cfg: ObjectiveConfig
) -> LossBreakdown:
    """Token-averaged loss over a whole batch of groups (dapo / papo_dapo).

    All per-token terms are pooled and averaged with weight
    ``1 / total_token_count`` across the batch, so long responses weigh
    more than short ones. Every group must satisfy the mixed-correctness
    side condition ``0 < #correct < G``; violations raise
    :class:`ConstraintError` because dynamic sampling is expected to have
    filtered them out. Plain dapo is the ``gamma = eta1 = eta2 = 0``
    special case.
    """
    if cfg.algorithm not in DAPO_FAMILY:
        raise ValidationError(
            f"papo_dapo_loss expects a dapo-family config, got {cfg.algorithm!r}"
        )
    groups = list(groups)
    if not groups:
        raise ShapeError("papo_dapo_loss needs at least one group")
    if len(advantages) != len(groups):
        raise ShapeError(
            f"got {len(advantages)} advantage rows for {len(groups)} groups"
        )
    for g in groups:
        if not 0 < g.num_correct < g.group_size:
            raise ConstraintError(
                f"group with {g.num_correct}/{g.group_size} correct responses "
                "violates 0 < #correct < G"
            )
    sums = {"surrogate": 0.0, "kl_ref": 0.0, "kl_prcp": 0.0,
            "logp_new": 0.0, "logp_mask": 0.0}
    clipped = 0
    total_tokens = 0
    for g, adv in zip(groups, advantages):
        t = _group_token_terms(g, np.asarray(adv, dtype=np.float64), cfg)
        for name in sums:
            sums[name] += float(getattr(t, name).sum())
        clipped += int(t.clip_high.sum())
        total_tokens += int(t.lengths.sum())
    return _assemble(
        cfg,
        surrogate=sums["surrogate"] / total_tokens,
        kl_ref=sums["kl_ref"] / total_tokens,
        kl_prcp=sums["kl_prcp"] / total_tokens,
        ent_pi=sums["logp_new"] / total_tokens,
        ent_mask=sums["logp_mask"] / total_tokens,
        clip_high_fraction=clipped / total_tokens,
    )


def batch_loss(
    groups: Sequence[RolloutGroup], advantages: Sequence, cfg: ObjectiveConfig
) -> LossBreakdown:
    """Batch-level breakdown for either family.

    grpo-family batches average the per-group breakdowns with equal group
    weight (the clip-high fraction stays a global token fraction);
    dapo-family batches delegate to :func:`papo_dapo_loss` directly.
    """
    groups = list(groups)
    if not groups:
        raise ShapeError("batch_loss needs at least one group")
    if cfg.is_dapo_family:
        return papo_dapo_loss(groups, advantages, cfg)
    parts = [papo_grpo_loss(g, a, cfg) for g, a in zip(groups, advantages)]
    total_tokens = sum(sum(len(r) for r in g.responses) for g in groups)
    clipped_tokens = sum(
        b.clip_high_fraction * sum(len(r) for r in g.responses)
        for g, b in zip(groups, parts)
    )
    mean = lambda attr: float(np.mean([getattr(b, attr) for b in parts]))
    return _assemble(
        cfg,
        surrogate=mean("surrogate"),
        kl_ref=mean("kl_ref"),
        kl_prcp=mean("kl_prcp"),
        ent_pi=mean("ent_pi"),
        ent_mask=mean("ent_mask"),
        clip_high_fraction=clipped_tokens / total_tokens,
    )
