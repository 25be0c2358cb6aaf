"""Per-step diagnostics, their persistence, and collapse detection.

Entropy metrics are reported as the negative mean log-probability per
token (higher = more uncertain) regardless of how the loss weighs the
confidence terms, so "entropy rises" plots read naturally.

The collapse detector watches window-smoothed series for the signature of
perception-bonus hacking: the perception KL falling far below its running
peak while the training reward collapses and at least one entropy series
trends upward. A rising clip-high fraction is recorded as corroborating
evidence but is not required to fire.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .domain import Prompt, TokenSeq
from .environment import END
from .errors import NotFoundError, ValidationError

#: StepMetrics fields persisted in the per-step metrics records. Wall-clock
#: time is intentionally absent: it is the one non-deterministic field, and
#: metrics files must be byte-identical across reruns of the same seed. It
#: is written to a separate timings sidecar instead.
PERSISTED_FIELDS = (
    "step",
    "mean_reward",
    "kl_prcp_mean",
    "kl_ref_mean",
    "entropy_pi",
    "entropy_pi_mask",
    "clip_high_frac",
    "loss_total",
    "loss_surrogate",
    "degenerate_groups",
    "relatedness_proxy",
)


@dataclass(frozen=True)
class StepMetrics:
    """One training step's diagnostics."""

    step: int
    mean_reward: float
    kl_prcp_mean: float
    kl_ref_mean: float
    entropy_pi: float
    entropy_pi_mask: float
    clip_high_frac: float
    loss_total: float
    loss_surrogate: float
    degenerate_groups: int
    wall_ms: int
    relatedness_proxy: float

    def __post_init__(self) -> None:
        for name in PERSISTED_FIELDS:
            v = getattr(self, name)
            if not np.isfinite(v):
                raise ValidationError(f"StepMetrics.{name} is not finite: {v!r}")
        if not 0.0 <= self.clip_high_frac <= 1.0:
            raise ValidationError(
                f"clip_high_frac must lie in [0, 1], got {self.clip_high_frac}"
            )


@dataclass(frozen=True)
class CollapseRules:
    """Thresholds of the collapse detector; all configurable."""

    smooth_window: int = 20
    prcp_peak_fraction: float = 0.25
    reward_peak_fraction: float = 0.6
    slope_window: int = 30
    slope_threshold: float = 1e-4

    def __post_init__(self) -> None:
        if self.smooth_window < 1 or self.slope_window < 2:
            raise ValidationError("collapse-rule windows are too small")


@dataclass(frozen=True)
class CollapseSignal:
    """Outcome of collapse detection with per-rule evidence."""

    fired: bool
    at_step: int
    prcp_drop: bool
    reward_drop: bool
    clip_high_rise: bool
    entropy_pi_rise: bool
    entropy_mask_rise: bool


def running_average(series: Sequence[float], window: int) -> np.ndarray:
    """Trailing mean over the last ``min(window, i + 1)`` points at index i."""
    if window < 1:
        raise ValidationError(f"window must be >= 1, got {window}")
    arr = np.asarray(series, dtype=np.float64)
    if arr.size == 0:
        return arr.copy()
    csum = np.concatenate([[0.0], np.cumsum(arr)])
    idx = np.arange(1, arr.size + 1)
    lo = np.maximum(idx - window, 0)
    return (csum[idx] - csum[lo]) / (idx - lo)


def _trailing_slope(arr: np.ndarray, t: int, window: int) -> float:
    """Least-squares slope of ``arr`` over the last ``window`` points up to t."""
    lo = max(t - window + 1, 0)
    seg = arr[lo : t + 1]
    if seg.size < 2:
        return 0.0
    x = np.arange(seg.size, dtype=np.float64)
    x -= x.mean()
    denom = float(np.sum(x * x))
    return float(np.sum(x * (seg - seg.mean())) / denom)


def detect_collapse(
    history: Sequence[StepMetrics], rules: CollapseRules = CollapseRules()
) -> CollapseSignal:
    """Scan a metrics history for the first step where collapse fires.

    Causal: the decision at step t only uses smoothed history up to t.
    Firing requires prcp_drop AND reward_drop AND at least one entropy
    series rising; the clip-high trend is recorded as evidence only.
    """
    if not history:
        raise ValidationError("collapse detection needs a nonempty history")
    kl = running_average([m.kl_prcp_mean for m in history], rules.smooth_window)
    reward = running_average([m.mean_reward for m in history], rules.smooth_window)
    ent_pi = running_average([m.entropy_pi for m in history], rules.smooth_window)
    ent_mask = running_average([m.entropy_pi_mask for m in history], rules.smooth_window)
    clip = running_average([m.clip_high_frac for m in history], rules.smooth_window)

    kl_peak, reward_peak = -np.inf, -np.inf
    for t in range(len(history)):
        kl_peak = max(kl_peak, kl[t])
        reward_peak = max(reward_peak, reward[t])
        prcp_drop = kl_peak > 0 and kl[t] < rules.prcp_peak_fraction * kl_peak
        reward_drop = reward_peak > 0 and reward[t] < rules.reward_peak_fraction * reward_peak
        pi_rise = _trailing_slope(ent_pi, t, rules.slope_window) > rules.slope_threshold
        mask_rise = _trailing_slope(ent_mask, t, rules.slope_window) > rules.slope_threshold
        clip_rise = _trailing_slope(clip, t, rules.slope_window) > rules.slope_threshold
        if prcp_drop and reward_drop and (pi_rise or mask_rise):
            return CollapseSignal(
                fired=True,
                at_step=history[t].step,
                prcp_drop=prcp_drop,
                reward_drop=reward_drop,
                clip_high_rise=clip_rise,
                entropy_pi_rise=pi_rise,
                entropy_mask_rise=mask_rise,
            )
    t = len(history) - 1
    return CollapseSignal(
        fired=False,
        at_step=history[t].step,
        prcp_drop=bool(kl_peak > 0 and kl[t] < rules.prcp_peak_fraction * kl_peak),
        reward_drop=bool(
            reward_peak > 0 and reward[t] < rules.reward_peak_fraction * reward_peak
        ),
        clip_high_rise=_trailing_slope(clip, t, rules.slope_window) > rules.slope_threshold,
        entropy_pi_rise=_trailing_slope(ent_pi, t, rules.slope_window) > rules.slope_threshold,
        entropy_mask_rise=_trailing_slope(ent_mask, t, rules.slope_window)
        > rules.slope_threshold,
    )


def relatedness_proxy(response: TokenSeq, prompt: Prompt) -> float:
    """Fraction of response tokens drawn from the answer/digit vocabulary.

    Policies that drift into emitting question-style or unrelated tokens
    score low; digit-plus-END responses score 1.0.
    """
    related = sum(1 for t in response.tokens if t <= END)
    return related / len(response)


class MetricsWriter:
    """Append-only newline-delimited metrics log.

    The first record is a header carrying the fully resolved config; each
    subsequent record is one step's persisted metrics. Records are written
    with sorted keys and flushed per line so a crash leaves a valid prefix.
    """

    def __init__(self, path, header: Optional[dict] = None, append: bool = False):
        self.path = path
        self._fh = open(path, "a" if append else "w", encoding="utf-8")
        if header is not None:
            self._write({"record": "header", **header})

    def _write(self, obj: dict) -> None:
        self._fh.write(json.dumps(obj, sort_keys=True) + "\n")
        self._fh.flush()

    def append(self, metrics: StepMetrics) -> None:
        record = {"record": "step"}
        record.update({k: getattr(metrics, k) for k in PERSISTED_FIELDS})
        self._write(record)

    def close(self) -> None:
        self._fh.close()

    def __enter__(self) -> "MetricsWriter":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def read_metrics(path) -> tuple[dict, list[StepMetrics]]:
    """Load a metrics file back into (header, step records)."""
    try:
        fh = open(path, "r", encoding="utf-8")
    except FileNotFoundError as exc:
        raise NotFoundError(f"no metrics file at {path}") from exc
    header: dict = {}
    steps: list[StepMetrics] = []
    with fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            kind = rec.pop("record", "step")
            if kind == "header":
                header = rec
            else:
                steps.append(StepMetrics(wall_ms=0, **rec))
    return header, steps
