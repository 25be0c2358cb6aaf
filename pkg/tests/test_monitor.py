"""Diagnostics, collapse detection, and metrics persistence."""

import numpy as np
import pytest

from percept_rl.domain import GridImage, Prompt, TokenSeq
from percept_rl.environment import END, WORD_IDS
from percept_rl.errors import ValidationError
from percept_rl.monitor import (
    CollapseRules,
    MetricsWriter,
    StepMetrics,
    detect_collapse,
    read_metrics,
    relatedness_proxy,
    running_average,
)


def metrics_at(step, reward=0.5, kl_prcp=1.0, ent_pi=1.0, ent_mask=1.0, clip=0.0):
    return StepMetrics(
        step=step,
        mean_reward=reward,
        kl_prcp_mean=kl_prcp,
        kl_ref_mean=0.01,
        entropy_pi=ent_pi,
        entropy_pi_mask=ent_mask,
        clip_high_frac=clip,
        loss_total=-reward,
        loss_surrogate=reward,
        degenerate_groups=0,
        wall_ms=1,
        relatedness_proxy=1.0,
    )


class TestRunningAverage:
    def test_window_one_is_identity(self):
        series = [3.0, 1.0, 4.0, 1.0]
        np.testing.assert_array_equal(running_average(series, 1), series)

    def test_constant_series(self):
        np.testing.assert_array_equal(running_average([2.0] * 10, 20), 2.0)

    def test_hand_computed(self):
        np.testing.assert_allclose(
            running_average([0.0, 1.0, 0.0, 1.0], 2), [0.0, 0.5, 0.5, 0.5]
        )

    def test_empty_series(self):
        assert running_average([], 5).size == 0

    def test_bad_window(self):
        with pytest.raises(ValidationError):
            running_average([1.0], 0)


def collapse_fixture(
    flip=50, total=100, kl=(1.0, 0.05), reward=(0.8, 0.2),
    pi_ramp=True, mask_ramp=False, clip_ramp=False,
):
    history = []
    for i in range(total):
        post = i >= flip
        ramp = 0.02 * (i - flip + 1) if post else 0.0
        history.append(
            metrics_at(
                step=i + 1,
                reward=reward[1] if post else reward[0],
                kl_prcp=kl[1] if post else kl[0],
                ent_pi=1.0 + (ramp if pi_ramp else 0.0),
                ent_mask=1.0 + (ramp if mask_ramp else 0.0),
                clip=(0.3 * ramp if clip_ramp else 0.0),
            )
        )
    return history


class TestDetectCollapse:
    def test_healthy_run_does_not_fire(self):
        history = [
            metrics_at(i + 1, reward=min(0.9, 0.1 + 0.01 * i)) for i in range(200)
        ]
        assert not detect_collapse(history).fired

    def test_fires_at_hand_computed_transition(self):
        # Window-20 smoothing: the kl series crosses 25% of its peak 16
        # steps after the flip (k > 14.78), the reward crosses 60% of its
        # peak earlier, so the kl rule binds: firing index 65, step 66.
        history = collapse_fixture()
        signal = detect_collapse(history)
        assert signal.fired
        assert signal.at_step == 66
        assert signal.prcp_drop and signal.reward_drop and signal.entropy_pi_rise

    def test_requires_all_three_conditions(self):
        only_kl = collapse_fixture(reward=(0.8, 0.8), pi_ramp=False)
        assert not detect_collapse(only_kl).fired
        only_reward = collapse_fixture(kl=(1.0, 1.0), pi_ramp=False)
        assert not detect_collapse(only_reward).fired
        no_entropy = collapse_fixture(pi_ramp=False)
        assert not detect_collapse(no_entropy).fired

    def test_mask_entropy_alone_suffices(self):
        signal = detect_collapse(collapse_fixture(pi_ramp=False, mask_ramp=True))
        assert signal.fired and signal.entropy_mask_rise and not signal.entropy_pi_rise

    def test_clip_rise_is_recorded_as_evidence(self):
        with_clip = detect_collapse(collapse_fixture(clip_ramp=True))
        without = detect_collapse(collapse_fixture())
        assert with_clip.fired and with_clip.clip_high_rise
        assert without.fired and not without.clip_high_rise

    def test_causal_prefix_stability(self):
        history = collapse_fixture()
        full = detect_collapse(history)
        prefix = detect_collapse(history[: full.at_step])
        assert prefix.fired and prefix.at_step == full.at_step
        early = detect_collapse(history[: full.at_step - 1])
        assert not early.fired

    def test_smoothing_then_thresholding_has_no_hidden_state(self):
        # Feeding an already-smoothed series through a window-1 detector
        # fires at the same step as smoothing inside the detector.
        history = collapse_fixture()
        rules = CollapseRules()
        smoothed = {
            name: running_average(
                [getattr(m, name) for m in history], rules.smooth_window
            )
            for name in (
                "kl_prcp_mean", "mean_reward", "entropy_pi", "entropy_pi_mask",
                "clip_high_frac",
            )
        }
        pre = [
            metrics_at(
                m.step,
                reward=smoothed["mean_reward"][i],
                kl_prcp=smoothed["kl_prcp_mean"][i],
                ent_pi=smoothed["entropy_pi"][i],
                ent_mask=smoothed["entropy_pi_mask"][i],
                clip=smoothed["clip_high_frac"][i],
            )
            for i, m in enumerate(history)
        ]
        direct = detect_collapse(history, rules)
        rerun = detect_collapse(
            pre, CollapseRules(smooth_window=1, slope_window=rules.slope_window)
        )
        assert rerun.fired == direct.fired and rerun.at_step == direct.at_step

    def test_empty_history_rejected(self):
        with pytest.raises(ValidationError):
            detect_collapse([])


class TestRelatednessProxy:
    def _prompt(self):
        return Prompt(
            TokenSeq((WORD_IDS["count"],)), GridImage(1, 1, (2,)), TokenSeq((3,)),
            "high",
        )

    def test_all_digits_scores_one(self):
        assert relatedness_proxy(TokenSeq((1, 2, END)), self._prompt()) == 1.0

    def test_question_vocabulary_scores_zero(self):
        words = TokenSeq((WORD_IDS["count"], WORD_IDS["color"]))
        assert relatedness_proxy(words, self._prompt()) == 0.0

    def test_half_and_half(self):
        mixed = TokenSeq((3, WORD_IDS["color"]))
        assert relatedness_proxy(mixed, self._prompt()) == 0.5


class TestMetricsPersistence:
    def test_round_trip_is_lossless(self, tmp_path):
        path = tmp_path / "metrics.jsonl"
        records = [
            metrics_at(i + 1, reward=np.pi / (i + 1), kl_prcp=1e-7 * (i + 1))
            for i in range(5)
        ]
        with MetricsWriter(path, {"config": {"seed": 3}}) as writer:
            for m in records:
                writer.append(m)
        header, loaded = read_metrics(path)
        assert header == {"config": {"seed": 3}}
        for a, b in zip(records, loaded):
            for name in (
                "step", "mean_reward", "kl_prcp_mean", "kl_ref_mean",
                "entropy_pi", "entropy_pi_mask", "clip_high_frac",
                "loss_total", "loss_surrogate", "degenerate_groups",
                "relatedness_proxy",
            ):
                assert getattr(a, name) == getattr(b, name)

    def test_wall_clock_is_not_persisted(self, tmp_path):
        path = tmp_path / "metrics.jsonl"
        with MetricsWriter(path, {}) as writer:
            writer.append(metrics_at(1))
        assert "wall_ms" not in path.read_text()

    def test_identical_records_identical_bytes(self, tmp_path):
        paths = []
        for name in ("a", "b"):
            path = tmp_path / f"{name}.jsonl"
            with MetricsWriter(path, {"config": {"seed": 1}}) as writer:
                writer.append(metrics_at(1, reward=1 / 3))
            paths.append(path.read_bytes())
        assert paths[0] == paths[1]

    def test_metrics_validation(self):
        with pytest.raises(ValidationError):
            metrics_at(1, clip=1.5)
        with pytest.raises(ValidationError):
            metrics_at(1, reward=float("nan"))
