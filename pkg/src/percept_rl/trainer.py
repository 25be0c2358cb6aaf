"""The rollout-optimize loop: group sampling, dynamic sampling, updates.

One step collects ``prompts_per_step`` rollout groups from the frozen
current policy, normalizes rewards into group-relative advantages,
evaluates the configured objective once, and applies a single optimizer
update (on-policy, one inner epoch). The reference policy is the step-0
parameter snapshot and never changes during a run.

Every random draw flows through a stream derived from the run seed along
the path ``step -> prompt slot -> retry -> purpose``, so runs replay
bit-identically and checkpoint resumption continues the exact trajectory.
"""

from __future__ import annotations

import dataclasses
import json
import os
import time
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from . import __version__
from .config import MaskConfig, RunConfig, resolved_dict
from .domain import GridImage, Prompt, RngStream, RolloutGroup, TokenSeq, derive_stream
from .environment import END, TaskSpec, generate_task, load_tasks, verify
from .errors import CheckpointError, NotFoundError, NumericError, ValidationError
from .masking import oracle_saliency, random_mask, semantic_mask
from .monitor import MetricsWriter, StepMetrics, read_metrics, relatedness_proxy
from .objectives import LossBreakdown, normalize_advantages
from .policy import (
    ArchConfig,
    PolicyParams,
    batch_loss_and_gradient,
    logprob_prompt_batch,
    logprob_responses,
    sample_prompt_batch,
    sample_response,
)

TRAIN_CHECKPOINT_FORMAT = "percept-rl-train"


@dataclass
class TrainState:
    """Mutable state of one training run."""

    params: PolicyParams
    ref_params: PolicyParams
    opt_m: Optional[np.ndarray]
    opt_v: Optional[np.ndarray]
    step: int
    seed: int

    @property
    def root_stream(self) -> RngStream:
        return RngStream(self.seed)


def init_state(cfg: RunConfig) -> TrainState:
    arch = cfg.arch()
    root = RngStream(cfg.trainer.seed)
    params = PolicyParams.random_init(
        arch, derive_stream(root, "init"), cfg.policy.init_scale,
        sym_scale=cfg.policy.sym_init_scale,
    )
    moments = (
        (np.zeros_like(params.flat), np.zeros_like(params.flat))
        if cfg.trainer.optimizer == "adam"
        else (None, None)
    )
    return TrainState(
        params=params,
        ref_params=params.copy(),
        opt_m=moments[0],
        opt_v=moments[1],
        step=0,
        seed=cfg.trainer.seed,
    )


def make_masked_image(
    prompt: Prompt, mask_cfg: MaskConfig, stream: RngStream
) -> GridImage:
    """Corrupt a prompt's image per the configured strategy."""
    if mask_cfg.strategy == "random":
        corrupted, _ = random_mask(prompt.image, mask_cfg.ratio, stream)
    else:
        corrupted, _ = semantic_mask(prompt.image, oracle_saliency(prompt), mask_cfg.ratio)
    return corrupted


def _rollout_groups_batched(
    params: PolicyParams,
    ref_params: PolicyParams,
    prompts: Sequence[Prompt],
    mask_cfg: MaskConfig,
    group_size: int,
    temperature: float,
    streams: Sequence[RngStream],
) -> list[RolloutGroup]:
    """Collect one rollout group per prompt, batched across prompts.

    Each prompt consumes only streams derived from its own entry in
    ``streams`` (labels ``samples``, ``mask`` / ``mask{g}``), so the
    result for a prompt is independent of what else sits in the batch.
    """
    if group_size < 2:
        raise ValidationError("group_size must be >= 2")
    questions = [p.question for p in prompts]
    images = [p.image for p in prompts]
    responses, logp_new = sample_prompt_batch(
        params, questions, images, group_size,
        [derive_stream(s, "samples") for s in streams], END, temperature,
    )
    logp_ref = logprob_prompt_batch(ref_params, questions, images, responses)

    if mask_cfg.resample == "per_rollout":
        masked_images = [
            tuple(
                make_masked_image(p, mask_cfg, derive_stream(s, f"mask{g}"))
                for g in range(group_size)
            )
            for p, s in zip(prompts, streams)
        ]
        flat_q = [q for i, q in enumerate(questions) for _ in range(group_size)]
        flat_img = [img for row in masked_images for img in row]
        flat_resp = [[r] for row in responses for r in row]
        flat_mask = logprob_prompt_batch(params, flat_q, flat_img, flat_resp)
        logp_mask = [
            [flat_mask[i * group_size + g][0] for g in range(group_size)]
            for i in range(len(prompts))
        ]
    else:
        shared = [
            make_masked_image(p, mask_cfg, derive_stream(s, "mask"))
            for p, s in zip(prompts, streams)
        ]
        masked_images = [tuple([m] * group_size) for m in shared]
        logp_mask = logprob_prompt_batch(params, questions, shared, responses)

    groups = []
    for i, prompt in enumerate(prompts):
        groups.append(
            RolloutGroup(
                prompt=prompt,
                responses=tuple(responses[i]),
                rewards=tuple(verify(prompt.answer, r) for r in responses[i]),
                logp_new=tuple(logp_new[i]),
                logp_old=tuple(row.copy() for row in logp_new[i]),
                logp_ref=tuple(logp_ref[i]),
                logp_mask=tuple(logp_mask[i]),
                masked_images=masked_images[i],
            )
        )
    return groups


def rollout_group(
    params: PolicyParams,
    ref_params: PolicyParams,
    prompt: Prompt,
    mask_cfg: MaskConfig,
    group_size: int,
    temperature: float,
    stream: RngStream,
) -> RolloutGroup:
    """Sample one group from the frozen policy and fill all log-prob tables.

    ``logp_new`` equals ``logp_old`` at collection time (single inner
    epoch); the reference table comes from the frozen initial parameters
    and the masked table from the corrupted image.
    """
    return _rollout_groups_batched(
        params, ref_params, [prompt], mask_cfg, group_size, temperature, [stream]
    )[0]


@dataclass(frozen=True)
class DynamicSampleResult:
    group: RolloutGroup
    degenerate: bool
    attempts: int


def dynamic_sample(
    make_group: Callable[[int], RolloutGroup], max_retries: int
) -> DynamicSampleResult:
    """Regenerate groups until 0 < #correct < G or retries are exhausted.

    ``make_group`` receives the attempt index and must produce a fresh
    prompt and rng substream per attempt. Exhaustion is a flagged outcome,
    not an error: the last group comes back marked degenerate and the loss
    path drops it while metrics still count it.
    """
    if max_retries < 1:
        raise ValidationError("max_retries must be >= 1")
    group = None
    for attempt in range(max_retries):
        group = make_group(attempt)
        if 0 < group.num_correct < group.group_size:
            return DynamicSampleResult(group, degenerate=False, attempts=attempt + 1)
    return DynamicSampleResult(group, degenerate=True, attempts=max_retries)


class _PromptSource:
    """Online task generation, or replay from a fixed task dump."""

    def __init__(self, cfg: RunConfig):
        self.spec = cfg.env
        self.prompts = (
            load_tasks(cfg.trainer.task_dump) if cfg.trainer.task_dump else None
        )
        self.per_step = cfg.trainer.prompts_per_step
        self.retries = (
            cfg.trainer.max_retries if cfg.dynamic_sampling_enabled else 1
        )

    def get(self, step_index: int, slot: int, attempt: int, stream: RngStream) -> Prompt:
        if self.prompts is None:
            return generate_task(self.spec, derive_stream(stream, "task"))
        flat = (step_index * self.per_step + slot) * self.retries + attempt
        return self.prompts[flat % len(self.prompts)]


def _apply_update(state: TrainState, grad: np.ndarray, cfg: RunConfig) -> None:
    tr = cfg.trainer
    if tr.optimizer == "sgd":
        state.params.flat -= tr.lr * grad
        return
    t = state.step + 1
    state.opt_m[:] = tr.adam_beta1 * state.opt_m + (1 - tr.adam_beta1) * grad
    state.opt_v[:] = tr.adam_beta2 * state.opt_v + (1 - tr.adam_beta2) * grad**2
    m_hat = state.opt_m / (1 - tr.adam_beta1**t)
    v_hat = state.opt_v / (1 - tr.adam_beta2**t)
    state.params.flat -= tr.lr * m_hat / (np.sqrt(v_hat) + tr.adam_eps)


def _collect_step_groups(
    state: TrainState, cfg: RunConfig, source: _PromptSource, step_index: int
) -> tuple[list[RolloutGroup], list[bool]]:
    """All groups of one step, in slot order, batched round by round.

    With dynamic sampling, round r retries every still-degenerate slot
    with attempt index r; each slot consumes exactly the streams the
    sequential :func:`dynamic_sample` contract would, so batching does not
    change any outcome.
    """
    tr = cfg.trainer
    step_stream = derive_stream(state.root_stream, f"step{step_index}")
    n_slots = tr.prompts_per_step
    groups: dict[int, RolloutGroup] = {}
    pending = list(range(n_slots))
    rounds = tr.max_retries if cfg.dynamic_sampling_enabled else 1
    for attempt in range(rounds):
        if not pending:
            break
        streams = [
            derive_stream(
                derive_stream(step_stream, f"prompt{slot}"), f"retry{attempt}"
            )
            for slot in pending
        ]
        prompts = [
            source.get(step_index, slot, attempt, s)
            for slot, s in zip(pending, streams)
        ]
        batch = _rollout_groups_batched(
            state.params, state.ref_params, prompts, cfg.mask,
            tr.group_size, tr.temperature, streams,
        )
        still = []
        for slot, group in zip(pending, batch):
            groups[slot] = group
            if (
                cfg.dynamic_sampling_enabled
                and not 0 < group.num_correct < group.group_size
            ):
                still.append(slot)
        pending = still
    ordered = [groups[slot] for slot in range(n_slots)]
    # Degenerate means retry-exhausted under dynamic sampling; for the
    # grpo family it marks zero-variance groups (floored advantages).
    flags = [g.num_correct in (0, g.group_size) for g in ordered]
    return ordered, flags


def train_step(state: TrainState, cfg: RunConfig, source: Optional[_PromptSource] = None
               ) -> tuple[TrainState, StepMetrics]:
    """Collect one batch of groups, update once, and emit diagnostics."""
    t_start = time.perf_counter()
    if source is None:
        source = _PromptSource(cfg)
    tr = cfg.trainer
    step_index = state.step
    groups, degenerate_flags = _collect_step_groups(state, cfg, source, step_index)

    if cfg.dynamic_sampling_enabled:
        included = [g for g, d in zip(groups, degenerate_flags) if not d]
    else:
        included = groups
    advantages = [
        normalize_advantages(g.rewards, cfg.objective.std_floor) for g in included
    ]

    if included:
        try:
            breakdown, grad = batch_loss_and_gradient(
                state.params, included, advantages, cfg.objective
            )
        except NumericError as exc:
            raise NumericError(f"step {step_index + 1}: {exc}") from exc
        _apply_update(state, grad, cfg)
    else:
        breakdown = LossBreakdown(0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0)

    all_rewards = [r for g in groups for r in g.rewards]
    related = [
        relatedness_proxy(resp, g.prompt) for g in groups for resp in g.responses
    ]
    state.step = step_index + 1
    wall_ms = int(round((time.perf_counter() - t_start) * 1000))
    metrics = StepMetrics(
        step=state.step,
        mean_reward=float(np.mean(all_rewards)),
        kl_prcp_mean=breakdown.kl_prcp,
        kl_ref_mean=breakdown.kl_ref,
        entropy_pi=-breakdown.ent_pi,
        entropy_pi_mask=-breakdown.ent_mask,
        clip_high_frac=breakdown.clip_high_fraction,
        loss_total=breakdown.total,
        loss_surrogate=breakdown.surrogate,
        degenerate_groups=int(sum(degenerate_flags)),
        wall_ms=wall_ms,
        relatedness_proxy=float(np.mean(related)),
    )
    return state, metrics


# --- run directories -------------------------------------------------------

MANIFEST_NAME = "manifest.json"
METRICS_NAME = "metrics.jsonl"
TIMINGS_NAME = "timings.jsonl"
CHECKPOINT_DIR = "checkpoints"
REF_CHECKPOINT = "ref.ckpt"


def _checkpoint_path(out_dir: str, step: int) -> str:
    return os.path.join(out_dir, CHECKPOINT_DIR, f"step_{step:06d}.ckpt")


def save_train_state(path, state: TrainState) -> None:
    header = {
        "format": TRAIN_CHECKPOINT_FORMAT,
        "version": 1,
        "arch": state.params.arch.to_dict(),
        "count": state.params.arch.num_params,
        "step": state.step,
        "seed": state.seed,
        "has_moments": state.opt_m is not None,
    }
    with open(path, "wb") as fh:
        fh.write((json.dumps(header, sort_keys=True) + "\n").encode("utf-8"))
        fh.write(np.ascontiguousarray(state.params.flat, dtype="<f8").tobytes())
        if state.opt_m is not None:
            fh.write(np.ascontiguousarray(state.opt_m, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(state.opt_v, dtype="<f8").tobytes())


def load_train_state(path, ref_params: PolicyParams) -> TrainState:
    with open(path, "rb") as fh:
        try:
            header = json.loads(fh.readline().decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"unreadable checkpoint header in {path}") from exc
        if header.get("format") != TRAIN_CHECKPOINT_FORMAT:
            raise CheckpointError(f"{path} is not a trainer checkpoint")
        arch = ArchConfig(**header["arch"])
        n = arch.num_params
        raw = fh.read()
    sections = 3 if header["has_moments"] else 1
    if len(raw) != sections * n * 8:
        raise CheckpointError(f"{path} has truncated parameter data")
    arrays = [
        np.frombuffer(raw, dtype="<f8", count=n, offset=i * n * 8).astype(np.float64)
        for i in range(sections)
    ]
    return TrainState(
        params=PolicyParams(arch, arrays[0]),
        ref_params=ref_params,
        opt_m=arrays[1] if header["has_moments"] else None,
        opt_v=arrays[2] if header["has_moments"] else None,
        step=int(header["step"]),
        seed=int(header["seed"]),
    )


def load_policy_checkpoint(path) -> PolicyParams:
    """Load policy parameters from either a policy or a trainer checkpoint."""
    from .policy import CHECKPOINT_FORMAT, load_params

    with open(path, "rb") as fh:
        try:
            header = json.loads(fh.readline().decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"unreadable checkpoint header in {path}") from exc
    fmt = header.get("format")
    if fmt == CHECKPOINT_FORMAT:
        return load_params(path)
    if fmt == TRAIN_CHECKPOINT_FORMAT:
        arch = ArchConfig(**header["arch"])
        dummy = PolicyParams.zeros(arch)
        return load_train_state(path, dummy).params
    raise CheckpointError(f"{path} is not a recognized checkpoint")


@dataclass
class RunResult:
    out_dir: str
    history: list[StepMetrics]
    final_checkpoint: str
    manifest_path: str
    metrics_path: str


def write_manifest(cfg: RunConfig, out_dir: str) -> str:
    manifest = {
        "config": resolved_dict(cfg),
        "seed": cfg.trainer.seed,
        "code_version": __version__,
        "artifacts": {
            "metrics": METRICS_NAME,
            "timings": TIMINGS_NAME,
            "checkpoints": CHECKPOINT_DIR,
            "ref_checkpoint": REF_CHECKPOINT,
        },
    }
    path = os.path.join(out_dir, MANIFEST_NAME)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def read_manifest(out_dir: str) -> dict:
    path = os.path.join(out_dir, MANIFEST_NAME)
    if not os.path.exists(path):
        raise NotFoundError(f"no manifest in {out_dir}")
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def _run_loop(
    cfg: RunConfig,
    out_dir: str,
    state: TrainState,
    history: list[StepMetrics],
    stop_after: Optional[int],
) -> RunResult:
    tr = cfg.trainer
    source = _PromptSource(cfg)
    target = tr.steps if stop_after is None else min(stop_after, tr.steps)
    metrics_path = os.path.join(out_dir, METRICS_NAME)
    timings_path = os.path.join(out_dir, TIMINGS_NAME)

    mode = "a" if history else "w"
    with open(timings_path, mode, encoding="utf-8") as timings:
        writer = MetricsWriter(metrics_path, append=True)
        try:
            while state.step < target:
                state, metrics = train_step(state, cfg, source)
                history.append(metrics)
                writer.append(metrics)
                timings.write(
                    json.dumps({"step": metrics.step, "wall_ms": metrics.wall_ms}) + "\n"
                )
                timings.flush()
                if (
                    state.step % tr.checkpoint_every == 0
                    or state.step == target
                ):
                    save_train_state(_checkpoint_path(out_dir, state.step), state)
        finally:
            writer.close()
    final = _checkpoint_path(out_dir, state.step)
    if not os.path.exists(final):
        save_train_state(final, state)
    return RunResult(
        out_dir=out_dir,
        history=history,
        final_checkpoint=final,
        manifest_path=os.path.join(out_dir, MANIFEST_NAME),
        metrics_path=metrics_path,
    )


def run(cfg: RunConfig, out_dir: str, stop_after: Optional[int] = None) -> RunResult:
    """Execute a full training run into a fresh, self-describing directory.

    Writes the manifest before step 1, appends one metrics record per step
    (crash-safe), checkpoints at the configured cadence, and always leaves
    an initial checkpoint plus a checkpoint at the last executed step.
    ``stop_after`` truncates the run early (simulating an interruption) so
    resumption can be exercised.
    """
    os.makedirs(os.path.join(out_dir, CHECKPOINT_DIR), exist_ok=True)
    write_manifest(cfg, out_dir)
    state = init_state(cfg)
    from .policy import save_params

    save_params(os.path.join(out_dir, REF_CHECKPOINT), state.ref_params)
    save_train_state(_checkpoint_path(out_dir, 0), state)

    writer = MetricsWriter(
        os.path.join(out_dir, METRICS_NAME), {"config": resolved_dict(cfg)}
    )
    writer.close()
    return _run_loop(cfg, out_dir, state, [], stop_after)


def resume_run(out_dir: str, stop_after: Optional[int] = None) -> RunResult:
    """Continue an interrupted run from its latest checkpoint.

    Metrics recorded past the checkpoint are truncated and regenerated, so
    a resumed run's metrics file is byte-identical to an uninterrupted one.
    """
    from .config import build_config
    from .policy import load_params

    manifest = read_manifest(out_dir)
    cfg = build_config(manifest["config"])
    ref = load_params(os.path.join(out_dir, REF_CHECKPOINT))

    ckpt_dir = os.path.join(out_dir, CHECKPOINT_DIR)
    steps = sorted(
        int(name[len("step_") : -len(".ckpt")])
        for name in os.listdir(ckpt_dir)
        if name.startswith("step_") and name.endswith(".ckpt")
    )
    if not steps:
        raise NotFoundError(f"no checkpoints under {ckpt_dir}")
    last = steps[-1]
    state = load_train_state(_checkpoint_path(out_dir, last), ref)

    metrics_path = os.path.join(out_dir, METRICS_NAME)
    _, recorded = read_metrics(metrics_path)
    keep = [m for m in recorded if m.step <= last]
    with open(metrics_path, "r", encoding="utf-8") as fh:
        lines = [ln for ln in fh if ln.strip()]
    header_line = lines[0]
    with open(metrics_path, "w", encoding="utf-8") as fh:
        fh.write(header_line)
        for ln in lines[1 : 1 + len(keep)]:
            fh.write(ln)
    return _run_loop(cfg, out_dir, state, keep, stop_after)


# --- evaluation ------------------------------------------------------------


@dataclass(frozen=True)
class EvalSummary:
    """Accuracy summary of one checkpoint on the synthetic tasks."""

    accuracy: float
    per_dependency: dict
    mean_perception_ratio: float
    episodes: int
    k: int
    seed: int
    dependency: str

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def evaluate_policy(
    params: PolicyParams,
    env: TaskSpec,
    episodes: int,
    k: int,
    seed: int,
    temperature: float = 1.0,
    greedy: bool = False,
    mask_cfg: MaskConfig = MaskConfig(),
) -> EvalSummary:
    """Mean accuracy over fresh prompts, with a per-dependency breakdown.

    Each prompt is answered ``k`` times at the given temperature (or
    greedily); accuracy is the mean verifier reward over all samples. The
    perception-ratio statistic is the mean per-token ratio between the
    original-image and masked-image log-probabilities on the primary
    dependency level.
    """
    if episodes < 1 or k < 1:
        raise ValidationError("episodes and k must be >= 1")
    root = derive_stream(RngStream(seed), "eval")
    per_dependency: dict[str, float] = {}
    ratios: list[float] = []
    for dep in ("low", "medium", "high"):
        spec = dataclasses.replace(env, dependency=dep)
        ep_streams = [derive_stream(root, f"{dep}/ep{ep}") for ep in range(episodes)]
        prompts = [
            generate_task(spec, derive_stream(s, "task")) for s in ep_streams
        ]
        questions = [p.question for p in prompts]
        images = [p.image for p in prompts]
        if greedy:
            one, _ = sample_prompt_batch(
                params, questions, images, 1,
                [derive_stream(s, "samples") for s in ep_streams], END,
                greedy=True,
            )
            responses = [row * k for row in one]
        else:
            responses, _ = sample_prompt_batch(
                params, questions, images, k,
                [derive_stream(s, "samples") for s in ep_streams], END, temperature,
            )
        hits = sum(
            verify(p.answer, r) for p, row in zip(prompts, responses) for r in row
        )
        per_dependency[dep] = hits / (episodes * k)
        if dep == env.dependency:
            masked = [
                make_masked_image(p, mask_cfg, derive_stream(s, "mask"))
                for p, s in zip(prompts, ep_streams)
            ]
            lp_new = logprob_prompt_batch(params, questions, images, responses)
            lp_mask = logprob_prompt_batch(params, questions, masked, responses)
            for row_new, row_mask in zip(lp_new, lp_mask):
                for a, b in zip(row_new, row_mask):
                    ratios.extend(np.exp(a - b).tolist())
    return EvalSummary(
        accuracy=per_dependency[env.dependency],
        per_dependency=per_dependency,
        mean_perception_ratio=float(np.mean(ratios)),
        episodes=episodes,
        k=k,
        seed=seed,
        dependency=env.dependency,
    )
