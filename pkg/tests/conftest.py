"""Shared fixtures: tiny architectures and synthetic rollout groups."""

from __future__ import annotations

import numpy as np
import pytest

from percept_rl.domain import (
    GridImage,
    Prompt,
    RngStream,
    RolloutGroup,
    TaskMeta,
    TokenSeq,
)
from percept_rl.policy import ArchConfig, PolicyParams, logprob_responses


@pytest.fixture
def tiny_arch() -> ArchConfig:
    return ArchConfig(d=4, h=4, v_q=8, v_out=6, a_sym=4, n_max=4, max_answer_len=3)


def make_prompt(gen: np.random.Generator, arch: ArchConfig, n_patches=None) -> Prompt:
    n = n_patches or arch.n_max
    width, height = n, 1
    cells = tuple(int(c) for c in gen.integers(1, arch.a_sym, size=n))
    q_len = int(gen.integers(2, 5))
    question = TokenSeq(tuple(int(t) for t in gen.integers(0, arch.v_q, size=q_len)))
    answer = TokenSeq((int(gen.integers(0, arch.v_out)),))
    return Prompt(
        question=question,
        image=GridImage(width, height, cells),
        answer=answer,
        dependency="high",
        meta=TaskMeta("synthetic", (cells[0],)),
    )


def make_group(
    gen: np.random.Generator,
    params: PolicyParams,
    group_size: int = 3,
    off_policy_scale: float = 0.3,
    rewards=None,
) -> RolloutGroup:
    """A synthetic group whose frozen tables are offset real forward passes.

    ``logp_old``, ``logp_ref`` and ``logp_mask`` are the live table plus
    Gaussian offsets, giving ratios away from 1 so the clipping and KL
    machinery is exercised; ratios are nudged off the clip-band edges so
    finite differences stay smooth.
    """
    arch = params.arch
    prompt = make_prompt(gen, arch)
    responses = []
    for _ in range(group_size):
        length = int(gen.integers(1, arch.max_answer_len + 1))
        responses.append(
            TokenSeq(tuple(int(t) for t in gen.integers(0, arch.v_out, size=length)))
        )
    live = logprob_responses(params, prompt.question, prompt.image, responses)
    masked_cells = tuple(
        0 if gen.random() < 0.5 else c for c in prompt.image.cells
    )
    masked = GridImage(prompt.image.width, prompt.image.height, masked_cells)

    def offset_rows():
        return tuple(
            row + gen.normal(0.0, off_policy_scale, size=row.shape) for row in live
        )

    if rewards is None:
        rewards = tuple(float(gen.integers(0, 2)) for _ in range(group_size))
    return RolloutGroup(
        prompt=prompt,
        responses=tuple(responses),
        rewards=tuple(rewards),
        logp_new=tuple(row.copy() for row in live),
        logp_old=offset_rows(),
        logp_ref=offset_rows(),
        logp_mask=offset_rows(),
        masked_images=tuple([masked] * group_size),
    )


def random_params(arch: ArchConfig, seed: int = 0, scale: float = 0.2) -> PolicyParams:
    return PolicyParams.random_init(arch, RngStream(seed, ("params",)), scale)
