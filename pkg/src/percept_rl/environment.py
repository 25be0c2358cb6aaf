"""Synthetic multimodal counting tasks with controllable vision dependency.

A task instance is a symbolic grid image plus a short tokenized question.
The shared token space puts answer digits, the END marker, and question
words in disjoint index ranges so the same ids appear in questions and
answers:

* ids 0-9   — answer digits "0".."9"
* id 10     — END (terminates a response)
* ids 11+   — question words (task words followed by color words)

Patch symbols form a separate small alphabet: 0 is the reserved MASKED
symbol, 1 is an empty cell, and 2+ are colors (aligned with the color
words of the text vocabulary).

Dependency levels control where the answer-determining information lives:
``high`` questions carry no count information, ``medium`` questions state
the count of a different color as a partial cue, and ``low`` questions
embed the answer verbatim.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .domain import (
    GridImage,
    Prompt,
    RngStream,
    TaskMeta,
    TokenSeq,
    derive_stream,
)
from .errors import DomainError, ValidationError

TASKS = ("count_color", "compare_counts")

COLOR_NAMES = ("red", "green", "blue", "yellow", "purple", "cyan")
_TASK_WORDS = ("count", "color", "which", "more", "hint", "answer")

DIGIT_IDS = tuple(range(10))
END = 10
_WORD_BASE = END + 1
WORD_IDS = {
    w: _WORD_BASE + i for i, w in enumerate(_TASK_WORDS + COLOR_NAMES)
}
TEXT_VOCAB_SIZE = _WORD_BASE + len(_TASK_WORDS) + len(COLOR_NAMES)
#: The policy emits over the full shared token space, so degenerate
#: policies can drift into question-style tokens that never verify;
#: answers proper are digits followed by END.
OUTPUT_VOCAB_SIZE = TEXT_VOCAB_SIZE

EMPTY_SYMBOL = 1
_COLOR_SYMBOL_BASE = 2
PATCH_ALPHABET_SIZE = _COLOR_SYMBOL_BASE + len(COLOR_NAMES)

_ID_TO_WORD = {v: k for k, v in WORD_IDS.items()}


def color_symbol(color_index: int) -> int:
    """Patch symbol of the ``color_index``-th color."""
    return _COLOR_SYMBOL_BASE + color_index


def color_word(color_index: int) -> int:
    """Text token of the ``color_index``-th color name."""
    return WORD_IDS[COLOR_NAMES[color_index]]


def digit_tokens(value: int) -> tuple[int, ...]:
    """The digit-token encoding of a nonnegative integer."""
    if value < 0:
        raise DomainError("answers must be nonnegative")
    return tuple(int(ch) for ch in str(value))


def token_text(token: int) -> str:
    """Readable form of a token, for logs and error messages."""
    if token < 10:
        return str(token)
    if token == END:
        return "<end>"
    return _ID_TO_WORD.get(token, f"<{token}>")


@dataclass(frozen=True)
class TaskSpec:
    """Parameters of the synthetic task distribution."""

    task: str = "count_color"
    width: int = 8
    height: int = 8
    colors: int = 6
    dependency: str = "high"
    answer_range: int = 9

    def __post_init__(self) -> None:
        if self.task not in TASKS:
            raise ValidationError(f"unknown task {self.task!r}")
        if not 2 <= self.colors <= len(COLOR_NAMES):
            raise ValidationError(
                f"colors must lie in [2, {len(COLOR_NAMES)}], got {self.colors}"
            )
        if self.width < 1 or self.height < 1:
            raise ValidationError("grid dimensions must be >= 1")
        if not 1 <= self.answer_range <= 9:
            raise ValidationError(
                "answer_range must lie in [1, 9] so answers stay single digits"
            )

    @property
    def n_patches(self) -> int:
        return self.width * self.height


def _draw_counts(spec: TaskSpec, gen: np.random.Generator) -> np.ndarray:
    """Independent per-color counts in [0, answer_range] that fit the grid."""
    while True:
        counts = gen.integers(0, spec.answer_range + 1, size=spec.colors)
        if int(counts.sum()) <= spec.n_patches:
            return counts


def _fill_grid(spec: TaskSpec, counts: np.ndarray, gen: np.random.Generator) -> GridImage:
    symbols = []
    for idx, count in enumerate(counts.tolist()):
        symbols.extend([color_symbol(idx)] * count)
    symbols.extend([EMPTY_SYMBOL] * (spec.n_patches - len(symbols)))
    cells = np.asarray(symbols, dtype=np.int64)
    gen.shuffle(cells)
    return GridImage(spec.width, spec.height, tuple(int(c) for c in cells))


def generate_task(spec: TaskSpec, rng: RngStream) -> Prompt:
    """Sample one prompt from the task distribution, deterministically per stream."""
    gen = rng.generator()
    counts = _draw_counts(spec, gen)

    if spec.task == "count_color":
        target = int(gen.integers(0, spec.colors))
        answer_value = int(counts[target])
        question = [WORD_IDS["count"], WORD_IDS["color"], color_word(target)]
        if spec.dependency == "medium":
            other = int(gen.integers(0, spec.colors - 1))
            if other >= target:
                other += 1
            question += [WORD_IDS["hint"], color_word(other), *digit_tokens(int(counts[other]))]
        elif spec.dependency == "low":
            question += [WORD_IDS["answer"], *digit_tokens(answer_value)]
        meta = TaskMeta("count_color", (color_symbol(target),))
    else:  # compare_counts
        while True:
            pair = gen.integers(0, spec.colors, size=2)
            a, b = int(pair[0]), int(pair[1])
            if a != b and counts[a] != counts[b]:
                break
            counts = _draw_counts(spec, gen)
        answer_value = 1 if counts[a] > counts[b] else 2
        question = [WORD_IDS["which"], WORD_IDS["more"], color_word(a), color_word(b)]
        if spec.dependency == "medium":
            question += [WORD_IDS["hint"], color_word(a), *digit_tokens(int(counts[a]))]
        elif spec.dependency == "low":
            question += [WORD_IDS["answer"], *digit_tokens(answer_value)]
        meta = TaskMeta("compare_counts", (color_symbol(a), color_symbol(b)))

    image = _fill_grid(spec, counts, gen)
    return Prompt(
        question=TokenSeq(tuple(question)),
        image=image,
        answer=TokenSeq(digit_tokens(answer_value)),
        dependency=spec.dependency,
        meta=meta,
    )


def strip_end(response: TokenSeq) -> tuple[int, ...]:
    """Response tokens with a trailing END removed."""
    tokens = response.tokens
    if tokens and tokens[-1] == END:
        tokens = tokens[:-1]
    return tokens


def verify(answer: TokenSeq, response: TokenSeq) -> float:
    """Binary reward: 1.0 on exact token match after stripping END."""
    return 1.0 if strip_end(response) == answer.tokens else 0.0


def oracle_accuracies(
    spec: TaskSpec, samples: int, rng: RngStream
) -> tuple[float, float]:
    """(blind, sighted) oracle accuracies estimated over the task distribution.

    The blind oracle is the best text-only predictor: per distinct question
    it answers with the empirically most frequent answer. The sighted
    oracle reads the image and is always exact, so it scores 1.0; the gap
    between the two measures how much of the answer lives in the image.
    """
    tallies: dict[tuple[int, ...], dict[tuple[int, ...], int]] = {}
    for i in range(samples):
        prompt = generate_task(spec, derive_stream(rng, f"oracle{i}"))
        per_q = tallies.setdefault(prompt.question.tokens, {})
        per_q[prompt.answer.tokens] = per_q.get(prompt.answer.tokens, 0) + 1
    hits = sum(max(per_q.values()) for per_q in tallies.values())
    return hits / samples, 1.0


def dump_tasks(path, prompts: Iterable[Prompt]) -> int:
    """Write prompts as newline-delimited records; returns the count."""
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        for p in prompts:
            record = {
                "question": list(p.question.tokens),
                "width": p.image.width,
                "height": p.image.height,
                "cells": list(p.image.cells),
                "answer": list(p.answer.tokens),
                "dependency": p.dependency,
                "task": p.meta.task if p.meta else None,
                "target_symbols": list(p.meta.target_symbols) if p.meta else None,
            }
            fh.write(json.dumps(record, sort_keys=True) + "\n")
            n += 1
    return n


def load_tasks(path) -> list[Prompt]:
    """Read prompts from a task dump written by :func:`dump_tasks`."""
    prompts = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            meta = None
            if rec.get("task"):
                meta = TaskMeta(rec["task"], tuple(rec["target_symbols"]))
            prompts.append(
                Prompt(
                    question=TokenSeq(tuple(rec["question"])),
                    image=GridImage(rec["width"], rec["height"], tuple(rec["cells"])),
                    answer=TokenSeq(tuple(rec["answer"])),
                    dependency=rec["dependency"],
                    meta=meta,
                )
            )
    return prompts
