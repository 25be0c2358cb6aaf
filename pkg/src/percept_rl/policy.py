"""A tiny differentiable autoregressive policy over (question, image) pairs.

The architecture is one dot-product attention readout over patch
embeddings plus a two-layer MLP head:

1. every patch embeds as symbol embedding + positional embedding;
2. the question embeds as the mean of its token embeddings;
3. at decode step t the context is the question summary plus the sum of
   the previously emitted tokens' embeddings; a projected query attends
   over the patches and the readout is added back onto the context;
4. a tanh hidden layer and a linear head produce log-softmax scores over
   the output vocabulary.

The model is small enough that every gradient is hand-derived in closed
form and checked coordinate-by-coordinate against central finite
differences; there is no autodiff engine here. Gradients flow only
through the log-probabilities of the original-image branch unless
``masked_branch_gradients`` is set, in which case the masked-image
forward pass contributes as well (the two branches share parameters).

All heavy paths run over a packed batch spanning many prompts at once;
the per-prompt operations are thin wrappers around the packed kernels.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .domain import GridImage, RngStream, RolloutGroup, TokenSeq
from .errors import CheckpointError, DomainError, NumericError, ShapeError
from .objectives import (
    LossBreakdown,
    ObjectiveConfig,
    batch_loss,
    _assemble,
)

CHECKPOINT_FORMAT = "percept-rl-policy"


@dataclass(frozen=True)
class ArchConfig:
    """Sizes of the policy network; the parameter layout follows from these.

    ``p_floor`` mixes a fixed uniform component into the output
    distribution: ``q = (1 - p_floor) * softmax(logits) + p_floor / v_out``.
    It bounds every per-token probability into ``[p_floor/v_out, 1)``, so
    importance and perception ratios stay in a finite range instead of
    exploding exponentially once the policy becomes confident. Zero
    disables the floor.
    """

    d: int = 16
    h: int = 32
    v_q: int = 23
    v_out: int = 11
    a_sym: int = 8
    n_max: int = 64
    max_answer_len: int = 3
    p_floor: float = 0.05

    def __post_init__(self) -> None:
        for name in ("d", "h", "v_q", "v_out", "a_sym", "n_max", "max_answer_len"):
            if getattr(self, name) < 1:
                raise DomainError(f"arch field {name} must be >= 1")
        if self.v_out > self.v_q:
            raise DomainError(
                "output tokens must be embeddable: v_out must not exceed v_q"
            )
        if not 0.0 <= self.p_floor < 1.0:
            raise DomainError("p_floor must lie in [0, 1)")

    @property
    def block_shapes(self) -> tuple[tuple[str, tuple[int, ...]], ...]:
        """Published parameter layout, in flat-array order."""
        return (
            ("e_sym", (self.a_sym, self.d)),
            ("e_q", (self.v_q, self.d)),
            ("e_pos", (self.n_max, self.d)),
            ("w_a", (self.d, self.d)),
            ("w1", (self.h, self.d)),
            ("b1", (self.h,)),
            ("w2", (self.v_out, self.h)),
            ("b2", (self.v_out,)),
        )

    @property
    def num_params(self) -> int:
        return sum(int(np.prod(s)) for _, s in self.block_shapes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


class PolicyParams:
    """Flat float64 parameter array with named views into each block.

    The views share memory with ``flat``, so index-addressed probes into
    the flat array see exactly the published layout.
    """

    def __init__(self, arch: ArchConfig, flat: Optional[np.ndarray] = None):
        self.arch = arch
        if flat is None:
            flat = np.zeros(arch.num_params, dtype=np.float64)
        flat = np.ascontiguousarray(flat, dtype=np.float64)
        if flat.shape != (arch.num_params,):
            raise ShapeError(
                f"expected {arch.num_params} parameters, got shape {flat.shape}"
            )
        self.flat = flat
        offset = 0
        for name, shape in arch.block_shapes:
            size = int(np.prod(shape))
            setattr(self, name, self.flat[offset : offset + size].reshape(shape))
            offset += size

    def copy(self) -> "PolicyParams":
        return PolicyParams(self.arch, self.flat.copy())

    @classmethod
    def zeros(cls, arch: ArchConfig) -> "PolicyParams":
        return cls(arch)

    @classmethod
    def random_init(
        cls, arch: ArchConfig, rng: RngStream, scale: float = 0.1,
        sym_scale: float = 1.0,
    ) -> "PolicyParams":
        """Gaussian init; ``sym_scale`` rescales the patch-symbol embeddings.

        A small ``sym_scale`` starts the policy nearly blind: outputs barely
        depend on patch identity until training grows the visual pathway.
        """
        gen = rng.generator()
        params = cls(arch, gen.normal(0.0, scale, size=arch.num_params))
        params.e_sym *= sym_scale
        return params


def save_params(path, params: PolicyParams) -> None:
    """Write a checkpoint: one JSON header line + little-endian float64 data."""
    header = {
        "format": CHECKPOINT_FORMAT,
        "version": 1,
        "arch": params.arch.to_dict(),
        "count": params.arch.num_params,
    }
    with open(path, "wb") as fh:
        fh.write((json.dumps(header, sort_keys=True) + "\n").encode("utf-8"))
        fh.write(np.ascontiguousarray(params.flat, dtype="<f8").tobytes())


def load_params(path) -> PolicyParams:
    """Load a checkpoint written by :func:`save_params`; bit-exact round trip."""
    with open(path, "rb") as fh:
        header_line = fh.readline()
        try:
            header = json.loads(header_line.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"unreadable checkpoint header in {path}") from exc
        if header.get("format") != CHECKPOINT_FORMAT:
            raise CheckpointError(f"{path} is not a policy checkpoint")
        arch = ArchConfig(**header["arch"])
        raw = fh.read()
    expected = arch.num_params * 8
    if len(raw) != expected:
        raise CheckpointError(
            f"{path} holds {len(raw)} parameter bytes, expected {expected}"
        )
    flat = np.frombuffer(raw, dtype="<f8").astype(np.float64)
    return PolicyParams(arch, flat)


# --- packed batch kernels ---------------------------------------------------


@dataclass
class _Packed:
    """B prompts x G responses, padded to common question/response lengths."""

    q_tokens: np.ndarray  # (B, L) int
    q_valid: np.ndarray  # (B, L) bool
    q_len: np.ndarray  # (B,) float
    cells: np.ndarray  # (B, N) int
    tokens: np.ndarray  # (B, G, T) int
    valid: np.ndarray  # (B, G, T) bool
    lengths: np.ndarray  # (B, G) int


@dataclass
class _PackedCache:
    cells: np.ndarray
    e: np.ndarray  # (B, N, d)
    ctx: np.ndarray  # (B, G, T, d)
    query: np.ndarray
    alpha: np.ndarray  # (B, G, T, N)
    feats: np.ndarray
    hidden: np.ndarray
    probs: np.ndarray  # (B, G, T, v) softmax before the uniform floor
    sel_coeff: np.ndarray  # (B, G, T) d(log q_sel)/d(logit_sel) prefactor


def _validate_question_image(
    arch: ArchConfig, question: TokenSeq, image: GridImage
) -> None:
    if image.n_patches > arch.n_max:
        raise DomainError(
            f"image has {image.n_patches} patches, policy supports {arch.n_max}"
        )
    if max(image.cells) >= arch.a_sym:
        raise DomainError("patch symbol outside the policy alphabet")
    if max(question.tokens) >= arch.v_q:
        raise DomainError("question token outside the text vocabulary")


def _validate_response(arch: ArchConfig, response: TokenSeq) -> None:
    if len(response) > arch.max_answer_len:
        raise DomainError(
            f"response of length {len(response)} exceeds "
            f"max_answer_len={arch.max_answer_len}"
        )
    if max(response.tokens) >= arch.v_out:
        raise DomainError("response token outside the output vocabulary")


def _pack(
    arch: ArchConfig,
    questions: Sequence[TokenSeq],
    images: Sequence[GridImage],
    response_lists: Sequence[Sequence[TokenSeq]],
) -> _Packed:
    b = len(questions)
    n = images[0].n_patches
    g = len(response_lists[0])
    for question, image in zip(questions, images):
        _validate_question_image(arch, question, image)
        if image.n_patches != n:
            raise ShapeError("all images in a packed batch must share a patch count")
    l_max = max(len(q) for q in questions)
    q_tokens = np.zeros((b, l_max), dtype=np.int64)
    q_valid = np.zeros((b, l_max), dtype=bool)
    for i, q in enumerate(questions):
        q_tokens[i, : len(q)] = q.tokens
        q_valid[i, : len(q)] = True

    t_max = 1
    for responses in response_lists:
        if len(responses) != g:
            raise ShapeError("all groups in a packed batch must share a group size")
        for r in responses:
            _validate_response(arch, r)
            t_max = max(t_max, len(r))
    tokens = np.zeros((b, g, t_max), dtype=np.int64)
    valid = np.zeros((b, g, t_max), dtype=bool)
    for i, responses in enumerate(response_lists):
        for j, r in enumerate(responses):
            tokens[i, j, : len(r)] = r.tokens
            valid[i, j, : len(r)] = True

    cells = np.array([img.cells for img in images], dtype=np.int64)
    return _Packed(
        q_tokens=q_tokens,
        q_valid=q_valid,
        q_len=q_valid.sum(axis=1).astype(np.float64),
        cells=cells,
        tokens=tokens,
        valid=valid,
        lengths=valid.sum(axis=2),
    )


def _forward_packed(
    params: PolicyParams,
    packed: _Packed,
    cells: Optional[np.ndarray] = None,
    keep_cache: bool = False,
) -> tuple[np.ndarray, Optional[_PackedCache]]:
    """Selected-token log-probs (B, G, T) for a packed batch.

    ``cells`` overrides the packed patch table (used for the masked-image
    branch, which shares questions and responses but not pixels).
    """
    arch = params.arch
    if cells is None:
        cells = packed.cells
    n = cells.shape[1]
    e = params.e_sym[cells] + params.e_pos[:n]

    q_emb = params.e_q[packed.q_tokens] * packed.q_valid[..., None]
    sq = q_emb.sum(axis=1) / packed.q_len[:, None]

    b, g, t_max = packed.tokens.shape
    prev = params.e_q[packed.tokens] * packed.valid[..., None]
    ctx = np.zeros((b, g, t_max, arch.d), dtype=np.float64)
    if t_max > 1:
        ctx[:, :, 1:, :] = np.cumsum(prev[:, :, :-1, :], axis=2)
    ctx += sq[:, None, None, :]

    query = ctx @ params.w_a.T
    e_t = e.transpose(0, 2, 1)
    scores = (
        (query.reshape(b, g * t_max, arch.d) @ e_t) / np.sqrt(arch.d)
    ).reshape(b, g, t_max, -1)
    smax = scores.max(axis=-1, keepdims=True)
    sexp = np.exp(scores - smax)
    alpha = sexp / sexp.sum(axis=-1, keepdims=True)
    readout = (alpha.reshape(b, g * t_max, -1) @ e).reshape(b, g, t_max, arch.d)
    feats = ctx + readout
    hidden = np.tanh(feats @ params.w1.T + params.b1)
    logits = hidden @ params.w2.T + params.b2
    if not np.all(np.isfinite(logits)):
        raise NumericError("non-finite logits in policy forward pass")
    m = logits.max(axis=-1, keepdims=True)
    z = np.exp(logits - m)
    denom = z.sum(axis=-1, keepdims=True)
    probs = z / denom
    eps = arch.p_floor
    p_sel = np.take_along_axis(probs, packed.tokens[..., None], axis=3)[..., 0]
    q_sel = (1.0 - eps) * p_sel + eps / arch.v_out
    selected = np.log(q_sel)
    cache = None
    if keep_cache:
        cache = _PackedCache(
            cells=cells,
            e=e,
            ctx=ctx,
            query=query,
            alpha=alpha,
            feats=feats,
            hidden=hidden,
            probs=probs,
            sel_coeff=(1.0 - eps) * p_sel / q_sel,
        )
    return selected, cache


def _backward_packed(
    params: PolicyParams,
    packed: _Packed,
    cache: _PackedCache,
    upstream: np.ndarray,
    grad: PolicyParams,
) -> None:
    """Accumulate d(sum upstream * selected_logp)/d(params) into ``grad``.

    ``upstream`` is (B, G, T) with zeros at padded positions.
    """
    arch = params.arch
    b, g, t_max = packed.tokens.shape
    n = cache.e.shape[1]

    onehot = np.zeros_like(cache.probs)
    np.put_along_axis(onehot, packed.tokens[..., None], 1.0, axis=3)
    dlogits = (upstream * cache.sel_coeff)[..., None] * (onehot - cache.probs)

    v_out, n_h, d = params.w2.shape[0], params.w2.shape[1], arch.d
    rows = b * g * t_max
    grad.w2 += dlogits.reshape(rows, v_out).T @ cache.hidden.reshape(rows, n_h)
    grad.b2 += dlogits.sum(axis=(0, 1, 2))
    dhidden = dlogits @ params.w2
    da1 = dhidden * (1.0 - cache.hidden**2)
    grad.w1 += da1.reshape(rows, n_h).T @ cache.feats.reshape(rows, d)
    grad.b1 += da1.sum(axis=(0, 1, 2))
    dfeats = da1 @ params.w1

    dctx = dfeats.copy()
    dreadout = dfeats
    e_t = cache.e.transpose(0, 2, 1)
    alpha_2d = cache.alpha.reshape(b, g * t_max, n)
    dreadout_2d = dreadout.reshape(b, g * t_max, d)
    dalpha = (dreadout_2d @ e_t).reshape(cache.alpha.shape)
    de = alpha_2d.transpose(0, 2, 1) @ dreadout_2d
    inner = (cache.alpha * dalpha).sum(axis=-1, keepdims=True)
    dscores = cache.alpha * (dalpha - inner)
    dscores_2d = dscores.reshape(b, g * t_max, n)
    scale = 1.0 / np.sqrt(arch.d)
    dquery = (dscores_2d @ cache.e).reshape(cache.query.shape) * scale
    de += (dscores_2d.transpose(0, 2, 1) @ cache.query.reshape(b, g * t_max, d)) * scale
    grad.w_a += dquery.reshape(rows, d).T @ cache.ctx.reshape(rows, d)
    dctx += dquery @ params.w_a

    # Context chain: ctx[b, g, t] = question summary + earlier emissions.
    ds_q = dctx.sum(axis=(1, 2)) / packed.q_len[:, None]  # (B, d)
    q_idx = packed.q_tokens[packed.q_valid]
    q_vals = np.repeat(ds_q, packed.q_valid.sum(axis=1), axis=0)
    np.add.at(grad.e_q, q_idx, q_vals)
    if t_max > 1:
        suffix = np.cumsum(dctx[:, :, ::-1, :], axis=2)[:, :, ::-1, :]
        prev_mask = packed.valid[:, :, 1:]
        np.add.at(
            grad.e_q,
            packed.tokens[:, :, :-1][prev_mask],
            suffix[:, :, 1:, :][prev_mask],
        )

    np.add.at(grad.e_sym, cache.cells.ravel(), de.reshape(-1, arch.d))
    grad.e_pos[:n] += de.sum(axis=0)


# --- per-prompt wrappers ----------------------------------------------------


def logprob_responses(
    params: PolicyParams,
    question: TokenSeq,
    image: GridImage,
    responses: Sequence[TokenSeq],
) -> list[np.ndarray]:
    """Per-token log-probabilities for responses sharing one prompt."""
    packed = _pack(params.arch, [question], [image], [list(responses)])
    sel, _ = _forward_packed(params, packed)
    return [sel[0, i, : len(r)].copy() for i, r in enumerate(responses)]


def logprob_sequence(
    params: PolicyParams, question: TokenSeq, image: GridImage, response: TokenSeq
) -> np.ndarray:
    """Per-token log-probabilities of ``response`` under the policy."""
    return logprob_responses(params, question, image, [response])[0]


def logprob_prompt_batch(
    params: PolicyParams,
    questions: Sequence[TokenSeq],
    images: Sequence[GridImage],
    response_lists: Sequence[Sequence[TokenSeq]],
) -> list[list[np.ndarray]]:
    """Log-prob tables for many prompts at once (equal patch counts and G)."""
    packed = _pack(params.arch, list(questions), list(images), list(response_lists))
    sel, _ = _forward_packed(params, packed)
    return [
        [sel[i, j, : len(r)].copy() for j, r in enumerate(responses)]
        for i, responses in enumerate(response_lists)
    ]


# --- sampling ---------------------------------------------------------------


def sample_prompt_batch(
    params: PolicyParams,
    questions: Sequence[TokenSeq],
    images: Sequence[GridImage],
    group_size: int,
    streams: Sequence[RngStream],
    end_token: int,
    temperature: float = 1.0,
    greedy: bool = False,
) -> tuple[list[list[TokenSeq]], list[list[np.ndarray]]]:
    """Sample ``group_size`` responses per prompt, in lockstep across all.

    Each prompt's stream yields a ``(group_size, max_answer_len)`` block of
    uniforms up front, and row j of that block is consumed exclusively by
    response j, so every response is a pure function of (params, prompt,
    stream, row) no matter how the rest of the batch terminates. Returns
    the responses and their untempered per-token log-probabilities.
    """
    arch = params.arch
    if end_token >= arch.v_out:
        raise DomainError("end token outside the output vocabulary")
    if not greedy and temperature <= 0:
        raise DomainError("temperature must be > 0 (or use greedy mode)")
    b = len(questions)
    n = images[0].n_patches
    for question, image in zip(questions, images):
        _validate_question_image(arch, question, image)
        if image.n_patches != n:
            raise ShapeError("all images in a batch must share a patch count")
    g, t_cap = group_size, arch.max_answer_len
    if greedy:
        uniforms = np.zeros((b, g, t_cap))
    else:
        uniforms = np.stack(
            [s.generator().random((g, t_cap)) for s in streams], axis=0
        )

    cells = np.array([img.cells for img in images], dtype=np.int64)
    e = params.e_sym[cells] + params.e_pos[:n]
    sq = np.stack(
        [params.e_q[np.asarray(q.tokens, dtype=np.int64)].mean(axis=0) for q in questions]
    )

    ctx = np.repeat(sq[:, None, :], g, axis=1)  # (B, G, d)
    out = [[[] for _ in range(g)] for _ in range(b)]
    logps = [[[] for _ in range(g)] for _ in range(b)]
    active = np.ones((b, g), dtype=bool)
    for t in range(t_cap):
        if not active.any():
            break
        query = ctx @ params.w_a.T
        scores = (query @ e.transpose(0, 2, 1)) / np.sqrt(arch.d)
        smax = scores.max(axis=-1, keepdims=True)
        sexp = np.exp(scores - smax)
        alpha = sexp / sexp.sum(axis=-1, keepdims=True)
        feats = ctx + alpha @ e
        hidden = np.tanh(feats @ params.w1.T + params.b1)
        logits = hidden @ params.w2.T + params.b2
        if not np.all(np.isfinite(logits)):
            raise NumericError("non-finite logits while sampling")
        eps = arch.p_floor
        m = logits.max(axis=-1, keepdims=True)
        z = np.exp(logits - m)
        q = (1.0 - eps) * (z / z.sum(axis=-1, keepdims=True)) + eps / arch.v_out
        if greedy:
            chosen = np.argmax(logits, axis=-1)
        else:
            zt = np.exp((logits - m) / temperature)
            q_t = (1.0 - eps) * (zt / zt.sum(axis=-1, keepdims=True)) + eps / arch.v_out
            cum = np.cumsum(q_t, axis=-1)
            chosen = np.minimum(
                (cum <= uniforms[:, :, t, None]).sum(axis=-1), arch.v_out - 1
            )
        picked = np.log(
            np.take_along_axis(q, chosen[..., None], axis=-1)[..., 0]
        )
        cont = active & (chosen != end_token)
        for i, j in zip(*np.nonzero(active)):
            tok = int(chosen[i, j])
            out[i][j].append(tok)
            logps[i][j].append(float(picked[i, j]))
        ctx += params.e_q[chosen] * cont[..., None]
        active = cont

    responses = [[TokenSeq(tuple(toks)) for toks in row] for row in out]
    logp_rows = [
        [np.asarray(l, dtype=np.float64) for l in row] for row in logps
    ]
    return responses, logp_rows


def sample_group_responses(
    params: PolicyParams,
    question: TokenSeq,
    image: GridImage,
    group_size: int,
    rng: RngStream,
    end_token: int,
    temperature: float = 1.0,
    capture_logp: bool = False,
):
    """Sample ``group_size`` responses from one stream, deterministically."""
    responses, logps = sample_prompt_batch(
        params, [question], [image], group_size, [rng], end_token, temperature
    )
    return (responses[0], logps[0]) if capture_logp else responses[0]


def sample_response(
    params: PolicyParams,
    question: TokenSeq,
    image: GridImage,
    rng: RngStream,
    end_token: int,
    temperature: float = 1.0,
    greedy: bool = False,
) -> TokenSeq:
    """Sample one response autoregressively; deterministic given the stream.

    ``greedy`` switches to argmax decoding (the zero-temperature limit)
    and consumes no randomness.
    """
    responses, _ = sample_prompt_batch(
        params, [question], [image], 1, [rng], end_token, temperature, greedy=greedy
    )
    return responses[0][0]


# --- loss and gradient ------------------------------------------------------


def _pad_rows(rows: Sequence[np.ndarray], g: int, t_max: int) -> np.ndarray:
    out = np.zeros((g, t_max), dtype=np.float64)
    for i, row in enumerate(rows):
        out[i, : row.shape[0]] = row
    return out


@dataclass
class _BucketTables:
    """Frozen log-prob tables of one homogeneous bucket, padded (B, G, T)."""

    old: np.ndarray
    ref: np.ndarray
    mask: np.ndarray
    adv: np.ndarray  # (B, G)


def _bucket_groups(groups: Sequence[RolloutGroup]) -> dict[tuple, list[int]]:
    buckets: dict[tuple, list[int]] = {}
    for i, g in enumerate(groups):
        key = (g.prompt.image.n_patches, g.group_size)
        buckets.setdefault(key, []).append(i)
    return buckets


def batch_loss_and_gradient(
    params: PolicyParams,
    groups: Sequence[RolloutGroup],
    advantages: Sequence,
    cfg: ObjectiveConfig,
) -> tuple[LossBreakdown, np.ndarray]:
    """Loss breakdown and its exact parameter gradient for one batch.

    The original-image log-probabilities are recomputed live from
    ``params``; the old and reference tables stay frozen. The masked-image
    table is frozen unless ``cfg.masked_branch_gradients`` is set, in which
    case it is recomputed live and its branch backpropagated too.

    Groups are processed in buckets of equal patch count and group size;
    the returned breakdown matches :func:`batch_loss_value` up to float
    summation order.
    """
    groups = list(groups)
    if len(groups) != len(advantages):
        raise ShapeError(f"{len(groups)} groups but {len(advantages)} advantage rows")
    if not groups:
        raise ShapeError("empty batch")
    if cfg.is_dapo_family:
        for g in groups:
            if not 0 < g.num_correct < g.group_size:
                raise ShapeError(
                    "dapo-family batches must contain only mixed-correctness groups"
                )

    grad = PolicyParams.zeros(params.arch)
    b_total = len(groups)
    total_tokens = sum(sum(len(r) for r in g.responses) for g in groups)
    sums = {k: 0.0 for k in ("surrogate", "kl_ref", "kl_prcp", "ent_pi", "ent_mask")}
    grpo_group_sums = {k: 0.0 for k in sums}
    clipped_tokens = 0

    for (n_patches, g_size), idxs in _bucket_groups(groups).items():
        members = [groups[i] for i in idxs]
        packed = _pack(
            params.arch,
            [g.prompt.question for g in members],
            [g.prompt.image for g in members],
            [list(g.responses) for g in members],
        )
        b, g, t_max = packed.tokens.shape
        adv = np.stack(
            [np.asarray(advantages[i], dtype=np.float64) for i in idxs]
        )
        old = np.stack(
            [_pad_rows(m.logp_old, g, t_max) for m in members]
        )
        ref = np.stack(
            [_pad_rows(m.logp_ref, g, t_max) for m in members]
        )

        new, cache_new = _forward_packed(params, packed, keep_cache=True)

        mask_plan = None
        if cfg.masked_branch_gradients:
            uniform_masks = all(
                all(img is m.masked_images[0] for img in m.masked_images)
                for m in members
            )
            if uniform_masks:
                mask_cells = np.array(
                    [m.masked_images[0].cells for m in members], dtype=np.int64
                )
                mask, cache_mask = _forward_packed(
                    params, packed, cells=mask_cells, keep_cache=True
                )
                mask_plan = ("group", packed, cache_mask)
            else:
                # One row per (group, response): every response may carry
                # its own corrupted image.
                flat_q = [
                    m.prompt.question for m in members for _ in m.responses
                ]
                flat_img = [img for m in members for img in m.masked_images]
                flat_resp = [[r] for m in members for r in m.responses]
                packed_m = _pack(params.arch, flat_q, flat_img, flat_resp)
                mask_flat, cache_mask = _forward_packed(
                    params, packed_m, keep_cache=True
                )
                mask = mask_flat[:, 0, :].reshape(b, g, -1)
                if mask.shape[2] < t_max:
                    pad = np.zeros((b, g, t_max - mask.shape[2]))
                    mask = np.concatenate([mask, pad], axis=2)
                mask_plan = ("flat", packed_m, cache_mask)
        else:
            mask = np.stack(
                [_pad_rows(m.logp_mask, g, t_max) for m in members]
            )

        valid = packed.valid
        a = adv[..., None]
        ratio = np.exp(new - old)
        r_ref = np.exp(ref - new)
        r_prcp = np.exp(new - mask)
        if not (np.all(np.isfinite(ratio)) and np.all(np.isfinite(r_prcp))):
            raise NumericError("non-finite probability ratio in gradient pass")
        unclipped = ratio * a
        clipped = np.clip(ratio, 1.0 - cfg.eps_l, 1.0 + cfg.eps_h) * a
        surr = np.minimum(unclipped, clipped) * valid
        clip_high = (ratio > 1.0 + cfg.eps_h) & (a > 0) & valid
        kref = (r_ref - np.log(r_ref) - 1.0) * valid
        kprcp = (r_prcp - np.log(r_prcp) - 1.0) * valid
        term = {
            "surrogate": surr,
            "kl_ref": kref,
            "kl_prcp": kprcp,
            "ent_pi": new * valid,
            "ent_mask": mask * valid,
        }
        clipped_tokens += int(clip_high.sum())
        lengths = packed.lengths.astype(np.float64)
        for name, mat in term.items():
            sums[name] += float(mat.sum())
            grpo_group_sums[name] += float((mat.sum(axis=2) / lengths).mean(axis=1).sum())

        # Upstream gradients of the loss (negated objective).
        if cfg.is_dapo_family:
            weights = np.full((b, g), 1.0 / total_tokens)
        else:
            weights = 1.0 / (b_total * g_size * lengths)
        selected = unclipped <= clipped  # clipped branch carries no gradient
        sign = cfg.entropy_sign
        d_obj_new = (
            selected * ratio * a
            + cfg.beta * (r_ref - 1.0)
            + cfg.gamma * (r_prcp - 1.0)
            + sign * cfg.eta1
        )
        w = weights[..., None] * valid
        _backward_packed(params, packed, cache_new, -w * d_obj_new, grad)
        if mask_plan is not None:
            d_obj_mask = cfg.gamma * (1.0 - r_prcp) + sign * cfg.eta2
            u_mask = -w * d_obj_mask
            kind, packed_m, cache_mask = mask_plan
            if kind == "group":
                _backward_packed(params, packed_m, cache_mask, u_mask, grad)
            else:
                t_m = packed_m.tokens.shape[2]
                _backward_packed(
                    params, packed_m, cache_mask,
                    u_mask.reshape(b * g, 1, -1)[:, :, :t_m], grad,
                )

    if cfg.is_dapo_family:
        parts = {k: v / total_tokens for k, v in sums.items()}
    else:
        parts = {k: v / b_total for k, v in grpo_group_sums.items()}
    breakdown = _assemble(
        cfg,
        surrogate=parts["surrogate"],
        kl_ref=parts["kl_ref"],
        kl_prcp=parts["kl_prcp"],
        ent_pi=parts["ent_pi"],
        ent_mask=parts["ent_mask"],
        clip_high_fraction=clipped_tokens / total_tokens,
    )
    if not np.all(np.isfinite(grad.flat)):
        raise NumericError("non-finite entries in the parameter gradient")
    return breakdown, grad.flat


def batch_loss_value(
    params: PolicyParams,
    groups: Sequence[RolloutGroup],
    advantages: Sequence,
    cfg: ObjectiveConfig,
) -> LossBreakdown:
    """Reference value path through the per-group objective kernels.

    Recomputes the live branches exactly like
    :func:`batch_loss_and_gradient` but evaluates the loss via
    :mod:`.objectives`; finite-difference probes differentiate this.
    """
    live_groups = []
    for group in groups:
        live_new = logprob_responses(
            params, group.prompt.question, group.prompt.image, group.responses
        )
        if cfg.masked_branch_gradients:
            masks = tuple(
                logprob_sequence(params, group.prompt.question, img, resp)
                for img, resp in zip(group.masked_images, group.responses)
            )
        else:
            masks = group.logp_mask
        live_groups.append(
            dataclasses.replace(group, logp_new=tuple(live_new), logp_mask=masks)
        )
    return batch_loss(live_groups, advantages, cfg)


def loss_gradient(
    params: PolicyParams,
    groups: Sequence[RolloutGroup],
    advantages: Sequence,
    cfg: ObjectiveConfig,
) -> np.ndarray:
    """Exact gradient of the batch loss with respect to every parameter."""
    _, grad = batch_loss_and_gradient(params, groups, advantages, cfg)
    return grad
