"""Bi-directional hinge ranking losses over a batch of aligned pairs.

Row ``k`` of ``images`` matches row ``k`` of ``texts``; every other row of the
batch is a negative. Scores are cosine similarities, so a single matrix
``S[k, j] = f(i_k, t_j)`` carries both directions: ``f(t_k, i_j) = S[j, k]``.

Conventions:
    * hinge ``max(0, x)`` has zero subgradient at ``x == 0``
    * argmax ties go to the lowest index
    * reduction is a sum over the batch unless ``reduction="mean"``
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError
from .numerics import row_norms


@dataclass
class BatchEmbeddings:
    images: np.ndarray
    texts: np.ndarray

    def __post_init__(self):
        self.images = np.atleast_2d(np.asarray(self.images, dtype=np.float64))
        self.texts = np.atleast_2d(np.asarray(self.texts, dtype=np.float64))
        if self.images.shape != self.texts.shape:
            raise ShapeError(f"unaligned batch: {self.images.shape} vs {self.texts.shape}")

    def __len__(self) -> int:
        return self.images.shape[0]


@dataclass(frozen=True)
class LossConfig:
    margin: float = 0.2
    lambda_is: float = 1.0
    lambda_it: float = 1.0
    reduction: str = "sum"

    def __post_init__(self):
        if self.margin <= 0:
            raise ValueError("margin must be positive")
        if self.lambda_is < 0 or self.lambda_it < 0:
            raise ValueError("loss weights must be non-negative")
        if self.reduction not in ("sum", "mean"):
            raise ValueError(f"unknown reduction {self.reduction!r}")


@dataclass
class LossOutput:
    value: float
    grad_images: np.ndarray
    grad_texts: np.ndarray
    # hinge arguments and argmax gaps; the loss is non-smooth where any is 0
    switches: np.ndarray = field(default_factory=lambda: np.zeros(0))
    grad_tags: np.ndarray | None = None


def _scores(batch: BatchEmbeddings):
    na = row_norms(batch.images)
    nb = row_norms(batch.texts)
    a = batch.images / na[:, None]
    b = batch.texts / nb[:, None]
    return a @ b.T, a, b, na, nb


def _backprop(dS, a, b, na, nb):
    da = dS @ b
    db = dS.T @ a
    ga = (da - a * np.sum(a * da, axis=1, keepdims=True)) / na[:, None]
    gb = (db - b * np.sum(b * db, axis=1, keepdims=True)) / nb[:, None]
    return ga, gb


def _finish(value, dS, parts, n, cfg, switches):
    ga, gb = _backprop(dS, *parts)
    if cfg.reduction == "mean":
        value, ga, gb = value / n, ga / n, gb / n
    return LossOutput(float(value), ga, gb, switches)


def vse_loss(batch: BatchEmbeddings, cfg: LossConfig = LossConfig()) -> LossOutput:
    """Sum-over-negatives ranking loss in both retrieval directions."""
    S, *parts = _scores(batch)
    n = len(batch)
    pos = np.diag(S)
    off = ~np.eye(n, dtype=bool)
    # cost_s[k, j]: image k against negative text j
    # cost_i[j, k]: text k against negative image j
    cost_s = cfg.margin - pos[:, None] + S
    cost_i = cfg.margin - pos[None, :] + S
    act_s = (cost_s > 0) & off
    act_i = (cost_i > 0) & off
    value = np.sum(cost_s[act_s]) + np.sum(cost_i[act_i])

    dS = act_s.astype(np.float64) + act_i.astype(np.float64)
    dS[np.diag_indices(n)] -= act_s.sum(axis=1) + act_i.sum(axis=0)
    switches = np.concatenate([cost_s[off], cost_i[off]])
    return _finish(value, dS, parts, n, cfg, switches)


def _hardest(S, cfg):
    n = S.shape[0]
    pos = np.diag(S)
    if n < 2:
        return 0.0, np.zeros_like(S), np.zeros(0)
    masked = S.copy()
    masked[np.diag_indices(n)] = -np.inf
    rows = np.arange(n)
    hard_s = np.argmax(masked, axis=1)  # hardest text for image k
    hard_i = np.argmax(masked, axis=0)  # hardest image for text k
    cost_s = cfg.margin - pos + S[rows, hard_s]
    cost_i = cfg.margin - pos + S[hard_i, rows]

    dS = np.zeros_like(S)
    act_s = cost_s > 0
    act_i = cost_i > 0
    np.add.at(dS, (rows[act_s], hard_s[act_s]), 1.0)
    np.add.at(dS, (hard_i[act_i], rows[act_i]), 1.0)
    dS[rows, rows] -= act_s.astype(np.float64) + act_i.astype(np.float64)
    value = np.sum(cost_s[act_s]) + np.sum(cost_i[act_i])

    switches = [cost_s, cost_i]
    if n >= 3:
        srt_r = np.sort(masked, axis=1)
        srt_c = np.sort(masked, axis=0)
        switches += [srt_r[:, -1] - srt_r[:, -2], srt_c[-1, :] - srt_c[-2, :]]
    return value, dS, np.concatenate(switches)


def vsepp_loss(batch: BatchEmbeddings, cfg: LossConfig = LossConfig()) -> LossOutput:
    """Hardest-negative ranking loss in both retrieval directions."""
    S, *parts = _scores(batch)
    value, dS, switches = _hardest(S, cfg)
    return _finish(value, dS, parts, len(batch), cfg, switches)


def image_tag_loss(batch: BatchEmbeddings, cfg: LossConfig = LossConfig()) -> LossOutput:
    """Image/tag-bag ranking loss; ``batch.texts`` holds one tag embedding per image."""
    return vsepp_loss(batch, cfg)


def combined_loss(
    is_out: LossOutput, it_out: LossOutput, cfg: LossConfig, tag_rows: np.ndarray | None = None
) -> LossOutput:
    """Weighted sum ``lambda_is * L_IS + lambda_it * L_IT``.

    ``tag_rows`` maps rows of the image-tag batch onto rows of the
    image-sentence batch when only some items carry tags (default: identity).
    The sentence gradient lands in ``grad_texts`` and the tag gradient in
    ``grad_tags``.
    """
    l1, l2 = cfg.lambda_is, cfg.lambda_it
    gi = l1 * is_out.grad_images
    if tag_rows is None:
        gi = gi + l2 * it_out.grad_images
    else:
        np.add.at(gi, np.asarray(tag_rows, dtype=np.intp), l2 * it_out.grad_images)
    return LossOutput(
        float(l1 * is_out.value + l2 * it_out.value),
        gi,
        l1 * is_out.grad_texts,
        np.concatenate([is_out.switches, it_out.switches]),
        grad_tags=l2 * it_out.grad_texts,
    )
