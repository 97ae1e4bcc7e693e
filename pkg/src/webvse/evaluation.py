"""Recall@K and median rank for image<->caption retrieval.

Ranking is pessimistic: a ground-truth item's rank is one plus the number of
gallery items scoring strictly higher, plus the non-matching items that tie
with it. Each query uses its best-ranked ground-truth item.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Mapping, Sequence

import numpy as np

from .encoders import EmbeddingModel, embed_images, embed_sentences
from .errors import IntegrityError, ParameterError, ValidationError

TIE_POLICY = "pessimistic"
I2T = "image_to_text"
T2I = "text_to_image"


@dataclass
class SimilarityTable:
    scores: np.ndarray  # Q x G
    ground_truth: list  # per query: array of matching gallery indices

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if self.scores.ndim != 2:
            raise ValidationError("scores must be a Q x G matrix")
        if len(self.ground_truth) != self.scores.shape[0]:
            raise ValidationError("one ground-truth set per query is required")
        self.ground_truth = [np.unique(np.asarray(list(g), dtype=np.intp)) for g in self.ground_truth]
        if any(g.size == 0 for g in self.ground_truth):
            raise ValidationError("every query needs at least one ground-truth match")
        if not np.all(np.isfinite(self.scores)):
            raise ValidationError("non-finite similarity score")

    @property
    def num_queries(self) -> int:
        return self.scores.shape[0]

    @property
    def gallery_size(self) -> int:
        return self.scores.shape[1]


def best_ranks(table: SimilarityTable) -> np.ndarray:
    ranks = np.empty(table.num_queries, dtype=np.int64)
    for q, gt in enumerate(table.ground_truth):
        row = table.scores[q]
        is_match = np.zeros(row.shape[0], dtype=bool)
        is_match[gt] = True
        best = None
        for j in gt:
            s = row[j]
            r = 1 + np.count_nonzero(row > s) + np.count_nonzero((row == s) & ~is_match)
            best = r if best is None else min(best, r)
        ranks[q] = best
    return ranks


def percent_within(ranks: np.ndarray, k: int) -> float:
    return 100.0 * int(np.count_nonzero(ranks <= k)) / len(ranks)


def recall_at_k(table: SimilarityTable, k: int) -> float:
    if not 1 <= k <= table.gallery_size:
        raise ParameterError(f"k={k} outside [1, {table.gallery_size}]")
    return percent_within(best_ranks(table), k)


def median_rank(table: SimilarityTable) -> float:
    return float(np.median(best_ranks(table)))


@dataclass
class DirectionMetrics:
    direction: str
    r_at_1: float
    r_at_10: float
    med_r: float


@dataclass
class RetrievalReport:
    r1_i2t: float
    r10_i2t: float
    medr_i2t: float
    r1_t2i: float
    r10_t2i: float
    medr_t2i: float

    @property
    def rsum(self) -> float:
        return self.r1_i2t + self.r10_i2t + self.r1_t2i + self.r10_t2i

    def as_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["rsum"] = self.rsum
        return d

    @classmethod
    def from_directions(cls, i2t: DirectionMetrics, t2i: DirectionMetrics) -> "RetrievalReport":
        return cls(i2t.r_at_1, i2t.r_at_10, i2t.med_r, t2i.r_at_1, t2i.r_at_10, t2i.med_r)

    def to_text(self) -> str:
        """key=value lines; values at one decimal as in published tables."""
        lines = [f"{k}={v:.1f}" for k, v in self.as_dict().items()]
        lines.append(f"tie_policy={TIE_POLICY}")
        return "\n".join(lines) + "\n"

    def table(self) -> str:
        head = f"{'direction':<16}{'R@1':>8}{'R@10':>8}{'MedR':>8}"
        rows = [
            f"{'image->text':<16}{self.r1_i2t:>8.1f}{self.r10_i2t:>8.1f}{self.medr_i2t:>8.1f}",
            f"{'text->image':<16}{self.r1_t2i:>8.1f}{self.r10_t2i:>8.1f}{self.medr_t2i:>8.1f}",
            f"{'rsum':<16}{self.rsum:>8.1f}",
        ]
        return "\n".join([head, *rows])


def direction_metrics(table: SimilarityTable, direction: str) -> DirectionMetrics:
    ranks = best_ranks(table)
    k10 = min(10, table.gallery_size)
    return DirectionMetrics(
        direction,
        percent_within(ranks, 1),
        percent_within(ranks, k10),
        float(np.median(ranks)),
    )


@dataclass
class RetrievalSet:
    """Images plus captions; ``caption_image[c]`` is the row of caption c's image."""

    image_ids: list[str]
    image_feats: np.ndarray
    captions: list[Sequence]
    caption_image: np.ndarray

    @classmethod
    def build(cls, images: Mapping[str, np.ndarray], captions: Sequence, image_ids: Sequence[str] | None = None):
        """``captions`` holds ``(image_id, tokens)`` pairs or objects with those attributes."""
        ids = list(image_ids) if image_ids is not None else list(images)
        index = {i: k for k, i in enumerate(ids)}
        missing = [i for i in ids if i not in images]
        if missing:
            raise IntegrityError(f"no features for images {missing[:10]}")
        toks, owner = [], []
        for cap in captions:
            img, tokens = (cap.image_id, cap.tokens) if hasattr(cap, "image_id") else cap
            if img in index:
                toks.append(list(tokens))
                owner.append(index[img])
        covered = set(owner)
        lacking = [ids[k] for k in range(len(ids)) if k not in covered]
        if lacking:
            raise IntegrityError(f"no captions for images {lacking[:10]}")
        feats = np.array([images[i] for i in ids], dtype=np.float64)
        return cls(ids, feats, toks, np.array(owner, dtype=np.intp))

    def subset(self, image_ids: Sequence[str]) -> "RetrievalSet":
        index = {i: k for k, i in enumerate(self.image_ids)}
        rows = [index[i] for i in image_ids]
        remap = {r: k for k, r in enumerate(rows)}
        keep = [c for c in range(len(self.captions)) if self.caption_image[c] in remap]
        return RetrievalSet(
            list(image_ids),
            self.image_feats[rows],
            [self.captions[c] for c in keep],
            np.array([remap[self.caption_image[c]] for c in keep], dtype=np.intp),
        )


def similarity_tables(img_emb: np.ndarray, cap_emb: np.ndarray, caption_image: np.ndarray):
    """Cosine-score tables for both directions from normalized embeddings."""
    scores = img_emb @ cap_emb.T
    i2t_gt = [np.flatnonzero(caption_image == k) for k in range(img_emb.shape[0])]
    t2i_gt = [[int(k)] for k in caption_image]
    return SimilarityTable(scores, i2t_gt), SimilarityTable(scores.T, t2i_gt)


def evaluate_embeddings(img_emb, cap_emb, caption_image) -> RetrievalReport:
    i2t, t2i = similarity_tables(img_emb, cap_emb, caption_image)
    return RetrievalReport.from_directions(direction_metrics(i2t, I2T), direction_metrics(t2i, T2I))


def evaluate(model: EmbeddingModel, data: RetrievalSet) -> RetrievalReport:
    img = embed_images(model, data.image_feats, normalized=True)
    cap = embed_sentences(model, data.captions, normalized=True)
    return evaluate_embeddings(img, cap, data.caption_image)


def evaluate_split(model: EmbeddingModel, images: Mapping[str, np.ndarray], captions: Sequence,
                   direction: str, image_ids: Sequence[str] | None = None) -> DirectionMetrics:
    data = RetrievalSet.build(images, captions, image_ids)
    img = embed_images(model, data.image_feats, normalized=True)
    cap = embed_sentences(model, data.captions, normalized=True)
    i2t, t2i = similarity_tables(img, cap, data.caption_image)
    if direction == I2T:
        return direction_metrics(i2t, I2T)
    if direction == T2I:
        return direction_metrics(t2i, T2I)
    raise ParameterError(f"unknown direction {direction!r}")


def average_reports(reports: Sequence[RetrievalReport]) -> RetrievalReport:
    if not reports:
        raise ValidationError("no reports to average")
    names = [f.name for f in fields(RetrievalReport)]
    return RetrievalReport(**{n: float(np.mean([getattr(r, n) for r in reports])) for n in names})


def evaluate_5fold(model: EmbeddingModel, data: RetrievalSet, folds: Sequence[Sequence[str]],
                   n_folds: int = 5) -> RetrievalReport:
    """Average of per-fold reports; folds must be present and of equal size."""
    if len(folds) != n_folds:
        raise ValidationError(f"expected {n_folds} folds, got {len(folds)}")
    if len({len(f) for f in folds}) != 1 or len(folds[0]) == 0:
        raise ValidationError("folds must be non-empty and equal-sized")
    return average_reports([evaluate(model, data.subset(f)) for f in folds])
