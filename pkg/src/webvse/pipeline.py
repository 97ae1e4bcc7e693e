"""Glue from loaded records to training arrays, and the end-to-end two-stage run."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .curriculum import CurriculumSchedule, KeywordList, build_keyword_list, build_schedule
from .data_io import CaptionRecord, WebManifestEntry, WordVectors, derive_dummy_tags, tag_mean_vector
from .encoders import EmbeddingModel, init_model
from .errors import IntegrityError, ValidationError
from .trainer import AdamState, CheckpointStore, PairData, TagData, TrainConfig, TrainLog, select_best, train_stage1, train_stage2


def build_pair_data(
    features: Mapping[str, np.ndarray],
    captions: Sequence[CaptionRecord],
    wv: WordVectors,
    image_ids: Sequence[str],
    lemma_map: Mapping[str, str] | None = None,
) -> PairData:
    """One pair per caption of each listed image; dummy tags averaged over their word vectors."""
    wanted = set(image_ids)
    feats, toks, means, has = [], [], [], []
    for rec in captions:
        if rec.image_id not in wanted:
            continue
        if rec.image_id not in features:
            raise IntegrityError(f"caption references image {rec.image_id} without features")
        tv = tag_mean_vector(derive_dummy_tags(rec, lemma_map), wv)
        feats.append(features[rec.image_id])
        toks.append(list(rec.tokens))
        has.append(tv is not None)
        means.append(tv if tv is not None else np.zeros(wv.dim))
    if not toks:
        raise ValidationError("no training captions for the requested images")
    return PairData(np.array(feats), toks, np.array(means), np.array(has, dtype=bool))


def build_tag_data(
    entries: Sequence[WebManifestEntry],
    features: Mapping[str, np.ndarray],
    wv: WordVectors,
    lemma_map: Mapping[str, str] | None = None,
) -> TagData:
    """Web items whose tags have at least one word vector."""
    from .data_io import canonicalize

    ids, feats, means = [], [], []
    for e in entries:
        if e.feature_ref not in features:
            raise IntegrityError(f"web item {e.image_id} has no feature {e.feature_ref}")
        tags = [t if t in wv else canonicalize(t, lemma_map) for t in e.tags]
        tv = tag_mean_vector(tags, wv)
        if tv is None:
            continue
        ids.append(e.image_id)
        feats.append(features[e.feature_ref])
        means.append(tv)
    if not ids:
        raise ValidationError("no usable web items")
    return TagData(ids, np.array(feats), np.array(means))


def new_model(cfg: TrainConfig, image_dim: int, wv: WordVectors, captions: Sequence[CaptionRecord]) -> EmbeddingModel:
    vocab = sorted({t for rec in captions for t in rec.tokens} | set(wv.vectors))
    return init_model(
        image_dim, wv.dim, vocab, cfg.embed_dim, cfg.hidden_dim, wv.dim, cfg.seed, wv.vectors
    )


@dataclass
class TwoStageResult:
    model: EmbeddingModel
    stage1_model: EmbeddingModel
    log: TrainLog
    best_epoch: int
    best_model: EmbeddingModel
    keywords: KeywordList | None = None
    schedule: CurriculumSchedule | None = None


def run_two_stage(
    cfg: TrainConfig,
    model: EmbeddingModel,
    pairs: PairData,
    val,
    web: TagData | None = None,
    web_entries: Sequence[WebManifestEntry] | None = None,
    keyword_captions: Sequence[CaptionRecord] | None = None,
    stopwords=(),
    lemma_map: Mapping[str, str] | None = None,
    store: CheckpointStore | None = None,
) -> TwoStageResult:
    """Stage I, then (when a web corpus is given) curriculum Stage II, then model selection."""
    store = store if store is not None else CheckpointStore()
    state = AdamState.fresh(model.params, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    log = train_stage1(model, pairs, cfg, val, store, state=state)
    stage1_model = model.copy()
    kw = schedule = None
    if web is not None and cfg.stage2_epochs > 0:
        kw = build_keyword_list(keyword_captions or [], stopwords, lemma_map)
        usable = set(web.ids)
        schedule = build_schedule([e for e in web_entries if e.image_id in usable], kw,
                                  cfg.stage2_epochs, cfg.difficulty)
        carried = state if cfg.stage2_adam == "continue" else None
        log.extend(train_stage2(model, web, schedule, cfg, val, store, log.last_epoch + 1, carried))
    best_epoch, best_model = select_best(log, store)
    return TwoStageResult(model, stage1_model, log, best_epoch, best_model, kw, schedule)
