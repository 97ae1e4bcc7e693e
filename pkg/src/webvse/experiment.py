"""One seeded run of the synthetic two-stage experiment."""

from __future__ import annotations

from .data_io import filter_web_corpus
from .encoders import embed_images, embed_sentences
from .evaluation import RetrievalSet, best_ranks, evaluate, percent_within, similarity_tables
from .pipeline import build_pair_data, build_tag_data, new_model, run_two_stage
from .synthetic import SyntheticConfig, make_world
from .trainer import TrainConfig

# Toy-scale schedule. A 150-pair set gives ~5 steps per epoch, so Stage I
# runs 60 epochs at a constant 5e-3 (no decay step is reached) and Stage II
# runs 20 epochs at 0.1x that rate, continuing Stage I's Adam moments so
# that coordinates with tiny web gradients stay put. Margin, clipping and
# the hardest-negative losses are the defaults.
TOY_CONFIG = TrainConfig(
    lr0=5e-3,
    lr_decay_every=60,
    stage1_epochs=60,
    stage2_epochs=20,
    stage2_lr_scale=0.1,
    stage2_adam="continue",
    batch_size=32,
    embed_dim=32,
    hidden_dim=32,
    loss_kind="VSEPP",
)

def caption_to_image_r1(model, data: RetrievalSet, query_images=None) -> float:
    """Text->image R@1 over the full gallery, optionally only for captions of ``query_images``."""
    img = embed_images(model, data.image_feats, normalized=True)
    cap = embed_sentences(model, data.captions, normalized=True)
    _, t2i = similarity_tables(img, cap, data.caption_image)
    ranks = best_ranks(t2i)
    if query_images is not None:
        rows = {data.image_ids.index(i) for i in query_images}
        ranks = ranks[[k for k, owner in enumerate(data.caption_image) if owner in rows]]
    return percent_within(ranks, 1)

def run_synthetic_seed(seed: int, cfg: TrainConfig = TOY_CONFIG, world_cfg: SyntheticConfig | None = None) -> dict:
    world_cfg = world_cfg or SyntheticConfig(seed=seed)
    world = make_world(world_cfg)
    run_cfg = TrainConfig(**{**cfg.__dict__, "seed": seed})

    accepted, _ = filter_web_corpus(world.web_entries, world.word_vectors.vectors)
    pairs = build_pair_data(world.features, world.captions, world.word_vectors, world.train_ids)
    web = build_tag_data(accepted, world.web_features, world.word_vectors)
    val = RetrievalSet.build(world.features, world.captions, world.val_ids)
    heldout = RetrievalSet.build(world.features, world.captions, world.heldout_ids)
    train_caps = [c for c in world.captions if c.image_id in set(world.train_ids)]
    model = new_model(run_cfg, world_cfg.image_dim, world.word_vectors, train_caps)

    res = run_two_stage(run_cfg, model, pairs, val, web, accepted, train_caps)
    out = {"web_items": float(len(web))}
    for tag, m in (("stage1", res.stage1_model), ("stage2", res.model)):
        rep = evaluate(m, heldout)
        out[f"{tag}_r1_t2i"] = rep.r1_t2i
        out[f"{tag}_rsum"] = rep.rsum
        out[f"{tag}_web_r1_t2i"] = caption_to_image_r1(m, heldout, world.heldout_web_ids)
        out[f"{tag}_clean_r1_t2i"] = caption_to_image_r1(
            m, heldout, [i for i in world.heldout_ids if i not in set(world.heldout_web_ids)]
        )
    return out
