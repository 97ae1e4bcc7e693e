"""Toy world for end-to-end runs: concepts with known latents, images, captions, web tags.

Every concept ``c`` has a latent ``u_c`` in an 8-dim space. Clean concepts
live on the first four axes and web-only concepts on the last four, so the
images of web-only concepts (``image = M @ sum(u_c) + noise``) fall in
feature directions that clean training never visits. Word vectors are a
rank-4 linear map of the latents: web-only words land inside the span of
the clean ones, as pretrained vectors of rare words would, which is what
lets the text side handle words the image side has never been taught.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data_io import (
    CaptionRecord,
    WebManifestEntry,
    WordVectors,
    write_captions,
    write_features,
    write_id_list,
    write_manifest,
    write_word_vectors,
)


@dataclass
class SyntheticConfig:
    latent_dim: int = 8
    clean_dims: int = 4
    clean_concepts: int = 20
    web_concepts: int = 4
    image_dim: int = 16
    word_dim: int = 8
    noise: float = 0.05
    min_tokens: int = 3
    max_tokens: int = 6
    n_train: int = 150
    n_heldout_clean: int = 45
    n_heldout_web: int = 5
    n_val: int = 30
    n_web: int = 400
    web_max_clean: int = 1
    web_tag_noise: float = 0.2
    owners: int = 120
    seed: int = 0


@dataclass
class SyntheticWorld:
    cfg: SyntheticConfig
    concepts: list[str]
    web_only: set[str]
    latents: dict[str, np.ndarray]
    mixing: np.ndarray
    word_vectors: WordVectors
    features: dict[str, np.ndarray] = field(default_factory=dict)
    captions: list[CaptionRecord] = field(default_factory=list)
    item_concepts: dict[str, list[str]] = field(default_factory=dict)
    train_ids: list[str] = field(default_factory=list)
    val_ids: list[str] = field(default_factory=list)
    heldout_ids: list[str] = field(default_factory=list)
    heldout_web_ids: list[str] = field(default_factory=list)
    web_entries: list[WebManifestEntry] = field(default_factory=list)
    web_features: dict[str, np.ndarray] = field(default_factory=dict)

    def image_feature(self, concepts, rng) -> np.ndarray:
        z = np.sum([self.latents[c] for c in concepts], axis=0)
        return self.mixing @ z + self.cfg.noise * rng.standard_normal(self.cfg.image_dim)


def make_world(cfg: SyntheticConfig = SyntheticConfig()) -> SyntheticWorld:
    rng = np.random.default_rng(cfg.seed)
    half = cfg.clean_dims
    clean = [f"c{k:02d}" for k in range(cfg.clean_concepts)]
    web = [f"w{k:02d}" for k in range(cfg.web_concepts)]
    latents = {}
    for c in clean:
        latents[c] = np.concatenate([rng.standard_normal(half), np.zeros(cfg.latent_dim - half)])
    for c in web:
        latents[c] = np.concatenate([np.zeros(half), rng.standard_normal(cfg.latent_dim - half)])
    # orthonormal columns: clean and web concepts occupy orthogonal feature subspaces
    mixing, _ = np.linalg.qr(rng.standard_normal((cfg.image_dim, cfg.latent_dim)))
    # rank-4 word space: both halves of the latent fold onto the same 4 directions
    fold = rng.standard_normal((half, cfg.latent_dim))
    lift = rng.standard_normal((cfg.word_dim, half)) / np.sqrt(half)
    word_map = lift @ fold
    wv = WordVectors({c: word_map @ latents[c] for c in clean + web}, cfg.word_dim)
    world = SyntheticWorld(cfg, clean + web, set(web), latents, mixing, wv)

    def draw(pool, n):
        return list(rng.choice(pool, size=n, replace=False))

    def add_item(item_id, concepts):
        order = list(rng.permutation(concepts))
        world.item_concepts[item_id] = order
        world.features[item_id] = world.image_feature(order, rng)
        world.captions.append(CaptionRecord(item_id, order, ["NOUN"] * len(order)))

    n = 0
    for group, count in (("train", cfg.n_train), ("heldout", cfg.n_heldout_clean)):
        for _ in range(count):
            k = int(rng.integers(cfg.min_tokens, cfg.max_tokens + 1))
            item_id = f"img{n:04d}"
            n += 1
            add_item(item_id, draw(clean, k))
            (world.train_ids if group == "train" else world.heldout_ids).append(item_id)
    for _ in range(cfg.n_heldout_web):
        k = int(rng.integers(cfg.min_tokens, cfg.max_tokens + 1))
        n_web = min(cfg.web_concepts, (k + 1) // 2)
        item_id = f"img{n:04d}"
        n += 1
        add_item(item_id, draw(web, n_web) + draw(clean, k - n_web))
        world.heldout_ids.append(item_id)
        world.heldout_web_ids.append(item_id)
    world.val_ids = world.train_ids[: cfg.n_val]

    for j in range(cfg.n_web):
        n_web = int(rng.integers(1, min(3, cfg.web_concepts) + 1))
        n_clean = int(rng.integers(0, cfg.web_max_clean + 1))
        concepts = draw(web, n_web) + draw(clean, n_clean)
        item_id = f"web{j:04d}"
        tags = list(rng.permutation(concepts))
        if rng.random() < cfg.web_tag_noise:
            tags.append(str(rng.choice(clean)))
        query = str(rng.choice([t for t in tags if t in world.web_only]))
        owner = f"u{int(rng.integers(cfg.owners)):03d}"
        world.web_entries.append(WebManifestEntry(item_id, owner, query, tags, [True] * len(tags)))
        world.web_features[item_id] = world.image_feature(concepts, rng)
    return world


def write_world(world: SyntheticWorld, directory, n_val: int = 30, n_folds: int = 5) -> dict[str, Path]:
    """Write the world as raw input files for ``webvse prepare``; returns the paths.

    The last ``n_val`` training items become the validation split and the
    held-out items the test split.
    """
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    paths = {k: d / name for k, name in (
        ("features", "features.txt"), ("captions", "captions.tsv"), ("word_vectors", "vectors.txt"),
        ("train_ids", "train.txt"), ("val_ids", "val.txt"), ("test_ids", "test.txt"),
        ("manifest", "web_manifest.tsv"), ("web_features", "web_features.txt"),
    )}
    write_features(paths["features"], world.features)
    write_captions(paths["captions"], world.captions)
    write_word_vectors(paths["word_vectors"], world.word_vectors)
    train = world.train_ids[: len(world.train_ids) - n_val]
    write_id_list(paths["train_ids"], train)
    write_id_list(paths["val_ids"], world.train_ids[len(train):])
    write_id_list(paths["test_ids"], world.heldout_ids)
    write_manifest(paths["manifest"], world.web_entries)
    write_features(paths["web_features"], world.web_features)
    return paths
