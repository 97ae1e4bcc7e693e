"""Prepared dataset bundles: validated, filtered, deterministic files plus a digest index.

A bundle directory holds

    features.txt       image features of every split image, in split order
    captions.tsv       tokenized captions with resolved POS labels
    dummy_tags.tsv     ``image_id<TAB>tag|tag|...`` per caption line
    word_vectors.txt   the word vectors
    stopwords.txt      stop words for the keyword list
    lemma_map.tsv      surface -> canonical map (may be empty)
    train.txt, val.txt, test.txt, fold_<k>.txt
    web_manifest.tsv, web_features.txt   accepted web items (only with a web corpus)
    bundle.json        sha256 of every file above, counts and dimensions
    rejections.tsv     filtered-out web items and the rule that removed them

Every file except ``rejections.tsv`` is a pure function of the inputs, and
preparing a bundle from its own files reproduces them byte for byte.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .data_io import (
    CaptionRecord,
    DatasetSplit,
    WebManifestEntry,
    WordVectors,
    default_stopwords,
    derive_dummy_tags,
    feature_dim,
    filter_web_corpus,
    load_captions,
    load_features,
    load_id_list,
    load_lemma_map,
    load_manifest,
    load_word_set,
    load_word_vectors,
    make_splits,
    resolve_pos,
    write_captions,
    write_features,
    write_id_list,
    write_manifest,
    write_word_vectors,
)
from .errors import ConfigError, IntegrityError, ValidationError

BUNDLE_FORMAT = "webvse-bundle 1"
INDEX = "bundle.json"
REJECTIONS = "rejections.tsv"
FILTER_KEYS = ("per_query", "per_owner", "dedup_tags", "min_english")


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 16), b""):
            h.update(block)
    return h.hexdigest()


def _write_lines(path: Path, lines: Sequence[str]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.writelines(line + "\n" for line in lines)


@dataclass
class Bundle:
    root: Path
    features: dict[str, np.ndarray]
    captions: list[CaptionRecord]
    word_vectors: WordVectors
    stopwords: frozenset[str]
    lemma_map: dict[str, str]
    split: DatasetSplit
    web_entries: list[WebManifestEntry] = field(default_factory=list)
    web_features: dict[str, np.ndarray] = field(default_factory=dict)
    index: dict = field(default_factory=dict)

    @property
    def image_dim(self) -> int:
        return feature_dim(self.features)

    @property
    def word_dim(self) -> int:
        return self.word_vectors.dim

    @property
    def has_web(self) -> bool:
        return bool(self.web_entries)

    def captions_for(self, ids: Sequence[str]) -> list[CaptionRecord]:
        wanted = set(ids)
        return [c for c in self.captions if c.image_id in wanted]


def prepare_bundle(
    out: Path,
    features_path,
    captions_path,
    word_vectors_path,
    train_ids_path,
    val_ids_path,
    test_ids_path,
    n_folds: int = 0,
    manifest_path=None,
    web_features_path=None,
    lemma_map_path=None,
    stopwords_path=None,
    filter_options: Mapping[str, int] | None = None,
) -> tuple[dict, list[tuple[str, str]]]:
    """Validate the inputs and write a bundle to ``out``; returns (index, rejections)."""
    options = dict(filter_options or {})
    bad = [k for k in options if k not in FILTER_KEYS]
    if bad:
        raise ConfigError(f"unknown filter options {bad}")
    if (manifest_path is None) != (web_features_path is None):
        raise ValidationError("a web manifest and its web features must be given together")

    feats = load_features(features_path)
    captions = load_captions(captions_path)
    wv = load_word_vectors(word_vectors_path)
    lemma_map = load_lemma_map(lemma_map_path) if lemma_map_path else {}
    stopwords = load_word_set(stopwords_path) if stopwords_path else default_stopwords()
    split = make_splits(
        None, load_id_list(train_ids_path), load_id_list(val_ids_path), load_id_list(test_ids_path), n_folds
    )
    split_ids = split.train + split.val + split.test
    missing = [i for i in split_ids if i not in feats]
    if missing:
        raise ValidationError(f"split images without features: {missing[:10]}")
    wanted = set(split_ids)
    kept = [c for c in captions if c.image_id in wanted]
    uncaptioned = sorted(wanted - {c.image_id for c in kept})
    if uncaptioned:
        raise ValidationError(f"split images without captions: {uncaptioned[:10]}")

    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    files: list[str] = []

    def emit(name):
        files.append(name)
        return out / name

    write_features(emit("features.txt"), {i: feats[i] for i in split_ids})
    resolved = [CaptionRecord(c.image_id, c.tokens, resolve_pos(c, lemma_map)) for c in kept]
    write_captions(emit("captions.tsv"), resolved)
    _write_lines(emit("dummy_tags.tsv"),
                 [f"{c.image_id}\t{'|'.join(derive_dummy_tags(c, lemma_map))}" for c in resolved])
    write_word_vectors(emit("word_vectors.txt"), wv)
    _write_lines(emit("stopwords.txt"), sorted(stopwords))
    _write_lines(emit("lemma_map.tsv"), [f"{k}\t{v}" for k, v in sorted(lemma_map.items())])
    write_id_list(emit("train.txt"), split.train)
    write_id_list(emit("val.txt"), split.val)
    write_id_list(emit("test.txt"), split.test)
    for k, fold in enumerate(split.folds, start=1):
        write_id_list(emit(f"fold_{k}.txt"), fold)

    counts = {"images": len(split_ids), "captions": len(resolved), "train": len(split.train),
              "val": len(split.val), "test": len(split.test), "word_vectors": len(wv.vectors)}
    rejected: list[tuple[str, str]] = []
    if manifest_path is not None:
        entries = load_manifest(manifest_path)
        web_feats = load_features(web_features_path)
        accepted, report = filter_web_corpus(entries, wv.vectors, lemma_map, **options)
        absent = [e.image_id for e in accepted if e.feature_ref not in web_feats]
        if absent:
            raise ValidationError(f"accepted web items without features: {absent[:10]}")
        refs = list(dict.fromkeys(e.feature_ref for e in accepted))
        if refs and len({len(web_feats[r]) for r in refs}) != 1:
            raise ValidationError("web features of mixed dimension")
        if refs and len(web_feats[refs[0]]) != feature_dim(feats):
            raise ValidationError(
                f"web features have dim {len(web_feats[refs[0]])}, clean features {feature_dim(feats)}"
            )
        if accepted:
            write_manifest(emit("web_manifest.tsv"), accepted)
            write_features(emit("web_features.txt"), {r: web_feats[r] for r in refs})
        rejected = report.rejected
        counts["web_accepted"] = len(accepted)

    index = {
        "format": BUNDLE_FORMAT,
        "files": {name: sha256_file(out / name) for name in files},
        "counts": counts,
        "image_dim": feature_dim(feats),
        "word_dim": wv.dim,
        "folds": len(split.folds),
    }
    with open(out / INDEX, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(json.dumps(index, indent=2, sort_keys=True) + "\n")
    _write_lines(out / REJECTIONS, ["image_id\trule"] + [f"{i}\t{r}" for i, r in rejected])
    return index, rejected


def verify_bundle(root) -> dict:
    """Check every recorded digest; raises IntegrityError naming the first mismatch."""
    root = Path(root)
    path = root / INDEX
    if not path.exists():
        raise IntegrityError(f"{root} is not a prepared bundle (no {INDEX})")
    index = json.loads(path.read_text(encoding="utf-8"))
    if index.get("format") != BUNDLE_FORMAT:
        raise IntegrityError(f"{path}: unknown bundle format {index.get('format')!r}")
    for name, digest in index["files"].items():
        f = root / name
        if not f.exists():
            raise IntegrityError(f"bundle file {name} is missing")
        if sha256_file(f) != digest:
            raise IntegrityError(f"bundle file {name} changed since it was prepared")
    return index


def load_bundle(root) -> Bundle:
    root = Path(root)
    index = verify_bundle(root)
    files = index["files"]
    captions = load_captions(root / "captions.tsv")
    split = DatasetSplit(
        load_id_list(root / "train.txt"),
        load_id_list(root / "val.txt"),
        load_id_list(root / "test.txt"),
        [load_id_list(root / f"fold_{k}.txt") for k in range(1, index["folds"] + 1)],
    )
    bundle = Bundle(
        root,
        load_features(root / "features.txt"),
        captions,
        load_word_vectors(root / "word_vectors.txt"),
        load_word_set(root / "stopwords.txt"),
        load_lemma_map(root / "lemma_map.tsv"),
        split,
        index=index,
    )
    if "web_manifest.tsv" in files:
        bundle.web_entries = load_manifest(root / "web_manifest.tsv")
        bundle.web_features = load_features(root / "web_features.txt")
    return bundle
