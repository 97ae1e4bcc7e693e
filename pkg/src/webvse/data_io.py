"""Readers and writers for every on-disk input, plus web-corpus filtering.

File formats (UTF-8, LF line endings):

    features       ``count dim`` header, then ``id v1 ... vdim``
    word vectors   ``token v1 ... vD`` (an optional ``count dim`` first line is skipped)
    captions       ``image_id<TAB>caption text[<TAB>POS,POS,...]``, POS in {NOUN, VERB, OTHER}
    web manifest   ``image_id<TAB>owner_id<TAB>query<TAB>tag1|tag2:en|...[<TAB>feature_ref]``
    lemma map      ``surface<TAB>canonical``
    stop words     one word per line
    id lists       one id per line
"""

from __future__ import annotations

import functools
import logging
import re
from collections import Counter
from dataclasses import dataclass, field
from importlib import resources
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import FormatError, ValidationError

log = logging.getLogger(__name__)

POS_LABELS = ("NOUN", "VERB", "OTHER")
_TOKEN_RE = re.compile(r"[a-z0-9]+(?:'[a-z]+)?")


# text normalization ---------------------------------------------------------


def tokenize(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


def _strip_suffix(word: str) -> str:
    """Tiny English fallback for words missing from the lemma map."""
    if len(word) <= 3 or not word.isalpha():
        return word
    if word.endswith("ies") and len(word) > 4:
        return word[:-3] + "y"
    if word.endswith(("sses", "shes", "ches", "xes", "zes")):
        return word[:-2]
    if word.endswith("s") and not word.endswith(("ss", "us", "is")):
        return word[:-1]
    for suffix in ("ing", "ed"):
        stem = word[: -len(suffix)]
        if word.endswith(suffix) and len(stem) >= 3 and any(c in "aeiouy" for c in stem):
            if len(stem) >= 2 and stem[-1] == stem[-2] and stem[-1] not in "lsz":
                stem = stem[:-1]
            return stem
    return word


def canonicalize(word: str, lemma_map: Mapping[str, str] | None = None) -> str:
    word = word.lower()
    if lemma_map and word in lemma_map:
        return lemma_map[word]
    return _strip_suffix(word)


# bundled resources ----------------------------------------------------------


def _resource_lines(name: str) -> list[str]:
    text = resources.files("webvse.resources").joinpath(name).read_text(encoding="utf-8")
    return [ln for ln in text.splitlines() if ln.strip() and not ln.startswith("#")]


@functools.lru_cache(maxsize=None)
def default_stopwords() -> frozenset[str]:
    return frozenset(ln.strip() for ln in _resource_lines("stopwords.txt"))


def default_pos_lexicon() -> dict[str, str]:
    return dict(_pos_lexicon())


@functools.lru_cache(maxsize=None)
def _pos_lexicon() -> tuple[tuple[str, str], ...]:
    return tuple(tuple(ln.split("\t")) for ln in _resource_lines("pos_lexicon.tsv"))


# records --------------------------------------------------------------------


@dataclass
class CaptionRecord:
    image_id: str
    tokens: list[str]
    pos: list[str] | None = None

    def __post_init__(self):
        if not self.tokens:
            raise FormatError(f"caption for {self.image_id} has no tokens")
        if self.pos is not None and len(self.pos) != len(self.tokens):
            raise FormatError(
                f"caption for {self.image_id}: {len(self.pos)} POS labels for {len(self.tokens)} tokens"
            )


@dataclass
class WebManifestEntry:
    image_id: str
    owner_id: str
    query: str
    tags: list[str]
    english: list[bool] = field(default_factory=list)
    feature_ref: str | None = None

    def __post_init__(self):
        if not self.english:
            self.english = [False] * len(self.tags)
        if self.feature_ref is None:
            self.feature_ref = self.image_id


@dataclass
class WordVectors:
    vectors: dict[str, np.ndarray]
    dim: int
    duplicates: int = 0

    def __contains__(self, token: str) -> bool:
        return token in self.vectors

    def get(self, token: str, default=None):
        return self.vectors.get(token, default)


@dataclass
class DatasetSplit:
    train: list[str]
    val: list[str]
    test: list[str]
    folds: list[list[str]] = field(default_factory=list)


# loaders --------------------------------------------------------------------


def _lines(path):
    with open(path, encoding="utf-8", newline="\n") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if line.strip():
                yield lineno, line


def _floats(fields: Sequence[str], path, lineno) -> np.ndarray:
    try:
        vec = np.array([float(x) for x in fields], dtype=np.float64)
    except ValueError as exc:
        raise FormatError(f"{path}:{lineno}: {exc}") from None
    if not np.all(np.isfinite(vec)):
        raise FormatError(f"{path}:{lineno}: non-finite value")
    return vec


def load_features(path) -> dict[str, np.ndarray]:
    it = _lines(path)
    try:
        lineno, head = next(it)
    except StopIteration:
        raise FormatError(f"{path}: empty feature file") from None
    parts = head.split()
    if len(parts) != 2 or not all(p.isdigit() for p in parts):
        raise FormatError(f"{path}:{lineno}: expected 'count dim' header")
    count, dim = int(parts[0]), int(parts[1])
    if dim <= 0:
        raise FormatError(f"{path}: feature dimension must be positive")
    feats: dict[str, np.ndarray] = {}
    for lineno, line in it:
        fields = line.split()
        item_id, values = fields[0], fields[1:]
        if len(values) != dim:
            raise FormatError(f"{path}:{lineno}: item {item_id} has dim {len(values)}, expected {dim}")
        if item_id in feats:
            raise FormatError(f"{path}:{lineno}: duplicate id {item_id}")
        feats[item_id] = _floats(values, path, lineno)
    if len(feats) != count:
        raise FormatError(f"{path}: header announces {count} items, found {len(feats)}")
    return feats


def write_features(path, feats: Mapping[str, np.ndarray]) -> None:
    dims = {len(v) for v in feats.values()}
    if len(dims) > 1:
        raise FormatError("features of mixed dimension")
    dim = dims.pop() if dims else 0
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"{len(feats)} {dim}\n")
        for item_id, vec in feats.items():
            fh.write(item_id + " " + " ".join(repr(float(x)) for x in vec) + "\n")


def feature_dim(feats: Mapping[str, np.ndarray]) -> int:
    return len(next(iter(feats.values())))


def load_word_vectors(path, dim: int | None = None) -> WordVectors:
    vectors: dict[str, np.ndarray] = {}
    duplicates = 0
    first = True
    for lineno, line in _lines(path):
        fields = line.split()
        if first:
            first = False
            if len(fields) == 2 and all(f.isdigit() for f in fields):
                continue
        token, values = fields[0], fields[1:]
        if dim is None:
            dim = len(values)
        if len(values) != dim or dim == 0:
            raise FormatError(f"{path}:{lineno}: token {token!r} has {len(values)} values, expected {dim}")
        if token in vectors:
            duplicates += 1
        vectors[token] = _floats(values, path, lineno)
    if dim is None:
        raise FormatError(f"{path}: no word vectors")
    if duplicates:
        log.warning("%s: %d duplicate tokens, last occurrence kept", path, duplicates)
    return WordVectors(vectors, dim, duplicates)


def write_word_vectors(path, wv: WordVectors) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for token, vec in wv.vectors.items():
            fh.write(token + " " + " ".join(repr(float(x)) for x in vec) + "\n")


def load_captions(path) -> list[CaptionRecord]:
    out = []
    for lineno, line in _lines(path):
        fields = line.split("\t")
        if len(fields) not in (2, 3):
            raise FormatError(f"{path}:{lineno}: expected 2 or 3 tab-separated fields, got {len(fields)}")
        tokens = tokenize(fields[1])
        if not tokens:
            raise FormatError(f"{path}:{lineno}: caption has no tokens")
        pos = None
        if len(fields) == 3 and fields[2]:
            pos = [p.strip().upper() for p in fields[2].split(",")]
            bad = [p for p in pos if p not in POS_LABELS]
            if bad:
                raise FormatError(f"{path}:{lineno}: unknown POS labels {bad}")
            if len(pos) != len(tokens):
                raise FormatError(f"{path}:{lineno}: {len(pos)} POS labels for {len(tokens)} tokens")
        out.append(CaptionRecord(fields[0], tokens, pos))
    return out


def write_captions(path, captions: Iterable[CaptionRecord]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rec in captions:
            line = f"{rec.image_id}\t{' '.join(rec.tokens)}"
            if rec.pos is not None:
                line += "\t" + ",".join(rec.pos)
            fh.write(line + "\n")


def load_manifest(path) -> list[WebManifestEntry]:
    out = []
    for lineno, line in _lines(path):
        fields = line.split("\t")
        if len(fields) not in (4, 5):
            raise FormatError(f"{path}:{lineno}: expected 4 or 5 tab-separated fields, got {len(fields)}")
        tags, english = [], []
        for raw in fields[3].split("|"):
            raw = raw.strip()
            if not raw:
                continue
            if raw.endswith(":en"):
                tags.append(raw[:-3])
                english.append(True)
            else:
                tags.append(raw)
                english.append(False)
        ref = fields[4] if len(fields) == 5 and fields[4] else None
        out.append(WebManifestEntry(fields[0], fields[1], fields[2], tags, english, ref))
    return out


def write_manifest(path, entries: Iterable[WebManifestEntry]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for e in entries:
            tags = "|".join(t + (":en" if en else "") for t, en in zip(e.tags, e.english))
            line = f"{e.image_id}\t{e.owner_id}\t{e.query}\t{tags}"
            if e.feature_ref != e.image_id:
                line += f"\t{e.feature_ref}"
            fh.write(line + "\n")


def load_lemma_map(path) -> dict[str, str]:
    out = {}
    for lineno, line in _lines(path):
        fields = line.split("\t")
        if len(fields) != 2:
            raise FormatError(f"{path}:{lineno}: expected 'surface<TAB>canonical'")
        out[fields[0].strip().lower()] = fields[1].strip().lower()
    return out


def load_word_set(path) -> frozenset[str]:
    return frozenset(line.strip().lower() for _, line in _lines(path))


def load_id_list(path) -> list[str]:
    return [line.strip() for _, line in _lines(path)]


def write_id_list(path, ids: Iterable[str]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for i in ids:
            fh.write(f"{i}\n")


# dummy tags -----------------------------------------------------------------


@functools.lru_cache(maxsize=1)
def _default_lex() -> dict[str, str]:
    return dict(_pos_lexicon())


def resolve_pos(
    rec: CaptionRecord,
    lemma_map: Mapping[str, str] | None = None,
    lexicon: Mapping[str, str] | None = None,
) -> list[str]:
    """Per-token POS labels: the explicit ones if present, else lexicon lookups.

    Each token is looked up by surface form, then canonical form, in
    ``lexicon`` (default: the bundled one); misses are ``OTHER``.
    """
    if rec.pos is not None:
        return list(rec.pos)
    lex = _default_lex() if lexicon is None else lexicon
    return [lex.get(tok.lower()) or lex.get(canonicalize(tok, lemma_map)) or "OTHER" for tok in rec.tokens]


def derive_dummy_tags(
    rec: CaptionRecord,
    lemma_map: Mapping[str, str] | None = None,
    lexicon: Mapping[str, str] | None = None,
) -> list[str]:
    """Canonical nouns and verbs of a caption, first occurrence order, no repeats."""
    seen: dict[str, None] = {}
    for tok, pos in zip(rec.tokens, resolve_pos(rec, lemma_map, lexicon)):
        if pos in ("NOUN", "VERB"):
            seen.setdefault(canonicalize(tok, lemma_map), None)
    return list(seen)


def tag_mean_vector(tags: Sequence[str], wv: WordVectors) -> np.ndarray | None:
    """Average word vector of the tags that have one; None when none do."""
    vecs = [wv.vectors[t] for t in tags if t in wv.vectors]
    if not vecs:
        return None
    total = np.zeros(wv.dim)
    for v in vecs:
        total = total + v
    return total / len(vecs)


# web filtering --------------------------------------------------------------

RULES = ("english", "per_query", "per_owner", "duplicate")


@dataclass
class FilterReport:
    counts: dict[str, int] = field(default_factory=lambda: {r: 0 for r in RULES})
    rejected: list[tuple[str, str]] = field(default_factory=list)

    def reject(self, entry: WebManifestEntry, rule: str) -> None:
        self.counts[rule] += 1
        self.rejected.append((entry.image_id, rule))

    @property
    def total(self) -> int:
        return sum(self.counts.values())


def filter_web_corpus(
    entries: Sequence[WebManifestEntry],
    vocabulary: Iterable[str] | None = None,
    lemma_map: Mapping[str, str] | None = None,
    per_query: int = 200,
    per_owner: int = 5,
    dedup_tags: int = 5,
    min_english: int = 2,
) -> tuple[list[WebManifestEntry], FilterReport]:
    """Apply the collection rules in order: English tags, query cap, owner cap, dedup.

    A tag counts as English if it carries the ``:en`` marker or belongs to
    ``vocabulary`` (typically the word-vector vocabulary). Duplicates share
    the same multiset of canonicalized first ``dedup_tags`` tags, or the same
    image id; the earliest entry is kept.
    """
    vocab = set(vocabulary or ())
    report = FilterReport()

    stage = []
    for e in entries:
        n_en = sum(1 for t, en in zip(e.tags, e.english) if en or t in vocab or t.lower() in vocab)
        if n_en < min_english:
            report.reject(e, "english")
        else:
            stage.append(e)

    per_q: Counter = Counter()
    kept = []
    for e in stage:
        per_q[e.query] += 1
        if per_q[e.query] > per_query:
            report.reject(e, "per_query")
        else:
            kept.append(e)

    per_o: Counter = Counter()
    stage = []
    for e in kept:
        per_o[e.owner_id] += 1
        if per_o[e.owner_id] > per_owner:
            report.reject(e, "per_owner")
        else:
            stage.append(e)

    seen_keys, seen_ids, accepted = set(), set(), []
    for e in stage:
        key = tuple(sorted(canonicalize(t, lemma_map) for t in e.tags[:dedup_tags]))
        if key in seen_keys or e.image_id in seen_ids:
            report.reject(e, "duplicate")
            continue
        seen_keys.add(key)
        seen_ids.add(e.image_id)
        accepted.append(e)
    return accepted, report


# splits ---------------------------------------------------------------------


def make_splits(
    ids: Iterable[str] | None,
    train: Sequence[str],
    val: Sequence[str],
    test: Sequence[str],
    n_folds: int = 0,
) -> DatasetSplit:
    """Validate an ingested train/val/test partition and cut test into equal folds by position."""
    parts = {"train": list(train), "val": list(val), "test": list(test)}
    problems = []
    for name, lst in parts.items():
        dup = [i for i, c in Counter(lst).items() if c > 1]
        if dup:
            problems.append(f"{name} repeats ids {sorted(dup)[:10]}")
    names = list(parts)
    for a in range(3):
        for b in range(a + 1, 3):
            overlap = set(parts[names[a]]) & set(parts[names[b]])
            if overlap:
                problems.append(f"{names[a]}/{names[b]} overlap: {sorted(overlap)[:10]}")
    if ids is not None:
        known = set(ids)
        unknown = [i for lst in parts.values() for i in lst if i not in known]
        if unknown:
            problems.append(f"unknown ids {sorted(set(unknown))[:10]}")
    if problems:
        raise ValidationError("invalid split: " + "; ".join(problems))
    folds: list[list[str]] = []
    if n_folds:
        n = len(parts["test"])
        if n_folds < 0 or n % n_folds:
            raise ValidationError(f"{n} test ids cannot form {n_folds} equal folds")
        size = n // n_folds
        folds = [parts["test"][k * size : (k + 1) * size] for k in range(n_folds)]
    return DatasetSplit(parts["train"], parts["val"], parts["test"], folds)
