"""Frequent-to-rare ordering of web image/tag items for the adaptation stage."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .data_io import CaptionRecord, WebManifestEntry, canonicalize
from .errors import ConfigError


@dataclass
class KeywordList:
    entries: list[tuple[str, int]]
    cap: int = 1000
    lemma_map: Mapping[str, str] = field(default_factory=dict)
    ranks: dict[str, int] = field(init=False)

    def __post_init__(self):
        self.ranks = {kw: r for r, (kw, _) in enumerate(self.entries, start=1)}

    def rank(self, word: str) -> int:
        """1 for the most frequent keyword; ``cap + 1`` for anything unlisted."""
        return self.ranks.get(canonicalize(word, self.lemma_map), self.cap + 1)

    def to_text(self) -> str:
        return "".join(f"{r}\t{kw}\t{n}\n" for r, (kw, n) in enumerate(self.entries, start=1))

    @classmethod
    def from_text(cls, text: str, cap: int | None = None, lemma_map=None) -> "KeywordList":
        entries = []
        for line in text.splitlines():
            if line.strip():
                _, kw, n = line.split("\t")
                entries.append((kw, int(n)))
        return cls(entries, cap if cap is not None else max(len(entries), 1), lemma_map or {})


def build_keyword_list(
    captions: Sequence[CaptionRecord | Sequence[str]],
    stopwords,
    lemma_map: Mapping[str, str] | None = None,
    cap: int = 1000,
) -> KeywordList:
    """Count canonical non-stop-word tokens; sort by count desc, then alphabetically."""
    lemma_map = dict(lemma_map or {})
    stop = {w.lower() for w in stopwords}
    counts: Counter = Counter()
    for cap_rec in captions:
        tokens = cap_rec.tokens if isinstance(cap_rec, CaptionRecord) else cap_rec
        for tok in tokens:
            tok = tok.lower()
            if tok in stop:
                continue
            kw = canonicalize(tok, lemma_map)
            if kw and kw not in stop:
                counts[kw] += 1
    if not counts:
        raise ConfigError("no keywords left after stop-word removal")
    entries = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))[:cap]
    return KeywordList(entries, cap, lemma_map)


def difficulty_score(entry: WebManifestEntry | Sequence[str], kw: KeywordList, mode: str = "min") -> float:
    """Lower is easier: the best (``min``) or average (``mean``) keyword rank of the tags."""
    tags = entry.tags if isinstance(entry, WebManifestEntry) else entry
    ranks = [kw.rank(t) for t in tags]
    if not ranks:
        return float(kw.cap + 1)
    if mode == "min":
        return float(min(ranks))
    if mode == "mean":
        return float(np.mean(ranks))
    raise ConfigError(f"unknown difficulty mode {mode!r}")


@dataclass
class CurriculumSchedule:
    """Items sorted by difficulty; epoch ``e`` (1-based) admits scores <= ``ceilings[e-1]``."""

    item_ids: list[str]
    scores: list[float]
    ceilings: list[float]

    @property
    def epochs(self) -> int:
        return len(self.ceilings)

    def pool(self, epoch: int) -> list[str]:
        if epoch > self.epochs:
            return list(self.item_ids)
        ceiling = self.ceilings[epoch - 1]
        return [i for i, s in zip(self.item_ids, self.scores) if s <= ceiling]

    def first_epoch(self) -> list[int]:
        out = []
        for s in self.scores:
            out.append(next((e for e, c in enumerate(self.ceilings, start=1) if s <= c), self.epochs))
        return out

    def to_text(self) -> str:
        return "".join(
            f"{i}\t{s:g}\t{e}\n" for i, s, e in zip(self.item_ids, self.scores, self.first_epoch())
        )


def build_schedule(
    corpus: Sequence[WebManifestEntry],
    kw: KeywordList,
    epochs: int,
    mode: str = "min",
) -> CurriculumSchedule:
    """Growing-pool schedule: epoch e admits items up to the e/epochs score quantile."""
    if epochs < 1:
        raise ConfigError("curriculum needs at least one epoch")
    if not corpus:
        raise ConfigError("empty web corpus")
    scored = sorted(((difficulty_score(e, kw, mode), e.image_id) for e in corpus))
    scores = np.array([s for s, _ in scored])
    ceilings = [float(np.quantile(scores, e / epochs)) for e in range(1, epochs + 1)]
    ceilings[-1] = float(scores[-1])
    return CurriculumSchedule([i for _, i in scored], [float(s) for s in scores], ceilings)
