"""Two-stage training: clean caption pairs first, then web image/tag adaptation."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .curriculum import CurriculumSchedule
from .encoders import (
    SENTENCE_PARAMS,
    EmbeddingModel,
    load_checkpoint,
    save_checkpoint,
    sentence_backward,
    sentence_forward,
)
from .errors import ConfigError, IntegrityError, NumericError
from .evaluation import RetrievalReport, RetrievalSet, evaluate
from .losses import BatchEmbeddings, LossConfig, LossOutput, image_tag_loss, vse_loss, vsepp_loss
from .numerics import ParameterSet, l2_norm

log = logging.getLogger(__name__)

STAGE2_PARAMS = ("W_image", "W_tag")


@dataclass
class TrainConfig:
    lr0: float = 2e-4
    lr_decay_factor: float = 10.0
    lr_decay_every: int = 10
    stage1_epochs: int = 20
    stage2_epochs: int = 20
    stage2_lr_scale: float = 0.1
    batch_size: int = 128
    clip_norm: float = 2.0
    margin: float = 0.2
    loss_kind: str = "VSEPP"
    seed: int = 0
    embed_dim: int = 1024
    hidden_dim: int = 1024
    lambda_is: float = 1.0
    lambda_it: float = 1.0
    reduction: str = "sum"
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    difficulty: str = "min"
    stage2_adam: str = "fresh"
    # expected input dimensions; 0 takes them from the data
    image_dim: int = 0
    word_dim: int = 0

    def __post_init__(self):
        self.loss_kind = self.loss_kind.upper()
        if self.loss_kind not in ("VSE", "VSEPP"):
            raise ConfigError(f"loss_kind must be VSE or VSEPP, got {self.loss_kind!r}")
        if self.lr0 < 0:
            raise ConfigError("lr0 must be non-negative")
        if not 0 < self.stage2_lr_scale <= 1:
            raise ConfigError("stage2_lr_scale must lie in (0, 1]")
        for name in ("lr_decay_factor", "lr_decay_every", "batch_size", "clip_norm", "margin",
                     "embed_dim", "hidden_dim"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.reduction not in ("sum", "mean"):
            raise ConfigError(f"reduction must be sum or mean, got {self.reduction!r}")
        if self.difficulty not in ("min", "mean"):
            raise ConfigError(f"difficulty must be min or mean, got {self.difficulty!r}")
        if self.stage2_adam not in ("fresh", "continue"):
            raise ConfigError(f"stage2_adam must be fresh or continue, got {self.stage2_adam!r}")
        if self.image_dim < 0 or self.word_dim < 0:
            raise ConfigError("image_dim and word_dim must be non-negative")
        if self.stage1_epochs < 0 or self.stage2_epochs < 0:
            raise ConfigError("epoch counts must be non-negative")

    def loss_config(self, stage: int) -> LossConfig:
        if stage == 1:
            return LossConfig(self.margin, self.lambda_is, self.lambda_it, self.reduction)
        return LossConfig(self.margin, 0.0, 1.0, self.reduction)

    @classmethod
    def from_mapping(cls, values: Mapping[str, object]) -> "TrainConfig":
        types = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        for key, raw in values.items():
            if key not in types:
                raise ConfigError(f"unknown config key {key!r}")
            kind = types[key]
            try:
                if kind == "int":
                    kwargs[key] = int(raw)
                elif kind == "float":
                    kwargs[key] = float(raw)
                else:
                    kwargs[key] = str(raw)
            except ValueError:
                raise ConfigError(f"bad value for {key}: {raw!r}") from None
        return cls(**kwargs)

    @classmethod
    def from_file(cls, path, overrides: Mapping[str, object] | None = None) -> "TrainConfig":
        return cls.from_mapping({**read_config_file(path), **(overrides or {})})

    def to_text(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in asdict(self).items())


def read_config_file(path) -> dict[str, str]:
    """Flat ``key=value`` lines; ``#`` starts a comment."""
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key=value")
            key, value = (s.strip() for s in line.split("=", 1))
            out[key] = value
    return out


def lr_at(cfg: TrainConfig, stage: int, epoch_in_stage: int) -> float:
    """Step decay within each stage; stage 2 restarts the clock from a scaled base."""
    if epoch_in_stage < 0:
        raise ValueError("epoch must be non-negative")
    decay = cfg.lr_decay_factor ** (epoch_in_stage // cfg.lr_decay_every)
    if stage == 1:
        return cfg.lr0 / decay
    if stage == 2:
        stage1_final = lr_at(cfg, 1, max(cfg.stage1_epochs - 1, 0))
        return cfg.stage2_lr_scale * stage1_final / decay
    raise ValueError(f"unknown stage {stage}")


# optimizer ------------------------------------------------------------------


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def fresh(cls, params: ParameterSet, beta1=0.9, beta2=0.999, eps=1e-8) -> "AdamState":
        return cls(
            {n: np.zeros_like(v) for n, v in params.values.items()},
            {n: np.zeros_like(v) for n, v in params.values.items()},
            0, beta1, beta2, eps,
        )


def adam_step(params: ParameterSet, state: AdamState, lr: float, names: Iterable[str] | None = None) -> None:
    """One bias-corrected Adam update, in place, on ``names`` (all by default)."""
    names = list(names) if names is not None else params.names()
    for n in names:
        if not np.all(np.isfinite(params.grads[n])):
            raise NumericError(f"non-finite gradient in parameter {n}")
    state.step += 1
    b1, b2, t = state.beta1, state.beta2, state.step
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for n in names:
        g = params.grads[n]
        m = state.m[n]
        v = state.v[n]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        params.values[n] -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def clip_gradients(params: ParameterSet, clip_norm: float, names: Iterable[str] | None = None) -> dict[str, float]:
    """Rescale each named gradient whose L2 norm exceeds ``clip_norm``; returns the factors."""
    if clip_norm <= 0:
        raise ValueError("clip_norm must be positive")
    factors = {}
    for n in names if names is not None else params.names():
        norm = l2_norm(params.grads[n].ravel())
        if norm > clip_norm:
            factors[n] = clip_norm / norm
            params.grads[n] *= factors[n]
        else:
            factors[n] = 1.0
    return factors


# data -----------------------------------------------------------------------


@dataclass
class PairData:
    """Clean (image, caption) pairs; ``tag_means`` rows are meaningless where ``has_tags`` is False."""

    image_feats: np.ndarray
    tokens: list[list[str]]
    tag_means: np.ndarray
    has_tags: np.ndarray

    def __len__(self) -> int:
        return len(self.tokens)


@dataclass
class TagData:
    ids: list[str]
    image_feats: np.ndarray
    tag_means: np.ndarray

    def __len__(self) -> int:
        return len(self.ids)


# model-level loss -----------------------------------------------------------


def pipeline_loss(
    model: EmbeddingModel,
    image_feats: np.ndarray,
    tokens: Sequence[Sequence] | None,
    tag_means: np.ndarray | None,
    has_tags: np.ndarray | None,
    loss_cfg: LossConfig,
    loss_kind: str = "VSEPP",
) -> LossOutput:
    """Forward the batch, then accumulate parameter gradients into ``model.params.grads``.

    The sentence branch is skipped entirely when ``lambda_is`` is 0 or there
    are no captions, and the tag branch when ``lambda_it`` is 0.
    """
    p, g = model.params.values, model.params.grads
    X = np.asarray(image_feats, dtype=np.float64)
    I = X @ p["W_image"].T
    n = X.shape[0]
    dI = np.zeros_like(I)
    value = 0.0
    switches = []

    if loss_cfg.lambda_is > 0 and tokens is not None:
        S, cache = sentence_forward(model, tokens)
        fn = vsepp_loss if loss_kind == "VSEPP" else vse_loss
        is_out = fn(BatchEmbeddings(I, S), loss_cfg)
        value += loss_cfg.lambda_is * is_out.value
        dI += loss_cfg.lambda_is * is_out.grad_images
        switches.append(is_out.switches)
        sentence_backward(model, cache, loss_cfg.lambda_is * is_out.grad_texts)

    if loss_cfg.lambda_it > 0 and tag_means is not None:
        rows = np.arange(n) if has_tags is None else np.flatnonzero(has_tags)
        if rows.size:
            Tb = np.asarray(tag_means, dtype=np.float64)[rows]
            T = Tb @ p["W_tag"].T
            it_out = image_tag_loss(BatchEmbeddings(I[rows], T), loss_cfg)
            value += loss_cfg.lambda_it * it_out.value
            np.add.at(dI, rows, loss_cfg.lambda_it * it_out.grad_images)
            g["W_tag"] += (loss_cfg.lambda_it * it_out.grad_texts).T @ Tb
            switches.append(it_out.switches)

    g["W_image"] += dI.T @ X
    sw = np.concatenate(switches) if switches else np.zeros(0)
    return LossOutput(float(value), dI, np.zeros(0), sw)


# logs and checkpoints -------------------------------------------------------


@dataclass
class EpochRecord:
    epoch: int
    stage: int
    lr: float
    loss: float
    report: RetrievalReport
    selected: bool = False

    def as_dict(self) -> dict:
        d = {"epoch": self.epoch, "stage": self.stage, "lr": self.lr, "loss": self.loss}
        d.update(self.report.as_dict())
        d["selected"] = self.selected
        return d


@dataclass
class TrainLog:
    records: list[EpochRecord] = field(default_factory=list)

    def append(self, rec: EpochRecord) -> None:
        if self.records and rec.epoch <= self.records[-1].epoch:
            raise ValueError("epochs must be strictly increasing")
        self.records.append(rec)
        log.info("epoch %d stage %d lr %.3g loss %.4f rsum %.1f",
                 rec.epoch, rec.stage, rec.lr, rec.loss, rec.report.rsum)

    def extend(self, other: "TrainLog") -> None:
        for rec in other.records:
            self.append(rec)

    @property
    def last_epoch(self) -> int:
        return self.records[-1].epoch if self.records else 0

    def __len__(self) -> int:
        return len(self.records)

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r.as_dict(), sort_keys=False) + "\n" for r in self.records)


class CheckpointStore:
    """Per-epoch model snapshots, in memory or as files under ``directory``."""

    def __init__(self, directory=None):
        self.directory = Path(directory) if directory is not None else None
        self._memory: dict[int, EmbeddingModel] = {}
        if self.directory is not None:
            self.directory.mkdir(parents=True, exist_ok=True)

    def path(self, epoch: int) -> Path:
        return self.directory / f"epoch_{epoch:03d}.ckpt"

    def save(self, epoch: int, model: EmbeddingModel) -> None:
        if self.directory is None:
            self._memory[epoch] = model.copy()
        else:
            save_checkpoint(model, self.path(epoch))

    def load(self, epoch: int) -> EmbeddingModel:
        if self.directory is None:
            if epoch not in self._memory:
                raise IntegrityError(f"no checkpoint for epoch {epoch}")
            return self._memory[epoch].copy()
        return load_checkpoint(self.path(epoch))


def select_best(train_log: TrainLog, checkpoints: CheckpointStore | Mapping[int, object]):
    """Pick the epoch with the largest validation rsum (earliest on ties).

    Returns ``(epoch, model)`` and flags the chosen record in the log.
    """
    if not train_log.records:
        raise ValueError("empty training log")
    best = max(train_log.records, key=lambda r: (r.report.rsum, -r.epoch))
    for r in train_log.records:
        r.selected = r is best
    if isinstance(checkpoints, CheckpointStore):
        return best.epoch, checkpoints.load(best.epoch)
    if best.epoch not in checkpoints:
        raise IntegrityError(f"no checkpoint for epoch {best.epoch}")
    ck = checkpoints[best.epoch]
    return best.epoch, ck if isinstance(ck, EmbeddingModel) else load_checkpoint(ck)


# stages ---------------------------------------------------------------------


def _finish_epoch(model, val, store, train_log, epoch, stage, lr, losses):
    report = evaluate(model, val)
    store.save(epoch, model)
    mean_loss = float(np.mean(losses)) if losses else 0.0
    train_log.append(EpochRecord(epoch, stage, lr, mean_loss, report))


def _step(model, state, cfg, lr, names):
    clip_gradients(model.params, cfg.clip_norm, names)
    adam_step(model.params, state, lr, names)


def train_stage1(
    model: EmbeddingModel,
    data: PairData,
    cfg: TrainConfig,
    val: RetrievalSet,
    store: CheckpointStore | None = None,
    first_epoch: int = 1,
    state: AdamState | None = None,
) -> TrainLog:
    """Joint caption + dummy-tag training with ``lambda_is * L_IS + lambda_it * L_IT``."""
    store = store if store is not None else CheckpointStore()
    state = state if state is not None else AdamState.fresh(model.params, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    loss_cfg = cfg.loss_config(1)
    names = model.params.names()
    train_log = TrainLog()
    for e in range(cfg.stage1_epochs):
        lr = lr_at(cfg, 1, e)
        rng = np.random.default_rng([cfg.seed, 1, e])
        order = rng.permutation(len(data))
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            model.params.zero_grad()
            out = pipeline_loss(
                model, data.image_feats[idx], [data.tokens[i] for i in idx],
                data.tag_means[idx], data.has_tags[idx], loss_cfg, cfg.loss_kind,
            )
            _step(model, state, cfg, lr, names)
            losses.append(out.value)
        _finish_epoch(model, val, store, train_log, first_epoch + e, 1, lr, losses)
    return train_log


def train_stage2(
    model: EmbeddingModel,
    web: TagData,
    schedule: CurriculumSchedule,
    cfg: TrainConfig,
    val: RetrievalSet,
    store: CheckpointStore | None = None,
    first_epoch: int = 1,
    state: AdamState | None = None,
) -> TrainLog:
    """Image/tag-only adaptation on curriculum-ordered web items.

    Only ``W_image`` and ``W_tag`` are updated; the sentence branch is never
    evaluated, so its parameters stay bit-identical. Pass the Stage I
    ``state`` to continue its moment estimates instead of starting fresh.
    """
    if schedule is None or schedule.epochs == 0:
        raise ConfigError("stage 2 requires a non-empty curriculum schedule")
    store = store if store is not None else CheckpointStore()
    index = {i: k for k, i in enumerate(web.ids)}
    unknown = [i for i in schedule.item_ids if i not in index]
    if unknown:
        raise ConfigError(f"schedule references items missing from the web corpus: {unknown[:10]}")
    state = state if state is not None else AdamState.fresh(model.params, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    loss_cfg = cfg.loss_config(2)
    train_log = TrainLog()
    for e in range(cfg.stage2_epochs):
        lr = lr_at(cfg, 2, e)
        pool = np.array([index[i] for i in schedule.pool(e + 1)], dtype=np.intp)
        rng = np.random.default_rng([cfg.seed, 2, e])
        order = pool[rng.permutation(len(pool))] if len(pool) else pool
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            model.params.zero_grad()
            out = pipeline_loss(model, web.image_feats[idx], None, web.tag_means[idx], None, loss_cfg)
            _step(model, state, cfg, lr, STAGE2_PARAMS)
            losses.append(out.value)
        _finish_epoch(model, val, store, train_log, first_epoch + e, 2, lr, losses)
    return train_log


def sentence_params_equal(a: EmbeddingModel, b: EmbeddingModel) -> bool:
    return a.params.equal(b.params, SENTENCE_PARAMS)

