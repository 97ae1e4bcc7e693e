"""Randomized finite-difference checks of every loss and of the full model gradient.

Each check draws a small random instance (batch <= 6, joint dim <= 8), asks
``check_gradient`` to compare the analytic gradient with central differences,
and records the worst relative error per parameter. ``inject_fault`` flips the
sign of one parameter's analytic gradient so the checker can be seen to fail.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .encoders import EmbeddingModel, init_model
from .errors import ValidationError
from .losses import BatchEmbeddings, LossConfig, image_tag_loss, vse_loss, vsepp_loss
from .numerics import GradCheckResult, ParameterSet, check_gradient
from .trainer import pipeline_loss

KINDS = ("vse", "vsepp", "image_tag", "pipeline")
LOSS_FNS = {"vse": vse_loss, "vsepp": vsepp_loss, "image_tag": image_tag_loss}


@dataclass
class CheckRecord:
    kind: str
    trial: int
    result: GradCheckResult

    @property
    def passed(self) -> bool:
        return self.result.passed

    def line(self) -> str:
        status = "ok  " if self.passed else "FAIL"
        worst = max(self.result.max_rel_error, key=self.result.max_rel_error.get)
        skipped = sum(self.result.skipped.values())
        return (f"{status} {self.kind:<9} trial {self.trial:3d}  max rel err {self.result.overall:.2e} "
                f"({worst})  skipped {skipped}")


def _flip(params: ParameterSet, name: str | None) -> None:
    if name is not None and name in params.grads:
        params.grads[name] *= -1.0


def loss_instance(kind: str, rng: np.random.Generator, max_batch: int = 6, max_dim: int = 8):
    """(params, loss_fn, kink_fn) for a bare loss on random joint-space embeddings."""
    fn = LOSS_FNS[kind]
    n = int(rng.integers(2, max_batch + 1))
    d = int(rng.integers(2, max_dim + 1))
    cfg = LossConfig(margin=float(rng.uniform(0.1, 0.5)))
    params = ParameterSet()
    params.add("images", rng.standard_normal((n, d)))
    params.add("texts", rng.standard_normal((n, d)))

    def run(p):
        return fn(BatchEmbeddings(p["images"], p["texts"]), cfg)

    def loss_fn(p):
        out = run(p)
        p.grads["images"][...] = out.grad_images
        p.grads["texts"][...] = out.grad_texts
        return out.value

    return params, loss_fn, lambda p: run(p).switches


def pipeline_instance(rng: np.random.Generator, max_batch: int = 6, max_dim: int = 8,
                      loss_kind: str | None = None):
    """(params, loss_fn, kink_fn) for word table -> GRU -> projections -> combined loss."""
    n = int(rng.integers(2, max_batch + 1))
    D = int(rng.integers(2, max_dim + 1))
    image_dim = int(rng.integers(2, 6))
    word_dim = int(rng.integers(2, 5))
    hidden = int(rng.integers(2, 6))
    words = [f"w{k}" for k in range(int(rng.integers(3, 8)))]
    model = init_model(image_dim, word_dim, words, D, hidden, word_dim, seed=int(rng.integers(2**31)))
    # spread the weights past the init scale so the GRU gates are not all near 0.5
    for name in model.params.names():
        v = model.params.values[name]
        v[...] = v * 2.0 + 0.1 * rng.standard_normal(v.shape)
    vocab = model.vocab
    feats = rng.standard_normal((n, image_dim))
    tokens = [[vocab[int(i)] for i in rng.integers(0, len(vocab), size=int(rng.integers(1, 5)))]
              for _ in range(n)]
    tag_means = rng.standard_normal((n, word_dim))
    has_tags = rng.random(n) < 0.8
    has_tags[0] = True
    kind = loss_kind or ("VSEPP" if rng.random() < 0.5 else "VSE")
    cfg = LossConfig(margin=0.2)

    def run(p):
        p.zero_grad()
        return pipeline_loss(EmbeddingModel(p, vocab), feats, tokens, tag_means, has_tags, cfg, kind)

    def loss_fn(p):
        return run(p).value

    return model.params, loss_fn, lambda p: run(p).switches


def run_selfcheck(
    trials: int = 25,
    seed: int = 0,
    kinds=KINDS,
    inject_fault: str | None = None,
    tolerance: float = 1e-4,
    max_batch: int = 6,
    max_dim: int = 8,
) -> list[CheckRecord]:
    """Run ``trials`` random instances of each check kind."""
    unknown = [k for k in kinds if k not in KINDS]
    if unknown:
        raise ValidationError(f"unknown check kinds {unknown}")
    records = []
    for kind in kinds:
        for t in range(trials):
            rng = np.random.default_rng([seed, KINDS.index(kind), t])
            if kind == "pipeline":
                params, loss_fn, kink_fn = pipeline_instance(rng, max_batch, max_dim)
            else:
                params, loss_fn, kink_fn = loss_instance(kind, rng, max_batch, max_dim)
            if inject_fault is not None and inject_fault not in params.names():
                continue

            def faulty(p, f=loss_fn):
                value = f(p)
                _flip(p, inject_fault)
                return value

            result = check_gradient(faulty, params, tolerance=tolerance, kink_fn=kink_fn)
            records.append(CheckRecord(kind, t, result))
    if inject_fault is not None and not records:
        raise ValidationError(f"no check has a parameter named {inject_fault!r}")
    return records
