"""Projections into the joint space and the GRU sentence encoder.

Parameter names inside :class:`EmbeddingModel.params`::

    W_image     D x V       image feature -> joint space
    W_tag       D x T       mean tag word vector -> joint space
    W_sentence  D x D_h     final GRU state -> joint space
    word_table  n_vocab x D_w   row 0 is the shared unknown-token vector
    gru.W_z, gru.W_r, gru.W_h   D_h x D_w
    gru.U_z, gru.U_r, gru.U_h   D_h x D_h
    gru.b_z, gru.b_r, gru.b_h   D_h

GRU update (stored in every checkpoint header as ``gru_convention``)::

    z  = sigmoid(W_z x + U_z h + b_z)
    r  = sigmoid(W_r x + U_r h + b_r)
    hc = tanh(W_h x + U_h (r * h) + b_h)
    h' = (1 - z) * h + z * hc
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import EmptyInputError, FormatError, IntegrityError, ShapeError
from .numerics import ParameterSet, as_vector, matvec, normalize_rows

GRU_CONVENTION = "z=sig(Wz x+Uz h+bz);r=sig(Wr x+Ur h+br);hc=tanh(Wh x+Uh(r*h)+bh);h'=(1-z)*h+z*hc"
UNK = "<unk>"
GRU_NAMES = tuple(f"gru.{k}" for k in ("W_z", "W_r", "W_h", "U_z", "U_r", "U_h", "b_z", "b_r", "b_h"))
SENTENCE_PARAMS = ("W_sentence", "word_table") + GRU_NAMES
MAGIC = b"WEBVSE-CKPT 1\n"


def sigmoid(x):
    # split form avoids overflow warnings for large |x|
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


@dataclass
class GruCellParams:
    W_z: np.ndarray
    W_r: np.ndarray
    W_h: np.ndarray
    U_z: np.ndarray
    U_r: np.ndarray
    U_h: np.ndarray
    b_z: np.ndarray
    b_r: np.ndarray
    b_h: np.ndarray

    @classmethod
    def from_params(cls, params: ParameterSet) -> "GruCellParams":
        return cls(**{n.split(".", 1)[1]: params[n] for n in GRU_NAMES})

    @property
    def input_dim(self) -> int:
        return self.W_z.shape[1]

    @property
    def hidden_dim(self) -> int:
        return self.W_z.shape[0]


def gru_step(p: GruCellParams, h, x) -> np.ndarray:
    h = as_vector(h)
    x = as_vector(x)
    if h.shape[0] != p.hidden_dim or x.shape[0] != p.input_dim:
        raise ShapeError(
            f"gru_step expects h of dim {p.hidden_dim} and x of dim {p.input_dim}, "
            f"got {h.shape[0]} and {x.shape[0]}"
        )
    z = sigmoid(p.W_z @ x + p.U_z @ h + p.b_z)
    r = sigmoid(p.W_r @ x + p.U_r @ h + p.b_r)
    hc = np.tanh(p.W_h @ x + p.U_h @ (r * h) + p.b_h)
    return (1.0 - z) * h + z * hc


class EmbeddingModel:
    """All trainable parameters plus the token vocabulary."""

    def __init__(self, params: ParameterSet, vocab: Sequence[str], seed: int | None = None):
        self.params = params
        self.vocab = list(vocab)
        if not self.vocab or self.vocab[0] != UNK:
            raise ShapeError(f"vocabulary must start with {UNK!r}")
        self.token_index = {tok: i for i, tok in enumerate(self.vocab)}
        self.seed = seed
        self._validate()

    @property
    def embed_dim(self) -> int:
        return self.params["W_image"].shape[0]

    @property
    def image_dim(self) -> int:
        return self.params["W_image"].shape[1]

    @property
    def tag_dim(self) -> int:
        return self.params["W_tag"].shape[1]

    @property
    def hidden_dim(self) -> int:
        return self.params["W_sentence"].shape[1]

    @property
    def word_dim(self) -> int:
        return self.params["word_table"].shape[1]

    @property
    def gru(self) -> GruCellParams:
        return GruCellParams.from_params(self.params)

    def _validate(self):
        p = self.params
        D, Dh, Dw = self.embed_dim, self.hidden_dim, self.word_dim
        expected = {
            "W_tag": (D, self.tag_dim),
            "W_sentence": (D, Dh),
            "word_table": (len(self.vocab), Dw),
        }
        for g in ("z", "r", "h"):
            expected[f"gru.W_{g}"] = (Dh, Dw)
            expected[f"gru.U_{g}"] = (Dh, Dh)
            expected[f"gru.b_{g}"] = (Dh,)
        for name, shape in expected.items():
            if name not in p or p[name].shape != shape:
                got = p[name].shape if name in p else None
                raise ShapeError(f"parameter {name}: expected shape {shape}, got {got}")

    def copy(self) -> "EmbeddingModel":
        return EmbeddingModel(self.params.copy(), self.vocab, self.seed)

    def token_ids(self, tokens: Sequence) -> np.ndarray:
        """Map tokens (strings, or already-resolved ints) to row ids; unknowns -> 0."""
        if len(tokens) == 0:
            raise EmptyInputError("token sequence is empty")
        out = np.empty(len(tokens), dtype=np.intp)
        n = len(self.vocab)
        for k, tok in enumerate(tokens):
            if isinstance(tok, (int, np.integer)):
                out[k] = tok if 0 <= tok < n else 0
            else:
                out[k] = self.token_index.get(tok, 0)
        return out

    def header(self) -> dict:
        return {
            "D": self.embed_dim,
            "D_h": self.hidden_dim,
            "V": self.image_dim,
            "word_dim": self.word_dim,
            "tag_dim": self.tag_dim,
            "gru_convention": GRU_CONVENTION,
            # joint-space vectors are stored raw; cosine normalizes at scoring time
            "normalized": False,
            "seed": self.seed,
            "vocab": self.vocab,
        }


def init_model(
    image_dim: int,
    tag_dim: int,
    vocab: Sequence[str],
    embed_dim: int = 1024,
    hidden_dim: int = 1024,
    word_dim: int = 300,
    seed: int = 0,
    word_vectors: Mapping[str, np.ndarray] | None = None,
) -> EmbeddingModel:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases.

    ``vocab`` excludes the unknown token, which is prepended. Rows of the word
    table whose token has a pretrained vector are initialized from it.
    """
    rng = np.random.default_rng(seed)
    vocab = [UNK] + sorted(set(vocab) - {UNK})

    def uni(shape, fan_in):
        bound = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=shape)

    ps = ParameterSet()
    ps.add("W_image", uni((embed_dim, image_dim), image_dim))
    ps.add("W_tag", uni((embed_dim, tag_dim), tag_dim))
    ps.add("W_sentence", uni((embed_dim, hidden_dim), hidden_dim))
    table = uni((len(vocab), word_dim), word_dim)
    if word_vectors:
        for i, tok in enumerate(vocab):
            vec = word_vectors.get(tok)
            if vec is not None:
                if len(vec) != word_dim:
                    raise ShapeError(f"word vector for {tok!r} has dim {len(vec)}, expected {word_dim}")
                table[i] = vec
    ps.add("word_table", table)
    for g in ("z", "r", "h"):
        ps.add(f"gru.W_{g}", uni((hidden_dim, word_dim), word_dim))
    for g in ("z", "r", "h"):
        ps.add(f"gru.U_{g}", uni((hidden_dim, hidden_dim), hidden_dim))
    for g in ("z", "r", "h"):
        ps.add(f"gru.b_{g}", np.zeros(hidden_dim))
    return EmbeddingModel(ps, vocab, seed)


# single-item encoders -------------------------------------------------------


def encode_image(model: EmbeddingModel, feat) -> np.ndarray:
    return matvec(model.params["W_image"], feat)


def encode_tags(model: EmbeddingModel, tag_vectors: Sequence) -> np.ndarray:
    if len(tag_vectors) == 0:
        raise EmptyInputError("tag list is empty")
    vecs = np.array([as_vector(v) for v in tag_vectors])
    return matvec(model.params["W_tag"], mean_tag_vector(vecs))


def mean_tag_vector(vecs) -> np.ndarray:
    vecs = np.asarray(vecs, dtype=np.float64)
    # fixed-order accumulation keeps the mean bitwise reproducible
    total = np.zeros(vecs.shape[1])
    for v in vecs:
        total = total + v
    return total / vecs.shape[0]


def sentence_state(model: EmbeddingModel, tokens: Sequence) -> np.ndarray:
    """Final GRU hidden state for one sentence, starting from h = 0."""
    ids = model.token_ids(tokens)
    p = model.gru
    h = np.zeros(model.hidden_dim)
    table = model.params["word_table"]
    for i in ids:
        h = gru_step(p, h, table[i])
    return h


def encode_sentence(model: EmbeddingModel, tokens: Sequence) -> np.ndarray:
    return model.params["W_sentence"] @ sentence_state(model, tokens)


# batched forward / backward -------------------------------------------------


def pad_tokens(model: EmbeddingModel, batch: Sequence[Sequence]) -> tuple[np.ndarray, np.ndarray]:
    if len(batch) == 0:
        raise EmptyInputError("empty sentence batch")
    seqs = [model.token_ids(toks) for toks in batch]
    L = max(len(s) for s in seqs)
    ids = np.zeros((len(seqs), L), dtype=np.intp)
    mask = np.zeros((len(seqs), L), dtype=bool)
    for k, s in enumerate(seqs):
        ids[k, : len(s)] = s
        mask[k, : len(s)] = True
    return ids, mask


@dataclass
class SentenceCache:
    ids: np.ndarray
    mask: np.ndarray
    xs: list
    hs: list  # hidden state entering step t
    zs: list
    rs: list
    hcs: list
    final: np.ndarray


def sentence_forward(model: EmbeddingModel, batch: Sequence[Sequence]) -> tuple[np.ndarray, SentenceCache]:
    """Embed a batch of variable-length sentences; shorter rows hold their last state."""
    ids, mask = pad_tokens(model, batch)
    p = model.params
    Wz, Wr, Wh = p["gru.W_z"], p["gru.W_r"], p["gru.W_h"]
    Uz, Ur, Uh = p["gru.U_z"], p["gru.U_r"], p["gru.U_h"]
    bz, br, bh = p["gru.b_z"], p["gru.b_r"], p["gru.b_h"]
    table = p["word_table"]
    H = np.zeros((ids.shape[0], model.hidden_dim))
    cache = SentenceCache(ids, mask, [], [], [], [], [], H)
    for t in range(ids.shape[1]):
        X = table[ids[:, t]]
        z = sigmoid(X @ Wz.T + H @ Uz.T + bz)
        r = sigmoid(X @ Wr.T + H @ Ur.T + br)
        hc = np.tanh(X @ Wh.T + (r * H) @ Uh.T + bh)
        Hn = (1.0 - z) * H + z * hc
        cache.xs.append(X)
        cache.hs.append(H)
        cache.zs.append(z)
        cache.rs.append(r)
        cache.hcs.append(hc)
        H = np.where(mask[:, t, None], Hn, H)
    cache.final = H
    return H @ p["W_sentence"].T, cache


def sentence_backward(model: EmbeddingModel, cache: SentenceCache, d_out: np.ndarray) -> None:
    """Accumulate gradients of the sentence pipeline into ``model.params.grads``."""
    p, g = model.params.values, model.params.grads
    g["W_sentence"] += d_out.T @ cache.final
    dH = d_out @ p["W_sentence"]
    for t in reversed(range(cache.ids.shape[1])):
        m = cache.mask[:, t, None]
        X, H, z, r, hc = cache.xs[t], cache.hs[t], cache.zs[t], cache.rs[t], cache.hcs[t]
        dHn = np.where(m, dH, 0.0)
        dH_prev = np.where(m, 0.0, dH) + dHn * (1.0 - z)

        da_h = dHn * z * (1.0 - hc * hc)
        da_z = dHn * (hc - H) * z * (1.0 - z)
        d_rH = da_h @ p["gru.U_h"]
        da_r = d_rH * H * r * (1.0 - r)

        g["gru.W_h"] += da_h.T @ X
        g["gru.U_h"] += da_h.T @ (r * H)
        g["gru.b_h"] += da_h.sum(axis=0)
        g["gru.W_z"] += da_z.T @ X
        g["gru.U_z"] += da_z.T @ H
        g["gru.b_z"] += da_z.sum(axis=0)
        g["gru.W_r"] += da_r.T @ X
        g["gru.U_r"] += da_r.T @ H
        g["gru.b_r"] += da_r.sum(axis=0)

        dH_prev += d_rH * r + da_z @ p["gru.U_z"] + da_r @ p["gru.U_r"]
        dX = da_h @ p["gru.W_h"] + da_z @ p["gru.W_z"] + da_r @ p["gru.W_r"]
        rows = cache.mask[:, t]
        np.add.at(g["word_table"], cache.ids[rows, t], dX[rows])
        dH = dH_prev


def embed_images(model: EmbeddingModel, feats, normalized: bool = False) -> np.ndarray:
    feats = np.atleast_2d(np.asarray(feats, dtype=np.float64))
    if feats.shape[1] != model.image_dim:
        raise ShapeError(f"image features have dim {feats.shape[1]}, model expects {model.image_dim}")
    out = feats @ model.params["W_image"].T
    return normalize_rows(out) if normalized else out


def embed_tag_means(model: EmbeddingModel, tag_means, normalized: bool = False) -> np.ndarray:
    tag_means = np.atleast_2d(np.asarray(tag_means, dtype=np.float64))
    if tag_means.shape[1] != model.tag_dim:
        raise ShapeError(f"tag vectors have dim {tag_means.shape[1]}, model expects {model.tag_dim}")
    out = tag_means @ model.params["W_tag"].T
    return normalize_rows(out) if normalized else out


def embed_sentences(model: EmbeddingModel, batch: Sequence[Sequence], normalized: bool = False,
                    chunk: int = 512) -> np.ndarray:
    parts = [sentence_forward(model, batch[i : i + chunk])[0] for i in range(0, len(batch), chunk)]
    out = np.concatenate(parts, axis=0)
    return normalize_rows(out) if normalized else out


# checkpoints ----------------------------------------------------------------
#
# Layout: MAGIC, then a little-endian u64 header length, then the UTF-8 JSON
# header (sorted keys), then each parameter's raw little-endian float64 bytes
# in header order. The header lists {"name", "shape"} per parameter.


def save_checkpoint(model: EmbeddingModel, path, extra: dict | None = None) -> None:
    header = model.header()
    header["params"] = [{"name": n, "shape": list(model.params[n].shape)} for n in model.params.names()]
    if extra:
        header["extra"] = extra
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for n in model.params.names():
            fh.write(np.ascontiguousarray(model.params[n], dtype="<f8").tobytes())


def read_checkpoint_header(path) -> dict:
    with open(path, "rb") as fh:
        return _read_header(fh, path)


def _read_header(fh, path) -> dict:
    if fh.read(len(MAGIC)) != MAGIC:
        raise FormatError(f"{path}: not a checkpoint file")
    (n,) = struct.unpack("<Q", fh.read(8))
    return json.loads(fh.read(n).decode("utf-8"))


def load_checkpoint(path) -> EmbeddingModel:
    path = Path(path)
    if not path.exists():
        raise IntegrityError(f"checkpoint {path} does not exist")
    with open(path, "rb") as fh:
        header = _read_header(fh, path)
        if header.get("gru_convention") != GRU_CONVENTION:
            raise FormatError(f"{path}: unsupported GRU convention {header.get('gru_convention')!r}")
        ps = ParameterSet()
        for spec in header["params"]:
            shape = tuple(spec["shape"])
            count = int(np.prod(shape))
            raw = fh.read(8 * count)
            if len(raw) != 8 * count:
                raise FormatError(f"{path}: truncated data for {spec['name']}")
            ps.add(spec["name"], np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape))
        if fh.read(1):
            raise FormatError(f"{path}: trailing bytes after parameter data")
    return EmbeddingModel(ps, header["vocab"], header.get("seed"))
