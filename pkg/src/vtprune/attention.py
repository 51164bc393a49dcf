"""Toy transformer stack: multi-head attention, a ViT-like encoder and a
causal decoder over mixed visual/text sequences.

Blocks are attention + residual followed by a two-layer ReLU MLP + residual,
with no normalisation. Sinusoidal position terms indexed by ``orig_pos`` are
added once, before the first layer, so pruned tokens keep their original
positions.
"""

from __future__ import annotations

import dataclasses
import enum
import functools
import math
from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import LayoutError, ShapeError
from .linalg import DTYPE, as_matrix, make_rng, matmul, rand_matrix


class Modality(enum.IntEnum):
    TEXT_PRE = 0
    VISUAL = 1
    TEXT_INSTR = 2
    CLS = 3


@dataclass(frozen=True, eq=False)
class TokenSequence:
    """Embeddings plus per-token modality tags and original positions.

    ``sizes`` counts how many original tokens each row stands for; it is
    ``None`` until a merge has happened.
    """

    embeddings: np.ndarray
    modality: np.ndarray
    orig_pos: np.ndarray
    grid_shape: tuple[int, int] | None = None
    sizes: np.ndarray | None = None

    def __post_init__(self):
        emb = as_matrix(self.embeddings)
        mod = np.asarray(self.modality, dtype=np.int8)
        pos = np.asarray(self.orig_pos, dtype=np.int64)
        object.__setattr__(self, "embeddings", emb)
        object.__setattr__(self, "modality", mod)
        object.__setattr__(self, "orig_pos", pos)
        if self.sizes is not None:
            object.__setattr__(self, "sizes", np.asarray(self.sizes, dtype=np.float64))
        n = emb.shape[0]
        if mod.shape != (n,) or pos.shape != (n,):
            raise ShapeError(
                f"modality/orig_pos lengths {mod.shape}/{pos.shape} do not match {n} embeddings"
            )
        if self.sizes is not None and self.sizes.shape != (n,):
            raise ShapeError("sizes length does not match embeddings")
        if n > 1 and np.any(np.diff(pos) <= 0):
            raise LayoutError("orig_pos must be strictly increasing")

    def __len__(self):
        return self.embeddings.shape[0]

    @property
    def hidden(self):
        return self.embeddings.shape[1]

    def rows(self, modality):
        return np.flatnonzero(self.modality == modality)

    @property
    def visual_rows(self):
        return self.rows(Modality.VISUAL)

    @property
    def token_sizes(self):
        if self.sizes is None:
            return np.ones(len(self))
        return self.sizes

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    def take(self, rows):
        rows = np.asarray(rows, dtype=np.int64)
        return self.replace(
            embeddings=self.embeddings[rows],
            modality=self.modality[rows],
            orig_pos=self.orig_pos[rows],
            sizes=None if self.sizes is None else self.sizes[rows],
        )

    @classmethod
    def decoder_layout(cls, embeddings, n_pre, n_visual, n_instr, grid_shape=None):
        """Sequence laid out as [TextPre * n_pre, Visual * n_visual, TextInstr * n_instr]."""
        modality = np.concatenate([
            np.full(n_pre, Modality.TEXT_PRE),
            np.full(n_visual, Modality.VISUAL),
            np.full(n_instr, Modality.TEXT_INSTR),
        ]).astype(np.int8)
        return cls(embeddings, modality, np.arange(len(modality)), grid_shape)


def check_decoder_layout(seq):
    """Reject anything but [TextPre*, Visual*, TextInstr*]."""
    mod = seq.modality
    if np.any(mod == Modality.CLS):
        raise LayoutError("CLS tokens are not allowed in decoder sequences")
    if len(mod) > 1 and np.any(np.diff(mod.astype(np.int16)) < 0):
        raise LayoutError(
            "decoder sequences must be ordered TextPre*, Visual*, TextInstr*"
        )


@dataclass(frozen=True, eq=False)
class AttentionTensor:
    """Per-head attention weights ``(heads, queries, keys)`` and per-head key
    vectors ``(heads, keys, head_dim)`` captured from one layer."""

    weights: np.ndarray
    key_vectors: np.ndarray | None = None
    causal: bool = False

    @property
    def heads(self):
        return self.weights.shape[0]

    @property
    def shape(self):
        return self.weights.shape

    def concat_keys(self, rows=None):
        """Per-token key vectors with heads concatenated, optionally row-restricted."""
        if self.key_vectors is None:
            raise ShapeError("attention tensor carries no key vectors")
        kv = self.key_vectors if rows is None else self.key_vectors[:, rows, :]
        return np.ascontiguousarray(np.concatenate(list(kv), axis=1))


@dataclass(frozen=True)
class ModelConfig:
    hidden_dim: int = 64
    heads: int = 4
    encoder_layers: int = 4
    decoder_layers: int = 8
    has_cls: bool = True
    seed: int = 0
    mlp: bool = True
    positional: bool = True

    def __post_init__(self):
        if self.hidden_dim <= 0 or self.heads <= 0:
            raise ShapeError("hidden_dim and heads must be positive")
        if self.hidden_dim % self.heads:
            raise ShapeError(
                f"hidden_dim {self.hidden_dim} is not divisible by heads {self.heads}"
            )
        if self.encoder_layers < 0 or self.decoder_layers < 0:
            raise ShapeError("layer counts must be non-negative")

    @property
    def head_dim(self):
        return self.hidden_dim // self.heads


@dataclass(frozen=True, eq=False)
class LayerParams:
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    heads: int
    w1: np.ndarray | None = None
    w2: np.ndarray | None = None

    @property
    def hidden(self):
        return self.wq.shape[0]


def init_layer(rng, hidden, heads, mlp=True):
    # query/key gain is larger so that attention is visibly peaked at toy scale
    base = 1.0 / math.sqrt(hidden)
    wq = rand_matrix(rng, hidden, hidden, 3.0 * base)
    wk = rand_matrix(rng, hidden, hidden, 3.0 * base)
    wv = rand_matrix(rng, hidden, hidden, base)
    wo = rand_matrix(rng, hidden, hidden, base)
    w1 = w2 = None
    if mlp:
        w1 = rand_matrix(rng, hidden, 2 * hidden, base)
        w2 = rand_matrix(rng, 2 * hidden, hidden, 0.5 * base)
    return LayerParams(wq, wk, wv, wo, heads, w1, w2)


@dataclass(frozen=True, eq=False)
class ToyModel:
    cfg: ModelConfig
    encoder: tuple
    decoder: tuple
    cls_embedding: np.ndarray
    projector: np.ndarray

    def project(self, x):
        """Map encoder outputs into the decoder input space."""
        return matmul(x, self.projector)


def _build(cfg):
    rng = make_rng(cfg.seed)
    d = cfg.hidden_dim
    encoder = tuple(init_layer(rng, d, cfg.heads, cfg.mlp) for _ in range(cfg.encoder_layers))
    decoder = tuple(init_layer(rng, d, cfg.heads, cfg.mlp) for _ in range(cfg.decoder_layers))
    cls_embedding = rand_matrix(rng, 1, d, 1.0)
    projector = rand_matrix(rng, d, d, math.sqrt(3.0 / d))
    return ToyModel(cfg, encoder, decoder, cls_embedding, projector)


_build_cached = functools.lru_cache(maxsize=16)(_build)


def build_model(cfg):
    """Seeded weights for ``cfg``; identical configs share one immutable model."""
    return _build_cached(cfg)


def sinusoidal_positions(positions, hidden):
    pos = np.asarray(positions, dtype=np.float64)[:, None]
    i = np.arange(hidden)[None, :]
    rate = 1.0 / np.power(10000.0, (2 * (i // 2)) / hidden)
    ang = pos * rate
    return np.where(i % 2 == 0, np.sin(ang), np.cos(ang)).astype(DTYPE)


def attention_layer(seq, params, causal):
    """One block: multi-head attention + residual, then MLP + residual.

    Returns the updated sequence and the layer's AttentionTensor, including
    per-head key vectors.
    """
    x = seq.embeddings
    if len(seq) == 0:
        raise ShapeError("attention over an empty sequence")
    if x.shape[1] != params.hidden:
        raise ShapeError(f"hidden size {x.shape[1]} does not match layer size {params.hidden}")
    h = params.heads
    d = params.hidden // h
    q, k, v = matmul(x, params.wq), matmul(x, params.wk), matmul(x, params.wv)
    scale = 1.0 / math.sqrt(d)
    weights = np.empty((h, len(seq), len(seq)), dtype=DTYPE)
    keys = np.empty((h, len(seq), d), dtype=DTYPE)
    mixed = np.empty_like(x)
    for head in range(h):
        cols = slice(head * d, (head + 1) * d)
        qh = np.ascontiguousarray(q[:, cols])
        kh = np.ascontiguousarray(k[:, cols])
        vh = np.ascontiguousarray(v[:, cols])
        weights[head], mixed[:, cols] = kernels.attention_head(qh, kh, vh, scale, bool(causal))
        keys[head] = kh
    out = x + matmul(mixed, params.wo)
    if params.w1 is not None:
        hidden = np.maximum(matmul(out, params.w1), DTYPE(0))
        out = out + matmul(hidden, params.w2)
    return seq.replace(embeddings=out), AttentionTensor(weights, keys, bool(causal))


def encoder_forward(image_tokens, cfg, model=None):
    """Bidirectional encoder pass; prepends a CLS token when ``cfg.has_cls``.

    The CLS token sits at row 0 with ``orig_pos == -1``.
    """
    model = model or build_model(cfg)
    if np.any(image_tokens.modality != Modality.VISUAL):
        raise LayoutError("encoder input must contain only Visual tokens")
    seq = image_tokens
    if cfg.positional:
        seq = seq.replace(
            embeddings=seq.embeddings + sinusoidal_positions(seq.orig_pos, cfg.hidden_dim)
        )
    if cfg.has_cls:
        seq = TokenSequence(
            np.vstack([model.cls_embedding, seq.embeddings]),
            np.concatenate([[Modality.CLS], seq.modality]),
            np.concatenate([[-1], seq.orig_pos]),
            seq.grid_shape,
        )
    tensors = []
    for params in model.encoder:
        seq, attn = attention_layer(seq, params, causal=False)
        tensors.append(attn)
    return seq, tensors


def decoder_forward(seq, cfg, upto_layer=None, start_layer=0, model=None):
    """Causal decoder pass over layers ``start_layer+1 .. upto_layer``.

    ``start_layer`` is the number of layers already applied to ``seq``;
    position terms are added only when starting from layer 0, so a staged
    run (stop at layer m, resume with ``start_layer=m``) is identical to a
    single pass.
    """
    model = model or build_model(cfg)
    check_decoder_layout(seq)
    stop = cfg.decoder_layers if upto_layer is None else upto_layer
    if not 0 <= start_layer <= stop <= cfg.decoder_layers:
        raise ShapeError(
            f"layer range {start_layer}..{stop} outside 0..{cfg.decoder_layers}"
        )
    if stop == start_layer:
        return seq, []
    if start_layer == 0 and cfg.positional:
        seq = seq.replace(
            embeddings=seq.embeddings + sinusoidal_positions(seq.orig_pos, cfg.hidden_dim)
        )
    tensors = []
    for params in model.decoder[start_layer:stop]:
        seq, attn = attention_layer(seq, params, causal=True)
        tensors.append(attn)
    return seq, tensors
