"""Per-visual-token importance scores read off attention tensors.

All strategies average attention over heads first and then restrict to
visual key columns. Weights come from the softmax over the full key set,
so the restricted mass of a row can be below one.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .errors import MissingIndexError, MissingInstructionError, ScoringError, ShapeError


class Strategy(str, enum.Enum):
    CLS_QUERY = "cls"
    MEAN_VISUAL_QUERY = "mean-visual"
    TEXT_GUIDED = "text"

    def __str__(self):
        return self.value


@dataclass(frozen=True, eq=False)
class ImportanceVector:
    scores: np.ndarray
    visual_indices: np.ndarray
    strategy: Strategy

    def __post_init__(self):
        s = np.asarray(self.scores, dtype=np.float64)
        v = np.asarray(self.visual_indices, dtype=np.int64)
        if s.shape != v.shape or s.ndim != 1:
            raise ShapeError(f"scores {s.shape} and visual_indices {v.shape} must be equal-length vectors")
        object.__setattr__(self, "scores", s)
        object.__setattr__(self, "visual_indices", v)
        object.__setattr__(self, "strategy", Strategy(self.strategy))

    def __len__(self):
        return len(self.scores)


def _indices(attn, visual_indices):
    v = np.asarray(visual_indices, dtype=np.int64)
    if v.size == 0:
        raise ScoringError("visual_indices is empty")
    n_keys = attn.weights.shape[2]
    if v.min() < 0 or v.max() >= n_keys:
        raise ShapeError(f"visual_indices outside 0..{n_keys - 1}")
    return v


def _query_row(attn, index, field):
    if index is None:
        raise MissingIndexError(field)
    if not 0 <= index < attn.weights.shape[1]:
        raise ShapeError(f"{field}={index} is not a query row of a {attn.weights.shape[1]}-query tensor")
    return int(index)


def score_mean_visual_query(attn, visual_indices, query_indices=None, renormalize=False):
    """Average attention each visual key receives from the visual queries.

    ``query_indices`` defaults to ``visual_indices``. With ``renormalize``
    each query row is rescaled to sum to one over the visual columns before
    averaging (ablation only).
    """
    v = _indices(attn, visual_indices)
    q = v if query_indices is None else np.asarray(query_indices, dtype=np.int64)
    if q.size == 0:
        raise ScoringError("no visual query rows")
    if q.min() < 0 or q.max() >= attn.weights.shape[1]:
        raise ShapeError("visual query rows missing from the attention tensor")
    block = attn.weights[:, q][:, :, v].astype(np.float64).mean(axis=0)
    if renormalize:
        block = block / block.sum(axis=1, keepdims=True)
    return ImportanceVector(block.mean(axis=0), v, Strategy.MEAN_VISUAL_QUERY)


def score_cls_query(attn, visual_indices, cls_index):
    """Head-mean attention from the CLS query to each visual key."""
    v = _indices(attn, visual_indices)
    row = _query_row(attn, cls_index, "cls_index")
    s = attn.weights[:, row, v].astype(np.float64).mean(axis=0)
    return ImportanceVector(s, v, Strategy.CLS_QUERY)


def score_text_guided(attn, visual_indices, instr_last_index):
    """Head-mean attention from the last instruction token to each visual key."""
    v = _indices(attn, visual_indices)
    if instr_last_index is None:
        raise MissingInstructionError()
    row = _query_row(attn, instr_last_index, "instr_last_index")
    if row <= v.max():
        raise ScoringError("instr_last_index must come after every visual token")
    s = attn.weights[:, row, v].astype(np.float64).mean(axis=0)
    return ImportanceVector(s, v, Strategy.TEXT_GUIDED)


def score(attn, strategy, visual_indices, cls_index=None, instr_last_index=None, renormalize=False):
    strategy = Strategy(strategy)
    if strategy is Strategy.CLS_QUERY:
        return score_cls_query(attn, visual_indices, cls_index)
    if strategy is Strategy.TEXT_GUIDED:
        return score_text_guided(attn, visual_indices, instr_last_index)
    return score_mean_visual_query(attn, visual_indices, renormalize=renormalize)
