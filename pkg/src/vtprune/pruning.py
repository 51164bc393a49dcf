"""Dominant-token selection, contextual merging and stage budgets.

Indices handled here are *local*: positions within the score vector, which
follows the visual tokens' original order. Ties always go to the lower
local index.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import kernels
from .attention import Modality
from .errors import BudgetError, MergeError, ScheduleError
from .linalg import DTYPE


def _values(scores):
    return np.asarray(getattr(scores, "scores", scores), dtype=np.float64)


def _rank(values, pool):
    """``pool`` ordered by descending score, lower index first on ties."""
    pool = np.asarray(pool, dtype=np.int64)
    order = np.argsort(-values[pool], kind="stable")
    return pool[order]


def select_dominant(scores, k):
    """Indices of the ``k`` highest scores, returned in ascending order.

    The threshold is the k-th largest score, so every selected score is at
    least every rejected one.
    """
    s = _values(scores)
    if not 1 <= k <= len(s):
        raise BudgetError(f"k={k} outside 1..{len(s)}")
    return np.sort(_rank(s, np.arange(len(s)))[:k])


def partition_non_dominant(scores, non_dominant, n_refs, mode="score"):
    """Split non-dominant tokens into (references, candidates).

    ``mode="score"`` keeps the highest-scored tokens as references;
    ``mode="spaced"`` picks references evenly by position instead.
    """
    s = _values(scores)
    pool = np.sort(np.asarray(non_dominant, dtype=np.int64))
    if not 1 <= n_refs <= len(pool):
        raise BudgetError(f"n_refs={n_refs} outside 1..{len(pool)}")
    if mode == "score":
        refs = np.sort(_rank(s, pool)[:n_refs])
    elif mode == "spaced":
        refs = pool[(np.arange(n_refs) * len(pool)) // n_refs]
    else:
        raise ValueError(f"unknown partition mode {mode!r}")
    cands = np.setdiff1d(pool, refs)
    return refs, cands


def match_candidates(references, candidates, keys):
    """Assign each candidate to the reference with the largest key dot product.

    Returns, per candidate, the local index of its reference. ``keys`` rows
    are indexed by local token index.
    """
    refs = np.asarray(references, dtype=np.int64)
    cands = np.asarray(candidates, dtype=np.int64)
    if len(cands) == 0:
        return np.zeros(0, dtype=np.int64)
    if len(refs) == 0:
        raise MergeError("candidates present but the reference set is empty")
    keys = np.asarray(keys, dtype=DTYPE)
    best = kernels.dot_argmax(
        np.ascontiguousarray(keys[cands]), np.ascontiguousarray(keys[refs])
    )
    return refs[best]


@dataclass(frozen=True, eq=False)
class MergePlan:
    dominant: np.ndarray
    references: np.ndarray
    candidates: np.ndarray
    assignment: np.ndarray

    def validate(self, n_tokens):
        parts = [self.dominant, self.references, self.candidates]
        joined = np.concatenate(parts)
        if len(np.unique(joined)) != len(joined):
            raise MergeError("dominant, reference and candidate sets overlap")
        if not np.array_equal(np.sort(joined), np.arange(n_tokens)):
            raise MergeError(f"plan does not cover all {n_tokens} tokens")
        if len(self.assignment) != len(self.candidates):
            raise MergeError("every candidate needs exactly one reference")
        if not np.isin(self.assignment, self.references).all():
            raise MergeError("candidate assigned to a non-reference token")


def fuse(plan, embeddings, weights=None):
    """Merge each reference with its assigned candidates.

    Returns ``(merged, keep, counts)``: merged embeddings for the kept local
    indices ``keep`` (dominant and references, ascending) and how many input
    tokens each output row absorbed. Merged rows are the unweighted mean of
    their members, or the ``weights``-weighted mean when given. Dominant rows
    pass through untouched.
    """
    emb = np.asarray(embeddings, dtype=DTYPE)
    plan.validate(emb.shape[0])
    keep = np.sort(np.concatenate([plan.dominant, plan.references]))
    slot = np.full(emb.shape[0], -1, dtype=np.int64)
    slot[keep] = np.arange(len(keep))
    counts = np.ones(len(keep), dtype=np.int64)
    merged = emb[keep].copy()
    if len(plan.candidates) == 0:
        return merged, keep, counts

    w = np.ones(emb.shape[0]) if weights is None else np.asarray(weights, dtype=np.float64)
    owner = slot.copy()
    owner[plan.candidates] = slot[plan.assignment]
    members = np.concatenate([plan.references, plan.candidates])
    acc = np.zeros((len(keep), emb.shape[1]))
    mass = np.zeros(len(keep))
    np.add.at(acc, owner[members], emb[members].astype(np.float64) * w[members, None])
    np.add.at(mass, owner[members], w[members])
    np.add.at(counts, owner[plan.candidates], 1)
    ref_slots = slot[plan.references]
    merged[ref_slots] = (acc[ref_slots] / mass[ref_slots, None]).astype(DTYPE)
    return merged, keep, counts


@dataclass(frozen=True, order=True)
class StageBoundary:
    """End of a stage: ``layer == 0`` is the encoder output, otherwise the
    1-based decoder layer after which the stage ends."""

    layer: int

    @classmethod
    def encoder_output(cls):
        return cls(0)

    @property
    def is_encoder(self):
        return self.layer == 0

    def __str__(self):
        return "encoder" if self.is_encoder else f"decoder:{self.layer}"

    @classmethod
    def parse(cls, text):
        text = str(text).strip()
        if text == "encoder":
            return cls(0)
        if text.startswith("decoder:"):
            text = text.split(":", 1)[1]
        return cls(int(text))


def default_boundaries(stages, decoder_layers):
    """Encoder output plus ``stages - 1`` evenly spaced decoder layers."""
    if stages < 3:
        raise ScheduleError("need at least 3 stages (encoder output + 2 decoder points)")
    if decoder_layers < stages - 1:
        raise ScheduleError(f"{decoder_layers} decoder layers cannot host {stages - 1} boundaries")
    layers = [round(j * decoder_layers / (stages - 1)) for j in range(1, stages)]
    return [StageBoundary(0)] + [StageBoundary(x) for x in layers]


@dataclass(frozen=True)
class PruneSchedule:
    stages: tuple
    initial_count: int
    final_budget: int

    def __post_init__(self):
        stages = tuple((StageBoundary(b.layer), int(n)) for b, n in self.stages)
        object.__setattr__(self, "stages", stages)
        if not stages:
            raise ScheduleError("schedule has no stages")
        bounds = [b.layer for b, _ in stages]
        budgets = [n for _, n in stages]
        if not stages[0][0].is_encoder:
            raise ScheduleError("the first stage must end at the encoder output")
        if any(b <= a for a, b in zip(bounds, bounds[1:])):
            raise ScheduleError(f"stage boundaries must be strictly increasing: {bounds}")
        if budgets[0] != self.initial_count:
            raise ScheduleError("the first stage must keep every visual token")
        if any(b > a for a, b in zip(budgets, budgets[1:])):
            raise ScheduleError(f"budgets must be non-increasing: {budgets}")
        if budgets[-1] != self.final_budget:
            raise ScheduleError("the last budget must equal final_budget")
        if min(budgets) < 1:
            raise ScheduleError("budgets must be positive")

    @property
    def budgets(self):
        return [n for _, n in self.stages]

    @property
    def boundaries(self):
        return [b for b, _ in self.stages]

    @classmethod
    def identity(cls, initial_count, boundaries):
        return cls(tuple((b, initial_count) for b in boundaries), initial_count, initial_count)


def _ceil(x):
    # absorbs float noise such as 220.00000000000003
    return math.ceil(round(x, 9))


def build_schedule(initial_count, final_budget, boundaries, decay="geometric"):
    """Stage budgets: keep everything through the encoder, 1.5x the final
    budget at stage 2, then decay to ``final_budget``.

    ``decay="geometric"`` applies a constant per-stage retention ratio;
    ``decay="linear"`` steps down by a constant count.
    """
    boundaries = [b if isinstance(b, StageBoundary) else StageBoundary.parse(b) for b in boundaries]
    if final_budget >= initial_count:
        raise ScheduleError(f"final_budget {final_budget} must be below initial_count {initial_count}")
    if final_budget < 1:
        raise ScheduleError("final_budget must be positive")
    n = len(boundaries)
    if n < 3:
        raise ScheduleError("need at least 3 boundaries (encoder output + 2 decoder points)")
    second = min(initial_count, _ceil(1.5 * final_budget))
    budgets = [initial_count, second]
    steps = n - 2
    for j in range(1, steps):
        if decay == "geometric":
            b = second * (final_budget / second) ** (j / steps)
        elif decay == "linear":
            b = second + (final_budget - second) * j / steps
        else:
            raise ValueError(f"unknown decay {decay!r}")
        budgets.append(min(budgets[-1], _ceil(b)))
    budgets.append(final_budget)
    return PruneSchedule(tuple(zip(boundaries, budgets)), initial_count, final_budget)


def _dominant_count(budget, dom_ratio):
    return min(budget, _ceil(dom_ratio * budget))


def split_budget(scores, budget, dom_ratio=0.875, partition="score"):
    """(dominant, references, candidates) local indices for one prune step.

    Dominant and references are exactly the tokens that survive; candidates
    are folded into references. With no contextual slots the non-dominant
    tokens are returned as candidates-to-drop and references is empty.
    """
    n = len(_values(scores))
    if not 1 <= budget <= n:
        raise BudgetError(f"budget {budget} outside 1..{n}")
    if not 0 < dom_ratio <= 1:
        raise BudgetError(f"dom_ratio {dom_ratio} outside (0, 1]")
    k_dom = _dominant_count(budget, dom_ratio)
    dominant = select_dominant(scores, k_dom)
    rest = np.setdiff1d(np.arange(n), dominant)
    n_refs = budget - k_dom
    if n_refs == 0:
        return dominant, np.zeros(0, dtype=np.int64), rest
    refs, cands = partition_non_dominant(scores, rest, n_refs, partition)
    return dominant, refs, cands


def merge_plan(scores, budget, keys, dom_ratio=0.875, partition="score"):
    """Full MergePlan; requires ``budget - ceil(dom_ratio * budget) >= 1``."""
    dominant, refs, cands = split_budget(scores, budget, dom_ratio, partition)
    if len(refs) == 0:
        raise MergeError("no contextual slots: the budget is all dominant tokens")
    if len(cands) and keys is None:
        raise MergeError("key vectors are required to match candidates")
    return MergePlan(dominant, refs, cands, match_candidates(refs, cands, keys))


def prune_stage(seq, scores, budget, keys, dom_ratio=0.875, partition="score", weighted=False):
    """Reduce the scored visual tokens of ``seq`` to exactly ``budget``.

    ``scores.visual_indices`` are the rows of the visual tokens in ``seq``;
    ``keys`` holds one key vector per scored token in the same order.
    Dominant tokens are kept, the remaining slots are references that absorb
    their matched candidates. Non-visual rows are untouched.
    """
    vis = np.asarray(scores.visual_indices, dtype=np.int64)
    if np.any(seq.modality[vis] != Modality.VISUAL):
        raise BudgetError("scores refer to non-visual rows")
    n = len(vis)
    if budget > n:
        raise BudgetError(f"budget {budget} exceeds the current visual count {n}")
    if budget == n:
        return seq
    sizes = seq.token_sizes[vis]
    dominant, refs, _ = split_budget(scores, budget, dom_ratio, partition)
    if len(refs) == 0:
        keep = dominant
        merged = seq.embeddings[vis[keep]]
        new_sizes = sizes[keep]
    else:
        plan = merge_plan(scores, budget, keys, dom_ratio, partition)
        merged, keep, _ = fuse(plan, seq.embeddings[vis], sizes if weighted else None)
        new_sizes = sizes[keep].copy()
        np.add.at(new_sizes, np.searchsorted(keep, plan.assignment), sizes[plan.candidates])

    other = np.setdiff1d(np.arange(len(seq)), vis)
    rows = np.concatenate([other, vis[keep]])
    order = np.argsort(seq.orig_pos[rows], kind="stable")
    emb = np.concatenate([seq.embeddings[other], merged])[order]
    all_sizes = np.concatenate([seq.token_sizes[other], new_sizes])[order]
    rows = rows[order]
    return seq.replace(
        embeddings=emb,
        modality=seq.modality[rows],
        orig_pos=seq.orig_pos[rows],
        sizes=all_sizes,
    )
