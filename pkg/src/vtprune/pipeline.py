"""Stage-wise pruning over the toy encoder + decoder, the visual-only vs
text-guided comparison harness, and the attention compute model."""

from __future__ import annotations

import hashlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import spearmanr

from .attention import (
    Modality,
    TokenSequence,
    build_model,
    check_decoder_layout,
    decoder_forward,
    encoder_forward,
)
from .errors import MissingInstructionError, ScheduleError
from .pruning import PruneSchedule, prune_stage, split_budget
from .scoring import ImportanceVector, Strategy, score

COST_MODEL = "attention FLOPs per layer = 4*L*D^2 (q/k/v/o projections) + 2*L^2*D (scores + value mix)"


def flops_attention(seq_len, hidden, layers):
    """Attention-path FLOPs for ``layers`` layers at sequence length ``seq_len``."""
    if seq_len <= 0 or hidden <= 0 or layers <= 0:
        raise ValueError("seq_len, hidden and layers must be positive")
    L, D = int(seq_len), int(hidden)
    return float(layers * (4 * L * D * D + 2 * L * L * D))


def flops_mlp(seq_len, hidden, layers):
    """MLP line item, 8*L*D^2 per layer; excluded from the attention totals."""
    return float(layers * 8 * int(seq_len) * int(hidden) ** 2)


def total_flops(lengths, hidden):
    """Sum of per-layer attention FLOPs for a list of per-layer sequence lengths."""
    return sum(flops_attention(n, hidden, 1) for n in lengths)


def reduction_pct(baseline_lengths, pruned_lengths, hidden):
    base = total_flops(baseline_lengths, hidden)
    return 100.0 * (1.0 - total_flops(pruned_lengths, hidden) / base)


@dataclass(frozen=True, eq=False)
class StageRecord:
    boundary: object
    budget: int
    seq_len: int
    layers: int
    retained: tuple
    strategy: Strategy | None = None
    scores: tuple = ()


@dataclass(frozen=True, eq=False)
class RunReport:
    stages: tuple
    flops_baseline: float
    flops_pruned: float
    reduction_pct: float
    mlp_flops_baseline: float
    mlp_flops_pruned: float
    final_sequence_digest: str
    final_sequence: TokenSequence | None = field(default=None, repr=False)

    def to_text(self):
        lines = [
            "# vtprune run report",
            f"# {COST_MODEL}",
            "stage,boundary,budget,seq_len,layers,strategy,retained",
        ]
        for i, st in enumerate(self.stages, 1):
            retained = " ".join(str(p) for p in st.retained)
            lines.append(
                f"{i},{st.boundary},{st.budget},{st.seq_len},{st.layers},"
                f"{st.strategy or '-'},{retained}"
            )
        lines += [
            f"flops_baseline,{self.flops_baseline:.1f}",
            f"flops_pruned,{self.flops_pruned:.1f}",
            f"reduction_pct,{self.reduction_pct:.6f}",
            f"mlp_flops_baseline,{self.mlp_flops_baseline:.1f}",
            f"mlp_flops_pruned,{self.mlp_flops_pruned:.1f}",
            f"final_sequence_digest,{self.final_sequence_digest}",
        ]
        return "\n".join(lines) + "\n"


def sequence_digest(seq):
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(seq.embeddings, dtype="<f4").tobytes())
    h.update(np.ascontiguousarray(seq.modality, dtype="i1").tobytes())
    h.update(np.ascontiguousarray(seq.orig_pos, dtype="<i8").tobytes())
    return h.hexdigest()


def _check_schedule(cfg, schedule, inputs):
    bounds = schedule.boundaries
    if not bounds[0].is_encoder:
        raise ScheduleError("the first stage must end at the encoder output")
    if bounds[-1].layer != cfg.decoder_layers:
        raise ScheduleError(
            f"the last stage must end at decoder layer {cfg.decoder_layers}, got {bounds[-1]}"
        )
    n_visual = len(inputs.visual_rows)
    if schedule.initial_count != n_visual:
        raise ScheduleError(
            f"schedule expects {schedule.initial_count} visual tokens, input has {n_visual}"
        )


def prepare_decoder_input(inputs, cfg, model=None):
    """Encode the visual tokens and project them into the decoder sequence.

    Returns ``(decoder_sequence, encoder_attention_tensors, cls_row)`` where
    ``cls_row`` is the CLS query row in the encoder tensors, or None.
    """
    model = model or build_model(cfg)
    check_decoder_layout(inputs)
    vis = inputs.visual_rows
    image = inputs.take(vis).replace(orig_pos=np.arange(len(vis)))
    encoded, tensors = encoder_forward(image, cfg, model)
    cls_row = 0 if cfg.has_cls else None
    enc_vis = encoded.visual_rows
    emb = inputs.embeddings.copy()
    emb[vis] = model.project(encoded.embeddings[enc_vis])
    return inputs.replace(embeddings=emb), tensors, cls_row


def _instr_last(seq):
    instr = seq.rows(Modality.TEXT_INSTR)
    return int(instr[-1]) if len(instr) else None


def _decoder_scores(attn, seq, strategy, renormalize):
    vis = seq.visual_rows
    if strategy is Strategy.TEXT_GUIDED:
        return score(attn, strategy, vis, instr_last_index=_instr_last(seq))
    return score(attn, Strategy.MEAN_VISUAL_QUERY, vis, renormalize=renormalize)


def run_pipeline(cfg, schedule, strategy, inputs, dom_ratio=0.875, *, model=None,
                 partition="score", weighted=False, renormalize=False):
    """Run every stage, pruning at each boundary to the next stage's budget.

    The encoder stage is always scored visual-only (CLS query when the
    encoder has one, otherwise the mean visual query). Decoder stages use
    ``strategy``; the CLS strategy falls back to the mean visual query there
    because the decoder has no CLS token.
    """
    strategy = Strategy(strategy)
    model = model or build_model(cfg)
    _check_schedule(cfg, schedule, inputs)
    if strategy is Strategy.TEXT_GUIDED and _instr_last(inputs) is None:
        raise MissingInstructionError()

    seq, enc_tensors, cls_row = prepare_decoder_input(inputs, cfg, model)
    budgets = schedule.budgets
    bounds = schedule.boundaries
    n_enc_tokens = len(inputs.visual_rows) + (1 if cfg.has_cls else 0)
    records = []
    pruned_lengths = []

    # stage 1: the encoder keeps every visual token
    vis = seq.visual_rows
    if enc_tensors:
        last = enc_tensors[-1]
        enc_vis = np.arange(len(vis)) + (1 if cfg.has_cls else 0)
        if cls_row is not None:
            iv = score(last, Strategy.CLS_QUERY, enc_vis, cls_index=cls_row)
        else:
            iv = score(last, Strategy.MEAN_VISUAL_QUERY, enc_vis, renormalize=renormalize)
        keys = last.concat_keys(enc_vis)
    else:
        iv = ImportanceVector(np.full(len(vis), 1.0 / len(vis)), np.arange(len(vis)),
                              Strategy.MEAN_VISUAL_QUERY)
        keys = seq.embeddings[vis]
    records.append(StageRecord(bounds[0], len(vis), n_enc_tokens, cfg.encoder_layers,
                               tuple(int(p) for p in seq.orig_pos[vis]), iv.strategy,
                               tuple(float(s) for s in iv.scores)))
    iv = ImportanceVector(iv.scores, vis, iv.strategy)
    seq = _prune_to(seq, iv, budgets[1], keys, dom_ratio, partition, weighted)

    done = 0
    for j in range(1, len(bounds)):
        stop = bounds[j].layer
        seq, tensors = decoder_forward(seq, cfg, upto_layer=stop, start_layer=done, model=model)
        pruned_lengths += [len(seq)] * (stop - done)
        vis = seq.visual_rows
        positions = tuple(int(p) for p in seq.orig_pos[vis])
        if j + 1 < len(bounds) and tensors:
            iv = _decoder_scores(tensors[-1], seq, strategy, renormalize)
            records.append(StageRecord(bounds[j], len(vis), len(seq), stop - done, positions,
                                       iv.strategy, tuple(float(s) for s in iv.scores)))
            seq = _prune_to(seq, iv, budgets[j + 1], tensors[-1].concat_keys(vis),
                            dom_ratio, partition, weighted)
        else:
            records.append(StageRecord(bounds[j], len(vis), len(seq), stop - done, positions))
        done = stop

    hidden = cfg.hidden_dim
    enc_lengths = [n_enc_tokens] * cfg.encoder_layers
    base_lengths = enc_lengths + [len(inputs)] * cfg.decoder_layers
    all_pruned = enc_lengths + pruned_lengths
    base = total_flops(base_lengths, hidden)
    pruned = total_flops(all_pruned, hidden)
    return RunReport(
        stages=tuple(records),
        flops_baseline=base,
        flops_pruned=pruned,
        reduction_pct=100.0 * (1.0 - pruned / base) if base else 0.0,
        mlp_flops_baseline=sum(flops_mlp(n, hidden, 1) for n in base_lengths),
        mlp_flops_pruned=sum(flops_mlp(n, hidden, 1) for n in all_pruned),
        final_sequence_digest=sequence_digest(seq),
        final_sequence=seq,
    )


def _prune_to(seq, iv, budget, keys, dom_ratio, partition, weighted):
    if len(iv) <= budget:
        # degenerate input: fewer tokens than the budget is a no-op
        return seq
    return prune_stage(seq, iv, budget, keys, dom_ratio, partition, weighted)


@dataclass(frozen=True)
class CompareReport:
    per_stage_iou: tuple
    final_iou: float
    score_rank_correlation: tuple

    def to_text(self):
        lines = ["stage,iou,rank_correlation"]
        for i, v in enumerate(self.per_stage_iou):
            rho = self.score_rank_correlation[i] if i < len(self.score_rank_correlation) else None
            rho_txt = "-" if rho is None else f"{rho:.6f}"
            lines.append(f"{i + 1},{v:.6f},{rho_txt}")
        lines.append(f"final_iou,{self.final_iou:.6f}")
        return "\n".join(lines) + "\n"


def iou(a, b):
    a, b = set(a), set(b)
    union = a | b
    return 1.0 if not union else len(a & b) / len(union)


def _rank_correlation(st_a, st_b):
    sa = dict(zip(st_a.retained, st_a.scores))
    sb = dict(zip(st_b.retained, st_b.scores))
    common = sorted(set(sa) & set(sb))
    if len(common) < 2:
        return float("nan")
    x = [sa[p] for p in common]
    y = [sb[p] for p in common]
    if np.ptp(x) == 0 or np.ptp(y) == 0:
        return float("nan")
    return float(spearmanr(x, y).statistic)


def compare_strategies(cfg, schedule, inputs, dom_ratio=0.875, *, model=None, concurrent=True, **kw):
    """Run the mean-visual-query and text-guided arms on identical inputs and
    compare what they retain stage by stage."""
    if _instr_last(inputs) is None:
        raise MissingInstructionError()
    model = model or build_model(cfg)
    arms = (Strategy.MEAN_VISUAL_QUERY, Strategy.TEXT_GUIDED)

    def arm(strategy):
        return run_pipeline(cfg, schedule, strategy, inputs, dom_ratio, model=model, **kw)

    if concurrent:
        with ThreadPoolExecutor(max_workers=2) as pool:
            visual, text = pool.map(arm, arms)
    else:
        visual, text = map(arm, arms)
    ious = tuple(iou(a.retained, b.retained) for a, b in zip(visual.stages, text.stages))
    rhos = tuple(
        _rank_correlation(a, b)
        for a, b in zip(visual.stages, text.stages)
        if a.scores and b.scores
    )
    return CompareReport(ious, ious[-1], rhos)


def run_on_dumps(attn, manifest, strategy, budget, dom_ratio=0.875, partition="score"):
    """Score a dumped attention tensor and select the tokens to retain.

    Returns ``(retained_rows, importance)``: sequence rows of the surviving
    visual tokens (dominant plus merge references) and the scores. Survivors
    depend only on scores, so no key vectors are needed.
    """
    strategy = Strategy(strategy)
    vis = np.asarray(manifest.visual_indices, dtype=np.int64)
    manifest.check_bounds(attn.weights.shape[1], attn.weights.shape[2])
    iv = score(attn, strategy, vis, cls_index=manifest.cls_index,
               instr_last_index=manifest.instr_last_index)
    if budget >= len(vis):
        return vis.copy(), iv
    dominant, refs, _ = split_budget(iv, budget, dom_ratio, partition)
    keep = np.sort(np.concatenate([dominant, refs]))
    return vis[keep], iv


__all__ = [
    "COST_MODEL",
    "CompareReport",
    "PruneSchedule",
    "RunReport",
    "StageRecord",
    "compare_strategies",
    "flops_attention",
    "flops_mlp",
    "iou",
    "prepare_decoder_input",
    "reduction_pct",
    "run_on_dumps",
    "run_pipeline",
    "sequence_digest",
    "total_flops",
]
