"""Command-line entry point: ``vtprune <subcommand> ...``.

Flags override manifest values, which override built-in defaults. The
default seed can be set with ``VTPRUNE_SEED``.
"""

from __future__ import annotations

import argparse
import functools
import math
import os
import sys
from pathlib import Path

from . import io
from .attention import ModelConfig
from .errors import VtpruneError
from .linalg import make_rng, rand_matrix
from .pipeline import (
    COST_MODEL,
    compare_strategies,
    flops_attention,
    flops_mlp,
    run_on_dumps,
    run_pipeline,
)
from .pruning import PruneSchedule, build_schedule, default_boundaries
from .scoring import Strategy

DEFAULTS = dict(
    hidden_dim=64, heads=4, encoder_layers=4, decoder_layers=8, has_cls=True,
    initial=576, final=192, stages=5, decay="geometric", dom_ratio=0.875,
    strategy="mean-visual",
)
DATA_STREAM = 0x9E3779B97F4A7C15


class UsageError(VtpruneError):
    pass


def default_seed():
    raw = os.environ.get("VTPRUNE_SEED")
    if raw is None:
        return 0
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"VTPRUNE_SEED must be an integer, got {raw!r}") from None


def _add_model(p):
    g = p.add_argument_group("model geometry")
    g.add_argument("--hidden", type=int, dest="hidden_dim")
    g.add_argument("--heads", type=int)
    g.add_argument("--encoder-layers", type=int)
    g.add_argument("--decoder-layers", type=int)
    g.add_argument("--no-cls", dest="has_cls", action="store_false", default=None,
                   help="encoder without a CLS token (mean visual query at stage 1)")
    g.add_argument("--seed", type=int)


def _add_schedule(p, initial=True):
    g = p.add_argument_group("schedule")
    if initial:
        g.add_argument("--initial", type=int, help="visual tokens before pruning")
    g.add_argument("--final", type=int, help="visual tokens in the last stage")
    g.add_argument("--stages", type=int, help="stage count including the encoder stage")
    g.add_argument("--decay", choices=["geometric", "linear"])


def _add_pruning(p, strategy=True):
    if strategy:
        p.add_argument("--strategy", choices=[s.value for s in Strategy])
    p.add_argument("--dom-ratio", type=float)
    p.add_argument("--partition", choices=["score", "spaced"], default="score")
    p.add_argument("--weighted", action="store_true", help="size-weighted merge means")


def _add_input(p):
    p.add_argument("--manifest", required=True, type=Path)
    p.add_argument("--tokens", type=Path, help="token dump (defaults to the manifest's entry)")


@functools.lru_cache(maxsize=None)
def build_parser():
    # cached: building the subparsers costs more than most commands
    parser = argparse.ArgumentParser(
        prog="vtprune",
        description="Progressive visual-only token pruning over a toy vision-language stack.",
        allow_abbrev=False,
    )
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    p = sub.add_parser("synth", help="write a seeded token dump and manifest", allow_abbrev=False)
    p.add_argument("--out", required=True, type=Path, help="output prefix")
    p.add_argument("--visual", type=int, default=576)
    p.add_argument("--instr", type=int, default=16)
    p.add_argument("--pre", type=int, default=4, help="system-prompt tokens before the image")
    _add_model(p)
    _add_schedule(p, initial=False)
    _add_pruning(p)

    p = sub.add_parser("run", help="run the staged pipeline and write a report", allow_abbrev=False)
    _add_input(p)
    p.add_argument("--out", type=Path, help="report path (default: stdout)")
    _add_model(p)
    _add_schedule(p)
    _add_pruning(p)

    p = sub.add_parser("score", help="score a dumped attention tensor", allow_abbrev=False)
    p.add_argument("--attn", required=True, type=Path)
    p.add_argument("--manifest", required=True, type=Path)
    p.add_argument("--budget", type=int, required=True)
    p.add_argument("--out", type=Path, help="CSV path (default: stdout)")
    _add_pruning(p)

    p = sub.add_parser("schedule", help="print stage budgets", allow_abbrev=False)
    p.add_argument("--initial", type=int, default=DEFAULTS["initial"])
    p.add_argument("--final", type=int, default=DEFAULTS["final"])
    p.add_argument("--stages", type=int, default=DEFAULTS["stages"])
    p.add_argument("--decoder-layers", type=int, default=DEFAULTS["decoder_layers"])
    p.add_argument("--decay", choices=["geometric", "linear"], default="geometric")

    p = sub.add_parser("compare", help="visual-only vs text-guided retention", allow_abbrev=False)
    _add_input(p)
    p.add_argument("--out", type=Path, help="report path (default: stdout)")
    _add_model(p)
    _add_schedule(p)
    _add_pruning(p, strategy=False)

    p = sub.add_parser("flops", help="analytic attention FLOPs for a schedule", allow_abbrev=False)
    p.add_argument("--hidden", type=int, default=DEFAULTS["hidden_dim"])
    p.add_argument("--encoder-layers", type=int, default=DEFAULTS["encoder_layers"])
    p.add_argument("--decoder-layers", type=int, default=DEFAULTS["decoder_layers"])
    p.add_argument("--no-cls", dest="has_cls", action="store_false")
    p.add_argument("--initial", type=int, default=DEFAULTS["initial"])
    p.add_argument("--final", type=int, default=DEFAULTS["final"])
    p.add_argument("--stages", type=int, default=DEFAULTS["stages"])
    p.add_argument("--decay", choices=["geometric", "linear"], default="geometric")
    p.add_argument("--text", type=int, default=20, help="non-visual tokens in the decoder")
    p.add_argument("--mlp", action="store_true", help="add the MLP line item")

    p = sub.add_parser("export", help="write retention masks and a score heatmap", allow_abbrev=False)
    _add_input(p)
    p.add_argument("--out", required=True, type=Path, help="output prefix")
    _add_model(p)
    _add_schedule(p)
    _add_pruning(p)
    return parser


def _pick(args, manifest, name):
    value = getattr(args, name, None)
    if value is not None:
        return value
    if manifest is not None:
        if name in manifest.model:
            return manifest.model[name]
        if hasattr(manifest, name) and getattr(manifest, name) is not None:
            return getattr(manifest, name)
    if name == "seed":
        return default_seed()
    return DEFAULTS[name]


def _config(args, manifest=None):
    return ModelConfig(
        hidden_dim=_pick(args, manifest, "hidden_dim"),
        heads=_pick(args, manifest, "heads"),
        encoder_layers=_pick(args, manifest, "encoder_layers"),
        decoder_layers=_pick(args, manifest, "decoder_layers"),
        has_cls=bool(_pick(args, manifest, "has_cls")),
        seed=_pick(args, manifest, "seed"),
    )


def _schedule(args, manifest, cfg):
    initial = _pick(args, manifest, "initial")
    final = _pick(args, manifest, "final")
    boundaries = default_boundaries(_pick(args, manifest, "stages"), cfg.decoder_layers)
    if final == initial:
        return PruneSchedule.identity(initial, boundaries)
    return build_schedule(initial, final, boundaries, _pick(args, manifest, "decay"))


def _require_file(path):
    if not Path(path).is_file():
        raise UsageError(f"input file not found: {path}")


def _require_writable(path):
    parent = Path(path).resolve().parent
    if not parent.is_dir() or not os.access(parent, os.W_OK):
        raise UsageError(f"cannot write to {parent}")


def _load_inputs(args):
    _require_file(args.manifest)
    manifest = io.load_manifest(args.manifest)
    tokens = args.tokens
    if tokens is None:
        if not manifest.tokens:
            raise UsageError("manifest has no tokens entry; pass --tokens")
        tokens = args.manifest.parent / manifest.tokens
    _require_file(tokens)
    return manifest, io.sequence_from_dump(io.load_tokens(tokens), manifest)


def _emit(text, out):
    if out is None:
        sys.stdout.write(text)
    else:
        Path(out).write_text(text)


def cmd_synth(args):
    if args.visual <= 0 or args.instr < 0 or args.pre < 0:
        raise UsageError("--visual must be positive; --instr and --pre non-negative")
    prefix = args.out
    _require_writable(prefix)
    cfg = _config(args)
    rng = make_rng((cfg.seed + DATA_STREAM) % 2**64)
    n = args.pre + args.visual + args.instr
    tokens = rand_matrix(rng, n, cfg.hidden_dim, 1.0)
    side = math.isqrt(args.visual)
    grid = (side, side) if side * side == args.visual else (1, args.visual)
    token_path = prefix.with_name(prefix.name + ".vdmp")
    manifest = io.Manifest(
        visual_indices=list(range(args.pre, args.pre + args.visual)),
        n_tokens=n,
        instr_last_index=n - 1 if args.instr else None,
        grid_shape=grid,
        tokens=token_path.name,
        initial=args.visual,
        final=_pick(args, None, "final"),
        stages=_pick(args, None, "stages"),
        decay=_pick(args, None, "decay"),
        strategy=_pick(args, None, "strategy"),
        dom_ratio=_pick(args, None, "dom_ratio"),
        seed=cfg.seed,
        model=dict(hidden_dim=cfg.hidden_dim, heads=cfg.heads,
                   encoder_layers=cfg.encoder_layers, decoder_layers=cfg.decoder_layers,
                   has_cls=cfg.has_cls),
    )
    io.save_dump(token_path, tokens, io.KIND_TOKENS)
    io.save_manifest(prefix.with_name(prefix.name + ".manifest"), manifest)
    print(f"wrote {token_path} and {prefix.name}.manifest ({n} tokens, {args.visual} visual)")


def _pipeline(args):
    manifest, seq = _load_inputs(args)
    cfg = _config(args, manifest)
    schedule = _schedule(args, manifest, cfg)
    return manifest, seq, cfg, schedule


def cmd_run(args):
    if args.out is not None:
        _require_writable(args.out)
    manifest, seq, cfg, schedule = _pipeline(args)
    report = run_pipeline(cfg, schedule, _pick(args, manifest, "strategy"), seq,
                          _pick(args, manifest, "dom_ratio"), partition=args.partition,
                          weighted=args.weighted)
    _emit(report.to_text(), args.out)


def cmd_score(args):
    _require_file(args.attn)
    _require_file(args.manifest)
    if args.out is not None:
        _require_writable(args.out)
    manifest = io.load_manifest(args.manifest)
    attn = io.load_attention(args.attn)
    retained, iv = run_on_dumps(attn, manifest, _pick(args, manifest, "strategy"), args.budget,
                                _pick(args, manifest, "dom_ratio"), args.partition)
    kept = set(retained.tolist())
    lines = [f"# strategy={iv.strategy}", "index,score,retained"]
    lines += [f"{i},{s!r},{int(i in kept)}" for i, s in zip(iv.visual_indices.tolist(), iv.scores.tolist())]
    _emit("\n".join(lines) + "\n", args.out)


def cmd_schedule(args):
    boundaries = default_boundaries(args.stages, args.decoder_layers)
    schedule = build_schedule(args.initial, args.final, boundaries, args.decay)
    lines = ["stage,boundary,budget"]
    lines += [f"{i},{b},{n}" for i, (b, n) in enumerate(schedule.stages, 1)]
    print("\n".join(lines))


def cmd_compare(args):
    if args.out is not None:
        _require_writable(args.out)
    manifest, seq, cfg, schedule = _pipeline(args)
    report = compare_strategies(cfg, schedule, seq, _pick(args, manifest, "dom_ratio"),
                                partition=args.partition, weighted=args.weighted)
    _emit(report.to_text(), args.out)


def cmd_flops(args):
    boundaries = default_boundaries(args.stages, args.decoder_layers)
    schedule = build_schedule(args.initial, args.final, boundaries, args.decay)
    d = args.hidden
    enc_len = args.initial + (1 if args.has_cls else 0)
    rows = [("encoder", enc_len, enc_len, args.encoder_layers)]
    prev = 0
    for b, budget in schedule.stages[1:]:
        rows.append((str(b), args.text + args.initial, args.text + budget, b.layer - prev))
        prev = b.layer
    lines = [f"# {COST_MODEL}", "segment,baseline_len,pruned_len,layers,flops_baseline,flops_pruned"]
    base = pruned = mlp_base = mlp_pruned = 0.0
    for name, lb, lp, layers in rows:
        if layers == 0:
            continue
        fb, fp = flops_attention(lb, d, layers), flops_attention(lp, d, layers)
        base += fb
        pruned += fp
        mlp_base += flops_mlp(lb, d, layers)
        mlp_pruned += flops_mlp(lp, d, layers)
        lines.append(f"{name},{lb},{lp},{layers},{fb:.1f},{fp:.1f}")
    lines.append(f"total,,,,{base:.1f},{pruned:.1f}")
    lines.append(f"reduction_pct,{100.0 * (1.0 - pruned / base):.6f}")
    if args.mlp:
        lines.append(f"mlp_total,,,,{mlp_base:.1f},{mlp_pruned:.1f}")
    print("\n".join(lines))


def cmd_export(args):
    _require_writable(args.out)
    manifest, seq, cfg, schedule = _pipeline(args)
    if manifest.grid_shape is None:
        raise UsageError("manifest has no grid_shape; cannot export grids")
    report = run_pipeline(cfg, schedule, _pick(args, manifest, "strategy"), seq,
                          _pick(args, manifest, "dom_ratio"), partition=args.partition,
                          weighted=args.weighted)
    offset = min(manifest.visual_indices)
    prefix = args.out
    for i, st in enumerate(report.stages, 1):
        grid, idx = io.export_mask([p - offset for p in st.retained], manifest.grid_shape)
        prefix.with_name(f"{prefix.name}.stage{i}.mask.csv").write_text(grid + "\n")
        prefix.with_name(f"{prefix.name}.stage{i}.mask.idx").write_text(
            "\n".join(str(x) for x in idx) + "\n")
    pgm, csv = io.export_heatmap(report.stages[0].scores, manifest.grid_shape)
    prefix.with_name(f"{prefix.name}.heat.pgm").write_bytes(pgm)
    prefix.with_name(f"{prefix.name}.heat.csv").write_text(csv)
    print(f"wrote {len(report.stages)} masks and a heatmap under {prefix}")


COMMANDS = {
    "synth": cmd_synth,
    "run": cmd_run,
    "score": cmd_score,
    "schedule": cmd_schedule,
    "compare": cmd_compare,
    "flops": cmd_flops,
    "export": cmd_export,
}


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        COMMANDS[args.command](args)
    except VtpruneError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
