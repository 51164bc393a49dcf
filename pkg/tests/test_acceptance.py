"""Acceptance gate: one PASS/FAIL line per criterion.

Run with ``pytest tests/test_acceptance.py -s`` to see the summary lines.
"""

import contextlib
import io as stdio
import itertools
import math
import time

import numpy as np
import pytest

from vtprune import io
from vtprune.attention import AttentionTensor, Modality, ModelConfig, TokenSequence, decoder_forward
from vtprune.cli import main
from vtprune.errors import BadMagicError, TruncatedPayloadError, VersionMismatchError
from vtprune.linalg import make_rng, rand_matrix
from vtprune.pipeline import flops_attention, prepare_decoder_input, run_pipeline
from vtprune.pruning import (
    PruneSchedule,
    build_schedule,
    default_boundaries,
    match_candidates,
    prune_stage,
    select_dominant,
)
from vtprune.scoring import ImportanceVector, score_mean_visual_query

from conftest import ACCEPTANCE_LINES, make_sequence
from oracles import argmax_oracle, topk_oracle

TOY = ModelConfig()  # hidden 64, 4 heads, 4 encoder + 8 decoder layers
N_VIS = 576


def verdict(number, name, ok, elapsed, limit, detail=""):
    within = elapsed < limit
    status = "PASS" if ok and within else "FAIL"
    line = f"[{status}] criterion {number}: {name} ({elapsed:.4f}s, limit {limit}s) {detail}".rstrip()
    ACCEPTANCE_LINES.append(line)
    print("\n" + line)
    assert ok, f"criterion {number} failed: {detail}"
    assert within, f"criterion {number} took {elapsed:.4f}s, limit {limit}s"


def best_time(fn, repeat=5):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return out, min(times)


@pytest.fixture(scope="module")
def toy_inputs():
    return make_sequence(TOY, n_pre=4, n_visual=N_VIS, n_instr=16, seed=21)


def test_criterion_1_schedule_arithmetic():
    expected_stage2 = {192: 288, 128: 192, 64: 96}
    problems = []
    elapsed = 0.0
    for final, stage2 in expected_stage2.items():
        argv = ["schedule", "--initial", "576", "--final", str(final), "--stages", "5"]

        def call():
            buf = stdio.StringIO()
            with contextlib.redirect_stdout(buf):
                rc = main(argv)
            return rc, buf.getvalue()

        (rc, out), dt = best_time(call)
        elapsed = max(elapsed, dt)
        budgets = [int(line.split(",")[2]) for line in out.strip().splitlines()[1:]]
        if rc != 0 or budgets[0] != 576 or budgets[1] != stage2 or budgets[-1] != final:
            problems.append(f"final={final}: {budgets}")
        if any(b < a for a, b in zip(budgets[1:], budgets)):
            problems.append(f"final={final} not monotone: {budgets}")
    verdict(1, "schedule arithmetic", not problems, elapsed, 1e-3, "; ".join(problems))


def test_criterion_2_dominant_selection():
    rng = np.random.default_rng(2)
    t0 = time.perf_counter()
    failures = 0
    checked = 0

    def check(scores, k):
        nonlocal failures, checked
        checked += 1
        got = select_dominant(scores, k)
        if list(got) != topk_oracle(scores, k):
            failures += 1
            return
        rejected = np.setdiff1d(np.arange(len(scores)), got)
        if len(rejected) and scores[got].min() < scores[rejected].max():
            failures += 1

    for n in range(1, 13):
        for _ in range(20):
            # small integer alphabet forces ties
            scores = rng.integers(0, 4, size=n).astype(np.float64)
            for k in range(1, n + 1):
                check(scores, k)
        for _ in range(5):
            scores = rng.random(n)
            for k in range(1, n + 1):
                check(scores, k)
    for _ in range(1000):
        n = int(rng.integers(13, 600))
        scores = rng.random(n) if rng.random() < 0.5 else rng.integers(0, 50, size=n).astype(float)
        check(scores, int(rng.integers(1, n + 1)))
    elapsed = time.perf_counter() - t0
    verdict(2, "dominant selection equals sort oracle", failures == 0, elapsed, 5.0,
            f"{failures}/{checked} mismatches")


def loop_mean_visual(weights, visual):
    heads = weights.shape[0]
    out = []
    for col in visual:
        total = 0.0
        for row in visual:
            total += sum(float(weights[h, row, col]) for h in range(heads)) / heads
        out.append(total / len(visual))
    return np.array(out)


def test_criterion_3_mean_visual_score():
    rng = np.random.default_rng(3)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(60):
        heads = int(rng.integers(1, 9))
        n = int(rng.integers(2, 65))
        logits = rng.standard_normal((heads, n, n))
        w = np.exp(logits)
        w /= w.sum(axis=2, keepdims=True)
        visual = np.sort(rng.choice(n, size=int(rng.integers(1, n + 1)), replace=False))
        got = score_mean_visual_query(AttentionTensor(w.astype(np.float32)), visual).scores
        ref = loop_mean_visual(w.astype(np.float32), visual)
        worst = max(worst, float(np.abs(got - ref).max()))
    elapsed = time.perf_counter() - t0
    verdict(3, "mean visual score equals loop oracle", worst <= 1e-6, elapsed, 5.0,
            f"max abs err {worst:.2e}")


def test_criterion_4_causal_invariance(toy_inputs):
    sched = build_schedule(N_VIS, 64, default_boundaries(5, TOY.decoder_layers))
    t0 = time.perf_counter()
    base_v = run_pipeline(TOY, sched, "mean-visual", toy_inputs)
    base_t = run_pipeline(TOY, sched, "text", toy_inputs)
    instr = toy_inputs.rows(Modality.TEXT_INSTR)
    visual_same, text_changed = True, 0
    for seed in range(3):
        emb = toy_inputs.embeddings.copy()
        emb[instr] = rand_matrix(make_rng(500 + seed), len(instr), TOY.hidden_dim, 1.0)
        other = toy_inputs.replace(embeddings=emb)
        v = run_pipeline(TOY, sched, "mean-visual", other)
        visual_same &= [set(s.retained) for s in v.stages] == [set(s.retained) for s in base_v.stages]
        t = run_pipeline(TOY, sched, "text", other)
        text_changed += [set(s.retained) for s in t.stages] != [set(s.retained) for s in base_t.stages]
    elapsed = time.perf_counter() - t0
    verdict(4, "causal invariance of visual-only scoring", visual_same and text_changed > 0,
            elapsed, 10.0, f"visual identical={visual_same}, text changed in {text_changed}/3")


def test_criterion_5_merge_conservation():
    rng = np.random.default_rng(5)
    t0 = time.perf_counter()
    worst = 0.0
    match_failures = matched = evaluated = 0
    while evaluated < 1000:
        n_vis = int(rng.integers(2, 48))
        n_pre, n_instr = int(rng.integers(0, 3)), int(rng.integers(0, 3))
        dim = int(rng.integers(1, 9))
        emb = rng.standard_normal((n_pre + n_vis + n_instr, dim)).astype(np.float32)
        seq = TokenSequence.decoder_layout(emb, n_pre, n_vis, n_instr)
        scores = rng.random(n_vis)
        keys = rng.standard_normal((n_vis, dim)).astype(np.float32)
        ratio = float(rng.choice([0.5, 0.75, 0.875]))
        # conservation concerns contextual tokens, so every draw needs one slot
        budgets = [b for b in range(1, n_vis + 1) if b - math.ceil(round(ratio * b, 9)) >= 1]
        budget = int(rng.choice(budgets)) if budgets else None
        iv = ImportanceVector(scores, seq.visual_rows, "mean-visual")
        if budget is not None:
            evaluated += 1
            worst = max(worst, conservation_error(seq, iv, budget, keys, ratio))
        if n_vis <= 12:
            refs = np.sort(rng.choice(n_vis, size=int(rng.integers(1, n_vis + 1)), replace=False))
            cands = np.setdiff1d(np.arange(n_vis), refs)
            got = match_candidates(refs, cands, keys)
            want = [refs[argmax_oracle(keys[c], keys[refs])] for c in cands]
            match_failures += list(got) != want
            matched += 1
    elapsed = time.perf_counter() - t0
    verdict(5, "merge conservation and matching", worst <= 1e-5 and match_failures == 0,
            elapsed, 10.0, f"max rel err {worst:.2e}, matching mismatches {match_failures}/{matched}")


def conservation_error(seq, iv, budget, keys, ratio):
    """Relative error of size-weighted contextual mass vs the non-dominant input mass."""
    out = prune_stage(seq, iv, budget, keys, dom_ratio=ratio)
    k_dom = math.ceil(round(ratio * budget, 9))
    dominant = set(int(i) for i in select_dominant(iv.scores, k_dom))
    non_dom = [i for i in range(len(iv)) if i not in dominant]
    expect = seq.embeddings[seq.visual_rows[non_dom]].astype(np.float64).sum(axis=0)
    kept_dom = {int(seq.orig_pos[seq.visual_rows[i]]) for i in dominant}
    got = np.zeros(seq.hidden)
    for row in out.visual_rows:
        if int(out.orig_pos[row]) not in kept_dom:
            got += out.token_sizes[row] * out.embeddings[row].astype(np.float64)
    return float(np.linalg.norm(got - expect) / max(np.linalg.norm(expect), 1e-12))


def test_criterion_6_identity_and_counts(toy_inputs):
    bounds = default_boundaries(5, TOY.decoder_layers)
    t0 = time.perf_counter()
    ident = run_pipeline(TOY, PruneSchedule.identity(N_VIS, bounds), "mean-visual", toy_inputs)
    prepared, _, _ = prepare_decoder_input(toy_inputs, TOY)
    ref, _ = decoder_forward(prepared, TOY)
    err = float(np.abs(ident.final_sequence.embeddings - ref.embeddings).max())
    sched = PruneSchedule(tuple(zip(bounds, [576, 288, 252, 220, 192])), 576, 192)
    report = run_pipeline(TOY, sched, "mean-visual", toy_inputs)
    counts = [len(s.retained) for s in report.stages]
    elapsed = time.perf_counter() - t0
    ok = err <= 1e-6 and counts == [576, 288, 252, 220, 192]
    verdict(6, "identity schedule and stage counts", ok, elapsed, 10.0,
            f"max abs err {err:.2e}, counts {counts}")


def independent_attention_flops(lengths, d):
    total = 0
    for n in lengths:
        total += 4 * n * d * d + 2 * n * n * d
    return total


def test_criterion_7_compute_model(toy_inputs):
    hand = {
        (16, 64, 1): 4 * 16 * 64 ** 2 + 2 * 16 ** 2 * 64,
        (576, 4096, 1): 4 * 576 * 4096 ** 2 + 2 * 576 ** 2 * 4096,
        (100, 8, 3): 3 * (4 * 100 * 64 + 2 * 10000 * 8),
    }
    exact = all(flops_attention(*k) == v for k, v in hand.items())
    sched = build_schedule(N_VIS, 64, default_boundaries(5, TOY.decoder_layers))
    report = run_pipeline(TOY, sched, "mean-visual", toy_inputs)
    t0 = time.perf_counter()
    d = TOY.hidden_dim
    n_text = len(toy_inputs) - N_VIS
    enc = report.stages[0]
    pruned = [enc.seq_len] * enc.layers
    for st in report.stages[1:]:
        assert st.seq_len == st.budget + n_text
        pruned += [st.seq_len] * st.layers
    base = [enc.seq_len] * enc.layers + [len(toy_inputs)] * TOY.decoder_layers
    pct = 100 * (1 - independent_attention_flops(pruned, d) / independent_attention_flops(base, d))
    elapsed = time.perf_counter() - t0
    ok = exact and report.reduction_pct > 0 and abs(pct - report.reduction_pct) <= 1e-9
    verdict(7, "attention FLOPs model", ok, elapsed, 1.0,
            f"reduction {report.reduction_pct:.4f}% vs recomputed {pct:.4f}%")


def test_criterion_8_format_golden():
    t0 = time.perf_counter()
    w = np.random.default_rng(8).random((4, 6, 6)).astype(np.float32)
    buf = io.write_dump(w, io.KIND_ATTENTION)
    checks = {
        "roundtrip": io.read_dump(buf).data.tobytes() == w.tobytes(),
        "header": buf[:8] == b"VDMP\x01\x00\x00\x00",
    }
    bad_magic = b"VDMX" + buf[4:]
    bad_version = buf[:4] + (2).to_bytes(4, "little") + buf[8:]
    for name, data, err in (
        ("magic", bad_magic, BadMagicError),
        ("version", bad_version, VersionMismatchError),
        ("truncation", buf[:-4], TruncatedPayloadError),
    ):
        try:
            io.read_dump(data)
            checks[name] = False
        except err:
            checks[name] = True
        except Exception:
            checks[name] = False
    elapsed = time.perf_counter() - t0
    failed = [k for k, v in checks.items() if not v]
    verdict(8, "dump format golden tests", not failed, elapsed, 1.0,
            f"failed: {failed}" if failed else "")


def test_criterion_9_determinism(tmp_path):
    prefix = tmp_path / "toy"
    assert main(["synth", "--out", str(prefix), "--seed", "9"]) == 0
    t0 = time.perf_counter()
    outs = []
    for name in ("a", "b"):
        out = tmp_path / f"{name}.txt"
        rc = main(["run", "--manifest", f"{prefix}.manifest", "--final", "64", "--seed", "9",
                   "--out", str(out)])
        outs.append((rc, out.read_bytes()))
    elapsed = time.perf_counter() - t0
    (rc_a, a), (rc_b, b) = outs
    ok = rc_a == rc_b == 0 and a == b and b"final_sequence_digest," in a
    verdict(9, "deterministic run reports", ok, elapsed, 20.0)


def test_exhaustive_small_permutations():
    # every ordering of a tied 6-vector agrees with the oracle
    base = [0.1, 0.5, 0.5, 0.2, 0.5, 0.1]
    for perm in itertools.permutations(range(6)):
        scores = np.array([base[i] for i in perm])
        for k in range(1, 7):
            assert list(select_dominant(scores, k)) == topk_oracle(scores, k)
