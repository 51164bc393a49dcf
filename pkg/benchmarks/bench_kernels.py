"""Time the compiled and numpy kernel backends side by side.

    python benchmarks/bench_kernels.py [--repeat N] [--tokens N]

The pipeline row swaps the module-level kernel aliases, so it measures the
whole toy forward pass plus pruning under each backend.
"""

import argparse
import timeit

import numpy as np

from vtprune import kernels
from vtprune.attention import ModelConfig, TokenSequence
from vtprune.pipeline import run_pipeline
from vtprune.pruning import build_schedule, default_boundaries

KERNEL_NAMES = ("matmul", "softmax_rows", "attention_head", "dot_argmax")


def use_backend(name):
    impl = kernels.load(name)
    for attr in KERNEL_NAMES:
        setattr(kernels, attr, getattr(impl, attr))
    return impl


def cases(n, d, rng):
    a = rng.standard_normal((n, d)).astype(np.float32)
    b = rng.standard_normal((d, d)).astype(np.float32)
    logits = rng.standard_normal((n, n)).astype(np.float32)
    q, k, v = (rng.standard_normal((n, 16)).astype(np.float32) for _ in range(3))
    cands = rng.standard_normal((n // 2, d)).astype(np.float32)
    refs = rng.standard_normal((n // 8, d)).astype(np.float32)
    return {
        "matmul": lambda m: m.matmul(a, b),
        "softmax_rows": lambda m: m.softmax_rows(logits),
        "attention_head": lambda m: m.attention_head(q, k, v, 0.25, True),
        "dot_argmax": lambda m: m.dot_argmax(cands, refs),
    }


def pipeline_case(n_visual):
    cfg = ModelConfig()
    rng = np.random.default_rng(0)
    emb = rng.uniform(-1, 1, (4 + n_visual + 16, cfg.hidden_dim)).astype(np.float32)
    seq = TokenSequence.decoder_layout(emb, 4, n_visual, 16)
    sched = build_schedule(n_visual, max(1, n_visual // 9), default_boundaries(5, cfg.decoder_layers))
    return lambda m: run_pipeline(cfg, sched, "mean-visual", seq)


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    parser.add_argument("--tokens", type=int, default=576)
    args = parser.parse_args()

    backends = kernels.available()
    if len(backends) < 2:
        print("compiled backend not built; timing numpy only")
    rng = np.random.default_rng(0)
    rows = dict(cases(args.tokens, 64, rng))
    rows["pipeline"] = pipeline_case(args.tokens)

    print(f"{'kernel':<16}" + "".join(f"{b:>12}" for b in backends) + "   (best of %d, ms)" % args.repeat)
    for name, fn in rows.items():
        line = f"{name:<16}"
        for backend in backends:
            impl = use_backend(backend)
            fn(impl)  # warm up
            best = min(timeit.repeat(lambda: fn(impl), number=1, repeat=args.repeat))
            line += f"{best * 1e3:>12.3f}"
        print(line)
    use_backend(kernels.BACKEND)


if __name__ == "__main__":
    main()
