"""Time the compiled kernels against the pure-Python fallback.

    python3 benchmarks/bench_kernels.py [--length 200] [--repeat 5]

Prints one row per kernel: median seconds per call for each backend and the
speed-up.  Both backends are checked to agree on every call.
"""
import argparse
import math
import statistics
import time

import numpy as np

from wmlab import _core_py, kernels, lm
from wmlab.config import DATA_DIR

MODES = {"none": kernels.MODE_NONE, "green": kernels.MODE_GREEN, "sirlite": kernels.MODE_SIRLITE,
         "exp": kernels.MODE_EXP}


def _median_time(fn, repeat):
    times, out = [], None
    for _ in range(repeat):
        t = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t)
    return statistics.median(times), out


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--length", type=int, default=200)
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--tokens", type=int, default=300_000, help="training tokens for the benchmark model")
    args = ap.parse_args(argv)

    backends = kernels.backends()
    if "cython" not in backends:
        print("compiled extension not built; run: python3 setup.py build_ext --inplace")
    vocab, flat, _ = lm.load_corpus(DATA_DIR / "reference_corpus.txt")
    model = lm.train_ngram(flat[: args.tokens], 3, 0.05, "bench", vocab)
    V = model.vocab_size
    classes = np.r_[0, 1, 2 + np.arange(V - 2) // 4]
    prompt = flat[args.tokens : args.tokens + 16]
    toks = flat[args.tokens + 100 : args.tokens + 100 + args.length]

    def gen(b, mode):
        return lambda: b.generate(
            model.ctx_keys, model.level_start, model.offsets, model.next_ids, model.next_counts,
            model.totals, model.order, V, model.smoothing_k, prompt, args.length, 1234,
            kernels.SAMPLER_MULTINOMIAL, mode, 0xC0FFEE, 1, int(0.25 * V + 0.5), math.e ** 2, math.e ** -2,
            classes, int(classes.max()) + 1, 256, 0, True)

    jobs = {f"generate[{name}]": (lambda b, m=mode: gen(b, m)) for name, mode in MODES.items()}
    jobs["feistel[10k]"] = lambda b: (lambda: b.feistel(np.arange(10_000, dtype=np.uint64), np.arange(10_000) % V, V))
    jobs["exp_cost"] = lambda b: (lambda: b.exp_cost(toks, 99, 256, 0))
    jobs["exp_edit_cost[b=8]"] = lambda b: (lambda: b.exp_edit_cost(toks, 99, 256, 0, 8, 1.0))

    names = list(backends)
    print(f"{'kernel':<22}" + "".join(f"{n + ' s':>14}" for n in names) + (f"{'speed-up':>10}" if len(names) > 1 else ""))
    for job, make in jobs.items():
        results = {n: _median_time(make(backends[n]), args.repeat) for n in names}
        outs = [results[n][1] for n in names]
        for o in outs[1:]:
            same = all(np.array_equal(x, y) for x, y in zip(o, outs[0])) if isinstance(o, tuple) else np.allclose(o, outs[0], rtol=1e-12)
            assert same, f"{job}: backends disagree"
        row = f"{job:<22}" + "".join(f"{results[n][0]:>14.5f}" for n in names)
        if len(names) > 1:
            row += f"{results['python'][0] / results['cython'][0]:>9.1f}x"
        print(row)
    print(f"active backend: {kernels.BACKEND}; V={V}, length={args.length}")


if __name__ == "__main__":
    main()
