"""Pure-Python/numpy implementation of the hot kernels.

Mirrors ``wmlab._core`` (Cython) function by function. Both backends must
produce bit-identical integers and token ids for the same inputs; the
parity tests in ``tests/test_kernels.py`` hold them to that.
"""
from __future__ import annotations

import math

import numpy as np

MASK64 = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15
M1 = 0xBF58476D1CE4E5B9
M2 = 0x94D049BB133111EB
CTX_INIT = 0x6A09E667F3BCC908
SALT_GREEN = 0x4B47575F475245  # "KGW_GRE"
SALT_SIR = 0x5349524C495445  # "SIRLITE"
SALT_CLASS = 0x434C415353  # "CLASS"
SALT_SAMPLE = 0x53414D504C45  # "SAMPLE"
UNIT = 1.0 / 4503599627370496.0  # 2**-52

MODE_NONE = 0
MODE_GREEN = 1
MODE_SIRLITE = 2
MODE_EXP = 3

SAMPLER_MULTINOMIAL = 0
SAMPLER_GREEDY = 1

_U = np.uint64


def mix64(x):
    """splitmix64 finalizer; accepts an int or a uint64 array."""
    if isinstance(x, np.ndarray):
        with np.errstate(over="ignore"):
            z = x.astype(np.uint64) + _U(GOLDEN)
            z = (z ^ (z >> _U(30))) * _U(M1)
            z = (z ^ (z >> _U(27))) * _U(M2)
            return z ^ (z >> _U(31))
    z = (int(x) + GOLDEN) & MASK64
    z = ((z ^ (z >> 30)) * M1) & MASK64
    z = ((z ^ (z >> 27)) * M2) & MASK64
    return z ^ (z >> 31)


def prf(secret, a, b):
    """Keyed PRF over (secret, a, b). ``a`` and ``b`` may be uint64 arrays."""
    s = mix64(int(secret) & MASK64)
    if isinstance(a, np.ndarray) or isinstance(b, np.ndarray):
        a = np.asarray(a, dtype=np.uint64) if isinstance(a, np.ndarray) else _U(int(a) & MASK64)
        b = np.asarray(b, dtype=np.uint64) if isinstance(b, np.ndarray) else _U(int(b) & MASK64)
        inner = mix64(np.asarray(_U(s) ^ a, dtype=np.uint64))
        return mix64(np.asarray(inner ^ b, dtype=np.uint64))
    return mix64(mix64(s ^ (int(a) & MASK64)) ^ (int(b) & MASK64))


def unit(x):
    """Map 64-bit integers to floats strictly inside (0, 1)."""
    if isinstance(x, np.ndarray):
        return ((x >> _U(12)).astype(np.float64) + 0.5) * UNIT
    return ((int(x) >> 12) + 0.5) * UNIT


ROUNDS = 6


def split_dims(domain: int) -> tuple[int, int]:
    """Mixed-radix split a * b >= domain with a, b close to sqrt(domain)."""
    a = max(1, math.isqrt(int(domain) - 1) + 1) if domain > 1 else 1
    b = -(-int(domain) // a)
    return a, b


def feistel(seeds: np.ndarray, values: np.ndarray, domain: int) -> np.ndarray:
    """Keyed bijection on [0, domain), one seed per element.

    Alternating Feistel network over Z_a x Z_b: even rounds add a keyed
    function of the right half to the left half (mod a), odd rounds the
    reverse (mod b). Values landing in [domain, a*b) are cycle-walked.
    """
    values = np.asarray(values, dtype=np.int64)
    seeds = np.broadcast_to(np.asarray(seeds, dtype=np.uint64), values.shape)
    a, b = split_dims(domain)
    x = values.copy()
    pending = np.ones(x.shape, dtype=bool)
    with np.errstate(over="ignore"):
        while pending.any():
            idx = np.nonzero(pending)[0]
            ms = mix64(np.ascontiguousarray(seeds[idx]))
            left, right = x[idx] // b, x[idx] % b
            for r in range(ROUNDS):
                rk = mix64(ms ^ _U(r))
                if r % 2 == 0:
                    f = (mix64(rk ^ right.astype(np.uint64)) % _U(a)).astype(np.int64)
                    left = (left + f) % a
                else:
                    f = (mix64(rk ^ left.astype(np.uint64)) % _U(b)).astype(np.int64)
                    right = (right + f) % b
            y = left * b + right
            x[idx] = y
            pending[idx] = y >= domain
    return x


def feistel_inverse(seed: int, value: int, domain: int) -> int:
    """Preimage of ``value`` under ``feistel`` with a single seed."""
    a, b = split_dims(domain)
    ms = mix64(int(seed) & MASK64)
    rk = [mix64(ms ^ r) for r in range(ROUNDS)]
    x = int(value)
    while True:
        left, right = divmod(x, b)
        for r in range(ROUNDS - 1, -1, -1):
            if r % 2 == 0:
                left = (left - mix64(rk[r] ^ right) % a) % a
            else:
                right = (right - mix64(rk[r] ^ left) % b) % b
        x = left * b + right
        if x < domain:
            return x


def context_hash(ids) -> int:
    h = CTX_INIT
    for t in ids:
        h = mix64(h ^ (int(t) & MASK64))
    return h


def green_seed(secret: int, ctx_hash: int) -> int:
    return prf(secret, ctx_hash, SALT_GREEN)


def class_token(cls: int) -> int:
    return mix64((int(cls) ^ SALT_CLASS) & MASK64)


def sirlite_signs(secret: int, multiset_hash: int, num_classes: int) -> np.ndarray:
    """1 where a class receives +delta, 0 where it receives -delta."""
    classes = np.arange(num_classes, dtype=np.uint64)
    bits = prf(secret, (int(multiset_hash) ^ SALT_SIR) & MASK64, classes) & _U(1)
    return bits.astype(np.uint8)


def xi_values(key: int, rows: np.ndarray, toks: np.ndarray) -> np.ndarray:
    return unit(prf(key, np.asarray(rows, dtype=np.uint64), np.asarray(toks, dtype=np.uint64)))


def _lookup(keys, lo, hi, key):
    i = int(np.searchsorted(keys[lo:hi], key)) + lo
    if i < hi and keys[i] == key:
        return i
    return -1


def pack_context(ids) -> int:
    k = 0
    for j, t in enumerate(ids):
        k |= int(t) << (16 * j)
    return k


def generate(
    ctx_keys, level_start, offsets, next_ids, next_counts, totals,
    order, vocab_size, smoothing, history, length, gen_seed, sampler,
    mode, secret, width, green_count, mult_plus, mult_minus,
    class_of, num_classes, exp_n, exp_shift, record,
):
    """Autoregressive sampling loop with an optional watermark.

    Returns (tokens, per-step watermark seeds). The seed array is filled
    only when ``record`` is true.
    """
    V = int(vocab_size)
    G = int(green_count)
    hist = [int(t) for t in history]
    out = np.empty(length, dtype=np.int64)
    seeds_out = np.zeros(length if record else 0, dtype=np.uint64)
    ms_hash = 0
    arange_v = np.arange(V, dtype=np.int64)
    if mode == MODE_SIRLITE:
        class_of = np.asarray(class_of, dtype=np.int64)
        members = np.argsort(class_of, kind="stable")
        sizes = np.bincount(class_of, minlength=num_classes).astype(np.int64)
        cstart = np.concatenate([[0], np.cumsum(sizes)])
    full = mode == MODE_EXP or sampler == SAMPLER_GREEDY
    for i in range(length):
        row = -1
        for L in range(order - 1, -1, -1):
            ctx = hist[len(hist) - L:] if L else []
            if len(ctx) < L:
                ctx = [0] * (L - len(ctx)) + ctx
            key = pack_context(ctx)
            row = _lookup(ctx_keys, level_start[L], level_start[L + 1], key)
            if row >= 0 and totals[row] > 0:
                break
        a, b = offsets[row], offsets[row + 1]
        seen, cnt = next_ids[a:b], next_counts[a:b]
        if mode == MODE_GREEN:
            tail = hist[len(hist) - width:] if width else []
            tail = [0] * (width - len(tail)) + tail
            seed = green_seed(secret, context_hash(tail))
            if record:
                seeds_out[i] = seed
        elif mode == MODE_SIRLITE:
            signs = sirlite_signs(secret, ms_hash, num_classes)
            cmult = np.where(signs == 1, mult_plus, mult_minus)
            if record:
                seeds_out[i] = ms_hash
        if full:
            w = np.full(V, smoothing, dtype=np.float64)
            w[seen] += cnt
            if mode == MODE_GREEN:
                perm = feistel(np.full(V, seed, dtype=np.uint64), arange_v, V)
                w = w * np.where(perm < G, mult_plus, 1.0)
            elif mode == MODE_SIRLITE:
                w = w * cmult[class_of]
            if mode == MODE_EXP:
                r = (i + exp_shift) % exp_n
                xi = xi_values(secret, np.full(V, r, dtype=np.uint64), arange_v.astype(np.uint64))
                tok = int(np.argmax(np.log(xi) / w))
                if record:
                    seeds_out[i] = r
            else:
                tok = int(np.argmax(w))
        else:
            # weights are m_v * (k + c_v): a mixture of the observed counts
            # (seen ids only) and the smoothing mass m_v * k over the vocabulary
            if mode == MODE_GREEN:
                perm = feistel(np.full(len(seen), seed, dtype=np.uint64), seen, V)
                m = np.where(perm < G, mult_plus, 1.0)
                M = float(G) * mult_plus + float(V - G)
            elif mode == MODE_SIRLITE:
                m = cmult[class_of[seen]]
                ccum = np.cumsum(sizes * cmult)
                M = float(ccum[-1])
            else:
                m = np.ones(len(seen))
                M = float(V)
            cs = np.cumsum(m * cnt)
            C = float(cs[-1]) if len(cs) else 0.0
            x = unit(prf(gen_seed, i, SALT_SAMPLE)) * (smoothing * M + C)
            if x < C:
                j = int(np.searchsorted(cs, x, side="right"))
                tok = int(seen[min(j, len(seen) - 1)])
            else:
                y = (x - C) / smoothing
                tok = _smoothing_token(y, mode, V, G, mult_plus, sizes if mode == MODE_SIRLITE else None,
                                       ccum if mode == MODE_SIRLITE else None,
                                       cmult if mode == MODE_SIRLITE else None,
                                       members if mode == MODE_SIRLITE else None,
                                       cstart if mode == MODE_SIRLITE else None,
                                       seed if mode == MODE_GREEN else 0)
        out[i] = tok
        hist.append(tok)
        if mode == MODE_SIRLITE:
            ms_hash = (ms_hash + class_token(class_of[tok])) & MASK64
    return out, seeds_out


def _smoothing_token(y, mode, V, G, mult_plus, sizes, ccum, cmult, members, cstart, seed):
    """Token at position y of the smoothing mass (each token v owns m_v)."""
    if mode == MODE_GREEN:
        if y < G * mult_plus:
            rank = min(int(y / mult_plus), G - 1)
        else:
            rank = min(G + int(y - G * mult_plus), V - 1)
        return int(feistel_inverse(seed, rank, V))
    if mode == MODE_SIRLITE:
        c = int(np.searchsorted(ccum, y, side="right"))
        if c >= len(ccum):
            c = int(np.flatnonzero(sizes)[-1])
        base = float(ccum[c - 1]) if c > 0 else 0.0
        off = min(int((y - base) / cmult[c]), int(sizes[c]) - 1)
        return int(members[cstart[c] + off])
    return min(int(y), V - 1)


def exp_cost(tokens, key, n, shift):
    tokens = np.asarray(tokens, dtype=np.int64)
    rows = (np.arange(len(tokens)) + shift) % n
    return float(-np.log(xi_values(key, rows, tokens)).sum())


def exp_edit_cost(tokens, key, n, shift, band, penalty):
    """Minimum alignment cost of ``tokens`` against the cyclic key sequence.

    Text position i may align with key index j for |i - j| <= band; skipping
    a text token or a key index each costs ``penalty``.
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    T = len(tokens)
    W = 2 * band + 1
    inf = math.inf
    # prev[d] holds D[i][i + d - band]
    prev = [inf] * W
    for d in range(W):
        j = d - band
        if 0 <= j:
            prev[d] = j * penalty
    for i in range(1, T + 1):
        cur = [inf] * W
        tok = int(tokens[i - 1])
        for d in range(W):
            j = i + d - band
            if j < 0:
                continue
            best = inf
            if j >= 1:
                # diagonal: D[i-1][j-1] sits at the same offset d
                c = -math.log(unit(prf(key, (j - 1 + shift) % n, tok)))
                best = prev[d] + c
            # skip text token: D[i-1][j] sits at offset d + 1
            if d + 1 < W and prev[d + 1] + penalty < best:
                best = prev[d + 1] + penalty
            # skip key index: D[i][j-1] sits at offset d - 1
            if d >= 1 and cur[d - 1] + penalty < best:
                best = cur[d - 1] + penalty
            if j == 0:
                best = min(best, i * penalty)
            cur[d] = best
        prev = cur
    return float(min(prev))
