# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels. Same API and outputs as ``wmlab._core_py``."""
import numpy as np
cimport numpy as cnp
from libc.math cimport log, INFINITY
from libc.stdint cimport uint64_t, int64_t

cnp.import_array()

cdef uint64_t GOLDEN = 0x9E3779B97F4A7C15ULL
cdef uint64_t M1 = 0xBF58476D1CE4E5B9ULL
cdef uint64_t M2 = 0x94D049BB133111EBULL
cdef uint64_t CTX_INIT = 0x6A09E667F3BCC908ULL
cdef uint64_t SALT_GREEN = 0x4B47575F475245ULL
cdef uint64_t SALT_SIR = 0x5349524C495445ULL
cdef uint64_t SALT_CLASS = 0x434C415353ULL
cdef uint64_t SALT_SAMPLE = 0x53414D504C45ULL
cdef double UNIT = 1.0 / 4503599627370496.0  # 2**-52; top value 1 - 2**-53 is exact


cdef inline uint64_t _mix(uint64_t z) noexcept nogil:
    z = z + GOLDEN
    z = (z ^ (z >> 30)) * M1
    z = (z ^ (z >> 27)) * M2
    return z ^ (z >> 31)


cdef inline uint64_t _prf(uint64_t secret, uint64_t a, uint64_t b) noexcept nogil:
    return _mix(_mix(_mix(secret) ^ a) ^ b)


cdef inline double _unit(uint64_t x) noexcept nogil:
    return (<double>(x >> 12) + 0.5) * UNIT


cdef enum:
    ROUNDS = 6
    TAB = 256


cdef inline int64_t _feistel1(uint64_t seed, int64_t x, int64_t a, int64_t b, int64_t dom) noexcept nogil:
    cdef uint64_t rk[ROUNDS]
    cdef uint64_t ms = _mix(seed)
    cdef int64_t left, right
    cdef int r
    for r in range(ROUNDS):
        rk[r] = _mix(ms ^ <uint64_t>r)
    while True:
        left = x // b
        right = x % b
        for r in range(ROUNDS):
            if r % 2 == 0:
                left = left + <int64_t>(_mix(rk[r] ^ <uint64_t>right) % <uint64_t>a)
                if left >= a:
                    left -= a
            else:
                right = right + <int64_t>(_mix(rk[r] ^ <uint64_t>left) % <uint64_t>b)
                if right >= b:
                    right -= b
        x = left * b + right
        if x < dom:
            return x


cdef inline void _round_tables(uint64_t seed, int64_t a, int64_t b, int64_t* tab) noexcept nogil:
    # tab[r * TAB + i]: round-r offset for half value i
    cdef uint64_t ms = _mix(seed), rk
    cdef int r
    cdef int64_t i
    for r in range(ROUNDS):
        rk = _mix(ms ^ <uint64_t>r)
        if r % 2 == 0:
            for i in range(b):
                tab[r * TAB + i] = <int64_t>(_mix(rk ^ <uint64_t>i) % <uint64_t>a)
        else:
            for i in range(a):
                tab[r * TAB + i] = <int64_t>(_mix(rk ^ <uint64_t>i) % <uint64_t>b)


cdef inline int64_t _feistel_tab(const int64_t* tab, int64_t x, int64_t a, int64_t b, int64_t dom) noexcept nogil:
    cdef int64_t left, right
    cdef int r
    while True:
        left = x // b
        right = x - left * b
        for r in range(ROUNDS):
            if r % 2 == 0:
                left = left + tab[r * TAB + right]
                if left >= a:
                    left -= a
            else:
                right = right + tab[r * TAB + left]
                if right >= b:
                    right -= b
        x = left * b + right
        if x < dom:
            return x


cdef inline int64_t _feistel_pair(const int64_t* tab, int64_t left, int64_t right, int64_t a, int64_t b, int64_t dom) noexcept nogil:
    # branch-free modular adds; the comparisons are unpredictable
    cdef int64_t x
    left = left + tab[right]
    left = left - a * (left >= a)
    right = right + tab[TAB + left]
    right = right - b * (right >= b)
    left = left + tab[2 * TAB + right]
    left = left - a * (left >= a)
    right = right + tab[3 * TAB + left]
    right = right - b * (right >= b)
    left = left + tab[4 * TAB + right]
    left = left - a * (left >= a)
    right = right + tab[5 * TAB + left]
    right = right - b * (right >= b)
    x = left * b + right
    if x < dom:
        return x
    return _feistel_tab(tab, x, a, b, dom)


cdef inline int64_t _feistel_inv(const int64_t* tab, int64_t x, int64_t a, int64_t b, int64_t dom) noexcept nogil:
    cdef int64_t left, right
    while True:
        left = x // b
        right = x - left * b
        right = right - tab[5 * TAB + left]
        right = right + b * (right < 0)
        left = left - tab[4 * TAB + right]
        left = left + a * (left < 0)
        right = right - tab[3 * TAB + left]
        right = right + b * (right < 0)
        left = left - tab[2 * TAB + right]
        left = left + a * (left < 0)
        right = right - tab[TAB + left]
        right = right + b * (right < 0)
        left = left - tab[right]
        left = left + a * (left < 0)
        x = left * b + right
        if x < dom:
            return x


def split_dims(domain):
    domain = int(domain)
    if domain <= 1:
        return 1, max(domain, 1)
    import math
    a = math.isqrt(domain - 1) + 1
    return a, -(-domain // a)


def feistel(seeds, values, domain):
    cdef cnp.ndarray[uint64_t, ndim=1] s = np.ascontiguousarray(
        np.broadcast_to(np.asarray(seeds, dtype=np.uint64), np.shape(values)), dtype=np.uint64)
    cdef cnp.ndarray[int64_t, ndim=1] v = np.ascontiguousarray(values, dtype=np.int64)
    cdef Py_ssize_t n = v.shape[0], i
    a_, b_ = split_dims(domain)
    cdef int64_t a = a_, b = b_, dom = domain
    out = np.empty(n, dtype=np.int64)
    cdef int64_t[::1] o = out
    for i in range(n):
        o[i] = _feistel1(s[i], v[i], a, b, dom)
    return out


cdef Py_ssize_t _lookup(const int64_t[::1] keys, Py_ssize_t lo, Py_ssize_t hi, int64_t key) noexcept nogil:
    cdef Py_ssize_t mid
    while lo < hi:
        mid = (lo + hi) >> 1
        if keys[mid] < key:
            lo = mid + 1
        else:
            hi = mid
    return lo


def generate(
    ctx_keys, level_start, offsets, next_ids, next_counts, totals,
    int order, int vocab_size, double smoothing, history, int length,
    gen_seed, int sampler, int mode, secret, int width, int green_count,
    double mult_plus, double mult_minus, class_of, int num_classes,
    int exp_n, int exp_shift, bint record,
):
    cdef const int64_t[::1] keys = np.ascontiguousarray(ctx_keys, dtype=np.int64)
    cdef const int64_t[::1] lstart = np.ascontiguousarray(level_start, dtype=np.int64)
    cdef const int64_t[::1] offs = np.ascontiguousarray(offsets, dtype=np.int64)
    cdef const int64_t[::1] nids = np.ascontiguousarray(next_ids, dtype=np.int64)
    cdef const double[::1] ncnt = np.ascontiguousarray(next_counts, dtype=np.float64)
    cdef const double[::1] tots = np.ascontiguousarray(totals, dtype=np.float64)
    cdef Py_ssize_t V = vocab_size
    cdef Py_ssize_t H0 = len(history)
    hist_arr = np.zeros(H0 + length, dtype=np.int64)
    hist_arr[:H0] = np.asarray(history, dtype=np.int64)
    cdef int64_t[::1] hist = hist_arr
    out = np.empty(length, dtype=np.int64)
    cdef int64_t[::1] o = out
    seeds_arr = np.zeros(length if record else 0, dtype=np.uint64)
    cdef uint64_t[::1] so = seeds_arr
    w_arr = np.empty(V, dtype=np.float64)
    cdef double[::1] w = w_arr
    sg_arr = np.zeros(max(num_classes, 1), dtype=np.uint8)
    cdef unsigned char[::1] signs = sg_arr
    cdef const int64_t[::1] cls
    if mode == 2:
        cls = np.ascontiguousarray(class_of, dtype=np.int64)
    cdef uint64_t sec = <uint64_t>(int(secret) & 0xFFFFFFFFFFFFFFFF)
    cdef uint64_t gseed = <uint64_t>(int(gen_seed) & 0xFFFFFFFFFFFFFFFF)
    cdef uint64_t ms_hash = 0, seed = 0, h, ms, sir_key
    a_, b_ = split_dims(V)
    cdef int64_t fa = a_, fb = b_
    cdef Py_ssize_t i, j, L, row, a, b, pos, tok, cur, lo, hi
    cdef int64_t key, t
    cdef double total, u, best, sc, xv, umax
    cdef Py_ssize_t uarg
    cdef int64_t la, rb
    cdef double sm[2]
    sm[0] = mult_minus
    sm[1] = mult_plus
    cdef uint64_t inner
    tab_arr = np.zeros(ROUNDS * TAB, dtype=np.int64)
    cdef int64_t[::1] tab = tab_arr
    cdef int r
    cdef bint full = mode == 3 or sampler == 1
    cdef int64_t G = green_count
    # SIR-lite: members grouped by class, class sizes and per-class multipliers
    cdef Py_ssize_t C = max(num_classes, 1)
    mem_arr = np.zeros(1, dtype=np.int64)
    size_arr = np.zeros(C, dtype=np.int64)
    if mode == 2:
        mem_arr = np.argsort(np.asarray(class_of, dtype=np.int64), kind="stable").astype(np.int64)
        size_arr = np.bincount(np.asarray(class_of, dtype=np.int64), minlength=C).astype(np.int64)
    cstart_arr = np.concatenate([[0], np.cumsum(size_arr)]).astype(np.int64)
    cdef const int64_t[::1] members = mem_arr
    cdef const int64_t[::1] sizes = size_arr
    cdef const int64_t[::1] cstart = cstart_arr
    cmult_arr = np.ones(C, dtype=np.float64)
    ccum_arr = np.zeros(C, dtype=np.float64)
    cdef double[::1] cmult = cmult_arr
    cdef double[::1] ccum = ccum_arr
    cdef double acc, Cmass, M, x, y, mv, base
    cdef Py_ssize_t c, lastc = 0
    for c in range(C):
        if size_arr[c] > 0:
            lastc = c
    with nogil:
        for i in range(length):
            cur = H0 + i
            row = -1
            for L in range(order - 1, -1, -1):
                key = 0
                for j in range(L):
                    pos = cur - L + j
                    t = hist[pos] if pos >= 0 else 0
                    key = key | (t << (16 * j))
                row = _lookup(keys, lstart[L], lstart[L + 1], key)
                if row < lstart[L + 1] and keys[row] == key and tots[row] > 0:
                    break
            a = offs[row]
            b = offs[row + 1]
            if mode == 1:
                h = CTX_INIT
                for j in range(width):
                    pos = cur - width + j
                    t = hist[pos] if pos >= 0 else 0
                    h = _mix(h ^ <uint64_t>t)
                seed = _prf(sec, h, SALT_GREEN)
                _round_tables(seed, fa, fb, &tab[0])
                if record:
                    so[i] = seed
            elif mode == 2:
                inner = _mix(_mix(sec) ^ (ms_hash ^ SALT_SIR))
                for j in range(num_classes):
                    signs[j] = <unsigned char>(_mix(inner ^ <uint64_t>j) & 1)
                    cmult[j] = sm[signs[j]]
                if record:
                    so[i] = ms_hash
            if full:
                for j in range(V):
                    w[j] = smoothing
                for j in range(a, b):
                    w[nids[j]] += ncnt[j]
                if mode == 1:
                    # green tokens are the preimages of ranks [0, G)
                    for j in range(G):
                        t = _feistel_inv(&tab[0], j, fa, fb, V)
                        w[t] = w[t] * mult_plus
                elif mode == 2:
                    for j in range(V):
                        w[j] = w[j] * cmult[cls[j]]
            if mode == 3:
                r = (i + exp_shift) % exp_n
                inner = _mix(_mix(sec) ^ <uint64_t>r)
                # unseen tokens share weight == smoothing, so their best score
                # belongs to the largest xi among them
                tok = -1
                best = -INFINITY
                umax = -1.0
                uarg = -1
                for j in range(V):
                    xv = _unit(_mix(inner ^ <uint64_t>j))
                    if w[j] == smoothing:
                        if xv > umax:
                            umax = xv
                            uarg = j
                    else:
                        sc = log(xv) / w[j]
                        if sc > best:
                            best = sc
                            tok = j
                if uarg >= 0:
                    sc = log(umax) / smoothing
                    if sc > best or (sc == best and uarg < tok):
                        best = sc
                        tok = uarg
                if record:
                    so[i] = <uint64_t>r
            elif sampler == 1:
                tok = 0
                best = w[0]
                for j in range(1, V):
                    if w[j] > best:
                        best = w[j]
                        tok = j
            else:
                # mixture of observed counts (seen ids) and smoothing mass;
                # w[0:b-a] holds the cumulative count part
                acc = 0.0
                for j in range(a, b):
                    if mode == 1:
                        mv = mult_plus if _feistel_pair(&tab[0], nids[j] // fb, nids[j] % fb, fa, fb, V) < G else 1.0
                    elif mode == 2:
                        mv = cmult[cls[nids[j]]]
                    else:
                        mv = 1.0
                    acc = acc + mv * ncnt[j]
                    w[j - a] = acc
                Cmass = acc
                if mode == 1:
                    M = <double>G * mult_plus + <double>(V - G)
                elif mode == 2:
                    acc = 0.0
                    for c in range(num_classes):
                        acc = acc + <double>sizes[c] * cmult[c]
                        ccum[c] = acc
                    M = acc
                else:
                    M = <double>V
                x = _unit(_prf(gseed, <uint64_t>i, SALT_SAMPLE)) * (smoothing * M + Cmass)
                if x < Cmass:
                    lo = 0
                    hi = b - a
                    while lo < hi:
                        j = (lo + hi) >> 1
                        if w[j] <= x:
                            lo = j + 1
                        else:
                            hi = j
                    if lo > b - a - 1:
                        lo = b - a - 1
                    tok = nids[a + lo]
                else:
                    y = (x - Cmass) / smoothing
                    if mode == 1:
                        if y < G * mult_plus:
                            t = <int64_t>(y / mult_plus)
                            if t > G - 1:
                                t = G - 1
                        else:
                            t = G + <int64_t>(y - G * mult_plus)
                            if t > V - 1:
                                t = V - 1
                        tok = _feistel_inv(&tab[0], t, fa, fb, V)
                    elif mode == 2:
                        lo = 0
                        hi = num_classes
                        while lo < hi:
                            c = (lo + hi) >> 1
                            if ccum[c] <= y:
                                lo = c + 1
                            else:
                                hi = c
                        c = lo
                        if c >= num_classes:
                            c = lastc
                        base = ccum[c - 1] if c > 0 else 0.0
                        t = <int64_t>((y - base) / cmult[c])
                        if t > sizes[c] - 1:
                            t = sizes[c] - 1
                        tok = members[cstart[c] + t]
                    else:
                        tok = <Py_ssize_t>y
                        if tok > V - 1:
                            tok = V - 1
            o[i] = tok
            hist[cur] = tok
            if mode == 2:
                ms_hash = ms_hash + _mix(<uint64_t>cls[tok] ^ SALT_CLASS)
    return out, seeds_arr


def exp_cost(tokens, key, int n, int shift):
    cdef const int64_t[::1] tk = np.ascontiguousarray(tokens, dtype=np.int64)
    cdef uint64_t k = <uint64_t>(int(key) & 0xFFFFFFFFFFFFFFFF)
    cdef Py_ssize_t i
    cdef double c = 0.0
    for i in range(tk.shape[0]):
        c -= log(_unit(_prf(k, <uint64_t>((i + shift) % n), <uint64_t>tk[i])))
    return c


def exp_edit_cost(tokens, key, int n, int shift, int band, double penalty):
    cdef const int64_t[::1] tk = np.ascontiguousarray(tokens, dtype=np.int64)
    cdef uint64_t k = <uint64_t>(int(key) & 0xFFFFFFFFFFFFFFFF)
    cdef Py_ssize_t T = tk.shape[0], i, d, j
    cdef int W = 2 * band + 1
    prev_arr = np.full(W, np.inf)
    cur_arr = np.full(W, np.inf)
    cdef double[::1] prev = prev_arr
    cdef double[::1] cur = cur_arr
    cdef double[::1] tmp
    cdef double best, c
    cdef int64_t tok
    with nogil:
        for d in range(W):
            j = d - band
            prev[d] = j * penalty if j >= 0 else INFINITY
        for i in range(1, T + 1):
            tok = tk[i - 1]
            for d in range(W):
                j = i + d - band
                if j < 0:
                    cur[d] = INFINITY
                    continue
                best = INFINITY
                if j >= 1:
                    c = -log(_unit(_prf(k, <uint64_t>((j - 1 + shift) % n), <uint64_t>tok)))
                    best = prev[d] + c
                if d + 1 < W and prev[d + 1] + penalty < best:
                    best = prev[d + 1] + penalty
                if d >= 1 and cur[d - 1] + penalty < best:
                    best = cur[d - 1] + penalty
                if j == 0 and i * penalty < best:
                    best = i * penalty
                cur[d] = best
            tmp = prev
            prev = cur
            cur = tmp
        best = INFINITY
        for d in range(W):
            if prev[d] < best:
                best = prev[d]
    return best
