"""Acceptance criteria 1-9 on the shipped reference configuration.

Each test records one ``PASS``/``FAIL`` line; the lines are printed in the
terminal summary (see conftest).  The reference experiment runs twice, into
fresh directories, unless ``WMLAB_ACCEPT_DIR`` points at a directory whose
``run1``/``run2`` sub-directories should be reused (cells resume).

Run stand-alone with ``python3 tests/test_acceptance.py``.
"""
import os
import sys
from collections import defaultdict
from pathlib import Path

import numpy as np
import pytest
from scipy import stats

from wmlab import kernels
from wmlab.classifier import evaluate, loss_and_grad, train_classifier
from wmlab.config import REFERENCE_CONFIG, load_config
from wmlab.detector import detect
from wmlab.lm import next_token_distribution
from wmlab.harness import REPORT_FILE, World, load_report, parse_key, run_experiment
from wmlab.watermark import ExpKeySequence, WatermarkKey, exp_sample, watermarked_generate

pytestmark = pytest.mark.slow

RESULTS: dict[int, str] = {}

# tolerances, as stated in the criteria
KGW_TPR_MIN, CLEAN_FPR_MAX = 0.99, 0.001
EXP_TPR_MIN, EXP_FPR_MAX = 0.99, 0.02
A_F1_MIN = 0.70
SIGN_ALPHA = 0.05
PAIRED_ALPHA = 0.05
GRAD_RTOL = 1e-5
CHI_ALPHA = 0.01
N_KGW, N_CLEAN, N_EXP = 1000, 10_000, 1000
N_CHI = 100_000


def record(n: int, ok: bool, detail: str):
    RESULTS[n] = f"criterion {n}: {'PASS' if ok else 'FAIL'} - {detail}"
    assert ok, RESULTS[n]


def sign_test_p(wins: int, losses: int) -> float:
    """One-sided sign test; ties are dropped."""
    n = wins + losses
    return float(stats.binomtest(wins, n, 0.5, alternative="greater").pvalue) if n else 1.0


@pytest.fixture(scope="module")
def cfg():
    return load_config(REFERENCE_CONFIG, env={})


@pytest.fixture(scope="module")
def world(cfg):
    return World(cfg)


@pytest.fixture(scope="module")
def run_dirs(cfg, tmp_path_factory):
    base = os.environ.get("WMLAB_ACCEPT_DIR")
    base = Path(base) if base else tmp_path_factory.mktemp("reference")
    dirs = [base / "run1", base / "run2"]
    for d in dirs:
        res = run_experiment(cfg, out_dir=d)
        assert res.failed == [], res.failed
    return dirs


@pytest.fixture(scope="module")
def cells(run_dirs):
    out = defaultdict(list)
    for key, rec in load_report(run_dirs[0])["cells"].items():
        out[parse_key(key)["cell"]].append((parse_key(key), rec))
    return out


# ---------------------------------------------------------------- 1

def test_c1_detector_power_and_fpr(world, cfg):
    det = cfg["detection"]
    ids = world.model_ids
    prompts = world.prompts(N_CLEAN, 0xACC1)

    def run(scheme, n, watermark):
        hits = 0
        for j in range(n):
            m = ids[j % len(ids)]
            sc = world.keyed(scheme, m)
            t = watermarked_generate(world.models[m], prompts[j], sc if watermark else None, 200,
                                     rng_seed=kernels.derive_seed(0xACC1, j, int(watermark)))
            r = detect(t, sc, world.V, det["z_threshold"], det["alpha"], det["num_permutations"], rng_seed=j)
            hits += r.is_watermarked
        return hits / n

    kgw = world.schemes["KGW"]
    assert (kgw.gamma, kgw.delta, det["z_threshold"], det["alpha"], det["num_permutations"]) == (0.25, 2.0, 4.0, 0.01, 100)
    tpr, fpr = run("KGW", N_KGW, True), run("KGW", N_CLEAN, False)
    etpr, efpr = run("EXP", N_EXP, True), run("EXP", N_EXP, False)
    ok = tpr >= KGW_TPR_MIN and fpr <= CLEAN_FPR_MAX and etpr >= EXP_TPR_MIN and efpr <= EXP_FPR_MAX
    record(1, ok, f"KGW TPR {tpr:.4f} (n={N_KGW}), FPR {fpr:.4f} (n={N_CLEAN}); "
                  f"EXP TPR {etpr:.4f}, FPR {efpr:.4f} (n={N_EXP} each)")


# ---------------------------------------------------------------- 2

def test_c2_uniqueness_without_watermark(cells):
    f1 = [r["macro_f1"] for _, r in cells["A"]]
    record(2, float(np.mean(f1)) >= A_F1_MIN,
           f"scenario-A macro-F1 mean {np.mean(f1):.4f} (min {min(f1):.4f}) over {len(f1)} seeds")


# ---------------------------------------------------------------- 3

def test_c3_watermark_separability(cells):
    a = {f["seed"]: r["macro_f1"] for f, r in cells["A"]}
    by_scheme = defaultdict(list)
    for f, r in cells["C"]:
        by_scheme[f["scheme"]].append((r["macro_f1"] - a[f["seed"]], r["f1_change"]))
    parts, ok = [], True
    for x, rows in sorted(by_scheme.items()):
        d = np.array([r[0] for r in rows])
        p = sign_test_p(int((d > 0).sum()), int((d < 0).sum()))
        chg = float(np.mean([r[1] for r in rows]))
        ok &= p < SIGN_ALPHA and chg > 0
        parts.append(f"{x} {int((d > 0).sum())}/{len(d)} p={p:.3f} F1_change={chg:+.2%}")
    record(3, ok, "; ".join(parts))


# ---------------------------------------------------------------- 4

def test_c4_utility_cost_ordering(cells):
    rel = defaultdict(list)
    for f, r in cells["C"]:
        rel[f["scheme"]].append(np.mean(list(r["ppl_rel_change"].values())))
    mean = {x: float(np.mean(v)) for x, v in rel.items()}
    best = min(mean, key=mean.get)
    ok = best == "KGW" and all(mean["KGW"] < v for x, v in mean.items() if x != "KGW")
    record(4, ok, "mean relative perplexity increase " +
           ", ".join(f"{x} {v:+.2%}" for x, v in sorted(mean.items(), key=lambda kv: kv[1])))


# ---------------------------------------------------------------- 5

def test_c5_attack_tradeoff(cells):
    by_attack = defaultdict(list)
    for f, r in cells["ATTACK"]:
        by_attack[f["attack"]].append((f["scheme"], r))
    parts, ok = [], True
    for atk, rows in sorted(by_attack.items()):
        asr = float(np.mean([r["success_rate"] for _, r in rows]))
        ppl_ok = all(r["ppl_post"] > r["ppl_pre"] and r["ppl_p_value"] < PAIRED_ALPHA and r["texts"] >= 100
                     for _, r in rows)
        ok &= asr > 0 and ppl_ok
        detail = ",".join(f"{x}={r['success_rate']:.2f}" for x, r in sorted(rows, key=lambda t: t[0]))
        parts.append(f"{atk} ASR {asr:.3f} [{detail}] ppl-up {'yes' if ppl_ok else 'no'}")
    record(5, ok, "; ".join(parts))


# ---------------------------------------------------------------- 6

def test_c6_stealing_radioactivity(cells, cfg):
    st = cfg["stealing"]
    paired = str(st["paired_queries"])
    clean, marked = {}, defaultdict(dict)
    sweep = defaultdict(lambda: defaultdict(list))
    for f, r in cells["STEAL"]:
        if f["scheme"] == "none":
            clean[f["seed"]] = r["flag_rate"]
        else:
            marked[f["scheme"]][f["seed"]] = r["flag_rate"][f["scheme"]]
            for n, v in r["flag_rate"][f["scheme"]].items():
                sweep[f["scheme"]][int(n)].append(v)
    parts, ok = [], True
    for x in ("KGW", "Unigram"):
        d = np.array([marked[x][s][paired] - clean[s][x][paired] for s in sorted(marked[x])])
        p = sign_test_p(int((d > 0).sum()), int((d < 0).sum()))
        curve = [float(np.mean(sweep[x][n])) for n in st["num_queries"]]
        mono = all(b >= a for a, b in zip(curve, curve[1:]))
        ok &= p < SIGN_ALPHA and mono and len(d) >= 20
        parts.append(f"{x} {int((d > 0).sum())}/{len(d)} wins p={p:.2g}, flag rate vs N "
                     + "/".join(f"{c:.2f}" for c in curve))
    record(6, ok, "; ".join(parts))


# ---------------------------------------------------------------- 7

def test_c7_numerical_hygiene(world):
    rng = np.random.default_rng(7)
    Z, y = rng.normal(size=(40, 8)), rng.integers(0, 4, size=40)
    W, b = rng.normal(size=(4, 8)), rng.normal(size=4)
    _, gW, gb = loss_and_grad(W, b, Z, y, 1e-3)
    h, num = 1e-6, np.zeros(W.size + b.size)
    theta = np.concatenate([W.ravel(), b])
    for i in range(theta.size):
        tp, tm = theta.copy(), theta.copy()
        tp[i] += h
        tm[i] -= h
        f = lambda t: loss_and_grad(t[:W.size].reshape(W.shape), t[W.size:], Z, y, 1e-3)[0]
        num[i] = (f(tp) - f(tm)) / (2 * h)
    grad_err = float(np.linalg.norm(np.concatenate([gW.ravel(), gb]) - num) / np.linalg.norm(num))

    X = rng.normal(size=(200, 5))
    labels = [f"c{int(v)}" for v in (X[:, 0] + 0.8 * rng.normal(size=200) > 0) + (X[:, 1] > 0.5)]
    clf = train_classifier(X[:120], labels[:120])
    met = evaluate(clf, X[120:], labels[120:])
    pred = clf.predict(X[120:])
    recount_ok = True
    for c, lab in enumerate(met.class_labels):
        tp = sum(t == lab and p == lab for t, p in zip(labels[120:], pred))
        fp = sum(t != lab and p == lab for t, p in zip(labels[120:], pred))
        fn = sum(t == lab and p != lab for t, p in zip(labels[120:], pred))
        pr = tp / (tp + fp) if tp + fp else 0.0
        rc = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * pr * rc / (pr + rc) if pr + rc else 0.0
        recount_ok &= met.precision[c] == pr and met.recall[c] == rc and met.f1[c] == f1

    # EXP marginals on a real next-token distribution (top tokens + pooled tail)
    m = world.models["m1"]
    p_full = next_token_distribution(m, world.pool[:16])
    top = np.argsort(p_full)[::-1][:9]
    p = np.append(p_full[top], 1.0 - p_full[top].sum())
    draws = np.array([exp_sample(p, ExpKeySequence(WatermarkKey(s), 1, len(p)).row(0)) for s in range(N_CHI)])
    pval = float(stats.chisquare(np.bincount(draws, minlength=len(p)), p * N_CHI).pvalue)
    ok = grad_err <= GRAD_RTOL and recount_ok and pval > CHI_ALPHA
    record(7, ok, f"gradient rel. error {grad_err:.2e}; brute-force recount {'exact' if recount_ok else 'MISMATCH'}; "
                  f"EXP chi-square p={pval:.3f} ({N_CHI} draws)")


# ---------------------------------------------------------------- 8

def test_c8_determinism(run_dirs):
    a, b = ((d / REPORT_FILE).read_bytes() for d in run_dirs)
    record(8, a == b, f"two reference runs: report.json {'byte-identical' if a == b else 'DIFFER'} ({len(a)} bytes)")


# ---------------------------------------------------------------- 9

def test_c9_learning_curve(cells):
    by_n = defaultdict(list)
    for f, r in cells["LC"]:
        by_n[f["n"]].append(r["macro_f1"])
    ns = sorted(by_n)
    curve = [float(np.mean(by_n[n])) for n in ns]
    ok = ns == [50, 100, 250, 500] and all(b >= a for a, b in zip(curve, curve[1:]))
    record(9, ok, "macro-F1 " + ", ".join(f"n={n}: {c:.4f}" for n, c in zip(ns, curve)))


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-p", "no:cacheprovider"]))
