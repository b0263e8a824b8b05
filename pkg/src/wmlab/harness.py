"""Experiment orchestration: the cell plan, a resumable runner, the report
store and the plot-data emitters.

A run is a set of independent *cells* keyed by strings such as
``C/scheme=KGW/seed=3``. Each finished cell is appended as one JSON line to
``cells.jsonl`` together with the config fingerprint, so a rerun skips what
is already there. ``report.json`` is rebuilt from those lines with keys
sorted and timing fields dropped, which makes it byte-comparable across runs.
"""
from __future__ import annotations

import hashlib
import json
import math
import os
import time
import traceback
from collections import defaultdict
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from decimal import ROUND_HALF_UP, Decimal
from functools import cached_property
from pathlib import Path

import numpy as np
from scipy import stats

from wmlab import __version__, kernels
from wmlab.attacks import AttackConfig, SynonymTable, apply_attack, attack_success_rate
from wmlab.classifier import FeatureRegistry, evaluate, extract_matrix, f1_change, stratified_indices, train_classifier
from wmlab.config import ExperimentConfig
from wmlab.detector import detect, flag_model, scheme_scores
from wmlab.errors import InvalidInput, WmlabError
from wmlab.lm import NGramModel, TokenSequence, load_corpus, perplexity, train_ngram
from wmlab.stealing import StealingConfig, distill, query_victim, radioactivity_check
from wmlab.watermark import SchemeConfig, SchemeKind, WatermarkKey, watermarked_generate

CELLS_FILE = "cells.jsonl"
REPORT_FILE = "report.json"
SUMMARY_FILE = "summary.txt"
TIMING_FILE = "timing.json"
CLASSIFIER_NAME = "logreg"


def name_key(name: str) -> int:
    return int.from_bytes(hashlib.sha256(name.encode()).digest()[:8], "little")


def _mean(xs) -> float:
    return float(np.mean(xs)) if len(xs) else float("nan")


def _std(xs) -> float:
    return float(np.std(xs)) if len(xs) else float("nan")


# ---------------------------------------------------------------- cell plan

def plan_cells(data: dict) -> list[str]:
    """Every cell key the config asks for, in execution order."""
    models = sorted(m["id"] for m in data["models"])
    schemes = sorted(s["name"] for s in data["schemes"])
    attacks = sorted(a["name"] for a in data["attacks"])
    scen = set(data["scenarios"])
    keys = []
    for s in sorted(set(data["seeds"])):
        if scen:
            keys.append(f"A/seed={s}")
        for n in sorted(set(data["dataset"]["learning_curve"])):
            keys.append(f"LC/n={n}/seed={s}")
        if "C" in scen:
            keys += [f"C/scheme={x}/seed={s}" for x in schemes]
        if "B" in scen:
            keys += [f"B/model={m}/scheme={x}/seed={s}" for m in models for x in schemes]
    if schemes:
        for s in sorted(set(data["attack_eval"]["seeds"])):
            keys += [f"ATTACK/scheme={x}/attack={a}/seed={s}" for x in schemes for a in attacks]
    st = data["stealing"]
    if st["enabled"] and st["schemes"]:
        for s in range(st["paired_seeds"]):
            keys += [f"STEAL/scheme={x}/seed={s}" for x in ["none"] + sorted(set(st["schemes"]))]
    return keys


def parse_key(key: str) -> dict:
    kind, *parts = key.split("/")
    out = {"cell": kind}
    for p in parts:
        k, v = p.split("=", 1)
        out[k] = int(v) if k in ("seed", "n") else v
    return out


def unit_of(key: str) -> str:
    """Cells sharing a unit share cached generations; units run in parallel."""
    f = parse_key(key)
    if f["cell"] in ("A", "B", "C", "LC"):
        return f"seed={f['seed']}"
    if f["cell"] == "ATTACK":
        return f"attack/seed={f['seed']}"
    return f"steal/seed={f['seed']}"


# ---------------------------------------------------------------- world

class World:
    """Everything derived from the config alone: corpus, models, keys."""

    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        d = cfg.data
        self.vocab, _, docs = load_corpus(cfg.corpus_path, cap=d["corpus"]["vocab_cap"])
        self.V = len(self.vocab)
        specs = sorted(d["models"], key=lambda m: m["id"])
        buckets = [[] for _ in range(len(specs) + 1)]
        for i, doc in enumerate(docs):
            buckets[i % len(buckets)].append(doc)
        shards = [np.concatenate(b) if b else np.zeros(0, np.int64) for b in buckets]
        self.pool = shards[-1]
        self.models: dict[str, NGramModel] = {
            m["id"]: train_ngram(shards[i], m["order"], m["smoothing_k"], m["id"], self.vocab)
            for i, m in enumerate(specs)
        }
        self.model_ids = [m["id"] for m in specs]
        self.table = SynonymTable.frequency_buckets(self.V, 4)
        self.schemes = {s["name"]: self._scheme(s) for s in sorted(d["schemes"], key=lambda s: s["name"])}
        self.attacks = {a["name"]: a for a in d["attacks"]}

    def _scheme(self, s: dict) -> SchemeConfig:
        kind = SchemeKind(s["kind"])
        class_of = None
        if kind is SchemeKind.SIRLITE:
            class_of = SynonymTable.frequency_buckets(self.V, s["synonym_bucket"]).class_of
        return SchemeConfig(kind=kind, key=WatermarkKey(0), gamma=s["gamma"], delta=s["delta"],
                            context_width=s["context_width"] if kind is SchemeKind.KGW else 0,
                            exp_key_length=s["exp_key_length"], exp_shift=s["exp_shift"],
                            class_of=class_of, name=s["name"])

    def keyed(self, scheme: str, model_id: str) -> SchemeConfig:
        """Each model owner watermarks with a key of its own."""
        secret = kernels.derive_seed(self.cfg["secret"], name_key(scheme), name_key(model_id))
        return self.schemes[scheme].with_key(secret)

    @cached_property
    def registry(self) -> FeatureRegistry:
        feats = [replace(self.keyed(x, m), name=f"{x}@{m}") for x in self.schemes for m in self.model_ids]
        return FeatureRegistry(list(self.models.values()), feats,
                               use_scheme_features=self.cfg["classifier"]["use_scheme_features"])

    @cached_property
    def reference_lm(self) -> NGramModel:
        ae = self.cfg["attack_eval"]
        return train_ngram(self.pool, ae["reference_order"], ae["reference_smoothing"], "attacker-ref", self.vocab)

    def prompts(self, count: int, *tag: int) -> list[np.ndarray]:
        L = self.cfg["dataset"]["prompt_length"]
        rng = np.random.default_rng([*tag, 0x50524F4D])
        starts = rng.integers(0, len(self.pool) - L, size=count)
        return [self.pool[s : s + L].copy() for s in starts]


# ---------------------------------------------------------------- per-seed data

class SeedData:
    """Generations, features and baselines of one seed (computed lazily)."""

    def __init__(self, world: World, seed: int):
        self.w, self.seed = world, seed
        ds = world.cfg["dataset"]
        self.n_train, self.n_test = ds["train_per_class"], ds["test_per_class"]
        self.n = self.n_train + self.n_test
        self.length = ds["completion_length"]
        self.prompts = world.prompts(self.n, seed)
        self.labels = [m for m in world.model_ids for _ in range(self.n)]
        self.train_idx, self.test_idx = stratified_indices(self.labels, self.n_train, self.n_test, seed)
        self._wm: dict[str, dict] = {}

    def _gen(self, model_id: str, scheme: SchemeConfig | None) -> list[TokenSequence]:
        m = self.w.models[model_id]
        return [
            watermarked_generate(m, p, scheme, self.length, rng_seed=kernels.derive_seed(self.seed, name_key(model_id), j))
            for j, p in enumerate(self.prompts)
        ]

    def _ppl(self, model_id: str, texts) -> np.ndarray:
        m = self.w.models[model_id]
        return np.array([perplexity(m, t, p) for t, p in zip(texts, self.prompts)])

    @cached_property
    def nw(self) -> dict:
        texts = {m: self._gen(m, None) for m in self.w.model_ids}
        flat = [t for m in self.w.model_ids for t in texts[m]]
        return {"texts": texts, "X": extract_matrix(flat, self.w.registry),
                "ppl": {m: self._ppl(m, texts[m]) for m in self.w.model_ids}}

    def wm(self, scheme: str) -> dict:
        if scheme not in self._wm:
            texts = {m: self._gen(m, self.w.keyed(scheme, m)) for m in self.w.model_ids}
            flat = [t for m in self.w.model_ids for t in texts[m]]
            self._wm[scheme] = {"texts": texts, "X": extract_matrix(flat, self.w.registry),
                                "ppl": {m: self._ppl(m, texts[m]) for m in self.w.model_ids}}
        return self._wm[scheme]

    def fit(self, X: np.ndarray, train_idx=None):
        c = self.w.cfg["classifier"]
        tr = self.train_idx if train_idx is None else train_idx
        clf = train_classifier(X[tr], [self.labels[i] for i in tr], epochs=c["epochs"],
                               learning_rate=c["learning_rate"], l2=c["l2"], rng_seed=self.seed,
                               class_labels=self.w.model_ids)
        return evaluate(clf, X[self.test_idx], [self.labels[i] for i in self.test_idx])

    @cached_property
    def a_metrics(self):
        return self.fit(self.nw["X"])

    def block(self, model_id: str) -> slice:
        i = self.w.model_ids.index(model_id)
        return slice(i * self.n, (i + 1) * self.n)


# ---------------------------------------------------------------- cells

def _ppl_stats(ppl: dict) -> dict:
    return {m: {"mean": float(v.mean()), "std": float(v.std())} for m, v in ppl.items()}


def cell_a(sd: SeedData, f: dict) -> dict:
    met = sd.a_metrics
    return {"macro_f1": met.macro_f1, "metrics": met.to_record(), "ppl": _ppl_stats(sd.nw["ppl"])}


def cell_lc(sd: SeedData, f: dict) -> dict:
    n = f["n"]
    if n > sd.n_train:
        raise InvalidInput(f"learning-curve size {n} exceeds train_per_class {sd.n_train}")
    labels = np.array(sd.labels)
    tr = np.concatenate([sd.train_idx[labels[sd.train_idx] == m][:n] for m in sd.w.model_ids])
    met = sd.fit(sd.nw["X"], np.sort(tr))
    return {"train_per_class": n, "macro_f1": met.macro_f1}


def _detections(sd: SeedData, scheme: str, texts: dict, subsets: dict) -> list[int]:
    """Verdict per text (model-block order) with each model's own key."""
    w, det = sd.w, sd.w.cfg["detection"]
    out = []
    for m in w.model_ids:
        sc = w.keyed(scheme, m)
        for j in subsets[m]:
            r = detect(texts[m][j], sc, w.V, z_threshold=det["z_threshold"], alpha=det["alpha"],
                       num_permutations=det["num_permutations"],
                       rng_seed=kernels.derive_seed(sd.seed, name_key(m), j) & 0xFFFFFFFF)
            out.append(int(r.is_watermarked))
    return out


def cell_c(sd: SeedData, f: dict) -> dict:
    x = f["scheme"]
    d = sd.wm(x)
    met = sd.fit(d["X"])
    a = sd.a_metrics
    if sd.w.schemes[x].kind is SchemeKind.EXP:
        # permutation tests are costly: score only each class's held-out texts
        subsets = {m: sorted(int(i) - sd.block(m).start for i in sd.test_idx
                             if sd.block(m).start <= i < sd.block(m).stop) for m in sd.w.model_ids}
    else:
        subsets = {m: range(sd.n) for m in sd.w.model_ids}
    tp = _detections(sd, x, d["texts"], subsets)
    fp = _detections(sd, x, sd.nw["texts"], subsets)
    rel = {m: float(d["ppl"][m].mean() / sd.nw["ppl"][m].mean() - 1.0) for m in sd.w.model_ids}
    return {
        "scheme": x, "macro_f1": met.macro_f1, "f1_nw": a.macro_f1,
        "f1_change": f1_change(met.macro_f1, a.macro_f1), "metrics": met.to_record(),
        "ppl": _ppl_stats(d["ppl"]), "ppl_rel_change": rel,
        "tpr": _mean(tp), "fpr": _mean(fp), "detections": len(tp), "tp": int(sum(tp)), "fp": int(sum(fp)),
    }


def cell_b(sd: SeedData, f: dict) -> dict:
    x, m = f["scheme"], f["model"]
    X = sd.nw["X"].copy()
    blk = sd.block(m)
    X[blk] = sd.wm(x)["X"][blk]
    met = sd.fit(X)
    a = sd.a_metrics
    i = sd.w.model_ids.index(m)
    return {
        "scheme": x, "model": m, "macro_f1": met.macro_f1, "f1_nw": a.macro_f1,
        "f1_change": f1_change(met.macro_f1, a.macro_f1),
        "model_f1": float(met.f1[i]), "model_f1_nw": float(a.f1[i]), "metrics": met.to_record(),
    }


def _paired_p(diff: np.ndarray) -> float:
    """One-sided Wilcoxon signed-rank p-value for median(diff) > 0."""
    if not np.any(diff != 0):
        return 1.0
    return float(stats.wilcoxon(diff, alternative="greater").pvalue)


def cell_attack(w: World, cache: dict, f: dict) -> dict:
    x, name, seed = f["scheme"], f["attack"], f["seed"]
    sd = SeedData(w, seed)
    a = w.attacks[name]
    det = w.cfg["detection"]
    count = w.cfg["attack_eval"]["texts"]
    k = len(w.model_ids)
    if count > k * sd.n:
        raise InvalidInput(f"attack_eval.texts={count} exceeds available texts")
    ppl_pre, ppl_post, s_pre, s_post, pre, post, changed = [], [], [], [], [], [], []
    for i in range(count):
        m, j = w.model_ids[i % k], i // k
        # the same generation C/seed cells use for text j of model m
        sc, prompt = w.keyed(x, m), sd.prompts[j]
        text = watermarked_generate(w.models[m], prompt, sc, sd.length,
                                    rng_seed=kernels.derive_seed(seed, name_key(m), j))
        cfg = AttackConfig(a["kind"], edit_rate=a["edit_rate"], window=a["window"],
                           perplexity_budget=a["perplexity_budget"],
                           rng_seed=kernels.derive_seed(seed, name_key(name), i))
        att = apply_attack(text, cfg, w.table, w.reference_lm, prefix=prompt)
        dseed = kernels.derive_seed(seed, i) & 0xFFFFFFFF
        pre.append(detect(text, sc, w.V, det["z_threshold"], det["alpha"], det["num_permutations"], dseed))
        post.append(detect(att, sc, w.V, det["z_threshold"], det["alpha"], det["num_permutations"], dseed))
        s_pre.append(float(scheme_scores([text], sc, w.V)[0]))
        s_post.append(float(scheme_scores([att], sc, w.V)[0]))
        ppl_pre.append(perplexity(w.models[m], text, prompt))
        ppl_post.append(perplexity(w.models[m], att, prompt))
        changed.append(float(np.mean(att.ids != text.ids)))
    ppl_pre, ppl_post = np.array(ppl_pre), np.array(ppl_post)
    s_pre, s_post = np.array(s_pre), np.array(s_post)
    return {
        "scheme": x, "attack": name, "texts": count,
        "success_rate": attack_success_rate(pre, post),
        "tpr_pre": _mean([r.is_watermarked for r in pre]), "tpr_post": _mean([r.is_watermarked for r in post]),
        "ppl_pre": float(ppl_pre.mean()), "ppl_post": float(ppl_post.mean()),
        "ppl_p_value": _paired_p(ppl_post - ppl_pre),
        "score_pre": float(s_pre.mean()), "score_post": float(s_post.mean()),
        "score_p_value": _paired_p(s_pre - s_post),
        "changed_fraction": _mean(changed),
    }


def _steal_scheme(w: World, name: str) -> SchemeConfig:
    victim = w.cfg["stealing"]["victim"] or w.model_ids[0]
    sc = w.keyed(name, victim)
    if sc.kind is not SchemeKind.EXP:
        sc = replace(sc, delta=w.cfg["stealing"]["delta"])
    return sc


def cell_steal(w: World, f: dict) -> dict:
    st = w.cfg["stealing"]
    x, seed = f["scheme"], f["seed"]
    victim = w.models[st["victim"] or w.model_ids[0]]
    sweep = seed < st["sweep_seeds"]
    sizes = sorted(set(st["num_queries"]) | {st["paired_queries"]}) if sweep else [st["paired_queries"]]
    queries = w.prompts(max(sizes), seed, 0x57EA1)
    probes = w.prompts(st["probes"], seed, 0x9B0BE)
    scheme = None if x == "none" else _steal_scheme(w, x)
    cfg = StealingConfig(max(sizes), queries, st["surrogate_order"], st["surrogate_smoothing"], scheme,
                         w.cfg["dataset"]["completion_length"])
    responses = query_victim(victim, cfg, kernels.derive_seed(seed, 0x57EA1))
    detectors = sorted(st["schemes"]) if x == "none" else [x]
    det = w.cfg["detection"]
    out = {"scheme": x, "seed": seed, "flag_rate": {}}
    for n in sizes:
        sur = distill(responses[:n], victim, st["surrogate_order"], st["surrogate_smoothing"])
        for dname in detectors:
            verdict, _ = radioactivity_check(sur, _steal_scheme(w, dname), st["probes"], det["flag_rate_threshold"],
                                             kernels.derive_seed(seed, n, 0x9B0BE), probes,
                                             w.cfg["dataset"]["completion_length"], det["num_permutations"])
            out["flag_rate"].setdefault(dname, {})[str(n)] = verdict.flag_rate
    return out


def run_cell(world: World, cache: dict, key: str) -> dict:
    f = parse_key(key)
    kind = f["cell"]
    if kind == "ATTACK":
        return cell_attack(world, cache, f)
    if kind == "STEAL":
        return cell_steal(world, f)
    seed = f["seed"]
    if seed not in cache:
        cache.clear()  # keep one seed's generations in memory
        cache[seed] = SeedData(world, seed)
    sd = cache[seed]
    return {"A": cell_a, "LC": cell_lc, "B": cell_b, "C": cell_c}[kind](sd, f)


# ---------------------------------------------------------------- store

def _read_cells(path: Path, fp: str) -> dict:
    done = {}
    if not path.exists():
        return done
    for line in path.read_text().splitlines():
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError:
            continue  # a torn final line from an interrupted run
        if rec.get("fingerprint") == fp:
            done[rec["key"]] = rec
    return done


def _append(path: Path, rec: dict) -> None:
    line = json.dumps(rec, sort_keys=True, allow_nan=True) + "\n"
    with open(path, "a", encoding="utf-8") as fh:
        fh.write(line)
        fh.flush()
        os.fsync(fh.fileno())


def _run_unit(cfg: ExperimentConfig, keys: list[str], world: World | None = None):
    world = world or World(cfg)
    cache: dict = {}
    for key in keys:
        t0 = time.perf_counter()
        try:
            rec = {"key": key, "status": "ok", "record": run_cell(world, cache, key)}
        except Exception as exc:  # a failing cell must not abort the run
            rec = {"key": key, "status": "failed", "error": f"{type(exc).__name__}: {exc}",
                   "traceback": traceback.format_exc()}
        rec["wall_clock_s"] = round(time.perf_counter() - t0, 3)
        yield rec


def _run_unit_list(cfg, keys):
    return list(_run_unit(cfg, keys))


@dataclass
class RunResult:
    report: dict
    executed: list[str]
    failed: list[str]
    out_dir: Path


def run_experiment(cfg: ExperimentConfig, out_dir: Path | str | None = None, workers: int | None = None,
                   log=None) -> RunResult:
    out = Path(out_dir) if out_dir is not None else cfg.out_dir
    out.mkdir(parents=True, exist_ok=True)
    fp = cfg.fingerprint()
    cells_path = out / CELLS_FILE
    planned = plan_cells(cfg.data)
    done = _read_cells(cells_path, fp)
    pending = [k for k in planned if done.get(k, {}).get("status") != "ok"]
    units: dict[str, list[str]] = defaultdict(list)
    for k in pending:
        units[unit_of(k)].append(k)
    workers = workers or cfg["workers"]
    executed = []

    def accept(rec):
        rec["fingerprint"] = fp
        _append(cells_path, rec)
        done[rec["key"]] = rec
        executed.append(rec["key"])
        if log:
            log(f"{rec['status']:6s} {rec['key']} ({rec['wall_clock_s']:.1f}s)")

    if workers > 1 and len(units) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for recs in pool.map(_run_unit_list, [cfg] * len(units), list(units.values())):
                for rec in recs:
                    accept(rec)
    elif units:
        world = World(cfg)
        for keys in units.values():
            for rec in _run_unit(cfg, keys, world):
                accept(rec)
    report = build_report(cfg, {k: done[k] for k in planned if k in done})
    write_report(out, report, {k: done[k].get("wall_clock_s") for k in planned if k in done})
    return RunResult(report, executed, report["failed"], out)


def build_report(cfg: ExperimentConfig, recs: dict) -> dict:
    world_layout = None
    try:
        world_layout = _layout(cfg)
    except WmlabError:
        pass
    return {
        "tool": "wmlab",
        "version": __version__,
        "fingerprint": cfg.fingerprint(),
        "config": cfg.public_dict(),
        "feature_layout": world_layout,
        "cells": {k: recs[k]["record"] for k in sorted(recs) if recs[k]["status"] == "ok"},
        "failed": sorted(k for k in recs if recs[k]["status"] != "ok"),
        "errors": {k: recs[k]["error"] for k in sorted(recs) if recs[k]["status"] != "ok"},
    }


def _layout(cfg: ExperimentConfig) -> list[str]:
    ids = sorted(m["id"] for m in cfg["models"])
    feats = []
    if cfg["classifier"]["use_scheme_features"]:
        feats = [f"z:{s['name']}@{m}" for s in sorted(cfg["schemes"], key=lambda s: s["name"]) for m in ids]
    hist = [f"hist:{2 + j}" for j in range(512)]
    return hist + [f"log_ppl:{m}" for m in ids] + feats + [f"log_mean_rank:{m}" for m in ids]


def _dump(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=1, allow_nan=True) + "\n"


def write_report(out: Path, report: dict, timing: dict) -> None:
    tmp = out / (REPORT_FILE + ".tmp")
    tmp.write_text(_dump(report))
    tmp.replace(out / REPORT_FILE)
    (out / TIMING_FILE).write_text(_dump(timing))
    (out / SUMMARY_FILE).write_text(summary_text(report))


def load_report(out_dir) -> dict:
    path = Path(out_dir) / REPORT_FILE
    if not path.exists():
        raise InvalidInput(f"no report at {path}; run the experiment first")
    return json.loads(path.read_text())


# ---------------------------------------------------------------- tables

def format_relative_change(ppl_wm: float, ppl_nw: float) -> str:
    """Percent with one decimal, halves rounded away from zero: 3.35 -> 4.03 is '+20.3%'."""
    if ppl_nw == 0:
        raise InvalidInput("baseline perplexity is zero")
    pct = Decimal(repr((ppl_wm - ppl_nw) / ppl_nw * 100.0)).quantize(Decimal("0.1"), rounding=ROUND_HALF_UP)
    if pct == 0:
        pct = abs(pct)
    return f"{'+' if pct > 0 else ''}{pct}%"


def _cells(report: dict, prefix: str) -> dict:
    return {k: v for k, v in report["cells"].items() if k.startswith(prefix + "/")}


def perplexity_delta_table(report: dict) -> list[dict]:
    """Per scheme: mean perplexity (over models and seeds) and change vs no watermark."""
    a = _cells(report, "A")
    if not a:
        raise InvalidInput("report has no no-watermark (A) cells to use as baseline")
    models = sorted(next(iter(a.values()))["ppl"])
    nw = {m: _mean([c["ppl"][m]["mean"] for c in a.values()]) for m in models}
    nw_avg = _mean(list(nw.values()))
    rows = [{"scheme": "NW", "ppl": nw_avg, "per_model": nw, "rel_change": 0.0, "formatted": f"{nw_avg:.2f}"}]
    by_scheme = defaultdict(list)
    for c in _cells(report, "C").values():
        by_scheme[c["scheme"]].append(c)
    for x in sorted(by_scheme):
        per = {m: _mean([c["ppl"][m]["mean"] for c in by_scheme[x]]) for m in models}
        avg = _mean(list(per.values()))
        rel = _mean([_mean(list(c["ppl_rel_change"].values())) for c in by_scheme[x]])
        rows.append({"scheme": x, "ppl": avg, "per_model": per, "rel_change": rel,
                     "formatted": f"{avg:.2f} ({format_relative_change(avg, nw_avg)})"})
    return rows


PLOT_KINDS = ("f1_bars", "attack_tradeoff", "learning_curve", "n_sweep")


def _required(report: dict, kind: str) -> list[str]:
    plan = plan_cells(report["config"] | {"secret": 0}) if "config" in report else []
    prefix = {"f1_bars": ("A/", "C/"), "attack_tradeoff": ("ATTACK/",), "learning_curve": ("LC/",),
              "n_sweep": ("STEAL/",)}[kind]
    return [k for k in plan if k.startswith(prefix)]


def plot_rows(report: dict, kind: str) -> tuple[list[str], list[list]]:
    if kind not in PLOT_KINDS:
        raise InvalidInput(f"unknown plot kind {kind!r}; choose from {PLOT_KINDS}")
    need = _required(report, kind)
    missing = [k for k in need if k not in report.get("cells", {})]
    if missing or not need:
        raise InvalidInput(f"{kind}: missing cells: {', '.join(missing) or '(none planned)'}")
    if kind == "f1_bars":
        a = _mean([c["macro_f1"] for c in _cells(report, "A").values()])
        groups = defaultdict(list)
        for c in _cells(report, "C").values():
            groups[c["scheme"]].append(c)
        rows = [[CLASSIFIER_NAME, x, a, _mean([c["macro_f1"] for c in g]), _mean([c["f1_change"] for c in g])]
                for x, g in sorted(groups.items())]
        return ["classifier", "scheme", "f1_nw", "f1_wm", "f1_change"], rows
    if kind == "attack_tradeoff":
        groups = defaultdict(list)
        for c in _cells(report, "ATTACK").values():
            groups[(c["scheme"], c["attack"])].append(c)
        rows = [[x, at, _mean([c["success_rate"] for c in g]), _mean([c["ppl_pre"] for c in g]),
                 _mean([c["ppl_post"] for c in g])] for (x, at), g in sorted(groups.items())]
        return ["scheme", "attack", "success_rate", "ppl_pre", "ppl_post"], rows
    if kind == "learning_curve":
        groups = defaultdict(list)
        for c in _cells(report, "LC").values():
            groups[c["train_per_class"]].append(c["macro_f1"])
        return ["train_per_class", "macro_f1_mean", "macro_f1_std", "seeds"], [
            [n, _mean(v), _std(v), len(v)] for n, v in sorted(groups.items())]
    groups = defaultdict(lambda: defaultdict(list))
    clean = defaultdict(lambda: defaultdict(list))
    for c in _cells(report, "STEAL").values():
        for det, by_n in c["flag_rate"].items():
            for n, r in by_n.items():
                (clean if c["scheme"] == "none" else groups)[det][int(n)].append(r)
    rows = [[det, n, _mean(v), _mean(clean[det][n]), len(v)]
            for det in sorted(groups) for n, v in sorted(groups[det].items())]
    return ["scheme", "num_queries", "flag_rate_mean", "clean_flag_rate_mean", "seeds"], rows


def _fmt(v) -> str:
    if isinstance(v, float):
        return "nan" if math.isnan(v) else f"{v:.6g}"
    return str(v)


def emit_plot_data(report: dict, kind: str, out_dir) -> Path:
    header, rows = plot_rows(report, kind)
    path = Path(out_dir) / f"{kind}.tsv"
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = ["\t".join(header)] + ["\t".join(_fmt(v) for v in r) for r in rows]
    path.write_text("\n".join(lines) + "\n")
    return path


def _table(header, rows) -> str:
    cells = [header] + [[_fmt(v) for v in r] for r in rows]
    width = [max(len(r[i]) for r in cells) for i in range(len(header))]
    return "\n".join("  ".join(c.ljust(w) for c, w in zip(r, width)) for r in cells)


def summary_text(report: dict) -> str:
    out = [f"wmlab {report['version']}  config {report['fingerprint'][:16]}",
           f"cells: {len(report['cells'])} ok, {len(report['failed'])} failed", ""]
    for kind, title in (("f1_bars", "Macro-F1, no watermark vs watermark (scenarios A / C)"),
                        ("learning_curve", "Learning curve (scenario A)"),
                        ("attack_tradeoff", "Attacks"),
                        ("n_sweep", "Stealing: surrogate flag rate")):
        try:
            header, rows = plot_rows(report, kind)
        except InvalidInput:
            continue
        out += [title, _table(header, rows), ""]
    try:
        rows = perplexity_delta_table(report)
        out += ["Perplexity (change vs no watermark)",
                _table(["scheme", "perplexity", "mean_rel_change"],
                       [[r["scheme"], r["formatted"], r["rel_change"]] for r in rows]), ""]
    except InvalidInput:
        pass
    b = _cells(report, "B")
    if b:
        groups = defaultdict(list)
        for c in b.values():
            groups[(c["model"], c["scheme"])].append(c)
        rows = [[m, x, _mean([c["macro_f1"] for c in g]), _mean([c["f1_change"] for c in g]),
                 _mean([c["model_f1"] for c in g]), _mean([c["model_f1_nw"] for c in g])]
                for (m, x), g in sorted(groups.items())]
        out += ["Scenario B (one model watermarked)",
                _table(["model", "scheme", "macro_f1", "f1_change", "model_f1", "model_f1_nw"], rows), ""]
    if report["failed"]:
        out += ["Failed cells"] + [f"  {k}: {report['errors'][k]}" for k in report["failed"]]
    return "\n".join(out) + "\n"
