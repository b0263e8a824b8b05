"""Strict YAML experiment configuration.

Every key is declared in ``SCHEMA``; unknown keys are rejected with the
closest valid spelling, and range errors name the offending field. The
watermark secret may come from the ``WMLAB_SECRET`` environment variable,
which overrides the file.
"""
from __future__ import annotations

import copy
import difflib
import hashlib
import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import yaml

from wmlab.errors import ConfigError

SECRET_ENV = "WMLAB_SECRET"
DATA_DIR = Path(__file__).parent / "data"
REFERENCE_CONFIG = DATA_DIR / "reference.yaml"
# fields that do not change results
NON_SEMANTIC = ("out_dir", "workers")


class _Field:
    def __init__(self, kind, default=None, lo=None, hi=None, lo_open=False, hi_open=False,
                 choices=None, required=False):
        self.kind, self.default, self.lo, self.hi = kind, default, lo, hi
        self.lo_open, self.hi_open, self.choices, self.required = lo_open, hi_open, choices, required

    def check(self, value, path):
        if self.kind is float and isinstance(value, int) and not isinstance(value, bool):
            value = float(value)
        if self.kind is int and isinstance(value, str):
            try:
                value = int(value, 0)
            except ValueError:
                pass
        ok = isinstance(value, self.kind) and not (self.kind in (int, float) and isinstance(value, bool))
        if not ok:
            raise ConfigError(f"{path}: expected {self.kind.__name__}, got {value!r}")
        if self.choices is not None and value not in self.choices:
            raise ConfigError(f"{path}: {value!r} is not one of {sorted(self.choices)}")
        if self.lo is not None and (value < self.lo or (self.lo_open and value == self.lo)):
            raise ConfigError(f"{path}: {value} out of range ({self._range()})")
        if self.hi is not None and (value > self.hi or (self.hi_open and value == self.hi)):
            raise ConfigError(f"{path}: {value} out of range ({self._range()})")
        return value

    def _range(self):
        lo = "-inf" if self.lo is None else self.lo
        hi = "inf" if self.hi is None else self.hi
        return f"{'(' if self.lo_open else '['}{lo}, {hi}{')' if self.hi_open else ']'}"


class _List:
    def __init__(self, item, default=None, min_len=0):
        self.item, self.default, self.min_len = item, default, min_len


F = _Field

MODEL = {
    "id": F(str, required=True),
    "order": F(int, 3, lo=1, hi=4),
    "smoothing_k": F(float, 0.01, lo=0, lo_open=True),
}
SCHEME = {
    "name": F(str, required=True),
    "kind": F(str, required=True, choices={"KGW", "UNIGRAM", "SIRLITE", "EXP"}),
    "gamma": F(float, 0.25, lo=0, hi=1, lo_open=True, hi_open=True),
    "delta": F(float, 2.0, lo=0),
    "context_width": F(int, 1, lo=0),
    "exp_key_length": F(int, 256, lo=1),
    "exp_shift": F(int, 0, lo=0),
    "synonym_bucket": F(int, 4, lo=1),
}
ATTACK = {
    "name": F(str, required=True),
    "kind": F(str, required=True, choices={"SUBSTITUTION", "PARAPHRASE", "REMOVAL"}),
    "edit_rate": F(float, 0.3, lo=0, hi=1),
    "window": F(int, 8, lo=2),
    "perplexity_budget": F(float, 2.0, lo=1),
}
SCHEMA = {
    "corpus": {
        "path": F(str, "reference_corpus.txt"),
        "vocab_cap": F(int, 5000, lo=3, hi=65536),
    },
    "models": _List(MODEL, min_len=1),
    "schemes": _List(SCHEME),
    "attacks": _List(ATTACK),
    "scenarios": _List(F(str, choices={"A", "B", "C"}), default=["A", "B", "C"]),
    "dataset": {
        "prompt_length": F(int, 16, lo=1),
        "completion_length": F(int, 200, lo=2),
        "train_per_class": F(int, 500, lo=10),
        "test_per_class": F(int, 100, lo=1),
        "learning_curve": _List(F(int, lo=10), default=[]),
    },
    "classifier": {
        "epochs": F(int, 300, lo=1),
        "learning_rate": F(float, 1.0, lo=0, lo_open=True),
        "l2": F(float, 1e-3, lo=0),
        "use_scheme_features": F(bool, True),
    },
    "detection": {
        "z_threshold": F(float, 4.0),
        "alpha": F(float, 0.01, lo=0, hi=1, lo_open=True),
        "num_permutations": F(int, 100, lo=20),
        "flag_rate_threshold": F(float, 0.25, lo=0, hi=1),
    },
    "attack_eval": {
        "texts": F(int, 100, lo=1),
        "seeds": _List(F(int, lo=0), default=[0]),
        "reference_order": F(int, 3, lo=1, hi=4),
        "reference_smoothing": F(float, 0.05, lo=0, lo_open=True),
    },
    "stealing": {
        "enabled": F(bool, True),
        "victim": F(str, ""),
        "schemes": _List(F(str), default=[]),
        "delta": F(float, 4.0, lo=0),
        "surrogate_order": F(int, 2, lo=1, hi=4),
        "surrogate_smoothing": F(float, 0.001, lo=0, lo_open=True),
        "num_queries": _List(F(int, lo=1), default=[50, 200, 1000]),
        "paired_queries": F(int, 200, lo=1),
        "paired_seeds": F(int, 20, lo=1),
        "probes": F(int, 50, lo=10),
        "sweep_seeds": F(int, 5, lo=0),
    },
    "seeds": _List(F(int, lo=0), default=[0], min_len=1),
    "secret": F(int, 0x5EC2E7C0FFEE1234, lo=0, hi=(1 << 64) - 1),
    "out_dir": F(str, "runs/experiment"),
    "workers": F(int, 1, lo=1),
}


def _suggest(key, allowed):
    near = difflib.get_close_matches(key, list(allowed), n=1, cutoff=0.5)
    return f" (did you mean {near[0]!r}?)" if near else ""


def _apply(schema, raw, path):
    if isinstance(schema, _Field):
        if raw is None:
            if schema.required:
                raise ConfigError(f"{path}: required field missing")
            return copy.deepcopy(schema.default)
        return schema.check(raw, path)
    if isinstance(schema, _List):
        if raw is None:
            raw = copy.deepcopy(schema.default) if schema.default is not None else []
        if not isinstance(raw, list):
            raise ConfigError(f"{path}: expected a list")
        if len(raw) < schema.min_len:
            raise ConfigError(f"{path}: needs at least {schema.min_len} entries")
        return [_apply(schema.item, v, f"{path}[{i}]") for i, v in enumerate(raw)]
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{path or 'config'}: expected a mapping")
    for k in raw:
        if k not in schema:
            where = f"{path}.{k}" if path else str(k)
            raise ConfigError(f"unknown key {where!r}{_suggest(str(k), schema)}")
    return {k: _apply(sub, raw.get(k), f"{path}.{k}" if path else k) for k, sub in schema.items()}


@dataclass
class ExperimentConfig:
    data: dict
    base_dir: Path

    def __getitem__(self, key):
        return self.data[key]

    @property
    def corpus_path(self) -> Path:
        p = Path(self.data["corpus"]["path"])
        if p.is_absolute():
            return p
        local = self.base_dir / p
        return local if local.exists() else DATA_DIR / p

    @property
    def out_dir(self) -> Path:
        return Path(self.data["out_dir"])

    def fingerprint(self) -> str:
        return fingerprint(self.data)

    def public_dict(self) -> dict:
        d = copy.deepcopy(self.data)
        d.pop("secret", None)
        return d


def _validate(data: dict, base_dir: Path) -> None:
    for reg, key in (("models", "id"), ("schemes", "name"), ("attacks", "name")):
        names = [e[key] for e in data[reg]]
        dup = sorted({n for n in names if names.count(n) > 1})
        if dup:
            raise ConfigError(f"{reg}: duplicate {key} {dup}")
    for i, s in enumerate(data["schemes"]):
        if s["kind"] == "KGW" and s["context_width"] < 1:
            raise ConfigError(f"schemes[{i}].context_width: KGW needs >= 1")
    scheme_names = {s["name"] for s in data["schemes"]}
    st = data["stealing"]
    for n in st["schemes"]:
        if n not in scheme_names:
            raise ConfigError(f"stealing.schemes: unknown scheme {n!r}{_suggest(n, scheme_names)}")
    if st["enabled"] and data["models"]:
        ids = [m["id"] for m in data["models"]]
        if st["victim"] and st["victim"] not in ids:
            raise ConfigError(f"stealing.victim: unknown model {st['victim']!r}{_suggest(st['victim'], ids)}")
    cfg = ExperimentConfig(data, base_dir)
    if not cfg.corpus_path.exists():
        raise ConfigError(f"corpus.path: file not found: {cfg.corpus_path}")


def parse_config(text: str, base_dir: Path | str = ".", env: dict | None = None) -> ExperimentConfig:
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f" at line {mark.line + 1}, column {mark.column + 1}" if mark else ""
        raise ConfigError(f"config parse error{where}: {getattr(exc, 'problem', exc)}") from None
    data = _apply(SCHEMA, raw or {}, "")
    env = os.environ if env is None else env
    if env.get(SECRET_ENV):
        data["secret"] = SCHEMA["secret"].check(env[SECRET_ENV], SECRET_ENV)
    _validate(data, Path(base_dir))
    return ExperimentConfig(data, Path(base_dir))


def load_config(path, env: dict | None = None) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    return parse_config(path.read_text(encoding="utf-8"), path.parent, env)


def canonical(data: dict) -> dict:
    """Semantic content with registries sorted, so reordering is a no-op."""
    d = copy.deepcopy(data)
    for k in NON_SEMANTIC:
        d.pop(k, None)
    d["models"] = sorted(d["models"], key=lambda m: m["id"])
    d["schemes"] = sorted(d["schemes"], key=lambda s: s["name"])
    d["attacks"] = sorted(d["attacks"], key=lambda a: a["name"])
    d["scenarios"] = sorted(set(d["scenarios"]))
    d["seeds"] = sorted(set(d["seeds"]))
    d["dataset"]["learning_curve"] = sorted(set(d["dataset"]["learning_curve"]))
    d["attack_eval"]["seeds"] = sorted(set(d["attack_eval"]["seeds"]))
    d["stealing"]["schemes"] = sorted(set(d["stealing"]["schemes"]))
    d["stealing"]["num_queries"] = sorted(set(d["stealing"]["num_queries"]))
    return d


def fingerprint(data: dict) -> str:
    blob = json.dumps(canonical(data), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


def dump_defaults() -> dict[str, Any]:
    """The fully defaulted schema (for documentation and `--print-config`)."""
    return _apply(SCHEMA, {"models": [{"id": "m0"}]}, "")
