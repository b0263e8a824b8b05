import os
from pathlib import Path

import numpy as np
import pytest
import yaml

from wmlab import lm
from wmlab.config import DATA_DIR, REFERENCE_CONFIG

REF_CORPUS = DATA_DIR / "reference_corpus.txt"


def toy_vocab(words):
    return lm.Vocabulary([lm.BOS, lm.UNK] + list(words))


@pytest.fixture(scope="session")
def ref_data():
    """Shared vocabulary and id stream of the shipped corpus."""
    vocab, flat, docs = lm.load_corpus(REF_CORPUS)
    return vocab, flat, docs


@pytest.fixture(scope="session")
def ref_models(ref_data):
    """Four distinct models on disjoint 150k-token slices."""
    vocab, flat, _ = ref_data
    specs = [(2, 0.01), (3, 0.05), (3, 0.1), (4, 0.5)]
    return [lm.train_ngram(flat[i * 150_000 : (i + 1) * 150_000], o, k, f"m{i}", vocab)
            for i, (o, k) in enumerate(specs)]


@pytest.fixture(scope="session")
def ref_prompts(ref_data):
    _, flat, _ = ref_data
    base = 900_000
    return [flat[base + 37 * i : base + 37 * i + 16] for i in range(2000)]


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    """Ten short 'works' cut from the shipped corpus."""
    lines = REF_CORPUS.read_text(encoding="utf-8").splitlines()
    d = tmp_path_factory.mktemp("corpus")
    path = d / "tiny.txt"
    path.write_text("\n".join(" ".join(l.split()[:4000]) for l in lines[:10]) + "\n", encoding="utf-8")
    return path


def tiny_config_dict(corpus_path, out_dir):
    d = yaml.safe_load(REFERENCE_CONFIG.read_text())
    d["corpus"] = {"path": str(corpus_path), "vocab_cap": 600}
    d["dataset"].update(train_per_class=20, test_per_class=10, completion_length=40, learning_curve=[10, 20])
    d["seeds"] = [0, 1]
    d["attack_eval"]["texts"] = 8
    d["detection"]["num_permutations"] = 20
    d["stealing"].update(num_queries=[4, 8], paired_queries=4, paired_seeds=2, probes=10, sweep_seeds=1)
    d["out_dir"] = str(out_dir)
    return d


@pytest.fixture
def tiny_config(tiny_corpus, tmp_path):
    from wmlab.config import parse_config

    d = tiny_config_dict(tiny_corpus, tmp_path / "run")
    return parse_config(yaml.safe_dump(d), tmp_path, env={})


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
