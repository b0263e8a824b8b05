"""Cross-model source attribution: features, multinomial logistic regression,
metrics, and the A/B/C watermark scenarios."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence

import numpy as np
from scipy.special import log_softmax, softmax

from wmlab import detector
from wmlab.errors import InvalidDataset, InvalidInput, InvalidParameter, UndefinedBaseline
from wmlab.lm import NGramModel, TokenSequence
from wmlab.watermark import SchemeConfig, watermarked_generate

HIST_SIZE = 512
FIRST_HIST_ID = 2  # skip BOS / UNK


def _ids(text) -> np.ndarray:
    return text.ids if isinstance(text, TokenSequence) else np.asarray(text, dtype=np.int64)


@dataclass
class FeatureRegistry:
    """Candidate models and key-holder scheme configs that define the layout."""

    models: Sequence[NGramModel]
    schemes: Sequence[SchemeConfig] = ()
    hist_size: int = HIST_SIZE
    use_scheme_features: bool = True

    def __post_init__(self):
        self.models = list(self.models)
        self.schemes = list(self.schemes) if self.use_scheme_features else []
        if not self.models:
            raise InvalidParameter("feature registry needs at least one model")
        names = [s.name for s in self.schemes]
        if len(set(names)) != len(names):
            raise InvalidParameter("scheme feature names must be unique")
        self.vocab_size = self.models[0].vocab_size

    @property
    def layout(self) -> list[str]:
        out = [f"hist:{FIRST_HIST_ID + j}" for j in range(self.hist_size)]
        out += [f"log_ppl:{m.model_id}" for m in self.models]
        out += [f"z:{s.name}" for s in self.schemes]
        out += [f"log_mean_rank:{m.model_id}" for m in self.models]
        return out

    @property
    def dim(self) -> int:
        return self.hist_size + 2 * len(self.models) + len(self.schemes)


def extract_matrix(texts, registry: FeatureRegistry) -> np.ndarray:
    """Feature rows for many texts; identical to stacking ``extract_features``."""
    arrs = [_ids(t) for t in texts]
    if any(len(a) < 2 for a in arrs):
        raise InvalidInput("feature extraction needs at least 2 tokens")
    if not arrs:
        return np.zeros((0, registry.dim))
    lens = np.array([len(a) for a in arrs])
    starts = np.concatenate([[0], np.cumsum(lens)[:-1]])
    flat = np.concatenate(arrs)
    owner = np.repeat(np.arange(len(arrs)), lens)
    H = registry.hist_size
    rel = flat - FIRST_HIST_ID
    ok = (rel >= 0) & (rel < H)
    hist = np.bincount(owner[ok] * H + rel[ok], minlength=len(arrs) * H).reshape(len(arrs), H)
    cols = [hist / lens[:, None]]
    lp_cols, rank_cols = [], []
    for m in registry.models:
        ctx = np.concatenate([m.contexts_for(a) for a in arrs])
        lp, rank = m.score_contexts(ctx, flat)
        lp_cols.append(-np.add.reduceat(lp, starts) / lens)
        rank_cols.append(np.log(np.add.reduceat(rank, starts) / lens))
    cols.append(np.stack(lp_cols, axis=1))
    if registry.schemes:
        cols.append(np.stack([detector.scheme_scores(arrs, s, registry.vocab_size) for s in registry.schemes], axis=1))
    cols.append(np.stack(rank_cols, axis=1))
    return np.concatenate(cols, axis=1).astype(np.float64)


def extract_features(text, registry: FeatureRegistry) -> np.ndarray:
    return extract_matrix([text], registry)[0]


@dataclass
class ClassifierModel:
    weights: np.ndarray  # [classes, features]
    bias: np.ndarray
    class_labels: list[str]
    mean: np.ndarray
    std: np.ndarray
    loss_history: list[float] = field(default_factory=list, repr=False)

    def scores(self, X: np.ndarray) -> np.ndarray:
        Z = (np.asarray(X, dtype=np.float64) - self.mean) / self.std
        return Z @ self.weights.T + self.bias

    def predict_index(self, X: np.ndarray) -> np.ndarray:
        return np.argmax(self.scores(X), axis=1)  # ties -> lowest index

    def predict(self, X: np.ndarray) -> list[str]:
        return [self.class_labels[i] for i in self.predict_index(X)]


def loss_and_grad(W: np.ndarray, b: np.ndarray, Z: np.ndarray, y: np.ndarray, l2: float):
    """Mean softmax cross-entropy + (l2/2)||W||^2 and its gradient."""
    logits = Z @ W.T + b
    n = Z.shape[0]
    loss = -log_softmax(logits, axis=1)[np.arange(n), y].mean() + 0.5 * l2 * float(np.sum(W * W))
    P = softmax(logits, axis=1)
    P[np.arange(n), y] -= 1.0
    P /= n
    return float(loss), P.T @ Z + l2 * W, P.sum(axis=0)


def _encode_labels(labels, class_labels=None):
    labels = [str(x) for x in labels]
    if class_labels is None:
        class_labels = sorted(set(labels))
    index = {c: i for i, c in enumerate(class_labels)}
    unknown = sorted(set(labels) - set(index))
    if unknown:
        raise InvalidInput(f"unknown labels: {unknown}")
    return np.array([index[x] for x in labels], dtype=np.int64), list(class_labels)


def train_classifier(X, labels, epochs: int = 300, learning_rate: float = 1.0, l2: float = 1e-3,
                     rng_seed: int = 0, class_labels: Sequence[str] | None = None) -> ClassifierModel:
    """Full-batch gradient descent; a step that would raise the loss is
    retried with half the learning rate, so the loss never goes up."""
    X = np.asarray(X, dtype=np.float64)
    y, class_labels = _encode_labels(labels, class_labels)
    counts = np.bincount(y, minlength=len(class_labels))
    if len(class_labels) < 2 or (counts > 0).sum() < 2:
        raise InvalidDataset("need at least 2 classes")
    if counts.min() < 10:
        raise InvalidDataset(f"need at least 10 examples per class, got {counts.tolist()}")
    if not np.isfinite(X).all():
        raise InvalidDataset("non-finite feature values")
    mean = X.mean(axis=0)
    std = X.std(axis=0)
    std[std < 1e-12] = 1.0
    Z = (X - mean) / std
    rng = np.random.default_rng(rng_seed)
    W = rng.normal(0.0, 0.01, size=(len(class_labels), X.shape[1]))
    b = np.zeros(len(class_labels))
    lr = learning_rate
    loss, gW, gb = loss_and_grad(W, b, Z, y, l2)
    history = [loss]
    for _ in range(epochs):
        while True:
            W2, b2 = W - lr * gW, b - lr * gb
            loss2, gW2, gb2 = loss_and_grad(W2, b2, Z, y, l2)
            if loss2 <= loss or lr < 1e-12:
                break
            lr *= 0.5
        if loss2 > loss:
            break
        W, b, loss, gW, gb = W2, b2, loss2, gW2, gb2
        history.append(loss)
    return ClassifierModel(W, b, class_labels, mean, std, history)


@dataclass(frozen=True)
class EvalMetrics:
    class_labels: list[str]
    confusion: np.ndarray  # rows: true, cols: predicted
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    macro_f1: float

    def to_record(self) -> dict:
        return {
            "class_labels": list(self.class_labels),
            "confusion": self.confusion.tolist(),
            "precision": [float(x) for x in self.precision],
            "recall": [float(x) for x in self.recall],
            "f1": [float(x) for x in self.f1],
            "macro_f1": float(self.macro_f1),
        }


def metrics_from_confusion(confusion, class_labels: Sequence[str] | None = None) -> EvalMetrics:
    C = np.asarray(confusion, dtype=np.int64)
    tp = np.diag(C).astype(np.float64)
    pred = C.sum(axis=0)
    true = C.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        p = np.where(pred > 0, tp / pred, 0.0)
        r = np.where(true > 0, tp / true, 0.0)
        f = np.where(p + r > 0, 2 * p * r / (p + r), 0.0)
    labels = list(class_labels) if class_labels is not None else [str(i) for i in range(len(C))]
    return EvalMetrics(labels, C, p, r, f, float(f.mean()))


def evaluate(model: ClassifierModel, X, labels) -> EvalMetrics:
    if len(labels) == 0:
        raise InvalidInput("empty test set")
    y, _ = _encode_labels(labels, model.class_labels)
    pred = model.predict_index(X)
    k = len(model.class_labels)
    C = np.bincount(y * k + pred, minlength=k * k).reshape(k, k)
    return metrics_from_confusion(C, model.class_labels)


def f1_change(f1_wm: float, f1_nw: float) -> float:
    if f1_nw == 0:
        raise UndefinedBaseline("F1 baseline is zero; relative change undefined")
    return (f1_wm - f1_nw) / f1_nw


class Scenario(str, Enum):
    A = "A"  # no watermark
    B = "B"  # one model watermarked
    C = "C"  # every model watermarked


@dataclass(frozen=True)
class ScenarioSpec:
    scenario: Scenario
    models: tuple[str, ...]
    watermarked_models: tuple[str, ...] = ()
    scheme: SchemeConfig | None = None

    def __post_init__(self):
        sc = Scenario(self.scenario)
        object.__setattr__(self, "scenario", sc)
        object.__setattr__(self, "models", tuple(self.models))
        object.__setattr__(self, "watermarked_models", tuple(self.watermarked_models))
        wm = set(self.watermarked_models)
        if not wm <= set(self.models):
            raise InvalidParameter("watermarked models must be registered models")
        if sc is Scenario.A and (wm or self.scheme is not None):
            raise InvalidParameter("scenario A has no watermark")
        if sc is Scenario.B and len(wm) != 1:
            raise InvalidParameter("scenario B watermarks exactly one model")
        if sc is Scenario.C and wm != set(self.models):
            raise InvalidParameter("scenario C watermarks every model")
        if sc is not Scenario.A and self.scheme is None:
            raise InvalidParameter(f"scenario {sc.value} needs a scheme")


def stratified_indices(labels, n_train: int, n_test: int, rng_seed: int):
    """Per class: shuffle, take n_test for testing and the next n_train for training."""
    labels = np.asarray([str(x) for x in labels])
    rng = np.random.default_rng(rng_seed)
    train, test = [], []
    for c in sorted(set(labels.tolist())):
        idx = np.flatnonzero(labels == c)
        if len(idx) < n_train + n_test:
            raise InvalidDataset(f"class {c} has {len(idx)} examples, need {n_train + n_test}")
        idx = rng.permutation(idx)
        test.extend(idx[:n_test].tolist())
        train.extend(idx[n_test : n_test + n_train].tolist())
    return np.array(train, dtype=np.int64), np.array(test, dtype=np.int64)


def fit_and_evaluate(X, labels, n_train: int, n_test: int, rng_seed: int, **train_kw):
    labels = [str(x) for x in labels]
    tr, te = stratified_indices(labels, n_train, n_test, rng_seed)
    clf = train_classifier(X[tr], [labels[i] for i in tr], rng_seed=rng_seed, **train_kw)
    return clf, evaluate(clf, X[te], [labels[i] for i in te])


def run_scenario(spec: ScenarioSpec, models: dict[str, NGramModel], prompts, registry: FeatureRegistry,
                 n_train: int = 500, n_test: int = 100, length: int = 200, rng_seed: int = 0,
                 model_keys: dict[str, SchemeConfig] | None = None, **train_kw) -> EvalMetrics:
    """Generate, featurize, split, train and evaluate one scenario.

    ``model_keys`` optionally maps a model id to the keyed scheme used for it
    (each model's owner holds its own key); otherwise ``spec.scheme`` is used.
    """
    need = n_train + n_test
    if len(prompts) < need:
        raise InvalidDataset(f"need {need} prompts, got {len(prompts)}")
    texts, labels = [], []
    for mi, mid in enumerate(spec.models):
        model = models[mid]
        scheme = None
        if mid in spec.watermarked_models:
            scheme = (model_keys or {}).get(mid, spec.scheme)
        for j in range(need):
            texts.append(watermarked_generate(model, prompts[j], scheme, length, rng_seed=rng_seed * 1_000_003 + mi * need + j))
            labels.append(mid)
    X = extract_matrix(texts, registry)
    return fit_and_evaluate(X, labels, n_train, n_test, rng_seed, **train_kw)[1]
