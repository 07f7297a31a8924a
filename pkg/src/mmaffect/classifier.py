"""One-vs-rest linear SVM trained by averaged stochastic subgradient descent."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .features import FeatureMatrix
from .numeric import RngStream, ShapeError, as_matrix

FORMAT = "mmaffect.classifier"
FORMAT_VERSION = 1


@dataclass
class LinearClassifier:
    classes: list[str]
    weights: np.ndarray  # classes x features
    biases: np.ndarray
    C: float
    epochs: int = 0
    seed: int | None = None
    objective_trace: list[list[float]] = field(default_factory=list, repr=False)

    @property
    def n_features(self) -> int:
        return self.weights.shape[1]

    def decision_function(self, x) -> np.ndarray:
        x = _features(x)
        if x.shape[1] != self.n_features:
            raise ShapeError(f"{x.shape[1]} features given, classifier expects {self.n_features}")
        return x @ self.weights.T + self.biases

    def dumps(self) -> str:
        doc = {
            "format": FORMAT, "version": FORMAT_VERSION,
            "classes": list(self.classes), "C": float(self.C),
            "epochs": int(self.epochs), "seed": self.seed,
            "shape": list(self.weights.shape),
            "weights": [float(x) for x in self.weights.reshape(-1)],
            "biases": [float(x) for x in self.biases],
        }
        return json.dumps(doc, indent=1) + "\n"

    @classmethod
    def loads(cls, text: str) -> "LinearClassifier":
        doc = json.loads(text)
        if doc.get("format") != FORMAT or doc.get("version") != FORMAT_VERSION:
            raise ValueError("not a classifier file of a supported version")
        w = np.array(doc["weights"], dtype=np.float64).reshape(tuple(doc["shape"]))
        return cls(list(doc["classes"]), w, np.array(doc["biases"], dtype=np.float64),
                   doc["C"], doc["epochs"], doc["seed"])


def _features(x) -> np.ndarray:
    return x.values if isinstance(x, FeatureMatrix) else as_matrix(x)


def hinge_objective(w: np.ndarray, b: float, x: np.ndarray, y: np.ndarray, C: float) -> float:
    """0.5*(|w|^2 + b^2) + C * sum(hinge), with y in {-1, +1}."""
    margins = y * (x @ w + b)
    return 0.5 * (w @ w + b * b) + C * np.maximum(0.0, 1.0 - margins).sum()


def _label_matrix(labels, n: int, classes) -> tuple[np.ndarray, list[str]]:
    labels = np.array([str(v) for v in labels], dtype=object)
    if labels.shape[0] != n:
        raise ShapeError(f"{labels.shape[0]} labels for {n} rows")
    present = sorted(set(labels))
    classes = [str(c) for c in classes] if classes is not None else present
    unknown = set(present) - set(classes)
    if unknown:
        raise ValueError(f"labels outside the class list: {sorted(unknown)}")
    if len(present) < 2:
        raise ValueError("need at least two classes to train a classifier")
    Y = np.where(labels[None, :] == np.array(classes, dtype=object)[:, None], 1.0, -1.0)
    return Y, classes


def _pegasos(x: np.ndarray, Y: np.ndarray, C: float, epochs: int, rng: RngStream):
    """Independent binary problems, one per row of ``Y`` (entries +-1), sharing a sample order."""
    n, d = x.shape
    xa = np.hstack([x, np.ones((n, 1))])
    lam = 1.0 / (C * n)
    radius = 1.0 / np.sqrt(lam)

    def objectives(w):
        margins = Y * (w @ xa.T)
        return 0.5 * np.einsum("ij,ij->i", w, w) + C * np.maximum(0.0, 1.0 - margins).sum(axis=1)

    w = np.zeros((Y.shape[0], d + 1))
    avg = np.zeros_like(w)
    best = w.copy()
    best_obj = objectives(best)
    traces = [best_obj]
    t = 0
    for _ in range(epochs):
        for i in rng.permutation(n):
            t += 1
            eta = 1.0 / (lam * t)
            xi, yi = xa[i], Y[:, i]
            step = eta * yi * (yi * (w @ xi) < 1.0)
            w *= 1.0 - eta * lam
            w += step[:, None] * xi
            norms = np.sqrt(np.einsum("ij,ij->i", w, w))
            w *= np.minimum(1.0, radius / np.maximum(norms, 1e-300))[:, None]
            avg += (w - avg) * (1.0 / t)
        cand = objectives(avg)
        better = cand < best_obj
        best[better] = avg[better]
        best_obj = np.minimum(best_obj, cand)
        traces.append(best_obj)
    return best, np.array(traces).T


def train_svm(fm, labels: Sequence | None = None, C: float = 1.0, epochs: int = 100,
              rng: RngStream | None = None, classes: Sequence[str] | None = None) -> LinearClassifier:
    """Fit one hyperplane per class against the rest.

    Pegasos-style updates with step ``1/(lambda t)`` and ``lambda = 1/(C n)``
    on the objective of :func:`hinge_objective`, whose bias is handled as a
    constant feature. Each class keeps the best averaged iterate seen at an
    epoch boundary, so its objective trace never increases.
    """
    if labels is None:
        if not isinstance(fm, FeatureMatrix) or not fm.has_labels:
            raise ValueError("training rows carry no labels")
        labels = fm.labels
    return train_svm_batch(fm, [labels], C, epochs, rng, classes)[0]


def train_svm_batch(fm, label_sets: Sequence[Sequence], C: float = 1.0, epochs: int = 100,
                    rng: RngStream | None = None, classes: Sequence[str] | None = None) -> list[LinearClassifier]:
    """One classifier per label set on the same rows, trained in a single vectorized pass."""
    x = _features(fm)
    if not C > 0:
        raise ValueError("C must be positive")
    if not label_sets:
        return []
    rng = rng or RngStream(0)
    mats = [_label_matrix(lab, x.shape[0], classes) for lab in label_sets]
    classes = mats[0][1]
    if any(c != classes for _, c in mats):
        raise ValueError("label sets give different class lists; pass classes explicitly")
    k, d = len(classes), x.shape[1]
    best, traces = _pegasos(x, np.vstack([m for m, _ in mats]), C, epochs, rng)
    out = []
    for j in range(len(mats)):
        w = best[j * k:(j + 1) * k]
        out.append(LinearClassifier(classes, w[:, :d].copy(), w[:, d].copy(), float(C), int(epochs), rng.seed,
                                    [[float(v) for v in tr] for tr in traces[j * k:(j + 1) * k]]))
    return out


def predict(clf: LinearClassifier, fm) -> tuple[list[str], np.ndarray]:
    """Labels by argmax score (ties go to the earlier class) and the raw score matrix."""
    scores = clf.decision_function(fm)
    idx = np.argmax(scores, axis=1)  # first maximum wins
    return [clf.classes[i] for i in idx], scores


def accuracy(predicted: Sequence[str], truth: Sequence[str]) -> float:
    predicted, truth = list(predicted), [str(t) for t in truth]
    if len(predicted) != len(truth):
        raise ShapeError("prediction and label lists differ in length")
    return float(np.mean([p == t for p, t in zip(predicted, truth)])) if truth else 0.0
