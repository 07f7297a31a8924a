"""Evaluation protocols: splits, synthetic bimodal data, the three task runners, reports.

Every runner follows the same order: fit scalers, autoencoders and
classifiers on training rows, predict every held-out row, and only then read
the held-out labels to score.
"""
from __future__ import annotations

import csv
import io
import json
import math
from pathlib import Path
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import autoencoder as ae
from .autoencoder import FineTuneConfig, StackSpec
from .classifier import LinearClassifier, predict, train_svm, train_svm_batch
from .features import FeatureMatrix, Scaler, check_paired, fit_scaler
from .numeric import RngStream, sigmoid
from .rbm import CdConfig

REPORT_FORMAT = "mmaffect.report"
REPORT_VERSION = 1
TASKS = ("facilitation", "unimodal", "crossmodal")

# Published SEED/DEAP numbers, carried in reports as annotations only.
REFERENCE_LINES = {
    "facilitation": [
        ("SEED BDAE, DE All+eye (mean of 27 files)", 91.01),
        ("SEED BDAE, alternate quoted figure", 89.94),
        ("SEED directly linked features, DE gamma+eye", 83.44),
        ("SEED fuzzy-integral fusion (prior work)", 87.59),
        ("DEAP BDAE valence", 85.2),
        ("DEAP BDAE arousal", 80.5),
        ("DEAP BDAE dominance", 84.9),
        ("DEAP BDAE liking", 82.4),
        ("DEAP BDAE mean over dimensions", 83.25),
    ],
    "unimodal": [
        ("SEED EEG-fed DAE, DE All", 81.19),
        ("SEED eye-fed DAE, PSD Re-All", 82.11),
        ("SEED EEG only, DE gamma", 77.64),
        ("SEED eye only, linked eye features", 79.64),
    ],
    "crossmodal": [
        ("SEED EEG-train / eye-test, PSD All", 66.23),
        ("SEED eye-train / EEG-test, DE Re-gamma", 66.45),
        ("SEED cross-modal mean", 66.34),
        ("chance, three classes", 33.33),
    ],
}


class ProtocolError(RuntimeError):
    """A report or run broke one of its internal consistency contracts."""


# ----------------------------------------------------------------------------
# splits

@dataclass(frozen=True)
class SplitRule:
    """``seed``: clips ``1..train_clips`` train, later clips test.
    ``deap``: seeded random ``train_fraction`` of rows train. If ``target``
    names a rating column, labels become ``high`` (rating > threshold) or
    ``low``.
    """

    kind: str = "seed"
    threshold: float = 5.0
    train_clips: int = 9
    train_fraction: float = 0.9
    target: str | None = None

    def __post_init__(self):
        if self.kind not in ("seed", "deap"):
            raise ValueError(f"unknown split kind {self.kind!r}")
        if not 0.0 < self.train_fraction < 1.0:
            raise ValueError("train_fraction must lie in (0, 1)")


def binarize_ratings(ratings, threshold: float = 5.0) -> np.ndarray:
    r = np.asarray(ratings, dtype=np.float64)
    return np.where(r > threshold, "high", "low").astype(object)


def _as_modalities(data) -> tuple[dict[str, FeatureMatrix], bool]:
    if isinstance(data, FeatureMatrix):
        return {"_": data}, True
    data = dict(data)
    check_paired(data)
    return data, False


def split_indices(fm: FeatureMatrix, rule: SplitRule, rng: RngStream | None = None):
    n = len(fm)
    if rule.kind == "seed":
        if n and np.all(fm.clips <= 0):
            raise ValueError("a SEED-style split needs clip numbers (1-based) on every row")
        train = np.flatnonzero(fm.clips <= rule.train_clips)
        test = np.flatnonzero(fm.clips > rule.train_clips)
    else:
        rng = rng or RngStream(0)
        order = rng.child("split").permutation(n)
        n_train = int(round(rule.train_fraction * n))
        train, test = np.sort(order[:n_train]), np.sort(order[n_train:])
    return train, test


def apply_split(data, rule: SplitRule, rng: RngStream | None = None):
    """Split one FeatureMatrix or a row-paired modality mapping into (train, test)."""
    mods, single = _as_modalities(data)
    ref = next(iter(mods.values()))
    if rule.target is not None:
        if rule.target not in ref.meta:
            raise ValueError(f"no rating column {rule.target!r} to binarize")
        labels = binarize_ratings(ref.meta[rule.target], rule.threshold)
        mods = {k: v.with_labels(labels) for k, v in mods.items()}
    tr, te = split_indices(ref, rule, rng)
    train = {k: v.subset(tr) for k, v in mods.items()}
    test = {k: v.subset(te) for k, v in mods.items()}
    if single:
        return train["_"], test["_"]
    return train, test


# ----------------------------------------------------------------------------
# synthetic data

@dataclass(frozen=True)
class SynthSpec:
    """Class-conditioned latent factor observed through two noisy sigmoid maps.

    ``noise`` is the standard deviation of independent per-modality noise
    added before the output sigmoid; ``latent_spread`` is the within-class
    spread of the latent itself, shared by both modalities.
    """

    n_classes: int = 3
    latent_dim: int = 4
    eeg_dim: int = 40
    eye_dim: int = 16
    noise: float = 2.0
    rows_per_class: int = 100
    n_clips: int = 15
    latent_spread: float = 0.3
    class_separation: float = 3.0
    seed: int = 0

    def __post_init__(self):
        for name in ("n_classes", "latent_dim", "eeg_dim", "eye_dim", "rows_per_class", "n_clips"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.noise < 0 or self.latent_spread < 0:
            raise ValueError("noise levels must be non-negative")


def _clip_plan(spec: SynthSpec) -> list[tuple[int, int]]:
    """(clip number, class) for clips 1..n_clips, classes cycling."""
    return [(c + 1, c % spec.n_classes) for c in range(spec.n_clips)]


def generate_synthetic(spec: SynthSpec = SynthSpec(), rng: RngStream | None = None) -> dict[str, FeatureMatrix]:
    """Paired ``eeg``/``eye`` feature matrices with values in (0, 1).

    Rows of each class are spread over the clips carrying that class, so a
    SEED-style split keeps every class on both sides.
    """
    rng = rng or RngStream(spec.seed)
    k, L = spec.n_classes, spec.latent_dim
    centers = rng.child("centers").normal((k, L)) * spec.class_separation
    maps = {
        "eeg": (rng.child("map", "eeg").normal((L, spec.eeg_dim)), rng.child("offset", "eeg").normal(spec.eeg_dim, 0.5)),
        "eye": (rng.child("map", "eye").normal((L, spec.eye_dim)), rng.child("offset", "eye").normal(spec.eye_dim, 0.5)),
    }
    plan = _clip_plan(spec)
    labels, clips = [], []
    for c in range(k):
        own = [clip for clip, cls in plan if cls == c] or [0]
        for i in range(spec.rows_per_class):
            labels.append(c)
            # contiguous blocks of rows per clip
            clips.append(own[i * len(own) // spec.rows_per_class])
    labels = np.array(labels)
    n = labels.size
    z = centers[labels] + spec.latent_spread * rng.child("latent").normal((n, L))
    ids = [f"s{i:05d}" for i in range(n)]
    out = {}
    for name, (A, b) in maps.items():
        noise = spec.noise * rng.child("noise", name).normal((n, A.shape[1]))
        x = sigmoid(z @ A / math.sqrt(L) + b + noise)
        cols = [f"{name}_{j}" for j in range(A.shape[1])]
        out[name] = FeatureMatrix(x, cols, [f"class{v}" for v in labels], ids, ["synthetic"] * n, clips)
    return out


# ----------------------------------------------------------------------------
# configuration

@dataclass
class PipelineConfig:
    """Hyperparameters of a task run.

    The pretraining and fine-tuning defaults here are heavier than the bare
    library defaults: about 150 CD epochs, then momentum SGD, were needed before
    shared codes on the default synthetic data carried more class information
    than either modality alone.
    """

    rbm: CdConfig = field(default_factory=lambda: CdConfig(epochs=150))
    finetune: FineTuneConfig = field(default_factory=lambda: FineTuneConfig(learning_rate=0.1, momentum=0.9))
    svm_C: float = 1.0
    svm_epochs: int = 100
    hidden_sizes: dict[str, int] = field(default_factory=dict)
    shared_size: int | None = None
    repeats: int = 1
    coupled_crossmodal: bool = True
    null_permutations: int = 50

    def stack_spec(self, kind: str, dims: Sequence[tuple[str, int]], input_modality: str | None = None) -> StackSpec:
        base = ae.default_stack_spec(kind, dims, input_modality)
        hidden = tuple(self.hidden_sizes.get(n, h) for (n, _), h in zip(dims, base.hidden_sizes))
        return StackSpec(kind, tuple(dims), hidden, self.shared_size or base.shared_layer_size, input_modality)

    def snapshot(self) -> dict:
        return asdict(self)


# ----------------------------------------------------------------------------
# results

def confusion_matrix(predictions: Sequence[str], labels: Sequence[str], classes: Sequence[str]) -> np.ndarray:
    """Row-normalized: entry (i, j) is the share of true class i predicted as j.

    Rows of classes absent from ``labels`` are all zero.
    """
    classes = [str(c) for c in classes]
    predictions, labels = [str(p) for p in predictions], [str(t) for t in labels]
    if len(predictions) != len(labels):
        raise ValueError("prediction and label lists differ in length")
    index = {c: i for i, c in enumerate(classes)}
    counts = np.zeros((len(classes), len(classes)))
    for p, t in zip(predictions, labels):
        if t not in index:
            raise ValueError(f"unknown true label {t!r}")
        if p not in index:
            raise ValueError(f"unknown predicted label {p!r}")
        counts[index[t], index[p]] += 1
    totals = counts.sum(axis=1, keepdims=True)
    return np.divide(counts, totals, out=np.zeros_like(counts), where=totals > 0)


def class_counts(labels: Sequence[str], classes: Sequence[str]) -> list[int]:
    labels = [str(t) for t in labels]
    return [labels.count(str(c)) for c in classes]


@dataclass
class MethodResult:
    accuracy: float
    confusion: list[list[float]]
    class_counts: list[int]
    predictions: list[str]

    def check(self, tol: float = 1e-9) -> None:
        cm = np.array(self.confusion)
        counts = np.array(self.class_counts, dtype=np.float64)
        present = counts > 0
        if not np.allclose(cm[present].sum(axis=1), 1.0, atol=tol, rtol=0):
            raise ProtocolError("confusion rows do not sum to 1")
        if counts.sum() > 0:
            implied = float((np.diag(cm) * counts).sum() / counts.sum())
            if abs(implied - self.accuracy) > tol:
                raise ProtocolError(f"accuracy {self.accuracy} disagrees with the confusion matrix ({implied})")


@dataclass
class RunResult:
    run_id: str
    methods: dict[str, MethodResult]


def score(predictions: Mapping[str, Sequence[str]], truth: Sequence[str], classes: Sequence[str]) -> dict[str, MethodResult]:
    truth = [str(t) for t in truth]
    counts = class_counts(truth, classes)
    out = {}
    for name, pred in predictions.items():
        pred = list(pred)
        acc = float(np.mean([p == t for p, t in zip(pred, truth)])) if truth else 0.0
        out[name] = MethodResult(acc, confusion_matrix(pred, truth, classes).tolist(), counts, pred)
    return out


@dataclass
class ExperimentReport:
    task: str
    classes: list[str]
    runs: list[RunResult]
    config: dict
    seed: int
    reference_lines: list[tuple[str, float]] = field(default_factory=list)
    notes: dict = field(default_factory=dict)

    @property
    def chance(self) -> float:
        return 1.0 / len(self.classes)

    @property
    def method_names(self) -> list[str]:
        names: list[str] = []
        for run in self.runs:
            names += [m for m in run.methods if m not in names]
        return names

    def accuracies(self, method: str) -> np.ndarray:
        return np.array([r.methods[method].accuracy for r in sorted(self.runs, key=lambda r: r.run_id)
                         if method in r.methods])

    def mean(self, method: str) -> float:
        return float(self.accuracies(method).mean())

    def std(self, method: str) -> float:
        """Sample standard deviation across runs (0 for a single run)."""
        a = self.accuracies(method)
        return float(a.std(ddof=1)) if a.size > 1 else 0.0

    def pooled_confusion(self, method: str) -> np.ndarray:
        """Row-normalized matrix of the per-run count matrices summed over runs."""
        total = None
        for r in self.runs:
            m = r.methods.get(method)
            if m is None:
                continue
            counts = np.array(m.confusion) * np.array(m.class_counts, dtype=np.float64)[:, None]
            total = counts if total is None else total + counts
        rows = total.sum(axis=1, keepdims=True)
        return np.divide(total, rows, out=np.zeros_like(total), where=rows > 0)

    def check(self) -> None:
        for r in self.runs:
            for m in r.methods.values():
                m.check()

    def summary(self) -> dict:
        return {m: {"mean": self.mean(m), "std": self.std(m), "runs": int(self.accuracies(m).size),
                    "confusion": self.pooled_confusion(m).tolist()} for m in self.method_names}

    def to_dict(self) -> dict:
        return {
            "format": REPORT_FORMAT, "version": REPORT_VERSION,
            "task": self.task, "classes": list(self.classes), "chance": self.chance,
            "seed": self.seed, "config": self.config,
            "summary": self.summary(),
            "runs": [{"run_id": r.run_id,
                      "methods": {k: asdict(v) for k, v in r.methods.items()}}
                     for r in sorted(self.runs, key=lambda r: r.run_id)],
            "reference_lines": [{"label": l, "accuracy_percent": v} for l, v in self.reference_lines],
            "notes": self.notes,
        }

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=False) + "\n"

    @classmethod
    def loads(cls, text: str) -> "ExperimentReport":
        doc = json.loads(text)
        if doc.get("format") != REPORT_FORMAT:
            raise ValueError("not a report file")
        runs = [RunResult(r["run_id"], {k: MethodResult(**v) for k, v in r["methods"].items()})
                for r in doc["runs"]]
        return cls(doc["task"], doc["classes"], runs, doc["config"], doc["seed"],
                   [(d["label"], d["accuracy_percent"]) for d in doc["reference_lines"]],
                   doc.get("notes", {}))

    def runs_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["run_id", "method", "accuracy"])
        for r in sorted(self.runs, key=lambda r: r.run_id):
            for name, m in r.methods.items():
                w.writerow([r.run_id, name, repr(m.accuracy)])
        return buf.getvalue()

    def to_text(self) -> str:
        lines = [f"task: {self.task}", f"seed: {self.seed}", f"classes: {', '.join(self.classes)}",
                 f"chance: {100 * self.chance:.2f}%", "", "method                      mean%    std%  runs"]
        for m in self.method_names:
            lines.append(f"{m:<26} {100 * self.mean(m):6.2f}  {100 * self.std(m):6.2f}  {self.accuracies(m).size:4d}")
        for m in self.method_names:
            lines += ["", f"confusion matrix ({m}); rows = true class, columns = predicted"]
            lines.append(" " * 12 + "".join(f"{c:>12}" for c in self.classes))
            for c, row in zip(self.classes, self.pooled_confusion(m)):
                lines.append(f"{c:<12}" + "".join(f"{100 * v:>11.2f}%" for v in row))
        if self.reference_lines:
            lines += ["", "published reference figures (not reproduced here):"]
            lines += [f"  {l}: {v:.2f}%" for l, v in self.reference_lines]
        lines += ["", "config:", json.dumps(self.config, indent=1, sort_keys=True)]
        return "\n".join(lines) + "\n"


# ----------------------------------------------------------------------------
# fitted task models

@dataclass(frozen=True)
class Source:
    """Where a classifier's features come from: scaled raw columns or a net's shared layer."""

    net: str | None
    modalities: tuple[str, ...]


@dataclass(frozen=True)
class MethodSpec:
    name: str  # classifier key, unique
    group: str  # reported method; repeats of one model share a group
    train: Source
    test: Source
    shuffle_labels: bool = False


@dataclass
class TaskModels:
    """Everything fitted on the training rows of one run."""

    task: str
    classes: list[str]
    scalers: dict[str, Scaler]
    nets: dict[str, ae.DeepAutoencoder]
    methods: list[MethodSpec]
    classifiers: dict[str, LinearClassifier]

    @property
    def groups(self) -> list[str]:
        out: list[str] = []
        for m in self.methods:
            if m.group not in out:
                out.append(m.group)
        return out

    @property
    def test_modalities(self) -> list[str]:
        out: list[str] = []
        for m in self.methods:
            out += [x for x in m.test.modalities if x not in out]
        return out

    def save(self, directory) -> list[str]:
        """Write one file per artifact into ``directory``; returns the file names."""
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        index = {
            "format": "mmaffect.task_models", "version": 1,
            "task": self.task, "classes": self.classes,
            "scalers": sorted(self.scalers), "nets": sorted(self.nets),
            "methods": [asdict(m) for m in self.methods],
        }
        files = {"models.json": json.dumps(index, indent=1) + "\n"}
        for name, s in self.scalers.items():
            files[f"scaler_{name}.csv"] = s.dumps()
        for name, net in self.nets.items():
            files[f"net_{name}.json"] = ae.dumps(net)
        for name, clf in self.classifiers.items():
            files[f"svm_{name}.json"] = clf.dumps()
        for fname, text in files.items():
            (d / fname).write_text(text)
        return sorted(files)

    @classmethod
    def load(cls, directory) -> "TaskModels":
        d = Path(directory)
        index = json.loads((d / "models.json").read_text())
        if index.get("format") != "mmaffect.task_models":
            raise ValueError(f"{d} does not hold task models")

        def source(doc):
            return Source(doc["net"], tuple(doc["modalities"]))

        methods = [MethodSpec(m["name"], m["group"], source(m["train"]), source(m["test"]), m["shuffle_labels"])
                   for m in index["methods"]]
        return cls(
            index["task"], index["classes"],
            {n: Scaler.loads((d / f"scaler_{n}.csv").read_text()) for n in index["scalers"]},
            {n: ae.loads((d / f"net_{n}.json").read_text()) for n in index["nets"]},
            methods,
            {m.name: LinearClassifier.loads((d / f"svm_{m.name}.json").read_text()) for m in methods},
        )


def _classes(train: Mapping[str, FeatureMatrix], classes) -> list[str]:
    if classes is not None:
        return [str(c) for c in classes]
    return sorted(set(next(iter(train.values())).labels))


def _build(train: Mapping[str, FeatureMatrix], cfg: PipelineConfig, rng: RngStream, kind: str,
           input_modality: str | None = None) -> ae.DeepAutoencoder:
    dims = [(k, v.shape[1]) for k, v in train.items()]
    spec = cfg.stack_spec(kind, dims, input_modality)
    rbms = ae.pretrain_stack(spec, train, cfg.rbm, rng.child("pretrain"))
    return ae.unfold(spec, rbms, rng.child("unfold"))


def train_bdae(train: Mapping[str, FeatureMatrix], cfg: PipelineConfig, rng: RngStream) -> ae.DeepAutoencoder:
    net = _build(train, cfg, rng, "bdae")
    return ae.fine_tune(net, train, cfg.finetune, rng.child("finetune")).net


def train_dae(train: Mapping[str, FeatureMatrix], input_modality: str, cfg: PipelineConfig,
              rng: RngStream) -> ae.DeepAutoencoder:
    net = _build(train, cfg, rng, "dae", input_modality)
    return ae.fine_tune(net, train, cfg.finetune, rng.child("finetune")).net


def train_crossmodal_daes(train: Mapping[str, FeatureMatrix], cfg: PipelineConfig,
                          rng: RngStream) -> dict[str, ae.DeepAutoencoder]:
    """Two unimodal DAEs, one per input modality.

    With ``cfg.coupled_crossmodal`` the pair is fine-tuned jointly through a
    single shared decoder, which puts both shared layers in the same
    coordinate system; otherwise each DAE is trained on its own.
    """
    names = list(train)
    if len(names) != 2:
        raise ValueError("cross-modal learning needs exactly two modalities")
    nets = [_build(train, cfg, rng.child("dae", m), "dae", m) for m in names]
    if nets[0].shared_size != nets[1].shared_size:
        raise ValueError("the two DAEs must have the same shared-layer size")
    if cfg.coupled_crossmodal:
        results = ae.fine_tune_coupled(ae.couple_decoders(nets), train, cfg.finetune, rng.child("finetune"))
        return {m: res.net for m, res in zip(names, results)}
    return {m: ae.fine_tune(net, train, cfg.finetune, rng.child("finetune", m)).net
            for m, net in zip(names, nets)}


def _plan(task: str, mods: list[str], cfg: PipelineConfig, test_modalities, permutation_null: bool):
    """Nets to train, as (name, kind, input modality, repeat), and the methods that use them."""
    nets, methods = [], []

    def same(name, group, src):
        methods.append(MethodSpec(name, group, src, src))

    if task == "facilitation":
        for m in mods:
            same(m, m, Source(None, (m,)))
        same("concat", "concat", Source(None, tuple(mods)))
        for k in range(cfg.repeats):
            nets.append((f"bdae.{k}", "bdae", None, k))
            same(f"bdae.{k}", "bdae", Source(f"bdae.{k}", tuple(mods)))
    elif task == "unimodal":
        for m in test_modalities or mods:
            if m not in mods:
                raise ValueError(f"unknown modality {m!r}")
            same(f"raw_{m}", f"raw_{m}", Source(None, (m,)))
            for k in range(cfg.repeats):
                nets.append((f"dae_{m}.{k}", "dae", m, k))
                same(f"dae_{m}.{k}", f"dae_{m}", Source(f"dae_{m}.{k}", (m,)))
    elif task == "crossmodal":
        if len(mods) != 2:
            raise ValueError("cross-modal learning needs exactly two modalities")
        for k in range(cfg.repeats):
            nets.append((f"pair.{k}", "pair", None, k))
        for src, dst in ((mods[0], mods[1]), (mods[1], mods[0])):
            group = f"{src}_to_{dst}"
            for k in range(cfg.repeats):
                tr, te = Source(f"dae_{src}.{k}", (src,)), Source(f"dae_{dst}.{k}", (dst,))
                methods.append(MethodSpec(f"{group}.{k}", group, tr, te))
                if permutation_null:
                    for p in range(cfg.null_permutations):
                        methods.append(MethodSpec(f"{group}_permuted.{k}.{p}", f"{group}_permuted", tr, te, True))
    else:
        raise ValueError(f"unknown task {task!r}; choose from {', '.join(TASKS)}")
    return nets, methods


def _features(models: TaskModels, scaled: Mapping[str, FeatureMatrix], src: Source, cache: dict):
    if src not in cache:
        if src.net is None:
            parts = [scaled[m] for m in src.modalities]
            cache[src] = parts[0] if len(parts) == 1 else FeatureMatrix.hstack(parts)
        else:
            cache[src] = ae.encode(models.nets[src.net], {m: scaled[m] for m in src.modalities})
    return cache[src]


def fit_task(task: str, train: Mapping[str, FeatureMatrix], cfg: PipelineConfig, rng: RngStream,
             classes=None, test_modalities: Sequence[str] | None = None,
             permutation_null: bool = True) -> TaskModels:
    """Fit scalers, autoencoders and classifiers for ``task`` on training rows only."""
    train = dict(train)
    check_paired(train)
    mods = list(train)
    classes = _classes(train, classes)
    net_plan, methods = _plan(task, mods, cfg, test_modalities, permutation_null)
    scalers = {k: fit_scaler(v) for k, v in train.items()}
    scaled = {k: scalers[k].apply(v) for k, v in train.items()}

    nets: dict[str, ae.DeepAutoencoder] = {}
    for name, kind, m, k in net_plan:
        r = rng.child("net", name)
        if kind == "bdae":
            nets[name] = train_bdae(scaled, cfg, r)
        elif kind == "dae":
            nets[name] = train_dae(scaled, m, cfg, r)
        else:
            for mod, net in train_crossmodal_daes(scaled, cfg, r).items():
                nets[f"dae_{mod}.{k}"] = net

    models = TaskModels(task, classes, scalers, nets, methods, {})
    y = np.asarray(next(iter(scaled.values())).labels)
    cache: dict = {}
    nulls: dict[tuple, list[MethodSpec]] = {}
    for spec in methods:
        if spec.shuffle_labels:
            nulls.setdefault((spec.group, spec.train), []).append(spec)
            continue
        x = _features(models, scaled, spec.train, cache)
        models.classifiers[spec.name] = train_svm(x, y, C=cfg.svm_C, epochs=cfg.svm_epochs,
                                                  rng=rng.child("svm", spec.name), classes=classes)
    # shuffled-label classifiers on one feature source share a single pass
    for (group, src), specs in nulls.items():
        label_sets = [y[rng.child("null", s.name).permutation(y.size)] for s in specs]
        fitted = train_svm_batch(_features(models, scaled, src, cache), label_sets, C=cfg.svm_C,
                                 epochs=cfg.svm_epochs, rng=rng.child("svm", group, str(src.net)), classes=classes)
        models.classifiers.update({s.name: clf for s, clf in zip(specs, fitted)})
    return models


def predict_task(models: TaskModels, test: Mapping[str, FeatureMatrix]) -> dict[str, list[str]]:
    """Predictions per reported method; repeats of one method are concatenated in order."""
    test = dict(test)
    check_paired(test)
    missing = [m for m in models.test_modalities if m not in test]
    if missing:
        raise ValueError(f"test data lacks modalities {missing}")
    scaled = {m: models.scalers[m].apply(test[m]) for m in models.test_modalities}
    cache: dict = {}
    out: dict[str, list[str]] = {g: [] for g in models.groups}
    for spec in models.methods:
        x = _features(models, scaled, spec.test, cache)
        out[spec.group].extend(predict(models.classifiers[spec.name], x)[0])
    return out


def score_task(models: TaskModels, predictions: Mapping[str, list[str]], truth: Sequence[str],
               run_id: str = "run0") -> RunResult:
    truth = [str(t) for t in truth]
    results = {}
    for group, pred in predictions.items():
        reps = len(pred) // len(truth) if truth else 1
        results.update(score({group: pred}, truth * reps, models.classes))
    return RunResult(run_id, results)


def evaluate_task(task: str, train: Mapping[str, FeatureMatrix], test: Mapping[str, FeatureMatrix],
                  cfg: PipelineConfig, rng: RngStream, classes=None, run_id: str = "run0", **kw) -> RunResult:
    models = fit_task(task, train, cfg, rng, classes, **kw)
    predictions = predict_task(models, test)
    # held-out labels are read only from here on
    truth = next(iter(test.values())).labels
    return score_task(models, predictions, truth, run_id)


def evaluate_facilitation(train, test, cfg: PipelineConfig, rng: RngStream, classes=None,
                          run_id: str = "run0") -> RunResult:
    """BDAE shared representations vs. each modality alone and the concatenated features."""
    return evaluate_task("facilitation", train, test, cfg, rng, classes, run_id)


def evaluate_unimodal(train, test, cfg: PipelineConfig, rng: RngStream, classes=None, run_id: str = "run0",
                      test_modalities: Sequence[str] | None = None) -> RunResult:
    """DAE fed one modality (reconstructing both) vs. that modality's scaled raw features.

    Both modalities are needed on training rows; test rows only use the fed one.
    """
    return evaluate_task("unimodal", train, test, cfg, rng, classes, run_id, test_modalities=test_modalities)


def evaluate_crossmodal(train, test, cfg: PipelineConfig, rng: RngStream, classes=None, run_id: str = "run0",
                        permutation_null: bool = True) -> RunResult:
    """Classifier trained on one DAE's shared codes, tested on the other DAE's codes.

    Methods are named ``<train>_to_<test>``; with ``permutation_null`` each
    direction is repeated with shuffled training labels.
    """
    return evaluate_task("crossmodal", train, test, cfg, rng, classes, run_id, permutation_null=permutation_null)


# ----------------------------------------------------------------------------
# multi-run drivers

def _datasets(data) -> list[dict[str, FeatureMatrix]]:
    if isinstance(data, Mapping):
        return [dict(data)]
    return [dict(d) for d in data]


def all_classes(datasets) -> list[str]:
    return sorted({str(c) for d in _datasets(datasets) for c in next(iter(d.values())).labels})


def run_stream(seed: int, index: int) -> RngStream:
    """The stream owning run ``index``: its split, models and classifiers."""
    return RngStream(seed).child("run", index)


def run_task(task: str, data, split: SplitRule, cfg: PipelineConfig | None = None, seed: int = 0,
             classes=None, **kw) -> ExperimentReport:
    """Split and evaluate each dataset (one run per data file), then aggregate."""
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}; choose from {', '.join(TASKS)}")
    cfg = cfg or PipelineConfig()
    datasets = _datasets(data)
    classes = [str(c) for c in classes] if classes is not None else all_classes(datasets)
    runs = []
    for i, d in enumerate(datasets):
        r = run_stream(seed, i)
        train, test = apply_split(d, split, r)
        runs.append(evaluate_task(task, train, test, cfg, r, classes, f"run{i:03d}", **kw))
    return make_report(task, classes, runs, {"pipeline": cfg.snapshot(), "split": asdict(split)}, seed)


def make_report(task: str, classes, runs: list[RunResult], config: dict, seed: int) -> ExperimentReport:
    report = ExperimentReport(task, [str(c) for c in classes], sorted(runs, key=lambda r: r.run_id),
                              config, seed, list(REFERENCE_LINES[task]))
    report.check()
    return report


def run_multimodal_facilitation(data, split: SplitRule, cfg: PipelineConfig | None = None, seed: int = 0,
                                classes=None) -> ExperimentReport:
    return run_task("facilitation", data, split, cfg, seed, classes)


def run_unimodal_enhancement(data, split: SplitRule, cfg: PipelineConfig | None = None, seed: int = 0,
                             test_modalities: Sequence[str] | None = None, classes=None) -> ExperimentReport:
    return run_task("unimodal", data, split, cfg, seed, classes, test_modalities=test_modalities)


def run_cross_modal(data, split: SplitRule, cfg: PipelineConfig | None = None, seed: int = 0,
                    classes=None, permutation_null: bool = True) -> ExperimentReport:
    return run_task("crossmodal", data, split, cfg, seed, classes, permutation_null=permutation_null)
