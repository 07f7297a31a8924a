"""EEG band features, eye-movement statistics, min-max scaling and feature CSVs."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.signal import periodogram

DE_VARIANCE_FLOOR = 1e-12


@dataclass(frozen=True)
class BandDef:
    name: str
    lo: float
    hi: float

    def __post_init__(self):
        if not 0 <= self.lo < self.hi:
            raise ValueError(f"band {self.name}: need 0 <= lo < hi")

    @property
    def width(self) -> float:
        return self.hi - self.lo


EEG_BANDS = (
    BandDef("delta", 1.0, 4.0),
    BandDef("theta", 4.0, 8.0),
    BandDef("alpha", 8.0, 14.0),
    BandDef("beta", 14.0, 31.0),
    BandDef("gamma", 31.0, 50.0),
)

PUPIL_BANDS = (
    BandDef("p1", 0.0, 0.2),
    BandDef("p2", 0.2, 0.4),
    BandDef("p3", 0.4, 0.6),
    BandDef("p4", 0.6, 1.0),
)


@dataclass
class SignalWindow:
    samples: np.ndarray
    sample_rate: float
    channel_id: str = ""
    window_span: float | None = None

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError(f"channel {self.channel_id!r}: non-finite samples")
        if self.window_span is None:
            self.window_span = self.samples.size / self.sample_rate
        elif abs(self.samples.size - self.sample_rate * self.window_span) > 1:
            raise ValueError(
                f"channel {self.channel_id!r}: {self.samples.size} samples do not span "
                f"{self.window_span} s at {self.sample_rate} Hz"
            )


def band_mask(freqs: np.ndarray, band: BandDef, bands: Sequence[BandDef]) -> np.ndarray:
    """Half-open ``[lo, hi)`` selection; the highest band of ``bands`` also keeps ``hi``."""
    top = max(b.hi for b in bands)
    if band.hi == top:
        return (freqs >= band.lo) & (freqs <= band.hi)
    return (freqs >= band.lo) & (freqs < band.hi)


def _check_window(w: SignalWindow, bands: Sequence[BandDef]) -> None:
    top = max(b.hi for b in bands)
    if w.sample_rate <= 2 * top:
        raise ValueError(
            f"sample rate {w.sample_rate} Hz cannot resolve bands up to {top} Hz"
        )
    narrowest = min(b.width for b in bands)
    need = 2 * w.sample_rate / narrowest
    if w.samples.size < need:
        raise ValueError(
            f"window of {w.samples.size} samples is too short; bands of width "
            f"{narrowest} Hz need at least {math.ceil(need)}"
        )


def power_spectrum(w: SignalWindow, window: str = "hann"):
    """One-sided periodogram density (power per Hz) after removing the mean."""
    return periodogram(w.samples, fs=w.sample_rate, window=window,
                       detrend="constant", scaling="density")


def psd_bands(w: SignalWindow, bands: Sequence[BandDef] = EEG_BANDS) -> np.ndarray:
    """Mean Hann-windowed periodogram density inside each band."""
    _check_window(w, bands)
    freqs, pxx = power_spectrum(w)
    out = np.empty(len(bands))
    for i, band in enumerate(bands):
        sel = band_mask(freqs, band, bands)
        out[i] = pxx[sel].mean() if sel.any() else 0.0
    return out


def bandpass(samples: np.ndarray, sample_rate: float, band: BandDef,
             bands: Sequence[BandDef] | None = None) -> np.ndarray:
    """Zero every DFT bin outside ``band`` and transform back."""
    spec = np.fft.rfft(samples)
    freqs = np.fft.rfftfreq(samples.size, d=1.0 / sample_rate)
    spec[~band_mask(freqs, band, bands or (band,))] = 0.0
    return np.fft.irfft(spec, n=samples.size)


def differential_entropy(x: np.ndarray, floor: float = DE_VARIANCE_FLOOR) -> float:
    """Gaussian differential entropy 0.5*ln(2*pi*e*var), variance floored."""
    var = max(float(np.var(x)), floor)
    return 0.5 * math.log(2 * math.pi * math.e * var)


def de_bands(w: SignalWindow, bands: Sequence[BandDef] = EEG_BANDS,
             floor: float = DE_VARIANCE_FLOOR) -> np.ndarray:
    _check_window(w, bands)
    return np.array([
        differential_entropy(bandpass(w.samples, w.sample_rate, b, bands), floor)
        for b in bands
    ])


# ----------------------------------------------------------------------------
# eye movements

EYE_FEATURE_NAMES = tuple(
    [f"pupil_x_{s}" for s in ("mean", "std", "de_p1", "de_p2", "de_p3", "de_p4")]
    + [f"pupil_y_{s}" for s in ("mean", "std", "de_p1", "de_p2", "de_p3", "de_p4")]
    + ["dispersion_x_mean", "dispersion_x_std", "dispersion_y_mean", "dispersion_y_std",
       "fixation_duration_mean", "fixation_duration_std",
       "blink_duration_mean", "blink_duration_std",
       "saccade_duration_mean", "saccade_duration_std",
       "saccade_amplitude_mean", "saccade_amplitude_std",
       "blink_frequency", "fixation_frequency", "fixation_duration_max",
       "fixation_dispersion_total", "fixation_dispersion_max", "saccade_frequency",
       "saccade_duration_average", "saccade_amplitude_average", "saccade_latency_average"]
)


@dataclass
class Saccade:
    duration: float   # ms
    amplitude: float  # degrees
    latency: float = 0.0  # ms


@dataclass
class EyeStreams:
    """Raw eye-tracker output for one window.

    ``dispersion_x``/``dispersion_y`` hold one value per fixation; a fixation's
    dispersion is their sum.
    """

    pupil_x: np.ndarray
    pupil_y: np.ndarray
    pupil_rate: float
    dispersion_x: np.ndarray = field(default_factory=lambda: np.zeros(0))
    dispersion_y: np.ndarray = field(default_factory=lambda: np.zeros(0))
    fixation_durations: np.ndarray = field(default_factory=lambda: np.zeros(0))
    blink_durations: np.ndarray = field(default_factory=lambda: np.zeros(0))
    saccades: list[Saccade] = field(default_factory=list)

    def __post_init__(self):
        for name in ("pupil_x", "pupil_y", "dispersion_x", "dispersion_y",
                     "fixation_durations", "blink_durations"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64).reshape(-1))
        if self.pupil_x.size == 0 or self.pupil_y.size == 0:
            raise ValueError("pupil streams need at least one sample")
        if self.dispersion_x.size != self.dispersion_y.size:
            raise ValueError("dispersion_x and dispersion_y must have one entry per fixation")
        for name in ("fixation_durations", "blink_durations"):
            if np.any(getattr(self, name) < 0):
                raise ValueError(f"{name} contains negative durations")
        if any(s.duration < 0 or s.latency < 0 for s in self.saccades):
            raise ValueError("saccade records contain negative durations")


def _mean_std(x: np.ndarray) -> tuple[float, float]:
    if x.size == 0:
        return 0.0, 0.0
    return float(np.mean(x)), float(np.std(x))


def _pupil_de(x: np.ndarray, rate: float) -> list[float]:
    # short or constant streams fall back to the DE floor rather than failing
    if x.size < 2:
        return [differential_entropy(np.zeros(1))] * len(PUPIL_BANDS)
    return [differential_entropy(bandpass(x, rate, b, PUPIL_BANDS)) for b in PUPIL_BANDS]


def eye_features(streams: EyeStreams, window_span: float) -> np.ndarray:
    """Fixed-length (33) vector ordered as :data:`EYE_FEATURE_NAMES`."""
    if window_span <= 0:
        raise ValueError("window_span must be positive")
    s = streams
    out: list[float] = []
    for pupil in (s.pupil_x, s.pupil_y):
        out.extend(_mean_std(pupil))
        out.extend(_pupil_de(pupil, s.pupil_rate))
    out.extend(_mean_std(s.dispersion_x))
    out.extend(_mean_std(s.dispersion_y))
    out.extend(_mean_std(s.fixation_durations))
    out.extend(_mean_std(s.blink_durations))
    sac_dur = np.array([q.duration for q in s.saccades], dtype=np.float64)
    sac_amp = np.array([q.amplitude for q in s.saccades], dtype=np.float64)
    sac_lat = np.array([q.latency for q in s.saccades], dtype=np.float64)
    out.extend(_mean_std(sac_dur))
    out.extend(_mean_std(sac_amp))
    fix_disp = s.dispersion_x + s.dispersion_y
    out.extend([
        s.blink_durations.size / window_span,
        s.fixation_durations.size / window_span,
        float(s.fixation_durations.max()) if s.fixation_durations.size else 0.0,
        float(fix_disp.sum()),
        float(fix_disp.max()) if fix_disp.size else 0.0,
        len(s.saccades) / window_span,
        _mean_std(sac_dur)[0],
        _mean_std(sac_amp)[0],
        _mean_std(sac_lat)[0],
    ])
    return np.array(out)


# ----------------------------------------------------------------------------
# feature tables

class FeatureMatrix:
    """Rows of feature vectors with labels and subject/clip metadata.

    Reads of :attr:`values` and :attr:`labels` can be recorded into an access
    log (see :meth:`track`), which the experiment runners' tests use to prove
    that held-out labels are only consulted after prediction.
    """

    def __init__(self, values, columns: Sequence[str] | None = None, labels=None,
                 ids: Sequence[str] | None = None, subjects=None, clips=None,
                 meta: Mapping[str, np.ndarray] | None = None):
        v = np.array(values, dtype=np.float64, ndmin=2)
        if v.ndim != 2:
            raise ValueError("feature values must be 2-D")
        if not np.all(np.isfinite(v)):
            raise ValueError("feature values contain NaN or Inf")
        n, d = v.shape
        self._values = v
        self.columns = list(columns) if columns is not None else [f"f{i}" for i in range(d)]
        if len(self.columns) != d:
            raise ValueError(f"{len(self.columns)} column names for {d} columns")
        self.ids = [str(i) for i in ids] if ids is not None else [str(i) for i in range(n)]
        self._labels = None if labels is None else np.array([str(x) for x in labels], dtype=object)
        self.subjects = np.array([str(x) for x in subjects], dtype=object) if subjects is not None else np.array([""] * n, dtype=object)
        self.clips = np.asarray(clips, dtype=np.int64) if clips is not None else np.zeros(n, dtype=np.int64)
        self.meta = {k: np.asarray(m) for k, m in (meta or {}).items()}
        for name, arr in [("ids", self.ids), ("subjects", self.subjects), ("clips", self.clips),
                          *self.meta.items()] + ([("labels", self._labels)] if self._labels is not None else []):
            if len(arr) != n:
                raise ValueError(f"{name} has {len(arr)} entries for {n} rows")
        self._log: list | None = None
        self._tag = ""

    def track(self, log: list, tag: str) -> "FeatureMatrix":
        self._log = log
        self._tag = tag
        return self

    def _record(self, what: str) -> None:
        if self._log is not None:
            self._log.append((self._tag, what))

    @property
    def values(self) -> np.ndarray:
        self._record("values")
        return self._values

    @property
    def labels(self) -> np.ndarray | None:
        self._record("labels")
        return self._labels

    @property
    def has_labels(self) -> bool:
        return self._labels is not None

    @property
    def shape(self) -> tuple[int, int]:
        return self._values.shape

    def __len__(self) -> int:
        return self._values.shape[0]

    def _derived(self, fm: "FeatureMatrix") -> "FeatureMatrix":
        # derived matrices report into the same access log
        fm._log, fm._tag = self._log, self._tag
        return fm

    def subset(self, rows) -> "FeatureMatrix":
        rows = np.asarray(rows, dtype=np.int64)
        return self._derived(FeatureMatrix(
            self._values[rows], self.columns,
            None if self._labels is None else self._labels[rows],
            [self.ids[i] for i in rows], self.subjects[rows], self.clips[rows],
            {k: m[rows] for k, m in self.meta.items()},
        ))

    def with_values(self, values, columns: Sequence[str] | None = None) -> "FeatureMatrix":
        """Same rows and metadata, new feature columns."""
        return self._derived(FeatureMatrix(values, columns, self._labels, self.ids, self.subjects,
                                           self.clips, self.meta))

    def with_labels(self, labels) -> "FeatureMatrix":
        return self._derived(FeatureMatrix(self._values, self.columns, labels, self.ids, self.subjects,
                                           self.clips, self.meta))

    def select_columns(self, names: Iterable[str]) -> "FeatureMatrix":
        names = list(names)
        index = {c: i for i, c in enumerate(self.columns)}
        missing = [c for c in names if c not in index]
        if missing:
            raise KeyError(f"unknown columns: {missing[:5]}")
        return self.with_values(self._values[:, [index[c] for c in names]], names)

    @staticmethod
    def hstack(parts: Sequence["FeatureMatrix"]) -> "FeatureMatrix":
        """Concatenate the columns of row-paired matrices (metadata from the first)."""
        first = parts[0]
        for p in parts[1:]:
            if p.ids != first.ids:
                raise ValueError("cannot link feature matrices whose row ids differ")
        return first.with_values(np.hstack([p._values for p in parts]),
                                 [c for p in parts for c in p.columns])


def check_paired(data: Mapping[str, FeatureMatrix]) -> None:
    mats = list(data.values())
    for name, fm in data.items():
        if fm.ids != mats[0].ids:
            raise ValueError(f"modality {name!r} is not row-paired with the others (ids differ)")


# ----------------------------------------------------------------------------
# scaling

@dataclass
class Scaler:
    """Per-column training-set minimum and maximum."""

    columns: list[str]
    mins: np.ndarray
    maxs: np.ndarray

    def apply(self, fm: FeatureMatrix) -> FeatureMatrix:
        if fm.columns != self.columns:
            raise ValueError("feature columns do not match the scaler record")
        span = self.maxs - self.mins
        x = fm._values - self.mins
        const = span == 0
        x = np.divide(x, span, out=np.zeros_like(x), where=~const)
        # constant training columns carry no information and map to 0
        x[:, const] = 0.0
        return fm.with_values(np.clip(x, 0.0, 1.0), fm.columns)

    def dumps(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["column", "min", "max"])
        for c, lo, hi in zip(self.columns, self.mins, self.maxs):
            w.writerow([c, repr(float(lo)), repr(float(hi))])
        return buf.getvalue()

    @classmethod
    def loads(cls, text: str) -> "Scaler":
        rows = list(csv.reader(io.StringIO(text)))
        if not rows or rows[0] != ["column", "min", "max"]:
            raise ValueError("not a scaler record")
        body = rows[1:]
        return cls([r[0] for r in body], np.array([float(r[1]) for r in body]),
                   np.array([float(r[2]) for r in body]))


def fit_scaler(fm: FeatureMatrix) -> Scaler:
    if len(fm) == 0:
        raise ValueError("cannot fit a scaler on an empty matrix")
    return Scaler(list(fm.columns), fm._values.min(axis=0), fm._values.max(axis=0))


def minmax_scale(fm: FeatureMatrix) -> tuple[FeatureMatrix, Scaler]:
    scaler = fit_scaler(fm)
    return scaler.apply(fm), scaler


# ----------------------------------------------------------------------------
# CSV

META_COLUMNS = ("id", "subject", "clip", "label")
RATING_PREFIX = "rating_"  # e.g. rating_valence; kept as row metadata, not as a feature


class DataFormatError(ValueError):
    """Malformed input file; the message carries the row/column location."""


def write_feature_csv(fm: FeatureMatrix, path_or_buf) -> None:
    own = isinstance(path_or_buf, (str, bytes)) or hasattr(path_or_buf, "__fspath__")
    f = open(path_or_buf, "w", encoding="utf-8", newline="") if own else path_or_buf
    try:
        w = csv.writer(f, lineterminator="\n")
        ratings = sorted(fm.meta)
        w.writerow(list(META_COLUMNS) + [RATING_PREFIX + k for k in ratings] + fm.columns)
        labels = fm._labels if fm._labels is not None else [""] * len(fm)
        for i in range(len(fm)):
            w.writerow([fm.ids[i], fm.subjects[i], int(fm.clips[i]), labels[i]]
                       + [repr(float(fm.meta[k][i])) for k in ratings]
                       + [repr(float(x)) for x in fm._values[i]])
    finally:
        if own:
            f.close()


def read_feature_csv(path: str) -> FeatureMatrix:
    with open(path, encoding="utf-8", newline="") as f:
        rows = list(csv.reader(f))
    if not rows:
        raise DataFormatError(f"{path}: empty file")
    header = rows[0]
    if tuple(header[:4]) != META_COLUMNS:
        raise DataFormatError(f"{path}: header must start with {','.join(META_COLUMNS)}")
    n_ratings = 0
    while 4 + n_ratings < len(header) and header[4 + n_ratings].startswith(RATING_PREFIX):
        n_ratings += 1
    ratings = [h[len(RATING_PREFIX):] for h in header[4:4 + n_ratings]]
    columns = header[4 + n_ratings:]
    rating_values = np.empty((len(rows) - 1, n_ratings))
    values = np.empty((len(rows) - 1, len(columns)))
    names = ratings + columns
    ids, subjects, clips, labels = [], [], [], []
    for r, row in enumerate(rows[1:], start=2):
        if len(row) != len(header):
            raise DataFormatError(f"{path}: row {r} has {len(row)} cells, expected {len(header)}")
        ids.append(row[0])
        subjects.append(row[1])
        try:
            clips.append(int(row[2]) if row[2] else 0)
        except ValueError:
            raise DataFormatError(f"{path}: row {r}, column 'clip': {row[2]!r} is not an integer") from None
        labels.append(row[3])
        for c, cell in enumerate(row[4:]):
            try:
                x = float(cell)
            except ValueError:
                raise DataFormatError(
                    f"{path}: row {r}, column {names[c]!r}: {cell!r} is not numeric") from None
            if not math.isfinite(x):
                raise DataFormatError(f"{path}: row {r}, column {names[c]!r}: non-finite value")
            if c < n_ratings:
                rating_values[r - 2, c] = x
            else:
                values[r - 2, c - n_ratings] = x
    has_labels = any(lbl != "" for lbl in labels)
    meta = {k: rating_values[:, j] for j, k in enumerate(ratings)}
    return FeatureMatrix(values, columns, labels if has_labels else None, ids, subjects, clips, meta)


# ----------------------------------------------------------------------------
# window-level extraction

def eeg_window_features(window: np.ndarray, sample_rate: float, channels: Sequence[str],
                        bands: Sequence[BandDef] = EEG_BANDS) -> tuple[np.ndarray, list[str]]:
    """PSD then DE for every (band, channel); ``window`` is samples x channels."""
    psd, de = [], []
    for c, name in enumerate(channels):
        w = SignalWindow(window[:, c], sample_rate, name)
        psd.append(psd_bands(w, bands))
        de.append(de_bands(w, bands))
    psd, de = np.array(psd), np.array(de)  # channels x bands
    names = ([f"psd_{b.name}_{ch}" for b in bands for ch in channels]
             + [f"de_{b.name}_{ch}" for b in bands for ch in channels])
    return np.concatenate([psd.T.reshape(-1), de.T.reshape(-1)]), names


def segment(samples: np.ndarray, sample_rate: float, window_span: float) -> list[np.ndarray]:
    """Non-overlapping windows; an incomplete trailing window is dropped."""
    n = int(round(sample_rate * window_span))
    if n < 1:
        raise ValueError("window_span is shorter than one sample")
    return [samples[i:i + n] for i in range(0, samples.shape[0] - n + 1, n)]
