"""Datasets: synthetic tasks, preprocessing, subject-level splits and the BADS file format."""
from __future__ import annotations

import enum
import struct
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import signal as sps

from .augment import Epoch
from .rng import Seed, make_rng

TRAIN, TEST = 0, 1
HIDDEN = -1


class DataFormatError(ValueError):
    """Malformed dataset file; ``offset`` is the byte position of the problem."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


@dataclass
class Dataset:
    """Fixed-length single-channel epochs with subject ids and (possibly hidden) labels.

    ``labels`` uses -1 for hidden.  ``split``, ``labeled`` and ``reference``
    are filled in by :func:`split`.
    """

    X: np.ndarray
    labels: np.ndarray
    subjects: np.ndarray
    n_classes: int
    sample_rate: float
    split: np.ndarray | None = None
    labeled: np.ndarray | None = None
    reference: np.ndarray | None = None

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.subjects = np.asarray(self.subjects, dtype=np.int64)
        if self.X.ndim != 2:
            raise ValueError(f"X must be (n_epochs, epoch_len), got {self.X.shape}")
        n = len(self.X)
        if len(self.labels) != n or len(self.subjects) != n:
            raise ValueError("X, labels and subjects must be aligned")
        if np.any((self.labels < HIDDEN) | (self.labels >= self.n_classes)):
            raise ValueError("labels must be -1 (hidden) or in [0, n_classes)")

    @property
    def epoch_len(self) -> int:
        return self.X.shape[1]

    def __len__(self) -> int:
        return len(self.X)

    @property
    def epochs(self) -> list[Epoch]:
        return [Epoch(x, None if y < 0 else int(y), int(s))
                for x, y, s in zip(self.X, self.labels, self.subjects)]

    def indices(self, tag: int) -> np.ndarray:
        if self.split is None:
            raise ValueError("dataset has not been split")
        return np.flatnonzero(self.split == tag)

    def hide_labels(self) -> "Dataset":
        return Dataset(self.X, np.full(len(self), HIDDEN), self.subjects, self.n_classes,
                       self.sample_rate, self.split, self.labeled, self.reference)

    def unlabeled_view(self, tag: int = TRAIN) -> "UnlabeledView":
        idx = np.arange(len(self)) if self.split is None else self.indices(tag)
        return UnlabeledView(self.X[idx], self.subjects[idx])


@dataclass(frozen=True)
class UnlabeledView:
    """Signals only; the type carries no label field at all."""

    X: np.ndarray
    subjects: np.ndarray

    def __len__(self) -> int:
        return len(self.X)


# ---------------------------------------------------------------------------
# synthetic tasks


class Task(str, enum.Enum):
    GlobalContext = "GlobalContext"
    LocalPattern = "LocalPattern"


@dataclass(frozen=True)
class SyntheticTaskSpec:
    task: Task = Task.GlobalContext
    n_subjects: int = 10
    epochs_per_subject: int = 60
    L: int = 128
    C: int = 4
    noise_level: float = 0.3
    seed: int = 0
    sample_rate: float = 100.0

    def validate(self) -> None:
        Task(self.task)
        if self.n_subjects < 1 or self.epochs_per_subject < 1:
            raise ValueError("need at least one subject and one epoch per subject")
        if self.L < 16:
            raise ValueError(f"epoch length {self.L} too short (min 16)")
        if not 2 <= self.C <= 8:
            raise ValueError(f"C must be in [2, 8], got {self.C}")
        if self.noise_level < 0:
            raise ValueError("noise_level must be >= 0")


def _sawtooth(phase: np.ndarray, fall: float) -> np.ndarray:
    """Slow linear rise over ``1 - fall`` of each period, then a fast drop; range [-1, 1]."""
    f = np.mod(phase / (2 * np.pi), 1.0)
    return 2 * np.where(f < 1 - fall, f / (1 - fall), (1 - f) / fall) - 1


def _class_wave(label: int, base_cycles: float, ratio: float, fall: tuple, u, rng, subj: dict) -> np.ndarray:
    # odd classes are time-reversed; label // 2 picks a rung of the tempo ladder
    cycles = base_cycles * ratio ** (label // 2) * subj["speed"] * rng.uniform(0.99, 1.01)
    wave = _sawtooth(2 * np.pi * cycles * u + rng.uniform(0, 2 * np.pi), rng.uniform(*fall))
    return wave[::-1] if label % 2 else wave


def _global_context_epoch(label: int, L: int, rng, subj: dict) -> np.ndarray:
    # a few slow asymmetric cycles across the whole epoch; tempo and direction set the class
    u = np.arange(L) / L
    return subj["gain"] * _class_wave(label, 5.0, 1.3, (0.1, 0.25), u, rng, subj)


def _local_pattern_epoch(label: int, L: int, rng, subj: dict) -> np.ndarray:
    # a faster asymmetric burst near the middle; flat-topped envelope, silence elsewhere
    u = np.arange(L) / L
    centre, width = rng.uniform(0.42, 0.58), 0.45
    envelope = np.clip(1 - np.abs(u - centre) / (width / 2), 0, 1) ** 0.25
    burst = _class_wave(label, 12.0, 1.25, (0.02, 0.08), u, rng, subj)
    return subj["gain"] * envelope * burst


def synth_generate(spec: SyntheticTaskSpec) -> Dataset:
    """Generate a balanced synthetic dataset for ``spec``.

    Labels cycle through classes within each subject so class counts differ by
    at most one.  Samples are rounded to float32 so files round-trip exactly.
    """
    spec.validate()
    task = Task(spec.task)
    make = _global_context_epoch if task is Task.GlobalContext else _local_pattern_epoch
    X, y, s = [], [], []
    k = 0
    for subject in range(spec.n_subjects):
        srng = make_rng(spec.seed, 1, subject)
        subj = {"gain": srng.uniform(0.8, 1.25), "speed": srng.uniform(0.97, 1.03)}
        for e in range(spec.epochs_per_subject):
            label = k % spec.C
            k += 1
            rng = make_rng(spec.seed, 2, subject, e)
            x = make(label, spec.L, rng, subj)
            x = x + spec.noise_level * rng.standard_normal(spec.L)
            X.append(z_normalize(x))
            y.append(label)
            s.append(subject)
    X = np.asarray(X).astype(np.float32).astype(np.float64)
    return Dataset(X, np.asarray(y), np.asarray(s), spec.C, spec.sample_rate)


# ---------------------------------------------------------------------------
# preprocessing


def bandpass(x, low_hz: float = 0.5, high_hz: float = 40.0, sample_rate: float = 100.0, order: int = 4):
    """Zero-phase Butterworth band-pass (second-order sections, forward-backward)."""
    if not 0 < low_hz < high_hz < sample_rate / 2:
        raise ValueError(f"invalid band {low_hz}-{high_hz} Hz for sample rate {sample_rate} Hz")
    sos = sps.butter(order, [low_hz, high_hz], btype="bandpass", fs=sample_rate, output="sos")
    if isinstance(x, Epoch):
        return Epoch(sps.sosfiltfilt(sos, np.asarray(x.samples, dtype=np.float64)), x.label, x.subject_id)
    return sps.sosfiltfilt(sos, np.asarray(x, dtype=np.float64), axis=-1)


def z_normalize(x, eps: float = 1e-12):
    """Per-epoch zero mean, unit (population) std; constant input maps to zeros."""
    if isinstance(x, Epoch):
        return Epoch(z_normalize(x.samples, eps), x.label, x.subject_id)
    x = np.asarray(x, dtype=np.float64)
    centred = x - x.mean(axis=-1, keepdims=True)
    std = np.sqrt((centred ** 2).mean(axis=-1, keepdims=True))
    flat = std < eps
    if np.any(flat):
        warnings.warn("z_normalize: constant epoch mapped to zeros", RuntimeWarning, stacklevel=2)
    return np.where(flat, 0.0, centred / np.where(flat, 1.0, std))


def window(recording, window_sec: float, sample_rate: float) -> list[np.ndarray]:
    """Non-overlapping windows; the trailing remainder is dropped."""
    recording = np.asarray(recording, dtype=np.float64)
    n = int(round(window_sec * sample_rate))
    if n < 1:
        raise ValueError(f"window of {window_sec} s at {sample_rate} Hz has no samples")
    count = len(recording) // n
    if count == 0:
        raise ValueError(f"recording of {len(recording)} samples is shorter than one {n}-sample window")
    return [recording[i * n:(i + 1) * n].copy() for i in range(count)]


def preprocess(recording, sample_rate: float, window_sec: float,
               low_hz: float = 0.5, high_hz: float = 40.0) -> np.ndarray:
    """Filter the whole recording, cut it into windows, normalize each window."""
    filtered = bandpass(recording, low_hz, high_hz, sample_rate)
    return np.stack([z_normalize(w) for w in window(filtered, window_sec, sample_rate)])


# ---------------------------------------------------------------------------
# splitting


def _stratified_pick(idx: np.ndarray, labels: np.ndarray, frac: float, rng) -> np.ndarray:
    picked = []
    for c in np.unique(labels[idx]):
        members = idx[labels[idx] == c]
        n = min(len(members), max(1, int(round(frac * len(members)))))
        picked.append(np.sort(rng.choice(members, size=n, replace=False)))
    return np.sort(np.concatenate(picked)) if picked else np.array([], dtype=np.int64)


def split(ds: Dataset, train_frac: float = 0.8, labeled_frac: float = 0.10,
          reference_frac: float = 0.2, seed: Seed = 0) -> Dataset:
    """Subject-level train/test partition plus stratified labeled and reference subsets."""
    subjects = np.unique(ds.subjects)
    if len(subjects) < 2:
        raise ValueError("split needs at least two subjects")
    rng = make_rng(seed, 7)
    order = rng.permutation(subjects)
    n_train = min(len(subjects) - 1, max(1, int(round(train_frac * len(subjects)))))
    train_subjects = set(order[:n_train].tolist())
    tags = np.array([TRAIN if s in train_subjects else TEST for s in ds.subjects], dtype=np.int8)
    train_idx = np.flatnonzero((tags == TRAIN) & (ds.labels >= 0))
    labeled_idx = _stratified_pick(train_idx, ds.labels, labeled_frac, rng)
    ref_idx = _stratified_pick(labeled_idx, ds.labels, reference_frac, rng)
    labeled = np.zeros(len(ds), dtype=bool)
    labeled[labeled_idx] = True
    reference = np.zeros(len(ds), dtype=bool)
    reference[ref_idx] = True
    return Dataset(ds.X, ds.labels, ds.subjects, ds.n_classes, ds.sample_rate, tags, labeled, reference)


# ---------------------------------------------------------------------------
# BADS file format

MAGIC = b"BADS"
VERSION = 1
_HEADER = struct.Struct("<4sIfIHI")


def dumps(ds: Dataset) -> bytes:
    out = [_HEADER.pack(MAGIC, VERSION, ds.sample_rate, ds.epoch_len, ds.n_classes, len(ds))]
    rec = struct.Struct("<Ih")
    for x, y, s in zip(ds.X, ds.labels, ds.subjects):
        out.append(rec.pack(int(s), int(y)))
        out.append(np.asarray(x, dtype="<f4").tobytes())
    return b"".join(out)


def loads(buf: bytes) -> Dataset:
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise DataFormatError("unsupported format: expected magic b'BADS'", 0)
    if len(buf) < _HEADER.size:
        raise DataFormatError("truncated header", len(buf))
    _, version, fs, epoch_len, n_classes, n_epochs = _HEADER.unpack_from(buf, 0)
    if version != VERSION:
        raise DataFormatError(f"unsupported version {version}", 4)
    if epoch_len == 0 or n_classes == 0:
        raise DataFormatError("epoch_len and n_classes must be positive", 12)
    rec = 6 + 4 * epoch_len
    pos = _HEADER.size
    X = np.empty((n_epochs, epoch_len))
    labels = np.empty(n_epochs, dtype=np.int64)
    subjects = np.empty(n_epochs, dtype=np.int64)
    for i in range(n_epochs):
        if pos + rec > len(buf):
            raise DataFormatError(f"truncated at epoch {i} of {n_epochs}", pos)
        subjects[i], labels[i] = struct.unpack_from("<Ih", buf, pos)
        if not (labels[i] == HIDDEN or 0 <= labels[i] < n_classes):
            raise DataFormatError(f"label {labels[i]} out of range", pos + 4)
        X[i] = np.frombuffer(buf, dtype="<f4", count=epoch_len, offset=pos + 6)
        pos += rec
    if pos != len(buf):
        raise DataFormatError("trailing bytes after last epoch", pos)
    return Dataset(X, labels, subjects, int(n_classes), float(fs))


def save(path: str | Path, ds: Dataset) -> None:
    Path(path).write_bytes(dumps(ds))


def load(path: str | Path) -> Dataset:
    return loads(Path(path).read_bytes())
