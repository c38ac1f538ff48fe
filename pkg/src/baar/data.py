"""Synthetic datasets and CSV ingestion.

CSV schemas (UTF-8, comma separated, header row required):

    series:  seq_id,channel,t,value
    events:  patient_id,month,code
    labels:  seq_id,label[,label...]
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

SERIES_HEADER = ("seq_id", "channel", "t", "value")
EVENTS_HEADER = ("patient_id", "month", "code")
MIN_EVENTS = 10


class DataError(ValueError):
    pass


class SchemaError(DataError):
    pass


class EmptyDatasetError(DataError):
    pass


class ValidationError(DataError):
    pass


@dataclass
class ShapeletDataset:
    sequences: np.ndarray  # (n, T, V)
    labels: np.ndarray  # (n,)
    shapelet_spans: np.ndarray  # (n, 2) half-open [start, end)
    templates: np.ndarray  # (n_classes, shapelet_len) unit-RMS waveforms

    def __len__(self) -> int:
        return len(self.labels)


@dataclass
class EventStream:
    codes: np.ndarray
    timestamps: np.ndarray
    labels: np.ndarray
    patient_id: str = ""

    def __post_init__(self):
        self.codes = np.asarray(self.codes, dtype=np.int64)
        self.timestamps = np.asarray(self.timestamps, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.codes) != len(self.timestamps):
            raise ValidationError("codes and timestamps differ in length")
        if len(self.codes) > 1 and (np.diff(self.timestamps) < 0).any():
            raise ValidationError(f"patient {self.patient_id!r}: timestamps must be non-decreasing")

    def __len__(self) -> int:
        return len(self.codes)


@dataclass(frozen=True)
class PhenotypeRule:
    """A phenotype is positive exactly when every code in ``codes`` occurs."""

    name: str
    codes: tuple[int, ...]
    prevalence: float = 0.3


DEFAULT_RULES = (
    PhenotypeRule("chf", (3,)),
    PhenotypeRule("copd", (5, 7)),
    PhenotypeRule("diabetes", (11,)),
)


def standardize(x: np.ndarray, axis: int = -2) -> np.ndarray:
    """Zero mean, unit variance along ``axis`` (time); flat channels become zero."""
    mu = x.mean(axis=axis, keepdims=True)
    sd = x.std(axis=axis, keepdims=True)
    return (x - mu) / np.where(sd > 0, sd, 1.0)


def class_templates(n_classes: int, length: int, seed: int = 0) -> np.ndarray:
    """One unit-RMS windowed waveform per class, distinct frequency per class."""
    rng = np.random.default_rng(seed + 9173)
    t = np.linspace(0.0, 1.0, length, endpoint=False)
    window = np.hanning(length)
    out = np.empty((n_classes, length))
    for c in range(n_classes):
        phase = rng.uniform(0, 2 * np.pi)
        wave = np.sin(2 * np.pi * (c + 1) * t + phase) * window
        out[c] = wave / np.sqrt(np.mean(wave**2))
    return out


def gen_shapelet_dataset(
    n_seqs: int,
    T: int,
    V: int = 1,
    n_classes: int = 2,
    snr: float = 5.0,
    seed: int = 0,
    shapelet_len: int | None = None,
) -> ShapeletDataset:
    """Gaussian noise with one class waveform planted at a random offset.

    ``snr`` is the waveform amplitude relative to unit noise; ``inf`` gives
    noiseless sequences. Every sequence is standardised per channel.
    """
    if not snr > 0:
        raise ValueError(f"snr must be positive, got {snr}")
    length = shapelet_len or T // 8
    if length < 1 or T < 4 * length:
        raise ValueError(f"need T >= 4 * shapelet length, got T={T}, length={length}")
    rng = np.random.default_rng(seed)
    templates = class_templates(n_classes, length, seed)
    channel_gain = 0.5 + rng.random((n_classes, V))
    labels = rng.integers(0, n_classes, n_seqs)
    starts = rng.integers(0, T - length + 1, n_seqs)
    noiseless = np.isinf(snr)
    x = np.zeros((n_seqs, T, V)) if noiseless else rng.normal(size=(n_seqs, T, V))
    amp = 1.0 if noiseless else snr
    for i in range(n_seqs):
        c, s = labels[i], starts[i]
        x[i, s : s + length, :] += amp * templates[c][:, None] * channel_gain[c][None, :]
    spans = np.stack([starts, starts + length], axis=1)
    return ShapeletDataset(standardize(x), labels, spans, templates)


def gen_event_streams(
    n_patients: int,
    vocab: int = 47,
    mean_events: float = 30.0,
    phenotype_rules=DEFAULT_RULES,
    seed: int = 0,
    mean_gap: float = 2.0,
) -> list[EventStream]:
    """Irregular coded-event streams with rule-defined multi-hot phenotype labels.

    Gaps between events are Poisson(mean_gap) months. Background codes avoid
    every rule code, so a label is positive iff its rule codes were planted.
    Streams shorter than ten events are redrawn.
    """
    if vocab < 2:
        raise ValueError("vocab must be at least 2")
    rules = tuple(phenotype_rules)
    rule_codes = sorted({c for r in rules for c in r.codes})
    for c in rule_codes:
        if not 0 <= c < vocab:
            raise ValueError(f"rule code {c} outside vocabulary of {vocab}")
    background = np.setdiff1d(np.arange(vocab), rule_codes)
    if background.size == 0:
        raise ValueError("rules use the whole vocabulary; no background codes left")
    rng = np.random.default_rng(seed)
    streams = []
    while len(streams) < n_patients:
        n = int(rng.poisson(mean_events))
        if n < MIN_EVENTS:
            continue
        codes = rng.choice(background, size=n)
        positive = [rng.random() < r.prevalence for r in rules]
        planted = [c for r, on in zip(rules, positive) if on for c in r.codes]
        if len(planted) > n:
            continue
        slots = rng.choice(n, size=len(planted), replace=False)
        codes[slots] = planted
        gaps = rng.poisson(mean_gap, size=n - 1)
        times = np.concatenate([[0.0], np.cumsum(gaps)]).astype(np.float64)
        labels = np.array([int(all(c in codes for c in r.codes)) for r in rules])
        streams.append(EventStream(codes, times, labels, patient_id=f"p{len(streams):06d}"))
    return streams


# ---------------------------------------------------------------------------
# CSV ingestion
# ---------------------------------------------------------------------------


def _open_rows(path, expected: tuple[str, ...] | None = None):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"{path}: no such file")
    with open(path, newline="", encoding="utf-8") as f:
        rows = list(csv.reader(f))
    if not rows:
        raise EmptyDatasetError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    if expected is not None:
        for i, want in enumerate(expected):
            got = header[i] if i < len(header) else None
            if got != want:
                raise SchemaError(f"{path}: header column {i + 1} is {got!r}, expected {want!r}")
        if len(header) > len(expected):
            raise SchemaError(f"{path}: unexpected extra column {header[len(expected)]!r}")
    body = [(n, r) for n, r in enumerate(rows[1:], start=2) if r and any(c.strip() for c in r)]
    if not body:
        raise EmptyDatasetError(f"{path}: header only, no data rows")
    return header, body


def _parse(value: str, kind, path, line: int, column: str):
    try:
        return kind(value)
    except ValueError:
        raise DataError(f"{path}:{line}: malformed {column} value {value!r}") from None


def load_series_csv(path, standardize_values: bool = True) -> tuple[np.ndarray, list[str]]:
    """Read ``seq_id,channel,t,value`` rows into a (n, T, V) array and the seq ids.

    Every sequence must have the same timesteps on every channel, listed in
    increasing ``t`` order.
    """
    header, body = _open_rows(path, SERIES_HEADER)
    data: dict[str, dict[int, list[tuple[float, float]]]] = {}
    for line, row in body:
        if len(row) != len(SERIES_HEADER):
            raise DataError(f"{path}:{line}: expected {len(SERIES_HEADER)} fields, got {len(row)}")
        sid = row[0].strip()
        ch = _parse(row[1], int, path, line, "channel")
        t = _parse(row[2], float, path, line, "t")
        v = _parse(row[3], float, path, line, "value")
        series = data.setdefault(sid, {}).setdefault(ch, [])
        if series and t <= series[-1][0]:
            raise ValidationError(f"{path}:{line}: t={t} is not after {series[-1][0]} in sequence {sid!r}")
        series.append((t, v))
    ids = list(data)
    channels = sorted(data[ids[0]])
    length = len(data[ids[0]][channels[0]])
    out = np.empty((len(ids), length, len(channels)))
    for i, sid in enumerate(ids):
        if sorted(data[sid]) != channels:
            raise ValidationError(f"{path}: sequence {sid!r} has channels {sorted(data[sid])}, expected {channels}")
        for j, ch in enumerate(channels):
            vals = data[sid][ch]
            if len(vals) != length:
                raise ValidationError(f"{path}: sequence {sid!r} channel {ch} has {len(vals)} steps, expected {length}")
            out[i, :, j] = [v for _, v in vals]
    if standardize_values:
        out = standardize(out)
    return out, ids


def write_series_csv(path, sequences: np.ndarray, ids=None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    sequences = np.asarray(sequences)
    ids = ids or [f"s{i:06d}" for i in range(len(sequences))]
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(SERIES_HEADER)
        for sid, seq in zip(ids, sequences):
            for ch in range(seq.shape[1]):
                for t in range(seq.shape[0]):
                    w.writerow([sid, ch, t, repr(float(seq[t, ch]))])
    return path


def load_events_csv(path, vocab: int | None = None, labels: dict | None = None) -> list[EventStream]:
    """Read ``patient_id,month,code`` rows grouped by patient in file order."""
    header, body = _open_rows(path, EVENTS_HEADER)
    grouped: dict[str, tuple[list[int], list[float]]] = {}
    for line, row in body:
        if len(row) != len(EVENTS_HEADER):
            raise DataError(f"{path}:{line}: expected {len(EVENTS_HEADER)} fields, got {len(row)}")
        pid = row[0].strip()
        month = _parse(row[1], float, path, line, "month")
        code = _parse(row[2], int, path, line, "code")
        if code < 0 or (vocab is not None and code >= vocab):
            raise ValidationError(f"{path}:{line}: code {code} outside vocabulary of {vocab}")
        codes, months = grouped.setdefault(pid, ([], []))
        if months and month < months[-1]:
            raise ValidationError(f"{path}:{line}: month {month} precedes {months[-1]} for patient {pid!r}")
        codes.append(code)
        months.append(month)
    streams = []
    for pid, (codes, months) in grouped.items():
        lab = labels.get(pid, []) if labels else []
        streams.append(EventStream(codes, months, lab, patient_id=pid))
    return streams


def write_events_csv(path, streams) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(EVENTS_HEADER)
        for i, s in enumerate(streams):
            pid = s.patient_id or f"p{i:06d}"
            for m, c in zip(s.timestamps, s.codes):
                w.writerow([pid, repr(float(m)), int(c)])
    return path


def load_labels_csv(path) -> dict[str, list[int]]:
    header, body = _open_rows(path)
    if header[0] != "seq_id" or len(header) < 2:
        raise SchemaError(f"{path}: labels header must start with 'seq_id' and name at least one label column")
    out = {}
    for line, row in body:
        if len(row) != len(header):
            raise DataError(f"{path}:{line}: expected {len(header)} fields, got {len(row)}")
        out[row[0].strip()] = [_parse(v, int, path, line, header[j + 1]) for j, v in enumerate(row[1:])]
    return out


def write_labels_csv(path, ids, labels, names=None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    labels = np.asarray(labels)
    if labels.ndim == 1:
        labels = labels[:, None]
    names = names or (["label"] if labels.shape[1] == 1 else [f"label_{j}" for j in range(labels.shape[1])])
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["seq_id", *names])
        for sid, row in zip(ids, labels):
            w.writerow([sid, *[int(v) for v in row]])
    return path

