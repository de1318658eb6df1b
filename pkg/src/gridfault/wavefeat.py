"""
Wavelet decomposition and interpretable waveform features.

Each channel is split by a periodized Daubechies-4 DWT into an approximation
band (overall shape) and detail bands (distortion). From these we estimate a
fundamental (amplitude, frequency), an offset, pulses, a dominant harmonic,
a distortion factor and the intervals between successive pulses, then fold
them into a fixed 9-per-channel feature vector.
"""
import csv
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .arcsim import CATEGORIES, CHANNELS, WaveformRecord, iter_records

# Daubechies 4 vanishing moments (8 taps), reconstruction low-pass
DB4 = np.array([
    0.23037781330889650086, 0.71484657055291564709, 0.63088076792985890788,
    -0.027983769416859854211, -0.18703481171909308408, 0.030841381835560763627,
    0.032883011666885199735, -0.010597401785069032105,
])
WAVELETS = {"db4": DB4}

LEVELS = 5
FEATURE_RATE = 4000.0
NOMINAL_FREQUENCY = 50.0
FUNDAMENTAL_SEARCH = (35.0, 65.0)
HARMONIC_BAND = (100.0, 1000.0)
PULSE_MAD_FACTOR = 5.0
PULSE_MERGE_GAP = 1e-3
# pulses and harmonics below this fraction of the fundamental are ignored
RELATIVE_FLOOR = 0.01
ZERO_PAD = 8
MIRROR_PAD = 64

PER_CHANNEL = ("A_o", "f_o", "A_off", "A_p", "t_p", "A_h", "f_h", "w_d", "gap")
FEATURE_NAMES = tuple(f"{ch}.{name}" for ch in CHANNELS for name in PER_CHANNEL)
D = len(FEATURE_NAMES)


class FeatureError(ValueError):
    pass


def _filters(wavelet: str) -> Tuple[np.ndarray, np.ndarray]:
    try:
        h = WAVELETS[wavelet]
    except KeyError:
        raise FeatureError(f"unknown wavelet {wavelet!r}") from None
    g = h[::-1] * (-1.0) ** np.arange(len(h))
    return h, g


@dataclass(frozen=True)
class DecompositionResult:
    approx: np.ndarray
    details: Tuple[np.ndarray, ...]     # finest level first
    levels: int
    wavelet_id: str
    lengths: Tuple[int, ...]            # input length at each level, before padding


def _analysis_step(x, h, g):
    n = len(x)
    if n % 2:
        x = np.append(x, x[-1])
        n += 1
    idx = (2 * np.arange(n // 2)[:, None] + np.arange(len(h))[None, :]) % n
    seg = x[idx]
    return seg @ h, seg @ g


def _synthesis_step(a, d, h, g, length):
    n = 2 * len(a)
    idx = (2 * np.arange(len(a))[:, None] + np.arange(len(h))[None, :]) % n
    x = np.zeros(n)
    np.add.at(x, idx, a[:, None] * h[None, :] + d[:, None] * g[None, :])
    return x[:length]


def dwt(signal, levels: int = LEVELS, wavelet: str = "db4") -> DecompositionResult:
    """Multi-level orthogonal DWT with periodic extension.

    Odd-length intermediate sequences are padded by repeating the last sample,
    so any length >= 2**levels is accepted and inverted exactly.
    """
    x = np.asarray(signal, dtype=float)
    if x.ndim != 1:
        raise FeatureError("signal must be one-dimensional")
    if levels < 1:
        raise FeatureError("levels must be >= 1")
    if len(x) < 2 ** levels:
        raise FeatureError(f"signal of length {len(x)} too short for {levels} levels")
    if not np.all(np.isfinite(x)):
        raise FeatureError("signal contains non-finite samples")
    h, g = _filters(wavelet)
    details, lengths = [], []
    a = x
    for _ in range(levels):
        lengths.append(len(a))
        a, d = _analysis_step(a, h, g)
        details.append(d)
    return DecompositionResult(a, tuple(details), levels, wavelet, tuple(lengths))


def idwt(dec: DecompositionResult) -> np.ndarray:
    h, g = _filters(dec.wavelet_id)
    a = dec.approx
    for lev in reversed(range(dec.levels)):
        a = _synthesis_step(a, dec.details[lev], h, g, dec.lengths[lev])
    return a


def band(dec: DecompositionResult, which) -> np.ndarray:
    """Reconstruct a single band: ``"approx"`` or a detail level (1 = finest)."""
    zero = [np.zeros_like(d) for d in dec.details]
    if which == "approx":
        part = DecompositionResult(dec.approx, tuple(zero), dec.levels, dec.wavelet_id, dec.lengths)
    else:
        zero[which - 1] = dec.details[which - 1]
        part = DecompositionResult(np.zeros_like(dec.approx), tuple(zero), dec.levels,
                                   dec.wavelet_id, dec.lengths)
    return idwt(part)


# ---------------------------------------------------------------------------
# Components


@dataclass(frozen=True)
class Pulse:
    A_p: float
    t_p: float
    t_start: float


@dataclass(frozen=True)
class ComponentSet:
    A_o: float
    f_o: float
    A_off: float
    pulses: Tuple[Pulse, ...] = ()
    A_h: float = 0.0
    f_h: float = 0.0
    w_d: float = 0.0
    intervals: Tuple[float, ...] = ()
    degenerate: bool = False


def _spectral_peak(x: np.ndarray, fs: float, lo: float, hi: float) -> Tuple[float, float]:
    """Amplitude and frequency of the largest Hann-windowed FFT line in [lo, hi],
    refined by quadratic interpolation of the log magnitude."""
    n = len(x)
    w = np.hanning(n)
    n_fft = ZERO_PAD * n
    mag = np.abs(np.fft.rfft(x * w, n_fft))
    freqs = np.arange(len(mag)) * fs / n_fft
    sel = np.nonzero((freqs >= lo) & (freqs <= hi))[0]
    if len(sel) == 0:
        return 0.0, 0.0
    k = int(sel[np.argmax(mag[sel])])
    peak = mag[k]
    delta = 0.0
    if 0 < k < len(mag) - 1 and peak > 0 and mag[k - 1] > 0 and mag[k + 1] > 0:
        a, b, c = np.log(mag[k - 1]), np.log(peak), np.log(mag[k + 1])
        den = a - 2 * b + c
        if den < 0:
            delta = 0.5 * (a - c) / den
            peak = math.exp(b - 0.25 * (a - c) * delta)
    return 2.0 * peak / w.sum(), (k + delta) * fs / n_fft


def _fit_sinusoid(x: np.ndarray, fs: float, f: float) -> np.ndarray:
    """Least-squares sinusoid (plus constant) at ``f``; the constant is dropped."""
    t = np.arange(len(x)) / fs
    basis = np.column_stack([np.cos(2 * np.pi * f * t), np.sin(2 * np.pi * f * t), np.ones_like(t)])
    coef, *_ = np.linalg.lstsq(basis, x, rcond=None)
    return basis[:, :2] @ coef[:2]


def _detect_pulses(r: np.ndarray, fs: float, floor: float) -> List[Pulse]:
    n = len(r)
    pad = min(MIRROR_PAD, n - 1)
    # mirror extension keeps the periodic wrap from creating edge pulses
    ext = np.concatenate([r[pad:0:-1], r, r[-2:-pad - 2:-1]])
    dec = dwt(ext, LEVELS)
    mask = np.zeros(n, dtype=bool)
    for which in ["approx"] + list(range(1, LEVELS + 1)):
        b = band(dec, which)[pad:pad + n]
        mad = 1.4826 * np.median(np.abs(b - np.median(b)))
        mask |= np.abs(b) > max(PULSE_MAD_FACTOR * mad, floor)
    idx = np.flatnonzero(mask)
    if len(idx) == 0:
        return []
    merge = PULSE_MERGE_GAP * fs
    runs = [[idx[0], idx[0]]]
    for k in idx[1:]:
        if k - runs[-1][1] <= merge:
            runs[-1][1] = k
        else:
            runs.append([k, k])
    return [Pulse(A_p=float(np.abs(r[s:e + 1]).max()), t_p=(e - s + 1) / fs, t_start=s / fs)
            for s, e in runs]


def resample(x: np.ndarray, fs: float, target: float) -> np.ndarray:
    """Linear-interpolation resampling onto a ``target`` Hz grid."""
    if fs == target:
        return np.asarray(x, dtype=float)
    n_out = int(round(len(x) * target / fs))
    return np.interp(np.arange(n_out) / target, np.arange(len(x)) / fs, x)


def channel_components(x, fs: float, nominal_frequency: float = NOMINAL_FREQUENCY) -> ComponentSet:
    x = np.asarray(x, dtype=float)
    if not np.any(x):
        return ComponentSet(A_o=0.0, f_o=nominal_frequency, A_off=0.0, degenerate=True)
    dec = dwt(x, LEVELS)
    approx = band(dec, "approx")
    offset = float(approx.mean())
    _, f_o = _spectral_peak(approx - offset, fs, *FUNDAMENTAL_SEARCH)
    fundamental = _fit_sinusoid(x, fs, f_o)
    A_o = float(math.sqrt(2.0 * np.mean(fundamental ** 2)))
    r = x - offset - fundamental
    floor = RELATIVE_FLOOR * (A_o + abs(offset)) + 1e-300
    pulses = _detect_pulses(r, fs, floor)
    A_h, f_h = _spectral_peak(r, fs, *HARMONIC_BAND)
    if A_h < floor:
        f_h = 0.0
    rms_fund = math.sqrt(float(np.mean(fundamental ** 2)))
    w_d = math.sqrt(float(np.mean(r ** 2))) / rms_fund if rms_fund > 0 else 0.0
    starts = [p.t_start for p in pulses]
    intervals = tuple(b - a for a, b in zip(starts, starts[1:]))
    return ComponentSet(A_o=A_o, f_o=float(f_o), A_off=abs(offset), pulses=tuple(pulses),
                        A_h=float(A_h), f_h=float(f_h), w_d=w_d, intervals=intervals)


def extract_components(record: WaveformRecord, resample_to: Optional[float] = FEATURE_RATE
                       ) -> List[ComponentSet]:
    """Per-channel components, in channel order."""
    fs = record.fs
    out = []
    for x in record.channels:
        if resample_to is not None and fs != resample_to:
            x = resample(x, fs, resample_to)
        out.append(channel_components(x, resample_to or fs))
    return out


# ---------------------------------------------------------------------------
# Feature vectors


@dataclass(frozen=True)
class FeatureVector:
    values: np.ndarray
    record_id: str = ""
    label: Optional[str] = None
    domain: str = "source"

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        if v.shape != (D,):
            raise FeatureError(f"feature vector must have length {D}, got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise FeatureError("feature vector has non-finite entries")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)


def featurize(components: Sequence[ComponentSet], record_id: str = "", label: Optional[str] = None,
              domain: str = "source") -> FeatureVector:
    if len(components) != len(CHANNELS):
        raise FeatureError(f"expected {len(CHANNELS)} component sets, got {len(components)}")
    values = []
    for cs in components:
        if cs.pulses:
            top = max(cs.pulses, key=lambda p: p.A_p)
            a_p, t_p = top.A_p, top.t_p
        else:
            a_p = t_p = 0.0
        gap = float(np.mean(cs.intervals)) if len(cs.intervals) >= 1 else 0.0
        values += [cs.A_o, cs.f_o, cs.A_off, a_p, t_p, cs.A_h, cs.f_h, cs.w_d, gap]
    return FeatureVector(np.array(values), record_id, label, domain)


def record_features(record: WaveformRecord, resample_to: Optional[float] = FEATURE_RATE) -> FeatureVector:
    return featurize(extract_components(record, resample_to), record.id, record.label,
                     record.domain_tag)


def extract_dataset(data_dir: str, resample_to: Optional[float] = FEATURE_RATE) -> List[FeatureVector]:
    return [record_features(r, resample_to) for r in iter_records(data_dir)]


@dataclass(frozen=True)
class Normalizer:
    """Per-dimension min-max scaling into [0, 1]."""

    lo: np.ndarray
    hi: np.ndarray

    def apply(self, values) -> np.ndarray:
        v = np.asarray(values, dtype=float)
        span = self.hi - self.lo
        flat = span <= 0
        out = (v - self.lo) / np.where(flat, 1.0, span)
        out = np.where(flat, 0.5, out)
        return np.clip(out, 0.0, 1.0)

    def to_dict(self) -> dict:
        return {"lo": self.lo.tolist(), "hi": self.hi.tolist()}

    @classmethod
    def from_dict(cls, d) -> "Normalizer":
        return cls(np.array(d["lo"], dtype=float), np.array(d["hi"], dtype=float))


def _as_matrix(vectors) -> np.ndarray:
    if isinstance(vectors, np.ndarray):
        return np.atleast_2d(vectors).astype(float)
    return np.array([v.values if isinstance(v, FeatureVector) else v for v in vectors], dtype=float)


def fit_normalizer(vectors) -> Normalizer:
    X = _as_matrix(vectors)
    if X.size == 0 or X.shape[0] == 0:
        raise FeatureError("cannot fit a normalizer on an empty set")
    return Normalizer(X.min(axis=0), X.max(axis=0))


def apply_normalizer(n: Normalizer, v: FeatureVector) -> FeatureVector:
    return FeatureVector(n.apply(v.values), v.record_id, v.label, v.domain)


# ---------------------------------------------------------------------------
# Feature files


def write_features(path: str, vectors: Sequence[FeatureVector]) -> None:
    from .arcsim import _atomic_write
    import io
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("record_id", "domain", "label") + FEATURE_NAMES)
    for v in vectors:
        w.writerow([v.record_id, v.domain, v.label or ""] + [repr(float(x)) for x in v.values])
    _atomic_write(path, buf.getvalue())


def read_features(path: str) -> List[FeatureVector]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or tuple(rows[0][3:]) != FEATURE_NAMES:
        raise FeatureError(f"{path}: not a feature file")
    out = []
    for row in rows[1:]:
        label = row[2] or None
        if label is not None and label not in CATEGORIES:
            raise FeatureError(f"{path}: unknown label {label!r}")
        out.append(FeatureVector(np.array([float(x) for x in row[3:]]), row[0], label, row[1]))
    return out
