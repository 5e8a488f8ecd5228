"""Objective speech metrics, paired significance tests and result tables."""

from __future__ import annotations

import csv
import logging
import math
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.signal import get_window, resample_poly
from scipy.special import betainc

from .audio import AudioClip
from .errors import DegenerateTestError, ShapeError, UndefinedMetricError
from .features import frame_signal, mel_filterbank

log = logging.getLogger(__name__)


def _pair(clean, processed):
    x = clean.samples if isinstance(clean, AudioClip) else np.asarray(clean, dtype=np.float64)
    y = processed.samples if isinstance(processed, AudioClip) else np.asarray(processed, dtype=np.float64)
    if isinstance(clean, AudioClip) and isinstance(processed, AudioClip) \
            and clean.sample_rate != processed.sample_rate:
        raise ShapeError("clean and processed sample rates differ")
    if x.shape != y.shape:
        raise ShapeError(f"clean has {x.size} samples, processed {y.size}")
    fs = clean.sample_rate if isinstance(clean, AudioClip) else 16000
    return x.astype(np.float64), y.astype(np.float64), fs


# ---------------------------------------------------------------------------
# STOI

STOI_FS = 10000
STOI_FRAME = 256
STOI_NFFT = 512
STOI_BANDS = 15
STOI_MIN_FREQ = 150.0
STOI_SEGMENT = 30
STOI_BETA = -15.0
STOI_DYN_RANGE = 40.0


def third_octave_matrix(fs=STOI_FS, nfft=STOI_NFFT, n_bands=STOI_BANDS, min_freq=STOI_MIN_FREQ):
    """Binary one-third-octave band matrix over the one-sided DFT bins.

    Band ``k`` has center ``min_freq * 2**(k/3)`` and edges a sixth of an
    octave either side; each edge snaps to the nearest DFT bin.
    """
    freqs = np.linspace(0, fs, nfft + 1)[: nfft // 2 + 1]
    k = np.arange(n_bands)
    centers = min_freq * 2.0 ** (k / 3.0)
    lo = min_freq * 2.0 ** ((2 * k - 1) / 6.0)
    hi = min_freq * 2.0 ** ((2 * k + 1) / 6.0)
    obm = np.zeros((n_bands, freqs.size))
    for b in range(n_bands):
        i_lo = int(np.argmin((freqs - lo[b]) ** 2))
        i_hi = int(np.argmin((freqs - hi[b]) ** 2))
        obm[b, i_lo:i_hi] = 1.0
    return obm, centers


_OBM, _ = third_octave_matrix()


def _stoi_window():
    # Hann of length N+2 with the zero endpoints dropped
    return np.hanning(STOI_FRAME + 2)[1:-1]


def _drop_silent_frames(x, y):
    """Keep frames within ``STOI_DYN_RANGE`` dB of the loudest clean frame,
    re-synthesised by windowed overlap-add."""
    hop = STOI_FRAME // 2
    w = _stoi_window()
    if x.size < STOI_FRAME:
        raise UndefinedMetricError("signal shorter than one analysis frame")
    fx = frame_signal(x, STOI_FRAME, hop) * w
    fy = frame_signal(y, STOI_FRAME, hop) * w
    energy = 20.0 * np.log10(np.linalg.norm(fx, axis=1) + np.finfo(float).eps)
    keep = energy > energy.max() - STOI_DYN_RANGE
    if not np.any(keep) or energy.max() <= 20.0 * np.log10(np.finfo(float).eps) + 1:
        raise UndefinedMetricError("all frames are silent")
    fx, fy = fx[keep], fy[keep]
    n = fx.shape[0]
    out_len = (n - 1) * hop + STOI_FRAME
    xs, ys = np.zeros(out_len), np.zeros(out_len)
    for i in range(n):
        xs[i * hop:i * hop + STOI_FRAME] += fx[i]
        ys[i * hop:i * hop + STOI_FRAME] += fy[i]
    return xs, ys


def _third_octave_envelopes(x):
    hop = STOI_FRAME // 2
    frames = frame_signal(x, STOI_FRAME, hop) * _stoi_window()
    spec = np.fft.rfft(frames, n=STOI_NFFT, axis=1)
    return np.sqrt(_OBM @ (np.abs(spec) ** 2).T)


def stoi(clean, processed) -> float:
    """Short-time objective intelligibility of ``processed`` against ``clean``.

    Both signals are resampled to 10 kHz, silent frames are removed, and
    one-third-octave envelopes over 30-frame segments are compared by
    clipped, normalised correlation. The result is clamped to [0, 1].
    """
    x, y, fs = _pair(clean, processed)
    if fs != STOI_FS:
        g = math.gcd(STOI_FS, fs)
        x = resample_poly(x, STOI_FS // g, fs // g)
        y = resample_poly(y, STOI_FS // g, fs // g)
    x, y = _drop_silent_frames(x, y)
    X = _third_octave_envelopes(x)
    Y = _third_octave_envelopes(y)
    n_frames = X.shape[1]
    if n_frames < STOI_SEGMENT:
        raise UndefinedMetricError(f"only {n_frames} non-silent frames; need {STOI_SEGMENT}")
    eps = np.finfo(float).eps
    idx = np.arange(STOI_SEGMENT)[None, :] + np.arange(n_frames - STOI_SEGMENT + 1)[:, None]
    xs = X[:, idx].transpose(1, 0, 2)  # segments x bands x frames
    ys = Y[:, idx].transpose(1, 0, 2)
    scale = np.linalg.norm(xs, axis=2, keepdims=True) / (np.linalg.norm(ys, axis=2, keepdims=True) + eps)
    yc = np.minimum(ys * scale, xs * (1.0 + 10.0 ** (-STOI_BETA / 20.0)))
    yc = yc - yc.mean(axis=2, keepdims=True)
    xc = xs - xs.mean(axis=2, keepdims=True)
    corr = (yc * xc).sum(axis=2) / ((np.linalg.norm(yc, axis=2) + eps) * (np.linalg.norm(xc, axis=2) + eps))
    return float(np.clip(corr.mean(), 0.0, 1.0))


# ---------------------------------------------------------------------------
# frequency-weighted segmental SNR

FW_BANDS = 25
FW_WINDOW = 512
FW_HOP = 256
FW_GAMMA = 0.2
FW_MIN_DB = -10.0
FW_MAX_DB = 35.0


def fwsnrseg(clean, processed) -> float:
    """Frequency-weighted segmental SNR in dB.

    Band magnitudes come from 25 mel triangles over Hann-windowed 512-sample
    frames (hop 256). Each band's SNR compares the clean band magnitude with
    the magnitude difference between clean and processed; bands are weighted
    by clean magnitude to the power 0.2, each segment is clamped to
    [-10, 35] dB and segments are averaged. Frames with a silent clean
    spectrum are skipped.
    """
    x, y, fs = _pair(clean, processed)
    if x.size < FW_WINDOW:
        raise UndefinedMetricError("signal shorter than one analysis frame")
    w = get_window("hann", FW_WINDOW)
    fb = mel_filterbank(FW_BANDS, FW_WINDOW, fs)
    X = np.abs(np.fft.rfft(frame_signal(x, FW_WINDOW, FW_HOP) * w, axis=1)) @ fb.T
    Y = np.abs(np.fft.rfft(frame_signal(y, FW_WINDOW, FW_HOP) * w, axis=1)) @ fb.T
    active = X.sum(axis=1) > 0
    if not np.any(active):
        raise UndefinedMetricError("clean signal is silent")
    X, Y = X[active], Y[active]
    tiny = np.finfo(float).tiny
    err = np.maximum((X - Y) ** 2, tiny)
    snr = 10.0 * (np.log10(np.maximum(X ** 2, tiny)) - np.log10(err))
    weights = X ** FW_GAMMA
    seg = (weights * snr).sum(axis=1) / weights.sum(axis=1)
    return float(np.mean(np.clip(seg, FW_MIN_DB, FW_MAX_DB)))


# ---------------------------------------------------------------------------
# paired t-test


def student_t_sf2(t, df) -> float:
    """Two-sided tail probability ``P(|T| >= |t|)`` for Student's t."""
    return float(betainc(df / 2.0, 0.5, df / (df + t * t)))


@dataclass(frozen=True)
class TTestResult:
    t_statistic: float
    p_value: float
    n_pairs: int

    @property
    def significant(self) -> bool:
        return self.p_value < 0.05


def paired_ttest(a, b) -> TTestResult:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ShapeError("paired samples must be equal-length vectors")
    n = a.size
    if n < 2:
        raise DegenerateTestError("need at least two pairs")
    d = a - b
    sd = d.std(ddof=1)
    if sd == 0.0:
        raise DegenerateTestError("differences have zero variance")
    t = d.mean() / (sd / math.sqrt(n))
    p = min(1.0, max(0.0, student_t_sf2(t, n - 1)))
    return TTestResult(float(t), p, n)


# ---------------------------------------------------------------------------
# records and tables


@dataclass
class EvalRecord:
    id: str
    noise_name: str
    snr_db: float
    method: str
    stoi: float
    fwsnrseg_db: float
    pesq: float | None = None

    def __post_init__(self):
        if not 0.0 <= self.stoi <= 1.0:
            raise ValueError(f"stoi {self.stoi} outside [0, 1]")
        if not FW_MIN_DB <= self.fwsnrseg_db <= FW_MAX_DB:
            raise ValueError(f"fwsnrseg {self.fwsnrseg_db} outside [{FW_MIN_DB}, {FW_MAX_DB}]")

    def score(self, metric):
        return {"stoi": self.stoi, "fwsnrseg": self.fwsnrseg_db, "pesq": self.pesq}[metric]


RESULT_COLUMNS = ("id", "noise", "snr_db", "method", "stoi", "fwsnrseg", "pesq")


def write_results_csv(path, records):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(RESULT_COLUMNS)
        for r in records:
            w.writerow([r.id, r.noise_name, f"{r.snr_db:g}", r.method, f"{r.stoi:.6f}",
                        f"{r.fwsnrseg_db:.6f}", "" if r.pesq is None else f"{r.pesq:.4f}"])


def read_results_csv(path):
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out.append(EvalRecord(row["id"], row["noise"], float(row["snr_db"]), row["method"],
                                  float(row["stoi"]), float(row["fwsnrseg"]),
                                  float(row["pesq"]) if row.get("pesq") else None))
    return out


def read_pesq_scores(path) -> dict:
    """Externally computed scores, one ``id score`` pair per line."""
    scores = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            if len(parts) != 2:
                raise ValueError(f"{path}:{lineno}: expected 'id score'")
            scores[parts[0]] = float(parts[1])
    return scores


@dataclass
class ResultTable:
    """Mean scores per method over (noise, SNR) cells plus a row average."""

    metric: str
    columns: list  # (noise, snr) pairs
    rows: dict  # method -> list of cell means (NaN where empty)
    reference: dict | None = None  # label -> average, shown for context only

    def average(self, method) -> float:
        cells = np.asarray(self.rows[method], dtype=float)
        return float(np.nanmean(cells))

    def to_csv(self, path=None) -> str:
        header = ["method"] + [f"{n}@{s:g}dB" for n, s in self.columns] + ["Average"]
        lines = [",".join(header)]
        for method, cells in self.rows.items():
            vals = ["" if np.isnan(c) else f"{c:.4f}" for c in cells]
            lines.append(",".join([method] + vals + [f"{self.average(method):.4f}"]))
        for label, value in (self.reference or {}).items():
            lines.append(",".join([label] + [""] * len(self.columns) + [f"{value:.4f}"]))
        text = "\n".join(lines) + "\n"
        if path is not None:
            Path(path).write_text(text)
        return text


def aggregate(records, metric="stoi", reference=None) -> ResultTable:
    """Group records by method into noise x SNR cells of mean scores."""
    records = list(records)
    if not records:
        raise ValueError("no records to aggregate")
    cells = defaultdict(list)
    for r in records:
        v = r.score(metric)
        if v is not None:
            cells[(r.method, r.noise_name, float(r.snr_db))].append(v)
    noises = sorted({r.noise_name for r in records})
    snrs = sorted({float(r.snr_db) for r in records})
    columns = [(n, s) for n in noises for s in snrs]
    methods = list(dict.fromkeys(r.method for r in records))
    rows = {m: [float(np.mean(cells[(m, n, s)])) if cells[(m, n, s)] else float("nan")
                for n, s in columns] for m in methods}
    return ResultTable(metric, columns, rows, reference)


def pairwise_ttests(records, metric="stoi"):
    """Per-utterance paired t-tests between every pair of methods."""
    by_method = defaultdict(dict)
    for r in records:
        by_method[r.method][r.id] = r.score(metric)
    methods = list(by_method)
    out = {}
    for i, a in enumerate(methods):
        for b in methods[i + 1:]:
            ids = sorted(set(by_method[a]) & set(by_method[b]))
            try:
                out[(a, b)] = paired_ttest([by_method[a][k] for k in ids], [by_method[b][k] for k in ids])
            except DegenerateTestError as exc:
                log.warning("t-test %s vs %s skipped: %s", a, b, exc)
    return out
