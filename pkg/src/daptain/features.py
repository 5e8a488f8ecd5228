"""STFT and the AMS / RASTA-PLP / DSCC descriptors used by the domain classifiers.

All framing is 32 ms / 16 ms at 16 kHz (512 / 256 samples). Per-frame
descriptors are computed over a whole clip, then averaged over the frames
whose centers fall inside each 1000-sample VCAE block, giving one
41-dimensional classifier sample per block.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.fft import dct
from scipy.signal import decimate, get_window, lfilter, lfilter_zi
from scipy.special import ndtri
from scipy.stats import rankdata

from .audio import PROCESSING_RATE, AudioClip
from .errors import DegenerateInputError, NumericalError

WINDOW = 512
HOP = 256
LOG_FLOOR = 1e-10
AMS_DIM, PLP_DIM, DSCC_DIM = 15, 13, 13
FEATURE_DIM = AMS_DIM + PLP_DIM + DSCC_DIM
LAYOUT = {"ams": slice(0, 15), "rasta_plp": slice(15, 28), "dscc": slice(28, 41)}


def _as_array(x):
    if isinstance(x, AudioClip):
        return x.samples
    return np.asarray(x, dtype=np.float64)


@dataclass
class Spectrogram:
    values: np.ndarray  # frames x bins, complex
    window_len: int
    hop: int
    sample_rate: int = PROCESSING_RATE

    @property
    def magnitude(self):
        return np.abs(self.values)


def frame_signal(x, window_len, hop):
    n = 1 + (x.size - window_len) // hop
    idx = np.arange(n)[:, None] * hop + np.arange(window_len)[None, :]
    return x[idx]


def stft(clip, window_len: int = WINDOW, hop: int = HOP, sample_rate=None) -> Spectrogram:
    """Hann-windowed one-sided DFT, ``1 + (len - window_len) // hop`` frames."""
    x = _as_array(clip)
    if sample_rate is None:
        sample_rate = clip.sample_rate if isinstance(clip, AudioClip) else PROCESSING_RATE
    if window_len & (window_len - 1):
        raise ValueError("window_len must be a power of two")
    if not 0 < hop <= window_len:
        raise ValueError("hop must be in (0, window_len]")
    if x.size < window_len:
        raise DegenerateInputError(f"clip of {x.size} samples is shorter than the window")
    w = get_window("hann", window_len)
    spec = np.fft.rfft(frame_signal(x, window_len, hop) * w, axis=1)
    return Spectrogram(spec, window_len, hop, sample_rate)


def _log(x):
    return np.log(np.maximum(x, LOG_FLOOR))


def _triangles(centers_lo, centers, centers_hi, freqs):
    lo = (freqs[None, :] - centers_lo[:, None]) / (centers - centers_lo)[:, None]
    hi = (centers_hi[:, None] - freqs[None, :]) / (centers_hi - centers)[:, None]
    return np.maximum(0.0, np.minimum(lo, hi))


# ---------------------------------------------------------------------------
# AMS


def ams_filterbank(n_fft=128, env_rate=PROCESSING_RATE // 4, n_bands=AMS_DIM,
                   lo=15.6, hi=400.0):
    centers = np.linspace(lo, hi, n_bands)
    step = centers[1] - centers[0]
    lower = np.concatenate([[0.0], centers[:-1]])
    upper = np.concatenate([centers[1:], [hi + step]])
    freqs = np.arange(n_fft // 2 + 1) * env_rate / n_fft
    return _triangles(lower, centers, upper, freqs)


def ams_features(clip) -> np.ndarray:
    """Amplitude modulation spectrogram, ``frames x 15`` log band energies.

    Full-wave rectified envelope, decimated by 4 (anti-aliased), then a
    Hann-windowed 128-point DFT per 32 ms frame pooled into 15 triangular
    modulation bands spanning 15.6-400 Hz.
    """
    x = _as_array(clip)
    env = np.abs(x)
    if env.size > 27:
        env = decimate(env, 4, zero_phase=True)
    else:
        env = env[::4]
    n_win, n_hop = WINDOW // 4, HOP // 4
    if env.size < n_win:
        raise DegenerateInputError("clip too short for one AMS frame")
    frames = frame_signal(env, n_win, n_hop) * get_window("hann", n_win)
    power = np.abs(np.fft.rfft(frames, axis=1)) ** 2
    return _log(power @ ams_filterbank().T)


# ---------------------------------------------------------------------------
# RASTA-PLP


def hz_to_bark(f):
    return 6.0 * np.arcsinh(np.asarray(f) / 600.0)


def bark_to_hz(z):
    return 600.0 * np.sinh(np.asarray(z) / 6.0)


def bark_filterbank(n_fft=WINDOW, sr=PROCESSING_RATE):
    n_bands = int(np.ceil(hz_to_bark(sr / 2))) + 1
    centers = np.linspace(0.0, hz_to_bark(sr / 2), n_bands)
    bark = hz_to_bark(np.arange(n_fft // 2 + 1) * sr / n_fft)
    # Hermansky critical-band masking curve on the Bark axis
    d = bark[None, :] - centers[:, None]
    w = np.where(d < -0.5, 10.0 ** (2.5 * (d + 0.5)), np.where(d > 0.5, 10.0 ** (-(d - 0.5)), 1.0))
    w[(d < -1.3) | (d > 2.5)] = 0.0
    return w, bark_to_hz(centers)


RASTA_NUM = 0.1 * np.array([2.0, 1.0, 0.0, -1.0, -2.0])
RASTA_DEN = np.array([1.0, -0.98])


def rasta_filter(log_bands: np.ndarray) -> np.ndarray:
    """Band-pass each band trajectory along time (axis 0).

    The first four outputs are the filter warm-up and are set to zero; the
    FIR state is seeded with the first frame so constant trajectories map
    to exactly zero.
    """
    x = np.asarray(log_bands, dtype=np.float64)
    y = np.zeros_like(x)
    zi = lfilter_zi(RASTA_NUM, [1.0])[:, None] * x[:1, :]
    _, zf = lfilter(RASTA_NUM, [1.0], x[:4], axis=0, zi=zi)
    if x.shape[0] > 4:
        y[4:] = lfilter(RASTA_NUM, RASTA_DEN, x[4:], axis=0, zi=zf)[0]
    return y


def equal_loudness(freqs):
    fsq = np.asarray(freqs) ** 2
    return (fsq / (fsq + 1.6e5)) ** 2 * ((fsq + 1.44e6) / (fsq + 9.61e6))


def levinson(r: np.ndarray, order: int):
    """Levinson-Durbin on rows of autocorrelations ``r`` (frames x lags).

    Returns ``(a, err)`` with ``a[:, 0] == 1``. A non-positive prediction
    error triggers one retry with lag 0 inflated by 1e-9 before raising.
    """
    r = np.atleast_2d(np.asarray(r, dtype=np.float64))
    for attempt in range(2):
        n = r.shape[0]
        a = np.zeros((n, order + 1))
        a[:, 0] = 1.0
        err = r[:, 0].copy()
        ok = True
        for i in range(1, order + 1):
            if np.any(err <= 0):
                ok = False
                break
            acc = r[:, i] + np.sum(a[:, 1:i] * r[:, i - 1:0:-1], axis=1)
            k = -acc / err
            a_prev = a[:, 1:i].copy()
            a[:, 1:i] = a_prev + k[:, None] * a_prev[:, ::-1]
            a[:, i] = k
            err = err * (1.0 - k * k)
        if ok and np.all(err > 0):
            return a, err
        r = r.copy()
        r[:, 0] *= 1.0 + 1e-9
    raise NumericalError("Levinson-Durbin: non-positive prediction error")


def lpc_to_cepstrum(a, err, n_ceps):
    """All-pole model cepstrum; c0 is the log prediction-error power."""
    n_frames, p1 = a.shape
    c = np.zeros((n_frames, n_ceps))
    c[:, 0] = np.log(err)
    for n in range(1, n_ceps):
        acc = a[:, n].copy() if n < p1 else np.zeros(n_frames)
        for m in range(1, n):
            if n - m < p1:
                acc += (m / n) * c[:, m] * a[:, n - m]
        c[:, n] = -acc
    return c


def rasta_plp(clip, model_order: int = 12) -> np.ndarray:
    """RASTA-PLP cepstra, ``frames x (model_order + 1)`` (c0..c12)."""
    spec = stft(clip)
    power = np.abs(spec.values) ** 2
    fb, centers = bark_filterbank()
    bands = rasta_filter(_log(power @ fb.T))
    aud = np.exp(bands) * equal_loudness(centers)[None, :]
    aud = np.cbrt(aud)
    aud[:, 0] = aud[:, 1]
    aud[:, -1] = aud[:, -2]
    # real symmetric spectrum -> autocorrelation
    r = np.fft.irfft(aud, n=2 * (aud.shape[1] - 1), axis=1)[:, :model_order + 1]
    a, err = levinson(r, model_order)
    return lpc_to_cepstrum(a, err, model_order + 1)


# ---------------------------------------------------------------------------
# DSCC


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m) / 2595.0) - 1.0)


def mel_filterbank(n_bands=40, n_fft=WINDOW, sr=PROCESSING_RATE, fmin=0.0, fmax=None):
    fmax = sr / 2 if fmax is None else fmax
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_bands + 2))
    freqs = np.arange(n_fft // 2 + 1) * sr / n_fft
    return _triangles(edges[:-2], edges[1:-1], edges[2:], freqs)


def delta(frames: np.ndarray, width: int = 2) -> np.ndarray:
    """Regression delta over +-``width`` frames, edges replicated."""
    x = np.asarray(frames, dtype=np.float64)
    padded = np.pad(x, ((width, width), (0, 0)), mode="edge")
    n = x.shape[0]
    out = np.zeros_like(x)
    for k in range(1, width + 1):
        out += k * (padded[width + k:width + k + n] - padded[width - k:width - k + n])
    return out / (2.0 * sum(k * k for k in range(1, width + 1)))


def gaussianize(x: np.ndarray) -> np.ndarray:
    """Per-column rank-based mapping onto standard normal quantiles.

    Columns whose spread is at round-off level carry no ordering and map
    to zero.
    """
    n = x.shape[0]
    ranks = rankdata(x, method="average", axis=0)
    out = ndtri((ranks - 0.5) / n)
    flat = np.ptp(x, axis=0) <= 1e-9 * np.maximum(np.max(np.abs(x), axis=0), 1.0)
    out[:, flat] = 0.0
    return out


def dscc(clip, n_ceps: int = DSCC_DIM) -> np.ndarray:
    spec = stft(clip)
    if spec.values.shape[0] < 5:
        raise DegenerateInputError("DSCC needs at least 5 frames")
    mel = np.abs(spec.values) @ mel_filterbank().T
    return dct(gaussianize(delta(mel)), type=2, norm="ortho", axis=1)[:, :n_ceps]


# ---------------------------------------------------------------------------
# block pooling and normalisation


def frame_features(clip) -> np.ndarray:
    """Stacked ``frames x 41`` descriptors [AMS | RASTA-PLP | DSCC]."""
    parts = [ams_features(clip), rasta_plp(clip), dscc(clip)]
    n = min(p.shape[0] for p in parts)
    return np.hstack([p[:n] for p in parts])


def stack_block_features(clip, block_len: int = 1000, hop: int = 600) -> np.ndarray:
    """One 41-vector per VCAE block of ``clip`` (same blocks as ``frame_blocks``).

    Each row is the mean of the frame descriptors whose frame centers lie in
    the block's span; blocks that contain no frame center take the nearest
    frame.
    """
    x = _as_array(clip)
    feats = frame_features(x)
    centers = np.arange(feats.shape[0]) * HOP + WINDOW // 2
    n_blocks = -(-x.size // hop)
    pad_left = (block_len - hop) // 2
    starts = np.arange(n_blocks) * hop - pad_left
    out = np.empty((n_blocks, FEATURE_DIM))
    for k, s in enumerate(starts):
        inside = (centers >= s) & (centers < s + block_len)
        if inside.any():
            out[k] = feats[inside].mean(axis=0)
        else:
            out[k] = feats[np.argmin(np.abs(centers - (s + block_len / 2)))]
    return out


@dataclass
class FeatureNormalizer:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, features: np.ndarray) -> "FeatureNormalizer":
        f = np.asarray(features, dtype=np.float64)
        mean = f.mean(axis=0)
        std = f.std(axis=0)
        std[std == 0] = 1.0
        return cls(mean, std)

    def transform(self, features):
        return (np.asarray(features, dtype=np.float64) - self.mean) / self.std
