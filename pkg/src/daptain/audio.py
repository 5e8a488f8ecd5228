"""Audio clips, WAV I/O, SNR mixing and block framing."""

from __future__ import annotations

import logging
import math
import struct
import wave
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.signal import resample_poly

from .errors import DegenerateInputError, FormatError, UnsupportedError

log = logging.getLogger(__name__)

PROCESSING_RATE = 16000
SUPPORTED_RATES = (8000, 16000, 44100, 48000)

_WAVE_FORMAT_PCM = 0x0001
_WAVE_FORMAT_IEEE_FLOAT = 0x0003
_WAVE_FORMAT_EXTENSIBLE = 0xFFFE


@dataclass
class AudioClip:
    samples: np.ndarray
    sample_rate: int = PROCESSING_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).ravel()
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("AudioClip samples must be finite")

    def __len__(self):
        return self.samples.size

    @property
    def duration(self):
        return self.samples.size / self.sample_rate


def rms(x) -> float:
    x = np.asarray(x, dtype=np.float64)
    return float(np.sqrt(np.mean(x * x))) if x.size else 0.0


# ---------------------------------------------------------------------------
# WAV


def _chunks(data: bytes):
    pos = 12
    while pos + 8 <= len(data):
        cid, size = struct.unpack("<4sI", data[pos:pos + 8])
        body = data[pos + 8:pos + 8 + size]
        if len(body) < size:
            raise FormatError(f"truncated {cid!r} chunk")
        yield cid, body
        pos += 8 + size + (size & 1)


def read_wav(path) -> AudioClip:
    """Read a PCM16 or float32 RIFF/WAVE file as a mono clip in [-1, 1].

    Multi-channel files are averaged to mono (with a warning).
    """
    data = Path(path).read_bytes()
    if len(data) < 12 or data[:4] != b"RIFF" or data[8:12] != b"WAVE":
        raise FormatError(f"{path}: not a RIFF/WAVE file")
    fmt = None
    payload = None
    for cid, body in _chunks(data):
        if cid == b"fmt ":
            if len(body) < 16:
                raise FormatError(f"{path}: fmt chunk too short")
            fmt = struct.unpack("<HHIIHH", body[:16])
            if fmt[0] == _WAVE_FORMAT_EXTENSIBLE and len(body) >= 26:
                sub = struct.unpack("<H", body[24:26])[0]
                fmt = (sub,) + fmt[1:]
        elif cid == b"data":
            payload = body
    if fmt is None or payload is None:
        raise FormatError(f"{path}: missing fmt or data chunk")

    tag, channels, rate, _, block_align, bits = fmt
    if channels < 1 or block_align == 0:
        raise FormatError(f"{path}: invalid channel count or block alignment")
    if tag == _WAVE_FORMAT_PCM and bits == 16:
        raw = np.frombuffer(payload[: len(payload) // 2 * 2], dtype="<i2")
        x = raw.astype(np.float64) / 32768.0
    elif tag == _WAVE_FORMAT_IEEE_FLOAT and bits == 32:
        raw = np.frombuffer(payload[: len(payload) // 4 * 4], dtype="<f4")
        x = raw.astype(np.float64)
    else:
        raise UnsupportedError(f"{path}: unsupported codec (format tag {tag}, {bits} bits)")

    if rate not in SUPPORTED_RATES:
        raise UnsupportedError(f"{path}: sample rate {rate} not in {SUPPORTED_RATES}")
    if channels > 1:
        log.warning("%s: %d channels averaged to mono", path, channels)
        x = x[: x.size // channels * channels].reshape(-1, channels).mean(axis=1)
    if not np.all(np.isfinite(x)):
        raise FormatError(f"{path}: non-finite samples")
    return AudioClip(x, rate)


def write_wav(path, clip: AudioClip) -> int:
    """Write ``clip`` as 16-bit PCM; returns the number of clipped samples."""
    x = clip.samples * 32768.0
    over = int(np.count_nonzero((x > 32767.0) | (x < -32768.0)))
    if over:
        log.warning("%s: %d samples clipped to full scale", path, over)
    pcm = np.clip(np.round(x), -32768, 32767).astype("<i2")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(int(clip.sample_rate))
        fh.writeframes(pcm.tobytes())
    return over


def load_processing_clip(path) -> AudioClip:
    """Read a WAV and bring it to the internal 16 kHz rate."""
    return resample(read_wav(path), PROCESSING_RATE)


# ---------------------------------------------------------------------------
# resampling and mixing


def resample(clip: AudioClip, target_rate: int) -> AudioClip:
    if target_rate <= 0:
        raise ValueError("target_rate must be positive")
    if target_rate == clip.sample_rate:
        return AudioClip(clip.samples.copy(), clip.sample_rate)
    g = math.gcd(int(target_rate), int(clip.sample_rate))
    up, down = target_rate // g, clip.sample_rate // g
    y = resample_poly(clip.samples, up, down)
    n_out = int(round(len(clip) * target_rate / clip.sample_rate))
    if y.size < n_out:
        y = np.pad(y, (0, n_out - y.size))
    return AudioClip(y[:n_out], target_rate)


@dataclass
class MixtureRecord:
    """A clean clip plus scaled noise at a prescribed SNR.

    ``noise`` holds the *scaled* noise segment actually added, so the
    achieved SNR can be recomputed from the stored pair.
    """

    id: str
    clean: AudioClip
    noise: AudioClip
    snr_db: float
    mixture: AudioClip
    noise_name: str = ""
    split: str = "train"
    clipped: int = 0

    def achieved_snr_db(self) -> float:
        return 10.0 * math.log10(np.sum(self.clean.samples ** 2) / np.sum(self.noise.samples ** 2))


def _noise_segment(noise: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    if noise.size < n:
        reps = -(-n // noise.size)
        noise = np.tile(noise, reps)
    offset = int(rng.integers(0, noise.size - n + 1))
    return noise[offset:offset + n]


def mix_at_snr(clean: AudioClip, noise: AudioClip, snr_db: float, rng=None, *,
               id: str = "", noise_name: str = "", split: str = "train") -> MixtureRecord:
    """Add a randomly cropped noise segment to ``clean`` at ``snr_db``.

    The gain is ``rms(clean) / (rms(noise) * 10**(snr_db/20))`` with both
    RMS values taken over the clip length. The mixture is hard-clipped to
    [-1, 1] afterwards and the clipped count recorded.
    """
    if clean.sample_rate != noise.sample_rate:
        raise ValueError("clean and noise sample rates differ")
    if len(clean) == 0 or len(noise) == 0:
        raise DegenerateInputError("empty clean or noise clip")
    rng = np.random.default_rng(rng)
    seg = _noise_segment(noise.samples, len(clean), rng)
    rc, rn = rms(clean.samples), rms(seg)
    if rc == 0.0 or rn == 0.0:
        raise DegenerateInputError("silent clean or noise segment")
    gain = rc / (rn * 10.0 ** (snr_db / 20.0))
    scaled = gain * seg
    mix = clean.samples + scaled
    clipped = int(np.count_nonzero(np.abs(mix) > 1.0))
    if clipped:
        log.debug("mixture %s: %d samples clipped", id, clipped)
        mix = np.clip(mix, -1.0, 1.0)
    sr = clean.sample_rate
    return MixtureRecord(id, clean, AudioClip(scaled, sr), float(snr_db), AudioClip(mix, sr),
                         noise_name, split, clipped)


def split_noise(noise: AudioClip) -> tuple[AudioClip, AudioClip]:
    """First half (rounded up) for training, second half for evaluation."""
    if len(noise) < 2:
        raise DegenerateInputError("noise clip needs at least 2 samples")
    half = -(-len(noise) // 2)
    return (AudioClip(noise.samples[:half], noise.sample_rate),
            AudioClip(noise.samples[half:], noise.sample_rate))


# ---------------------------------------------------------------------------
# block framing


@dataclass
class BlockStream:
    """Overlapping input windows whose centers tile the source clip.

    Block ``k`` starts at sample ``k * hop - pad_left`` of the original clip;
    its center region ``[pad_left, pad_left + center_len)`` maps onto
    ``[k * hop, (k + 1) * hop)``.
    """

    blocks: np.ndarray
    block_len: int
    hop: int
    length: int
    pad_left: int
    center_len: int = field(init=False)

    def __post_init__(self):
        self.center_len = self.hop

    def __len__(self):
        return self.blocks.shape[0]

    def centers(self) -> np.ndarray:
        return self.blocks[:, self.pad_left:self.pad_left + self.center_len]


def frame_blocks(clip, block_len: int = 1000, hop: int = 600) -> BlockStream:
    x = clip.samples if isinstance(clip, AudioClip) else np.asarray(clip, dtype=np.float64)
    if x.size < 1:
        raise DegenerateInputError("cannot frame an empty clip")
    if not block_len >= hop > 0:
        raise ValueError("need block_len >= hop > 0")
    n_blocks = -(-x.size // hop)
    pad_left = (block_len - hop) // 2
    total = (n_blocks - 1) * hop + block_len
    pad_right = total - pad_left - x.size
    # reflect needs at least 2 samples; a single sample is edge-extended
    mode = "reflect" if x.size > 1 else "edge"
    reflect_right = min(pad_right, (block_len - hop) - pad_left)
    padded = np.pad(x, (pad_left, reflect_right), mode=mode)
    padded = np.pad(padded, (0, total - padded.size))
    idx = np.arange(n_blocks)[:, None] * hop + np.arange(block_len)[None, :]
    return BlockStream(padded[idx], block_len, hop, x.size, pad_left)


def reassemble(centers: np.ndarray, length: int) -> np.ndarray:
    """Concatenate per-block center regions and trim to ``length``."""
    return np.asarray(centers).reshape(-1)[:length]
