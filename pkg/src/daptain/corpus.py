"""Synthetic two-domain corpus for desk-scale experiments.

Speech is imitated by a harmonic source with a jittered F0 contour, a
2-8 Hz syllabic envelope and per-syllable formant resonators. The source
and target domains differ only in their F0 range and a fixed "microphone"
colouration applied to target clips, which gives a controlled covariate
shift. Three noises (white, pink, babble) are generated once per corpus.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.signal import butter, iirpeak, lfilter, sosfilt

from .audio import PROCESSING_RATE, AudioClip, write_wav
from .manifest import Manifest, ManifestEntry

log = logging.getLogger(__name__)

NOISES = ("white", "pink", "babble")
SNRS_DB = (-5.0, 0.0, 5.0)


@dataclass
class CorpusSpec:
    n_source: int = 120
    n_target: int = 900
    clip_seconds: float = 3.0
    source_f0: tuple = (90.0, 220.0)
    target_f0: tuple = (100.0, 260.0)
    domain_filter: bool = True
    noise_seconds: float = 240.0
    noises: tuple = NOISES
    snrs_db: tuple = SNRS_DB
    speech_rms: float = 0.05
    level_jitter_db: float = 3.0
    validation_fraction: float = 60.0 / 900.0
    sample_rate: int = PROCESSING_RATE
    extra: dict = field(default_factory=dict)

    def scaled(self, scale: float) -> "CorpusSpec":
        return replace(self, n_source=int(round(self.n_source * scale)),
                       n_target=int(round(self.n_target * scale)))


# ---------------------------------------------------------------------------
# signal generators


def _resonator(freq, bw, fs):
    r = np.exp(-np.pi * bw / fs)
    theta = 2 * np.pi * freq / fs
    a = np.array([1.0, -2 * r * np.cos(theta), r * r])
    return np.array([a.sum()]), a  # unity gain at DC


def _formant_set(rng):
    return [(rng.uniform(300, 900), rng.uniform(60, 120)),
            (rng.uniform(900, 2400), rng.uniform(80, 160)),
            (rng.uniform(2400, 3600), rng.uniform(120, 240))]


def microphone_filter(x, fs=PROCESSING_RATE):
    """Fixed target-domain colouration: 100 Hz high-pass, +6 dB presence
    peak at 3 kHz and a 6 kHz low-pass."""
    hp = butter(1, 100, "highpass", fs=fs, output="sos")
    lp = butter(2, 6000, "lowpass", fs=fs, output="sos")
    y = sosfilt(lp, sosfilt(hp, x))
    b, a = iirpeak(3000.0, 2.0, fs=fs)
    return y + lfilter(b, a, y)


def synth_speech(rng: np.random.Generator, n: int, f0_range, fs=PROCESSING_RATE):
    t = np.arange(n) / fs
    f0 = rng.uniform(*f0_range)
    syll_rate = rng.uniform(2.0, 8.0)
    cycles = syll_rate * t + rng.uniform(0, 1)
    seg = np.floor(cycles).astype(int)
    seg -= seg.min()
    n_seg = seg[-1] + 1

    # per-syllable intonation, interpolated between syllable centres
    accent = np.exp(rng.uniform(-0.2, 0.2, n_seg + 1))
    prosody = np.interp(cycles - np.floor(cycles[0]) - 0.5, np.arange(n_seg + 1), accent)
    vib_rate = rng.uniform(3.0, 6.0)
    contour = f0 * prosody * (1.0 + 0.03 * np.sin(2 * np.pi * vib_rate * t + rng.uniform(0, 2 * np.pi))
                              - 0.08 * t / max(t[-1], 1e-9))
    phase = 2 * np.pi * np.cumsum(contour) / fs
    n_harm = int(7600 // (contour.max()))
    source = np.zeros(n)
    for k in range(1, n_harm + 1):
        source += np.sin(k * phase) / k

    env = (0.5 - 0.5 * np.cos(2 * np.pi * cycles)) ** 1.5
    voiced = np.zeros(n)
    for s in range(n_seg):
        y = source.copy()
        for freq, bw in _formant_set(rng):
            b, a = _resonator(freq, bw, fs)
            y = lfilter(b, a, y)
        mask = seg == s
        voiced[mask] = y[mask]
    aspiration = 0.03 * rng.standard_normal(n)
    return env * (voiced / (np.std(voiced) + 1e-12) + aspiration)


def white_noise(rng, n):
    return rng.standard_normal(n)


def pink_noise(rng, n):
    spec = np.fft.rfft(rng.standard_normal(n))
    f = np.arange(spec.size, dtype=np.float64)
    f[0] = 1.0
    spec /= np.sqrt(f)
    spec[0] = 0.0
    return np.fft.irfft(spec, n)


def babble_noise(rng, n, fs=PROCESSING_RATE, talkers=6):
    t = np.arange(n) / fs
    shape = butter(2, [150, 3500], "bandpass", fs=fs, output="sos")
    out = np.zeros(n)
    for _ in range(talkers):
        carrier = sosfilt(shape, rng.standard_normal(n))
        rate = rng.uniform(2.0, 8.0)
        env = (0.5 - 0.5 * np.cos(2 * np.pi * (rate * t + rng.uniform(0, 1)))) ** 1.5
        out += carrier * env
    return out


_NOISE_FUNCS = {"white": white_noise, "pink": pink_noise, "babble": babble_noise}


def _normalize(x, target_rms):
    return x * (target_rms / (np.sqrt(np.mean(x * x)) + 1e-20))


# ---------------------------------------------------------------------------


def _snr_tag(snr):
    return ("m" if snr < 0 else "p") + f"{abs(snr):g}"


def synth_corpus(seed: int, spec: CorpusSpec, out_dir) -> tuple[Manifest, Manifest]:
    """Write clean clips, noises and the two domain manifests under ``out_dir``.

    Returns ``(source_manifest, target_manifest)``; the manifests are also
    written as ``source.jsonl`` and ``target.jsonl``.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    fs = spec.sample_rate
    root = np.random.SeedSequence(int(seed))
    noise_ss, src_ss, tgt_ss = root.spawn(3)

    n_noise = int(round(spec.noise_seconds * fs))
    noise_paths = {}
    for name, ss in zip(spec.noises, noise_ss.spawn(len(spec.noises))):
        x = _normalize(_NOISE_FUNCS[name](np.random.default_rng(ss), n_noise), 0.1)
        rel = f"noise/{name}.wav"
        write_wav(out / rel, AudioClip(x, fs))
        noise_paths[name] = rel

    n_clip = int(round(spec.clip_seconds * fs))
    manifests = []
    for domain, count, f0_range, ss in (("source", spec.n_source, spec.source_f0, src_ss),
                                         ("target", spec.n_target, spec.target_f0, tgt_ss)):
        prefix = "src" if domain == "source" else "tgt"
        if domain == "target":
            n_val = int(round(count * spec.validation_fraction))
            n_train = (count - n_val) // 2
            splits = ["validation"] * n_val + ["train"] * n_train
            splits += ["test"] * (count - len(splits))
        else:
            splits = ["train"] * count
        entries = []
        for i, clip_ss in enumerate(ss.spawn(count)):
            rng = np.random.default_rng(clip_ss)
            x = synth_speech(rng, n_clip, f0_range, fs)
            if domain == "target" and spec.domain_filter:
                x = microphone_filter(x, fs)
            level = spec.speech_rms * 10 ** (rng.uniform(-1, 1) * spec.level_jitter_db / 20)
            x = _normalize(x, level)
            clip_id = f"{prefix}_{i:04d}"
            rel = f"{domain}/clean/{clip_id}.wav"
            write_wav(out / rel, AudioClip(x, fs))
            for name in spec.noises:
                for snr in spec.snrs_db:
                    entries.append(ManifestEntry(f"{clip_id}_{name}_{_snr_tag(snr)}", rel,
                                                 noise_paths[name], name, float(snr),
                                                 splits[i], domain))
        m = Manifest(entries, out)
        m.write(out / f"{domain}.jsonl")
        manifests.append(m)
    log.info("synthesised %d source and %d target clips in %s", spec.n_source, spec.n_target, out)
    return manifests[0], manifests[1]
