"""Deterministic speech-like test vectors for metric oracles."""

import numpy as np

FS = 16000


def speech_like(seed, seconds=2.0, fs=FS):
    """Harmonic source with a syllabic envelope and random gaps."""
    r = np.random.default_rng(seed)
    n = int(seconds * fs)
    t = np.arange(n) / fs
    f0 = r.uniform(100, 220) * (1 + 0.05 * np.sin(2 * np.pi * r.uniform(2, 5) * t))
    phase = 2 * np.pi * np.cumsum(f0) / fs
    x = sum(np.sin(k * phase) / k * r.uniform(0.3, 1.0) for k in range(1, 25))
    env = np.maximum(np.sin(2 * np.pi * r.uniform(2, 6) * t + r.uniform(0, 6)), 0) ** 2
    env[int(0.45 * n):int(0.55 * n)] = 0.0
    return 0.1 * env * x / np.std(x)


def degraded(seed, kind):
    """(clean, processed) pair for oracle comparisons."""
    clean = speech_like(seed)
    r = np.random.default_rng(seed + 1000)
    if kind == "white":
        noise = r.normal(size=clean.size)
        return clean, clean + noise * np.std(clean) * 10 ** (-r.uniform(-8, 5) / 20)
    if kind == "lowpass":
        from scipy.signal import butter, sosfilt
        lp = sosfilt(butter(4, r.uniform(300, 900), fs=FS, output="sos"), clean)
        return clean, lp + 0.3 * np.std(clean) * r.normal(size=clean.size)
    if kind == "echo":
        return clean, np.roll(clean, int(r.integers(40, 160))) * r.uniform(0.2, 3.0) + 0.5 * clean
    raise ValueError(kind)


STOI_CASES = [(s, k) for s, k in zip(range(10), ["white"] * 5 + ["lowpass"] * 3 + ["echo"] * 2)]
