import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from daptain.audio import (AudioClip, frame_blocks, mix_at_snr, read_wav, reassemble, resample, rms,
                           split_noise, write_wav)
from daptain.errors import DegenerateInputError, FormatError, UnsupportedError


def _pcm16_bytes(values, rate=16000, channels=1, tag=1, bits=16):
    import struct
    payload = np.asarray(values, dtype="<i2").tobytes()
    fmt = struct.pack("<HHIIHH", tag, channels, rate, rate * channels * bits // 8, channels * bits // 8, bits)
    body = b"WAVE" + b"fmt " + struct.pack("<I", len(fmt)) + fmt + b"data" + struct.pack("<I", len(payload))
    return b"RIFF" + (len(body) + len(payload)).to_bytes(4, "little") + body + payload


class TestWav:
    def test_pcm_scaling(self, tmp_path):
        p = tmp_path / "a.wav"
        p.write_bytes(_pcm16_bytes([32767, 0, -32768]))
        clip = read_wav(p)
        assert clip.samples[0] == pytest.approx(32767 / 32768)
        assert clip.samples[1] == 0.0
        assert clip.samples[2] == -1.0
        assert clip.sample_rate == 16000

    def test_duration(self, tmp_path):
        p = tmp_path / "b.wav"
        write_wav(p, AudioClip(np.zeros(32000), 16000))
        assert len(read_wav(p)) == 32000

    def test_round_trip_bit_exact(self, tmp_path, rng):
        pcm = rng.integers(-32768, 32768, 5000)
        p = tmp_path / "c.wav"
        write_wav(p, AudioClip(pcm / 32768.0))
        back = read_wav(p).samples * 32768.0
        np.testing.assert_array_equal(back, pcm)

    def test_clipping_counted(self, tmp_path):
        assert write_wav(tmp_path / "d.wav", AudioClip([0.5, 1.5, -2.0])) == 2
        assert np.max(np.abs(read_wav(tmp_path / "d.wav").samples)) <= 1.0

    def test_stereo_averaged(self, tmp_path):
        p = tmp_path / "s.wav"
        p.write_bytes(_pcm16_bytes([1000, 3000, -2000, 0], channels=2))
        np.testing.assert_allclose(read_wav(p).samples * 32768, [2000, -1000])

    def test_malformed(self, tmp_path):
        p = tmp_path / "bad.wav"
        p.write_bytes(b"RIFX0000WAVE")
        with pytest.raises(FormatError):
            read_wav(p)

    def test_unsupported_codec(self, tmp_path):
        p = tmp_path / "u.wav"
        p.write_bytes(_pcm16_bytes([0, 0], tag=6, bits=16))
        with pytest.raises(UnsupportedError):
            read_wav(p)

    def test_unsupported_rate(self, tmp_path):
        p = tmp_path / "r.wav"
        p.write_bytes(_pcm16_bytes([0, 0], rate=22050))
        with pytest.raises(UnsupportedError):
            read_wav(p)


class TestResample:
    def test_identity(self, rng):
        x = rng.normal(size=100)
        np.testing.assert_array_equal(resample(AudioClip(x), 16000).samples, x)

    def test_length(self):
        assert len(resample(AudioClip(np.zeros(32000)), 10000)) == 20000

    def test_tone_preserved(self):
        t = np.arange(32000) / 16000
        y = resample(AudioClip(0.5 * np.sin(2 * np.pi * 1000 * t)), 10000).samples
        spec = np.abs(np.fft.rfft(y[1000:-1000] * np.hanning(18000)))
        freqs = np.fft.rfftfreq(18000, 1 / 10000)
        assert freqs[np.argmax(spec)] == pytest.approx(1000, abs=1)
        level = 20 * np.log10(rms(y[1000:-1000]) / (0.5 / np.sqrt(2)))
        assert abs(level) < 0.1


class TestMix:
    def test_zero_db(self, rng):
        rec = mix_at_snr(AudioClip(rng.normal(size=4000)), AudioClip(rng.normal(size=9000)), 0.0, rng)
        assert rms(rec.noise.samples) == pytest.approx(rms(rec.clean.samples), rel=1e-9)
        assert len(rec.mixture) == len(rec.clean)

    def test_minus_five(self, rng):
        rec = mix_at_snr(AudioClip(rng.normal(size=4000) * 0.1), AudioClip(rng.normal(size=9000)), -5.0, rng)
        assert rms(rec.noise.samples) == pytest.approx(rms(rec.clean.samples) * 10 ** 0.25, rel=1e-9)

    def test_short_noise_tiled(self, rng):
        rec = mix_at_snr(AudioClip(rng.normal(size=1000) * 0.1), AudioClip(rng.normal(size=300)), 5.0, rng)
        assert len(rec.mixture) == 1000

    def test_silent(self, rng):
        with pytest.raises(DegenerateInputError):
            mix_at_snr(AudioClip(np.zeros(100)), AudioClip(rng.normal(size=100)), 0.0, rng)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**31), st.floats(-10, 10), st.integers(2, 3000))
    def test_achieved_snr(self, seed, snr, n):
        r = np.random.default_rng(seed)
        clean = AudioClip(r.normal(size=n) * 0.05 + 1e-3)
        rec = mix_at_snr(clean, AudioClip(r.normal(size=n + 17)), snr, r)
        assert abs(rec.achieved_snr_db() - snr) < 1e-6

    def test_seeded_offset(self, rng):
        clean, noise = AudioClip(np.ones(50) * 0.1), AudioClip(np.arange(1, 1000) / 1000)
        a = mix_at_snr(clean, noise, 0.0, 5).mixture.samples
        b = mix_at_snr(clean, noise, 0.0, 5).mixture.samples
        np.testing.assert_array_equal(a, b)


class TestSplitNoise:
    def test_four_minutes(self):
        a, b = split_noise(AudioClip(np.zeros(2 * 1_920_000)))
        assert len(a) == len(b) == 1_920_000

    def test_odd(self):
        a, b = split_noise(AudioClip(np.arange(5.0)))
        assert (len(a), len(b)) == (3, 2)
        np.testing.assert_array_equal(np.concatenate([a.samples, b.samples]), np.arange(5.0))

    def test_too_short(self):
        with pytest.raises(DegenerateInputError):
            split_noise(AudioClip([0.1]))


class TestFrameBlocks:
    def test_single_tile(self, rng):
        x = rng.normal(size=600)
        bs = frame_blocks(AudioClip(x))
        assert len(bs) == 1 and bs.pad_left == 200
        np.testing.assert_array_equal(bs.blocks[0, :200], x[200:0:-1])
        np.testing.assert_array_equal(bs.centers()[0], x)

    def test_count(self):
        assert len(frame_blocks(AudioClip(np.zeros(1800)))) == 3

    def test_hop_spacing(self, rng):
        x = rng.normal(size=3000)
        bs = frame_blocks(AudioClip(x))
        np.testing.assert_array_equal(bs.blocks[1, :1000], x[400:1400])

    @settings(max_examples=60, deadline=None)
    @given(st.integers(1, 5000))
    def test_reassembly_identity(self, n):
        x = np.random.default_rng(n).normal(size=n)
        bs = frame_blocks(AudioClip(x))
        np.testing.assert_array_equal(reassemble(bs.centers(), bs.length), x)

    def test_empty(self):
        with pytest.raises(DegenerateInputError):
            frame_blocks(np.zeros(0))
