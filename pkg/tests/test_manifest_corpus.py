import hashlib
from dataclasses import replace

import numpy as np
import pytest

from daptain.audio import AudioClip, write_wav
from daptain.corpus import CorpusSpec, synth_corpus, synth_speech
from daptain.errors import ConfigError
from daptain.features import stack_block_features
from daptain.manifest import Manifest, ManifestEntry, MixtureBuilder, load_manifest

TINY = CorpusSpec(n_source=2, n_target=4, clip_seconds=0.5, noise_seconds=4.0, validation_fraction=0.25)


def _digest(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(p.relative_to(root).as_posix().encode())
            h.update(p.read_bytes())
    return h.hexdigest()


class TestManifest:
    def _entry(self, i="a", **kw):
        base = dict(id=i, clean_path="c.wav", noise_path="n.wav", noise_name="white", snr_db=0.0,
                    split="train", domain="source")
        base.update(kw)
        return ManifestEntry(**base)

    def test_round_trip(self, tmp_path):
        write_wav(tmp_path / "c.wav", AudioClip(np.full(100, 0.1)))
        write_wav(tmp_path / "n.wav", AudioClip(np.random.default_rng(0).normal(size=400) * 0.1))
        m = Manifest([self._entry("a"), self._entry("b", snr_db=5.0, split="test", domain="target")])
        m.write(tmp_path / "m.jsonl")
        back = load_manifest(tmp_path / "m.jsonl")
        assert [e.id for e in back] == ["a", "b"]
        assert len(back.select(split="test")) == 1
        assert len(back.select(snr_db=0.0, domain="source")) == 1

    def test_duplicate_ids(self, tmp_path):
        with pytest.raises(ConfigError):
            Manifest([self._entry("a"), self._entry("a")]).validate(check_paths=False)

    def test_missing_domain(self, tmp_path):
        (tmp_path / "m.jsonl").write_text('{"id": "a", "clean_path": "c", "noise_path": "n", '
                                          '"noise_name": "w", "snr_db": 0, "split": "train"}\n')
        with pytest.raises(ConfigError):
            load_manifest(tmp_path / "m.jsonl", check_paths=False)

    def test_missing_path(self, tmp_path):
        Manifest([self._entry()]).write(tmp_path / "m.jsonl")
        with pytest.raises(FileNotFoundError):
            load_manifest(tmp_path / "m.jsonl")

    def test_noise_halves_by_split(self, tmp_path):
        write_wav(tmp_path / "c.wav", AudioClip(np.full(100, 0.1)))
        noise = np.concatenate([np.full(1000, 0.2), np.full(1000, -0.3)])
        write_wav(tmp_path / "n.wav", AudioClip(noise))
        m = Manifest([self._entry("a"), self._entry("b", split="test")], tmp_path)
        recs = {e.id: r for e, r in MixtureBuilder(m, 3)}
        assert np.all(recs["a"].noise.samples > 0)
        assert np.all(recs["b"].noise.samples < 0)


class TestCorpus:
    def test_counts_and_determinism(self, tmp_path):
        src, tgt = synth_corpus(5, TINY, tmp_path / "a")
        synth_corpus(5, TINY, tmp_path / "b")
        assert len(src) == 2 * 9 and len(tgt) == 4 * 9
        assert {e.split for e in tgt} == {"validation", "train", "test"}
        assert _digest(tmp_path / "a") == _digest(tmp_path / "b")

    def test_scaled_counts(self):
        sp = CorpusSpec().scaled(0.1)
        assert (CorpusSpec().n_source, CorpusSpec().n_target) == (120, 900)
        assert (sp.n_source, sp.n_target) == (12, 90)

    def test_empty(self, tmp_path):
        src, tgt = synth_corpus(0, replace(TINY, n_source=0, n_target=0), tmp_path)
        assert len(src) == 0 and len(tgt) == 0

    def test_noise_length(self, tmp_path):
        synth_corpus(0, replace(TINY, n_source=1, n_target=0), tmp_path)
        from daptain.audio import read_wav
        assert len(read_wav(tmp_path / "noise" / "pink.wav")) == 4 * 16000

    def test_speech_envelope(self):
        x = synth_speech(np.random.default_rng(0), 16000, (100, 200))
        assert np.all(np.isfinite(x)) and np.std(x) > 0

    @staticmethod
    def _block_means(spec, seed, n_clips):
        src, tgt = [], []
        for k in range(n_clips):
            for dom, f0 in (("s", spec.source_f0), ("t", spec.target_f0)):
                r = np.random.default_rng([seed, k, dom == "t"])
                x = synth_speech(r, 2400, f0)
                if dom == "t" and spec.domain_filter:
                    from daptain.corpus import microphone_filter
                    x = microphone_filter(x)
                feats = stack_block_features(AudioClip(0.05 * x / np.std(x)))
                (src if dom == "s" else tgt).append(feats.mean(axis=0))
        return np.array(src), np.array(tgt)

    def test_no_shift_without_filter(self):
        spec = replace(CorpusSpec(), domain_filter=False, target_f0=CorpusSpec().source_f0)
        s, t = self._block_means(spec, 1, 200)
        tstat = (s.mean(0) - t.mean(0)) / np.sqrt(s.var(0, ddof=1) / len(s) + t.var(0, ddof=1) / len(t) + 1e-300)
        assert np.sum(np.abs(tstat) > 4) == 0

    def test_shift_with_filter(self):
        s, t = self._block_means(CorpusSpec(), 2, 400)
        tstat = (s.mean(0) - t.mean(0)) / np.sqrt(s.var(0, ddof=1) / len(s) + t.var(0, ddof=1) / len(t))
        assert np.sum(np.abs(tstat) > 3) >= 5
