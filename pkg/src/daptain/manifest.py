"""Line-delimited JSON manifests describing mixture recipes."""

from __future__ import annotations

import json
import zlib
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .audio import AudioClip, MixtureRecord, load_processing_clip, mix_at_snr, split_noise
from .errors import ConfigError

SPLITS = ("train", "validation", "test")
DOMAINS = ("source", "target")
FIELDS = ("id", "clean_path", "noise_path", "noise_name", "snr_db", "split", "domain")


@dataclass
class ManifestEntry:
    id: str
    clean_path: str
    noise_path: str
    noise_name: str
    snr_db: float
    split: str
    domain: str


class Manifest:
    def __init__(self, entries=(), root=None):
        self.entries: list[ManifestEntry] = list(entries)
        self.root = Path(root) if root is not None else None

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def resolve(self, p: str) -> Path:
        path = Path(p)
        if not path.is_absolute() and self.root is not None:
            path = self.root / path
        return path

    def select(self, split=None, snr_db=None, domain=None) -> "Manifest":
        keep = [e for e in self.entries
                if (split is None or e.split == split)
                and (snr_db is None or e.snr_db == snr_db)
                and (domain is None or e.domain == domain)]
        return Manifest(keep, self.root)

    def validate(self, check_paths=True):
        seen = set()
        for e in self.entries:
            if e.id in seen:
                raise ConfigError(f"duplicate manifest id {e.id!r}")
            seen.add(e.id)
            if e.domain not in DOMAINS:
                raise ConfigError(f"{e.id}: domain must be one of {DOMAINS}")
            if e.split not in SPLITS:
                raise ConfigError(f"{e.id}: split must be one of {SPLITS}")
            if check_paths:
                for p in (e.clean_path, e.noise_path):
                    if not self.resolve(p).exists():
                        raise FileNotFoundError(f"{e.id}: missing file {self.resolve(p)}")

    def write(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as fh:
            for e in self.entries:
                fh.write(json.dumps(asdict(e), sort_keys=True) + "\n")


def load_manifest(path, check_paths=True) -> Manifest:
    path = Path(path)
    entries = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}:{lineno}: {exc}") from None
            missing = [k for k in FIELDS if k not in rec]
            if missing:
                raise ConfigError(f"{path}:{lineno}: missing fields {missing}")
            entries.append(ManifestEntry(str(rec["id"]), rec["clean_path"], rec["noise_path"],
                                         rec["noise_name"], float(rec["snr_db"]), rec["split"],
                                         rec["domain"]))
    m = Manifest(entries, path.parent)
    m.validate(check_paths)
    return m


def mixture_seed(run_seed: int, entry_id: str) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(run_seed) & 0xFFFFFFFF, zlib.crc32(entry_id.encode())])


class MixtureBuilder:
    """Builds mixtures for manifest entries, caching decoded noise halves."""

    def __init__(self, manifest: Manifest, seed: int = 0):
        self.manifest = manifest
        self.seed = seed
        self._noise: dict[str, tuple[AudioClip, AudioClip]] = {}

    def _halves(self, path: Path):
        key = str(path)
        if key not in self._noise:
            self._noise[key] = split_noise(load_processing_clip(path))
        return self._noise[key]

    def build(self, entry: ManifestEntry) -> MixtureRecord:
        clean = load_processing_clip(self.manifest.resolve(entry.clean_path))
        train_half, eval_half = self._halves(self.manifest.resolve(entry.noise_path))
        noise = train_half if entry.split == "train" else eval_half
        rng = np.random.default_rng(mixture_seed(self.seed, entry.id))
        return mix_at_snr(clean, noise, entry.snr_db, rng, id=entry.id,
                          noise_name=entry.noise_name, split=entry.split)

    def __iter__(self):
        for e in self.manifest:
            yield e, self.build(e)
