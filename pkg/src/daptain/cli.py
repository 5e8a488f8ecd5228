"""Command-line entry point: ``daptain {synth,train,enhance,evaluate,bound}``.

Exit codes: 0 success, 2 configuration error, 3 I/O error, 4 training
failure, 5 checkpoint integrity failure. ``DAPTAIN_LOG`` sets the log level
(error, info or debug).
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import yaml

from .audio import PROCESSING_RATE, AudioClip, load_processing_clip, write_wav
from .corpus import CorpusSpec, synth_corpus
from .errors import (ConfigError, FormatError, IntegrityError, TrainingError, UndefinedMetricError,
                     UnsupportedError)
from .features import LAYOUT, FeatureNormalizer, stft
from .manifest import load_manifest, MixtureBuilder
from .metrics import (EvalRecord, aggregate, fwsnrseg, pairwise_ttests, read_pesq_scores, stoi,
                      write_results_csv)
from .training import build_blockset, feature_columns, train
from .vcae import TrainingConfig, VcaeModel, enhance
from .weights import BoundInputs, DiagonalGaussian, DomainClassifier, generalization_bound, renyi2_divergence

log = logging.getLogger("daptain")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_TRAINING, EXIT_INTEGRITY = 0, 2, 3, 4, 5
METRICS = ("stoi", "fwsnrseg")


# ---------------------------------------------------------------------------
# configuration


@dataclasses.dataclass
class RunConfig:
    training: TrainingConfig
    source_manifest: str | None = None
    target_manifest: str | None = None
    output_dir: str | None = None
    features: tuple = tuple(LAYOUT)
    metrics: tuple = METRICS

    _TRAINING_KEYS = {f.name for f in dataclasses.fields(TrainingConfig)} - {"extra", "feature_groups"}
    _PATH_KEYS = {"source_manifest", "target_manifest", "output_dir"}

    @classmethod
    def from_dict(cls, raw: dict | None, base_dir=None):
        raw = dict(raw or {})
        unknown = set(raw) - cls._TRAINING_KEYS - {"paths", "features", "metrics"}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        paths = dict(raw.pop("paths", None) or {})
        bad = set(paths) - cls._PATH_KEYS
        if bad:
            raise ConfigError(f"unknown path keys: {sorted(bad)}")
        if base_dir is not None:
            paths = {k: str(Path(base_dir, v)) if v is not None else None for k, v in paths.items()}
        features = tuple(raw.pop("features", None) or LAYOUT)
        if set(features) - set(LAYOUT) or not features:
            raise ConfigError(f"features must be a nonempty subset of {list(LAYOUT)}")
        metrics = tuple(raw.pop("metrics", None) or METRICS)
        if set(metrics) - set(METRICS):
            raise ConfigError(f"metrics must be a subset of {list(METRICS)}")
        try:
            tc = TrainingConfig(**raw)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None
        tc.feature_groups = features
        return cls(tc.validate(), paths.get("source_manifest"), paths.get("target_manifest"),
                   paths.get("output_dir"), features, metrics)

    def to_dict(self):
        d = {k: v for k, v in dataclasses.asdict(self.training).items() if k not in ("extra", "feature_groups")}
        d["paths"] = {"source_manifest": self.source_manifest, "target_manifest": self.target_manifest,
                      "output_dir": self.output_dir}
        d["features"] = list(self.features)
        d["metrics"] = list(self.metrics)
        return d


def load_config(path) -> RunConfig:
    if path is None:
        return RunConfig.from_dict({})
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    if raw is not None and not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return RunConfig.from_dict(raw, base_dir=path.parent)


def _write_resolved(run: RunConfig, out: Path):
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "resolved_config.yaml", "w") as fh:
        yaml.safe_dump(run.to_dict(), fh, sort_keys=True)


def _apply_overrides(run: RunConfig, args):
    tc = run.training
    if getattr(args, "seed", None) is not None:
        tc.seed = args.seed
    if getattr(args, "method", None) is not None:
        tc.method = args.method
    if getattr(args, "scale", None) is not None:
        if args.scale <= 0:
            raise ConfigError("--scale must be positive")
        tc.epochs = max(1, int(round(tc.epochs * args.scale)))
    if getattr(args, "out", None) is not None:
        run.output_dir = args.out
    tc.validate()
    return run


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args):
    scale = 1.0 if args.scale is None else args.scale
    if scale <= 0:
        raise ConfigError("--scale must be positive")
    if args.out is None:
        raise ConfigError("synth needs --out")
    spec = CorpusSpec().scaled(scale)
    if spec.n_source < 1 or spec.n_target < 1:
        raise ConfigError("--scale leaves an empty domain")
    seed = 0 if args.seed is None else args.seed
    src, tgt = synth_corpus(seed, spec, args.out)
    print(json.dumps({"source_clips": spec.n_source, "target_clips": spec.n_target,
                      "source_entries": len(src), "target_entries": len(tgt)}))
    return EXIT_OK


def cmd_train(args):
    run = _apply_overrides(load_config(args.config), args)
    if not run.source_manifest or not run.target_manifest or not run.output_dir:
        raise ConfigError("train needs paths.source_manifest, paths.target_manifest and an output dir")
    out = Path(run.output_dir)
    _write_resolved(run, out)
    source = load_manifest(run.source_manifest)
    target = load_manifest(run.target_manifest)
    model = train(source, target, run.training, out)
    print(json.dumps({"checkpoint": str(out / "model.vcae"), **{k: v for k, v in model.meta.items()
                                                                if k != "config"}}))
    return EXIT_OK


def cmd_enhance(args):
    if not args.checkpoint or not args.input or not args.out:
        raise ConfigError("enhance needs --checkpoint, --input and --out")
    model = VcaeModel.load(args.checkpoint)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    inp = Path(args.input)
    count = 0
    if inp.suffix == ".jsonl":
        manifest = load_manifest(inp)
        if args.split:
            manifest = manifest.select(split=args.split)
        seed = model.meta.get("seed", 0) if args.seed is None else args.seed
        for entry, rec in MixtureBuilder(manifest, seed):
            write_wav(out / f"{entry.id}.wav", enhance(model, rec.mixture))
            count += 1
    else:
        files = sorted(inp.glob("*.wav")) if inp.is_dir() else [inp]
        for f in files:
            write_wav(out / f.name, enhance(model, load_processing_clip(f)))
            count += 1
    print(json.dumps({"enhanced": count, "sample_rate": PROCESSING_RATE, "out": str(out)}))
    return EXIT_OK


def _parse_method_dirs(items):
    out = {}
    for item in items or []:
        name, sep, path = item.partition("=")
        if not sep or not name:
            raise ConfigError(f"--enhanced expects NAME=DIR, got {item!r}")
        out[name] = Path(path)
    return out


def _dump_spectrogram(path, samples):
    mag = stft(AudioClip(samples, PROCESSING_RATE)).magnitude
    np.savetxt(path, mag.T, delimiter=",", fmt="%.6g")


def cmd_evaluate(args):
    if not args.manifest or not args.out:
        raise ConfigError("evaluate needs --manifest and --out")
    manifest = load_manifest(args.manifest)
    if args.split:
        manifest = manifest.select(split=args.split)
    dirs = _parse_method_dirs(args.enhanced)
    methods = list(args.builtin or []) + list(dirs)
    if not methods:
        raise ConfigError("nothing to evaluate: give --enhanced NAME=DIR and/or --builtin")
    pesq = read_pesq_scores(args.pesq) if args.pesq else {}
    out = Path(args.out)
    (out / "spectrograms").mkdir(parents=True, exist_ok=True)
    seed = 0 if args.seed is None else args.seed
    records, warnings = [], 0
    for n, (entry, rec) in enumerate(MixtureBuilder(manifest, seed)):
        for method in methods:
            if method == "unprocessed":
                y = rec.mixture.samples
            elif method == "clean":
                y = rec.clean.samples
            else:
                f = dirs[method] / f"{entry.id}.wav"
                if not f.exists():
                    log.warning("missing enhanced file %s; row skipped", f)
                    warnings += 1
                    continue
                y = load_processing_clip(f).samples
            if y.size != len(rec.clean):
                log.warning("%s/%s: length %d != %d; row skipped", method, entry.id, y.size, len(rec.clean))
                warnings += 1
                continue
            try:
                s, fw = stoi(rec.clean.samples, y), fwsnrseg(rec.clean.samples, y)
            except UndefinedMetricError as exc:
                log.warning("%s/%s: %s; row skipped", method, entry.id, exc)
                warnings += 1
                continue
            records.append(EvalRecord(entry.id, entry.noise_name, entry.snr_db, method, s, fw,
                                      pesq.get(f"{method}/{entry.id}", pesq.get(entry.id))
                                      if method not in ("clean", "unprocessed") else None))
            if n < args.spectrograms:
                _dump_spectrogram(out / "spectrograms" / f"{entry.id}_{method}.csv", y)
    if not records:
        raise ConfigError("no evaluable rows")
    write_results_csv(out / "results.csv", records)
    summary = {"rows": len(records), "warnings": warnings, "averages": {}}
    for metric in METRICS:
        table = aggregate(records, metric)
        table.to_csv(out / f"table_{metric}.csv")
        summary["averages"][metric] = {m: table.average(m) for m in table.rows}
    with open(out / "ttests.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["metric", "method_a", "method_b", "t", "p", "n_pairs", "significant"])
        for metric in METRICS:
            for (a, b), r in pairwise_ttests(records, metric).items():
                w.writerow([metric, a, b, f"{r.t_statistic:.6f}", f"{r.p_value:.6g}", r.n_pairs,
                            int(r.significant)])
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def bound_report(source, target, seed=0, delta=0.05, features=tuple(LAYOUT)):
    """Fit diagonal Gaussians to normalised block features of both training
    splits and evaluate the divergence and bound."""
    cols = feature_columns(features)
    src = build_blockset(source.select(split="train"), seed, with_clean=False).features[:, cols]
    tgt = build_blockset(target.select(split="train"), seed, with_clean=False).features[:, cols]
    if len(src) == 0 or len(tgt) == 0:
        raise ConfigError("both manifests need train entries")
    norm = FeatureNormalizer.fit(np.concatenate([src, tgt]))
    p, q = DiagonalGaussian.fit(norm.transform(tgt)), DiagonalGaussian.fit(norm.transform(src))
    h = DomainClassifier(len(cols)).head_parameter_count
    try:
        d2 = renyi2_divergence(p, q)
        bound = generalization_bound(BoundInputs(d2, len(src), h, delta))
    except FloatingPointError as exc:
        log.warning("divergence is infinite: %s", exc)
        d2 = bound = float("inf")
    return {"d2": d2, "n": len(src), "h": h, "delta": delta, "bound": bound}


def cmd_bound(args):
    if not args.source or not args.target:
        raise ConfigError("bound needs --source and --target")
    if not 0 < args.delta <= 1:
        raise ConfigError("--delta must lie in (0, 1]")
    report = bound_report(load_manifest(args.source), load_manifest(args.target),
                          0 if args.seed is None else args.seed, args.delta)
    text = json.dumps(report, sort_keys=True)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text + "\n")
    print(text)
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run configuration")
    common.add_argument("--seed", type=int)
    common.add_argument("--scale", type=float, help="shrink corpus sizes / epochs by this factor")
    common.add_argument("--threads", type=int, help="cap BLAS threads")
    common.add_argument("--method", help="baseline, iw or minimax")
    common.add_argument("--out", help="output directory or file")

    p = argparse.ArgumentParser(prog="daptain", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("synth", parents=[common], help="write a synthetic two-domain corpus")
    sub.add_parser("train", parents=[common], help="train a VCAE")
    e = sub.add_parser("enhance", parents=[common], help="enhance WAVs or manifest mixtures")
    e.add_argument("--checkpoint")
    e.add_argument("--input", help="WAV file, directory of WAVs, or .jsonl manifest")
    e.add_argument("--split", help="manifest split to enhance (default: all)")
    v = sub.add_parser("evaluate", parents=[common], help="score enhanced audio")
    v.add_argument("--manifest")
    v.add_argument("--split")
    v.add_argument("--enhanced", action="append", metavar="NAME=DIR")
    v.add_argument("--builtin", action="append", choices=("unprocessed", "clean"))
    v.add_argument("--pesq", help="external scores, one 'id score' per line")
    v.add_argument("--spectrograms", type=int, default=1, help="dump spectrograms for the first N mixtures")
    b = sub.add_parser("bound", parents=[common], help="divergence and generalization-bound report")
    b.add_argument("--source")
    b.add_argument("--target")
    b.add_argument("--delta", type=float, default=0.05)
    return p


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "enhance": cmd_enhance,
            "evaluate": cmd_evaluate, "bound": cmd_bound}


def _configure_logging():
    level = os.environ.get("DAPTAIN_LOG", "error").lower()
    logging.basicConfig(level={"error": logging.ERROR, "info": logging.INFO,
                               "debug": logging.DEBUG}.get(level, logging.ERROR),
                        format="%(levelname)s %(name)s: %(message)s")


def main(argv=None) -> int:
    _configure_logging()
    args = build_parser().parse_args(argv)
    limit = contextlib.nullcontext()
    if args.threads is not None:
        from threadpoolctl import threadpool_limits
        limit = threadpool_limits(args.threads)
    try:
        with limit:
            return COMMANDS[args.command](args)
    except ConfigError as exc:
        log.error("configuration error: %s", exc)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except IntegrityError as exc:
        print(f"integrity error: {exc}", file=sys.stderr)
        return EXIT_INTEGRITY
    except TrainingError as exc:
        print(f"training failed (epoch {exc.epoch}, batch {exc.batch}): {exc}", file=sys.stderr)
        return EXIT_TRAINING
    except (OSError, FormatError, UnsupportedError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
