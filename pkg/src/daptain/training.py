"""Block datasets built from manifests and the per-epoch training loop."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .audio import frame_blocks
from .errors import ConfigError, NumericalError, TrainingError
from .features import LAYOUT, FeatureNormalizer, stack_block_features
from .manifest import Manifest, MixtureBuilder
from .vcae import (LatentBatch, clip_gain, TrainingConfig, VcaeModel, detect_overfit, fold_latent_scale,
                   model_latents, predict_blocks, vcae_objective)
from .weights import (DomainBatch, MinimaxConfig, WeightVector, importance_weights, minimax_weights,
                      robust_bias_aware_fit, train_classifier_c, train_classifier_c2)

log = logging.getLogger(__name__)


@dataclass
class BlockSet:
    """Aligned per-block arrays for a set of mixtures.

    ``noisy`` holds 1000-sample inputs, ``clean`` the matching 600-sample
    clean centers and ``features`` the 41-dimensional block descriptors.
    """

    noisy: np.ndarray
    clean: np.ndarray | None
    features: np.ndarray | None
    ids: list

    def __len__(self):
        return self.noisy.shape[0]

    def subset(self, idx):
        idx = np.asarray(idx)
        return BlockSet(self.noisy[idx], None if self.clean is None else self.clean[idx],
                        None if self.features is None else self.features[idx],
                        [self.ids[i] for i in idx])

    @classmethod
    def concat(cls, sets):
        sets = list(sets)
        cat = lambda name: (None if getattr(sets[0], name) is None  # noqa: E731
                            else np.concatenate([getattr(s, name) for s in sets]))
        return cls(cat("noisy"), cat("clean"), cat("features"), [i for s in sets for i in s.ids])


def blocks_from_records(records, with_clean=True, with_features=True, block_len=1000, hop=600,
                        input_rms=None):
    """Frame mixtures (and clean references) into VCAE blocks.

    With ``input_rms`` set, each mixture and its clean reference are divided
    by the gain that brings the mixture to that RMS. Features always come
    from the unscaled mixture.
    """
    noisy, clean, feats, ids = [], [], [], []
    for rec in records:
        g = clip_gain(rec.mixture.samples, input_rms)
        stream = frame_blocks(rec.mixture.samples / g, block_len, hop)
        noisy.append(stream.blocks.astype(np.float32))
        if with_clean:
            clean.append(frame_blocks(rec.clean.samples / g, block_len, hop).centers().astype(np.float32))
        if with_features:
            feats.append(stack_block_features(rec.mixture, block_len, hop))
        ids.extend(f"{rec.id}:{k}" for k in range(len(stream)))
    if not noisy:
        return BlockSet(np.zeros((0, block_len), np.float32),
                        np.zeros((0, hop), np.float32) if with_clean else None,
                        np.zeros((0, 41)) if with_features else None, [])
    return BlockSet(np.concatenate(noisy), np.concatenate(clean) if with_clean else None,
                    np.concatenate(feats) if with_features else None, ids)


def build_blockset(manifest: Manifest, seed: int, with_clean=True, with_features=True,
                   input_rms=None) -> BlockSet:
    builder = MixtureBuilder(manifest, seed)
    return blocks_from_records((rec for _, rec in builder), with_clean, with_features,
                               input_rms=input_rms)


@dataclass
class TrainingData:
    source: BlockSet
    target: BlockSet
    validation: BlockSet

    @classmethod
    def from_manifests(cls, source: Manifest, target: Manifest, cfg: TrainingConfig):
        src = source.select(split="train")
        tgt = target.select(split="train")
        val = target.select(split="validation")
        if len(src) == 0 or len(tgt) == 0:
            raise ConfigError("training needs source train and target train entries")
        if len(val) == 0:
            raise ConfigError("target manifest has no validation entries")
        need_feats = cfg.method != "baseline"
        r = cfg.input_rms
        return cls(build_blockset(src, cfg.seed, True, need_feats, r),
                   build_blockset(tgt, cfg.seed, False, need_feats, r),
                   build_blockset(val, cfg.seed, True, False, r))


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    mean_omega: float
    js_estimate: float | None
    variance_gap: float
    summed_variance: float
    omega_ok: bool
    normalized: bool
    seconds: float


def feature_columns(groups):
    """Column indices of the selected descriptor groups."""
    unknown = set(groups) - set(LAYOUT)
    if unknown or not groups:
        raise ConfigError(f"feature groups must be a nonempty subset of {list(LAYOUT)}")
    return np.concatenate([np.arange(LAYOUT[g].start, LAYOUT[g].stop) for g in groups])


def _target_subset(n, limit, rng):
    if n <= limit:
        return np.arange(n)
    return np.sort(rng.choice(n, limit, replace=False))


def validation_metrics(model: VcaeModel, val: BlockSet, batch=256):
    recon, z = [], []
    for i in range(0, len(val), batch):
        y, zb = model.forward(val.noisy[i:i + batch].astype(np.float32))
        recon.append(y.data)
        z.append(zb.data)
    mse = float(np.mean((np.concatenate(recon).astype(np.float64) - val.clean) ** 2))
    return mse, LatentBatch(np.concatenate(z)).summed_variance


def train(source, target, cfg: TrainingConfig, out_dir=None, data: TrainingData | None = None) -> VcaeModel:
    """Train a VCAE on source (noisy -> clean) blocks.

    ``source`` and ``target`` are manifests; ``data`` may supply prebuilt
    block sets instead. Each epoch updates the domain weights for the chosen
    method, runs one pass of RMSprop over the weighted source blocks, then
    measures the validation loss. When the validation loss has stalled for
    ``cfg.patience`` epochs the latent scale is normalised to the target
    variance and training stops. With ``out_dir`` set, a checkpoint is
    written every epoch and one JSON line per epoch goes to ``train_log.jsonl``.
    """
    cfg.validate()
    if data is None:
        data = TrainingData.from_manifests(source, target, cfg)
    src, val = data.source, data.validation
    if len(src) == 0:
        raise ConfigError("no source training blocks")
    rng = np.random.default_rng(cfg.seed)
    model = VcaeModel(cfg.architecture(), seed=cfg.seed, input_rms=cfg.input_rms)
    opt = ad.RMSprop(model.params, lr=cfg.learning_rate)
    mcfg = MinimaxConfig(epsilon=cfg.minimax_epsilon, inner_steps=cfg.minimax_inner_steps,
                         inner_step_size=cfg.minimax_inner_step_size,
                         penalty_coefficient=cfg.minimax_penalty)

    if cfg.method != "baseline":
        cols = feature_columns(cfg.feature_groups)
        fs, ft = src.features[:, cols], data.target.features[:, cols]
        norm = FeatureNormalizer.fit(np.concatenate([fs, ft]))
        tgt_idx = _target_subset(len(data.target), cfg.max_target_blocks, rng)
        src_batch = DomainBatch.source(norm.transform(fs), src.ids)
        tgt_batch = DomainBatch.target(norm.transform(ft[tgt_idx]))

    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        (out / "checkpoints").mkdir(parents=True, exist_ok=True)
        log_fh = open(out / "train_log.jsonl", "w")
    clf_c = clf_c2 = robust = None
    omega = WeightVector.uniform(len(src))
    block_losses = None
    history: list[EpochRecord] = []
    val_hist = []
    try:
        for epoch in range(1, cfg.epochs + 1):
            t0 = time.perf_counter()
            js = None
            if cfg.method == "iw":
                clf_c = train_classifier_c(src_batch, tgt_batch, cfg.classifier_epochs, seed=cfg.seed + epoch,
                                           batch=cfg.classifier_batch, classifier=clf_c)
                omega = importance_weights(clf_c, src_batch)
                clf_c2, js = train_classifier_c2(src_batch, tgt_batch, omega, cfg.adversarial_beta > 0,
                                                 cfg.classifier_epochs, seed=cfg.seed + epoch,
                                                 batch=cfg.classifier_batch, beta=cfg.adversarial_beta,
                                                 base=clf_c, classifier=clf_c2)
            elif cfg.method == "minimax":
                robust, omega = robust_bias_aware_fit(src_batch, tgt_batch, mcfg, cfg.minimax_fit_epochs,
                                                      seed=cfg.seed + epoch, batch=cfg.classifier_batch,
                                                      classifier=robust,
                                                      w_init=None if epoch == 1 else omega)
                if block_losses is None:
                    recon = predict_blocks(model, src.noisy, cfg.eval_batch)
                    block_losses = np.mean((recon.astype(np.float64) - src.clean) ** 2, axis=1)
                omega = minimax_weights(block_losses, omega, mcfg)
            ok = omega.check(cfg.minimax_epsilon)
            if not ok:
                log.warning("epoch %d: weights violate the %s invariant", epoch, omega.mode)

            # one pass of VCAE updates over the weighted source blocks
            order = rng.permutation(len(src))
            w_all = omega.weights.astype(np.float32)
            losses = np.empty(len(src))
            total, count = 0.0, 0
            for b, start in enumerate(range(0, len(src), cfg.batch_size)):
                idx = order[start:start + cfg.batch_size]
                if len(idx) < 2:
                    continue
                model.params.zero_grad()
                try:
                    recon, z = model.forward(src.noisy[idx])
                    loss, parts = vcae_objective(recon, src.clean[idx], z, cfg, w_all[idx], model.params)
                    loss.backward()
                except NumericalError as exc:
                    raise TrainingError(f"VCAE training diverged at epoch {epoch}, batch {b}: {exc}",
                                        epoch=epoch, batch=b) from None
                opt.step()
                losses[idx] = parts["per_sample"]
                total += loss.item() * len(idx)
                count += len(idx)
            block_losses = losses
            train_loss = total / max(count, 1)

            val_loss, sv = validation_metrics(model, val, cfg.eval_batch)
            val_hist.append(val_loss)
            normalized = False
            if detect_overfit(val_hist, cfg.patience):
                fold_latent_scale(model, LatentBatch(model_latents(model, val.noisy, cfg.eval_batch)),
                                  cfg.target_variance)
                val_loss, sv = validation_metrics(model, val, cfg.eval_batch)
                normalized = True
            rec = EpochRecord(epoch, train_loss, val_loss, omega.mean, js, sv - cfg.target_variance, sv, ok,
                              normalized, time.perf_counter() - t0)
            history.append(rec)
            log.info("epoch %d: train %.5f val %.5f mean(w) %.6f sv %.2f", epoch, train_loss, val_loss,
                     omega.mean, sv)
            model.meta = _meta(cfg, history)
            if out is not None:
                log_fh.write(json.dumps({k: getattr(rec, k) for k in
                                         ("epoch", "train_loss", "val_loss", "mean_omega", "js_estimate",
                                          "variance_gap")}) + "\n")
                log_fh.flush()
                model.save(out / "checkpoints" / f"epoch_{epoch:03d}.vcae")
            if normalized:
                log.info("validation loss stalled; latent normalised, stopping after epoch %d", epoch)
                break
    finally:
        if out is not None:
            log_fh.close()
    model.history = history
    model.omega = omega
    if out is not None:
        model.save(out / "model.vcae")
    return model


def _meta(cfg, history):
    last = history[-1]
    return {"method": cfg.method, "seed": cfg.seed, "epochs_run": len(history),
            "final_train_loss": last.train_loss, "final_val_loss": last.val_loss,
            "summed_variance": last.summed_variance,
            "config": {k: v for k, v in asdict(cfg).items() if k != "extra"}}
