"""Variance-constrained autoencoder for block-wise waveform enhancement.

The encoder maps a 1000-sample noisy block through seven strided
convolutions and a dense layer to a latent vector; the decoder maps it back
through a dense layer, seven convolutions with nearest-neighbour
upsampling and a one-channel projection, keeping the central 600 samples.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import autodiff as ad
from . import checkpoint
from .audio import AudioClip, frame_blocks, reassemble
from .errors import DegenerateInputError, ShapeError

log = logging.getLogger(__name__)

REGULARIZED = ("enc.dense.W", "dec.dense.W")


@dataclass(frozen=True)
class VcaeArchitecture:
    enc_filters: tuple = (64, 64, 128, 128, 256, 256, 512)
    enc_strides: tuple = (1, 2, 2, 2, 2, 2, 1)
    dec_filters: tuple = (512, 256, 256, 128, 128, 64, 64)
    dec_upsample: tuple = (False, True, True, True, True, True, False)
    kernel: int = 31
    latent_dim: int = 660
    input_len: int = 1000
    output_len: int = 600
    alpha: float = 0.1

    def scaled(self, width: float) -> "VcaeArchitecture":
        """Same topology with every filter count multiplied by ``width``."""
        f = lambda fs: tuple(max(1, int(round(c * width))) for c in fs)  # noqa: E731
        return replace(self, enc_filters=f(self.enc_filters), dec_filters=f(self.dec_filters))

    def encoder_lengths(self):
        lengths = [self.input_len]
        for s in self.enc_strides:
            lengths.append(-(-lengths[-1] // s))
        return lengths[1:]

    @property
    def seed_len(self):
        return self.encoder_lengths()[-1]

    def decoder_lengths(self):
        n = self.seed_len
        out = []
        for up in self.dec_upsample:
            n *= 2 if up else 1
            out.append(n)
        return out

    @property
    def crop_start(self):
        return (self.decoder_lengths()[-1] - self.output_len) // 2

    def to_dict(self):
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


@dataclass
class LatentBatch:
    Z: np.ndarray

    @property
    def summed_variance(self) -> float:
        z = np.asarray(self.Z, dtype=np.float64)
        return float(((z - z.mean(axis=0)) ** 2).sum() / z.shape[0])


@dataclass
class TrainingConfig:
    lam: float = 0.01
    target_variance: float = 330.0
    reg_coefficient: float = 1e-6
    epochs: int = 30
    batch_size: int = 512
    learning_rate: float = 0.001
    seed: int = 0
    method: str = "baseline"
    adversarial_beta: float = 1.0
    patience: int = 3
    width: float = 1.0
    latent_dim: int = 660
    classifier_epochs: int = 10
    classifier_batch: int = 256
    max_target_blocks: int = 20000
    minimax_epsilon: float = 0.01
    minimax_inner_steps: int = 10
    minimax_inner_step_size: float = 0.05
    minimax_penalty: float = 10.0
    minimax_fit_epochs: int = 5
    eval_batch: int = 256
    input_rms: float | None = 1.0
    feature_groups: tuple = ("ams", "rasta_plp", "dscc")
    extra: dict = field(default_factory=dict)

    METHODS = ("baseline", "iw", "minimax")

    def validate(self):
        from .errors import ConfigError
        if self.method not in self.METHODS:
            raise ConfigError(f"method must be one of {self.METHODS}, got {self.method!r}")
        if self.lam < 0 or self.target_variance <= 0 or self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("need lam >= 0, target_variance > 0, epochs >= 1, batch_size >= 1")
        if self.width <= 0 or self.latent_dim < 1:
            raise ConfigError("width and latent_dim must be positive")
        if self.input_rms is not None and self.input_rms <= 0:
            raise ConfigError("input_rms must be positive (or null to disable)")
        return self

    def architecture(self) -> VcaeArchitecture:
        return VcaeArchitecture(latent_dim=self.latent_dim).scaled(self.width)


class VcaeModel:
    def __init__(self, arch: VcaeArchitecture | None = None, seed: int = 0, params=None, meta=None,
                 input_rms: float | None = None):
        self.arch = arch or VcaeArchitecture()
        self.meta = dict(meta or {})
        # clips are scaled to this RMS before framing and scaled back after
        self.input_rms = input_rms
        if params is None:
            params = self._init_params(np.random.default_rng(seed))
        self.params = params

    def _init_params(self, rng):
        a = self.arch
        p = ad.ParamStore()
        k = a.kernel
        c_in = 1
        last = len(a.enc_filters) - 1
        for i, c in enumerate(a.enc_filters):
            slope = None if i == last else a.alpha
            p.add(f"enc.conv{i}.W", ad.he_uniform(rng, (c, c_in, k), c_in * k, slope))
            p.add(f"enc.conv{i}.b", np.zeros(c, dtype=np.float32))
            c_in = c
        flat = a.seed_len * c_in
        p.add("enc.dense.W", ad.he_uniform(rng, (flat, a.latent_dim), flat))
        p.add("enc.dense.b", np.zeros(a.latent_dim, dtype=np.float32))
        seed_flat = a.seed_len * a.dec_filters[0]
        p.add("dec.dense.W", ad.he_uniform(rng, (a.latent_dim, seed_flat), a.latent_dim))
        p.add("dec.dense.b", np.zeros(seed_flat, dtype=np.float32))
        c_in = a.dec_filters[0]
        for i, c in enumerate(a.dec_filters):
            p.add(f"dec.conv{i}.W", ad.he_uniform(rng, (c, c_in, k), c_in * k, a.alpha))
            p.add(f"dec.conv{i}.b", np.zeros(c, dtype=np.float32))
            c_in = c
        p.add("dec.out.W", ad.he_uniform(rng, (1, c_in, k), c_in * k))
        p.add("dec.out.b", np.zeros(1, dtype=np.float32))
        return p

    # forward -----------------------------------------------------------------

    def encoder(self, blocks) -> ad.Tensor:
        a, p = self.arch, self.params
        x = ad.as_tensor(blocks)
        if x.data.ndim == 1:
            x = ad.reshape(x, (1, -1))
        if x.shape[-1] != a.input_len:
            raise ShapeError(f"encoder expects blocks of {a.input_len} samples, got {x.shape[-1]}")
        h = ad.reshape(x, (x.shape[0], 1, a.input_len))
        last = len(a.enc_filters) - 1
        for i, s in enumerate(a.enc_strides):
            h = ad.conv1d(h, p[f"enc.conv{i}.W"], p[f"enc.conv{i}.b"], stride=s)
            if i < last:
                h = ad.leaky_relu(h, a.alpha)
        h = ad.reshape(h, (h.shape[0], -1))
        return ad.dense(h, p["enc.dense.W"], p["enc.dense.b"])

    def decoder(self, z) -> ad.Tensor:
        a, p = self.arch, self.params
        z = ad.as_tensor(z)
        if z.data.ndim == 1:
            z = ad.reshape(z, (1, -1))
        if z.shape[-1] != a.latent_dim:
            raise ShapeError(f"decoder expects {a.latent_dim} latent values, got {z.shape[-1]}")
        h = ad.dense(z, p["dec.dense.W"], p["dec.dense.b"])
        h = ad.reshape(h, (h.shape[0], a.dec_filters[0], a.seed_len))
        for i, up in enumerate(a.dec_upsample):
            if up:
                h = ad.upsample(h, 2)
            h = ad.leaky_relu(ad.conv1d(h, p[f"dec.conv{i}.W"], p[f"dec.conv{i}.b"]), a.alpha)
        h = ad.conv1d(h, p["dec.out.W"], p["dec.out.b"])
        h = ad.crop(h, a.crop_start, a.output_len)
        return ad.reshape(h, (h.shape[0], a.output_len))

    def forward(self, blocks):
        z = self.encoder(blocks)
        return self.decoder(z), z

    # persistence ---------------------------------------------------------------

    def save(self, path):
        meta = {"architecture": self.arch.to_dict(), "training": self.meta, "input_rms": self.input_rms}
        checkpoint.save(path, self.params.state_dict(), meta)

    @classmethod
    def load(cls, path) -> "VcaeModel":
        tensors, meta = checkpoint.load(path)
        arch = VcaeArchitecture.from_dict(meta["architecture"])
        model = cls(arch, params=ad.ParamStore(), meta=meta.get("training"), input_rms=meta.get("input_rms"))
        for name, arr in tensors.items():
            model.params.add(name, arr)
        return model


def encode(model: VcaeModel, block) -> np.ndarray:
    """Latent vector(s) for one block (or a batch of blocks)."""
    block = np.asarray(block, dtype=np.float32)
    z = model.encoder(block).data
    return z[0] if block.ndim == 1 else z


def decode(model: VcaeModel, latent) -> np.ndarray:
    latent = np.asarray(latent, dtype=np.float32)
    y = model.decoder(latent).data
    return y[0] if latent.ndim == 1 else y


def vcae_objective(recon, target, latent, cfg: TrainingConfig, sample_weights=None, params=None):
    """Weighted reconstruction MSE + variance constraint + L2 on the bottleneck.

    ``loss = mean_i w_i MSE_i + lam * |summed_var(Z) - v| + reg * ||W_b||^2``.
    Returns ``(loss_tensor, parts)`` where ``parts`` holds the float value of
    each term.
    """
    recon = ad.as_tensor(recon)
    target = np.asarray(target, dtype=recon.dtype)
    if recon.shape != target.shape:
        raise ShapeError(f"reconstruction {recon.shape} vs target {target.shape}")
    n = recon.shape[0]
    w = np.ones(n, dtype=recon.dtype) if sample_weights is None else np.asarray(
        getattr(sample_weights, "weights", sample_weights), dtype=recon.dtype)
    if w.shape != (n,):
        raise ShapeError(f"{w.shape[0]} weights for a batch of {n}")
    per_sample = ad.tmean(ad.square(recon - target), axis=1)
    recon_term = ad.tmean(ad.mul(per_sample, w))
    sv = ad.summed_variance(ad.as_tensor(latent))
    var_term = ad.mul(ad.tabs(ad.add(sv, -cfg.target_variance)), cfg.lam)
    loss = ad.add(recon_term, var_term)
    reg_val = 0.0
    if params is not None and cfg.reg_coefficient > 0:
        reg = ad.l2_penalty(params, cfg.reg_coefficient, [n_ for n_ in REGULARIZED if n_ in params])
        loss = ad.add(loss, reg)
        reg_val = reg.item()
    parts = {"recon": recon_term.item(), "variance": var_term.item(), "reg": reg_val,
             "summed_variance": sv.item(), "per_sample": per_sample.data.copy()}
    return loss, parts


def detect_overfit(val_losses, patience: int = 3) -> bool:
    """True once the validation loss has not improved for ``patience`` epochs."""
    h = list(val_losses)
    if len(h) <= patience:
        return False
    best_before = min(h[:-patience])
    return min(h[-patience:]) >= best_before


def normalize_latent(latents: LatentBatch, v: float) -> LatentBatch:
    """Rescale about the batch mean so the summed variance equals ``v``."""
    z = np.asarray(latents.Z, dtype=np.float64)
    if z.shape[0] < 2:
        raise DegenerateInputError("normalize_latent needs a batch of at least 2")
    sv = latents.summed_variance
    if sv == 0.0:
        raise DegenerateInputError("latent batch has zero variance")
    m = z.mean(axis=0)
    return LatentBatch(m + np.sqrt(v / sv) * (z - m))


def fold_latent_scale(model: VcaeModel, latents: LatentBatch, v: float) -> float:
    """Apply ``normalize_latent`` permanently by rescaling the bottleneck.

    The encoder dense layer is scaled so its latents have summed variance
    ``v`` on ``latents``; the decoder dense layer receives the inverse map so
    the end-to-end function is unchanged. Returns the scale factor.
    """
    z = np.asarray(latents.Z, dtype=np.float64)
    s = float(np.sqrt(v / latents.summed_variance))
    m = z.mean(axis=0)
    p = model.params
    We, be = p["enc.dense.W"], p["enc.dense.b"]
    Wd, bd = p["dec.dense.W"], p["dec.dense.b"]
    shift = (1.0 - s) * m
    bd.data = (bd.data.astype(np.float64) - (shift / s) @ Wd.data.astype(np.float64)).astype(bd.dtype)
    Wd.data = (Wd.data.astype(np.float64) / s).astype(Wd.dtype)
    We.data = (We.data.astype(np.float64) * s).astype(We.dtype)
    be.data = (be.data.astype(np.float64) * s + shift).astype(be.dtype)
    return s


def model_latents(model: VcaeModel, blocks, batch=256) -> np.ndarray:
    out = [model.encoder(blocks[i:i + batch].astype(np.float32)).data
           for i in range(0, len(blocks), batch)]
    return np.concatenate(out) if out else np.zeros((0, model.arch.latent_dim), np.float32)


def predict_blocks(model: VcaeModel, blocks, batch=256) -> np.ndarray:
    out = [model.forward(blocks[i:i + batch].astype(np.float32))[0].data
           for i in range(0, len(blocks), batch)]
    return np.concatenate(out) if out else np.zeros((0, model.arch.output_len), np.float32)


def clip_gain(samples, input_rms) -> float:
    """Divisor that brings ``samples`` to ``input_rms`` (1 when disabled or silent)."""
    if input_rms is None:
        return 1.0
    r = float(np.sqrt(np.mean(np.square(samples)))) if len(samples) else 0.0
    return r / input_rms if r > 0 else 1.0


def enhance(model: VcaeModel, noisy: AudioClip, batch=256) -> AudioClip:
    """Enhance a clip block by block, keeping each block's central samples."""
    a = model.arch
    g = clip_gain(noisy.samples, model.input_rms)
    stream = frame_blocks(noisy.samples / g, a.input_len, a.output_len)
    centers = predict_blocks(model, stream.blocks, batch)
    y = reassemble(centers.astype(np.float64), len(noisy)) * g
    return AudioClip(y, noisy.sample_rate)
