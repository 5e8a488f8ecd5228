"""Importance weights, domain classifiers and worst-case (minimax) weights.

Two weighting schemes are provided for the source blocks:

* importance weighting: a domain classifier ``C`` (source = 1) gives
  ``w = (1 - C) / mean(1 - C)``; a second classifier ``C2`` trained on the
  weighted source measures how far the reweighted source still is from the
  target (a Jensen-Shannon estimate);
* minimax weighting: projected gradient ascent on the self-normalised
  weighted loss inside the box ``[floor, 1]`` with ``|mean(w) - 1| <= eps``.

The order-2 Renyi divergence and the importance-weighting generalization
bound are exposed as diagnostics.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import checkpoint
from .errors import DegenerateInputError, NumericalError, ShapeError, TrainingError

log = logging.getLogger(__name__)

LOG4 = math.log(4.0)
KLD_FLOOR = 1e-7


# ---------------------------------------------------------------------------
# data containers


@dataclass
class DomainBatch:
    features: np.ndarray
    domain_labels: np.ndarray
    sample_ids: list = field(default_factory=list)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2:
            raise ShapeError("features must be an (n, d) matrix")
        n = self.features.shape[0]
        self.domain_labels = np.broadcast_to(np.asarray(self.domain_labels, dtype=np.int8), (n,)).copy()
        if not self.sample_ids:
            self.sample_ids = [str(i) for i in range(n)]
        if len(self.sample_ids) != n:
            raise ShapeError(f"{len(self.sample_ids)} ids for {n} samples")
        if not np.all(np.isfinite(self.features)):
            raise DegenerateInputError("features contain NaN or inf")

    @classmethod
    def source(cls, features, ids=None):
        return cls(features, 1, list(ids) if ids is not None else [])

    @classmethod
    def target(cls, features, ids=None):
        return cls(features, 0, list(ids) if ids is not None else [])

    def __len__(self):
        return self.features.shape[0]


@dataclass
class WeightVector:
    weights: np.ndarray
    mode: str = "uniform"
    penalty: float = 0.0

    MODES = ("iw", "minimax", "uniform")

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.mode not in self.MODES:
            raise ValueError(f"mode must be one of {self.MODES}")

    @classmethod
    def uniform(cls, n):
        return cls(np.ones(n), "uniform")

    def __len__(self):
        return self.weights.size

    @property
    def mean(self):
        return float(self.weights.mean())

    def check(self, epsilon=0.01, tol=1e-6):
        """Return True when the weights satisfy their mode's invariant."""
        w = self.weights
        if self.mode == "uniform":
            return bool(np.all(w == 1.0))
        if self.mode == "iw":
            return bool(abs(w.mean() - 1.0) <= tol and np.all(w >= 0))
        return bool(np.all(w > 0) and np.all(w <= 1.0) and abs(w.mean() - 1.0) <= epsilon + 1e-12)


def dump_weights(path, sample_ids, wv: WeightVector):
    """One JSON record per line: ``{sample_id, omega, mode}``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for sid, w in zip(sample_ids, wv.weights):
            fh.write(json.dumps({"sample_id": sid, "omega": float(w), "mode": wv.mode}) + "\n")


@dataclass(frozen=True)
class MinimaxConfig:
    epsilon: float = 0.01
    inner_steps: int = 10
    inner_step_size: float = 0.05
    weight_floor: float = 1e-3
    penalty_coefficient: float = 10.0
    feature_coefficient: float = 1.0

    def __post_init__(self):
        if not 0 < self.epsilon < 1:
            raise ValueError("epsilon must lie in (0, 1)")
        if not 0 < self.weight_floor <= 1:
            raise ValueError("weight_floor must lie in (0, 1]")
        if self.inner_steps < 1 or self.inner_step_size <= 0:
            raise ValueError("inner_steps and inner_step_size must be positive")


# ---------------------------------------------------------------------------
# domain classifier


class DomainClassifier:
    """Two leaky-ReLU dense layers (41 -> 64 -> 32) and a sigmoid head.

    The embedding ``ParamStore`` may be shared between classifiers so that a
    second classifier can push gradients into the first one's features.
    """

    def __init__(self, n_features=41, seed=0, role="C", embedding=None, hidden=(64, 32)):
        rng = np.random.default_rng(seed)
        self.role = role
        self.n_features = n_features
        self.history: dict = {}
        if embedding is None:
            embedding = ad.ParamStore()
            d = n_features
            for i, h in enumerate(hidden):
                embedding.add(f"emb.W{i}", ad.glorot_uniform(rng, (d, h), d, h))
                embedding.add(f"emb.b{i}", np.zeros(h, dtype=np.float32))
                d = h
        self.embedding = embedding
        d = embedding[f"emb.W{len(self._layers()) - 1}"].shape[1]
        self.head = ad.ParamStore()
        self.head.add("head.W", ad.glorot_uniform(rng, (d, 1), d, 1))
        self.head.add("head.b", np.zeros(1, dtype=np.float32))

    def _layers(self):
        return [n for n in self.embedding.names() if n.startswith("emb.W")]

    @property
    def head_parameter_count(self):
        return self.head.count()

    def embed(self, x):
        h = ad.as_tensor(np.asarray(x, dtype=np.float32))
        for i in range(len(self._layers())):
            h = ad.leaky_relu(ad.dense(h, self.embedding[f"emb.W{i}"], self.embedding[f"emb.b{i}"]), 0.1)
        return h

    def forward(self, x, reverse_beta=None):
        h = self.embed(x)
        if reverse_beta is not None:
            h = ad.grad_reverse(h, reverse_beta)
        logit = ad.dense(h, self.head["head.W"], self.head["head.b"])
        return ad.reshape(ad.sigmoid(logit), (logit.shape[0],))

    def predict_proba(self, x, batch=4096):
        x = np.asarray(x)
        out = [self.forward(x[i:i + batch]).data for i in range(0, len(x), batch)]
        p = np.concatenate(out).astype(np.float64) if out else np.zeros(0)
        return np.clip(p, ad.PROB_CLAMP, 1.0 - ad.PROB_CLAMP)

    def state(self):
        s = self.embedding.state_dict()
        s.update(self.head.state_dict())
        return s

    def save(self, path):
        checkpoint.save(path, self.state(), {"role": self.role, "n_features": self.n_features})

    @classmethod
    def load(cls, path):
        tensors, meta = checkpoint.load(path)
        n_layers = sum(1 for k in tensors if k.startswith("emb.W"))
        hidden = tuple(tensors[f"emb.W{i}"].shape[1] for i in range(n_layers))
        clf = cls(meta["n_features"], role=meta["role"], hidden=hidden)
        clf.embedding.load_state_dict({k: v for k, v in tensors.items() if k.startswith("emb.")})
        clf.head.load_state_dict({k: v for k, v in tensors.items() if k.startswith("head.")})
        return clf


def _domain_loss(clf, xs, xt, ws=None, reverse_beta=None, normalize=False):
    """Class-balanced log loss: weighted source mean plus target mean.

    ``normalize`` divides the source term by ``mean(ws)`` (self-normalised
    weighting) instead of by the sample count alone.
    """
    ps = clf.forward(xs, reverse_beta)
    pt = clf.forward(xt, reverse_beta)
    if ws is not None and normalize:
        ws = ws / ws.mean()
    return ad.add(ad.bce_loss(ps, np.ones(len(xs)), ws), ad.bce_loss(pt, np.zeros(len(xt))))


def domain_objective(clf, source: DomainBatch, target: DomainBatch, weights=None, normalize=False):
    """Mean weighted source log-likelihood of ``C`` plus target log-likelihood of ``1 - C``.

    This is the (negated) class-balanced cross-entropy; it tends to
    ``-log 4 + 2 JS`` when ``clf`` is the optimal discriminator.
    """
    ps = clf.predict_proba(source.features)
    pt = clf.predict_proba(target.features)
    w = np.ones(len(ps)) if weights is None else np.asarray(getattr(weights, "weights", weights), float)
    if normalize:
        w = w / w.mean()
    return float(np.mean(w * np.log(ps)) + np.mean(np.log1p(-pt)))


def _fit(clf, source, target, weights, epochs, *, seed, lr, batch, names, reverse_beta=None,
         normalize=False, label="classifier"):
    """RMSprop on the class-balanced loss with a windowed early stop.

    After every epoch the full-set loss is recorded; an epoch whose loss
    exceeds the loss five epochs earlier counts as a window violation, and
    training stops at the second violation.
    """
    rng = np.random.default_rng(seed)
    params = ad.ParamStore.merged(clf.embedding, clf.head)
    opt = RMSpropCache.get(clf, params, lr)
    xs_all, xt_all = source.features, target.features
    ws_all = None if weights is None else np.asarray(getattr(weights, "weights", weights), np.float64)
    n_s, n_t = len(xs_all), len(xt_all)
    steps = max(1, -(-max(n_s, n_t) // batch))
    history = []
    violations = 0
    for epoch in range(epochs):
        ps, pt = rng.permutation(n_s), rng.permutation(n_t)
        bs, bt = -(-n_s // steps), -(-n_t // steps)
        for step in range(steps):
            i_s = ps[step * bs:(step + 1) * bs]
            i_t = pt[step * bt:(step + 1) * bt]
            if len(i_s) == 0 or len(i_t) == 0:
                continue
            params.zero_grad()
            try:
                loss = _domain_loss(clf, xs_all[i_s], xt_all[i_t],
                                    None if ws_all is None else ws_all[i_s], reverse_beta, normalize)
                loss.backward()
            except NumericalError as exc:
                raise TrainingError(f"{label} diverged: {exc}", epoch=epoch, batch=step) from None
            opt.step(names)
        value = -domain_objective(clf, source, target, ws_all, normalize)
        if not np.isfinite(value):
            raise TrainingError(f"{label} loss is not finite", epoch=epoch)
        history.append(value)
        if len(history) > 5 and history[-1] > history[-6]:
            violations += 1
            if violations >= 2:
                log.debug("%s: early stop at epoch %d", label, epoch)
                break
    clf.history.setdefault("loss", []).extend(history)
    return history


class RMSpropCache:
    """Keeps one optimiser state per classifier so warm starts keep momentum."""

    @staticmethod
    def get(clf, params, lr):
        opt = getattr(clf, "_opt", None)
        if opt is None or opt.lr != lr:
            opt = ad.RMSprop(params, lr=lr)
            clf._opt = opt
        else:
            opt.params = params
        return opt


def train_classifier_c(source: DomainBatch, target: DomainBatch, epochs: int = 10, *, seed=0,
                       lr=1e-3, batch=256, classifier: DomainClassifier | None = None):
    """Train (or continue training) the source-vs-target classifier ``C``."""
    if len(source) == 0 or len(target) == 0:
        raise DegenerateInputError("classifier training needs samples from both domains")
    clf = classifier or DomainClassifier(source.features.shape[1], seed=seed, role="C")
    _fit(clf, source, target, None, epochs, seed=seed, lr=lr, batch=batch, names=None, label="C")
    return clf


def weights_from_probs(probs, ratio="normalized") -> WeightVector:
    """Importance weights from classifier outputs ``C(x)`` on the source.

    ``ratio="normalized"`` gives ``(1 - C) / mean(1 - C)``; ``"odds"`` gives
    the density-ratio estimate ``(1 - C) / C`` rescaled to mean one.
    """
    c = np.clip(np.asarray(probs, dtype=np.float64), ad.PROB_CLAMP, 1.0 - ad.PROB_CLAMP)
    if c.size == 0:
        raise DegenerateInputError("no source samples")
    if np.all(c >= 1.0 - ad.PROB_CLAMP):
        raise DegenerateInputError("classifier assigns every source sample to the source domain; "
                                   "weights are degenerate")
    raw = 1.0 - c
    if ratio == "odds":
        raw = raw / c
    elif ratio != "normalized":
        raise ValueError(f"unknown ratio estimator {ratio!r}")
    return WeightVector(raw / raw.mean(), "iw")


def importance_weights(c, source: DomainBatch, ratio="normalized") -> WeightVector:
    return weights_from_probs(c.predict_proba(source.features), ratio)


def weight_kld_term(c, target: DomainBatch, source: DomainBatch, return_floored=False):
    """``mean_j log w(z_j)`` over target samples, normalised on the source.

    Weights at or below ``1e-7`` are floored there; the number floored is
    returned alongside the value when ``return_floored`` is set.
    """
    if len(target) == 0:
        raise DegenerateInputError("target batch is empty")
    norm = float(np.mean(1.0 - c.predict_proba(source.features)))
    w = (1.0 - c.predict_proba(target.features)) / norm
    low = w <= KLD_FLOOR
    n_floored = int(low.sum())
    if n_floored:
        log.warning("weight_kld_term: %d target weights floored at %g", n_floored, KLD_FLOOR)
    value = float(np.mean(np.log(np.where(low, KLD_FLOOR, w))))
    return (value, n_floored) if return_floored else value


def train_classifier_c2(source: DomainBatch, target: DomainBatch, w: WeightVector, adversarial=True,
                        epochs: int = 10, *, seed=0, lr=1e-3, batch=256, beta=1.0,
                        base: DomainClassifier | None = None, classifier: DomainClassifier | None = None):
    """Train the weighted-source discriminator ``C2``.

    ``base`` supplies a shared embedding (typically ``C``'s). With
    ``adversarial`` set the embedding is updated with the reversed ``C2``
    gradient scaled by ``beta``; otherwise only the head trains.

    Returns ``(C2, js_estimate)`` with ``js = (l* + log 4) / 2`` and ``l*`` the
    final weighted objective.
    """
    if len(source) == 0 or len(target) == 0:
        raise DegenerateInputError("classifier training needs samples from both domains")
    wv = w if isinstance(w, WeightVector) else WeightVector(w, "iw")
    if wv.mode == "iw" and abs(wv.mean - 1.0) > 1e-6:
        raise ValueError(f"importance weights must have mean 1, got {wv.mean}")
    if classifier is None:
        classifier = DomainClassifier(source.features.shape[1], seed=seed + 1, role="C2",
                                      embedding=None if base is None else base.embedding)
    shared = base is not None
    if shared:
        names = classifier.head.names() + (classifier.embedding.names() if adversarial else [])
        reverse = beta if adversarial else 0.0
    else:
        names, reverse = None, None
    _fit(classifier, source, target, wv.weights, epochs, seed=seed, lr=lr, batch=batch, names=names,
         reverse_beta=reverse, label="C2")
    l_star = domain_objective(classifier, source, target, wv.weights)
    return classifier, (l_star + LOG4) / 2.0


# ---------------------------------------------------------------------------
# divergence and bound


@dataclass(frozen=True)
class DiagonalGaussian:
    mean: np.ndarray
    var: np.ndarray

    @classmethod
    def fit(cls, x, var_floor=1e-8):
        x = np.asarray(x, dtype=np.float64)
        return cls(x.mean(axis=0), np.maximum(x.var(axis=0), var_floor))


def renyi2_divergence(p, q) -> float:
    """Order-2 Renyi divergence ``D2(p || q)`` in nats.

    ``p`` and ``q`` are either probability vectors on a common support or
    ``DiagonalGaussian`` instances.
    """
    if isinstance(p, DiagonalGaussian) or isinstance(q, DiagonalGaussian):
        if not (isinstance(p, DiagonalGaussian) and isinstance(q, DiagonalGaussian)):
            raise TypeError("both arguments must be DiagonalGaussian")
        m1, v1 = np.atleast_1d(p.mean).astype(float), np.atleast_1d(p.var).astype(float)
        m2, v2 = np.atleast_1d(q.mean).astype(float), np.atleast_1d(q.var).astype(float)
        va = 2.0 * v2 - v1
        if np.any(va <= 0):
            raise NumericalError("Renyi-2 divergence is infinite: 2 var_q <= var_p in some dimension")
        d = 0.5 * np.log(v2 / v1) + 0.5 * np.log(v2 / va) + (m1 - m2) ** 2 / va
        return float(d.sum())
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ShapeError("discrete distributions need a common support")
    if np.any((q == 0) & (p > 0)):
        raise NumericalError("Renyi-2 divergence is infinite: q vanishes where p does not")
    mask = p > 0
    return float(np.log(np.sum(p[mask] ** 2 / q[mask])))


@dataclass(frozen=True)
class BoundInputs:
    d2: float
    n: int
    h: int
    delta: float = 0.05

    def __post_init__(self):
        if self.n < 1 or self.h < 1 or not 0 < self.delta <= 1 or self.d2 < 0:
            raise ValueError("need n >= 1, h >= 1, 0 < delta <= 1, d2 >= 0")


def generalization_bound(b: BoundInputs) -> float:
    """``D2^(4/5) * ((h/n) log(n e / h) + (1/n) log(4/delta))^(8/3)``."""
    if b.h > b.n * math.e:
        raise ValueError(f"h = {b.h} exceeds n e = {b.n * math.e:.3f}; the log term is negative")
    inner = (b.h / b.n) * math.log(b.n * math.e / b.h) + math.log(4.0 / b.delta) / b.n
    return float(b.d2 ** 0.8 * inner ** (8.0 / 3.0))


# ---------------------------------------------------------------------------
# minimax weights


def project_weights(raw, cfg: MinimaxConfig) -> WeightVector:
    """Euclidean projection onto ``[floor, 1]^n`` with ``|mean - 1| <= eps``.

    The solution has the form ``clip(raw + tau, floor, 1)``; ``tau`` is found
    by bisection when the clipped input violates the mean constraint.
    """
    raw = np.asarray(raw, dtype=np.float64)
    if not np.all(np.isfinite(raw)):
        raise NumericalError("raw weights must be finite")
    lo_b, hi_b = cfg.weight_floor, 1.0
    mean_of = lambda t: np.clip(raw + t, lo_b, hi_b).mean()  # noqa: E731
    lo_target, hi_target = 1.0 - cfg.epsilon, 1.0 + cfg.epsilon
    m0 = mean_of(0.0)
    if m0 < lo_target:
        goal, lo, hi = lo_target, 0.0, hi_b - raw.min()
    elif m0 > hi_target:
        goal, lo, hi = hi_target, lo_b - raw.max(), 0.0
    else:
        return WeightVector(np.clip(raw, lo_b, hi_b), "minimax")
    # keep the bracket end that satisfies the constraint
    feasible_hi = m0 < lo_target
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if mean_of(mid) < goal:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 1e-15 * max(1.0, abs(hi)):
            break
    tau = hi if feasible_hi else lo
    return WeightVector(np.clip(raw + tau, lo_b, hi_b), "minimax")


def weighted_loss(weights, losses) -> float:
    w = np.asarray(weights, dtype=np.float64)
    return float(np.dot(w, losses) / w.sum())


def _violation(w):
    return np.maximum(0.0, -w) + np.maximum(0.0, w - 1.0)


def minimax_weights(loss_per_sample, w_prev: WeightVector, cfg: MinimaxConfig, penalty=None) -> WeightVector:
    """Projected ascent on the self-normalised weighted loss ``sum(w l) / sum(w)``.

    The ascent direction is that objective's gradient, which is centred, so a
    constant loss leaves the weights unchanged. ``penalty`` optionally maps
    ``w`` to ``(value, gradient)`` of a term subtracted from the objective.
    The squared violation of the final pre-projection iterate, scaled by
    ``penalty_coefficient`` and averaged over samples, is stored on the
    result. If the ascent ends below the uniform-weight objective the uniform
    weights are returned instead.
    """
    loss = np.asarray(loss_per_sample, dtype=np.float64)
    w = np.asarray(getattr(w_prev, "weights", w_prev), dtype=np.float64).copy()
    if loss.shape != w.shape:
        raise ShapeError(f"{loss.size} losses for {w.size} weights")
    if not np.all(np.isfinite(loss)):
        raise NumericalError("per-sample losses must be finite")
    w = project_weights(w, cfg).weights

    def objective(v):
        val = weighted_loss(v, loss)
        return val - (penalty(v)[0] if penalty is not None else 0.0)

    pre = w
    for _ in range(cfg.inner_steps):
        s = w.sum()
        grad = (loss - np.dot(w, loss) / s) / s
        if penalty is not None:
            grad = grad - penalty(w)[1]
        pre = w + cfg.inner_step_size * grad
        w = project_weights(pre, cfg).weights
    ones = np.ones_like(w)
    if objective(w) < objective(ones):
        w = ones
    viol = float(cfg.penalty_coefficient * np.mean(_violation(pre) ** 2))
    return WeightVector(w, "minimax", viol)


def feature_matching_penalty(features, coefficient=1.0):
    """``coefficient * ||sum(w x)/sum(w) - mean(x)||^2`` and its gradient in ``w``."""
    x = np.asarray(features, dtype=np.float64)
    xbar = x.mean(axis=0)

    def fn(w):
        s = w.sum()
        diff = (w @ x) / s - xbar
        grad = 2.0 * coefficient * ((x - (w @ x) / s) @ diff) / s
        return coefficient * float(diff @ diff), grad
    return fn


def robust_bias_aware_fit(source: DomainBatch, target: DomainBatch, cfg: MinimaxConfig = MinimaxConfig(),
                          epochs=20, *, seed=0, lr=1e-3, batch=256, classifier=None,
                          w_init: WeightVector | None = None):
    """Alternate classifier descent and weight ascent on the robust log loss.

    Each epoch trains the classifier for one pass on the self-normalised
    ``w``-weighted source log loss plus the target log loss, then updates
    ``w`` with ``minimax_weights`` on the per-sample source losses under a
    feature-matching penalty. ``history`` on the returned classifier holds the
    robust loss, the uniform-weight loss and the violation penalty per epoch.
    """
    if len(source) == 0 or len(target) == 0:
        raise DegenerateInputError("robust fit needs samples from both domains")
    clf = classifier or DomainClassifier(source.features.shape[1], seed=seed, role="robust")
    w = WeightVector.uniform(len(source)) if w_init is None else w_init
    w = WeightVector(project_weights(w.weights, cfg).weights, "minimax")
    penalty = feature_matching_penalty(source.features, cfg.feature_coefficient)
    robust, uniform, viol = [], [], []
    rising = 0
    for epoch in range(epochs):
        _fit(clf, source, target, w.weights, 1, seed=seed + epoch, lr=lr, batch=batch, names=None,
             normalize=True, label="robust classifier")
        ls = -np.log(clf.predict_proba(source.features))
        lt = float(np.mean(-np.log1p(-clf.predict_proba(target.features))))
        w = minimax_weights(ls, w, cfg, penalty)
        robust.append(weighted_loss(w.weights, ls) + lt)
        uniform.append(float(ls.mean()) + lt)
        viol.append(w.penalty)
        rising = rising + 1 if len(robust) > 1 and robust[-1] > robust[-2] else 0
        if rising >= 10:
            raise TrainingError("robust fit does not converge: loss rose for 10 consecutive epochs",
                                epoch=epoch)
    clf.history.update(robust_loss=robust, uniform_loss=uniform, violation_penalty=viol)
    return clf, w
