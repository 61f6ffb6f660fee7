"""Classifier-to-detector conversion and Mahalanobis confidence scoring.

The classifier is copied, its prediction branch cut at ``sever_at``, a fresh
decoder attached, and the coupled network trained for a few plain gradient
steps to reconstruct its input. Features of the retrained encoder are then
modelled as class-conditional Gaussians with one shared covariance, and an
input's confidence is the negative squared Mahalanobis distance to the
closest class mean.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy.linalg import cho_solve, solve_triangular

from m2d import autodiff as ad
from m2d import nets
from m2d.nets import Network, SurgeryPlan

logger = logging.getLogger(__name__)

MODES = ("retrain", "no-retrain", "vanilla-ae")


class CovarianceError(np.linalg.LinAlgError):
    """Covariance plus ridge is not positive definite."""


class NotFittedError(RuntimeError):
    pass


@dataclass
class RetrainConfig:
    steps: int = 10
    learning_rate: float = 0.01
    batch_size: int = 64
    sever_at: int = 1
    seed: int = 0
    loss: str = "mse"  # or "bce" for inputs in [0, 1]

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        if self.learning_rate < 0:
            raise ValueError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.loss not in ("mse", "bce"):
            raise ValueError(f"loss must be 'mse' or 'bce', got {self.loss!r}")


@dataclass
class RetrainResult:
    encoder: Network
    losses: list[float]


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    """Endless sequential mini-batches, reshuffled at every epoch boundary."""
    while True:
        perm = rng.permutation(n)
        for start in range(0, n, batch_size):
            yield perm[start : start + batch_size]


def retrain_encoder(
    classifier: Network,
    plan: SurgeryPlan,
    cfg: RetrainConfig,
    data: np.ndarray,
    pretrained: bool = True,
) -> RetrainResult:
    """Few-step reconstruction retraining of a severed copy of ``classifier``.

    With ``pretrained=False`` the copy is replaced by a freshly initialised
    network of the same architecture, which gives the untrained-autoencoder
    comparison.
    """
    data = np.asarray(data, dtype=np.float64)
    if data.shape[0] == 0:
        raise ValueError("retraining needs at least one sample")
    if pretrained:
        source = nets.duplicate(classifier)
    else:
        source = nets.build(classifier.spec, seed=cfg.seed + 7919)
    coupled = nets.sever_and_attach(source, plan, seed=cfg.seed)
    params = coupled.parameters()
    state = ad.OptimizerState(cfg.learning_rate)
    loss_fn = ad.mse_loss if cfg.loss == "mse" else ad.bce_with_logits_loss
    batches = _batches(data.shape[0], cfg.batch_size, ad.make_rng(cfg.seed))
    losses = []
    for _ in range(cfg.steps):
        xb = data[next(batches)]
        out = coupled.forward(xb)
        loss = loss_fn(out, xb.reshape(out.shape))
        grads = ad.backward(loss, params)
        ad.sgd_step(params, grads, state)
        losses.append(loss.item())
        logger.debug("event=retrain_step step=%d loss=%.10g", state.step_count, losses[-1])
    return RetrainResult(nets.encoder_half(coupled), losses)


# ---------------------------------------------------------------------------
# class-conditional Gaussian with tied covariance


def default_ridge(cov: np.ndarray) -> float:
    d = cov.shape[0]
    scale = float(np.trace(cov)) / d
    # a zero-trace covariance (e.g. one sample per class) still needs a positive ridge
    return 1e-6 * scale if scale > 0 else 1e-6


@dataclass
class GaussianHead:
    classes: np.ndarray  # (K,) class labels
    counts: np.ndarray  # (K,) N_c
    means: np.ndarray  # (K, d)
    covariance: np.ndarray  # (d, d)
    ridge: float
    chol: np.ndarray  # lower Cholesky factor of covariance + ridge * I

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @classmethod
    def from_parts(cls, classes, counts, means, covariance, ridge: float) -> "GaussianHead":
        covariance = np.asarray(covariance, dtype=np.float64)
        if ridge < 0:
            raise ValueError(f"ridge must be >= 0, got {ridge}")
        reg = covariance + ridge * np.eye(covariance.shape[0])
        try:
            chol = np.linalg.cholesky(reg)
        except np.linalg.LinAlgError as exc:
            raise CovarianceError(
                f"covariance + {ridge:g}*I is not positive definite; increase the ridge"
            ) from exc
        return cls(
            np.asarray(classes, dtype=np.int64),
            np.asarray(counts, dtype=np.int64),
            np.asarray(means, dtype=np.float64),
            covariance,
            float(ridge),
            chol,
        )

    def sq_distances(self, feats: np.ndarray) -> np.ndarray:
        """Squared Mahalanobis distance of every row to every class mean, (N, K)."""
        feats = np.asarray(feats, dtype=np.float64)
        if feats.ndim != 2 or feats.shape[1] != self.dim:
            raise ValueError(f"features must have shape (N, {self.dim}), got {feats.shape}")
        n, k = feats.shape[0], self.means.shape[0]
        diff = (feats[:, None, :] - self.means[None, :, :]).reshape(n * k, self.dim)
        z = solve_triangular(self.chol, diff.T, lower=True, check_finite=False)
        return np.einsum("ij,ij->j", z, z).reshape(n, k)

    def confidence(self, feats: np.ndarray) -> np.ndarray:
        return -self.sq_distances(feats).min(axis=1)

    def confidence_and_grad(self, feats: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Confidence per row and its gradient with respect to the features."""
        d2 = self.sq_distances(feats)
        closest = d2.argmin(axis=1)
        diff = feats - self.means[closest]
        solved = cho_solve((self.chol, True), diff.T, check_finite=False).T
        return -d2.min(axis=1), -2.0 * solved


def fit_head(features, labels, ridge: float | None = None, classes: Sequence[int] | None = None) -> GaussianHead:
    """Per-class means and the pooled (tied) covariance normalised by N.

    ``ridge=None`` picks ``1e-6 * trace(cov) / d``. Listing a class in
    ``classes`` that has no samples is an error.
    """
    feats = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels).astype(np.int64).reshape(-1)
    if feats.ndim != 2 or feats.shape[1] < 1:
        raise ValueError(f"features must be (N, d) with d >= 1, got {feats.shape}")
    if feats.shape[0] != labels.shape[0] or feats.shape[0] == 0:
        raise ValueError("need one label per feature row and at least one row")
    present = np.unique(labels)
    if classes is not None:
        missing = sorted(set(int(c) for c in classes) - set(present.tolist()))
        if missing:
            raise ValueError(f"classes {missing} have no samples")
        present = np.array(sorted(set(int(c) for c in classes)), dtype=np.int64)
    index = np.searchsorted(present, labels)
    counts = np.bincount(index, minlength=len(present))
    means = np.zeros((len(present), feats.shape[1]))
    np.add.at(means, index, feats)
    means /= counts[:, None]
    centered = feats - means[index]
    cov = centered.T @ centered / feats.shape[0]
    cov = 0.5 * (cov + cov.T)
    if ridge is None:
        ridge = default_ridge(cov)
    return GaussianHead.from_parts(present, counts, means, cov, ridge)


# ---------------------------------------------------------------------------
# bundle


@dataclass
class DetectorBundle:
    frozen_classifier: Network
    encoder: Network
    heads: dict[str, GaussianHead]
    ensemble_weights: dict[str, float]
    epsilon: float | None = None
    threshold: float | None = None
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.heads:
            raise NotFittedError("bundle has no fitted heads")
        for tap in self.heads:
            if tap != nets.INPUT_TAP and tap not in self.encoder.spec.tap_points:
                raise ValueError(f"head tap {tap!r} is not an encoder tap point")
        if set(self.ensemble_weights) != set(self.heads):
            raise ValueError("ensemble weights must name exactly the fitted taps")
        w = np.array(list(self.ensemble_weights.values()), dtype=np.float64)
        if np.any(w < 0) or not np.any(w > 0):
            raise ValueError("ensemble weights must be non-negative and not all zero")
        if self.epsilon is not None and not self.epsilon > 0:
            raise ValueError(f"epsilon must be > 0 when set, got {self.epsilon}")

    @property
    def taps(self) -> list[str]:
        return sorted(self.heads)


def uniform_weights(taps: Sequence[str]) -> dict[str, float]:
    return {t: 1.0 / len(taps) for t in taps}


def confidence(bundle: DetectorBundle, x) -> np.ndarray:
    """Weighted sum over taps of the closest-class Mahalanobis confidence, (N,)."""
    feats = nets.extract_features(bundle.encoder, x, bundle.taps)
    total = np.zeros(next(iter(feats.values())).shape[0])
    for tap in bundle.taps:
        total += bundle.ensemble_weights[tap] * bundle.heads[tap].confidence(feats[tap])
    return total


def confidence_gradient(bundle: DetectorBundle, x) -> tuple[np.ndarray, np.ndarray]:
    """Confidence per sample and its gradient with respect to the input."""
    xt = ad.Tensor(np.asarray(x, dtype=np.float64), requires_grad=True)
    _, feats = nets.feature_tensors(bundle.encoder, xt, bundle.taps)
    total = np.zeros(xt.shape[0])
    surrogate = None
    for tap in bundle.taps:
        w = bundle.ensemble_weights[tap]
        c, g = bundle.heads[tap].confidence_and_grad(feats[tap].data)
        total += w * c
        term = ad.sum_all(ad.mul(feats[tap], ad.Tensor(w * g)))
        surrogate = term if surrogate is None else ad.add(surrogate, term)
    ad.backward(surrogate)
    grad = xt.grad if xt.grad is not None else np.zeros_like(xt.data)
    return total, grad


def preprocess_input(bundle: DetectorBundle, x, epsilon: float) -> np.ndarray:
    """Signed-gradient step of size ``epsilon`` towards higher confidence."""
    if not epsilon > 0:
        raise ValueError(f"epsilon must be > 0, got {epsilon}")
    x = np.asarray(x, dtype=np.float64)
    _, grad = confidence_gradient(bundle, x)
    return x + epsilon * np.sign(grad)


def score(bundle: DetectorBundle, x) -> np.ndarray:
    """Confidence after the bundle's input preprocessing, if it has any."""
    if bundle.epsilon:
        x = preprocess_input(bundle, x, bundle.epsilon)
    return confidence(bundle, x)


def is_in_distribution(bundle: DetectorBundle, x, threshold: float) -> np.ndarray:
    return score(bundle, x) > threshold


def convert(
    classifier: Network,
    x: np.ndarray,
    y: np.ndarray,
    cfg: RetrainConfig,
    taps: Sequence[str] | None = None,
    mode: str = "retrain",
    ridge: float | None = None,
    weights: Mapping[str, float] | None = None,
    epsilon: float | None = None,
    validation: np.ndarray | None = None,
) -> tuple[DetectorBundle, list[float]]:
    """Turn ``classifier`` into a detector bundle.

    ``mode`` is ``retrain`` (the full procedure), ``no-retrain`` (Gaussian
    heads on the untouched classifier prefix) or ``vanilla-ae`` (same
    retraining starting from an untrained network). When ``validation``
    in-distribution inputs are given, the bundle's default threshold is
    their 5th-percentile score.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    plan = SurgeryPlan(cfg.sever_at)
    if mode == "no-retrain":
        nets._check_plan(classifier, plan)
        encoder, losses = nets.truncate(classifier, cfg.sever_at), []
    else:
        result = retrain_encoder(classifier, plan, cfg, x, pretrained=(mode == "retrain"))
        encoder, losses = result.encoder, result.losses
    if not taps:
        taps = [_tap_name_at(encoder, cfg.sever_at)]
    if cfg.sever_at not in encoder.spec.tap_points.values():
        encoder.spec.tap_points[f"pos{cfg.sever_at}"] = cfg.sever_at
    feats = nets.extract_features(encoder, x, taps)
    heads = {t: fit_head(feats[t], y, ridge) for t in taps}
    bundle = DetectorBundle(
        frozen_classifier=nets.duplicate(classifier),
        encoder=encoder,
        heads=heads,
        ensemble_weights=dict(weights) if weights else uniform_weights(sorted(taps)),
        epsilon=epsilon,
        info={"mode": mode, "steps": 0 if mode == "no-retrain" else cfg.steps, "sever_at": cfg.sever_at},
    )
    if validation is not None and len(validation):
        bundle.threshold = float(np.quantile(score(bundle, validation), 0.05))
    return bundle, losses


def _tap_name_at(encoder: Network, position: int) -> str:
    for name, pos in sorted(encoder.spec.tap_points.items()):
        if pos == position:
            return name
    return f"pos{position}"
