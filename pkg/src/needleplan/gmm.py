"""Multivariate Gaussian and Gaussian-mixture density machinery.

Evaluation, EM fitting, weighted maximum-likelihood fitting, diagonal
regularization, and a value-exact serialization format. Everything is
computed in log space; mixtures are evaluated with a max-shifted
log-sum-exp so that far-out queries stay finite.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_triangular

from .errors import (
    DegenerateWeightsError,
    InsufficientDataError,
    InvalidArgumentError,
    ParseError,
)

MODEL_FORMAT = "gmm"
MODEL_VERSION = 1

_LOG_2PI = float(np.log(2.0 * np.pi))


def logsumexp(a, axis=None):
    """Numerically stable log(sum(exp(a))) along an axis."""
    a = np.asarray(a, dtype=float)
    m = np.max(a, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    out = np.log(np.sum(np.exp(a - m), axis=axis, keepdims=True)) + m
    if axis is None:
        return float(out)
    return np.squeeze(out, axis=axis)


def _as_samples(samples):
    X = np.asarray(samples, dtype=float)
    if X.ndim == 1:
        X = X.reshape(-1, 1)
    if X.ndim != 2 or X.shape[0] == 0:
        raise InvalidArgumentError(f"samples must be a nonempty (n, d) array, got shape {X.shape}")
    return X


def _chol_with_jitter(cov):
    """Cholesky factor, escalating a tiny diagonal jitter if needed."""
    d = cov.shape[0]
    jitter = 0.0
    scale = max(float(np.trace(cov)) / d, 1e-300)
    for _ in range(8):
        try:
            return np.linalg.cholesky(cov + jitter * np.eye(d))
        except np.linalg.LinAlgError:
            jitter = scale * 1e-12 if jitter == 0.0 else jitter * 100.0
    raise np.linalg.LinAlgError("covariance not positive definite even after jitter")


@dataclass(frozen=True)
class Gaussian:
    """A single multivariate normal with full covariance."""

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=float).reshape(-1)
        cov = np.asarray(self.cov, dtype=float)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)
        d = mean.shape[0]
        if cov.shape != (d, d):
            raise InvalidArgumentError(f"covariance shape {cov.shape} does not match dim {d}")
        asym = np.max(np.abs(cov - cov.T))
        if asym > 1e-9 * max(1.0, float(np.max(np.abs(cov)))):
            raise InvalidArgumentError("covariance is not symmetric")

    @property
    def dim(self):
        return self.mean.shape[0]

    def log_pdf_rows(self, X):
        """Log density at each row of X, shape (n,)."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if X.shape[1] != self.dim:
            raise InvalidArgumentError(f"query dim {X.shape[1]} != model dim {self.dim}")
        L = _chol_with_jitter(self.cov)
        diff = (X - self.mean).T
        y = solve_triangular(L, diff, lower=True)
        quad = np.sum(y * y, axis=0)
        logdet = 2.0 * float(np.sum(np.log(np.diag(L))))
        return -0.5 * (self.dim * _LOG_2PI + logdet + quad)

    def sample(self, n, rng):
        L = _chol_with_jitter(self.cov)
        z = rng.standard_normal((n, self.dim))
        return self.mean + z @ L.T


class GmmModel:
    """Weighted mixture of full-covariance Gaussians.

    Immutable after construction; component parameters are stacked into
    arrays once so batch evaluation is a couple of matrix solves.
    """

    def __init__(self, components, weights, loglik_trace=None):
        components = list(components)
        if not components:
            raise InvalidArgumentError("mixture needs at least one component")
        weights = np.asarray(weights, dtype=float).reshape(-1)
        if weights.shape[0] != len(components):
            raise InvalidArgumentError("one weight per component required")
        if np.any(weights < 0):
            raise InvalidArgumentError("mixture weights must be nonnegative")
        if abs(float(weights.sum()) - 1.0) > 1e-12:
            raise InvalidArgumentError("mixture weights must sum to 1 within 1e-12")
        d = components[0].dim
        for c in components:
            if c.dim != d:
                raise InvalidArgumentError("all components must share one dimension")
        self.components = tuple(components)
        self.weights = weights
        self.dim = d
        self.loglik_trace = list(loglik_trace) if loglik_trace is not None else None
        self._means = np.stack([c.mean for c in components])
        self._chols = np.stack([_chol_with_jitter(c.cov) for c in components])
        self._logdets = 2.0 * np.sum(np.log(np.diagonal(self._chols, axis1=1, axis2=2)), axis=1)
        with np.errstate(divide="ignore"):
            self._logw = np.log(weights)

    @property
    def k(self):
        return len(self.components)

    def component_log_pdf_rows(self, X):
        """Per-component log densities, shape (n, k). No mixture weights."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if X.shape[1] != self.dim:
            raise InvalidArgumentError(f"query dim {X.shape[1]} != model dim {self.dim}")
        n = X.shape[0]
        out = np.empty((n, self.k))
        for c in range(self.k):
            diff = (X - self._means[c]).T
            y = solve_triangular(self._chols[c], diff, lower=True)
            quad = np.sum(y * y, axis=0)
            out[:, c] = -0.5 * (self.dim * _LOG_2PI + self._logdets[c] + quad)
        return out

    def log_pdf_rows(self, X):
        """Mixture log density at each row of X, shape (n,)."""
        return logsumexp(self.component_log_pdf_rows(X) + self._logw, axis=1)

    def log_pdf(self, x):
        return float(self.log_pdf_rows(np.asarray(x, dtype=float).reshape(1, -1))[0])

    def sample(self, n, rng):
        """Draw n vectors; component choice then conditional normal."""
        idx = rng.choice(self.k, size=n, p=self.weights)
        out = np.empty((n, self.dim))
        for c in range(self.k):
            mask = idx == c
            m = int(mask.sum())
            if m:
                z = rng.standard_normal((m, self.dim))
                out[mask] = self._means[c] + z @ self._chols[c].T
        return out


@dataclass
class FitConfig:
    """Knobs for EM fitting; defaults match the rest of the pipeline."""

    k: int = 3
    max_iters: int = 200
    loglik_tol: float = 1e-8
    cov_floor: float = 1e-6
    seed: int = 0

    def __post_init__(self):
        if self.k < 1:
            raise InvalidArgumentError("k must be >= 1")
        if self.cov_floor < 0:
            raise InvalidArgumentError("cov_floor must be >= 0")


def log_pdf(model, x):
    """Mixture log density log sum_c w_c N(x | mu_c, Sigma_c)."""
    return model.log_pdf(x)


def fit_weighted_gaussian(samples, weights):
    """Closed-form weighted ML Gaussian.

    mu = sum_j wbar_j xi_j, Sigma = sum_j wbar_j (mu - xi_j)(mu - xi_j)^T
    with wbar the weights normalized to sum 1. Invariant to uniform
    rescaling of the weights. The covariance is symmetrized but NOT
    floored; callers regularize.
    """
    X = _as_samples(samples)
    w = np.asarray(weights, dtype=float).reshape(-1)
    if w.shape[0] != X.shape[0]:
        raise InvalidArgumentError("one weight per sample required")
    if np.any(w < 0) or np.any(~np.isfinite(w)):
        raise InvalidArgumentError("weights must be finite and nonnegative")
    total = float(w.sum())
    if total <= 0.0:
        raise DegenerateWeightsError("all sample weights are zero")
    mean, cov = _weighted_mean_cov(X, w / total)
    return Gaussian(mean=mean, cov=cov)


def _weighted_mean_cov(X, wbar):
    """Mean and covariance under normalized weights (sum(wbar) == 1)."""
    mean = wbar @ X
    diff = X - mean
    cov = (wbar[:, None] * diff).T @ diff
    cov = 0.5 * (cov + cov.T)
    return mean, cov


def _kmeanspp_centers(X, w, k, rng):
    """Weighted k-means++ seeding; reduces to the standard rule for uniform w."""
    n = X.shape[0]
    base = w / w.sum()
    centers = np.empty((k, X.shape[1]))
    idx = int(rng.choice(n, p=base))
    centers[0] = X[idx]
    d2 = np.sum((X - centers[0]) ** 2, axis=1)
    for c in range(1, k):
        probs = w * d2
        total = probs.sum()
        if total <= 0.0:
            idx = int(rng.choice(n, p=base))
        else:
            idx = int(rng.choice(n, p=probs / total))
        centers[c] = X[idx]
        d2 = np.minimum(d2, np.sum((X - centers[c]) ** 2, axis=1))
    return centers


def _weighted_em(X, w, cfg, init_model=None):
    """Weighted EM core. Returns (model, loglik_trace).

    Each sample's responsibility is scaled by its weight in the M-step
    and its log-likelihood term is scaled in the objective, so uniform
    weights reproduce plain EM exactly. init_model warm-starts the
    iteration (and preserves component order) instead of k-means++.
    """
    n, d = X.shape
    k = cfg.k
    rng = np.random.default_rng(cfg.seed)
    eye = np.eye(d)

    if init_model is not None:
        if init_model.dim != d or init_model.k != k:
            raise InvalidArgumentError("init_model shape disagrees with data/config")
        proto = init_model
        means = np.array(proto._means)
        covs = np.stack([c.cov for c in proto.components])
        mix = np.array(proto.weights)
    else:
        means = _kmeanspp_centers(X, w, k, rng)
        _, cov0 = _weighted_mean_cov(X, w / w.sum())
        cov0 = cov0 + max(cfg.cov_floor, 1e-12) * eye
        covs = np.repeat(cov0[None, :, :], k, axis=0)
        mix = np.full(k, 1.0 / k)
        proto = GmmModel([Gaussian(means[c], covs[c]) for c in range(k)], mix)
    trace = []
    prev = -np.inf
    tiny = 10.0 * np.finfo(float).eps
    for _ in range(cfg.max_iters):
        comp = proto.component_log_pdf_rows(X)  # (n, k)
        joint = comp + proto._logw
        norm = logsumexp(joint, axis=1)
        ll = float(w @ norm)
        trace.append(ll)
        if np.isfinite(prev) and abs(ll - prev) <= cfg.loglik_tol * max(abs(prev), 1.0):
            break
        prev = ll

        resp = np.exp(joint - norm[:, None]) * w[:, None]
        nk = resp.sum(axis=0)
        mix = nk / nk.sum()
        nk_safe = nk + tiny
        means = (resp.T @ X) / nk_safe[:, None]
        for c in range(k):
            diff = X - means[c]
            cov = (resp[:, c][:, None] * diff).T @ diff / nk_safe[c]
            cov = 0.5 * (cov + cov.T) + cfg.cov_floor * eye
            covs[c] = cov
        proto = GmmModel([Gaussian(means[c], covs[c]) for c in range(k)], mix)
    return proto, trace


def fit_em(samples, cfg):
    """Fit a k-component GMM by EM with k-means++ seeded initialization.

    Deterministic given cfg.seed; the per-iteration total log-likelihood
    trace is attached to the returned model as `loglik_trace`.
    """
    X = _as_samples(samples)
    return fit_weighted_gmm(X, np.ones(X.shape[0]), cfg)


def fit_weighted_gmm(samples, weights, cfg, init_model=None):
    """Weighted EM: per-sample weights scale responsibilities and objective."""
    X = _as_samples(samples)
    n, d = X.shape
    if n < cfg.k * (d + 1):
        raise InsufficientDataError(
            f"need at least k*(d+1) = {cfg.k * (d + 1)} samples for d={d}, k={cfg.k}; got {n}"
        )
    w = np.asarray(weights, dtype=float).reshape(-1)
    if w.shape[0] != n:
        raise InvalidArgumentError("one weight per sample required")
    if np.any(w < 0) or np.any(~np.isfinite(w)):
        raise InvalidArgumentError("weights must be finite and nonnegative")
    if float(w.sum()) <= 0.0:
        raise DegenerateWeightsError("all sample weights are zero")
    model, trace = _weighted_em(X, w, cfg, init_model=init_model)
    model.loglik_trace = trace
    return model


def regularize(model, diag_term):
    """Return a copy with diag_term added to every covariance diagonal."""
    if diag_term < 0:
        raise InvalidArgumentError("diag_term must be >= 0")
    if diag_term == 0.0:
        return model
    eye = np.eye(model.dim) * diag_term
    comps = [Gaussian(c.mean, c.cov + eye) for c in model.components]
    return GmmModel(comps, model.weights, loglik_trace=model.loglik_trace)


# ---------------------------------------------------------------------------
# Serialization: versioned JSON, floats as hex strings (value-exact round trip)
# ---------------------------------------------------------------------------

def _hex(x):
    return float(x).hex()


def _unhex(s, fieldname):
    try:
        return float.fromhex(s)
    except (TypeError, ValueError) as e:
        raise ParseError(f"bad float in field '{fieldname}': {s!r}", field=fieldname) from e


def model_to_dict(model):
    return {
        "format": MODEL_FORMAT,
        "version": MODEL_VERSION,
        "dim": model.dim,
        "k": model.k,
        "weights": [_hex(w) for w in model.weights],
        "means": [[_hex(v) for v in c.mean] for c in model.components],
        # row-major flattening of each d x d covariance
        "covariances": [[_hex(v) for v in c.cov.reshape(-1)] for c in model.components],
    }


def model_from_dict(obj):
    for key in ("format", "version", "dim", "k", "weights", "means", "covariances"):
        if key not in obj:
            raise ParseError(f"missing field '{key}' in model file", field=key)
    if obj["format"] != MODEL_FORMAT:
        raise ParseError(f"unexpected format {obj['format']!r}", field="format")
    if obj["version"] != MODEL_VERSION:
        raise ParseError(f"unsupported model version {obj['version']!r}", field="version")
    d = int(obj["dim"])
    k = int(obj["k"])
    if len(obj["weights"]) != k or len(obj["means"]) != k or len(obj["covariances"]) != k:
        raise ParseError("weights/means/covariances length disagrees with k", field="k")
    weights = np.array([_unhex(s, "weights") for s in obj["weights"]])
    comps = []
    for mean_hex, cov_hex in zip(obj["means"], obj["covariances"]):
        if len(mean_hex) != d or len(cov_hex) != d * d:
            raise ParseError("mean/covariance entry count disagrees with dim", field="means")
        mean = np.array([_unhex(s, "means") for s in mean_hex])
        cov = np.array([_unhex(s, "covariances") for s in cov_hex]).reshape(d, d)
        comps.append(Gaussian(mean, cov))
    return GmmModel(comps, weights)


def save_model(model, path):
    with open(path, "w") as f:
        json.dump(model_to_dict(model), f, indent=1)
        f.write("\n")


def load_model(path):
    try:
        with open(path) as f:
            obj = json.load(f)
    except json.JSONDecodeError as e:
        raise ParseError(f"invalid JSON at line {e.lineno} col {e.colno}: {e.msg}") from e
    return model_from_dict(obj)
