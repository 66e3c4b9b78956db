"""Class-weighted soft-margin SVM with an RBF kernel, trained by SMO.

The positive (anomalous) and negative (non-anomalous) classes get separate
box constraints C+ = c_base * w_pos and C- = c_base * w_neg, which is how the
detection/false-alarm trade-off is swept: raising w_pos lets anomalous
support vectors push the boundary further into the nominal region.
"""

from __future__ import annotations

import json
import warnings

import numpy as np
from sklearn.base import BaseEstimator

from .validation import as_float_array, check_finite, check_positive

SVM_FORMAT = "feedmon-svm"
SVM_FORMAT_VERSION = 1


class ConvergenceWarning(UserWarning):
    """SMO hit its iteration cap before satisfying the KKT tolerance."""


def rbf_kernel(a: np.ndarray, b: np.ndarray, gamma: float) -> np.ndarray:
    """exp(-gamma * ||x - y||^2) for all pairs; shapes (N, D) x (M, D)."""
    a = np.atleast_2d(np.asarray(a, dtype=float))
    b = np.atleast_2d(np.asarray(b, dtype=float))
    sq = (
        np.sum(a * a, axis=1)[:, None]
        + np.sum(b * b, axis=1)[None, :]
        - 2.0 * (a @ b.T)
    )
    return np.exp(-gamma * np.maximum(sq, 0.0))


def median_heuristic_gamma(x: np.ndarray) -> float:
    """gamma = 1 / (2 * median^2) of pairwise distances; 1/D when degenerate."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    n, d = x.shape
    fallback = 1.0 / max(d, 1)
    if n < 2:
        return fallback
    sq = (
        np.sum(x * x, axis=1)[:, None]
        + np.sum(x * x, axis=1)[None, :]
        - 2.0 * (x @ x.T)
    )
    upper = sq[np.triu_indices(n, k=1)]
    median_sq = float(np.median(np.maximum(upper, 0.0)))
    if median_sq <= 0.0:
        return fallback
    return 1.0 / (2.0 * median_sq)


class WeightedRbfSvm(BaseEstimator):
    """Binary SVM over feature vectors with labels in {-1, +1}.

    Parameters
    ----------
    c_base : base box constraint; per-class boxes are c_base * w_pos for
        +1 samples and c_base * w_neg for -1 samples.
    w_pos, w_neg : class weight multipliers.
    gamma : RBF width, or "median" for the median pairwise-distance
        heuristic computed on the training features.
    tol : KKT violation tolerance for the SMO stopping rule.
    max_passes : iteration cap as a multiple of the training-set size.
    """

    def __init__(
        self,
        c_base: float = 1.0,
        w_pos: float = 1.0,
        w_neg: float = 1.0,
        gamma="median",
        tol: float = 1e-3,
        max_passes: int = 200,
    ):
        self.c_base = c_base
        self.w_pos = w_pos
        self.w_neg = w_neg
        self.gamma = gamma
        self.tol = tol
        self.max_passes = max_passes

    # -- training -------------------------------------------------------------

    def fit(self, x: np.ndarray, y: np.ndarray, *, gram: np.ndarray | None = None):
        """Train on features x (N, D) and labels y in {-1, +1}.

        A precomputed RBF Gram matrix for x may be passed via ``gram`` to
        share kernel work across fits on the same features; it must have
        been built with the same gamma this estimator resolves to.
        """
        x = as_float_array(x, "x", ndim=2)
        y = np.asarray(y, dtype=float).ravel()
        if len(y) != len(x):
            raise ValueError(f"x has {len(x)} rows but y has {len(y)} labels")
        if len(x) < 2:
            raise ValueError("need at least 2 training samples")
        labels = set(np.unique(y).tolist())
        if not labels <= {-1.0, 1.0}:
            raise ValueError(f"labels must be -1 or +1, got {sorted(labels)}")
        if len(labels) < 2:
            raise ValueError("training set must contain both classes")
        check_finite(x, "x")
        check_positive(self.c_base, "c_base")
        check_positive(self.w_pos, "w_pos")
        check_positive(self.w_neg, "w_neg")

        gamma = self.resolve_gamma(x)
        n = len(x)
        box = np.where(y > 0, self.c_base * self.w_pos, self.c_base * self.w_neg)
        if gram is None:
            gram = rbf_kernel(x, x, gamma)
        elif gram.shape != (n, n):
            raise ValueError(f"gram must have shape ({n}, {n}), got {gram.shape}")

        alpha, bias, converged, n_iter = _smo(gram, y, box, self.tol, self.max_passes * n)
        if not converged:
            warnings.warn(
                f"SMO stopped at the iteration cap ({n_iter} iterations) with "
                f"KKT violations above tol={self.tol}",
                ConvergenceWarning,
                stacklevel=2,
            )

        support = alpha > 1e-12
        self.gamma_ = gamma
        self.bias_ = bias
        self.converged_ = converged
        self.n_iter_ = n_iter
        self.support_vectors_ = x[support].copy()
        self.dual_coef_ = (alpha * y)[support].copy()
        self.alpha_ = alpha.copy()
        self.box_ = box
        self.n_features_in_ = x.shape[1]
        for name in ("support_vectors_", "dual_coef_", "alpha_", "box_"):
            getattr(self, name).setflags(write=False)
        return self

    def resolve_gamma(self, x: np.ndarray) -> float:
        if self.gamma == "median":
            return median_heuristic_gamma(x)
        gamma = float(self.gamma)
        check_positive(gamma, "gamma")
        return gamma

    # -- inference ------------------------------------------------------------

    def decision_function(self, x: np.ndarray) -> np.ndarray:
        """Signed margin f(x) = sum_i alpha_i y_i k(x_i, x) + b."""
        self._check_fitted()
        x = as_float_array(x, "x", ndim=2)
        if x.shape[1] != self.n_features_in_:
            raise ValueError(
                f"x has {x.shape[1]} features, model expects {self.n_features_in_}"
            )
        check_finite(x, "x")
        if len(self.support_vectors_) == 0:
            return np.full(len(x), self.bias_)
        kernel = rbf_kernel(self.support_vectors_, x, self.gamma_)
        return self.dual_coef_ @ kernel + self.bias_

    def predict(self, x: np.ndarray) -> np.ndarray:
        """Labels in {-1, +1}; the boundary itself maps to +1."""
        scores = self.decision_function(x)
        return np.where(scores >= 0.0, 1.0, -1.0)

    def _check_fitted(self) -> None:
        if not hasattr(self, "dual_coef_"):
            raise ValueError("model is not fitted")

    # -- diagnostics ------------------------------------------------------------

    def dual_objective(self, gram: np.ndarray, y: np.ndarray) -> float:
        """sum(a) - 0.5 a'(yy'*K)a for the stored alphas on the training gram."""
        self._check_fitted()
        y = np.asarray(y, dtype=float).ravel()
        q_alpha = (self.alpha_ * y) @ gram * y
        return float(self.alpha_.sum() - 0.5 * self.alpha_ @ q_alpha)

    def kkt_violations(self, gram: np.ndarray, y: np.ndarray) -> np.ndarray:
        """Per-sample KKT residuals for the stored solution (0 = satisfied)."""
        self._check_fitted()
        y = np.asarray(y, dtype=float).ravel()
        margins = (self.alpha_ * y) @ gram + self.bias_
        errors = y * margins - 1.0
        residual = np.zeros(len(y))
        free = (self.alpha_ > 1e-12) & (self.alpha_ < self.box_ - 1e-12)
        residual[free] = np.abs(errors[free])
        at_zero = self.alpha_ <= 1e-12
        residual[at_zero] = np.maximum(0.0, -errors[at_zero])
        at_box = self.alpha_ >= self.box_ - 1e-12
        residual[at_box] = np.maximum(0.0, errors[at_box])
        return residual

    # -- serialization ----------------------------------------------------------

    def to_dict(self) -> dict:
        self._check_fitted()
        return {
            "format": SVM_FORMAT,
            "version": SVM_FORMAT_VERSION,
            "gamma": self.gamma_,
            "bias": self.bias_,
            "support_vectors": self.support_vectors_.tolist(),
            "dual_coef": self.dual_coef_.tolist(),
            "n_features": self.n_features_in_,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "WeightedRbfSvm":
        if doc.get("format") != SVM_FORMAT:
            raise ValueError(f"format: expected {SVM_FORMAT!r}, got {doc.get('format')!r}")
        if doc.get("version") != SVM_FORMAT_VERSION:
            raise ValueError(f"version: unsupported value {doc.get('version')!r}")
        model = cls()
        gamma = float(doc["gamma"])
        if not gamma > 0:
            raise ValueError("gamma: must be positive")
        bias = float(doc["bias"])
        if not np.isfinite(bias):
            raise ValueError("bias: must be finite")
        n_features = int(doc["n_features"])
        vectors = np.asarray(doc["support_vectors"], dtype=float)
        coefs = np.asarray(doc["dual_coef"], dtype=float)
        if vectors.size == 0:
            vectors = vectors.reshape(0, n_features)
        if vectors.ndim != 2 or vectors.shape[1] != n_features:
            raise ValueError("support_vectors: shape inconsistent with n_features")
        if coefs.shape != (len(vectors),):
            raise ValueError("dual_coef: length must match support_vectors")
        if not np.all(np.isfinite(vectors)) or not np.all(np.isfinite(coefs)):
            raise ValueError("support_vectors/dual_coef: contains non-finite values")
        model.gamma_ = gamma
        model.bias_ = bias
        model.support_vectors_ = vectors
        model.dual_coef_ = coefs
        model.alpha_ = np.abs(coefs)
        model.box_ = np.full(len(coefs), np.inf)
        model.n_features_in_ = n_features
        model.converged_ = True
        model.n_iter_ = 0
        for name in ("support_vectors_", "dual_coef_", "alpha_", "box_"):
            getattr(model, name).setflags(write=False)
        return model

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, sort_keys=True, indent=1)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "WeightedRbfSvm":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def _bias_bounds(y, f, alpha, box):
    """Lower/upper bounds on the bias implied by the KKT conditions.

    Writing score_i = y_i - f_i, sample i demands b >= score_i whenever its
    alpha can still grow in the positive direction (y=+1 below the box, or
    y=-1 above zero) and b <= score_i in the mirrored cases.  A consistent
    bias exists iff max(lower) <= min(upper), which is the stopping rule.
    """
    score = y - f
    raises_b = ((y > 0) & (alpha < box - 1e-12)) | ((y < 0) & (alpha > 1e-12))
    caps_b = ((y > 0) & (alpha > 1e-12)) | ((y < 0) & (alpha < box - 1e-12))
    lower = np.where(raises_b, score, -np.inf)
    upper = np.where(caps_b, score, np.inf)
    return lower, upper


def _smo(gram, y, box, tol, max_iterations):
    """Sequential minimal optimization on the maximal-violating pair: the
    samples pinning the largest lower and the smallest upper bias bound.
    Ties break to the lowest index (argmax/argmin) so runs reproduce.

    Returns (alpha, bias, converged, n_iterations).
    """
    n = len(y)
    alpha = np.zeros(n)
    # f_i = sum_j alpha_j y_j K_ij, maintained incrementally.
    f = np.zeros(n)
    converged = False
    iteration = 0
    while iteration < max_iterations:
        lower, upper = _bias_bounds(y, f, alpha, box)
        first = int(np.argmax(lower))
        second = int(np.argmin(upper))
        if lower[first] - upper[second] <= tol:
            converged = True
            break
        moved = _update_pair(gram, y, box, alpha, f, first, second)
        if not moved:
            # Degenerate pair (eta == 0 from duplicate points, or clipped
            # to no movement): scan for any partner that can move.
            for second in range(n):
                if second != first and _update_pair(gram, y, box, alpha, f, first, second):
                    moved = True
                    break
        if not moved:
            # The worst violator cannot move with any partner: stuck short
            # of the tolerance, so report non-convergence.
            break
        iteration += 1

    lower, upper = _bias_bounds(y, f, alpha, box)
    lo = float(lower.max())
    hi = float(upper.min())
    if np.isfinite(lo) and np.isfinite(hi):
        bias = 0.5 * (lo + hi)
    elif np.isfinite(lo):
        bias = lo
    elif np.isfinite(hi):
        bias = hi
    else:
        bias = 0.0
    return alpha, bias, converged, iteration


def _update_pair(gram, y, box, alpha, f, i, j) -> bool:
    """Analytic two-variable step; mutates alpha and f, returns True if moved."""
    if i == j:
        return False
    eta = gram[i, i] + gram[j, j] - 2.0 * gram[i, j]
    if eta <= 1e-12:
        return False
    error_i = f[i] - y[i]
    error_j = f[j] - y[j]
    old_i, old_j = alpha[i], alpha[j]
    new_j = old_j + y[j] * (error_i - error_j) / eta
    if y[i] == y[j]:
        lo = max(0.0, old_i + old_j - box[i])
        hi = min(box[j], old_i + old_j)
    else:
        lo = max(0.0, old_j - old_i)
        hi = min(box[j], box[i] + old_j - old_i)
    if lo >= hi:
        return False
    new_j = min(max(new_j, lo), hi)
    delta_j = new_j - old_j
    if abs(delta_j) < 1e-14:
        return False
    new_i = old_i + y[i] * y[j] * (old_j - new_j)
    alpha[i] = new_i
    alpha[j] = new_j
    delta_i = new_i - old_i
    f += y[i] * delta_i * gram[i] + y[j] * delta_j * gram[j]
    return True
