"""Ridge regression from flattened MEG windows to latents, with k-fold CV over alpha.

Inputs are standardized per dimension and targets centred before solving. The
solve uses one thin SVD of the standardized design matrix, X = U S V^T, so the
whole alpha grid shares a single factorization:

    W(alpha) = V diag(s / (s^2 + alpha)) U^T Y
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEFAULT_ALPHAS = tuple(10.0 ** np.arange(0, 7))


@dataclass
class RidgeModel:
    weights: np.ndarray  # (D_in, F), acts on standardized inputs
    bias: np.ndarray  # (F,)
    alpha: float
    x_mean: np.ndarray
    x_scale: np.ndarray

    def predict(self, X):
        X = _flatten(X)
        return ((X - self.x_mean) / self.x_scale) @ self.weights + self.bias

    @property
    def coef_(self):
        """Weights in the original input units."""
        return self.weights / self.x_scale[:, None]

    @property
    def intercept_(self):
        return self.bias - (self.x_mean / self.x_scale) @ self.weights


def _flatten(X):
    X = np.asarray(X, dtype=np.float64)
    return X.reshape(X.shape[0], -1)


def _standardize(X):
    mean = X.mean(axis=0)
    scale = X.std(axis=0)
    scale = np.where(scale > 0, scale, 1.0)
    return (X - mean) / scale, mean, scale


class _Factorized:
    def __init__(self, Xs, Yc):
        U, s, Vt = np.linalg.svd(Xs, full_matrices=False)
        self.s = s
        self.Vt = Vt
        self.UtY = U.T @ Yc

    def weights(self, alpha):
        d = self.s / (self.s**2 + alpha)
        return self.Vt.T @ (d[:, None] * self.UtY)


def _check(X, Y, alpha_values):
    X = _flatten(X)
    Y = np.asarray(Y, dtype=np.float64)
    if Y.ndim == 1:
        Y = Y[:, None]
    if X.shape[0] != Y.shape[0]:
        raise ValueError("X and Y must have the same number of rows")
    if X.shape[0] < 2:
        raise ValueError("ridge needs at least 2 samples")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(Y))):
        raise ValueError("non-finite values in ridge inputs")
    for a in alpha_values:
        if not a > 0:
            raise ValueError(f"alpha must be positive, got {a}")
    return X, Y


def ridge_fit(X, Y, alpha) -> RidgeModel:
    X, Y = _check(X, Y, [alpha])
    Xs, xm, xs = _standardize(X)
    ym = Y.mean(axis=0)
    W = _Factorized(Xs, Y - ym).weights(alpha)
    return RidgeModel(W, ym, float(alpha), xm, xs)


def kfold_indices(n, folds, seed):
    perm = np.random.default_rng(seed).permutation(n)
    return np.array_split(perm, folds)


def ridge_cv(X, Y, alphas=DEFAULT_ALPHAS, folds=5, seed=0, groups=None):
    """Pick alpha by mean validation MSE over ``folds`` folds, then refit on everything.

    ``groups`` (optional, one label per row) keeps rows with equal labels in
    the same fold, e.g. repeated presentations of one image.

    Returns ``(best_alpha, model, cv_scores)`` with ``cv_scores`` aligned to ``alphas``.
    """
    alphas = [float(a) for a in alphas]
    if not alphas:
        raise ValueError("empty alpha grid")
    X, Y = _check(X, Y, alphas)
    n = X.shape[0]
    if groups is None:
        if n < folds:
            raise ValueError(f"need at least {folds} samples for {folds}-fold CV")
        parts = kfold_indices(n, folds, seed)
    else:
        labels, inv = np.unique(np.asarray(groups), return_inverse=True)
        if len(labels) < folds:
            raise ValueError(f"need at least {folds} groups for {folds}-fold CV")
        parts = [np.flatnonzero(np.isin(inv, g)) for g in kfold_indices(len(labels), folds, seed)]
    scores = np.zeros(len(alphas))
    for val_idx in parts:
        mask = np.ones(n, dtype=bool)
        mask[val_idx] = False
        Xs, xm, xsc = _standardize(X[mask])
        ym = Y[mask].mean(axis=0)
        fac = _Factorized(Xs, Y[mask] - ym)
        Xv = (X[val_idx] - xm) / xsc
        for j, a in enumerate(alphas):
            pred = Xv @ fac.weights(a) + ym
            scores[j] += np.mean((pred - Y[val_idx]) ** 2)
    scores /= len(parts)
    best = alphas[int(np.argmin(scores))]
    return best, ridge_fit(X, Y, best), scores
