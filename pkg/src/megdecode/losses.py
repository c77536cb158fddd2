"""Contrastive (CLIP/InfoNCE), MSE and combined objectives with analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

NORM_AXES = ("image_only", "both", "similarity_columns")


@dataclass(frozen=True)
class ClipLossConfig:
    """CLIP loss options.

    ``norm_axis``:
      * ``image_only`` - L2-normalize target rows only (scores are <zhat_i, z_j/|z_j|>)
      * ``both`` - cosine similarity
      * ``similarity_columns`` - raw dot products, each column of the score
        matrix divided by its L2 norm (the other reading of "normalize along
        the image axis")
    ``temperature``: ``"learned"`` or a fixed positive float.
    """

    symmetric: bool = False
    norm_axis: str = "image_only"
    temperature: object = 1.0

    def __post_init__(self):
        if self.norm_axis not in NORM_AXES:
            raise ValueError(f"norm_axis must be one of {NORM_AXES}")
        if self.temperature != "learned":
            if not float(self.temperature) > 0:
                raise ValueError("temperature must be positive")

    @property
    def learned_temperature(self):
        return self.temperature == "learned"


def _row_norms(M):
    n = np.linalg.norm(M, axis=1, keepdims=True)
    if np.any(n == 0):
        raise ValueError("zero-norm row: cosine similarity undefined")
    return n


def similarity(Zhat, Z, norm_axis):
    """Score matrix S[i, j] between prediction i and target j, plus a backward closure."""
    if norm_axis == "both":
        nh, nz = _row_norms(Zhat), _row_norms(Z)
        U, V = Zhat / nh, Z / nz
        S = U @ V.T

        def back(dS):
            dU = dS @ V
            return (dU - U * np.sum(dU * U, axis=1, keepdims=True)) / nh

    elif norm_axis == "image_only":
        V = Z / _row_norms(Z)
        S = Zhat @ V.T

        def back(dS):
            return dS @ V

    else:
        R = Zhat @ Z.T
        c = np.linalg.norm(R, axis=0, keepdims=True)
        if np.any(c == 0):
            raise ValueError("zero similarity column")
        S = R / c

        def back(dS):
            dR = dS / c - R * np.sum(dS * R, axis=0, keepdims=True) / c**3
            return dR @ Z

    return S, back


def _log_softmax(x, axis):
    m = x.max(axis=axis, keepdims=True)
    return x - m - np.log(np.exp(x - m).sum(axis=axis, keepdims=True))


def clip_loss(Zhat, Z, cfg: ClipLossConfig = ClipLossConfig(), log_tau=0.0):
    """Return ``(loss, dloss/dZhat, dloss/dlog_tau)``.

    ``log_tau`` is only read when the temperature is learned; the fixed value
    from ``cfg`` is used otherwise (and its gradient is reported as 0).
    """
    Zhat = np.asarray(Zhat, dtype=np.float64)
    Z = np.asarray(Z, dtype=np.float64)
    if Zhat.ndim != 2 or Zhat.shape != Z.shape:
        raise ValueError(f"shape mismatch {Zhat.shape} vs {Z.shape}")
    B = Zhat.shape[0]
    if B == 0:
        raise ValueError("empty batch")
    tau = float(np.exp(log_tau)) if cfg.learned_temperature else float(cfg.temperature)
    S, back = similarity(Zhat, Z, cfg.norm_axis)
    L = S / tau
    eye = np.eye(B)
    lp_rows = _log_softmax(L, axis=1)  # brain -> image
    loss = -np.trace(lp_rows) / B
    dL = (np.exp(lp_rows) - eye) / B
    if cfg.symmetric:
        lp_cols = _log_softmax(L, axis=0)  # image -> brain
        loss += -np.trace(lp_cols) / B
        dL += (np.exp(lp_cols) - eye) / B
    dS = dL / tau
    dlog_tau = -np.sum(dL * L) if cfg.learned_temperature else 0.0
    return float(loss), back(dS), float(dlog_tau)


def mse_loss(Zhat, Z):
    Zhat = np.asarray(Zhat, dtype=np.float64)
    Z = np.asarray(Z, dtype=np.float64)
    if Zhat.shape != Z.shape:
        raise ValueError(f"shape mismatch {Zhat.shape} vs {Z.shape}")
    diff = Zhat - Z
    return float(np.mean(diff**2)), 2.0 * diff / diff.size


def combined_loss(Zhat_clip, Zhat_mse, Z_clip, Z_mse, lam, cfg: ClipLossConfig = ClipLossConfig(), log_tau=0.0):
    """``lam * clip + (1 - lam) * mse``.

    Returns ``(loss, grads)`` where ``grads`` has keys ``clip``, ``mse`` (w.r.t. the
    two prediction matrices) and ``log_tau``. A term with zero weight is skipped,
    so its inputs may be ``None``.
    """
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must be in [0, 1], got {lam}")
    total = 0.0
    grads = {"log_tau": 0.0}
    if lam > 0:
        lc, gc, gt = clip_loss(Zhat_clip, Z_clip, cfg, log_tau)
        total += lam * lc
        grads["clip"] = lam * gc
        grads["log_tau"] = lam * gt
    if lam < 1:
        lm, gm = mse_loss(Zhat_mse, Z_mse)
        total += (1 - lam) * lm
        grads["mse"] = (1 - lam) * gm
    return total, grads


def grad_check(loss_fn, point, eps=1e-5, analytic=None):
    """Max norm-wise relative error between an analytic gradient and central differences.

    ``loss_fn(x) -> (value, grad)`` unless ``analytic`` is given, in which case
    ``loss_fn`` returns the value only. The error is
    ``max|g_a - g_n| / max(max|g_n|, max|g_a|, 1e-6)``.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    x = np.array(point, dtype=np.float64)
    if analytic is None:
        _, ga = loss_fn(x.copy())

        def f(v):
            return loss_fn(v)[0]

    else:
        ga = analytic
        f = loss_fn
    ga = np.asarray(ga, dtype=np.float64).reshape(x.shape)
    gn = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = gn.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f(x.copy())
        flat[i] = orig - eps
        fm = f(x.copy())
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * eps)
    return relative_error(ga, gn)


def relative_error(analytic, numeric, floor=1e-6):
    """Norm-wise relative error; ``floor`` keeps exactly-zero gradients (e.g. a bias
    feeding a normalization layer) from dividing finite-difference noise by ~0."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = max(np.max(np.abs(numeric)), np.max(np.abs(analytic)), floor)
    return float(np.max(np.abs(analytic - numeric)) / scale)
