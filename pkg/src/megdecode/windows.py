"""Sliding and growing time windows, per-window sweeps and aggregation-weight profiles."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

_TOL = 1e-9


@dataclass(frozen=True)
class WindowSpec:
    t_start: float
    t_end: float
    kind: str = "sliding"

    def __post_init__(self):
        if not self.t_end > self.t_start - _TOL:
            raise ValueError("window must have t_end >= t_start")
        if self.kind not in ("sliding", "growing", "full"):
            raise ValueError(f"unknown window kind {self.kind!r}")

    @property
    def midpoint(self):
        return round(0.5 * (self.t_start + self.t_end), 9)

    def sample_slice(self, t_min, sfreq, n_samples=None):
        """Samples covered by the window, inclusive of both ends."""
        i0 = int(round((self.t_start - t_min) * sfreq))
        n = int(round((self.t_end - self.t_start) * sfreq)) + 1
        if i0 < 0 or (n_samples is not None and i0 + n > n_samples):
            raise ValueError(f"window [{self.t_start}, {self.t_end}] s falls outside the epoch")
        return slice(i0, i0 + n)

    def crop(self, X, t_min, sfreq):
        return X[..., self.sample_slice(t_min, sfreq, X.shape[-1])]


def _count(span, step):
    return int(math.floor(span / step + _TOL)) + 1


def enumerate_sliding(epoch_bounds=(-0.5, 1.0), width=0.1, stride=0.025):
    lo, hi = epoch_bounds
    span = hi - lo
    if width > span + _TOL:
        raise ValueError("window width exceeds the epoch span")
    if stride <= 0:
        raise ValueError("stride must be positive")
    n = _count(span - width, stride)
    return [WindowSpec(round(lo + i * stride, 9), round(lo + i * stride + width, 9), "sliding") for i in range(n)]


def enumerate_growing(start=-0.1, end_min=0.0, end_max=1.5, step=0.025):
    if end_min < start:
        raise ValueError("end_min must be >= start")
    if end_max < end_min:
        raise ValueError("end_max must be >= end_min")
    n = _count(end_max - end_min, step)
    return [WindowSpec(start, round(end_min + i * step, 9), "growing") for i in range(n)]


def full_window(t_min, t_max):
    return WindowSpec(t_min, t_max, "full")


def window_sweep(specs, train_fn, eval_fn, t_min, sfreq):
    """Train and evaluate an independent model per window.

    ``train_fn(spec, crop)`` returns a fitted model; ``crop(X)`` cuts the window
    out of an (..., T) array. ``eval_fn(spec, model, crop)`` returns a dict of
    metrics. Rows carry the window start, midpoint and end.
    """
    rows = []
    for spec in specs:

        def crop(X, spec=spec):
            return spec.crop(X, t_min, sfreq)

        model = train_fn(spec, crop)
        metrics = eval_fn(spec, model, crop)
        rows.append({"kind": spec.kind, "t_start": spec.t_start, "t_mid": spec.midpoint, "t_end": spec.t_end, **metrics})
    return rows


def agg_weight_profile(modules):
    """Mean |w_agg| per time step across models (affine aggregation only)."""
    ws = []
    for m in modules:
        params = m.params if hasattr(m, "params") else m
        if "aggregation.weight" not in params:
            raise ValueError("agg_weight_profile needs models with affine temporal aggregation")
        ws.append(np.abs(np.asarray(params["aggregation.weight"], dtype=np.float64)))
    if not ws:
        raise ValueError("no models given")
    if len({w.shape for w in ws}) != 1:
        raise ValueError("models disagree on the number of time steps")
    return np.mean(ws, axis=0)
