"""MEG preprocessing: decimation, epoching, baseline correction, robust scaling and clipping."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, replace

import numpy as np
from scipy.ndimage import convolve1d
from scipy.signal import firwin

# cutoff relative to the target Nyquist frequency; see tests/test_preprocess.py
# for the measured passband (0.9 Nyquist) and stopband (1.5 Nyquist) gains
ANTIALIAS_CUTOFF = 1.15
DEFAULT_CLIP = 20.0


class MissingEpochError(ValueError):
    def __init__(self, missing):
        self.missing = list(missing)
        super().__init__(f"{len(self.missing)} onset(s) too close to the recording edge: {self.missing[:5]}")


@dataclass(frozen=True)
class ContinuousRecording:
    data: np.ndarray  # (C, n_samples)
    sfreq: float
    event_onsets: np.ndarray  # sample indices

    def __post_init__(self):
        if self.sfreq <= 0:
            raise ValueError("sfreq must be positive")
        on = np.asarray(self.event_onsets, dtype=np.int64)
        if on.size and (np.any(np.diff(on) <= 0) or on[0] < 0 or on[-1] >= self.data.shape[1]):
            raise ValueError("event onsets must be strictly increasing and inside the recording")
        object.__setattr__(self, "event_onsets", on)


@dataclass(frozen=True)
class EpochTensor:
    data: np.ndarray  # (C, T)
    t_min: float
    t_max: float
    sfreq: float

    @property
    def times(self):
        return self.t_min + np.arange(self.data.shape[1]) / self.sfreq


@dataclass(frozen=True)
class RobustScalerParams:
    center: np.ndarray
    scale: np.ndarray
    clip: float = DEFAULT_CLIP
    degenerate: np.ndarray | None = None  # channels whose scale was forced to 1


def n_times(t_min, t_max, sfreq):
    return int(round((t_max - t_min) * sfreq)) + 1


def antialias_filter(ratio):
    return firwin(10 * ratio + 1, ANTIALIAS_CUTOFF / ratio, window="hamming")


def downsample(rec: ContinuousRecording, target_sfreq) -> ContinuousRecording:
    if target_sfreq >= rec.sfreq:
        raise ValueError("target sampling rate must be below the source rate")
    ratio = rec.sfreq / target_sfreq
    if abs(ratio - round(ratio)) > 1e-9:
        raise ValueError(f"sfreq {rec.sfreq} is not an integer multiple of {target_sfreq}")
    ratio = int(round(ratio))
    taps = antialias_filter(ratio)
    # symmetric taps + centred convolution -> zero phase
    filtered = convolve1d(np.asarray(rec.data, dtype=np.float64), taps, axis=-1, mode="reflect")
    return ContinuousRecording(filtered[:, ::ratio], float(target_sfreq), rec.event_onsets // ratio)


def epoch(rec: ContinuousRecording, t_min=-0.5, t_max=1.0, skip_missing=False):
    """Cut one window per onset; windows that do not fit raise unless ``skip_missing``.

    Returns the list of epochs; with ``skip_missing`` it returns ``(epochs, missing)``
    where ``missing`` lists the indices of onsets that could not be epoched.
    """
    if t_max < t_min:
        raise ValueError("t_max must be >= t_min")
    start = int(round(t_min * rec.sfreq))
    T = n_times(t_min, t_max, rec.sfreq)
    n = rec.data.shape[1]
    epochs, missing = [], []
    for k, onset in enumerate(rec.event_onsets):
        a = onset + start
        if a < 0 or a + T > n:
            missing.append(k)
            continue
        epochs.append(EpochTensor(np.array(rec.data[:, a : a + T], dtype=np.float64), t_min, t_max, rec.sfreq))
    if skip_missing:
        return epochs, missing
    if missing:
        raise MissingEpochError(missing)
    return epochs


def baseline_correct(ep: EpochTensor) -> EpochTensor:
    if not ep.t_min < 0 <= ep.t_max:
        raise ValueError("baseline correction needs t_min < 0 <= t_max")
    n_pre = int(np.sum(ep.times < -1e-9))
    if n_pre == 0:
        raise ValueError("no pre-onset samples")
    base = ep.data[:, :n_pre].mean(axis=1, keepdims=True)
    return replace(ep, data=ep.data - base)


def baseline_correct_array(X, t_min, sfreq):
    """Batched baseline correction for ``X`` of shape (..., C, T)."""
    times = t_min + np.arange(X.shape[-1]) / sfreq
    n_pre = int(np.sum(times < -1e-9))
    if n_pre == 0:
        raise ValueError("no pre-onset samples")
    return X - X[..., :n_pre].mean(axis=-1, keepdims=True)


def fit_robust_scaler(train_epochs, clip=DEFAULT_CLIP) -> RobustScalerParams:
    """Per-channel median and q75-q25 over every training sample (linear-interpolated quantiles)."""
    if isinstance(train_epochs, np.ndarray):
        X = train_epochs
    else:
        X = np.stack([e.data if isinstance(e, EpochTensor) else e for e in train_epochs])
    C = X.shape[-2]
    flat = np.moveaxis(X, -2, 0).reshape(C, -1)
    q25, center, q75 = np.quantile(flat, [0.25, 0.5, 0.75], axis=1, method="linear")
    scale = q75 - q25
    degenerate = ~(scale > 0)
    if degenerate.any():
        warnings.warn(f"{int(degenerate.sum())} channel(s) with zero inter-quartile range; scale forced to 1")
        scale = np.where(degenerate, 1.0, scale)
    return RobustScalerParams(center, scale, float(clip), degenerate)


def apply_scaler_clip(ep, params: RobustScalerParams):
    """``clamp((x - center) / scale, -clip, clip)``; accepts an EpochTensor or an (..., C, T) array."""
    data = ep.data if isinstance(ep, EpochTensor) else np.asarray(ep)
    if data.shape[-2] != params.center.shape[0]:
        raise ValueError(f"scaler fitted on {params.center.shape[0]} channels, data has {data.shape[-2]}")
    out = (data - params.center[:, None]) / params.scale[:, None]
    out = np.clip(out, -params.clip, params.clip)
    return replace(ep, data=out) if isinstance(ep, EpochTensor) else out


def preprocess_recording(rec, target_sfreq=120.0, t_min=-0.5, t_max=1.0):
    """Downsample, epoch and baseline-correct a raw recording (no scaling)."""
    if rec.sfreq != target_sfreq:
        rec = downsample(rec, target_sfreq)
    return [baseline_correct(e) for e in epoch(rec, t_min, t_max)]
