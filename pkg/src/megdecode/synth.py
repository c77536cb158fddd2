"""Synthetic decodable MEG data with a known linear forward model.

Each image latent ``z`` (category centroid + jitter, unit variance per feature)
drives the sensors through a fixed gain matrix ``G`` and a per-feature temporal
profile ``p_f(t)`` that is exactly zero before stimulus onset::

    X = snr * M_s G (z * p(t)) / rms + noise,   noise ~ N(0, 1)

with ``M_s`` a per-subject mixing matrix. Signal and noise come from separate
random streams, so changing ``snr`` alone changes nothing but the mixture.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .datastore import LatentBank, PresentationRecord, SensorLayout
from .preprocess import n_times
from .splits import build_adapted_split


@dataclass(frozen=True)
class SynthConfig:
    n_train_images: int = 1200
    n_test_images: int = 200
    n_train_categories: int = 240
    large_per_category: int = 2
    reps_per_test_image: int = 12
    n_unseen: int = 0
    C: int = 32
    t_min: float = -0.5
    t_max: float = 0.5
    sfreq: float = 120.0
    F: int = 64
    snr: float = 10.0
    subjects: int = 2
    within_category: float = 0.6
    onset_profile: str = "bump"  # or "none": no signal at any time
    latency_range: tuple = (0.08, 0.35)
    width_range: tuple = (0.03, 0.08)
    valid_fraction: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if self.snr < 0:
            raise ValueError("snr must be >= 0")
        for name in ("n_train_images", "n_test_images", "n_train_categories", "C", "F", "subjects"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.n_train_categories > self.n_train_images:
            raise ValueError("more categories than images")
        if self.onset_profile not in ("bump", "none"):
            raise ValueError("onset_profile must be 'bump' or 'none'")
        if not 0 <= self.within_category <= 1:
            raise ValueError("within_category must be in [0, 1]")

    @property
    def T(self):
        return n_times(self.t_min, self.t_max, self.sfreq)

    def to_dict(self):
        return asdict(self)


@dataclass
class SynthDataset:
    config: SynthConfig
    epochs: np.ndarray  # (N, C, T) float32, one row per record
    records: list
    bank: LatentBank
    manifest: object
    layout: SensorLayout
    original_test_ids: list
    profiles: np.ndarray  # (F, T)

    @property
    def times(self):
        return self.config.t_min + np.arange(self.config.T) / self.config.sfreq

    def indices(self, part):
        """Row indices (into ``epochs``) of a manifest part, in manifest order."""
        pos = {r.key: i for i, r in enumerate(self.records)}
        return np.array([pos[r.key] for r in getattr(self.manifest, part)], dtype=np.int64)


def temporal_profiles(cfg: SynthConfig, rng):
    t = cfg.t_min + np.arange(cfg.T) / cfg.sfreq
    lat = rng.uniform(*cfg.latency_range, size=cfg.F)
    wid = rng.uniform(*cfg.width_range, size=cfg.F)
    p = np.exp(-0.5 * ((t[None, :] - lat[:, None]) / wid[:, None]) ** 2)
    p[:, t <= 1e-9] = 0.0
    if cfg.onset_profile == "none":
        p[:] = 0.0
    return p


def _layout(C, rng):
    theta = rng.uniform(0, 2 * np.pi, size=C)
    r = np.sqrt(rng.uniform(0, 1, size=C))
    xy = 0.5 + 0.45 * np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1)
    return SensorLayout(tuple(f"MEG{c:03d}" for c in range(C)), xy)


def generate(cfg: SynthConfig) -> SynthDataset:
    root = np.random.SeedSequence(cfg.seed)
    s_lat, s_fwd, s_noise, s_layout = (np.random.default_rng(s) for s in root.spawn(4))

    # images and categories
    n_test_cat = cfg.n_test_images
    n_cat = cfg.n_train_categories + n_test_cat
    images, cats = [], []
    for i in range(cfg.n_train_images):
        images.append(f"img{len(images):05d}")
        cats.append(f"cat{i % cfg.n_train_categories:04d}")
    test_ids = []
    for c in range(n_test_cat):
        cat = f"cat{cfg.n_train_categories + c:04d}"
        for j in range(1 + cfg.large_per_category):
            images.append(f"img{len(images):05d}")
            cats.append(cat)
            if j == 0:
                test_ids.append(images[-1])
    unseen = []
    for u in range(cfg.n_unseen):
        unseen.append(f"unseen{u:05d}")

    centroids = s_lat.normal(size=(n_cat, cfg.F))
    cat_idx = np.array([int(c[3:]) for c in cats])
    w = cfg.within_category
    Z = np.sqrt(1 - w * w) * centroids[cat_idx] + w * s_lat.normal(size=(len(images), cfg.F))
    Zu = s_lat.normal(size=(cfg.n_unseen, cfg.F))

    G = s_fwd.normal(size=(cfg.C, cfg.F)) / np.sqrt(cfg.F)
    mixing = np.stack([np.eye(cfg.C) + 0.3 * s_fwd.normal(size=(cfg.C, cfg.C)) / np.sqrt(cfg.C)
                       for _ in range(cfg.subjects)])
    profiles = temporal_profiles(cfg, s_fwd)

    # records: every image once per subject, original test images repeated
    test_set = set(test_ids)
    records = []
    for s in range(cfg.subjects):
        for img, cat in zip(images, cats):
            reps = cfg.reps_per_test_image if img in test_set else 1
            for r in range(reps):
                tag = "small_test" if img in test_set else "train"
                records.append(PresentationRecord(img, cat, s, r if img in test_set else 0, r, tag))

    img_pos = {k: i for i, k in enumerate(images)}
    zi = np.array([img_pos[r.image_id] for r in records])
    subj = np.array([r.subject_id for r in records])
    # signal: (N, C, T) = M_s @ G @ (z[:, :, None] * p)
    signal = np.empty((len(records), cfg.C, cfg.T))
    GP = G[None, :, :] * 1.0
    for s in range(cfg.subjects):
        m = subj == s
        lat = Z[zi[m]][:, :, None] * profiles[None, :, :]
        signal[m] = np.matmul(mixing[s] @ GP[0], lat)
    post = profiles.sum(axis=0) > 0
    rms = np.sqrt(np.mean(signal[:, :, post] ** 2)) if post.any() else 1.0
    X = cfg.snr * signal / rms + s_noise.normal(size=signal.shape)

    layout = _layout(cfg.C, s_layout)
    bank = LatentBank("synth", images + unseen, np.concatenate([Z, Zu]))
    records_all = records + [PresentationRecord(u, "unseen", 0, 0, 0, "unseen_pool") for u in unseen]
    manifest = build_adapted_split(records_all, test_ids, cfg.valid_fraction, cfg.seed)
    bank = bank.with_train_ids(manifest.image_ids("train"))
    return SynthDataset(cfg, X.astype(np.float32), records, bank, manifest, layout, test_ids, profiles)


def snr_sweep(cfg: SynthConfig, snr_list, score_fn, tolerance=0.0):
    """Score a decoder at several SNRs; ``score_fn(dataset) -> accuracy``.

    Returns ``(rows, monotone)`` where ``monotone`` says whether accuracy is
    nondecreasing in SNR up to ``tolerance``.
    """
    if len(snr_list) < 1:
        raise ValueError("need at least one snr value")
    rows = []
    for snr in sorted(snr_list):
        ds = generate(SynthConfig(**{**cfg.to_dict(), "snr": float(snr)}))
        rows.append({"snr": float(snr), "accuracy": float(score_fn(ds))})
    acc = [r["accuracy"] for r in rows]
    monotone = all(b >= a - tolerance for a, b in zip(acc, acc[1:]))
    return rows, monotone


class LatentRenderer:
    """Fixed latent -> image map so generation metrics exist at desk scale.

    image = sigmoid(basis @ z) reshaped to (side, side, 3); smooth spatial bases keep
    the images natural enough for SSIM and HOG to be meaningful.
    """

    def __init__(self, F, side=32, seed=0):
        rng = np.random.default_rng(seed)
        yy, xx = np.meshgrid(np.linspace(0, 1, side), np.linspace(0, 1, side), indexing="ij")
        bases = []
        for _ in range(F):
            fx, fy = rng.integers(0, 4, size=2)
            ph = rng.uniform(0, 2 * np.pi, size=3)
            img = np.stack([np.cos(2 * np.pi * (fx * xx + fy * yy) + p) for p in ph], axis=-1)
            bases.append(img.ravel())
        self.basis = np.array(bases).T / np.sqrt(F)
        self.side = side

    def __call__(self, z):
        z = np.atleast_2d(z)
        out = 1.0 / (1.0 + np.exp(-2.0 * (z @ self.basis.T)))
        return [o.reshape(self.side, self.side, 3) for o in out]
