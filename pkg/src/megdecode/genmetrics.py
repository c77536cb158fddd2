"""Reconstruction-quality metrics between seen and generated images.

Pretrained-network metrics (AlexNet, Inception, CLIP, SwAV) are computed with
pluggable :class:`EmbeddingProvider` objects: either a precomputed latent bank
looked up by image key, or an engineered feature from :mod:`megdecode.embeddings`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter, map_coordinates

from . import embeddings

SSIM_SIGMA = 1.5
SSIM_WIN = 11
SSIM_K1 = 0.01
SSIM_K2 = 0.03


class EmbeddingProvider:
    """Named image -> vector map with a fixed output dimension."""

    def __init__(self, name, fn):
        self.name = name
        self._fn = fn
        self._dim = None

    def __call__(self, img, key=None):
        v = np.asarray(self._fn(img, key), dtype=np.float64).ravel()
        if self._dim is None:
            self._dim = v.size
        elif v.size != self._dim:
            raise ValueError(f"provider {self.name} changed output dimension {self._dim} -> {v.size}")
        return v

    def embed(self, images, keys=None):
        keys = keys if keys is not None else [None] * len(images)
        return np.stack([self(img, k) for img, k in zip(images, keys)])

    @classmethod
    def feature(cls, name):
        if name not in embeddings.FEATURES:
            raise ValueError(f"unknown feature provider {name!r}")
        return cls(name, lambda img, key: embeddings.extract(name, img))

    @classmethod
    def bank(cls, bank, name=None):
        def lookup(img, key):
            if key is None:
                raise ValueError("bank providers need an image key")
            return bank.get([key])[0]

        return cls(name or bank.name, lookup)


def _to_gray_image(img):
    img = np.asarray(img, dtype=np.float64)
    return embeddings.to_gray(img) if img.ndim == 3 else img


def resize_bilinear(gray, side):
    """Bilinear resampling of a 2-D array to (side, side) with pixel-centre alignment."""
    H, W = gray.shape
    r = (np.arange(side) + 0.5) * H / side - 0.5
    c = (np.arange(side) + 0.5) * W / side - 0.5
    rr, cc = np.meshgrid(r, c, indexing="ij")
    return map_coordinates(gray, [rr, cc], order=1, mode="nearest")


def _pearson(a, b):
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    a = a - a.mean()
    b = b - b.mean()
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ValueError("correlation undefined for a constant vector")
    return float(a @ b / (na * nb))


def pixcorr(true_img, gen_img, side=64):
    a = resize_bilinear(_to_gray_image(true_img), side)
    b = resize_bilinear(_to_gray_image(gen_img), side)
    return _pearson(a, b)


def ssim(true_img, gen_img, data_range=1.0):
    """Mean SSIM with an 11-tap Gaussian window (sigma 1.5), border of 5 pixels excluded."""
    x = _to_gray_image(true_img)
    y = _to_gray_image(gen_img)
    if x.shape != y.shape:
        raise ValueError(f"image shapes differ: {x.shape} vs {y.shape}")
    if min(x.shape) < SSIM_WIN:
        raise ValueError(f"images must be at least {SSIM_WIN}x{SSIM_WIN}")

    def filt(a):
        return gaussian_filter(a, SSIM_SIGMA, mode="reflect", truncate=3.5)

    mx, my = filt(x), filt(y)
    vx = filt(x * x) - mx * mx
    vy = filt(y * y) - my * my
    cxy = filt(x * y) - mx * my
    C1 = (SSIM_K1 * data_range) ** 2
    C2 = (SSIM_K2 * data_range) ** 2
    S = ((2 * mx * my + C1) * (2 * cxy + C2)) / ((mx * mx + my * my + C1) * (vx + vy + C2))
    pad = (SSIM_WIN - 1) // 2
    return float(S[pad:-pad, pad:-pad].mean())


def _corr_matrix(A, B):
    """Pearson correlation between every row of A and every row of B."""
    A = A - A.mean(axis=1, keepdims=True)
    B = B - B.mean(axis=1, keepdims=True)
    na = np.linalg.norm(A, axis=1)
    nb = np.linalg.norm(B, axis=1)
    if np.any(na == 0) or np.any(nb == 0):
        raise ValueError("correlation undefined: provider returned a constant embedding")
    return (A / na[:, None]) @ (B / nb[:, None]).T


def two_way_from_embeddings(E_true, E_gen):
    n = E_true.shape[0]
    if n < 2:
        raise ValueError("two-way comparison needs at least 2 pairs")
    R = _corr_matrix(E_gen, E_true)  # R[i, j] = corr(gen_i, true_j)
    own = np.diag(R)[:, None]
    wins = (own > R).astype(np.float64)
    np.fill_diagonal(wins, 0.0)
    return float(wins.sum() / (n * (n - 1)))


def two_way_score(trues, gens, provider, keys=None):
    """Fraction of ordered (i, j != i) pairs where gen_i correlates more with true_i than true_j."""
    tk, gk = keys if keys is not None else (None, None)
    return two_way_from_embeddings(provider.embed(trues, tk), provider.embed(gens, gk))


def embedding_distance(trues, gens, provider, keys=None):
    """Mean correlation distance 1 - corr(E(true_i), E(gen_i)); lower is better."""
    tk, gk = keys if keys is not None else (None, None)
    Et, Eg = provider.embed(trues, tk), provider.embed(gens, gk)
    return float(np.mean([1 - _pearson(a, b) for a, b in zip(Et, Eg)]))


@dataclass
class GenMetricReport:
    pixcorr: np.ndarray
    ssim: np.ndarray
    two_way: dict = field(default_factory=dict)
    distance: np.ndarray | None = None
    distance_provider: str | None = None

    @staticmethod
    def _sem(v):
        v = np.asarray(v, dtype=np.float64)
        return float(v.std(ddof=1) / np.sqrt(v.size)) if v.size > 1 else float("nan")

    def summary(self):
        out = {
            "pixcorr": float(np.mean(self.pixcorr)),
            "pixcorr_sem": self._sem(self.pixcorr),
            "ssim": float(np.mean(self.ssim)),
            "ssim_sem": self._sem(self.ssim),
        }
        for name, v in sorted(self.two_way.items()):
            out[f"two_way_{name}"] = v
        if self.distance is not None:
            out[f"distance_{self.distance_provider}"] = float(np.mean(self.distance))
            out[f"distance_{self.distance_provider}_sem"] = self._sem(self.distance)
        return out

    def selection_scores(self):
        """Per-pair (-distance + ssim); distance defaults to 0 without a distance provider."""
        d = self.distance if self.distance is not None else np.zeros_like(self.ssim)
        return -np.asarray(d) + np.asarray(self.ssim)


def evaluate_generation(trues, gens, providers=(), distance_provider=None, keys=None, side=64):
    if len(trues) != len(gens):
        raise ValueError("trues and gens must pair up")
    pc = np.array([pixcorr(t, g, side) for t, g in zip(trues, gens)])
    ss = np.array([ssim(_resize_like(t, g), _to_gray_image(g)) for t, g in zip(trues, gens)])
    rep = GenMetricReport(pc, ss)
    tk, gk = keys if keys is not None else (None, None)
    for p in providers:
        rep.two_way[p.name] = two_way_score(trues, gens, p, (tk, gk))
    if distance_provider is not None:
        Et, Eg = distance_provider.embed(trues, tk), distance_provider.embed(gens, gk)
        rep.distance = np.array([1 - _pearson(a, b) for a, b in zip(Et, Eg)])
        rep.distance_provider = distance_provider.name
    return rep


def _resize_like(true_img, gen_img):
    t = _to_gray_image(true_img)
    g = _to_gray_image(gen_img)
    if t.shape == g.shape:
        return t
    if g.shape[0] != g.shape[1]:
        raise ValueError("can only resample to square generated images")
    return resize_bilinear(t, g.shape[0])


def select_examples(scores, n_blocks=15, per_block=4):
    """Indices of the first ``per_block`` items of the best, middle and worst blocks.

    ``scores`` are per-item values of (-distance + ssim), higher is better. Items are
    sorted descending (stable), cut into ``n_blocks`` equal blocks with the remainder
    going to the last block.
    """
    scores = np.asarray(scores, dtype=np.float64)
    n = scores.size
    if n < n_blocks:
        raise ValueError(f"need at least {n_blocks} items")
    order = np.argsort(-scores, kind="stable")
    size = n // n_blocks
    starts = [i * size for i in range(n_blocks)]
    ends = starts[1:] + [n]

    def pick(b):
        return order[starts[b] : ends[b]][:per_block].tolist()

    return {"best": pick(0), "middle": pick(n_blocks // 2), "worst": pick(n_blocks - 1)}


def minmax_normalize(values):
    v = np.asarray(values, dtype=np.float64)
    lo, hi = v.min(), v.max()
    if hi == lo:
        return np.zeros_like(v)
    return (v - lo) / (hi - lo)


def windowed_metrics(models_by_window, data, providers=(), distance_provider=None):
    """Generation metrics per window plus metric-wise min-max normalized curves.

    ``models_by_window`` maps a WindowSpec to a callable ``model(data) -> (trues, gens)``.
    Returns ``(rows, normalized)``: one summary dict per window and, for each
    metric, its values min-max scaled to [0, 1] across windows.
    """
    if not models_by_window:
        raise ValueError("no windows given")
    rows = []
    for spec, model in models_by_window.items():
        trues, gens = model(data)
        rep = evaluate_generation(trues, gens, providers, distance_provider)
        rows.append({"t_start": spec.t_start, "t_mid": spec.midpoint, "t_end": spec.t_end, **rep.summary()})
    metrics = [k for k in rows[0] if k not in ("t_start", "t_mid", "t_end") and not k.endswith("_sem")]
    normalized = {k: minmax_normalize([r[k] for r in rows]) for k in metrics}
    return rows, normalized


def load_image_dir(directory):
    paths = embeddings.list_images(directory)
    return [p.stem for p in paths], [embeddings.read_image(p) for p in paths]


def parse_providers(spec, trues_dir=None, gens_dir=None):
    """Parse ``colorhist,hog,bank:clip.megt`` into providers.

    ``bank:FILE`` resolves FILE inside both image directories; the returned
    provider pair looks trues up in the first bank and gens in the second.
    """
    from .datastore import load_latent_bank

    out = []
    for item in [s.strip() for s in spec.split(",") if s.strip()]:
        if item.startswith("bank:"):
            fname = item[5:]
            banks = [load_latent_bank(Path(d) / fname) for d in (trues_dir, gens_dir)]
            out.append(_PairedBankProvider(Path(fname).stem, *banks))
        else:
            out.append(EmbeddingProvider.feature(item))
    return out


class _PairedBankProvider(EmbeddingProvider):
    """Bank lookup where keys are ``("true" | "gen", image_id)``."""

    def __init__(self, name, true_bank, gen_bank):
        banks = {"true": true_bank, "gen": gen_bank}
        super().__init__(name, lambda img, key: banks[key[0]].get([key[1]])[0])
