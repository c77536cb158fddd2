"""Engineered image features and latent postprocessing.

Images are float arrays of shape (H, W, 3) with values in [0, 1].
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import _kernels

LUMA = np.array([0.299, 0.587, 0.114])
FFT_EPS = 1e-12


@dataclass(frozen=True)
class FeatureVector:
    values: np.ndarray
    name: str
    params: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.values)


def _check_image(img, min_side=1):
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected an (H, W, 3) image, got shape {img.shape}")
    if img.shape[0] == 0 or img.shape[1] == 0:
        raise ValueError("empty image")
    if min(img.shape[:2]) < min_side:
        raise ValueError(f"image smaller than {min_side} pixels")
    if not np.all(np.isfinite(img)):
        raise ValueError("non-finite pixel values")
    return img


def to_gray(img):
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        return img
    return img @ LUMA


# ---------------------------------------------------------------------------
# image files
# ---------------------------------------------------------------------------


def _ppm_tokens(data):
    tokens, i = [], 2
    while len(tokens) < 3:
        while data[i : i + 1].isspace():
            i += 1
        if data[i : i + 1] == b"#":
            while data[i : i + 1] not in (b"\n", b""):
                i += 1
            continue
        j = i
        while not data[j : j + 1].isspace():
            j += 1
        tokens.append(int(data[i:j]))
        i = j
    return tokens, i + 1


def read_ppm(path):
    data = Path(path).read_bytes()
    magic = data[:2]
    if magic not in (b"P6", b"P3"):
        raise ValueError(f"{path}: not a PPM file")
    (w, h, maxval), offset = _ppm_tokens(data)
    if magic == b"P6":
        dtype = ">u2" if maxval > 255 else "u1"
        px = np.frombuffer(data, dtype=dtype, count=w * h * 3, offset=offset)
    else:
        px = np.array(data[offset:].split(), dtype=np.int64)[: w * h * 3]
    return px.reshape(h, w, 3).astype(np.float64) / maxval


def write_ppm(path, img):
    img = np.clip(np.asarray(img, dtype=np.float64), 0, 1)
    h, w = img.shape[:2]
    px = np.round(img * 255).astype(np.uint8)
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode() + px.tobytes())


def read_image(path):
    path = Path(path)
    if path.suffix.lower() in (".ppm", ".pnm"):
        return read_ppm(path)
    try:
        from PIL import Image
    except ImportError as exc:  # pragma: no cover
        raise ValueError(f"{path}: only PPM is supported without Pillow") from exc
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


IMAGE_SUFFIXES = (".ppm", ".pnm", ".png")


def list_images(directory):
    return sorted(p for p in Path(directory).iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


# ---------------------------------------------------------------------------
# features
# ---------------------------------------------------------------------------


def color_histogram(img, bins=8) -> FeatureVector:
    if bins < 1:
        raise ValueError("bins must be >= 1")
    img = _check_image(img)
    idx = np.minimum((img * bins).astype(np.int64), bins - 1)
    idx = np.clip(idx, 0, bins - 1)
    hist = np.concatenate([np.bincount(idx[..., ch].ravel(), minlength=bins) for ch in range(3)])
    return FeatureVector(hist.astype(np.float64), "colorhist", {"bins": bins})


def lbp_histogram(img, P=8, R=1, method="uniform") -> FeatureVector:
    """Normalized histogram of rotation-variant uniform LBP codes (P + 2 bins).

    A neighbour contributes a 1 when it is strictly brighter than the centre,
    so flat regions map to code 0.
    """
    if method != "uniform":
        raise ValueError("only the 'uniform' LBP mapping is implemented")
    img = _check_image(img, min_side=2 * R + 1)
    codes = lbp_codes(to_gray(img), P, R)
    hist = np.bincount(codes.ravel(), minlength=P + 2).astype(np.float64)
    return FeatureVector(hist / hist.sum(), "lbp", {"P": P, "R": R, "method": method})


def lbp_codes(gray, P=8, R=1):
    return _kernels.lbp_uniform_codes(np.ascontiguousarray(gray, dtype=np.float64), int(P), float(R))


def _gradients(gray):
    g_row = np.zeros_like(gray)
    g_col = np.zeros_like(gray)
    g_row[1:-1, :] = gray[2:, :] - gray[:-2, :]
    g_col[:, 1:-1] = gray[:, 2:] - gray[:, :-2]
    return g_row, g_col


def _l2_hys(block, eps=1e-5, clip=0.2):
    out = block / np.sqrt(np.sum(block**2) + eps**2)
    out = np.minimum(out, clip)
    return out / np.sqrt(np.sum(out**2) + eps**2)


def hog(img, orientations=8, cell=8, block=2) -> FeatureVector:
    """Histogram of oriented gradients on the luma channel, L2-Hys block normalized."""
    img = _check_image(img, min_side=8)
    gray = to_gray(img)
    H, W = gray.shape
    pad_r, pad_c = (-H) % cell, (-W) % cell
    if pad_r or pad_c:
        gray = np.pad(gray, ((0, pad_r), (0, pad_c)), mode="reflect")
    g_row, g_col = _gradients(gray)
    hist = _kernels.hog_cell_histograms(
        np.ascontiguousarray(g_row), np.ascontiguousarray(g_col), int(cell), int(orientations)
    )
    n_r, n_c = hist.shape[:2]
    nb_r, nb_c = n_r - block + 1, n_c - block + 1
    if nb_r <= 0 or nb_c <= 0:
        raise ValueError(f"image too small for {block}x{block} blocks of {cell}-pixel cells")
    out = np.empty((nb_r, nb_c, block, block, orientations))
    for r in range(nb_r):
        for c in range(nb_c):
            out[r, c] = _l2_hys(hist[r : r + block, c : c + block])
    return FeatureVector(out.ravel(), "hog", {"orientations": orientations, "cell": cell, "block": block})


def fft2d_features(img, mode="real_imag") -> FeatureVector:
    """2-D DFT of the grayscale image, flattened row-major; length 2*H*W."""
    if mode not in ("real_imag", "logpsd_angle"):
        raise ValueError(f"unknown FFT feature mode {mode!r}")
    X = np.fft.fft2(to_gray(_check_image(img)))
    if mode == "real_imag":
        vals = np.concatenate([X.real.ravel(), X.imag.ravel()])
    else:
        vals = np.concatenate([np.log(np.abs(X).ravel() ** 2 + FFT_EPS), np.angle(X).ravel()])
    return FeatureVector(vals, "fft", {"mode": mode, "eps": FFT_EPS})


FEATURES = {
    "colorhist": color_histogram,
    "lbp": lbp_histogram,
    "hog": hog,
    "fft": fft2d_features,
}


def extract(name, img):
    if name not in FEATURES:
        raise ValueError(f"unknown feature {name!r}; choose from {sorted(FEATURES)}")
    return FEATURES[name](img).values


# ---------------------------------------------------------------------------
# postprocessing of regression outputs
# ---------------------------------------------------------------------------


def zscore_postprocess(predictions, bank, return_flags=False):
    """Standardize each feature across predictions, then map onto the bank's train statistics."""
    P = np.asarray(predictions, dtype=np.float64)
    if P.ndim != 2 or P.shape[0] < 2:
        raise ValueError("need at least 2 predictions")
    mean = P.mean(axis=0)
    std = P.std(axis=0)
    flat = ~(std > 0)
    if flat.any():
        warnings.warn(f"{int(flat.sum())} feature(s) constant across predictions; centred at the train mean")
    z = (P - mean) / np.where(flat, 1.0, std)
    out = z * bank.train_std + bank.train_mean
    return (out, flat) if return_flags else out
