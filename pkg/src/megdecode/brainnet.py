"""The brain module: MEG window (C, T) -> image latent(s).

Pipeline, batched over the leading axis::

    spatial attention (Fourier-parameterized, sensor-position conditioned)
    -> 1x1 linear -> per-subject 1x1 linear (no bias)
    -> residual dilated conv blocks [conv-BN-GELU, conv-BN-GELU, conv-GLU]
    -> 1x1 conv D->2D, GELU, 1x1 conv 2D->F_proj
    -> temporal aggregation (mean / affine / attention)
    -> heads of [LayerNorm (no affine) -> GELU -> Linear] blocks

Forward keeps every intermediate in a ``trace`` dict; ``backward`` walks it in
reverse and returns exact gradients for all parameters and the input.
"""

from __future__ import annotations

import copy
import dataclasses
import json
from dataclasses import dataclass

import numpy as np
from scipy.special import erf

AGGREGATIONS = ("mean_pool", "affine", "attention")
HEAD_LAYOUTS = ("clip_only", "clip_and_mse")
BN_EPS = 1e-5
LN_EPS = 1e-5
BN_MOMENTUM = 0.1
FOURIER_MARGIN = 0.2


@dataclass(frozen=True)
class BrainModuleConfig:
    C_in: int = 272
    C_att: int = 270
    D: int = 320
    n_blocks: int = 2
    F_proj: int = 2048
    T: int = 181
    fourier_K: int = 32
    n_subjects: int = 4
    aggregation: str = "affine"
    head_blocks: int = 1
    F_out: int = 768
    F_out_mse: int | None = None
    head_layout: str = "clip_only"
    attention_hidden: int = 64

    def __post_init__(self):
        for name in ("C_in", "C_att", "D", "n_blocks", "F_proj", "T", "fourier_K", "n_subjects", "F_out"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.head_blocks < 0:
            raise ValueError("head_blocks must be >= 0")
        if self.aggregation not in AGGREGATIONS:
            raise ValueError(f"aggregation must be one of {AGGREGATIONS}")
        if self.head_layout not in HEAD_LAYOUTS:
            raise ValueError(f"head_layout must be one of {HEAD_LAYOUTS}")

    @property
    def heads(self):
        if self.head_blocks == 0:
            names = ("clip",) if self.head_layout == "clip_only" else ("clip", "mse")
            return {n: self.F_proj for n in names}
        if self.head_layout == "clip_only":
            return {"clip": self.F_out}
        return {"clip": self.F_out, "mse": self.F_out_mse or self.F_out}

    def dilations(self, k):
        return 2 ** ((2 * k) % 5), 2 ** ((2 * k + 1) % 5)

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


# ---------------------------------------------------------------------------
# elementary ops
# ---------------------------------------------------------------------------

_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(x):
    return 0.5 * x * (1.0 + erf(x / _SQRT2))


def gelu_grad(x):
    return 0.5 * (1.0 + erf(x / _SQRT2)) + x * _INV_SQRT_2PI * np.exp(-0.5 * x * x)


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def softmax(x, axis=-1):
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def fourier_features(positions, K, margin=FOURIER_MARGIN):
    """cos/sin of 2*pi*(k x + l y)/width for k, l in [0, K): shape (C, 2 K^2)."""
    pos = np.asarray(positions, dtype=np.float64)
    width = 1.0 + 2.0 * margin
    f = np.arange(K)
    phase = 2 * np.pi * (f[None, :, None] * pos[:, 0, None, None] + f[None, None, :] * pos[:, 1, None, None]) / width
    phase = phase.reshape(pos.shape[0], K * K)
    return np.concatenate([np.cos(phase), np.sin(phase)], axis=1)


def _im2col(xp, T, d):
    """(B, Ci, T + 2d) padded input -> (3 * Ci, B * T) column matrix, tap-major."""
    B, Ci, _ = xp.shape
    cols = np.empty((3, Ci, B, T))
    for k in range(3):
        cols[k] = xp[:, :, k * d : k * d + T].transpose(1, 0, 2)
    return cols.reshape(3 * Ci, B * T)


def conv1d(x, w, b, dilation):
    """Same-padded dilated conv, kernel 3: x (B, Ci, T), w (Co, Ci, 3).

    Computed as one GEMM over an im2col matrix; returns ``(out, cols)``.
    """
    B, _, T = x.shape
    d = dilation
    cols = _im2col(np.pad(x, ((0, 0), (0, 0), (d, d))), T, d)
    W = w.transpose(0, 2, 1).reshape(w.shape[0], -1)  # (Co, 3 * Ci), tap-major
    out = (W @ cols).reshape(w.shape[0], B, T).transpose(1, 0, 2)
    if b is not None:
        out = out + b[None, :, None]
    return np.ascontiguousarray(out), cols


def conv1d_backward(dout, cols, w, dilation):
    B, Co, T = dout.shape
    Ci = w.shape[1]
    d = dilation
    D = dout.transpose(1, 0, 2).reshape(Co, B * T)
    W = w.transpose(0, 2, 1).reshape(Co, -1)
    dw = (D @ cols.T).reshape(Co, 3, Ci).transpose(0, 2, 1)
    dcols = (W.T @ D).reshape(3, Ci, B, T)
    dxp = np.zeros((Ci, B, T + 2 * d))
    for k in range(3):
        dxp[:, :, k * d : k * d + T] += dcols[k]
    db = D.sum(axis=1)
    return np.ascontiguousarray(dxp[:, :, d : d + T].transpose(1, 0, 2)), np.ascontiguousarray(dw), db


def _as_cols(x):
    B, C, T = x.shape
    return x.transpose(1, 0, 2).reshape(C, B * T)


def pointwise(x, w, b=None):
    B, _, T = x.shape
    out = (w @ _as_cols(x)).reshape(w.shape[0], B, T).transpose(1, 0, 2)
    if b is not None:
        out = out + b[None, :, None]
    return np.ascontiguousarray(out)


def pointwise_backward(dout, x, w):
    B, Co, T = dout.shape
    D = _as_cols(dout)
    dw = D @ _as_cols(x).T
    db = D.sum(axis=1)
    dx = (w.T @ D).reshape(w.shape[1], B, T).transpose(1, 0, 2)
    return np.ascontiguousarray(dx), dw, db


def batchnorm_forward(x, gamma, beta, running, train):
    if train:
        mean = x.mean(axis=(0, 2))
        var = x.var(axis=(0, 2))
        n = x.shape[0] * x.shape[2]
        if running is not None:
            unbiased = var * n / max(n - 1, 1)
            running["mean"] *= 1 - BN_MOMENTUM
            running["mean"] += BN_MOMENTUM * mean
            running["var"] *= 1 - BN_MOMENTUM
            running["var"] += BN_MOMENTUM * unbiased
    else:
        mean, var = running["mean"], running["var"]
    inv = 1.0 / np.sqrt(var + BN_EPS)
    xhat = (x - mean[None, :, None]) * inv[None, :, None]
    return gamma[None, :, None] * xhat + beta[None, :, None], (xhat, inv, train)


def batchnorm_backward(dout, cache, gamma):
    xhat, inv, train = cache
    dgamma = np.sum(dout * xhat, axis=(0, 2))
    dbeta = dout.sum(axis=(0, 2))
    dxhat = dout * gamma[None, :, None]
    if not train:
        return dxhat * inv[None, :, None], dgamma, dbeta
    n = xhat.shape[0] * xhat.shape[2]
    s1 = dxhat.sum(axis=(0, 2), keepdims=True)
    s2 = np.sum(dxhat * xhat, axis=(0, 2), keepdims=True)
    dx = inv[None, :, None] / n * (n * dxhat - s1 - xhat * s2)
    return dx, dgamma, dbeta


def layernorm(x):
    mean = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = (x - mean) * inv
    return xhat, inv


def layernorm_backward(dout, xhat, inv):
    n = xhat.shape[-1]
    s1 = dout.sum(axis=-1, keepdims=True)
    s2 = np.sum(dout * xhat, axis=-1, keepdims=True)
    return inv / n * (n * dout - s1 - xhat * s2)


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------


def _block_in(cfg, k):
    return cfg.C_att if k == 0 else cfg.D


def param_shapes(cfg: BrainModuleConfig):
    """Ordered mapping name -> shape for every learnable tensor."""
    s = {}
    s["spatial_attention.weight"] = (cfg.C_att, 2 * cfg.fourier_K**2)
    s["linear.weight"] = (cfg.C_att, cfg.C_att)
    s["linear.bias"] = (cfg.C_att,)
    s["subject.weight"] = (cfg.n_subjects, cfg.C_att, cfg.C_att)
    for k in range(cfg.n_blocks):
        p = f"blocks.{k}."
        cin = _block_in(cfg, k)
        s[p + "conv1.weight"] = (cfg.D, cin, 3)
        s[p + "conv1.bias"] = (cfg.D,)
        s[p + "norm1.weight"] = (cfg.D,)
        s[p + "norm1.bias"] = (cfg.D,)
        s[p + "conv2.weight"] = (cfg.D, cfg.D, 3)
        s[p + "conv2.bias"] = (cfg.D,)
        s[p + "norm2.weight"] = (cfg.D,)
        s[p + "norm2.bias"] = (cfg.D,)
        s[p + "conv3.weight"] = (2 * cfg.D, cfg.D, 3)
        s[p + "conv3.bias"] = (2 * cfg.D,)
    s["final.conv1.weight"] = (2 * cfg.D, cfg.D)
    s["final.conv1.bias"] = (2 * cfg.D,)
    s["final.conv2.weight"] = (cfg.F_proj, 2 * cfg.D)
    s["final.conv2.bias"] = (cfg.F_proj,)
    if cfg.aggregation == "affine":
        s["aggregation.weight"] = (cfg.T,)
        s["aggregation.bias"] = (1,)
    elif cfg.aggregation == "attention":
        s["aggregation.proj.weight"] = (cfg.attention_hidden, cfg.F_proj)
        s["aggregation.proj.bias"] = (cfg.attention_hidden,)
        s["aggregation.score.weight"] = (cfg.attention_hidden,)
    for head, f_out in cfg.heads.items():
        for i in range(cfg.head_blocks):
            out = f_out if i == cfg.head_blocks - 1 else cfg.F_proj
            s[f"heads.{head}.{i}.weight"] = (out, cfg.F_proj)
            s[f"heads.{head}.{i}.bias"] = (out,)
    return s


def _fan_in(name, shape):
    if name.endswith("norm1.weight") or name.endswith("norm2.weight"):
        return None
    if len(shape) == 3 and name.startswith("blocks"):
        return shape[1] * shape[2]
    if name == "subject.weight":
        return shape[2]
    if len(shape) == 2:
        return shape[1]
    return None


def _bias_fan_in(name, shapes):
    weight = name[: -len("bias")] + "weight"
    if weight in shapes:
        return _fan_in(weight, shapes[weight])
    return None


LAYER_GROUPS = (
    ("spatial_attention.", "Spatial attention block"),
    ("linear.", "Linear projection"),
    ("subject.", "Subject-specific linear layer"),
    ("blocks.", "Residual dilated conv block"),
    ("final.", "Linear projection"),
    ("aggregation.", "Temporal aggregation"),
    ("heads.", "MLP projector"),
)


class BrainModule:
    """Parameters, buffers and sensor layout of one brain module."""

    def __init__(self, config: BrainModuleConfig, params: dict, buffers: dict, positions):
        self.config = config
        self.params = params
        self.buffers = buffers
        self.positions = np.asarray(positions, dtype=np.float64)
        if self.positions.shape != (config.C_in, 2):
            raise ValueError(f"layout has {self.positions.shape[0]} positions, config expects C_in={config.C_in}")
        self._phi = fourier_features(self.positions, config.fourier_K)

    # -- construction --------------------------------------------------

    @classmethod
    def build(cls, config: BrainModuleConfig, seed=0, positions=None):
        rng = np.random.default_rng(seed)
        shapes = param_shapes(config)
        params = {}
        for name, shape in shapes.items():
            if name.startswith("aggregation.") and config.aggregation == "affine":
                params[name] = np.zeros(shape)
                continue
            if name.endswith("norm1.weight") or name.endswith("norm2.weight"):
                params[name] = np.ones(shape)
                continue
            if name.endswith("norm1.bias") or name.endswith("norm2.bias"):
                params[name] = np.zeros(shape)
                continue
            fan = _fan_in(name, shape) if not name.endswith("bias") else _bias_fan_in(name, shapes)
            if name == "aggregation.score.weight":
                fan = config.attention_hidden
            bound = 1.0 / np.sqrt(fan) if fan else 1.0
            params[name] = rng.uniform(-bound, bound, size=shape)
        buffers = {}
        for k in range(config.n_blocks):
            for j in (1, 2):
                buffers[f"blocks.{k}.norm{j}.running_mean"] = np.zeros(config.D)
                buffers[f"blocks.{k}.norm{j}.running_var"] = np.ones(config.D)
        if positions is None:
            positions = default_positions(config.C_in)
        return cls(config, params, buffers, positions)

    def copy(self):
        return BrainModule(self.config, copy.deepcopy(self.params), copy.deepcopy(self.buffers), self.positions)

    # -- bookkeeping ---------------------------------------------------

    def count_params(self):
        return count_params(self.config)

    def state_arrays(self):
        out = {f"param.{k}": v for k, v in self.params.items()}
        out.update({f"buffer.{k}": v for k, v in self.buffers.items()})
        out["positions"] = self.positions
        return out

    @classmethod
    def from_state(cls, config, arrays):
        params = {k[6:]: np.asarray(v, dtype=np.float64) for k, v in arrays.items() if k.startswith("param.")}
        buffers = {k[7:]: np.asarray(v, dtype=np.float64) for k, v in arrays.items() if k.startswith("buffer.")}
        return cls(config, params, buffers, arrays["positions"])

    def config_json(self):
        return json.dumps(self.config.to_dict(), sort_keys=True)

    # -- forward -------------------------------------------------------

    def attention_weights(self):
        scores = self.params["spatial_attention.weight"] @ self._phi.T  # (C_att, C_in)
        return softmax(scores, axis=1)

    def forward(self, x, subjects, train=True, update_stats=None):
        """Run the module on a batch.

        Parameters
        ----------
        x : array (B, C_in, T)
        subjects : int array (B,)
        train : use batch statistics in normalization layers
        update_stats : update running statistics (defaults to ``train``)

        Returns
        -------
        outputs : dict head -> (B, F_head)
        trace : dict of cached activations for :meth:`backward`
        """
        cfg = self.config
        P = self.params
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 3 or x.shape[1] != cfg.C_in:
            raise ValueError(f"expected input (B, {cfg.C_in}, T), got {x.shape}")
        subjects = np.asarray(subjects, dtype=np.int64).reshape(-1)
        if subjects.shape[0] != x.shape[0]:
            raise ValueError("one subject id per batch item required")
        if subjects.size and (subjects.min() < 0 or subjects.max() >= cfg.n_subjects):
            raise ValueError(f"subject id out of range [0, {cfg.n_subjects})")
        if cfg.aggregation == "affine" and x.shape[2] != cfg.T:
            raise ValueError(f"affine aggregation was built for T={cfg.T}, got {x.shape[2]}")
        if update_stats is None:
            update_stats = train
        tr = {"x": x, "subjects": subjects, "train": train, "shapes": [("input", x.shape[1:])]}

        A = self.attention_weights()
        h = np.matmul(A, x)
        tr["A"] = A
        tr["shapes"].append(("Spatial attention block", h.shape[1:]))

        tr["lin_in"] = h
        h = pointwise(h, P["linear.weight"], P["linear.bias"])
        tr["shapes"].append(("Linear projection", h.shape[1:]))

        tr["subj_in"] = h
        h = np.matmul(P["subject.weight"][subjects], h)
        tr["shapes"].append(("Subject-specific linear layer", h.shape[1:]))

        for k in range(cfg.n_blocks):
            h = self._block_forward(k, h, tr, train, update_stats)
            tr["shapes"].append((f"Residual dilated conv block {k + 1}", h.shape[1:]))

        tr["fin_in"] = h
        p1 = pointwise(h, P["final.conv1.weight"], P["final.conv1.bias"])
        tr["fin_p1"] = p1
        g = gelu(p1)
        tr["fin_g"] = g
        y = pointwise(g, P["final.conv2.weight"], P["final.conv2.bias"])
        tr["shapes"].append(("Linear projection", y.shape[1:]))

        tr["agg_in"] = y
        agg = self._aggregate(y, tr)
        tr["shapes"].append(("Temporal aggregation", (agg.shape[1], 1)))

        outputs = {}
        for head in cfg.heads:
            h = agg
            for i in range(cfg.head_blocks):
                xhat, inv = layernorm(h)
                g = gelu(xhat)
                tr[f"head.{head}.{i}"] = (xhat, inv, g)
                h = g @ P[f"heads.{head}.{i}.weight"].T + P[f"heads.{head}.{i}.bias"]
            outputs[head] = h
            tr["shapes"].append((f"MLP projector ({head})", (h.shape[1], 1)))
        return outputs, tr

    def _block_forward(self, k, x, tr, train, update_stats):
        cfg = self.config
        P = self.params
        p = f"blocks.{k}."
        d1, d2 = cfg.dilations(k)
        cache = {"x": x}

        def norm(z, j):
            running = None
            if update_stats or not train:
                running = {"mean": self.buffers[p + f"norm{j}.running_mean"], "var": self.buffers[p + f"norm{j}.running_var"]}
            return batchnorm_forward(z, P[p + f"norm{j}.weight"], P[p + f"norm{j}.bias"], running, train)

        z1, cache["xp1"] = conv1d(x, P[p + "conv1.weight"], P[p + "conv1.bias"], d1)
        n1, cache["bn1"] = norm(z1, 1)
        cache["n1"] = n1
        h1 = gelu(n1)
        if x.shape[1] == cfg.D:
            h1 = h1 + x
        z2, cache["xp2"] = conv1d(h1, P[p + "conv2.weight"], P[p + "conv2.bias"], d2)
        n2, cache["bn2"] = norm(z2, 2)
        cache["n2"] = n2
        h2 = gelu(n2) + h1
        z3, cache["xp3"] = conv1d(h2, P[p + "conv3.weight"], P[p + "conv3.bias"], 1)
        a, gate = z3[:, : cfg.D], z3[:, cfg.D :]
        sg = sigmoid(gate)
        cache["glu"] = (a, sg)
        h3 = a * sg + h2
        tr[f"block.{k}"] = cache
        return h3

    def _aggregate(self, y, tr):
        cfg = self.config
        P = self.params
        if cfg.aggregation == "mean_pool":
            return y.mean(axis=2)
        if cfg.aggregation == "affine":
            return y @ P["aggregation.weight"] + P["aggregation.bias"][0]
        u = np.tanh(pointwise(y, P["aggregation.proj.weight"], P["aggregation.proj.bias"]))  # (B, H, T)
        e = np.einsum("h,bht->bt", P["aggregation.score.weight"], u)
        alpha = softmax(e, axis=1)
        tr["att"] = (u, alpha)
        return np.einsum("bft,bt->bf", y, alpha)

    # -- backward ------------------------------------------------------

    def backward(self, trace, upstream):
        """Gradients of ``sum_head <upstream[head], outputs[head]>``.

        Returns ``(param_grads, dx)``; parameters that do not influence the
        outputs get zero gradients.
        """
        cfg = self.config
        P = self.params
        grads = {k: np.zeros_like(v) for k, v in P.items()}
        B = trace["x"].shape[0]
        dagg = np.zeros((B, cfg.F_proj))
        for head, f_out in cfg.heads.items():
            dh = upstream.get(head)
            if dh is None:
                continue
            dh = np.asarray(dh, dtype=np.float64)
            if dh.shape != (B, f_out):
                raise ValueError(f"upstream gradient for {head} has shape {dh.shape}, expected {(B, f_out)}")
            for i in reversed(range(cfg.head_blocks)):
                xhat, inv, g = trace[f"head.{head}.{i}"]
                W = P[f"heads.{head}.{i}.weight"]
                grads[f"heads.{head}.{i}.weight"] += dh.T @ g
                grads[f"heads.{head}.{i}.bias"] += dh.sum(axis=0)
                dg = dh @ W
                dh = layernorm_backward(dg * gelu_grad(xhat), xhat, inv)
            dagg += dh

        y = trace["agg_in"]
        if cfg.aggregation == "mean_pool":
            dy = np.repeat(dagg[:, :, None] / y.shape[2], y.shape[2], axis=2)
        elif cfg.aggregation == "affine":
            w = P["aggregation.weight"]
            grads["aggregation.weight"] += np.einsum("bf,bft->t", dagg, y)
            grads["aggregation.bias"] += dagg.sum()
            dy = dagg[:, :, None] * w[None, None, :]
        else:
            u, alpha = trace["att"]
            dy = dagg[:, :, None] * alpha[:, None, :]
            dalpha = np.einsum("bf,bft->bt", dagg, y)
            de = alpha * (dalpha - np.sum(dalpha * alpha, axis=1, keepdims=True))
            v = P["aggregation.score.weight"]
            grads["aggregation.score.weight"] += np.einsum("bt,bht->h", de, u)
            dpre = v[None, :, None] * de[:, None, :] * (1 - u * u)
            dyy, dw, db = pointwise_backward(dpre, y, P["aggregation.proj.weight"])
            grads["aggregation.proj.weight"] += dw
            grads["aggregation.proj.bias"] += db
            dy = dy + dyy

        dg, dw, db = pointwise_backward(dy, trace["fin_g"], P["final.conv2.weight"])
        grads["final.conv2.weight"] += dw
        grads["final.conv2.bias"] += db
        dp1 = dg * gelu_grad(trace["fin_p1"])
        dh, dw, db = pointwise_backward(dp1, trace["fin_in"], P["final.conv1.weight"])
        grads["final.conv1.weight"] += dw
        grads["final.conv1.bias"] += db

        for k in reversed(range(cfg.n_blocks)):
            dh = self._block_backward(k, dh, trace, grads)

        subjects = trace["subjects"]
        hs = trace["subj_in"]
        Ws = P["subject.weight"]
        for s in np.unique(subjects):
            m = subjects == s
            grads["subject.weight"][s] += np.tensordot(dh[m], hs[m], axes=([0, 2], [0, 2]))
        dh = np.matmul(np.transpose(Ws[subjects], (0, 2, 1)), dh)

        dh, dw, db = pointwise_backward(dh, trace["lin_in"], P["linear.weight"])
        grads["linear.weight"] += dw
        grads["linear.bias"] += db

        A = trace["A"]
        x = trace["x"]
        dA = np.tensordot(dh, x, axes=([0, 2], [0, 2]))
        dS = A * (dA - np.sum(dA * A, axis=1, keepdims=True))
        grads["spatial_attention.weight"] += dS @ self._phi
        dx = np.matmul(A.T, dh)
        return grads, dx

    def _block_backward(self, k, dout, trace, grads):
        cfg = self.config
        P = self.params
        p = f"blocks.{k}."
        d1, d2 = cfg.dilations(k)
        c = trace[f"block.{k}"]
        x = c["x"]
        # h3 = a * sg + h2
        a, sg = c["glu"]
        dz3 = np.concatenate([dout * sg, dout * a * sg * (1 - sg)], axis=1)
        dh2, dw, db = conv1d_backward(dz3, c["xp3"], P[p + "conv3.weight"], 1)
        grads[p + "conv3.weight"] += dw
        grads[p + "conv3.bias"] += db
        dh2 = dh2 + dout
        # h2 = gelu(n2) + h1
        dn2 = dh2 * gelu_grad(c["n2"])
        dz2, dg, dbeta = batchnorm_backward(dn2, c["bn2"], P[p + "norm2.weight"])
        grads[p + "norm2.weight"] += dg
        grads[p + "norm2.bias"] += dbeta
        dh1, dw, db = conv1d_backward(dz2, c["xp2"], P[p + "conv2.weight"], d2)
        grads[p + "conv2.weight"] += dw
        grads[p + "conv2.bias"] += db
        dh1 = dh1 + dh2
        # h1 = gelu(n1) (+ x)
        dn1 = dh1 * gelu_grad(c["n1"])
        dz1, dg, dbeta = batchnorm_backward(dn1, c["bn1"], P[p + "norm1.weight"])
        grads[p + "norm1.weight"] += dg
        grads[p + "norm1.bias"] += dbeta
        dx, dw, db = conv1d_backward(dz1, c["xp1"], P[p + "conv1.weight"], d1)
        grads[p + "conv1.weight"] += dw
        grads[p + "conv1.bias"] += db
        if x.shape[1] == cfg.D:
            dx = dx + dh1
        return dx

    def predict(self, x, subjects, batch_size=256):
        """Inference-mode outputs for many inputs, concatenated per head."""
        outs = {h: [] for h in self.config.heads}
        for i in range(0, len(x), batch_size):
            o, _ = self.forward(x[i : i + batch_size], subjects[i : i + batch_size], train=False)
            for h in outs:
                outs[h].append(o[h])
        return {h: np.concatenate(v) if v else np.zeros((0, self.config.heads[h])) for h, v in outs.items()}


def default_positions(C):
    """Deterministic pseudo-helmet layout: points on a disc mapped into [0, 1]^2."""
    i = np.arange(C) + 0.5
    r = np.sqrt(i / C)
    theta = np.pi * (3 - np.sqrt(5)) * i
    xy = np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1)
    return 0.5 + 0.5 * xy


def build(config: BrainModuleConfig, seed=0, positions=None) -> BrainModule:
    return BrainModule.build(config, seed, positions)


def spatial_attention_forward(x, positions, weight):
    """Stand-alone spatial attention: x (C_in, T) or (B, C_in, T), weight (C_att, 2K^2)."""
    weight = np.asarray(weight, dtype=np.float64)
    K = int(round(np.sqrt(weight.shape[1] / 2)))
    phi = fourier_features(positions, K)
    if phi.shape[0] != np.asarray(x).shape[-2]:
        raise ValueError("layout size does not match the channel dimension")
    A = softmax(weight @ phi.T, axis=1)
    return np.matmul(A, x)


def temporal_aggregate(y, mode, params=None):
    """Collapse the time axis of y (F, T) or (B, F, T)."""
    y = np.asarray(y, dtype=np.float64)
    if y.shape[-1] == 0:
        raise ValueError("cannot aggregate an empty time axis")
    params = params or {}
    if mode == "mean_pool":
        return y.mean(axis=-1)
    if mode == "affine":
        return y @ params["aggregation.weight"] + params["aggregation.bias"][0]
    if mode == "attention":
        u = np.tanh(np.einsum("hf,...ft->...ht", params["aggregation.proj.weight"], y)
                    + params["aggregation.proj.bias"][:, None])
        alpha = softmax(np.einsum("h,...ht->...t", params["aggregation.score.weight"], u), axis=-1)
        return np.einsum("...ft,...t->...f", y, alpha)
    raise ValueError(f"unknown aggregation {mode!r}")


def count_params(config: BrainModuleConfig):
    """Rows of (layer, count) in network order plus a final ('Total', n) row."""
    shapes = param_shapes(config)
    rows = []
    for prefix, label in LAYER_GROUPS:
        names = [n for n in shapes if n.startswith(prefix)]
        if prefix == "blocks.":
            for k in range(config.n_blocks):
                n = sum(int(np.prod(shapes[m])) for m in names if m.startswith(f"blocks.{k}."))
                rows.append((f"{label} {k + 1}", n))
        elif prefix == "heads.":
            for head in config.heads:
                if config.head_blocks == 0:
                    continue
                n = sum(int(np.prod(shapes[m])) for m in names if m.startswith(f"heads.{head}."))
                rows.append((label if config.head_layout == "clip_only" else f"{label} ({head})", n))
        else:
            rows.append((label, sum(int(np.prod(shapes[m])) for m in names)))
    rows.append(("Total", sum(n for _, n in rows)))
    return rows


def summary_table(config: BrainModuleConfig, B=None):
    """Table of layer, input shape, output shape and parameter count."""
    T = config.T
    shapes = [(config.C_in, T), (config.C_att, T), (config.C_att, T), (config.C_att, T)]
    shapes += [(config.D, T)] * config.n_blocks
    shapes += [(config.F_proj, T), (config.F_proj, 1)]
    rows = count_params(config)
    lines = [f"{'Layer':<32}{'Input shape':>14}{'Output shape':>15}{'# parameters':>15}"]
    body = rows[:-1]
    trunk = body[: 3 + config.n_blocks + 2]
    for i, (name, n) in enumerate(trunk):
        lines.append(f"{name:<32}{str(shapes[i]):>14}{str(shapes[i + 1]):>15}{n:>15,}")
    for name, n in body[len(trunk):]:
        head = "mse" if name.endswith("(mse)") else "clip"
        lines.append(f"{name:<32}{str((config.F_proj, 1)):>14}{str((config.heads[head], 1)):>15}{n:>15,}")
    lines.append(f"{'Total':<32}{'':>14}{'':>15}{rows[-1][1]:>15,}")
    return "\n".join(lines)
