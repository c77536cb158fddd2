"""Adam training loop with early stopping, the lambda sweep and a generic grid search."""

from __future__ import annotations

import itertools
import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import preprocess
from .brainnet import BrainModule, BrainModuleConfig
from .losses import ClipLossConfig, combined_loss
from .retrieval import RetrievalSet, evaluate_averaged

log = logging.getLogger(__name__)

DEFAULT_LAMBDAS = (0.0, 0.25, 0.5, 0.75)


class TrainingDiverged(RuntimeError):
    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 3e-4
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    batch: int = 128
    patience: int = 10
    max_epochs: int = 100
    seeds: tuple = (0, 1, 2)
    lambdas: tuple = DEFAULT_LAMBDAS
    lam: float = 1.0
    early_stop: str = "val_loss"

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.batch < 1 or self.max_epochs < 1:
            raise ValueError("batch and max_epochs must be positive")
        if not all(0.0 <= lam <= 1.0 for lam in (*self.lambdas, self.lam)):
            raise ValueError("lambda values must lie in [0, 1]")
        if self.early_stop not in ("val_loss", "val_top5"):
            raise ValueError("early_stop must be 'val_loss' or 'val_top5'")
        b1, b2 = self.betas
        if not (0 <= b1 < 1 and 0 <= b2 < 1):
            raise ValueError("betas must lie in [0, 1)")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for k in ("betas", "seeds", "lambdas"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


@dataclass
class TrainReport:
    seed: int
    train_losses: list = field(default_factory=list)  # one per epoch, epoch 1 first
    valid_losses: list = field(default_factory=list)  # index 0 is before any update
    valid_top5: list = field(default_factory=list)
    best_epoch: int = 0
    stop_epoch: int = 0
    best_metric: float = float("nan")
    final_metrics: dict = field(default_factory=dict)
    wall_time: float = 0.0
    diverged: bool = False

    def to_dict(self):
        return asdict(self)


# ---------------------------------------------------------------- data


@dataclass
class DecodingSplit:
    """Epochs with their subject ids, image ids and target latents (aligned rows)."""

    X: np.ndarray
    subjects: np.ndarray
    image_ids: list
    Z_clip: np.ndarray
    Z_mse: np.ndarray | None = None

    def __post_init__(self):
        self.subjects = np.asarray(self.subjects, dtype=np.int64)
        self.image_ids = [str(i) for i in self.image_ids]
        n = len(self.X)
        if not (len(self.subjects) == len(self.image_ids) == len(self.Z_clip) == n):
            raise ValueError("split arrays disagree on the number of rows")
        if self.Z_mse is not None and len(self.Z_mse) != n:
            raise ValueError("Z_mse has the wrong number of rows")

    def __len__(self):
        return len(self.X)

    def take(self, idx):
        return DecodingSplit(self.X[idx], self.subjects[idx], [self.image_ids[i] for i in idx],
                             self.Z_clip[idx], None if self.Z_mse is None else self.Z_mse[idx])

    def retrieval_set(self):
        ids, first = np.unique(np.array(self.image_ids, dtype=object), return_index=True)
        return RetrievalSet(self.Z_clip[first], list(ids))


@dataclass
class TrainData:
    train: DecodingSplit
    valid: DecodingSplit


def make_split(X, records, bank_clip, bank_mse=None):
    ids = [r.image_id for r in records]
    return DecodingSplit(
        X, [r.subject_id for r in records], ids, bank_clip.get(ids),
        None if bank_mse is None else bank_mse.get(ids),
    )


def scale_parts(parts: dict, t_min, sfreq, clip=preprocess.DEFAULT_CLIP):
    """Baseline-correct every part, fit the robust scaler on ``parts['train']`` only, apply to all."""
    corrected = {k: preprocess.baseline_correct_array(np.asarray(v, dtype=np.float64), t_min, sfreq)
                 for k, v in parts.items()}
    params = preprocess.fit_robust_scaler(corrected["train"], clip)
    return {k: preprocess.apply_scaler_clip(v, params) for k, v in corrected.items()}, params


# ---------------------------------------------------------------- Adam


def adam_step(params, grads, state, lr, betas=(0.9, 0.999), eps=1e-8, t=None):
    """One bias-corrected Adam update of ``params`` (dict of arrays) in place.

    ``state`` holds first/second moments and the step counter; pass ``t`` to set
    the step explicitly (t >= 1). Non-finite gradients reject the whole step.
    """
    bad = [k for k, g in grads.items() if not np.all(np.isfinite(g))]
    if bad:
        raise FloatingPointError(f"non-finite gradient in {', '.join(sorted(bad))}; step rejected")
    for k in grads:
        if np.shape(params[k]) != np.shape(grads[k]):
            raise ValueError(f"gradient shape mismatch for {k}: {np.shape(grads[k])} vs {np.shape(params[k])}")
    t = state.get("t", 0) + 1 if t is None else t
    if t < 1:
        raise ValueError("t must be >= 1")
    b1, b2 = betas
    m = state.setdefault("m", {})
    v = state.setdefault("v", {})
    c1 = 1 - b1**t
    c2 = 1 - b2**t
    for k, g in grads.items():
        g = np.asarray(g, dtype=np.float64)
        m[k] = b1 * m.get(k, 0.0) + (1 - b1) * g
        v[k] = b2 * v.get(k, 0.0) + (1 - b2) * g * g
        step = lr * (m[k] / c1) / (np.sqrt(v[k] / c2) + eps)
        if isinstance(params[k], np.ndarray):
            params[k] -= step
        else:
            params[k] = params[k] - step
    state["t"] = t
    return params, state


# ---------------------------------------------------------------- training


class EarlyStopping:
    """Tracks the best epoch; ``update`` returns True when training should stop."""

    def __init__(self, patience, mode="min"):
        self.patience = patience
        self.sign = 1.0 if mode == "min" else -1.0
        self.best = float("inf")
        self.best_epoch = 0

    def update(self, epoch, value):
        if self.sign * value < self.best:
            self.best = self.sign * value
            self.best_epoch = epoch
            return False
        return epoch - self.best_epoch >= self.patience

    @property
    def best_value(self):
        return self.sign * self.best


def _loss_and_grads(module, split, idx, lam, loss_cfg, log_tau, train):
    outs, trace = module.forward(split.X[idx], split.subjects[idx], train=train)
    Zc = outs["clip"]
    Zm = outs.get("mse", Zc)
    Zt_mse = split.Z_mse[idx] if split.Z_mse is not None else split.Z_clip[idx]
    if Zm.shape[1] != Zt_mse.shape[1]:
        raise ValueError(f"MSE head has {Zm.shape[1]} dims, targets have {Zt_mse.shape[1]}")
    loss, g = combined_loss(Zc, Zm, split.Z_clip[idx], Zt_mse, lam, loss_cfg, log_tau)
    return loss, g, outs, trace


def _upstream(module, g):
    if "mse" in module.config.heads:
        return {h: g[h] for h in ("clip", "mse") if h in g}
    return {"clip": sum(g[k] for k in ("clip", "mse") if k in g)}


def _eval_chunks(n, batch, contrastive):
    chunks = [np.arange(i, min(n, i + batch)) for i in range(0, n, batch)]
    if contrastive and len(chunks) > 1 and len(chunks[-1]) < 2:
        # a one-row contrastive batch is degenerate; merge it into the previous one
        chunks[-2:] = [np.concatenate(chunks[-2:])]
    return chunks


def evaluate_split(module, split, lam, loss_cfg, log_tau, batch):
    """Eval-mode loss (batch-size weighted mean over all batches) and image-averaged top-5."""
    n = len(split)
    total, preds = 0.0, []
    for idx in _eval_chunks(n, batch, lam > 0):
        loss, _, outs, _ = _loss_and_grads(module, split, idx, lam, loss_cfg, log_tau, train=False)
        total += loss * len(idx)
        preds.append(outs["clip"])
    rep = evaluate_averaged(np.concatenate(preds), split.image_ids, split.retrieval_set())
    return total / n, rep.top5


def train(model_cfg: BrainModuleConfig, data: TrainData, loss_cfg: ClipLossConfig = ClipLossConfig(),
          train_cfg: TrainConfig = TrainConfig(), seed=0, positions=None, val_metric=None):
    """Train a brain module; returns ``(best_module, report)``.

    ``val_metric(module, epoch) -> float`` overrides the early-stopping metric
    (lower is better); by default it is the validation loss or, with
    ``early_stop='val_top5'``, the validation top-5 (higher is better).
    """
    tr, va = data.train, data.valid
    if len(tr) == 0 or len(va) == 0:
        raise ValueError("empty train or validation split")
    if set(tr.image_ids) & set(va.image_ids):
        raise ValueError("train and validation splits share images")
    if train_cfg.batch > len(tr):
        raise ValueError(f"batch {train_cfg.batch} exceeds the {len(tr)} training rows")
    lam = train_cfg.lam
    t0 = time.perf_counter()
    module = BrainModule.build(model_cfg, seed=seed, positions=positions)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
    log_tau = np.array(0.0 if not loss_cfg.learned_temperature else np.log(1.0))
    params = module.params
    if loss_cfg.learned_temperature:
        params = {**params, "log_tau": log_tau}
    state = {}
    report = TrainReport(seed=int(seed))

    def measure(epoch):
        vl, top5 = evaluate_split(module, va, lam, loss_cfg, float(log_tau), train_cfg.batch)
        report.valid_losses.append(float(vl))
        report.valid_top5.append(float(top5))
        if val_metric is not None:
            return float(val_metric(module, epoch))
        return vl if train_cfg.early_stop == "val_loss" else top5

    mode = "max" if (val_metric is None and train_cfg.early_stop == "val_top5") else "min"
    stopper = EarlyStopping(train_cfg.patience, mode)
    measure(0)
    best = module.copy()
    best_tau = float(log_tau)
    n_batches = len(tr) // train_cfg.batch
    for epoch in range(1, train_cfg.max_epochs + 1):
        perm = rng.permutation(len(tr))
        running = 0.0
        for b in range(n_batches):
            idx = perm[b * train_cfg.batch : (b + 1) * train_cfg.batch]
            loss, g, _, trace = _loss_and_grads(module, tr, idx, lam, loss_cfg, float(log_tau), train=True)
            if not np.isfinite(loss):
                report.diverged = True
                report.stop_epoch = epoch
                report.wall_time = time.perf_counter() - t0
                raise TrainingDiverged(f"non-finite training loss at epoch {epoch}, batch {b}", report)
            grads, _ = module.backward(trace, _upstream(module, g))
            if loss_cfg.learned_temperature:
                grads["log_tau"] = np.asarray(g["log_tau"])
            try:
                adam_step(params, grads, state, train_cfg.lr, train_cfg.betas, train_cfg.eps)
            except FloatingPointError as exc:
                report.diverged = True
                report.stop_epoch = epoch
                raise TrainingDiverged(str(exc), report) from exc
            running += loss
        report.train_losses.append(running / max(n_batches, 1))
        metric = measure(epoch)
        if not np.isfinite(report.valid_losses[-1]):
            report.diverged = True
            report.stop_epoch = epoch
            raise TrainingDiverged(f"non-finite validation loss at epoch {epoch}", report)
        stop = stopper.update(epoch, metric)
        if stopper.best_epoch == epoch:
            best = module.copy()
            best_tau = float(log_tau)
        log.debug("epoch %d train %.5f valid %.5f top5 %.3f", epoch, report.train_losses[-1],
                  report.valid_losses[-1], report.valid_top5[-1])
        report.stop_epoch = epoch
        if stop:
            break
    report.best_epoch = stopper.best_epoch
    report.best_metric = float(stopper.best_value)
    report.final_metrics = {
        "valid_loss": report.valid_losses[report.best_epoch],
        "valid_top5": report.valid_top5[report.best_epoch],
        "log_tau": best_tau,
    }
    report.wall_time = time.perf_counter() - t0
    best.log_tau = best_tau
    return best, report


def predict_latents(module, X, subjects, head="clip", batch_size=256):
    return module.predict(X, subjects, batch_size)[head]


# ---------------------------------------------------------------- sweeps


def lambda_sweep(model_cfg, data, score_fn, grid=DEFAULT_LAMBDAS, loss_cfg=ClipLossConfig(),
                 train_cfg=TrainConfig(), seed=0, positions=None):
    """Train one model per lambda and keep the one with the highest ``score_fn(module)``.

    ``score_fn`` is usually large-test top-5. Ties go to the smaller lambda.
    Returns ``(best_lambda, results)`` with ``results[lam] = (module, report, score)``.
    """
    grid = sorted(float(g) for g in grid)
    if not grid:
        raise ValueError("empty lambda grid")
    results = {}
    for lam in grid:
        cfg = TrainConfig(**{**train_cfg.to_dict(), "lam": lam})
        module, report = train(model_cfg, data, loss_cfg, cfg, seed, positions)
        results[lam] = (module, report, float(score_fn(module)))
    best = max(grid, key=lambda lam: (results[lam][2], -lam))
    return best, results


@dataclass
class GridResult:
    config: dict
    scores: list
    mean: float
    sem: float


def grid_search(space: dict, run_fn, seeds=(0,), splits=(0,), jobs=1):
    """Score every (config, seed, split) cell of a Cartesian ``space``.

    ``run_fn(config, seed, split) -> score`` trains and scores one cell on its
    held-out part (higher is better). Returns configurations ranked by mean
    score, each with its per-cell scores and standard error.
    """
    if not space or any(len(v) == 0 for v in space.values()):
        raise ValueError("empty search space")
    keys = sorted(space)
    configs = [dict(zip(keys, vals)) for vals in itertools.product(*(space[k] for k in keys))]
    cells = [(c, s, sp) for c in configs for s in seeds for sp in splits]
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(jobs) as pool:
            scores = list(pool.map(run_fn, *zip(*cells)))
    else:
        scores = [run_fn(c, s, sp) for c, s, sp in cells]
    per = len(seeds) * len(splits)
    out = []
    for i, c in enumerate(configs):
        v = np.asarray(scores[i * per : (i + 1) * per], dtype=np.float64)
        sem = float(v.std(ddof=1) / np.sqrt(v.size)) if v.size > 1 else 0.0
        out.append(GridResult(c, v.tolist(), float(v.mean()), sem))
    return sorted(out, key=lambda r: -r.mean)
