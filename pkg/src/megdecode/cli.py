"""Command-line entry point: ``megdecode <subcommand> [options]``.

Every subcommand that writes results takes ``--out DIR`` and refuses to reuse a
non-empty directory unless ``--force`` is given. Each run leaves ``run.json`` in
its output directory with the resolved configuration, SHA-256 hashes of its
inputs and the seed.

Exit codes: 0 success, 1 invalid input or usage, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import __version__

log = logging.getLogger("megdecode")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


# ---------------------------------------------------------------- settings


@dataclasses.dataclass(frozen=True)
class PreprocessSettings:
    target_sfreq: float = 120.0
    t_min: float = -0.5
    t_max: float = 1.0
    clip: float = 20.0
    skip_missing: bool = False


@dataclasses.dataclass(frozen=True)
class RidgeSettings:
    alphas: tuple = tuple(float(10.0**k) for k in range(7))
    folds: int = 5
    seed: int = 0
    t_start: float | None = None
    t_end: float | None = None


@dataclasses.dataclass(frozen=True)
class WindowSettings:
    kind: str = "sliding"
    width: float = 0.1
    stride: float = 0.025
    start: float = -0.1
    end_min: float = 0.0
    end_max: float | None = None
    model: str = "ridge"


@dataclasses.dataclass(frozen=True)
class SearchSettings:
    seeds: tuple = (0, 1)
    splits: tuple = (0, 1, 2)
    model: str = "brain"


_SECTION_CLASSES = {
    "synth": ("synth", "SynthConfig"),
    "model": ("brainnet", "BrainModuleConfig"),
    "loss": ("losses", "ClipLossConfig"),
    "train": ("trainer", "TrainConfig"),
}
_LOCAL_SECTIONS = {
    "preprocess": PreprocessSettings,
    "ridge": RidgeSettings,
    "windows": WindowSettings,
    "search": SearchSettings,
}
SECTION_NAMES = tuple(sorted({*_SECTION_CLASSES, *_LOCAL_SECTIONS}))


def section_class(name):
    """Config dataclass of a section; module imports stay lazy to keep startup fast."""
    if name in _LOCAL_SECTIONS:
        return _LOCAL_SECTIONS[name]
    if name not in _SECTION_CLASSES:
        raise UsageError(f"unknown config section [{name}]")
    import importlib

    module, cls = _SECTION_CLASSES[name]
    return getattr(importlib.import_module(f"megdecode.{module}"), cls)


def _field_names(name):
    return {f.name for f in dataclasses.fields(section_class(name))}


def _parse_value(text):
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def load_config(path=None, overrides=()):
    """Read a TOML file and apply ``section.key=value`` overrides; unknown keys are errors."""
    raw = {}
    if path is not None:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    for item in overrides:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise UsageError(f"override {item!r} must look like section.key=value")
        key, value = item.split("=", 1)
        section, name = key.strip().split(".", 1)
        raw.setdefault(section, {})[name] = _parse_value(value.strip())
    return validate_config(raw)


def validate_config(raw):
    for section, values in raw.items():
        if section not in SECTION_NAMES:
            raise UsageError(f"unknown config section [{section}]")
        if not isinstance(values, dict):
            raise UsageError(f"[{section}] must be a table")
        known = _field_names(section)
        unknown = sorted(set(values) - known)
        if unknown:
            raise UsageError(f"unknown key(s) in [{section}]: {', '.join(unknown)}")
    return raw


def build_section(raw, section, **derived):
    """Instantiate a config dataclass: explicit config values win over ``derived`` ones."""
    cls = section_class(section)
    values = {**derived, **raw.get(section, {})}
    fields = {f.name: f for f in dataclasses.fields(cls)}
    for k, v in list(values.items()):
        if isinstance(v, list):
            values[k] = tuple(v)
        if k not in fields:
            raise UsageError(f"unknown key {k!r} for [{section}]")
    try:
        return cls(**values)
    except TypeError as exc:
        raise UsageError(f"[{section}]: {exc}") from None


def _jsonable(obj):
    if dataclasses.is_dataclass(obj):
        return _jsonable(dataclasses.asdict(obj))
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    return obj


# ---------------------------------------------------------------- run bookkeeping


def file_hash(path):
    path = Path(path)
    h = hashlib.sha256()
    files = sorted(p for p in path.rglob("*") if p.is_file()) if path.is_dir() else [path]
    for p in files:
        if path.is_dir():
            h.update(str(p.relative_to(path)).encode())
        with open(p, "rb") as fh:
            for chunk in iter(lambda: fh.read(1 << 20), b""):
                h.update(chunk)
    return h.hexdigest()


def prepare_out(out, force):
    out = Path(out)
    if out.exists() and any(out.iterdir()) and not force:
        raise FileExistsError(f"{out} is not empty; pass --force to overwrite")
    out.mkdir(parents=True, exist_ok=True)
    return out


def write_run_manifest(out, args, config, inputs, seed):
    info = {
        "command": args.command,
        "argv": sys.argv[1:],
        "version": __version__,
        "config": _jsonable(config),
        "inputs": {str(p): file_hash(p) for p in inputs if p is not None and Path(p).exists()},
        "seed": seed,
        "created": time.strftime("%Y-%m-%dT%H:%M:%S"),
    }
    (Path(out) / "run.json").write_text(json.dumps(info, indent=2, sort_keys=True))


def cache_dir():
    """Directory for intermediate artifacts (``MEGDECODE_CACHE``), or None if unset."""
    root = os.environ.get("MEGDECODE_CACHE")
    if not root:
        return None
    path = Path(root)
    path.mkdir(parents=True, exist_ok=True)
    return path


def write_tsv(path, rows, columns=None):
    rows = list(rows)
    if columns is None:
        columns = list(rows[0]) if rows else []
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r.get(c, "")) for c in columns])


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return str(v)


def emit_figure_data(rows, kind, path, id_columns=None):
    """Write a tidy long-format TSV: id columns, then ``metric`` and ``value``, one row per metric.

    Rows are sorted by metric, then by the id columns.
    """
    defaults = {
        "window_sweep": ["latent", "kind", "t_start", "t_mid", "t_end"],
        "curves": ["seed", "epoch"],
        "retrieval": ["set", "image_id"],
        "generation": ["image_id"],
        "lambda_sweep": ["lam"],
        "grid_search": ["config"],
    }
    if id_columns is None:
        if kind not in defaults:
            raise ValueError(f"unknown figure-data kind {kind!r}")
        id_columns = defaults[kind]
    rows = list(rows)
    if not rows:
        raise ValueError(f"empty {kind} report")
    metrics = sorted({k for r in rows for k in r} - set(id_columns))
    long = []
    for i, r in enumerate(rows):
        missing = [c for c in id_columns if c not in r] + [m for m in metrics if m not in r]
        if missing:
            raise ValueError(f"incomplete {kind} report: row {i} lacks {missing}")
        for m in metrics:
            long.append({**{c: r[c] for c in id_columns}, "metric": m, "value": r[m]})
    long.sort(key=lambda d: (d["metric"], *[_sort_key(d[c]) for c in id_columns]))
    write_tsv(path, long, list(id_columns) + ["metric", "value"])
    return long


def _sort_key(v):
    return (0, v, "") if isinstance(v, (int, float)) else (1, 0, str(v))


# ---------------------------------------------------------------- data directories


@dataclasses.dataclass
class DataDir:
    path: Path
    epochs: np.ndarray
    records: list
    layout: object
    meta: dict
    directives: dict

    @property
    def t_min(self):
        return float(self.meta["t_min"])

    @property
    def sfreq(self):
        return float(self.meta["sfreq"])

    def part(self, tag):
        idx = [i for i, r in enumerate(self.records) if r.split_tag == tag]
        return np.asarray(idx, dtype=np.int64)

    @property
    def n_subjects(self):
        return int(self.directives.get("n_subjects", max(r.subject_id for r in self.records) + 1))


def write_data_dir(path, epochs, records, layout, meta, directives=None):
    from .datastore import save_array, write_layout, write_manifest

    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    save_array(path / "epochs.megt", epochs)
    write_manifest(path / "records.tsv", records, directives)
    if layout is not None:
        write_layout(path / "layout.tsv", layout)
    (path / "meta.json").write_text(json.dumps(_jsonable(meta), indent=2, sort_keys=True))


def load_data_dir(path, records_path=None):
    from .datastore import FormatError, parse_manifest, read_layout, read_tensor

    path = Path(path)
    for name in ("epochs.megt", "records.tsv", "meta.json"):
        if not (path / name).exists():
            raise FileNotFoundError(f"{path / name} missing; not a data directory")
    epochs = read_tensor(path / "epochs.megt")
    man = parse_manifest(Path(path / "records.tsv").read_text())
    if records_path is not None:
        # re-tagged records (from make-splits) aligned by presentation key
        new = {r.key: r for r in parse_manifest(Path(records_path).read_text()).records}
        missing = [r.key for r in man.records if r.key not in new]
        if missing:
            raise FormatError(f"{records_path} lacks presentations such as {missing[0]}")
        man.records = [new[r.key] for r in man.records]
    if epochs.ndim != 3 or epochs.shape[0] != len(man.records):
        raise FormatError(f"epochs shape {epochs.shape} does not match {len(man.records)} records")
    layout = read_layout(path / "layout.tsv") if (path / "layout.tsv").exists() else None
    meta = json.loads((path / "meta.json").read_text())
    return DataDir(path, epochs, man.records, layout, meta, man.directives)


def _load_bank(path, data=None):
    from .datastore import load_latent_bank

    if path is None:
        if data is None:
            raise UsageError("--latents is required")
        path = data.path / "latents.megt"
    bank = load_latent_bank(path)
    if data is not None:
        train_ids = sorted({data.records[i].image_id for i in data.part("train")})
        if len(train_ids) >= 2:
            bank = bank.with_train_ids(train_ids)
    return bank


def _scaled_parts(data, tags, scaler=None, window=None):
    """Baseline-correct and robust-scale the requested parts (scaler fitted on train)."""
    from . import preprocess

    X = {t: np.asarray(data.epochs[data.part(t)], dtype=np.float64) for t in tags}
    X = {t: preprocess.baseline_correct_array(v, data.t_min, data.sfreq) for t, v in X.items()}
    if scaler is None:
        if len(data.part("train")) == 0:
            raise ValueError("data directory has no training records")
        train = X["train"] if "train" in X else preprocess.baseline_correct_array(
            np.asarray(data.epochs[data.part("train")], dtype=np.float64), data.t_min, data.sfreq)
        scaler = preprocess.fit_robust_scaler(train)
    X = {t: preprocess.apply_scaler_clip(v, scaler) for t, v in X.items()}
    if window is not None:
        X = {t: window.crop(v, data.t_min, data.sfreq) for t, v in X.items()}
    return X, scaler


def _split_for(data, tag, X, bank, bank_mse=None):
    from .trainer import make_split

    return make_split(X, [data.records[i] for i in data.part(tag)], bank, bank_mse)


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(out, kind, arrays, meta, scaler):
    from .datastore import save_bundle

    arrays = dict(arrays)
    arrays["scaler.center"] = scaler.center
    arrays["scaler.scale"] = scaler.scale
    save_bundle(out, arrays, {"kind": kind, "clip": scaler.clip, **meta})


def load_checkpoint(path):
    """Return ``(kind, model, scaler, meta)`` for a brain or ridge checkpoint directory."""
    from .baselines import RidgeModel
    from .brainnet import BrainModule, BrainModuleConfig
    from .datastore import load_bundle
    from .preprocess import RobustScalerParams

    arrays, meta = load_bundle(path)
    arrays = {k: np.asarray(v, dtype=np.float64) for k, v in arrays.items()}
    scaler = RobustScalerParams(arrays.pop("scaler.center"), arrays.pop("scaler.scale"), meta["clip"])
    if meta["kind"] == "brain":
        model = BrainModule.from_state(BrainModuleConfig.from_dict(meta["config"]), arrays)
    elif meta["kind"] == "ridge":
        model = RidgeModel(arrays["weights"], arrays["bias"], meta["alpha"], arrays["x_mean"], arrays["x_scale"])
    else:
        raise ValueError(f"unknown checkpoint kind {meta['kind']!r}")
    return meta["kind"], model, scaler, meta


def _checkpoint_dirs(path):
    path = Path(path)
    if (path / "meta.json").exists():
        return [path]
    subs = sorted(p for p in path.glob("seed_*") if (p / "meta.json").exists())
    if not subs:
        raise FileNotFoundError(f"no checkpoint in {path}")
    return subs


def _window_from_meta(meta):
    from .windows import WindowSpec

    w = meta.get("window")
    return None if w is None else WindowSpec(w[0], w[1], w[2])


def _predict(kind, model, X, subjects):
    if kind == "brain":
        return model.predict(X, subjects)["clip"]
    return model.predict(X)


# ---------------------------------------------------------------- retrieval helpers


def _retrieval_sets(data, bank, augment_unseen=False):
    from .retrieval import RetrievalSet

    sets = {}
    for tag in ("small_test", "large_test"):
        ids = sorted({data.records[i].image_id for i in data.part(tag)})
        if not ids:
            continue
        rset = RetrievalSet.from_bank(bank, ids)
        if augment_unseen:
            fit = {r.image_id for r in data.records}
            extra = [i for i in bank.ids if i not in fit]
            if extra:
                rset = rset.augment(bank.get(extra), extra)
        sets[tag] = rset
    return sets


def evaluate_model(kind, model, scaler, meta, data, bank, augment_unseen=False):
    """Small test: repetitions averaged per image. Large test: one query per presentation."""
    from .retrieval import evaluate, evaluate_averaged

    sets = _retrieval_sets(data, bank, augment_unseen)
    if not sets:
        raise ValueError("data directory has no test records")
    X, _ = _scaled_parts(data, list(sets), scaler, _window_from_meta(meta))
    reports = {}
    for tag, rset in sets.items():
        idx = data.part(tag)
        subj = np.array([data.records[i].subject_id for i in idx])
        ids = [data.records[i].image_id for i in idx]
        pred = _predict(kind, model, X[tag], subj)
        if tag == "small_test":
            reports[tag] = evaluate_averaged(pred, ids, rset, ks=(1, 5))
        else:
            reports[tag] = evaluate(pred, ids, rset, ks=(1, 5))
    return reports


def _summary(reports):
    out = {}
    for tag, rep in reports.items():
        out[tag] = {
            "n_queries": len(rep.query_ids),
            "set_size": rep.set_size,
            "top1": rep.topk[1],
            "top5": rep.topk[5],
            "top5_sem": rep.topk_sem[5],
            "median_relative_rank": rep.median_relative_rank,
            "relative_rank_sem": rep.relative_rank_sem,
        }
    return out


# ---------------------------------------------------------------- commands


def cmd_model_summarize(args, raw):
    from .brainnet import count_params, summary_table

    cfg = build_section(raw, "model")
    print(summary_table(cfg))
    if args.out:
        out = prepare_out(args.out, args.force)
        rows = [{"layer": r[0], "params": r[1]} if isinstance(r, tuple) else r for r in count_params(cfg)]
        write_tsv(out / "params.tsv", rows)
        write_run_manifest(out, args, {"model": cfg}, [args.config], None)
    return EXIT_OK


def cmd_synth_gen(args, raw):
    from .synth import generate

    derived = {}
    if args.snr is not None:
        derived["snr"] = args.snr
    if args.seed is not None:
        derived["seed"] = args.seed
    cfg = build_section({"synth": {**raw.get("synth", {}), **derived}}, "synth")
    out = prepare_out(args.out, args.force)
    ds = generate(cfg)
    tags = {r.key: r.split_tag for r in ds.manifest.records()}
    records = [r.with_split(tags[r.key]) for r in ds.records]
    directives = {"n_subjects": cfg.subjects, "small_test_repetitions": cfg.reps_per_test_image}
    meta = {"t_min": cfg.t_min, "t_max": cfg.t_max, "sfreq": cfg.sfreq, "source": "synth", "synth": cfg}
    write_data_dir(out, ds.epochs, records, ds.layout, meta, directives)
    ds.bank.save(out / "latents.megt")
    (out / "test_ids.txt").write_text("\n".join(ds.original_test_ids) + "\n")
    write_run_manifest(out, args, {"synth": cfg}, [args.config], cfg.seed)
    print(f"wrote {len(records)} epochs of shape {ds.epochs.shape[1:]} to {out}")
    return EXIT_OK


def cmd_preprocess(args, raw):
    from .datastore import parse_manifest, read_layout, read_tensor
    from .preprocess import ContinuousRecording, epoch, downsample, baseline_correct

    cfg = build_section(raw, "preprocess")
    data = read_tensor(args.raw)
    if data.ndim != 2:
        raise ValueError(f"raw recording must be (channels, samples), got {data.shape}")
    man = parse_manifest(Path(args.events).read_text())
    if "onset_sample" not in man.extra_columns:
        raise ValueError("events file needs an onset_sample column")
    onsets = [int(dict(r.extra)["onset_sample"]) for r in man.records]
    rec = ContinuousRecording(np.asarray(data, dtype=np.float64), args.sfreq, np.asarray(onsets))
    if cfg.target_sfreq < rec.sfreq:
        rec = downsample(rec, cfg.target_sfreq)
    eps = epoch(rec, cfg.t_min, cfg.t_max, skip_missing=cfg.skip_missing)
    records = man.records
    if cfg.skip_missing:
        eps, missing = eps
        drop = set(missing)
        records = [r for k, r in enumerate(records) if k not in drop]
        if missing:
            log.warning("skipped %d onsets too close to the recording edge", len(missing))
    eps = [baseline_correct(e) for e in eps]
    X = np.stack([e.data for e in eps]) if eps else np.zeros((0, data.shape[0], 0))
    records = [dataclasses.replace(r, extra=tuple(kv for kv in r.extra if kv[0] != "onset_sample")) for r in records]
    out = prepare_out(args.out, args.force)
    layout = read_layout(args.layout) if args.layout else None
    meta = {"t_min": cfg.t_min, "t_max": cfg.t_max, "sfreq": rec.sfreq, "source": str(args.raw)}
    write_data_dir(out, X, records, layout, meta, man.directives)
    write_run_manifest(out, args, {"preprocess": cfg}, [args.raw, args.events, args.layout], None)
    print(f"wrote {len(records)} epochs to {out}")
    return EXIT_OK


def cmd_make_splits(args, raw):
    from .datastore import parse_manifest, write_manifest
    from .splits import build_adapted_split, build_hpsearch_split

    man = parse_manifest(Path(args.records).read_text())
    out = prepare_out(args.out, args.force)
    seed = args.seed if args.seed is not None else 0
    if args.mode == "adapted":
        if not args.test_ids:
            raise UsageError("--test-ids is required for adapted splits")
        test_ids = [ln.strip() for ln in Path(args.test_ids).read_text().splitlines() if ln.strip()]
        sm = build_adapted_split(man.records, test_ids, args.valid_fraction, seed)
        tags = {r.key: r.split_tag for r in sm.records()}
    else:
        parts = build_hpsearch_split(man.records, seed)
        tags = {r.key: tag for tag, part in zip(("train", "valid", "small_test"), parts) for r in part}
    records = [r.with_split(tags[r.key]) for r in man.records if r.key in tags]
    directives = {k: v for k, v in man.directives.items() if not k.endswith("_repetitions")}
    write_manifest(out / "records.tsv", records, directives)
    counts = {}
    for r in records:
        counts[r.split_tag] = counts.get(r.split_tag, 0) + 1
    (out / "splits.json").write_text(json.dumps(counts, indent=2, sort_keys=True))
    write_run_manifest(out, args, {"mode": args.mode, "valid_fraction": args.valid_fraction},
                       [args.records, args.test_ids], seed)
    print(json.dumps(counts, sort_keys=True))
    return EXIT_OK


def _feature_for(image_path, feature, cache):
    from . import embeddings

    if cache is not None:
        key = hashlib.sha256(Path(image_path).read_bytes() + feature.encode()).hexdigest()
        hit = cache / f"{key}.npy"
        if hit.exists():
            return np.load(hit)
    v = np.asarray(embeddings.extract(feature, embeddings.read_image(image_path)), dtype=np.float64)
    if cache is not None:
        np.save(hit, v)
    return v


def _feature_job(job):
    return _feature_for(*job)


def cmd_extract_features(args, raw):
    from . import embeddings
    from .datastore import LatentBank

    paths = embeddings.list_images(args.images)
    if not paths:
        raise ValueError(f"no images in {args.images}")
    features = args.feature or ["colorhist", "lbp", "hog"]
    unknown = [f for f in features if f not in embeddings.FEATURES]
    if unknown:
        raise UsageError(f"unknown feature(s) {unknown}; choose from {sorted(embeddings.FEATURES)}")
    out = prepare_out(args.out, args.force)
    cache = cache_dir()
    for feat in features:
        jobs = [(p, feat, cache) for p in paths]
        if args.jobs > 1:
            from concurrent.futures import ProcessPoolExecutor

            with ProcessPoolExecutor(args.jobs) as pool:
                vecs = list(pool.map(_feature_job, jobs))
        else:
            vecs = [_feature_job(j) for j in jobs]
        LatentBank(feat, [p.stem for p in paths], np.stack(vecs)).save(out / f"{feat}.megt")
    write_run_manifest(out, args, {"features": features}, [args.images], None)
    print(f"extracted {', '.join(features)} for {len(paths)} images")
    return EXIT_OK


def _model_cfg(raw, data, bank, bank_mse=None, window=None):
    T = data.epochs.shape[2] if window is None else window.crop(data.epochs[:1], data.t_min, data.sfreq).shape[2]
    derived = {"C_in": data.epochs.shape[1], "T": T, "n_subjects": data.n_subjects, "F_out": bank.F}
    if bank_mse is not None:
        derived["F_out_mse"] = bank_mse.F
        derived["head_layout"] = "clip_and_mse"
    return build_section(raw, "model", **derived)


def _train_one(raw, data, bank, bank_mse, seed, train_cfg, window=None, parts=None):
    from .trainer import TrainData, train

    X, scaler = parts if parts is not None else _scaled_parts(data, ["train", "valid"], window=window)
    model_cfg = _model_cfg(raw, data, bank, bank_mse, window)
    loss_cfg = build_section(raw, "loss")
    td = TrainData(_split_for(data, "train", X["train"], bank, bank_mse),
                   _split_for(data, "valid", X["valid"], bank, bank_mse))
    positions = data.layout.positions if data.layout is not None else None
    module, report = train(model_cfg, td, loss_cfg, train_cfg, seed, positions)
    return module, report, scaler


def _save_brain(out, module, report, scaler, window=None):
    meta = {"config": module.config.to_dict(), "log_tau": getattr(module, "log_tau", 0.0),
            "window": None if window is None else [window.t_start, window.t_end, window.kind]}
    save_checkpoint(out, "brain", module.state_arrays(), meta, scaler)
    (Path(out) / "report.json").write_text(json.dumps(_jsonable(report.to_dict()), indent=2, sort_keys=True))


def _curve_rows(report):
    rows = []
    for e, vl in enumerate(report.valid_losses):
        rows.append({"seed": report.seed, "epoch": e, "valid_loss": vl, "valid_top5": report.valid_top5[e],
                     "train_loss": report.train_losses[e - 1] if e > 0 else float("nan")})
    return rows


def cmd_train(args, raw):
    data = load_data_dir(args.data, args.records)
    bank = _load_bank(args.latents, data)
    bank_mse = _load_bank(args.latents_mse, data) if args.latents_mse else None
    train_cfg = build_section(raw, "train")
    seeds = [args.seed] if args.seed is not None else list(train_cfg.seeds)
    out = prepare_out(args.out, args.force)
    parts = _scaled_parts(data, ["train", "valid"])
    curves = []
    for seed in seeds:
        module, report, scaler = _train_one(raw, data, bank, bank_mse, seed, train_cfg, parts=parts)
        target = out if len(seeds) == 1 else out / f"seed_{seed}"
        _save_brain(target, module, report, scaler)
        curves += _curve_rows(report)
        print(f"seed {seed}: best epoch {report.best_epoch}, stopped at {report.stop_epoch}, "
              f"valid top-5 {report.final_metrics['valid_top5']:.3f}")
    emit_figure_data(curves, "curves", out / "curves.tsv")
    resolved = {"model": _model_cfg(raw, data, bank, bank_mse), "loss": build_section(raw, "loss"), "train": train_cfg}
    write_run_manifest(out, args, resolved, [args.data, args.records, args.latents or data.path / "latents.megt",
                                             args.latents_mse, args.config], seeds)
    return EXIT_OK


def cmd_eval_retrieval(args, raw):
    data = load_data_dir(args.data, args.records)
    bank = _load_bank(args.latents, data)
    out = prepare_out(args.out, args.force)
    summaries, rows = [], []
    for ck in _checkpoint_dirs(args.ckpt):
        kind, model, scaler, meta = load_checkpoint(ck)
        reports = evaluate_model(kind, model, scaler, meta, data, bank, args.augment_unseen)
        summaries.append(_summary(reports))
        for tag, rep in reports.items():
            for r in rep.rows():
                rows.append({"checkpoint": ck.name, "set": tag, **r})
    combined = {"checkpoints": summaries}
    if len(summaries) > 1:
        for tag in summaries[0]:
            v = np.array([s[tag]["top5"] for s in summaries])
            combined[f"{tag}_top5_mean"] = float(v.mean())
            combined[f"{tag}_top5_sem"] = float(v.std(ddof=1) / np.sqrt(v.size))
    write_tsv(out / "retrieval.tsv", rows)
    (out / "summary.json").write_text(json.dumps(combined, indent=2, sort_keys=True))
    write_run_manifest(out, args, {"augment_unseen": args.augment_unseen},
                       [args.ckpt, args.data, args.records, args.latents or data.path / "latents.megt"], None)
    for s in summaries:
        print(json.dumps(s, sort_keys=True))
    return EXIT_OK


def cmd_baseline_ridge(args, raw):
    from .baselines import ridge_cv
    from .windows import WindowSpec

    data = load_data_dir(args.data, args.records)
    bank = _load_bank(args.latents, data)
    cfg = build_section(raw, "ridge")
    window = None
    if cfg.t_start is not None or cfg.t_end is not None:
        t_max = data.t_min + (data.epochs.shape[2] - 1) / data.sfreq
        window = WindowSpec(cfg.t_start if cfg.t_start is not None else data.t_min,
                            cfg.t_end if cfg.t_end is not None else t_max, "full")
    out = prepare_out(args.out, args.force)
    X, scaler = _scaled_parts(data, ["train"], window=window)
    recs = [data.records[i] for i in data.part("train")]
    ids = [r.image_id for r in recs]
    alpha, model, scores = ridge_cv(X["train"], bank.get(ids), cfg.alphas, cfg.folds, cfg.seed, groups=ids)
    meta = {"alpha": alpha, "cv_scores": scores.tolist(), "alphas": list(cfg.alphas),
            "window": None if window is None else [window.t_start, window.t_end, window.kind]}
    arrays = {"weights": model.weights, "bias": model.bias, "x_mean": model.x_mean, "x_scale": model.x_scale}
    ckpt = out / "ckpt"
    save_checkpoint(ckpt, "ridge", arrays, meta, scaler)
    summary = {"alpha": alpha}
    if len(data.part("small_test")) or len(data.part("large_test")):
        summary.update(_summary(evaluate_model("ridge", model, scaler, meta, data, bank)))
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    write_run_manifest(out, args, {"ridge": cfg}, [args.data, args.records, args.latents or data.path / "latents.megt"],
                       cfg.seed)
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def cmd_lambda_sweep(args, raw):
    from .retrieval import evaluate
    from .trainer import TrainData, lambda_sweep

    data = load_data_dir(args.data, args.records)
    bank = _load_bank(args.latents, data)
    bank_mse = _load_bank(args.latents_mse, data) if args.latents_mse else bank
    train_cfg = build_section(raw, "train")
    seed = args.seed if args.seed is not None else train_cfg.seeds[0]
    out = prepare_out(args.out, args.force)
    X, scaler = _scaled_parts(data, ["train", "valid", "large_test"])
    model_cfg = _model_cfg(raw, data, bank, bank_mse)
    td = TrainData(_split_for(data, "train", X["train"], bank, bank_mse),
                   _split_for(data, "valid", X["valid"], bank, bank_mse))
    large = _split_for(data, "large_test", X["large_test"], bank)
    if len(large) == 0:
        raise ValueError("lambda sweep needs large_test records")
    rset = large.retrieval_set()

    def score(module):
        return evaluate(module.predict(large.X, large.subjects)["clip"], large.image_ids, rset).top5

    positions = data.layout.positions if data.layout is not None else None
    best, results = lambda_sweep(model_cfg, td, score, train_cfg.lambdas, build_section(raw, "loss"),
                                 train_cfg, seed, positions)
    rows = [{"lam": lam, "large_test_top5": results[lam][2], "best_epoch": results[lam][1].best_epoch,
             "selected": int(lam == best)} for lam in sorted(results)]
    emit_figure_data(rows, "lambda_sweep", out / "lambda_sweep.tsv")
    _save_brain(out / "best", results[best][0], results[best][1], scaler)
    write_run_manifest(out, args, {"model": model_cfg, "train": train_cfg}, [args.data, args.latents, args.latents_mse], seed)
    print(f"best lambda {best} (large-test top-5 {results[best][2]:.3f})")
    return EXIT_OK


def _grid_cell(raw, data_path, records_path, latents, model_kind, config, seed, split):
    """Train on the 60% part of an image-grouped split and return top-5 on its 20% test part."""
    from .baselines import ridge_cv
    from .retrieval import RetrievalSet, evaluate_averaged
    from .splits import build_hpsearch_split

    data = load_data_dir(data_path, records_path)
    fit = [i for i, r in enumerate(data.records) if r.split_tag in ("train", "valid")]
    tr, va, te = build_hpsearch_split([data.records[i] for i in fit], split)
    tags = {r.key: t for t, part in zip(("train", "valid", "small_test"), (tr, va, te)) for r in part}
    data.records = [r.with_split(tags.get(r.key, "unseen_pool")) for r in data.records]
    bank = _load_bank(latents, data)
    cell = {s: dict(v) for s, v in raw.items()}
    for key, value in config.items():
        section, name = key.split(".", 1)
        cell.setdefault(section, {})[name] = value
    X, _ = _scaled_parts(data, ["train", "valid", "small_test"])
    test = _split_for(data, "small_test", X["small_test"], bank)
    rset = RetrievalSet.from_bank(bank, sorted(set(test.image_ids)))
    if model_kind == "ridge":
        rcfg = build_section(cell, "ridge")
        ids = [data.records[i].image_id for i in data.part("train")]
        _, model, _ = ridge_cv(X["train"], bank.get(ids), rcfg.alphas, rcfg.folds, seed, groups=ids)
        pred = model.predict(test.X)
    else:
        module, _, _ = _train_one(cell, data, bank, None, seed, build_section(cell, "train"),
                                  parts=(X, None))
        pred = module.predict(test.X, test.subjects)["clip"]
    return evaluate_averaged(pred, test.image_ids, rset).top5


class _GridRunner:
    def __init__(self, *fixed):
        self.fixed = fixed

    def __call__(self, config, seed, split):
        return _grid_cell(*self.fixed, config, seed, split)


def cmd_grid_search(args, raw):
    from .trainer import grid_search

    with open(args.space, "rb") as fh:
        space_file = tomllib.load(fh)
    space = space_file.get("space", {})
    if not space:
        raise UsageError(f"{args.space} has no [space] table")
    for key, values in space.items():
        if "." not in key:
            raise UsageError(f"space key {key!r} must be section.key")
        section, name = key.split(".", 1)
        if section not in SECTION_NAMES or name not in _field_names(section):
            raise UsageError(f"unknown space key {key!r}")
        if not isinstance(values, list) or not values:
            raise UsageError(f"space key {key!r} needs a non-empty list")
    raw = validate_config({**raw, **{k: v for k, v in space_file.items() if k != "space"}})
    search = build_section(raw, "search")
    out = prepare_out(args.out, args.force)
    runner = _GridRunner(raw, str(args.data), args.records, args.latents, search.model)
    results = grid_search(space, runner, search.seeds, search.splits, jobs=args.jobs)
    rows = [{"rank": i + 1, "config": json.dumps(r.config, sort_keys=True), "mean_top5": r.mean,
             "sem_top5": r.sem, "n_cells": len(r.scores)} for i, r in enumerate(results)]
    write_tsv(out / "grid_search.tsv", rows)
    write_run_manifest(out, args, {"space": space, "search": search}, [args.data, args.space, args.latents], None)
    for r in rows:
        print(f"{r['rank']}\t{r['mean_top5']:.3f} +- {r['sem_top5']:.3f}\t{r['config']}")
    return EXIT_OK


def _window_specs(cfg, data):
    from .windows import enumerate_growing, enumerate_sliding

    t_max = data.t_min + (data.epochs.shape[2] - 1) / data.sfreq
    if cfg.kind == "sliding":
        return enumerate_sliding((data.t_min, t_max), cfg.width, cfg.stride)
    if cfg.kind == "growing":
        return enumerate_growing(cfg.start, cfg.end_min, cfg.end_max if cfg.end_max is not None else t_max, cfg.stride)
    raise UsageError(f"unknown window kind {cfg.kind!r}")


def _window_cell(raw, data, bank, wcfg, spec, seed):
    from .baselines import ridge_cv
    from .retrieval import evaluate_averaged

    X, scaler = _scaled_parts(data, ["train", "valid", "small_test"], window=spec)
    test = _split_for(data, "small_test", X["small_test"], bank)
    rset = _retrieval_sets(data, bank)["small_test"]
    if wcfg.model == "ridge":
        rcfg = build_section(raw, "ridge")
        ids = [data.records[i].image_id for i in data.part("train")]
        _, model, _ = ridge_cv(X["train"], bank.get(ids), rcfg.alphas, rcfg.folds, rcfg.seed, groups=ids)
        pred, agg = model.predict(test.X), None
    else:
        module, _, _ = _train_one(raw, data, bank, None, seed, build_section(raw, "train"), spec, parts=(X, scaler))
        pred = module.predict(test.X, test.subjects)["clip"]
        agg = module.params.get("aggregation.weight")
    rep = evaluate_averaged(pred, test.image_ids, rset)
    return {"top5": rep.top5, "median_relative_rank": rep.median_relative_rank}, agg


def cmd_window_sweep(args, raw):
    data = load_data_dir(args.data, args.records)
    wcfg = build_section(raw, "windows", **({"kind": args.kind} if args.kind else {}))
    if wcfg.model not in ("ridge", "brain"):
        raise UsageError("windows.model must be 'ridge' or 'brain'")
    latents = args.latents.split(",") if args.latents else [None]
    specs = _window_specs(wcfg, data)
    out = prepare_out(args.out, args.force)
    seed = args.seed if args.seed is not None else 0
    rows, agg_rows = [], []
    for lat in latents:
        bank = _load_bank(lat, data)
        for spec in specs:
            metrics, agg = _window_cell(raw, data, bank, wcfg, spec, seed)
            rows.append({"latent": bank.name, "kind": spec.kind, "t_start": spec.t_start, "t_mid": spec.midpoint,
                         "t_end": spec.t_end, **metrics})
            if agg is not None:
                agg_rows.append({"latent": bank.name, "t_end": spec.t_end, "weights": json.dumps(np.abs(agg).tolist())})
            log.info("window [%.3f, %.3f] top5 %.3f", spec.t_start, spec.t_end, metrics["top5"])
    emit_figure_data(rows, "window_sweep", out / "window_sweep.tsv")
    if agg_rows:
        write_tsv(out / "agg_weights.tsv", agg_rows)
    write_run_manifest(out, args, {"windows": wcfg, "ridge": build_section(raw, "ridge")},
                       [args.data, args.records, *[p for p in latents if p]], seed)
    print(f"{len(specs)} windows x {len(latents)} latent(s) written to {out / 'window_sweep.tsv'}")
    return EXIT_OK


def cmd_eval_generation(args, raw):
    from .genmetrics import evaluate_generation, load_image_dir, parse_providers, select_examples

    t_ids, trues = load_image_dir(args.trues)
    g_ids, gens = load_image_dir(args.gens)
    if t_ids != g_ids:
        raise ValueError("seen and generated image directories must contain the same file stems")
    providers = parse_providers(args.providers, args.trues, args.gens) if args.providers else []
    dist = None
    if args.distance_provider:
        found = parse_providers(args.distance_provider, args.trues, args.gens)
        dist = found[0]
    keys = ([("true", i) for i in t_ids], [("gen", i) for i in g_ids])
    rep = evaluate_generation(trues, gens, providers, dist, keys)
    out = prepare_out(args.out, args.force)
    rows = [{"image_id": i, "pixcorr": float(p), "ssim": float(s),
             **({} if rep.distance is None else {f"distance_{rep.distance_provider}": float(rep.distance[k])})}
            for k, (i, p, s) in enumerate(zip(t_ids, rep.pixcorr, rep.ssim))]
    emit_figure_data(rows, "generation", out / "generation.tsv")
    summary = rep.summary()
    if len(t_ids) >= 15:
        sel = select_examples(rep.selection_scores())
        summary["selection"] = {k: [t_ids[i] for i in v] for k, v in sel.items()}
    (out / "summary.json").write_text(json.dumps(_jsonable(summary), indent=2, sort_keys=True))
    write_run_manifest(out, args, {"providers": args.providers, "distance_provider": args.distance_provider},
                       [args.trues, args.gens], None)
    print(json.dumps({k: v for k, v in summary.items() if k != "selection"}, sort_keys=True))
    return EXIT_OK


def cmd_inspect(args, raw):
    from .datastore import load_bundle, parse_manifest, read_header, read_tensor

    path = Path(args.path)
    if path.is_dir():
        if (path / "records.tsv").exists() and (path / "epochs.megt").exists():
            data = load_data_dir(path)
            counts = {}
            for r in data.records:
                counts[r.split_tag] = counts.get(r.split_tag, 0) + 1
            info = {"kind": "data", "epochs": list(data.epochs.shape), "splits": counts, "meta": data.meta}
        elif (path / "meta.json").exists():
            arrays, meta = load_bundle(path)
            info = {"kind": "bundle", "meta": meta, "arrays": {k: list(v.shape) for k, v in arrays.items()}}
        else:
            raise ValueError(f"{path} is neither a data directory nor a bundle")
    elif path.suffix == ".megt":
        header = read_header(path)
        arr = read_tensor(path)
        info = {"kind": "tensor", "header": _jsonable(header), "min": float(arr.min()) if arr.size else None,
                "max": float(arr.max()) if arr.size else None, "mean": float(arr.mean()) if arr.size else None}
    elif path.suffix == ".tsv":
        man = parse_manifest(path.read_text())
        counts = {}
        for r in man.records:
            counts[r.split_tag] = counts.get(r.split_tag, 0) + 1
        info = {"kind": "manifest", "records": len(man.records), "splits": counts, "directives": man.directives,
                "images": len({r.image_id for r in man.records}), "subjects": len({r.subject_id for r in man.records})}
    else:
        raise ValueError(f"cannot inspect {path}")
    print(json.dumps(_jsonable(info), indent=2, sort_keys=True))
    return EXIT_OK


def cmd_convert(args, raw):
    from .datastore import read_tensor, save_array

    src, dst = Path(args.src), Path(args.dst)
    if dst.exists() and not args.force:
        raise FileExistsError(f"{dst} exists; pass --force to overwrite")
    if src.suffix == ".npy" and dst.suffix == ".megt":
        save_array(dst, np.load(src))
    elif src.suffix == ".megt" and dst.suffix == ".npy":
        np.save(dst, read_tensor(src))
    elif src.suffix == ".megt" and dst.suffix == ".tsv":
        arr = read_tensor(src)
        if arr.ndim > 2:
            raise ValueError("only 1-D or 2-D tensors convert to TSV")
        np.savetxt(dst, np.atleast_2d(arr), delimiter="\t", fmt="%.9g")
    elif src.suffix == ".tsv" and dst.suffix == ".megt":
        save_array(dst, np.loadtxt(src, delimiter="\t", ndmin=2))
    else:
        raise UsageError(f"unsupported conversion {src.suffix} -> {dst.suffix}")
    print(f"{src} -> {dst}")
    return EXIT_OK


# ---------------------------------------------------------------- parser


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


COMMANDS = {
    "preprocess": cmd_preprocess,
    "make-splits": cmd_make_splits,
    "extract-features": cmd_extract_features,
    "synth-gen": cmd_synth_gen,
    "train": cmd_train,
    "grid-search": cmd_grid_search,
    "lambda-sweep": cmd_lambda_sweep,
    "eval-retrieval": cmd_eval_retrieval,
    "eval-generation": cmd_eval_generation,
    "window-sweep": cmd_window_sweep,
    "baseline-ridge": cmd_baseline_ridge,
    "model-summarize": cmd_model_summarize,
    "inspect": cmd_inspect,
    "convert": cmd_convert,
}


def build_parser():
    p = _Parser(prog="megdecode", description="Decode image latents from MEG epochs.")
    p.add_argument("--version", action="version", version=f"megdecode {__version__}")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def add(name, help_, out=True, data=False):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", type=Path, help="TOML config file")
        sp.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE", help="config override")
        sp.add_argument("--force", action="store_true", help="overwrite existing outputs")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--jobs", type=int, default=1)
        sp.add_argument("-v", "--verbose", action="store_true")
        if out:
            sp.add_argument("--out", type=Path, required=True)
        if data:
            sp.add_argument("--data", type=Path, required=True, help="data directory")
            sp.add_argument("--records", type=Path, help="re-tagged records.tsv (from make-splits)")
            sp.add_argument("--latents", help="latent bank (.megt); default DATA/latents.megt")
        return sp

    sp = add("preprocess", "downsample, epoch and baseline-correct a raw recording")
    sp.add_argument("--raw", type=Path, required=True, help="(channels, samples) .megt")
    sp.add_argument("--sfreq", type=float, required=True)
    sp.add_argument("--events", type=Path, required=True, help="manifest TSV with an onset_sample column")
    sp.add_argument("--layout", type=Path)

    sp = add("make-splits", "assign split tags to a manifest")
    sp.add_argument("--records", type=Path, required=True)
    sp.add_argument("--test-ids", type=Path)
    sp.add_argument("--mode", choices=["adapted", "hpsearch"], default="adapted")
    sp.add_argument("--valid-fraction", type=float, default=0.2)

    sp = add("extract-features", "engineered image features into latent banks")
    sp.add_argument("--images", type=Path, required=True)
    sp.add_argument("--feature", action="append")

    sp = add("synth-gen", "generate a synthetic data directory")
    sp.add_argument("--snr", type=float)

    sp = add("train", "train the brain module", data=True)
    sp.add_argument("--latents-mse")

    sp = add("grid-search", "hyperparameter grid search", data=True)
    sp.add_argument("--space", type=Path, required=True)

    sp = add("lambda-sweep", "sweep the CLIP/MSE mixing weight", data=True)
    sp.add_argument("--latents-mse")

    sp = add("eval-retrieval", "top-k retrieval on the test sets", data=True)
    sp.add_argument("--ckpt", type=Path, required=True)
    sp.add_argument("--augment-unseen", action="store_true", help="add bank images absent from the data as distractors")

    sp = add("eval-generation", "image reconstruction metrics")
    sp.add_argument("--trues", type=Path, required=True)
    sp.add_argument("--gens", type=Path, required=True)
    sp.add_argument("--providers", default="", help="comma list: feature names or bank:FILE")
    sp.add_argument("--distance-provider", default="")

    sp = add("window-sweep", "one model per time window", data=True)
    sp.add_argument("--kind", choices=["sliding", "growing"])

    add("baseline-ridge", "cross-validated ridge baseline", data=True)

    sp = add("model-summarize", "parameter table of the brain module", out=False)
    sp.add_argument("--out", type=Path)

    sp = add("inspect", "describe a tensor, manifest, bundle or data directory", out=False)
    sp.add_argument("path", type=Path)

    sp = add("convert", "convert between .megt, .npy and .tsv", out=False)
    sp.add_argument("src", type=Path)
    sp.add_argument("dst", type=Path)
    return p


def main(argv=None):
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("no subcommand given")
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        parser.print_usage(sys.stderr)
        return EXIT_INVALID
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    from .datastore import FormatError

    try:
        raw = load_config(args.config, args.set)
        return COMMANDS[args.command](args, raw)
    except (UsageError, FormatError, ValueError, KeyError, FileNotFoundError, FileExistsError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # noqa: BLE001 - any other failure is a runtime error
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
