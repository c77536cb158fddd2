"""Acceptance suite: one test per criterion, each recording a PASS/FAIL line.

The lines are printed as they happen (visible with ``-s``) and repeated in the
pytest terminal summary. Run directly with ``python3 tests/test_acceptance.py``.

Set ``MEGDECODE_THINGS_DIR`` to a directory holding ``raw.megt``, ``events.tsv``,
``latents.megt`` and ``test_ids.txt`` (optionally ``layout.tsv`` and
``sfreq.txt``) to run criterion 10 on real THINGS-MEG-derived files instead
of the generated stand-in.
"""

import os
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from megdecode import baselines, cli, retrieval, synth, trainer
from megdecode.brainnet import BrainModuleConfig, build, count_params
from megdecode.datastore import LatentBank, save_array
from megdecode.genmetrics import EmbeddingProvider, pixcorr, select_examples, ssim, two_way_score
from megdecode.losses import ClipLossConfig, clip_loss, combined_loss, grad_check, mse_loss, relative_error
from megdecode.preprocess import ContinuousRecording, downsample, epoch, fit_robust_scaler, apply_scaler_clip
from megdecode.windows import WindowSpec, enumerate_growing, enumerate_sliding

RESULTS = {}


def record(n, ok, detail):
    line = f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    RESULTS[n] = line
    print(line, flush=True)
    assert ok, line


# ---------------------------------------------------------------- shared synthetic data


def _decoding_parts(ds, tags):
    raw = {k: ds.epochs[ds.indices(k)] for k in tags}
    scaled, _ = trainer.scale_parts(raw, ds.config.t_min, ds.config.sfreq)
    return {k: trainer.make_split(scaled[k], [ds.records[i] for i in ds.indices(k)], ds.bank) for k in tags}


@pytest.fixture(scope="module")
def synth_defaults():
    """Synth defaults at snr 10 and snr 0, with scaled splits."""
    out = {}
    for snr in (10.0, 0.0):
        ds = synth.generate(synth.SynthConfig(snr=snr))
        out[snr] = (ds, _decoding_parts(ds, ("train", "valid", "small_test")))
    return out


def _test_top5(ds, test, pred):
    rset = retrieval.RetrievalSet.from_bank(ds.bank, ds.original_test_ids)
    return retrieval.evaluate_averaged(pred, test.image_ids, rset).top5


def _chance_band(M):
    chance = 5 / M
    return chance, 3 * np.sqrt(chance * (1 - chance) / M)


# ---------------------------------------------------------------- 1


def test_criterion_01_parameter_accounting():
    expected = [552_960, 73_170, 291_600, 1_183_360, 1_231_360, 1_518_208, 182, 1_573_632, 6_424_472]
    got = [n for _, n in count_params(BrainModuleConfig())]
    t0 = time.perf_counter()
    proc = subprocess.run([sys.executable, "-m", "megdecode.cli", "model-summarize"], capture_output=True, text=True)
    elapsed = time.perf_counter() - t0
    lines = proc.stdout.strip().splitlines()
    printed = [int(ln.split()[-1].replace(",", "")) for ln in lines[1:]]
    ok = got == expected and printed == expected and proc.returncode == 0 and elapsed < 1.0
    record(1, ok, f"rows {printed}, command wall time {elapsed:.2f} s")


# ---------------------------------------------------------------- 2


def test_criterion_02_gradients():
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    worst = {}
    Zhat, Z = rng.normal(size=(4, 4)), rng.normal(size=(4, 4))
    for sym in (False, True):
        for norm in ("image_only", "both", "similarity_columns"):
            cfg = ClipLossConfig(symmetric=sym, norm_axis=norm)
            e = grad_check(lambda x: clip_loss(x, Z, cfg)[:2], Zhat)
            worst["clip"] = max(worst.get("clip", 0.0), e)
    worst["mse"] = grad_check(lambda x: mse_loss(x, Z), Zhat)
    Zm, Tm = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
    cfg = ClipLossConfig(symmetric=True)
    g = combined_loss(Zhat, Zm, Z, Tm, 0.3, cfg)[1]
    worst["combined"] = max(grad_check(lambda x: combined_loss(x, Zm, Z, Tm, 0.3, cfg)[0], Zhat, analytic=g["clip"]),
                            grad_check(lambda x: combined_loss(Zhat, x, Z, Tm, 0.3, cfg)[0], Zm, analytic=g["mse"]))

    worst["brain"] = 0.0
    for agg in ("affine", "mean_pool", "attention"):
        mc = BrainModuleConfig(C_in=6, C_att=5, D=8, F_proj=16, T=12, fourier_K=2, n_subjects=2, F_out=4,
                               aggregation=agg, attention_hidden=5)
        m = build(mc, seed=1)
        for k in m.params:
            m.params[k] = m.params[k] + 0.3 * rng.normal(size=m.params[k].shape)
        x, subj, target = rng.normal(size=(4, 6, 12)), np.array([0, 1, 1, 0]), rng.normal(size=(4, 4))

        def loss():
            out, tr = m.forward(x, subj, train=True, update_stats=False)
            val, gz, _ = clip_loss(out["clip"], target, cfg)
            return val, gz, tr

        _, gz, tr = loss()
        grads, _ = m.backward(tr, {"clip": gz})
        for name, p in m.params.items():
            num = np.zeros_like(p)
            flat, nflat = p.reshape(-1), num.reshape(-1)
            for i in range(flat.size):
                o = flat[i]
                flat[i] = o + 1e-5
                a = loss()[0]
                flat[i] = o - 1e-5
                b = loss()[0]
                flat[i] = o
                nflat[i] = (a - b) / 2e-5
            worst["brain"] = max(worst["brain"], relative_error(grads[name], num))
    elapsed = time.perf_counter() - t0
    ok = max(worst.values()) < 1e-4 and elapsed < 60
    record(2, ok, "max relative error " + ", ".join(f"{k} {v:.1e}" for k, v in worst.items()) + f"; {elapsed:.1f} s")


# ---------------------------------------------------------------- 3


def test_criterion_03_shape_trace():
    m = build(BrainModuleConfig(), seed=0)
    _, tr = m.forward(np.random.default_rng(0).normal(size=(1, 272, 181)), [0], train=False)
    shapes = [tuple(s) for _, s in tr["shapes"]]
    expected = [(272, 181), (270, 181), (270, 181), (270, 181), (320, 181), (320, 181), (2048, 181), (2048, 1),
                (768, 1)]
    bad_T = []
    for T in range(1, 65):
        mt = build(BrainModuleConfig(C_in=8, C_att=6, D=8, F_proj=8, T=T, fourier_K=2, F_out=4,
                                     aggregation="mean_pool"), seed=0)
        _, trt = mt.forward(np.zeros((2, 8, T)), [0, 1], train=False)
        if any(s[-1] != T for _, s in trt["shapes"][:-2]):
            bad_T.append(T)
    record(3, shapes == expected and not bad_T, f"trace {shapes[0]} -> ... -> {shapes[-1]}; T failures {bad_T}")


# ---------------------------------------------------------------- 4


def test_criterion_04_retrieval_oracle_and_chance():
    rng = np.random.default_rng(0)
    mismatches = 0
    for trial in range(300):
        M = int(rng.integers(1, 65))
        lat = rng.normal(size=(M, 3))
        if trial % 3 == 0:  # exact ties
            lat = np.round(lat)
            lat[np.linalg.norm(lat, axis=1) == 0] = 1.0
        ids = [f"c{k:02d}" for k in rng.permutation(M)]
        preds = rng.normal(size=(5, 3))
        truth = [ids[k] for k in rng.integers(0, M, size=5)]
        rep = retrieval.evaluate(preds, truth, retrieval.RetrievalSet(lat, ids))
        unit = lat / np.linalg.norm(lat, axis=1, keepdims=True)
        for q, (p, t) in enumerate(zip(preds, truth)):
            s = unit @ (p / np.linalg.norm(p))
            order = sorted(range(M), key=lambda j: (-s[j], ids[j]))
            brute = [ids[j] for j in order].index(t) + 1
            mismatches += int(rep.ranks[q] != brute)
    M, Q = 200, 10_000
    lat = rng.normal(size=(M, 32))
    ids = [str(k) for k in range(M)]
    rep = retrieval.evaluate(rng.normal(size=(Q, 32)), [ids[k] for k in rng.integers(0, M, Q)],
                             retrieval.RetrievalSet(lat, ids))
    ok = mismatches == 0 and abs(rep.top5 - 0.025) <= 0.01 and abs(rep.median_relative_rank - 0.5) <= 0.05
    record(4, ok, f"oracle mismatches {mismatches}/1500; chance top-5 {rep.top5:.4f}, "
                  f"median relative rank {rep.median_relative_rank:.3f}")


# ---------------------------------------------------------------- 5


def test_criterion_05_end_to_end(synth_defaults):
    t0 = time.perf_counter()
    scores = {}
    for snr, (ds, s) in synth_defaults.items():
        tr, te = s["train"], s["small_test"]
        _, m, _ = baselines.ridge_cv(tr.X, tr.Z_clip, groups=tr.image_ids)
        scores[("ridge", snr)] = _test_top5(ds, te, m.predict(te.X))
        c = ds.config
        mc = BrainModuleConfig(C_in=c.C, C_att=32, D=32, F_proj=64, T=c.T, fourier_K=4, n_subjects=c.subjects,
                               F_out=c.F)
        tc = trainer.TrainConfig(lr=3e-3, batch=128, max_epochs=12, patience=3)
        module, _ = trainer.train(mc, trainer.TrainData(tr, s["valid"]), train_cfg=tc, positions=ds.layout.positions)
        scores[("brain", snr)] = _test_top5(ds, te, trainer.predict_latents(module, te.X, te.subjects))
    elapsed = time.perf_counter() - t0
    chance, band = _chance_band(200)
    ridge, brain = scores[("ridge", 10.0)], scores[("brain", 10.0)]
    ok_a = ridge >= 0.90
    ok_b = brain >= ridge - 0.10
    ok_c = all(abs(scores[(k, 0.0)] - chance) <= band for k in ("ridge", "brain"))
    record(5, ok_a and ok_b and ok_c and elapsed <= 900,
           f"snr 10: ridge {ridge:.3f}, brain {brain:.3f}; snr 0: ridge {scores[('ridge', 0.0)]:.3f}, "
           f"brain {scores[('brain', 0.0)]:.3f} (chance {chance:.3f} +- {band:.3f}); {elapsed:.0f} s")


# ---------------------------------------------------------------- 6


def test_criterion_06_windows(synth_defaults):
    n_slide, n_grow = len(enumerate_sliding()), len(enumerate_growing())
    ds, s = synth_defaults[10.0]
    tr, te = s["train"], s["small_test"]
    c = ds.config
    specs = [w for w in enumerate_sliding((c.t_min, c.t_max)) if w.t_end < 0]
    chance, band = _chance_band(200)
    pre = []
    for spec in specs:
        crop = lambda X: spec.crop(X, c.t_min, c.sfreq)  # noqa: E731
        m = baselines.ridge_fit(crop(tr.X), tr.Z_clip, 1e3)
        pre.append(_test_top5(ds, te, m.predict(crop(te.X))))
    post_spec = WindowSpec(0.1, 0.2)
    m = baselines.ridge_fit(post_spec.crop(tr.X, c.t_min, c.sfreq), tr.Z_clip, 1e3)
    post = _test_top5(ds, te, m.predict(post_spec.crop(te.X, c.t_min, c.sfreq)))
    ok = n_slide == 57 and n_grow == 61 and all(abs(p - chance) <= band for p in pre) and post > chance + band
    record(6, ok, f"sliding {n_slide}, growing {n_grow}; {len(pre)} pre-onset windows top-5 in "
                  f"[{min(pre):.3f}, {max(pre):.3f}] (chance {chance:.3f} +- {band:.3f}); post-onset {post:.3f}")


# ---------------------------------------------------------------- 7


def test_criterion_07_preprocessing():
    rng = np.random.default_rng(0)
    C, sfreq = 6, 1200.0
    onsets = np.arange(1200, 40 * 1200, 1800)
    data = rng.normal(size=(C, 41 * 1200)) * rng.uniform(1e-13, 1e-11, size=(C, 1))
    data[:, ::997] += 1e-9  # outliers that must be clipped
    rec = downsample(ContinuousRecording(data, sfreq, onsets), 120.0)
    eps = epoch(rec, -0.5, 1.0)
    T = eps[0].data.shape[1]
    X = np.stack([e.data for e in eps])
    scaled = apply_scaler_clip(X, fit_robust_scaler(X))
    flat = scaled.transpose(1, 0, 2).reshape(C, -1)
    med = np.median(flat, axis=1)
    iqr = np.percentile(flat, 75, axis=1) - np.percentile(flat, 25, axis=1)
    ok = T == 181 and np.abs(med).max() < 1e-6 and np.abs(iqr - 1).max() < 1e-6 and np.abs(scaled).max() <= 20
    record(7, ok, f"T={T}; max |median| {np.abs(med).max():.1e}, max |IQR-1| {np.abs(iqr - 1).max():.1e}, "
                  f"range [{scaled.min():.1f}, {scaled.max():.1f}]")


# ---------------------------------------------------------------- 8


def test_criterion_08_metric_sanity():
    rng = np.random.default_rng(0)
    render = synth.LatentRenderer(16, side=32, seed=0)
    imgs = render(rng.normal(size=(40, 16)))
    pc = min(pixcorr(i, i) for i in imgs[:10])
    ss = min(ssim(i, i) for i in imgs[:10])
    shuffled = [imgs[(k + 1) % 40] for k in range(40)]
    tw = two_way_score(imgs, shuffled, EmbeddingProvider.feature("colorhist"))
    bad_sel = 0
    for _ in range(200):
        n = int(rng.integers(15, 120))
        scores = rng.integers(-10, 10, size=n).astype(float)
        order = sorted(range(n), key=lambda i: (-scores[i], i))
        size = n // 15
        blocks = [order[b * size:(b + 1) * size] for b in range(14)] + [order[14 * size:]]
        want = {"best": blocks[0][:4], "middle": blocks[7][:4], "worst": blocks[14][:4]}
        bad_sel += int(select_examples(scores) != want)
    ok = abs(pc - 1) <= 1e-6 and abs(ss - 1) <= 1e-6 and abs(tw - 0.5) <= 0.05 and bad_sel == 0
    record(8, ok, f"pixcorr {pc:.7f}, ssim {ss:.7f}; shuffled 2-way {tw:.3f} over {40 * 39} pairs; "
                  f"selection mismatches {bad_sel}/200")


# ---------------------------------------------------------------- 9


def test_criterion_09_determinism():
    ds = synth.generate(synth.SynthConfig(n_train_images=600, n_train_categories=120, n_test_images=20, C=16, F=16,
                                          t_min=-0.2, t_max=0.5, sfreq=40.0, seed=0))
    s = _decoding_parts(ds, ("train", "valid"))
    mc = BrainModuleConfig(C_in=16, C_att=16, D=16, F_proj=32, T=ds.config.T, fourier_K=3, n_subjects=2, F_out=16)
    tc = trainer.TrainConfig(lr=3e-3, batch=64, max_epochs=4, patience=4)
    reps = [trainer.train(mc, trainer.TrainData(s["train"], s["valid"]), train_cfg=tc, seed=7,
                          positions=ds.layout.positions)[1] for _ in range(2)]
    a, b = reps
    curve = max(np.abs(np.subtract(a.train_losses, b.train_losses)).max(),
                np.abs(np.subtract(a.valid_losses, b.valid_losses)).max())
    ok = a.valid_losses[0] == b.valid_losses[0] and curve <= 1e-8
    record(9, ok, f"epoch-0 loss {a.valid_losses[0]!r} vs {b.valid_losses[0]!r}; max curve difference {curve:.1e}")


# ---------------------------------------------------------------- 10


def _things_standin(root):
    """THINGS-shaped files: 272-channel 1200 Hz raw recording, events with onsets, latents, test ids."""
    root.mkdir(parents=True)
    rng = np.random.default_rng(0)
    sfreq, C = 1200.0, 272
    rows = []
    for c in range(10):
        for j in range(2):
            rows.append((f"things_c{c}_{j}", f"cat{c}", 0, 0))
    test_ids = ["things_t0_0", "things_t1_0"]
    for t in range(2):
        for rep in range(3):
            rows.append((f"things_t{t}_0", f"tcat{t}", 0, rep))
        rows.append((f"things_t{t}_1", f"tcat{t}", 0, 0))
    order = rng.permutation(len(rows))
    rows = [rows[i] for i in order]
    spacing = int(1.6 * sfreq)
    onsets = [int(sfreq) + k * spacing for k in range(len(rows))]
    raw = rng.normal(size=(C, onsets[-1] + 2 * int(sfreq))).astype(np.float32) * 1e-12
    save_array(root / "raw.megt", raw)
    head = "image_id\tcategory_id\tsubject_id\tsession\trepetition_index\tsplit_tag\tonset_sample"
    lines = ["# n_subjects=1", head]
    for (img, cat, subj, rep), o in zip(rows, onsets):
        tag = "small_test" if img in test_ids else "train"
        lines.append(f"{img}\t{cat}\t{subj}\t0\t{rep}\t{tag}\t{o}")
    (root / "events.tsv").write_text("\n".join(lines) + "\n")
    (root / "test_ids.txt").write_text("\n".join(test_ids) + "\n")
    ids = sorted({r[0] for r in rows})
    LatentBank("vgg19", ids, rng.normal(size=(len(ids), 16))).save(root / "latents.megt")
    (root / "sfreq.txt").write_text("1200\n")
    return root


def test_criterion_10_things_integration(tmp_path):
    things = os.environ.get("MEGDECODE_THINGS_DIR")
    src = Path(things) if things else _things_standin(tmp_path / "things")
    sfreq = (src / "sfreq.txt").read_text().strip() if (src / "sfreq.txt").exists() else "1200"
    w = tmp_path / "run"
    cfg = tmp_path / "things.toml"
    cfg.write_text("[model]\nD = 16\nF_proj = 32\nfourier_K = 4\n\n"
                   "[train]\nbatch = 8\nmax_epochs = 1\nseeds = [0]\n")
    layout = ["--layout", str(src / "layout.tsv")] if (src / "layout.tsv").exists() else []
    steps = [
        ["preprocess", "--raw", str(src / "raw.megt"), "--sfreq", sfreq, "--events", str(src / "events.tsv"),
         *layout, "--out", str(w / "epochs")],
        ["make-splits", "--records", str(w / "epochs" / "records.tsv"), "--test-ids", str(src / "test_ids.txt"),
         "--out", str(w / "splits")],
        ["train", "--config", str(cfg), "--data", str(w / "epochs"), "--records", str(w / "splits" / "records.tsv"),
         "--latents", str(src / "latents.megt"), "--out", str(w / "ckpt")],
        ["eval-retrieval", "--data", str(w / "epochs"), "--records", str(w / "splits" / "records.tsv"),
         "--latents", str(src / "latents.megt"), "--ckpt", str(w / "ckpt"), "--out", str(w / "eval")],
    ]
    codes = [cli.main(step) for step in steps]
    ok = codes == [0, 0, 0, 0] and (w / "eval" / "summary.json").exists()
    source = "supplied THINGS-MEG files" if things else "generated THINGS-format stand-in"
    record(10, ok, f"pipeline exit codes {codes} on {source} (integration smoke only; the headline THINGS-MEG "
                   "numbers need the real dataset and pretrained embeddings and are not reproduced at desk scale)")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q"]))
