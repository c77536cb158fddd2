import numpy as np
import pytest
from conftest import tiny_splits

from megdecode import baselines, retrieval
from megdecode.brainnet import BrainModuleConfig
from megdecode.losses import ClipLossConfig
from megdecode.trainer import (
    DecodingSplit,
    EarlyStopping,
    TrainConfig,
    TrainData,
    TrainingDiverged,
    adam_step,
    evaluate_split,
    grid_search,
    lambda_sweep,
    train,
)


def _model_cfg(ds, **kw):
    c = ds.config
    return BrainModuleConfig(**{**dict(C_in=c.C, C_att=c.C, D=16, F_proj=32, T=c.T, fourier_K=3,
                                       n_subjects=c.subjects, F_out=c.F), **kw})


FAST = TrainConfig(lr=3e-3, batch=64, max_epochs=2, patience=5)


# ---------------------------------------------------------------- Adam


def test_adam_zero_gradient_is_noop():
    p = {"w": np.array([1.0, -2.0])}
    adam_step(p, {"w": np.zeros(2)}, {}, lr=0.1)
    assert np.array_equal(p["w"], [1.0, -2.0])


def test_adam_first_step_is_lr():
    p = {"w": np.array([0.5])}
    adam_step(p, {"w": np.array([1.0])}, {}, lr=1e-3, eps=0.0)
    assert p["w"][0] == pytest.approx(0.5 - 1e-3, abs=1e-15)


def test_adam_constant_gradient_limit():
    p = {"w": np.zeros(3)}
    g = np.array([2.0, -0.01, 50.0])
    state = {}
    for _ in range(3000):
        before = p["w"].copy()
        adam_step(p, {"w": g}, state, lr=1e-2)
    assert np.allclose(p["w"] - before, -1e-2 * np.sign(g), rtol=1e-5)


def test_adam_rejects_bad_gradients():
    p = {"w": np.zeros(2)}
    with pytest.raises(FloatingPointError):
        adam_step(p, {"w": np.array([1.0, np.nan])}, {}, lr=0.1)
    assert not p["w"].any()
    with pytest.raises(ValueError):
        adam_step(p, {"w": np.zeros(3)}, {}, lr=0.1)
    with pytest.raises(ValueError):
        adam_step(p, {"w": np.zeros(2)}, {}, lr=0.1, t=0)


def test_early_stopping_contract():
    es = EarlyStopping(patience=3)
    vals = [5, 4, 4.5, 4.2, 3.0, 3.5, 3.1]
    stops = [es.update(e, v) for e, v in enumerate(vals, start=1)]
    assert es.best_epoch == 5
    assert stops == [False] * 7
    assert es.update(8, 9) is True
    es = EarlyStopping(patience=1, mode="max")
    assert not es.update(1, 0.5) and es.update(2, 0.4)


@pytest.mark.parametrize("bad", [dict(lr=0), dict(patience=0), dict(lambdas=(0.5, 1.5)), dict(early_stop="acc")])
def test_config_validation(bad):
    with pytest.raises(ValueError):
        TrainConfig(**bad)


# ---------------------------------------------------------------- training


def test_high_snr_training_beats_chance(tiny_high_snr):
    ds, s = tiny_high_snr
    cfg = TrainConfig(lr=3e-3, batch=64, max_epochs=8, patience=8)
    module, rep = train(_model_cfg(ds), TrainData(s["train"], s["valid"]), train_cfg=cfg,
                        positions=ds.layout.positions)
    chance = 5 / len(set(s["valid"].image_ids))
    assert rep.valid_top5[rep.best_epoch] >= 10 * chance
    assert rep.stop_epoch - rep.best_epoch <= cfg.patience
    assert len(rep.train_losses) == rep.stop_epoch and len(rep.valid_losses) == rep.stop_epoch + 1
    # the returned module is the best-epoch one
    loss, top5 = evaluate_split(module, s["valid"], 1.0, ClipLossConfig(), 0.0, 64)
    assert loss == pytest.approx(rep.valid_losses[rep.best_epoch], rel=1e-9)


def test_same_seed_same_report(tiny_high_snr):
    ds, s = tiny_high_snr
    data = TrainData(s["train"], s["valid"])
    a = train(_model_cfg(ds), data, train_cfg=FAST, seed=3, positions=ds.layout.positions)[1]
    b = train(_model_cfg(ds), data, train_cfg=FAST, seed=3, positions=ds.layout.positions)[1]
    assert a.valid_losses[0] == b.valid_losses[0]
    assert np.allclose(a.train_losses, b.train_losses, atol=1e-10, rtol=0)
    assert np.allclose(a.valid_losses, b.valid_losses, atol=1e-10, rtol=0)
    c = train(_model_cfg(ds), data, train_cfg=FAST, seed=4, positions=ds.layout.positions)[1]
    assert c.valid_losses[0] != a.valid_losses[0]


def test_patience_one_returns_first_epoch(tiny_high_snr):
    ds, s = tiny_high_snr
    snaps = {}

    def worsening(module, epoch):
        snaps[epoch] = module.copy()
        return float(epoch)

    cfg = TrainConfig(lr=3e-3, batch=64, max_epochs=10, patience=1)
    best, rep = train(_model_cfg(ds), TrainData(s["train"], s["valid"]), train_cfg=cfg,
                      positions=ds.layout.positions, val_metric=worsening)
    assert rep.stop_epoch == 2 and rep.best_epoch == 1
    for k, v in best.params.items():
        assert np.array_equal(v, snaps[1].params[k])
    assert not np.array_equal(best.params["final.conv2.weight"], snaps[2].params["final.conv2.weight"])


def test_learned_temperature_is_trained(tiny_high_snr):
    ds, s = tiny_high_snr
    best, rep = train(_model_cfg(ds), TrainData(s["train"], s["valid"]), ClipLossConfig(temperature="learned"),
                      train_cfg=FAST, positions=ds.layout.positions)
    assert best.log_tau != 0.0 and np.isfinite(best.log_tau)


def test_loss_decreases_on_fixed_batch(tiny_high_snr):
    ds, s = tiny_high_snr
    sub = s["train"].take(np.arange(64))
    cfg = TrainConfig(lr=1e-3, batch=64, max_epochs=5, patience=10)
    for seed in range(3):
        rep = train(_model_cfg(ds), TrainData(sub, s["valid"]), train_cfg=cfg, seed=seed,
                    positions=ds.layout.positions)[1]
        if rep.train_losses[-1] < rep.train_losses[0]:
            break
    else:
        pytest.fail("training loss never decreased")


def test_training_errors(tiny_high_snr):
    ds, s = tiny_high_snr
    mc = _model_cfg(ds)
    tr, va = s["train"], s["valid"]
    with pytest.raises(ValueError, match="empty"):
        train(mc, TrainData(tr, va.take(np.arange(0))), train_cfg=FAST)
    with pytest.raises(ValueError, match="share"):
        train(mc, TrainData(tr, tr.take(np.arange(10))), train_cfg=FAST)
    with pytest.raises(ValueError, match="batch"):
        train(mc, TrainData(tr.take(np.arange(10)), va), train_cfg=FAST)
    bad = DecodingSplit(np.full_like(tr.X, np.nan), tr.subjects, tr.image_ids, tr.Z_clip)
    with pytest.raises(TrainingDiverged) as exc:
        train(mc, TrainData(bad, va), train_cfg=FAST, positions=ds.layout.positions)
    assert exc.value.report.diverged


# ---------------------------------------------------------------- sweeps


def _noise_mse(split, rng):
    return DecodingSplit(split.X, split.subjects, split.image_ids, split.Z_clip,
                         rng.normal(size=(len(split), 8)))


def test_lambda_sweep_prefers_contrastive_when_mse_is_noise(tiny_high_snr, rng):
    ds, s = tiny_high_snr
    data = TrainData(_noise_mse(s["train"], rng), _noise_mse(s["valid"], rng))
    mc = _model_cfg(ds, head_layout="clip_and_mse", F_out_mse=8)
    va = s["valid"]

    def score(module):
        pred = module.predict(va.X, va.subjects)["clip"]
        return retrieval.evaluate_averaged(pred, va.image_ids, va.retrieval_set()).top5

    cfg = TrainConfig(lr=3e-3, batch=64, max_epochs=4, patience=4)
    best, results = lambda_sweep(mc, data, score, (1.0, 0.0), train_cfg=cfg, positions=ds.layout.positions)
    assert best == 1.0
    assert results[1.0][2] > results[0.0][2]


def test_lambda_sweep_singleton_and_ties(tiny_high_snr):
    ds, s = tiny_high_snr
    data = TrainData(s["train"], s["valid"])
    cfg = TrainConfig(lr=3e-3, batch=64, max_epochs=1, patience=1)
    best, res = lambda_sweep(_model_cfg(ds), data, lambda m: 0.3, (0.5,), train_cfg=cfg,
                             positions=ds.layout.positions)
    assert best == 0.5 and list(res) == [0.5]
    best, _ = lambda_sweep(_model_cfg(ds), data, lambda m: 0.3, (0.75, 0.25), train_cfg=cfg,
                           positions=ds.layout.positions)
    assert best == 0.25
    with pytest.raises(ValueError):
        lambda_sweep(_model_cfg(ds), data, lambda m: 0.0, ())


def test_grid_search_counts_and_ranking():
    calls = []

    def run(cfg, seed, split):
        calls.append((cfg["x"], seed, split))
        return cfg["x"] + 0.01 * seed

    res = grid_search({"x": [0.1, 0.9]}, run)
    assert len(calls) == 2
    assert [r.config["x"] for r in res] == [0.9, 0.1]
    res = grid_search({"x": [1, 2], "y": [0]}, run, seeds=(0, 1), splits=(0, 1, 2))
    assert len(calls) == 2 + 12
    assert res[0].scores == [2, 2, 2, 2.01, 2.01, 2.01]
    assert res[0].sem > 0
    with pytest.raises(ValueError):
        grid_search({}, run)
    with pytest.raises(ValueError):
        grid_search({"x": []}, run)


def test_grid_search_finds_informative_channels():
    ds, s = tiny_splits(3.0, parts=("train", "valid"))
    noise = np.random.default_rng(9)
    tr, va = s["train"], s["valid"]
    # channels 8+ carry only noise
    for split in (tr, va):
        split.X[:, 8:] = noise.normal(size=split.X[:, 8:].shape)
    post = slice(8, None)

    def run(cfg, seed, split):
        ch = list(cfg["channels"])
        m = baselines.ridge_fit(tr.X[:, ch, post], tr.Z_clip, 100.0)
        pred = m.predict(va.X[:, ch, post])
        return retrieval.evaluate_averaged(pred, va.image_ids, va.retrieval_set()).top5

    res = grid_search({"channels": [tuple(range(8, 16)), tuple(range(8))]}, run)
    assert res[0].config["channels"] == tuple(range(8))
    assert res[0].mean > res[1].mean
