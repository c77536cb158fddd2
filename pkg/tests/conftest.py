import sys
import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


TINY_SYNTH = dict(n_train_images=600, n_train_categories=120, n_test_images=20, C=16, F=16,
                  t_min=-0.2, t_max=0.5, sfreq=40.0, subjects=2, seed=0)


def tiny_splits(snr=10.0, parts=("train", "valid"), **overrides):
    """Scaled decoding splits of a small synthetic dataset."""
    from megdecode import synth, trainer

    ds = synth.generate(synth.SynthConfig(**{**TINY_SYNTH, "snr": snr, **overrides}))
    raw = {k: ds.epochs[ds.indices(k)] for k in parts}
    scaled, _ = trainer.scale_parts(raw, ds.config.t_min, ds.config.sfreq)
    splits = {k: trainer.make_split(scaled[k], [ds.records[i] for i in ds.indices(k)], ds.bank) for k in parts}
    return ds, splits


@pytest.fixture(scope="session")
def tiny_high_snr():
    return tiny_splits(10.0)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not getattr(mod, "RESULTS", None):
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[n])
