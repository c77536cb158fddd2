import math
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from megdecode.datastore import (
    FormatError,
    LatentBank,
    PresentationRecord,
    SensorLayout,
    format_manifest,
    load_bundle,
    load_latent_bank,
    parse_manifest,
    read_header,
    read_layout,
    read_tensor,
    save_array,
    save_bundle,
    write_layout,
    write_tensor,
)


def test_small_tensor_round_trip(tmp_path):
    p = tmp_path / "a.megt"
    write_tensor(p, [2, 3], range(6))
    out = read_tensor(p)
    assert out.shape == (2, 3)
    assert out.dtype == np.float32
    np.testing.assert_array_equal(out.ravel(), np.arange(6, dtype=np.float32))


def test_epoch_sized_payload(tmp_path):
    p = tmp_path / "epoch.megt"
    save_array(p, np.zeros((272, 181)))
    header_bytes = 16 + 8 * 2
    assert p.stat().st_size == header_bytes + 272 * 181 * 4
    version, dtype, shape, offset = read_header(p)
    assert (version, dtype, shape, offset) == (1, 1, (272, 181), header_bytes)


def test_header_layout_is_little_endian(tmp_path):
    p = tmp_path / "h.megt"
    write_tensor(p, [3], [1.0, 2.0, 3.0])
    raw = p.read_bytes()
    assert raw[:4] == b"MEGT"
    assert struct.unpack("<III", raw[4:16]) == (1, 1, 1)
    assert struct.unpack("<Q", raw[16:24]) == (3,)
    assert np.frombuffer(raw[24:], "<f4").tolist() == [1.0, 2.0, 3.0]


@pytest.mark.parametrize("shape", [[], [1, 1, 1, 1, 1]])
def test_bad_rank_rejected(tmp_path, shape):
    with pytest.raises(ValueError):
        write_tensor(tmp_path / "x.megt", shape, [])


def test_value_count_mismatch(tmp_path):
    with pytest.raises(ValueError):
        write_tensor(tmp_path / "x.megt", [2, 2], [1, 2, 3])


def test_corrupt_files(tmp_path):
    p = tmp_path / "bad.megt"
    p.write_bytes(b"NOPE" + bytes(12))
    with pytest.raises(FormatError):
        read_tensor(p)
    q = tmp_path / "short.megt"
    write_tensor(q, [4], [1, 2, 3, 4])
    q.write_bytes(q.read_bytes()[:-2])
    with pytest.raises(FormatError):
        read_tensor(q)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float32, st.lists(st.integers(0, 5), min_size=1, max_size=4).map(tuple),
              elements=st.floats(-1e6, 1e6, width=32, allow_nan=False)))
def test_round_trip_identity(tmp_path_factory, arr):
    p = tmp_path_factory.mktemp("rt") / "t.megt"
    save_array(p, arr)
    out = read_tensor(p)
    assert out.shape == arr.shape
    np.testing.assert_array_equal(out, arr)


def test_bundle_round_trip(tmp_path):
    arrays_in = {"w": np.arange(6.0).reshape(2, 3), "b": np.ones(3)}
    save_bundle(tmp_path / "b", arrays_in, {"alpha": 1.5})
    arrays_out, meta = load_bundle(tmp_path / "b")
    assert meta == {"alpha": 1.5}
    for k in arrays_in:
        np.testing.assert_array_equal(arrays_out[k], arrays_in[k])


# ---------------------------------------------------------------- manifests

HEADER = "image_id\tcategory_id\tsubject_id\tsession\trepetition_index\tsplit_tag"


def _row(img, cat, subj=0, sess=0, rep=0, tag="train"):
    return f"{img}\t{cat}\t{subj}\t{sess}\t{rep}\t{tag}"


def test_large_test_manifest_parses():
    rows = [_row(f"c{c}_i{i}", f"c{c}", tag="large_test") for c in range(200) for i in range(12)]
    man = parse_manifest("\n".join([HEADER] + rows))
    assert len(man.records) == 2400
    assert {r.split_tag for r in man.records} == {"large_test"}


def test_negative_repetition_rejected():
    with pytest.raises(FormatError):
        parse_manifest("\n".join([HEADER, _row("a", "c", rep=-1)]))


def test_single_row():
    man = parse_manifest("\n".join([HEADER, _row("a", "c")]))
    assert man.records == [PresentationRecord("a", "c", 0, 0, 0, "train")]


@pytest.mark.parametrize(
    "body",
    [
        [_row("a", "c", tag="holdout")],
        [_row("a", "c"), _row("a", "c")],
        ["a\tc\t0\t0"],
        ["a\tc\tx\t0\t0\ttrain"],
    ],
)
def test_malformed_manifests(body):
    with pytest.raises(FormatError):
        parse_manifest("\n".join([HEADER] + body))


def test_missing_header_column():
    with pytest.raises(FormatError):
        parse_manifest("image_id\tcategory_id\n a\tb")


def test_directives_checked():
    text = "# n_subjects=1\n" + "\n".join([HEADER, _row("a", "c", subj=1)])
    with pytest.raises(FormatError):
        parse_manifest(text)
    text = "# small_test_repetitions=2\n" + "\n".join([HEADER, _row("a", "c", tag="small_test")])
    with pytest.raises(FormatError):
        parse_manifest(text)


def test_extra_columns_preserved():
    text = HEADER + "\tzeta\talpha\n" + _row("a", "c") + "\tz1\ta1\n"
    man = parse_manifest(text)
    assert man.extra_columns == ("zeta", "alpha")
    assert dict(man.records[0].extra) == {"zeta": "z1", "alpha": "a1"}
    canon = format_manifest(man.records, man.directives)
    assert canon.splitlines()[0].endswith("\talpha\tzeta")


_ids = st.text("abcdefgh0123", min_size=1, max_size=6)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(_ids, _ids, st.integers(0, 3), st.integers(0, 2), st.integers(0, 3),
                          st.sampled_from(["train", "valid", "small_test", "large_test", "unseen_pool"])),
                min_size=1, max_size=20, unique_by=lambda t: (t[0], t[2], t[4])),
       st.dictionaries(st.sampled_from(["n_subjects", "note"]), st.sampled_from(["4", "x"]), max_size=1))
def test_canonical_form_is_a_fixed_point(rows, directives):
    directives = {k: v for k, v in directives.items() if k != "n_subjects"}
    recs = [PresentationRecord(*r) for r in rows]
    text = format_manifest(recs, directives)
    man = parse_manifest(text)
    assert man.records == recs
    assert format_manifest(man.records, man.directives) == text


# ---------------------------------------------------------------- layouts and banks


def test_layout_round_trip(tmp_path):
    lay = SensorLayout(("A", "B"), np.array([[0.0, 0.5], [1.0, 0.25]]))
    write_layout(tmp_path / "l.tsv", lay)
    back = read_layout(tmp_path / "l.tsv")
    assert back.channel_ids == ("A", "B")
    np.testing.assert_allclose(back.positions, lay.positions)


def test_layout_outside_unit_square():
    with pytest.raises(ValueError):
        SensorLayout(("A",), np.array([[1.2, 0.0]]))
    lay = SensorLayout.normalized(["A", "B", "C"], [[-3, 2], [5, 2], [1, 6]])
    assert lay.positions.min() == 0 and lay.positions.max() == 1


def test_bank_dimension_and_lookup(rng):
    bank = LatentBank("clip", [f"i{k}" for k in range(5)], rng.normal(size=(5, 768)))
    assert bank.F == 768
    np.testing.assert_array_equal(bank.get(["i3"])[0], bank.vectors[3])
    with pytest.raises(KeyError):
        bank.get(["nope"])


def test_one_entry_bank_needs_two_train_entries():
    bank = LatentBank("b", ["a"], np.ones((1, 3)), train_ids=["a"])
    with pytest.raises(ValueError):
        bank.train_std


def test_bank_rejects_nan_and_bad_ids():
    with pytest.raises(ValueError):
        LatentBank("b", ["a", "b"], np.array([[0.0], [np.nan]]))
    with pytest.raises(ValueError):
        LatentBank("b", ["a"], np.zeros((2, 2)))
    with pytest.raises(ValueError):
        LatentBank("b", ["a", "a"], np.zeros((2, 2)))


def test_bank_stats_match_two_pass_oracle(rng):
    V = rng.normal(3.0, 2.0, size=(50, 7))
    ids = [f"i{k}" for k in range(50)]
    train = ids[:30]
    bank = LatentBank("b", ids, V, train_ids=train)
    n = 30
    mean = [sum(V[i, f] for i in range(n)) / n for f in range(7)]
    var = [sum((V[i, f] - mean[f]) ** 2 for i in range(n)) / n for f in range(7)]
    np.testing.assert_allclose(bank.train_mean, mean, rtol=1e-12)
    np.testing.assert_allclose(bank.train_std, [math.sqrt(v) for v in var], rtol=1e-12)


def test_bank_file_round_trip(tmp_path, rng):
    bank = LatentBank("b", ["x", "y", "z"], rng.normal(size=(3, 4)))
    bank.save(tmp_path / "b.megt")
    back = load_latent_bank(tmp_path / "b.megt")
    assert back.ids == ["x", "y", "z"]
    np.testing.assert_allclose(back.vectors, bank.vectors, rtol=1e-6)
