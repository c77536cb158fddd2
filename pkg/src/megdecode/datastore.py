"""On-disk formats: MEGT tensor files, TSV manifests, sensor layouts and latent banks.

MEGT layout (all little-endian)::

    offset  size        field
    0       4           magic  b"MEGT"
    4       4  uint32   version (1)
    8       4  uint32   dtype code (1 = float32)
    12      4  uint32   ndim (1..4)
    16      8*ndim      shape, uint64 each
    ...     4*prod      payload, row-major float32
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"MEGT"
VERSION = 1
DTYPE_FLOAT32 = 1
_HEADER = struct.Struct("<4sIII")

SPLIT_TAGS = ("train", "valid", "small_test", "large_test", "unseen_pool")
MANIFEST_COLUMNS = ("image_id", "category_id", "subject_id", "session", "repetition_index", "split_tag")


class FormatError(ValueError):
    """A file does not follow the expected on-disk format."""


# ---------------------------------------------------------------------------
# tensors
# ---------------------------------------------------------------------------


def write_tensor(path, shape, values) -> None:
    shape = [int(s) for s in shape]
    if not 1 <= len(shape) <= 4:
        raise ValueError(f"ndim must be in [1, 4], got {len(shape)}")
    if any(s < 0 for s in shape):
        raise ValueError(f"negative extent in shape {shape}")
    arr = np.asarray(values, dtype="<f4").ravel()
    if arr.size != math.prod(shape):
        raise ValueError(f"{arr.size} values do not fill shape {shape}")
    header = _HEADER.pack(MAGIC, VERSION, DTYPE_FLOAT32, len(shape)) + struct.pack(f"<{len(shape)}Q", *shape)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(arr.tobytes())


def save_array(path, arr) -> None:
    arr = np.asarray(arr)
    write_tensor(path, arr.shape, arr)


def read_header(path):
    """Return ``(version, dtype_code, shape, payload_offset)`` without reading the payload."""
    with open(path, "rb") as fh:
        head = fh.read(_HEADER.size)
        if len(head) < _HEADER.size:
            raise FormatError(f"{path}: truncated header")
        magic, version, dtype, ndim = _HEADER.unpack(head)
        if magic != MAGIC:
            raise FormatError(f"{path}: bad magic {magic!r}")
        if version != VERSION:
            raise FormatError(f"{path}: unsupported version {version}")
        if dtype != DTYPE_FLOAT32:
            raise FormatError(f"{path}: unsupported dtype code {dtype}")
        if not 1 <= ndim <= 4:
            raise FormatError(f"{path}: ndim {ndim} out of range")
        raw = fh.read(8 * ndim)
        if len(raw) < 8 * ndim:
            raise FormatError(f"{path}: truncated shape")
        shape = tuple(int(s) for s in struct.unpack(f"<{ndim}Q", raw))
    return version, dtype, shape, _HEADER.size + 8 * ndim


def read_tensor(path) -> np.ndarray:
    _, _, shape, offset = read_header(path)
    n = math.prod(shape)
    data = Path(path).read_bytes()[offset:]
    if len(data) != 4 * n:
        raise FormatError(f"{path}: payload is {len(data)} bytes, expected {4 * n}")
    return np.frombuffer(data, dtype="<f4").reshape(shape).astype(np.float32)


def save_bundle(directory, arrays: dict, meta: dict | None = None) -> None:
    """Write a dict of arrays as one MEGT file per key plus ``meta.json``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    names = sorted(arrays)
    for name in names:
        save_array(directory / f"{name}.megt", arrays[name])
    info = {"arrays": names, "meta": meta or {}}
    (directory / "meta.json").write_text(json.dumps(info, indent=2, sort_keys=True))


def load_bundle(directory):
    directory = Path(directory)
    info = json.loads((directory / "meta.json").read_text())
    arrays = {name: read_tensor(directory / f"{name}.megt") for name in info["arrays"]}
    return arrays, info["meta"]


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PresentationRecord:
    image_id: str
    category_id: str
    subject_id: int
    session: int
    repetition_index: int
    split_tag: str
    extra: tuple = ()

    def __post_init__(self):
        if self.split_tag not in SPLIT_TAGS:
            raise ValueError(f"unknown split_tag {self.split_tag!r}")
        if self.subject_id < 0:
            raise ValueError(f"subject_id must be >= 0, got {self.subject_id}")
        if self.repetition_index < 0:
            raise ValueError(f"repetition_index must be >= 0, got {self.repetition_index}")
        if not self.image_id or not self.category_id:
            raise ValueError("empty image_id or category_id")

    @property
    def key(self):
        return (self.image_id, self.subject_id, self.repetition_index)

    def with_split(self, tag):
        return PresentationRecord(
            self.image_id, self.category_id, self.subject_id, self.session, self.repetition_index, tag, self.extra
        )


@dataclass
class Manifest:
    records: list
    directives: dict = field(default_factory=dict)
    extra_columns: tuple = ()


def validate_records(records, directives=None):
    directives = directives or {}
    seen = set()
    for rec in records:
        if rec.key in seen:
            raise FormatError(f"duplicate (image, subject, repetition) {rec.key}")
        seen.add(rec.key)
    n_subjects = directives.get("n_subjects")
    if n_subjects is not None:
        bad = [r for r in records if r.subject_id >= int(n_subjects)]
        if bad:
            raise FormatError(f"subject_id {bad[0].subject_id} >= n_subjects={n_subjects}")
    for tag in ("small_test", "large_test"):
        want = directives.get(f"{tag}_repetitions")
        if want is None:
            continue
        counts = {}
        for r in records:
            if r.split_tag == tag:
                counts[(r.image_id, r.subject_id)] = counts.get((r.image_id, r.subject_id), 0) + 1
        for k, n in counts.items():
            if n != int(want):
                raise FormatError(f"{tag} image {k[0]} (subject {k[1]}) has {n} repetitions, header declares {want}")


def parse_manifest(text: str) -> Manifest:
    directives = {}
    lines = text.splitlines()
    body = []
    for line in lines:
        if line.startswith("#"):
            item = line[1:].strip()
            if "=" not in item:
                continue
            k, v = item.split("=", 1)
            directives[k.strip()] = v.strip()
        elif line.strip():
            body.append(line)
    if not body:
        raise FormatError("manifest has no header row")
    header = body[0].split("\t")
    missing = [c for c in MANIFEST_COLUMNS if c not in header]
    if missing:
        raise FormatError(f"manifest header lacks columns {missing}")
    if len(set(header)) != len(header):
        raise FormatError("duplicate column in manifest header")
    extra_cols = tuple(c for c in header if c not in MANIFEST_COLUMNS)
    pos = {c: i for i, c in enumerate(header)}
    records = []
    for lineno, line in enumerate(body[1:], start=2):
        cells = line.split("\t")
        if len(cells) != len(header):
            raise FormatError(f"row {lineno}: {len(cells)} cells, header has {len(header)}")
        try:
            rec = PresentationRecord(
                image_id=cells[pos["image_id"]],
                category_id=cells[pos["category_id"]],
                subject_id=int(cells[pos["subject_id"]]),
                session=int(cells[pos["session"]]),
                repetition_index=int(cells[pos["repetition_index"]]),
                split_tag=cells[pos["split_tag"]],
                extra=tuple((c, cells[pos[c]]) for c in extra_cols),
            )
        except ValueError as exc:
            raise FormatError(f"row {lineno}: {exc}") from exc
        records.append(rec)
    validate_records(records, directives)
    return Manifest(records, directives, extra_cols)


def read_manifest(path) -> list:
    return parse_manifest(Path(path).read_text()).records


def format_manifest(records, directives=None) -> str:
    """Canonical text form: sorted directives, fixed columns, extra columns sorted by name."""
    directives = directives or {}
    extra_cols = sorted({k for r in records for k, _ in r.extra})
    out = [f"# {k}={directives[k]}" for k in sorted(directives)]
    out.append("\t".join(MANIFEST_COLUMNS + tuple(extra_cols)))
    for r in records:
        ex = dict(r.extra)
        row = [r.image_id, r.category_id, str(r.subject_id), str(r.session), str(r.repetition_index), r.split_tag]
        row += [ex.get(c, "") for c in extra_cols]
        out.append("\t".join(row))
    return "\n".join(out) + "\n"


def write_manifest(path, records, directives=None) -> None:
    Path(path).write_text(format_manifest(records, directives))


# ---------------------------------------------------------------------------
# sensor layouts
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SensorLayout:
    channel_ids: tuple
    positions: np.ndarray  # (C, 2) in [0, 1]

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=np.float64)
        if pos.ndim != 2 or pos.shape[1] != 2 or pos.shape[0] != len(self.channel_ids):
            raise ValueError("positions must be (n_channels, 2)")
        if not np.all(np.isfinite(pos)):
            raise ValueError("non-finite sensor position")
        if pos.min() < 0 or pos.max() > 1:
            raise ValueError("sensor positions must lie in [0, 1]^2")
        object.__setattr__(self, "positions", pos)

    @property
    def n_channels(self):
        return len(self.channel_ids)

    @classmethod
    def normalized(cls, channel_ids, xy):
        """Min-max rescale arbitrary 2-D coordinates into the unit square."""
        xy = np.asarray(xy, dtype=np.float64)
        lo = xy.min(axis=0)
        span = np.where(xy.max(axis=0) > lo, xy.max(axis=0) - lo, 1.0)
        return cls(tuple(channel_ids), (xy - lo) / span)

    def subset(self, idx):
        idx = np.asarray(idx)
        return SensorLayout(tuple(self.channel_ids[i] for i in idx), self.positions[idx])


def read_layout(path) -> SensorLayout:
    lines = [ln for ln in Path(path).read_text().splitlines() if ln.strip() and not ln.startswith("#")]
    if not lines or lines[0].split("\t") != ["channel_id", "x", "y"]:
        raise FormatError(f"{path}: layout header must be channel_id<TAB>x<TAB>y")
    ids, xy = [], []
    for ln in lines[1:]:
        cid, x, y = ln.split("\t")
        ids.append(cid)
        xy.append((float(x), float(y)))
    return SensorLayout(tuple(ids), np.array(xy).reshape(-1, 2))


def write_layout(path, layout: SensorLayout) -> None:
    rows = ["channel_id\tx\ty"] + [
        f"{cid}\t{x!r}\t{y!r}" for cid, (x, y) in zip(layout.channel_ids, layout.positions.tolist())
    ]
    Path(path).write_text("\n".join(rows) + "\n")


# ---------------------------------------------------------------------------
# latent banks
# ---------------------------------------------------------------------------


class LatentBank:
    """Image id -> feature vector, plus statistics fitted on training images."""

    def __init__(self, name, ids, vectors, train_ids=None):
        vectors = np.asarray(vectors, dtype=np.float64)
        if vectors.ndim != 2:
            raise ValueError("latent matrix must be 2-D")
        ids = [str(i) for i in ids]
        if len(ids) != vectors.shape[0]:
            raise ValueError(f"{len(ids)} ids for {vectors.shape[0]} rows")
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate image id in latent bank")
        if not np.all(np.isfinite(vectors)):
            raise ValueError("latent bank contains non-finite values")
        self.name = name
        self.ids = ids
        self.vectors = vectors
        self.vectors.setflags(write=False)
        self._index = {k: i for i, k in enumerate(ids)}
        self._train_ids = None if train_ids is None else tuple(train_ids)
        self._stats = None

    @property
    def F(self):
        return self.vectors.shape[1]

    def __len__(self):
        return len(self.ids)

    def __contains__(self, image_id):
        return image_id in self._index

    def get(self, image_ids):
        try:
            return self.vectors[[self._index[i] for i in image_ids]]
        except KeyError as exc:
            raise KeyError(f"image {exc.args[0]!r} not in bank {self.name!r}") from None

    def with_train_ids(self, train_ids):
        missing = [i for i in train_ids if i not in self._index]
        if missing:
            raise KeyError(f"training ids missing from bank: {missing[:3]}")
        return LatentBank(self.name, self.ids, self.vectors, train_ids)

    def _fit(self):
        if self._train_ids is None:
            raise ValueError("bank has no training ids; call with_train_ids first")
        uniq = sorted(set(self._train_ids))
        if len(uniq) < 2:
            raise ValueError("train statistics need at least 2 training entries")
        Z = self.get(uniq)
        mean = Z.mean(axis=0)
        std = Z.std(axis=0)
        if np.any(std <= 0):
            raise ValueError("zero train std for some latent feature")
        self._stats = (mean, std)

    @property
    def train_mean(self):
        if self._stats is None:
            self._fit()
        return self._stats[0]

    @property
    def train_std(self):
        if self._stats is None:
            self._fit()
        return self._stats[1]

    def save(self, path):
        path = Path(path)
        save_array(path, self.vectors)
        ids_path(path).write_text("\n".join(self.ids) + "\n")


def ids_path(path) -> Path:
    path = Path(path)
    return path.with_suffix(".ids")


def load_latent_bank(path, name=None, train_ids=None) -> LatentBank:
    path = Path(path)
    vectors = read_tensor(path)
    if vectors.ndim != 2:
        raise FormatError(f"{path}: latent bank must be [N, F], got shape {vectors.shape}")
    ids = [ln for ln in ids_path(path).read_text().splitlines() if ln]
    if len(ids) != vectors.shape[0]:
        raise FormatError(f"{path}: {len(ids)} ids for {vectors.shape[0]} rows")
    return LatentBank(name or path.stem, ids, vectors, train_ids)
