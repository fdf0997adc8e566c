"""Dataset ingestion, synthetic desk-scale data, and model checkpoints.

Grids are 64x64 float64 arrays with values in [0, 255]; labels are
``0`` (H0, pristine) and ``1`` (H1, malicious).
"""
import csv
import hashlib
import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .models import GRID, EnsembleModel
from .tensor import ModelGraph, OpNode, Tensor

LABEL_NAMES = {"0": 0, "1": 1, "h0": 0, "h1": 1, "pristine": 0, "benign": 0, "malicious": 1}


class DataError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class Example:
    grid: np.ndarray
    label: int
    source_id: str = ""

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=np.float64)
        if self.grid.shape != (GRID, GRID):
            raise DataError(f"grid must be {GRID}x{GRID}, got {self.grid.shape}")
        if self.grid.min() < 0 or self.grid.max() > 255:
            raise DataError("grid values must lie in [0, 255]")
        if self.label not in (0, 1):
            raise DataError(f"label must be 0 or 1, got {self.label!r}")


@dataclass
class Dataset:
    """A batch of examples held as arrays: ``x`` (n, 64, 64), ``y`` (n,)."""

    x: np.ndarray
    y: np.ndarray
    ids: list = field(default_factory=list)

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        if not self.ids:
            self.ids = [str(i) for i in range(len(self.y))]
        if len(self.x) != len(self.y) or len(self.ids) != len(self.y):
            raise DataError("x, y and ids must have the same length")

    def __len__(self):
        return len(self.y)

    def subset(self, idx):
        idx = np.asarray(idx, dtype=np.intp)
        return Dataset(self.x[idx], self.y[idx], [self.ids[i] for i in idx])

    def of_class(self, label):
        return self.subset(np.flatnonzero(self.y == label))

    def examples(self):
        return [Example(g, int(l), s) for g, l, s in zip(self.x, self.y, self.ids)]

    @classmethod
    def from_examples(cls, examples):
        return cls(np.stack([e.grid for e in examples]), np.array([e.label for e in examples]),
                   [e.source_id for e in examples])

    @classmethod
    def concat(cls, parts):
        return cls(np.concatenate([p.x for p in parts]), np.concatenate([p.y for p in parts]),
                   [i for p in parts for i in p.ids])

    def save(self, path):
        np.savez(path, x=self.x, y=self.y, ids=np.array(self.ids))

    @classmethod
    def load(cls, path):
        with np.load(path) as z:
            return cls(z["x"], z["y"], [str(s) for s in z["ids"]])


# --------------------------------------------------------------------------- CSV

@dataclass
class FeatureRow:
    values: np.ndarray
    label: int

    def __eq__(self, other):
        return (isinstance(other, FeatureRow) and self.label == other.label
                and np.array_equal(self.values, other.values))


@dataclass
class CsvSchema:
    width: int
    label_column: str = "label"


def _parse_label(text, lineno):
    key = text.strip().lower()
    if key in LABEL_NAMES:
        return LABEL_NAMES[key]
    raise DataError(f"line {lineno}: unrecognised label {text!r}")


def load_csv(path, schema):
    """Read feature rows from a headered, comma-delimited UTF-8 file."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such dataset file: {path}")
    rows = []
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        if schema.label_column not in header:
            raise DataError(f"{path}: header lacks label column {schema.label_column!r}")
        label_at = header.index(schema.label_column)
        if len(header) - 1 != schema.width:
            raise DataError(f"{path}: header has {len(header) - 1} feature columns, schema expects {schema.width}")
        for lineno, cells in enumerate(reader, start=2):
            if not cells:
                continue
            if len(cells) != len(header):
                raise DataError(f"line {lineno}: expected {len(header)} cells, found {len(cells)}")
            label = _parse_label(cells[label_at], lineno)
            feats = cells[:label_at] + cells[label_at + 1:]
            try:
                values = np.array([float(c) for c in feats])
            except ValueError:
                raise DataError(f"line {lineno}: non-numeric cell") from None
            if not np.all(np.isfinite(values)):
                raise DataError(f"line {lineno}: non-finite value")
            rows.append(FeatureRow(values, label))
    return rows


def write_csv(rows, path, schema):
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow([f"f{i}" for i in range(schema.width)] + [schema.label_column])
        for r in rows:
            w.writerow([repr(float(v)) for v in r.values] + [r.label])


@dataclass
class NormStats:
    minimum: np.ndarray
    maximum: np.ndarray

    @classmethod
    def fit(cls, rows):
        data = np.stack([r.values for r in rows])
        return cls(data.min(axis=0), data.max(axis=0))

    def as_dict(self):
        return {"min": self.minimum.tolist(), "max": self.maximum.tolist()}


def to_grid(row, stats, mode="tile", source_id=""):
    """Map a feature row to a 64x64 grid.

    Each feature is min-max scaled to [0, 255] with the training-split
    statistics (clamped; constant features map to 0), then the vector is
    tiled cyclically (``mode="tile"``) or zero-padded (``mode="pad"``) to
    4096 cells and reshaped row-major.
    """
    v = np.asarray(row.values, dtype=np.float64)
    if v.shape != stats.minimum.shape:
        raise DataError(f"row width {v.size} does not match statistics width {stats.minimum.size}")
    span = stats.maximum - stats.minimum
    with np.errstate(divide="ignore", invalid="ignore"):
        scaled = np.where(span > 0, (v - stats.minimum) / np.where(span > 0, span, 1.0), 0.0)
    scaled = np.clip(scaled, 0.0, 1.0) * 255.0
    cells = GRID * GRID
    if mode == "tile":
        flat = np.resize(scaled, cells)
    elif mode == "pad":
        flat = np.zeros(cells)
        flat[:min(cells, scaled.size)] = scaled[:cells]
    else:
        raise ValueError(f"unknown grid mode {mode!r}")
    return Example(flat.reshape(GRID, GRID), row.label, source_id)


def subsample_rows(rows, limit, seed):
    if limit is None or limit >= len(rows):
        return list(rows)
    pick = np.sort(np.random.default_rng(seed).choice(len(rows), size=limit, replace=False))
    return [rows[i] for i in pick]


@dataclass
class Manifest:
    """Dataset manifest: CSV paths, feature width, label column, split seed."""

    paths: list
    width: int
    label_column: str = "label"
    split_seed: int = 0
    subsample: int = None
    grid_mode: str = "tile"

    @classmethod
    def load(cls, path):
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"no such manifest: {path}")
        raw = json.loads(path.read_text())
        base = path.parent
        raw["paths"] = [str((base / p) if not os.path.isabs(p) else p) for p in raw["paths"]]
        return cls(**raw)

    def rows(self):
        schema = CsvSchema(self.width, self.label_column)
        rows = [r for p in self.paths for r in load_csv(p, schema)]
        return subsample_rows(rows, self.subsample, self.split_seed)


def rows_to_dataset(rows, stats, mode="tile", prefix="row"):
    return Dataset.from_examples([to_grid(r, stats, mode, f"{prefix}{i}") for i, r in enumerate(rows)])


# --------------------------------------------------------------------- synthetic

# (u, v) integer frequencies of the cosine products; distinct pairs are
# orthogonal over the 64-point grid
_CLASS_FREQS = {0: ((1, 2), (3, 1)), 1: ((2, 1), (1, 3))}
_NUISANCE_FREQS = ((0, 1), (1, 0), (2, 2))
TEMPLATE_AMPLITUDE = 40.0
NUISANCE_AMPLITUDE = 50.0


def _wave(fu, fv):
    u = np.arange(GRID) / GRID
    return np.outer(np.cos(2 * np.pi * fu * u), np.cos(2 * np.pi * fv * u))


def class_template(label):
    return sum(_wave(*f) for f in _CLASS_FREQS[label]) / len(_CLASS_FREQS[label])


def synth_dataset(n_per_class, difficulty=0.0, seed=0):
    """Two-class 64x64 dataset of low-frequency class patterns plus noise.

    Each grid is ``127.5 + a * 40 * T_c + sum_j b_j * 50 * N_j + noise`` with
    ``a ~ U(0.6, 1)``, ``b_j ~ U(-1, 1)``, class template ``T_c`` and nuisance
    waves ``N_j`` at frequencies disjoint from both templates, and white noise
    of standard deviation ``2 + 30 * difficulty``. At difficulty 0 the
    template-difference projection separates the classes by a wide margin.
    """
    if n_per_class < 1:
        raise ValueError("n_per_class must be >= 1")
    rng = np.random.default_rng(seed)
    nuisance = np.stack([_wave(*f) for f in _NUISANCE_FREQS])
    xs, ys = [], []
    for label in (0, 1):
        t = class_template(label)
        a = rng.uniform(0.6, 1.0, size=n_per_class)
        b = rng.uniform(-1.0, 1.0, size=(n_per_class, len(_NUISANCE_FREQS)))
        noise = rng.normal(0.0, 2.0 + 30.0 * difficulty, size=(n_per_class, GRID, GRID))
        grids = (127.5 + TEMPLATE_AMPLITUDE * a[:, None, None] * t
                 + NUISANCE_AMPLITUDE * np.einsum("nj,jhw->nhw", b, nuisance) + noise)
        xs.append(np.clip(grids, 0.0, 255.0))
        ys.append(np.full(n_per_class, label))
    order = rng.permutation(2 * n_per_class)
    x = np.concatenate(xs)[order]
    y = np.concatenate(ys)[order]
    return Dataset(x, y, [f"synth{seed}-{i}" for i in range(len(y))])


# -------------------------------------------------------------------- checkpoints

MAGIC = b"SPZ1"
FORMAT_VERSION = 1


def _graph_from_descriptor(desc):
    nodes = []
    for layer in desc["layers"]:
        params = {k: Tensor(np.zeros(shape)) for k, shape in layer.get("params", {}).items()}
        attrs = dict(layer.get("attrs", {}))
        if "shape" in attrs:
            attrs["shape"] = tuple(attrs["shape"])
        state = None
        if layer["kind"] == "batchnorm":
            c = layer["params"]["gamma"][0]
            state = {"mean": np.zeros(c), "var": np.ones(c)}
        nodes.append(OpNode(layer["kind"], params, attrs, layer.get("tap"), state))
    return ModelGraph(desc["name"], desc["input_shape"], nodes)


def _pack(model):
    if isinstance(model, EnsembleModel):
        graphs = model.graphs()
        meta = {
            "kind": "ensemble",
            "leg_threshold": model.leg_threshold,
            "mal_threshold": model.mal_threshold,
            "combiner_trained": model.combiner_trained,
        }
    elif isinstance(model, ModelGraph):
        graphs = {"graph": model}
        meta = {"kind": "graph"}
    else:
        raise TypeError(f"cannot checkpoint {type(model).__name__}")
    arrays = []
    layout = {}
    for gname, g in graphs.items():
        entries = []
        for key, arr in g.state_arrays().items():
            a = np.ascontiguousarray(arr, dtype="<f8")
            entries.append({"key": key, "shape": list(a.shape)})
            arrays.append(a)
        layout[gname] = {"descriptor": g.descriptor(), "arrays": entries}
    # JSON keys are sorted on write, so the payload order is recorded explicitly
    meta.update({"version": FORMAT_VERSION, "graphs": layout, "order": list(graphs)})
    return meta, arrays


def save_checkpoint(model, path, extra=None):
    """Write ``model`` (a graph or an ensemble) to a ``.spz`` file atomically.

    Layout: magic, u32 version, u64 header length, JSON header, raw
    little-endian float64 arrays, then a SHA-256 digest of everything before.
    """
    meta, arrays = _pack(model)
    if extra:
        meta["extra"] = extra
    header = json.dumps(meta, sort_keys=True).encode("utf-8")
    body = MAGIC + struct.pack("<IQ", FORMAT_VERSION, len(header)) + header + b"".join(a.tobytes() for a in arrays)
    blob = body + hashlib.sha256(body).digest()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def read_checkpoint_header(path):
    blob = Path(path).read_bytes()
    if len(blob) < len(MAGIC) + 12 + 32 or blob[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    body, digest = blob[:-32], blob[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError(f"{path}: checksum mismatch (corrupt or truncated)")
    version, hlen = struct.unpack("<IQ", body[4:16])
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    meta = json.loads(body[16:16 + hlen].decode("utf-8"))
    return meta, body[16 + hlen:]


def load_checkpoint(path, expected=None):
    """Load a ``.spz`` file. ``expected`` (a graph, ensemble or descriptor)
    makes an architecture mismatch an error."""
    meta, payload = read_checkpoint_header(path)
    offset = 0
    graphs = {}
    for gname in meta["order"]:
        entry = meta["graphs"][gname]
        g = _graph_from_descriptor(entry["descriptor"])
        arrays = {}
        for a in entry["arrays"]:
            count = int(np.prod(a["shape"], dtype=np.int64))
            arr = np.frombuffer(payload, dtype="<f8", count=count, offset=offset).reshape(a["shape"])
            arrays[a["key"]] = arr.astype(np.float64)
            offset += 8 * count
        g.load_state_arrays(arrays)
        graphs[gname] = g
    if offset != len(payload):
        raise CheckpointError(f"{path}: payload size mismatch")
    if meta["kind"] == "ensemble":
        model = EnsembleModel(graphs["cnn2c"], graphs["leg"], graphs["mal"], graphs["combiner"],
                              meta["leg_threshold"], meta["mal_threshold"], meta["combiner_trained"])
    else:
        model = graphs["graph"]
    if expected is not None:
        want = expected if isinstance(expected, dict) else expected.descriptor()
        if _normalise(model.descriptor()) != _normalise(want):
            raise CheckpointError(f"{path}: architecture descriptor does not match the expected model")
    return model


def _normalise(desc):
    return json.loads(json.dumps(desc, sort_keys=True))


def checkpoint_extra(path):
    meta, _ = read_checkpoint_header(path)
    return meta.get("extra")
