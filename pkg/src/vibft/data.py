"""Synthetic datasets with planted shortcut features, CSV I/O, subsampling, label maps.

Each synthetic example has three column groups, in this order:

``relevant``
    drawn from ``N(mean_y, I)`` where the class means are centred and their
    closest pair sits ``margin`` apart.
``shortcut``
    a noiseless code for a shortcut class.  With probability ``rho`` the
    shortcut class is the true label, otherwise it is redrawn uniformly
    over all classes, so a shortcut-only reader is right with probability
    ``rho + (1 - rho) / C``.  On ``test_ood`` the shortcut class is drawn
    independently of the label.
``noise``
    label-independent standard normals.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .numkit import Rng

SPLITS = ("train", "val", "test_id", "test_ood")
DEFAULT_SIZES = {"train": 1000, "val": 500, "test_id": 2000, "test_ood": 2000}
SIZE_LADDER = (200, 500, 800, 1000, 3000, 6000)


class DataError(ValueError):
    pass


class SizeError(DataError):
    pass


class ParseError(DataError):
    def __init__(self, message: str, line: int | None = None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line


class SchemaError(DataError):
    pass


class EmptyDatasetError(DataError):
    pass


class MappingError(DataError):
    pass


@dataclass(frozen=True)
class SyntheticSpec:
    num_classes: int = 3
    relevant_dims: int = 8
    shortcut_dims: int = 8
    noise_dims: int = 48
    shortcut_correlation: float = 0.9
    margin: float = 3.0
    shortcut_scale: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 2:
            raise DataError("num_classes: need at least 2 classes")
        if self.relevant_dims < 1:
            raise DataError("relevant_dims: need at least 1 relevant dimension")
        if self.shortcut_dims < 0 or self.noise_dims < 0:
            raise DataError("shortcut_dims/noise_dims: must be nonnegative")
        if not 0.0 <= self.shortcut_correlation <= 1.0:
            raise DataError(f"shortcut_correlation: must lie in [0, 1], got {self.shortcut_correlation}")
        if self.margin < 0:
            raise DataError("margin: must be nonnegative")

    @property
    def width(self) -> int:
        return self.relevant_dims + self.shortcut_dims + self.noise_dims

    @property
    def relevant_columns(self) -> range:
        return range(0, self.relevant_dims)

    @property
    def shortcut_columns(self) -> range:
        return range(self.relevant_dims, self.relevant_dims + self.shortcut_dims)

    @property
    def noise_columns(self) -> range:
        return range(self.relevant_dims + self.shortcut_dims, self.width)

    def shortcut_agreement(self, split: str) -> float:
        """Probability that the shortcut class equals the label on ``split``."""
        c = self.num_classes
        if split == "test_ood":
            return 1.0 / c
        return self.shortcut_correlation + (1.0 - self.shortcut_correlation) / c


def content_hash(features, labels) -> str:
    h = hashlib.sha256()
    if isinstance(features, np.ndarray):
        h.update(b"dense")
        h.update(np.asarray(features.shape, dtype="<i8").tobytes())
        h.update(np.ascontiguousarray(features, dtype="<f8").tobytes())
    else:
        h.update(b"tokens")
        h.update(json.dumps([list(map(int, t)) for t in features]).encode())
    h.update(np.ascontiguousarray(labels, dtype="<i8").tobytes())
    return h.hexdigest()


@dataclass(frozen=True, eq=False)
class Dataset:
    """Immutable examples of one split.

    ``features`` is an ``N x width`` float array or a list of token-id lists.
    """

    features: np.ndarray | tuple
    labels: np.ndarray
    num_classes: int
    split: str = "train"
    provenance: Mapping = field(default_factory=dict)
    shortcut: np.ndarray | None = None  # planted shortcut class per example, when known

    def __post_init__(self):
        labels = np.asarray(self.labels, dtype=np.int64)
        labels.flags.writeable = False
        object.__setattr__(self, "labels", labels)
        if isinstance(self.features, np.ndarray):
            feats = np.array(self.features, dtype=np.float64)
            feats.flags.writeable = False
            object.__setattr__(self, "features", feats)
            n = feats.shape[0]
        else:
            object.__setattr__(self, "features", tuple(tuple(int(t) for t in row) for row in self.features))
            n = len(self.features)
        if n != labels.shape[0]:
            raise DataError(f"{n} examples but {labels.shape[0]} labels")
        if n and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise SchemaError(f"labels must lie in [0, {self.num_classes})")
        prov = dict(self.provenance)
        prov["content_hash"] = content_hash(self.features, labels)
        object.__setattr__(self, "provenance", prov)

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def dense(self) -> bool:
        return isinstance(self.features, np.ndarray)

    @property
    def content_hash(self) -> str:
        return self.provenance["content_hash"]

    @property
    def spec(self) -> SyntheticSpec | None:
        raw = self.provenance.get("synthetic_spec")
        return SyntheticSpec(**raw) if raw else None

    def take(self, indices) -> Dataset:
        idx = np.asarray(indices, dtype=np.int64)
        feats = self.features[idx] if self.dense else tuple(self.features[i] for i in idx)
        prov = {k: v for k, v in self.provenance.items() if k != "content_hash"}
        shortcut = None if self.shortcut is None else self.shortcut[idx]
        return Dataset(feats, self.labels[idx], self.num_classes, self.split, prov, shortcut)

    def view(self, columns: Sequence[int], zero_others: bool = True) -> np.ndarray:
        """Feature matrix restricted to ``columns``.

        With ``zero_others`` the full width is kept and every other column is
        set to zero, which is the input a frozen encoder sees for the
        bias-only view.
        """
        if not self.dense:
            raise DataError("column views need dense features")
        cols = np.asarray(list(columns), dtype=np.int64)
        if not zero_others:
            return self.features[:, cols].copy()
        out = np.zeros_like(self.features)
        out[:, cols] = self.features[:, cols]
        return out

    def same_content(self, other: Dataset) -> bool:
        return self.content_hash == other.content_hash


def _class_means(spec: SyntheticSpec, rng: Rng) -> np.ndarray:
    raw = rng.gaussian((spec.num_classes, spec.relevant_dims))
    raw -= raw.mean(axis=0, keepdims=True)
    dists = [
        np.linalg.norm(raw[i] - raw[j]) for i in range(spec.num_classes) for j in range(i + 1, spec.num_classes)
    ]
    return raw * (spec.margin / min(dists))


def _shortcut_codes(spec: SyntheticSpec) -> np.ndarray:
    # dimension j carries an indicator of class j mod C
    codes = np.zeros((spec.num_classes, spec.shortcut_dims))
    for j in range(spec.shortcut_dims):
        codes[j % spec.num_classes, j] = spec.shortcut_scale
    return codes


def _draw_split(spec: SyntheticSpec, split: str, n: int, means: np.ndarray, rng: Rng) -> Dataset:
    c = spec.num_classes
    labels = rng.integers(c, n)
    relevant = means[labels] + rng.gaussian((n, spec.relevant_dims))
    if split == "test_ood":
        shortcut_cls = rng.integers(c, n)
    else:
        keep = rng.bernoulli(spec.shortcut_correlation, n)
        shortcut_cls = np.where(keep, labels, rng.integers(c, n))
    shortcut = _shortcut_codes(spec)[shortcut_cls]
    noise = rng.gaussian((n, spec.noise_dims))
    feats = np.concatenate([relevant, shortcut, noise], axis=1)
    prov = {"synthetic_spec": asdict(spec), "split": split}
    return Dataset(feats, labels, c, split, prov, shortcut=shortcut_cls)


def generate(spec: SyntheticSpec, sizes: Mapping[str, int] | None = None) -> dict[str, Dataset]:
    """Draw train/val/test_id/test_ood splits; a pure function of ``(spec, sizes)``."""
    sizes = dict(DEFAULT_SIZES if sizes is None else sizes)
    unknown = set(sizes) - set(SPLITS)
    if unknown:
        raise DataError(f"unknown split names {sorted(unknown)}")
    for name, n in sizes.items():
        if n < 1:
            raise SizeError(f"split {name} needs at least one example, got {n}")
    root = Rng(spec.seed)
    means = _class_means(spec, root.spawn("class-means"))
    return {name: _draw_split(spec, name, sizes[name], means, root.spawn(name)) for name in SPLITS if name in sizes}


def _stratified_order(labels: np.ndarray, num_classes: int, seed: int) -> np.ndarray:
    """An ordering of all indices whose every prefix is class-stratified.

    Each position goes to the class furthest below its proportional share,
    drawing that class's examples in a seeded random order.  Prefixes of one
    ordering are nested by construction.
    """
    rng = Rng(seed)
    pools = []
    for c in range(num_classes):
        idx = np.flatnonzero(labels == c)
        pools.append(idx[rng.spawn(f"class-{c}").permutation(idx.size)])
    n = labels.size
    share = np.array([p.size for p in pools], dtype=np.float64) / max(n, 1)
    taken = np.zeros(num_classes, dtype=np.int64)
    order = np.empty(n, dtype=np.int64)
    for t in range(n):
        deficit = share * (t + 1) - taken
        deficit[taken >= [p.size for p in pools]] = -np.inf
        c = int(np.argmax(deficit))
        order[t] = pools[c][taken[c]]
        taken[c] += 1
    return order


def subsample(data: Dataset, size: int, seed: int) -> Dataset:
    """Class-stratified sample without replacement, nested across sizes for one seed."""
    if size > len(data):
        raise SizeError(f"cannot draw {size} examples from a dataset of {len(data)}")
    if size < 0:
        raise SizeError("subsample size must be nonnegative")
    order = _stratified_order(data.labels, data.num_classes, seed)
    return data.take(np.sort(order[:size]))


@dataclass(frozen=True)
class CsvSchema:
    """Expected CSV layout: feature columns followed by a final ``label`` column.

    ``labels`` lists the allowed label strings; their positions are the class
    indices.  When omitted, labels are integers in ``[0, num_classes)``.
    """

    num_features: int | None = None
    num_classes: int | None = None
    labels: tuple[str, ...] | None = None

    def class_count(self) -> int:
        if self.labels is not None:
            return len(self.labels)
        if self.num_classes is None:
            raise SchemaError("schema needs labels or num_classes")
        return self.num_classes


def _format_float(v: float) -> str:
    return repr(float(v))


def dumps_csv(data: Dataset, schema: CsvSchema | None = None) -> str:
    if not data.dense:
        raise DataError("CSV export needs dense features")
    names = schema.labels if schema is not None and schema.labels is not None else None
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow([f"x{i}" for i in range(data.features.shape[1])] + ["label"])
    for row, y in zip(data.features, data.labels):
        writer.writerow([_format_float(v) for v in row] + [names[y] if names else str(int(y))])
    return buf.getvalue()


def atomic_write(path: os.PathLike | str, content: str | bytes) -> None:
    """Write via a temp file in the same directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.tmp-{os.getpid()}")
    mode = "wb" if isinstance(content, bytes) else "w"
    with open(tmp, mode, **({} if isinstance(content, bytes) else {"encoding": "utf-8", "newline": ""})) as fh:
        fh.write(content)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def save_csv(data: Dataset, path, schema: CsvSchema | None = None) -> None:
    atomic_write(path, dumps_csv(data, schema))


def load_csv(path, schema: CsvSchema, split: str = "train") -> Dataset:
    """Parse a CSV with a header row and a final ``label`` column."""
    path = Path(path)
    num_classes = schema.class_count()
    lookup = {name: i for i, name in enumerate(schema.labels)} if schema.labels is not None else None
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise EmptyDatasetError(f"{path}: file is empty") from None
        if not header or header[-1] != "label":
            raise SchemaError(f"{path}: last header column must be 'label'")
        width = len(header) - 1
        if schema.num_features is not None and width != schema.num_features:
            raise SchemaError(f"{path}: expected {schema.num_features} feature columns, found {width}")
        rows, labels = [], []
        for row in reader:
            line = reader.line_num
            if not row:
                continue
            if len(row) != width + 1:
                raise ParseError(f"expected {width + 1} fields, found {len(row)}", line)
            try:
                rows.append([float(v) for v in row[:-1]])
            except ValueError as exc:
                raise ParseError(f"bad number ({exc})", line) from None
            raw = row[-1].strip()
            if lookup is not None:
                if raw not in lookup:
                    raise SchemaError(f"line {line}: unknown label {raw!r}")
                labels.append(lookup[raw])
            else:
                try:
                    y = int(raw)
                except ValueError:
                    raise SchemaError(f"line {line}: unknown label {raw!r}") from None
                if not 0 <= y < num_classes:
                    raise SchemaError(f"line {line}: unknown label {raw!r}")
                labels.append(y)
    if not rows:
        raise EmptyDatasetError(f"{path}: no data rows")
    feats = np.asarray(rows, dtype=np.float64)
    if not np.all(np.isfinite(feats)):
        raise ParseError(f"{path}: non-finite feature value")
    return Dataset(feats, np.asarray(labels), num_classes, split, {"path": str(path)})


MANIFEST = "manifest.json"


def export_splits(splits: Mapping[str, Dataset], out_dir, extra: Mapping | None = None) -> dict:
    """Write one CSV per split and a JSON manifest with spec and content hashes."""
    out_dir = Path(out_dir)
    first = next(iter(splits.values()))
    manifest = {
        "num_classes": first.num_classes,
        "num_features": int(first.features.shape[1]),
        "synthetic_spec": first.provenance.get("synthetic_spec"),
        "splits": {name: {"file": f"{name}.csv", "size": len(ds), "content_hash": ds.content_hash}
                   for name, ds in splits.items()},
    }
    if extra:
        manifest.update(extra)
    for name, ds in splits.items():
        save_csv(ds, out_dir / f"{name}.csv")
    atomic_write(out_dir / MANIFEST, json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def load_splits(directory) -> dict[str, Dataset]:
    """Read a directory written by :func:`export_splits`, checking content hashes."""
    directory = Path(directory)
    manifest_path = directory / MANIFEST
    if not manifest_path.exists():
        raise FileNotFoundError(f"no dataset manifest at {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    schema = CsvSchema(num_features=manifest["num_features"], num_classes=manifest["num_classes"])
    spec = manifest.get("synthetic_spec")
    out = {}
    for name, info in manifest["splits"].items():
        ds = load_csv(directory / info["file"], schema, split=name)
        if ds.content_hash != info["content_hash"]:
            raise DataError(f"{name}: content hash does not match manifest")
        if spec:
            prov = {"synthetic_spec": spec, "split": name, "path": str(directory / info["file"])}
            ds = Dataset(ds.features, ds.labels, ds.num_classes, name, prov)
        out[name] = ds
    return out


@dataclass(frozen=True)
class LabelMap:
    source: tuple[str, ...]
    target: tuple[str, ...]
    mapping: Mapping[str, str]

    def __post_init__(self):
        missing = [s for s in self.source if s not in self.mapping]
        if missing:
            raise MappingError(f"label map is not total: no target for {missing}")
        bad = [t for t in self.mapping.values() if t not in self.target]
        if bad:
            raise MappingError(f"label map targets {bad} are not in the target label set")

    @classmethod
    def identity(cls, labels: Sequence[str]) -> LabelMap:
        return cls(tuple(labels), tuple(labels), {x: x for x in labels})

    def index_table(self) -> np.ndarray:
        return np.array([self.target.index(self.mapping[s]) for s in self.source], dtype=np.int64)


NLI_LABELS = ("entailment", "neutral", "contradiction")
# two-way targets where neutral and contradiction both mean "not entailed"
NLI_TO_ENTAILED = LabelMap(
    NLI_LABELS,
    ("entailed", "not-entailed"),
    {"entailment": "entailed", "neutral": "not-entailed", "contradiction": "not-entailed"},
)
# two-way targets that keep neutral; contradiction is read as neutral
NLI_TO_NEUTRAL = LabelMap(
    NLI_LABELS,
    ("entailment", "neutral"),
    {"entailment": "entailment", "neutral": "neutral", "contradiction": "neutral"},
)


def map_labels(predictions, label_map: LabelMap) -> np.ndarray:
    preds = np.asarray(predictions, dtype=np.int64)
    n = len(label_map.source)
    if preds.size and (preds.min() < 0 or preds.max() >= n):
        bad = preds[(preds < 0) | (preds >= n)][0]
        raise MappingError(f"prediction {bad} is outside the source label set of size {n}")
    return label_map.index_table()[preds]

