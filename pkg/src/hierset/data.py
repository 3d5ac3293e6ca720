"""Feature matrices, attribute tables, fitted heads, and their file formats.

Feature activations travel as delimited text plus a JSON manifest so every
pipeline stage can be run, inspected, and re-run from files alone.  Floats
are written with 17 significant digits, which round-trips IEEE doubles
exactly.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .exceptions import ValidationError
from .validation import as_binary_matrix, as_float_matrix, as_labels, require

SPLITS = ("train", "calibration", "test")

_FLOAT_FMT = "%.17g"

_MANIFEST_KEYS = (
    "n_samples",
    "n_features",
    "n_classes",
    "split",
    "map_height",
    "map_width",
    "data_file",
    "maps_file",
)


def _fmt(x):
    return _FLOAT_FMT % x


@dataclass
class FeatureMatrix:
    """Per-sample feature activations with labels and a split tag.

    ``spatial_maps`` optionally carries the unpooled N x Q x h x w maps the
    pooled values came from; when present, each pooled value must equal the
    mean of its map (checked on construction).  Arrays are marked read-only:
    instances are treated as immutable after construction.
    """

    values: np.ndarray
    labels: np.ndarray
    n_classes: int
    split: str
    sample_ids: list = field(default_factory=list)
    spatial_maps: np.ndarray | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ValidationError(
                f"values must be 2-dimensional, got shape {self.values.shape}"
            )
        if not np.all(np.isfinite(self.values)):
            raise ValidationError("values contains non-finite entries")
        n, q = self.values.shape
        require(q >= 1, "need at least one feature")
        require(self.n_classes >= 1, "n_classes must be >= 1")
        require(self.split in SPLITS, f"unknown split tag {self.split!r}")
        self.labels = as_labels(self.labels, self.n_classes)
        require(
            self.labels.shape[0] == n,
            f"got {self.labels.shape[0]} labels for {n} samples",
        )
        if not self.sample_ids:
            self.sample_ids = [f"{self.split}-{i:06d}" for i in range(n)]
        self.sample_ids = [str(s) for s in self.sample_ids]
        require(
            len(self.sample_ids) == n,
            f"got {len(self.sample_ids)} sample ids for {n} samples",
        )
        require(
            len(set(self.sample_ids)) == len(self.sample_ids),
            "sample ids must be unique",
        )
        if self.spatial_maps is not None:
            maps = np.asarray(self.spatial_maps, dtype=np.float64)
            if maps.ndim != 4 or maps.shape[:2] != (n, q):
                raise ValidationError(
                    f"spatial_maps must have shape ({n}, {q}, h, w), got {maps.shape}"
                )
            pooled = maps.mean(axis=(2, 3))
            if not np.allclose(pooled, self.values, rtol=1e-9, atol=1e-12):
                raise ValidationError(
                    "pooled values disagree with the mean of the spatial maps"
                )
            self.spatial_maps = maps
            self.spatial_maps.flags.writeable = False
        self.values.flags.writeable = False
        self.labels.flags.writeable = False

    @property
    def n_samples(self):
        return self.values.shape[0]

    @property
    def n_features(self):
        return self.values.shape[1]

    @property
    def map_shape(self):
        if self.spatial_maps is None:
            return None
        return self.spatial_maps.shape[2:]


@dataclass
class AttributeTable:
    """Binary per-sample attribute annotations, aligned with a FeatureMatrix."""

    per_sample: np.ndarray
    attribute_names: list
    sample_ids: list | None = None

    def __post_init__(self):
        self.per_sample = as_binary_matrix(self.per_sample, "per_sample")
        require(
            len(self.attribute_names) == self.per_sample.shape[1],
            "attribute_names length must match the attribute count",
        )
        self.attribute_names = [str(a) for a in self.attribute_names]
        if self.sample_ids is not None:
            require(
                len(self.sample_ids) == self.per_sample.shape[0],
                "sample_ids length must match the sample count",
            )
            self.sample_ids = [str(s) for s in self.sample_ids]

    @property
    def n_attributes(self):
        return self.per_sample.shape[1]


@dataclass
class ModelHead:
    """A fitted head: feature selection, per-class assignment, and transform stats.

    ``selection`` is a binary vector over the raw feature space.  ``assignment``
    holds one binary row per class over the selected features in ascending raw
    index order; every row sums to ``n_per_class`` and no two rows are equal.
    ``mu``/``sigma`` are the train normalization statistics and ``active_mean``
    the per-feature mean of the active component, used for saliency scaling.
    """

    selection: np.ndarray
    assignment: np.ndarray
    mu: np.ndarray
    sigma: np.ndarray
    active_mean: np.ndarray
    n_per_class: int
    k_features: int

    def __post_init__(self):
        sel = np.asarray(self.selection)
        if not np.isin(sel, (0, 1)).all() or sel.ndim != 1:
            raise ValidationError("selection must be a binary vector")
        self.selection = sel.astype(np.int8)
        k = int(self.selection.sum())
        require(
            k == self.k_features,
            f"selection has {k} active features, expected {self.k_features}",
        )
        self.assignment = as_binary_matrix(self.assignment, "assignment")
        c, kk = self.assignment.shape
        require(
            kk == self.k_features,
            f"assignment has {kk} columns, expected {self.k_features}",
        )
        sums = self.assignment.sum(axis=1)
        if not np.all(sums == self.n_per_class):
            bad = int(np.argmax(sums != self.n_per_class))
            raise ValidationError(
                f"assignment row {bad} sums to {int(sums[bad])}, "
                f"expected {self.n_per_class}"
            )
        seen = {}
        for i, row in enumerate(map(tuple, self.assignment)):
            if row in seen:
                raise ValidationError(
                    f"duplicate class representation: classes {seen[row]} and {i}"
                )
            seen[row] = i
        for name in ("mu", "sigma", "active_mean"):
            vec = np.asarray(getattr(self, name), dtype=np.float64)
            require(
                vec.shape == (self.k_features,),
                f"{name} must have length {self.k_features}",
            )
            require(np.all(np.isfinite(vec)), f"{name} contains non-finite entries")
            setattr(self, name, vec)
        require(np.all(self.sigma > 0), "sigma entries must be strictly positive")

    @property
    def n_classes(self):
        return self.assignment.shape[0]

    @property
    def selected_indices(self):
        """Raw indices of the selected features, ascending."""
        return np.flatnonzero(self.selection)

    def assignment_full(self):
        """The assignment expanded to the raw feature space (C x Q_raw)."""
        full = np.zeros((self.n_classes, self.selection.shape[0]), dtype=np.int8)
        full[:, self.selected_indices] = self.assignment
        return full


def save_feature_matrix(fm, data_path, manifest_path, maps_path=None):
    """Write a FeatureMatrix as CSV + JSON manifest (+ optional flat map file).

    The maps file is raw float64, little-endian, row-major over
    (sample, feature, row, col).
    """
    data_path = Path(data_path)
    manifest_path = Path(manifest_path)
    header = ["sample_id", "label"] + [f"f{j}" for j in range(fm.n_features)]
    with open(data_path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for i in range(fm.n_samples):
            row = [fm.sample_ids[i], str(int(fm.labels[i]))]
            row.extend(_fmt(v) for v in fm.values[i])
            writer.writerow(row)
    manifest = {
        "n_samples": fm.n_samples,
        "n_features": fm.n_features,
        "n_classes": fm.n_classes,
        "split": fm.split,
        "map_height": None,
        "map_width": None,
        "data_file": data_path.name,
        "maps_file": None,
    }
    if fm.spatial_maps is not None:
        if maps_path is None:
            maps_path = data_path.with_suffix(".maps.bin")
        maps_path = Path(maps_path)
        fm.spatial_maps.astype("<f8").tofile(maps_path)
        h, w = fm.map_shape
        manifest["map_height"] = int(h)
        manifest["map_width"] = int(w)
        manifest["maps_file"] = maps_path.name
    with open(manifest_path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_feature_matrix(data_path, manifest_path):
    """Load a FeatureMatrix from a data file and its manifest.

    The maps file named in the manifest is resolved relative to the manifest's
    directory.  Raises ValidationError on any shape, header, label, or numeric
    problem; missing files surface as FileNotFoundError.
    """
    data_path = Path(data_path)
    manifest_path = Path(manifest_path)
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    missing = [k for k in _MANIFEST_KEYS if k not in manifest]
    if missing:
        raise ValidationError(f"manifest missing keys: {missing}")
    n = int(manifest["n_samples"])
    q = int(manifest["n_features"])
    c = int(manifest["n_classes"])
    split = manifest["split"]
    require(n >= 1, "manifest declares an empty data file")

    with open(data_path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValidationError(f"{data_path}: empty data file") from None
        expected = ["sample_id", "label"] + [f"f{j}" for j in range(q)]
        if header != expected:
            if header[:2] != ["sample_id", "label"]:
                raise ValidationError(f"{data_path}: missing or malformed header")
            raise ValidationError(
                f"{data_path}: header declares {len(header) - 2} features, "
                f"manifest declares {q}"
            )
        sample_ids = []
        labels = []
        values = np.empty((n, q), dtype=np.float64)
        for i, row in enumerate(reader):
            if i >= n:
                raise ValidationError(
                    f"{data_path}: more rows than the manifest's {n} samples"
                )
            if len(row) != q + 2:
                raise ValidationError(
                    f"{data_path}: row {i} has {len(row)} fields, expected {q + 2}"
                )
            sample_ids.append(row[0])
            try:
                labels.append(int(row[1]))
                values[i] = [float(v) for v in row[2:]]
            except ValueError as exc:
                raise ValidationError(f"{data_path}: row {i}: {exc}") from None
        if len(sample_ids) != n:
            raise ValidationError(
                f"{data_path}: {len(sample_ids)} rows, manifest declares {n}"
            )

    spatial_maps = None
    if manifest.get("maps_file"):
        h = int(manifest["map_height"])
        w = int(manifest["map_width"])
        maps_path = manifest_path.parent / manifest["maps_file"]
        flat = np.fromfile(maps_path, dtype="<f8")
        if flat.size != n * q * h * w:
            raise ValidationError(
                f"{maps_path}: {flat.size} values, expected {n * q * h * w}"
            )
        spatial_maps = flat.reshape(n, q, h, w)

    return FeatureMatrix(
        values=values,
        labels=np.asarray(labels),
        n_classes=c,
        split=split,
        sample_ids=sample_ids,
        spatial_maps=spatial_maps,
    )


def save_model_head(head, path):
    """Serialize a ModelHead to JSON."""
    payload = {
        "selection": [int(v) for v in head.selection],
        "assignment": [[int(v) for v in row] for row in head.assignment],
        "mu": list(map(float, head.mu)),
        "sigma": list(map(float, head.sigma)),
        "active_mean": list(map(float, head.active_mean)),
        "n_per_class": int(head.n_per_class),
        "k_features": int(head.k_features),
    }
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_model_head(path):
    """Load a ModelHead from JSON, re-validating every invariant."""
    with open(path) as fh:
        payload = json.load(fh)
    try:
        return ModelHead(
            selection=np.asarray(payload["selection"]),
            assignment=np.asarray(payload["assignment"]),
            mu=np.asarray(payload["mu"], dtype=np.float64),
            sigma=np.asarray(payload["sigma"], dtype=np.float64),
            active_mean=np.asarray(payload["active_mean"], dtype=np.float64),
            n_per_class=int(payload["n_per_class"]),
            k_features=int(payload["k_features"]),
        )
    except KeyError as exc:
        raise ValidationError(f"{path}: head file missing field {exc}") from None


def split_calibration(fm, per_class):
    """Carve a calibration split off a test FeatureMatrix.

    Takes the first ``per_class`` samples of every class in stored order;
    the remainder keeps the test tag.  Returns (calibration, test).
    """
    require(fm.split == "test", "split_calibration expects a test matrix")
    require(per_class >= 0, "per_class must be >= 0")
    if per_class == 0:
        empty = _empty_like(fm, "calibration")
        return empty, fm
    take = np.zeros(fm.n_samples, dtype=bool)
    for c in range(fm.n_classes):
        idx = np.flatnonzero(fm.labels == c)
        if idx.size < per_class:
            raise ValidationError(
                f"class {c} has {idx.size} samples, need {per_class} for calibration"
            )
        take[idx[:per_class]] = True
    return _subset(fm, np.flatnonzero(take), "calibration"), _subset(
        fm, np.flatnonzero(~take), "test"
    )


def _subset(fm, indices, split):
    maps = None if fm.spatial_maps is None else fm.spatial_maps[indices]
    return FeatureMatrix(
        values=fm.values[indices],
        labels=fm.labels[indices],
        n_classes=fm.n_classes,
        split=split,
        sample_ids=[fm.sample_ids[i] for i in indices],
        spatial_maps=maps,
    )


def _empty_like(fm, split):
    # Zero-sample matrices only arise from split_calibration(per_class=0);
    # bypass __post_init__'s shape checks deliberately.
    empty = FeatureMatrix.__new__(FeatureMatrix)
    empty.values = np.empty((0, fm.n_features), dtype=np.float64)
    empty.labels = np.empty((0,), dtype=np.int64)
    empty.n_classes = fm.n_classes
    empty.split = split
    empty.sample_ids = []
    empty.spatial_maps = None
    return empty


def class_attribute_means(table, labels, n_classes=None):
    """Mean attribute vector per class: a C x A matrix with entries in [0, 1]."""
    if n_classes is None:
        n_classes = int(np.max(labels)) + 1 if len(labels) else 0
    labels = as_labels(labels, n_classes)
    require(
        labels.shape[0] == table.per_sample.shape[0],
        "labels must align with the attribute table rows",
    )
    out = np.empty((n_classes, table.n_attributes), dtype=np.float64)
    for c in range(n_classes):
        mask = labels == c
        if not mask.any():
            raise ValidationError(f"class {c} has no samples")
        out[c] = table.per_sample[mask].mean(axis=0)
    return out


def load_attribute_table(path):
    """Read an attribute table CSV: sample_id column plus binary attribute columns."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValidationError(f"{path}: empty attribute file") from None
        if not header or header[0] != "sample_id":
            raise ValidationError(f"{path}: first column must be sample_id")
        names = header[1:]
        ids = []
        rows = []
        for i, row in enumerate(reader):
            if len(row) != len(header):
                raise ValidationError(f"{path}: row {i} has {len(row)} fields")
            ids.append(row[0])
            try:
                rows.append([int(v) for v in row[1:]])
            except ValueError as exc:
                raise ValidationError(f"{path}: row {i}: {exc}") from None
    return AttributeTable(
        per_sample=np.asarray(rows, dtype=np.int8),
        attribute_names=names,
        sample_ids=ids,
    )


def save_attribute_table(table, path):
    """Write an attribute table CSV."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["sample_id"] + list(table.attribute_names))
        ids = table.sample_ids or [str(i) for i in range(table.per_sample.shape[0])]
        for sid, row in zip(ids, table.per_sample):
            writer.writerow([sid] + [str(int(v)) for v in row])
