"""Labeled feature vectors and the line-oriented feature file format.

File layout (UTF-8, LF)::

    lsne-features 1 dims=<N>
    <label>,<f1>,...,<fN>

Lines beginning with ``#`` are comments.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass

import numpy as np

from ._textio import FormatError, fmt_float, write_text

HEADER_RE = re.compile(r"^lsne-features 1 dims=([0-9]+)$")


class FeatureFormatError(FormatError):
    pass


def _check_label(label):
    if not isinstance(label, str) or not label or "," in label or "\n" in label or "\r" in label:
        raise ValueError(f"invalid label token {label!r}")


@dataclass(frozen=True, eq=False)
class FeatureSet:
    """Ordered (label, vector) records sharing one dimensionality.

    ``vectors`` is an ``(n, dims)`` float64 array; row i belongs to ``labels[i]``.
    The arrays are made read-only on construction.
    """

    dims: int
    labels: tuple
    vectors: np.ndarray

    def __post_init__(self):
        if int(self.dims) < 1:
            raise ValueError("dims must be positive")
        vecs = np.array(self.vectors, dtype=np.float64).reshape(-1, int(self.dims))
        labels = tuple(self.labels)
        if len(labels) != vecs.shape[0]:
            raise ValueError("labels and vectors differ in length")
        for lab in set(labels):
            _check_label(lab)
        if not np.all(np.isfinite(vecs)):
            raise ValueError("feature vectors must be finite")
        vecs.setflags(write=False)
        object.__setattr__(self, "dims", int(self.dims))
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "vectors", vecs)

    @classmethod
    def from_groups(cls, groups, dims=None):
        """Build from a ``label -> (n, dims) array`` mapping, in mapping order."""
        labels, blocks = [], []
        for lab, arr in groups.items():
            arr = np.atleast_2d(np.asarray(arr, dtype=np.float64))
            labels.extend([lab] * arr.shape[0])
            blocks.append(arr)
        if dims is None:
            if not blocks:
                raise ValueError("dims required for an empty set")
            dims = blocks[0].shape[1]
        vecs = np.concatenate(blocks) if blocks else np.empty((0, dims))
        return cls(dims, tuple(labels), vecs)

    def __len__(self):
        return len(self.labels)

    def __eq__(self, other):
        if not isinstance(other, FeatureSet):
            return NotImplemented
        return (
            self.dims == other.dims
            and self.labels == other.labels
            and np.array_equal(self.vectors, other.vectors)
        )

    __hash__ = None

    @property
    def label_set(self):
        """Distinct labels in order of first appearance."""
        return list(dict.fromkeys(self.labels))

    def label_array(self):
        return np.array(self.labels, dtype=object)

    def by_label(self):
        """Group vectors per label, keyed in order of first appearance."""
        lab = self.label_array()
        return {name: self.vectors[lab == name] for name in self.label_set}

    def subset(self, mask):
        mask = np.asarray(mask, dtype=bool)
        return FeatureSet(self.dims, tuple(np.asarray(self.labels, dtype=object)[mask]), self.vectors[mask])


def load_features(path) -> FeatureSet:
    with open(path, encoding="utf-8", newline="") as fh:
        text = fh.read()
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise FeatureFormatError(f"{path}: empty file, line 1")
    m = HEADER_RE.match(lines[0].rstrip("\r"))
    if m is None:
        raise FeatureFormatError(f"{path}: malformed header, line 1")
    dims = int(m.group(1))
    if dims < 1:
        raise FeatureFormatError(f"{path}: dims must be positive, line 1")

    labels, rows = [], []
    for lineno, raw in enumerate(lines[1:], start=2):
        line = raw.rstrip("\r")
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split(",")
        if len(parts) - 1 != dims:
            raise FeatureFormatError(f"{path}: dimension mismatch, line {lineno}")
        label = parts[0]
        if not label:
            raise FeatureFormatError(f"{path}: empty label, line {lineno}")
        try:
            values = [float(p) for p in parts[1:]]
        except ValueError:
            raise FeatureFormatError(f"{path}: malformed number, line {lineno}") from None
        if not all(math.isfinite(v) for v in values):
            raise FeatureFormatError(f"{path}: non-finite value, line {lineno}")
        labels.append(label)
        rows.append(values)
    if not rows:
        raise FeatureFormatError(f"{path}: empty file, no records after line 1")
    return FeatureSet(dims, tuple(labels), np.array(rows, dtype=np.float64))


def format_features(fs: FeatureSet, comments=()) -> str:
    if len(fs) == 0:
        raise ValueError("empty set")
    out = [f"lsne-features 1 dims={fs.dims}"]
    out.extend(f"# {c}" for c in comments)
    for lab, vec in zip(fs.labels, fs.vectors):
        out.append(lab + "," + ",".join(fmt_float(x) for x in vec))
    return "\n".join(out) + "\n"


def save_features(fs: FeatureSet, path, comments=()) -> None:
    write_text(path, format_features(fs, comments))


def split_by_label(fs: FeatureSet, labels):
    """Partition records into (labels in ``labels``, everything else)."""
    wanted = set(labels)
    unknown = wanted - set(fs.labels)
    if unknown:
        raise KeyError(f"unknown label(s): {sorted(unknown)}")
    mask = np.array([lab in wanted for lab in fs.labels], dtype=bool)
    return fs.subset(mask), fs.subset(~mask)
