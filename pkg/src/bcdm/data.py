"""Two-moons generation, rotation shift, CSV I/O and mini-batch sampling."""

import csv
import zlib
from dataclasses import dataclass

import numpy as np

from .errors import DataFormatError, InvalidArgument


def substream(seed, name):
    """Integer seed for the named random sub-stream of a master seed."""
    ss = np.random.SeedSequence([int(seed), zlib.crc32(name.encode())])
    return int(ss.generate_state(1, dtype=np.uint32)[0])


@dataclass
class LabeledDataset:
    features: np.ndarray
    labels: np.ndarray
    n_classes: int = 0

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or len(self.features) < 1:
            raise InvalidArgument("features must be a non-empty (n, d) matrix")
        if self.labels.shape != (len(self.features),):
            raise InvalidArgument("one label per feature row required")
        if not np.all(np.isfinite(self.features)):
            raise InvalidArgument("features must be finite")
        if np.any(self.labels < 0):
            raise InvalidArgument("labels must be non-negative")
        if not self.n_classes:
            self.n_classes = int(self.labels.max()) + 1
        if np.any(self.labels >= self.n_classes):
            raise InvalidArgument(f"labels must lie in [0, {self.n_classes})")

    def __len__(self):
        return len(self.features)

    @property
    def dim(self):
        return self.features.shape[1]

    def unlabeled(self):
        return UnlabeledDataset(self.features.copy())


@dataclass
class UnlabeledDataset:
    features: np.ndarray

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2 or len(self.features) < 1:
            raise InvalidArgument("features must be a non-empty (n, d) matrix")
        if not np.all(np.isfinite(self.features)):
            raise InvalidArgument("features must be finite")

    def __len__(self):
        return len(self.features)

    @property
    def dim(self):
        return self.features.shape[1]


def make_moons(n_per_class, noise_sd=0.05, seed=0):
    """Upper unit semicircle (class 0) and the lower arc centred at (1, 0.5) (class 1)."""
    if int(n_per_class) != n_per_class or n_per_class < 1:
        raise InvalidArgument("n_per_class must be a positive integer")
    if noise_sd < 0:
        raise InvalidArgument("noise_sd must be non-negative")
    t = np.linspace(0.0, np.pi, int(n_per_class))
    upper = np.column_stack([np.cos(t), np.sin(t)])
    lower = np.column_stack([1.0 - np.cos(t), 1.0 - np.sin(t) - 0.5])
    x = np.vstack([upper, lower])
    y = np.repeat([0, 1], int(n_per_class))
    if noise_sd > 0:
        x = x + np.random.default_rng(seed).normal(scale=noise_sd, size=x.shape)
    return LabeledDataset(x, y, n_classes=2)


def rotate(ds, degrees):
    if ds.features.shape[1] != 2:
        raise InvalidArgument("rotation needs 2-D features")
    th = np.deg2rad(degrees)
    r = np.array([[np.cos(th), -np.sin(th)], [np.sin(th), np.cos(th)]])
    x = ds.features @ r.T
    if isinstance(ds, LabeledDataset):
        return LabeledDataset(x, ds.labels.copy(), ds.n_classes)
    return UnlabeledDataset(x)


def toy_domains(n_per_class=100, rotation=30.0, noise_sd=0.05, seed=0):
    """Source moons and a freshly drawn, rotated target (returned with its labels)."""
    source = make_moons(n_per_class, noise_sd, substream(seed, "data/source"))
    target = rotate(make_moons(n_per_class, noise_sd, substream(seed, "data/target")), rotation)
    return source, target


# -- CSV ----------------------------------------------------------------------

def save_csv(ds, path):
    d = ds.features.shape[1]
    header = [f"f{i}" for i in range(d)]
    labeled = isinstance(ds, LabeledDataset)
    if labeled:
        header.append("label")
    lines = [",".join(header)]
    for i, row in enumerate(ds.features):
        cells = [format(float(v), ".17g") for v in row]
        if labeled:
            cells.append(str(int(ds.labels[i])))
        lines.append(",".join(cells))
    with open(path, "w", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def load_csv(path):
    """Read a dataset written by ``save_csv``; a trailing ``label`` column makes it labeled."""
    try:
        fh = open(path, newline="")
    except OSError as e:
        raise DataFormatError(f"cannot open {path}: {e.strerror}") from None
    with fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DataFormatError("empty file", 1)
    header = [h.strip() for h in rows[0]]
    labeled = header[-1] == "label"
    n_feat = len(header) - int(labeled)
    if n_feat < 1:
        raise DataFormatError("no feature columns in header", 1)
    feats, labels = [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != len(header):
            raise DataFormatError(f"expected {len(header)} columns, found {len(row)}", lineno)
        try:
            vals = [float(c) for c in row[:n_feat]]
        except ValueError:
            raise DataFormatError("non-numeric cell", lineno) from None
        if not all(np.isfinite(vals)):
            raise DataFormatError("non-finite cell", lineno)
        feats.append(vals)
        if labeled:
            try:
                lab = int(row[-1])
            except ValueError:
                raise DataFormatError(f"label {row[-1]!r} is not an integer", lineno) from None
            if lab < 0:
                raise DataFormatError("negative label", lineno)
            labels.append(lab)
    if not feats:
        raise DataFormatError("no data rows", len(rows))
    if labeled:
        return LabeledDataset(np.array(feats), np.array(labels))
    return UnlabeledDataset(np.array(feats))


# -- batching -----------------------------------------------------------------

class BatchSampler:
    """Shuffled, without-replacement mini-batches; reshuffles at each epoch boundary.

    A batch never straddles two epochs: when fewer than ``batch_size`` indices
    remain, they are dropped and a new permutation starts. With
    ``n % batch_size == 0`` every index is visited exactly once per epoch.
    """

    def __init__(self, n, batch_size, seed):
        if batch_size < 1 or batch_size > n:
            raise InvalidArgument(f"batch size {batch_size} must lie in [1, {n}]")
        self.n = n
        self.batch_size = batch_size
        self.rng = np.random.default_rng(seed)
        self.epoch = 0
        self._perm = self.rng.permutation(n)
        self._pos = 0

    def next_indices(self):
        if self._pos + self.batch_size > self.n:
            self._perm = self.rng.permutation(self.n)
            self._pos = 0
            self.epoch += 1
        idx = self._perm[self._pos:self._pos + self.batch_size]
        self._pos += self.batch_size
        return idx


def next_batch(sampler, ds):
    if sampler.n != len(ds):
        raise InvalidArgument("sampler was built for a dataset of different size")
    idx = sampler.next_indices()
    if isinstance(ds, LabeledDataset):
        return ds.features[idx], ds.labels[idx]
    return ds.features[idx]
