"""Diagnostics: determinacy histograms, agreement matrices, proxy A-distance,
decision-boundary rasters and feature singular-value spectra."""

import zlib
from dataclasses import dataclass

import numpy as np

from . import nn
from .data import substream
from .errors import InvalidArgument


@dataclass
class Histogram:
    bin_edges: np.ndarray
    counts: np.ndarray


def histogram(values, n_bins, lo, hi):
    """Equal-width bins on [lo, hi]; the last bin is closed on the right."""
    if n_bins < 1:
        raise InvalidArgument("n_bins must be >= 1")
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        raise InvalidArgument("nothing to bin")
    edges = np.linspace(lo, hi, n_bins + 1)
    # bin by rounded position so values sitting on an edge land in the upper bin
    # despite the edges' representation error
    pos = np.round((values - lo) / (hi - lo) * n_bins, 9)
    idx = np.clip(np.floor(pos).astype(np.int64), 0, n_bins - 1)
    return Histogram(edges, np.bincount(idx, minlength=n_bins))


def max_probabilities(models, x):
    p1, p2 = models.probas(x)
    return (0.5 * (p1 + p2)).max(axis=1)


def determinacy_histogram(models, target, n_bins=10):
    """Histogram of each sample's max averaged bi-classifier probability over [1/K, 1]."""
    if len(target.features) == 0:
        raise InvalidArgument("empty dataset")
    k = models.n_classes
    return histogram(max_probabilities(models, target.features), n_bins, 1.0 / k, 1.0)


def agreement_matrix(models, target):
    """Entry (m, n) counts samples that C1 assigns to m and C2 to n."""
    if len(target.features) == 0:
        raise InvalidArgument("empty dataset")
    p1, p2 = models.probas(target.features)
    k = models.n_classes
    out = np.zeros((k, k), dtype=np.int64)
    np.add.at(out, (p1.argmax(axis=1), p2.argmax(axis=1)), 1)
    return out


def _content_key(x):
    return zlib.crc32(np.ascontiguousarray(x).tobytes())


def proxy_a_distance(features_s, features_t, seed=0, hidden=8, iterations=500, lr=0.1):
    """2 (1 - 2 err) of a small domain classifier, clipped at 0.

    Each domain is split 80/20; the classifier trains full-batch on the 80%
    parts (standardized with their statistics) and err is the class-balanced
    error on the rest. Splits are keyed on each domain's contents and the
    output layer starts at zero, so swapping the two arguments yields the
    mirror-image classifier and the same value.
    """
    xs = np.asarray(features_s, dtype=np.float64)
    xt = np.asarray(features_t, dtype=np.float64)
    if xs.ndim != 2 or xt.ndim != 2 or xs.shape[1] != xt.shape[1]:
        raise InvalidArgument("feature matrices must share their column count")
    if len(xs) < 10 or len(xt) < 10:
        raise InvalidArgument("need at least 10 samples per domain")
    domains = sorted([(_content_key(xs), 0, xs), (_content_key(xt), 1, xt)], key=lambda d: d[0])
    train_x, train_y, test_x, test_y = [], [], [], []
    for key, label, x in domains:
        perm = np.random.default_rng([substream(seed, "pad/split"), key]).permutation(len(x))
        cut = int(round(0.8 * len(x)))
        train_x.append(x[perm[:cut]])
        test_x.append(x[perm[cut:]])
        train_y.append(np.full(cut, label))
        test_y.append(np.full(len(x) - cut, label))
    tx, ty = np.vstack(train_x), np.concatenate(train_y)
    vx, vy = np.vstack(test_x), np.concatenate(test_y)
    mu, sd = tx.mean(axis=0), tx.std(axis=0)
    sd[sd == 0] = 1.0
    tx, vx = (tx - mu) / sd, (vx - mu) / sd

    net = nn.init_network([tx.shape[1], hidden, 2], substream(seed, "pad/init"))
    net.layers[-1].weight[:] = 0.0
    opt = nn.OptimizerState(lr, momentum=0.9, weight_decay=0.0, anneal_a=0.0, anneal_b=0.0)
    # class-balanced mean, so unequal domain sizes do not tilt the classifier
    w = np.where(ty == 0, 0.5 / np.sum(ty == 0), 0.5 / np.sum(ty == 1))[:, None]
    for _ in range(iterations):
        p = nn.softmax(net.forward(tx))
        g = nn.softmax_backward(p, w * nn.cross_entropy_grad(p, ty))
        nn.sgd_step(net, net.backward(g), opt)
    pred = np.argmax(net.predict(vx), axis=1)
    err = 0.5 * (np.mean(pred[vy == 0] != 0) + np.mean(pred[vy == 1] != 1))
    return max(0.0, 2.0 * (1.0 - 2.0 * err))


@dataclass
class GridSpec:
    x_range: tuple
    y_range: tuple
    nx: int = 200
    ny: int = 200

    def __post_init__(self):
        if self.nx < 1 or self.ny < 1:
            raise InvalidArgument("grid resolution must be positive")
        if not (self.x_range[0] < self.x_range[1] and self.y_range[0] < self.y_range[1]):
            raise InvalidArgument("grid ranges must be non-empty intervals")

    @classmethod
    def around(cls, points, nx=200, ny=200, pad=0.2):
        """Bounding box of ``points`` widened by ``pad`` of its extent on each side."""
        pts = np.asarray(points, dtype=np.float64)
        lo, hi = pts.min(axis=0), pts.max(axis=0)
        span = np.where(hi > lo, hi - lo, 1.0)
        lo, hi = lo - pad * span, hi + pad * span
        return cls((float(lo[0]), float(hi[0])), (float(lo[1]), float(hi[1])), nx, ny)

    def centers(self):
        """Cell centres, row-major with row 0 at the top (largest y)."""
        (x0, x1), (y0, y1) = self.x_range, self.y_range
        xs = x0 + (np.arange(self.nx) + 0.5) * (x1 - x0) / self.nx
        ys = y1 - (np.arange(self.ny) + 0.5) * (y1 - y0) / self.ny
        gx, gy = np.meshgrid(xs, ys)
        return np.column_stack([gx.ravel(), gy.ravel()])


@dataclass
class GridRaster:
    grid: GridSpec
    labels: np.ndarray  # (ny * nx,), row-major, row 0 at the top
    n_classes: int

    def as_image(self):
        return self.labels.reshape(self.grid.ny, self.grid.nx)


def boundary_raster(models, grid):
    if models.G.in_dim != 2:
        raise InvalidArgument("decision rasters need a model with 2-D inputs")
    return GridRaster(grid, models.predict(grid.centers()), models.n_classes)


def svd_spectrum(features):
    """Singular values of the feature matrix, descending, divided by the largest."""
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.size == 0:
        raise InvalidArgument("features must be a non-empty matrix")
    s = np.linalg.svd(x, compute_uv=False)
    if s[0] == 0:
        raise InvalidArgument("all-zero feature matrix")
    return s / s[0]


# -- writers --------------------------------------------------------------------

def write_pgm(raster, path):
    k = max(raster.n_classes, 2)
    step = 255 // (k - 1)
    img = (raster.as_image() * step).astype(np.uint8)
    header = f"P5\n{raster.grid.nx} {raster.grid.ny}\n255\n".encode("ascii")
    with open(path, "wb") as fh:
        fh.write(header + img.tobytes())


def read_pgm(path):
    with open(path, "rb") as fh:
        data = fh.read()
    parts = data.split(b"\n", 3)
    if parts[0] != b"P5" or len(parts) < 4:
        raise InvalidArgument("not a binary PGM file")
    nx, ny = (int(v) for v in parts[1].split())
    pixels = np.frombuffer(parts[3], dtype=np.uint8)
    if pixels.size != nx * ny:
        raise InvalidArgument("PGM pixel count does not match its header")
    return pixels.reshape(ny, nx)


def _write_lines(path, lines):
    with open(path, "w", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def write_raster_csv(raster, path):
    lines = ["row,col,x,y,label"]
    centers = raster.grid.centers()
    nx = raster.grid.nx
    for i, (lab, (x, y)) in enumerate(zip(raster.labels, centers)):
        lines.append(f"{i // nx},{i % nx},{x:.17g},{y:.17g},{int(lab)}")
    _write_lines(path, lines)


def write_histogram_csv(hist, path):
    lines = ["bin_lo,bin_hi,count"]
    for lo, hi, c in zip(hist.bin_edges[:-1], hist.bin_edges[1:], hist.counts):
        lines.append(f"{lo:.17g},{hi:.17g},{int(c)}")
    _write_lines(path, lines)


def write_matrix_csv(mat, path):
    k = mat.shape[1]
    lines = ["c1_class," + ",".join(f"c2_{j}" for j in range(k))]
    for i, row in enumerate(mat):
        lines.append(f"{i}," + ",".join(str(int(v)) for v in row))
    _write_lines(path, lines)


def write_spectrum_csv(spectrum, path):
    _write_lines(path, ["index,value"] + [f"{i},{v:.17g}" for i, v in enumerate(spectrum)])
