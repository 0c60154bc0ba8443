"""Discrepancies between two classifiers' softmax outputs.

Every function accepts either single simplex vectors of shape (K,) or batches of
shape (n, K); batched inputs give one value per row.
"""

from typing import Callable, NamedTuple

import numpy as np

from .errors import InvalidArgument

SIMPLEX_TOL = 1e-9
ENTROPY_FLOOR = 1e-12


def _simplex(p, name="p"):
    p = np.asarray(p, dtype=np.float64)
    if p.ndim not in (1, 2) or p.shape[-1] < 2:
        raise InvalidArgument(f"{name} must have shape (K,) or (n, K) with K >= 2")
    if not np.all(np.isfinite(p)) or np.any(p < 0):
        raise InvalidArgument(f"{name} has negative or non-finite entries")
    if np.any(np.abs(p.sum(axis=-1) - 1.0) > SIMPLEX_TOL):
        raise InvalidArgument(f"{name} does not sum to 1")
    return p


def _pair(p1, p2):
    p1, p2 = _simplex(p1, "p1"), _simplex(p2, "p2")
    if p1.shape != p2.shape:
        raise InvalidArgument(f"shape mismatch: {p1.shape} vs {p2.shape}")
    return p1, p2


def relevance_matrix(p1, p2):
    p1, p2 = _pair(p1, p2)
    return p1[..., :, None] * p2[..., None, :]


def _offdiag_sum(p1, p2):
    # pairs (m, n) and (n, m) are added first, which makes the value bitwise
    # symmetric under swapping p1 and p2
    k = p1.shape[-1]
    iu, ju = np.triu_indices(k, 1)
    return np.sum(p1[..., iu] * p2[..., ju] + p1[..., ju] * p2[..., iu], axis=-1)


def _offdiag_grad(p1, p2):
    g1 = np.sum(p2, axis=-1, keepdims=True) - p2
    g2 = np.sum(p1, axis=-1, keepdims=True) - p1
    return g1, g2


def cdd(p1, p2):
    """Classifier determinacy disparity: off-diagonal mass of p1 p2^T.

    Zero only when both predictions are the same one-hot vector.
    """
    p1, p2 = _pair(p1, p2)
    out = _offdiag_sum(p1, p2)
    return float(out) if out.ndim == 0 else out


def cdd_grad(p1, p2):
    p1, p2 = _pair(p1, p2)
    return _offdiag_grad(p1, p2)


def _l1(p1, p2):
    return np.sum(np.abs(p1 - p2), axis=-1)


def _l1_grad(p1, p2):
    s = np.sign(p1 - p2)
    return s, -s


def l1_discrepancy(p1, p2):
    p1, p2 = _pair(p1, p2)
    out = _l1(p1, p2)
    return float(out) if out.ndim == 0 else out


def l1_grad(p1, p2):
    p1, p2 = _pair(p1, p2)
    return _l1_grad(p1, p2)


def _entropy(p):
    return -np.sum(p * np.log(p + ENTROPY_FLOOR), axis=-1)


def _entropy_grad(p):
    return -(np.log(p + ENTROPY_FLOOR) + p / (p + ENTROPY_FLOOR))


def entropy(p):
    p = _simplex(p)
    out = _entropy(p)
    return float(out) if out.ndim == 0 else out


def entropy_grad(p):
    return _entropy_grad(_simplex(p))


class Discrepancy(NamedTuple):
    """Unchecked batched value/gradient pair used inside the training loop."""

    name: str
    value: Callable
    grad: Callable


CDD = Discrepancy("cdd", _offdiag_sum, _offdiag_grad)
L1 = Discrepancy("l1", _l1, _l1_grad)


def sample_simplex(rng, k, size=None):
    """Uniform draws from the (K-1)-simplex (Dirichlet(1) via normalized exponentials)."""
    shape = (k,) if size is None else (size, k)
    e = rng.exponential(size=shape)
    return e / e.sum(axis=-1, keepdims=True)
