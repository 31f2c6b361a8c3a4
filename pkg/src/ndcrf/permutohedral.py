"""Permutohedral lattice filtering for any feature dimension and channel count.

Points are embedded in the hyperplane of (d+1)-vectors with zero coordinate
sum, splatted onto the vertices of their enclosing simplex, blurred with a
[1, 2, 1] / 4 kernel along each of the d+1 lattice directions, and sliced back.
The result approximates convolution with a unit-variance Gaussian over the
feature vectors in time linear in the number of points.
"""

from dataclasses import dataclass
from functools import cached_property
from typing import Optional

import numpy as np
import scipy.sparse as sp

from .hashtable import KEY_LIMIT, KeyRangeError, VectorHashTable

MODES = ("smoothness", "appearance")
NORM_EPS = 1e-12


@dataclass(frozen=True)
class FeatureConfig:
    """Kernel bandwidths for one filtering mode.

    Smoothness filtering needs ``theta_gamma``; appearance filtering needs
    ``theta_alpha`` (spatial) and ``theta_beta`` (intensity).
    """

    mode: str = "appearance"
    theta_alpha: Optional[float] = None
    theta_beta: Optional[float] = None
    theta_gamma: Optional[float] = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        for name in ("theta_alpha", "theta_beta", "theta_gamma"):
            v = getattr(self, name)
            if v is not None and not (np.isfinite(v) and v > 0):
                raise ValueError(f"{name} must be positive and finite, got {v}")
        needed = ("theta_alpha", "theta_beta") if self.mode == "appearance" else ("theta_gamma",)
        missing = [n for n in needed if getattr(self, n) is None]
        if missing:
            raise ValueError(f"{self.mode} mode requires {', '.join(missing)}")


def build_features(reference, config):
    """Per-voxel feature rows for ``reference`` of shape ``(*spatial, channels)``.

    Returns an ``(N, d)`` float32 array with voxels in row-major order:
    ``p / theta_gamma`` for smoothness, ``[p / theta_alpha, I / theta_beta]``
    for appearance, where ``p`` are integer voxel coordinates.
    """
    reference = np.asarray(reference)
    if reference.ndim < 2:
        raise ValueError("reference must have at least one spatial axis plus a channel axis")
    if not np.all(np.isfinite(reference)):
        raise ValueError("reference contains non-finite values")
    spatial = reference.shape[:-1]
    pos = np.indices(spatial, dtype=np.float64).reshape(len(spatial), -1).T
    if config.mode == "smoothness":
        feats = pos / config.theta_gamma
    else:
        colour = reference.reshape(-1, reference.shape[-1]).astype(np.float64)
        feats = np.concatenate([pos / config.theta_alpha, colour / config.theta_beta], axis=1)
    return feats.astype(np.float32)


def _elevate(features):
    n, d = features.shape
    inv_std = np.sqrt(2.0 / 3.0) * (d + 1)
    scale = inv_std / np.sqrt((np.arange(d) + 1.0) * (np.arange(d) + 2.0))
    cf = features.astype(np.float64) * scale
    # elevated[i] = sum_{j >= i} cf[j] - i * cf[i-1]
    suffix = np.zeros((n, d + 1))
    suffix[:, :d] = np.cumsum(cf[:, ::-1], axis=1)[:, ::-1]
    elevated = suffix.copy()
    elevated[:, 1:] -= np.arange(1, d + 1) * cf
    return elevated


def _simplex(elevated):
    """Nearest remainder-0 point, rank vector and barycentric weights."""
    n, d1 = elevated.shape
    d = d1 - 1
    v = elevated / d1
    up = np.ceil(v) * d1
    down = np.floor(v) * d1
    rem0 = np.where(up - elevated < elevated - down, up, down)
    total = np.rint(rem0.sum(axis=1) / d1).astype(np.int64)

    diff = elevated - rem0
    i_idx = np.arange(d1)
    lt = diff[:, :, None] < diff[:, None, :]
    ge = diff[:, None, :] >= diff[:, :, None]
    upper = i_idx[None, :] > i_idx[:, None]
    rank = (np.where(upper, lt, False).sum(axis=2)
            + np.where(upper.T, ge, False).sum(axis=2)).astype(np.int64)

    # repair so that rem0 lies on the hyperplane and rank is a permutation
    t = total[:, None]
    pos = t > 0
    neg = t < 0
    dec = pos & (rank >= d1 - t)
    inc = neg & (rank < -t)
    rem0 = rem0 - d1 * dec + d1 * inc
    rank = np.where(pos, np.where(dec, rank + t - d1, rank + t), rank)
    rank = np.where(neg, np.where(inc, rank + d1 + t, rank + t), rank)

    delta = (elevated - rem0) / d1
    bary = np.zeros((n, d1 + 1))
    rows = np.arange(n)[:, None]
    np.add.at(bary, (rows, d - rank), delta)
    np.add.at(bary, (rows, d1 - rank), -delta)
    bary[:, 0] += 1.0 + bary[:, d1]
    return rem0.astype(np.int64), rank, bary[:, :d1]


def _vertex_keys(rem0, rank, k):
    """Full (d+1)-coordinate key of simplex vertex ``k`` for every point."""
    d1 = rem0.shape[1]
    return rem0 + np.where(rank > d1 - 1 - k, k - d1, k)


class Lattice:
    """Frozen permutohedral structure for one feature matrix.

    Attributes
    ----------
    keys : (M, d) int16 array
        First ``d`` coordinates of each vertex; the last is minus their sum.
    vertices : (N, d+1) int array
        Vertex index of each simplex corner of each point.
    weights : (N, d+1) float64 array
        Barycentric weights matching ``vertices``.
    neighbors : (d+1, M, 2) int array
        Index of the -/+ neighbour of each vertex along each axis, -1 if absent.
    """

    def __init__(self, features):
        features = np.asarray(features)
        if features.ndim != 2 or features.shape[1] < 1:
            raise ValueError("features must be an (N, d) array with d >= 1")
        if not np.all(np.isfinite(features)):
            raise ValueError("features contain non-finite values")
        n, d = features.shape
        self.n_points, self.dim = n, d
        d1 = d + 1
        elevated = _elevate(features)
        rem0, rank, bary = _simplex(elevated)
        self._rem0, self._rank = rem0, rank

        full = np.stack([_vertex_keys(rem0, rank, k) for k in range(d1)], axis=1)
        if full.size and np.abs(full).max() + d1 >= KEY_LIMIT:
            raise KeyRangeError("lattice coordinates exceed int16 range; "
                                "features are too spread out for this lattice")
        self.table = VectorHashTable(d, n * d1)
        flat = full[:, :, :d].reshape(-1, d)
        self.vertices = self.table.insert(flat).reshape(n, d1)
        self.weights = bary
        self.keys = self.table.keys

        m = len(self.table)
        full_keys = np.concatenate(
            [self.keys.astype(np.int64), -self.keys.astype(np.int64).sum(axis=1, keepdims=True)], axis=1)
        self.neighbors = np.empty((d1, m, 2), dtype=np.int64)
        for j in range(d1):
            step = np.ones(d1, dtype=np.int64)
            step[j] = -d
            self.neighbors[j, :, 0] = self.table.lookup((full_keys - step)[:, :d])
            self.neighbors[j, :, 1] = self.table.lookup((full_keys + step)[:, :d])

        rows = np.repeat(np.arange(n), d1)
        self._slice_mat = sp.csr_matrix(
            (self.weights.ravel(), (rows, self.vertices.ravel())), shape=(n, m))
        self._splat_mat = self._slice_mat.T.tocsr()

    @property
    def n_vertices(self):
        return self.keys.shape[0]

    def splat(self, values):
        return self._splat_mat @ values

    def slice(self, vertex_values):
        return self._slice_mat @ vertex_values

    def blur(self, vertex_values, reverse=False):
        """One [1, 2, 1] / 4 pass along every lattice axis."""
        m = self.n_vertices
        out = np.asarray(vertex_values, dtype=np.float64)
        axes = range(self.dim, -1, -1) if reverse else range(self.dim + 1)
        padded = np.zeros((m + 1,) + out.shape[1:])
        for j in axes:
            padded[:m] = out
            lo = self.neighbors[j, :, 0]
            hi = self.neighbors[j, :, 1]
            # -1 reads the zero pad row
            out = 0.5 * out + 0.25 * (padded[lo] + padded[hi])
        return out

    def apply(self, values, reverse=False):
        """Unnormalized splat -> blur -> slice in float64."""
        v = np.asarray(values, dtype=np.float64)
        return self.slice(self.blur(self.splat(v), reverse=reverse))

    @cached_property
    def normalizer(self):
        """Filtered all-ones field, one value per point."""
        return self.apply(np.ones((self.n_points, 1)))[:, 0]

    @cached_property
    def self_weights(self):
        """Diagonal of the unnormalized forward operator, one value per point.

        Between two corners of one simplex the blur only connects them through
        two axis paths (every axis step +1/0, or the complementary 0/-1 path),
        so the diagonal is assembled exactly by checking which intermediate
        vertices exist.
        """
        n, d = self.n_points, self.dim
        d1 = d + 1
        rem0, rank, w = self._rem0, self._rank, self.weights
        keys = [_vertex_keys(rem0, rank, k) for k in range(d1)]
        diag = np.zeros(n)
        for src in range(d1):
            for dst in range(d1):
                lo, hi = min(src, dst), max(src, dst)
                between = ((rank > d - hi) & (rank <= d - lo)).astype(np.int64)
                if dst > src:
                    paths = [between, between - 1]
                elif dst < src:
                    paths = [-between, 1 - between]
                else:
                    paths = [np.zeros_like(rank), np.ones_like(rank), -np.ones_like(rank)]
                for steps in paths:
                    coef = np.prod(np.where(steps == 0, 0.5, 0.25), axis=1)
                    alive = np.ones(n, dtype=bool)
                    cum_sum = np.zeros((n, 1), dtype=np.int64)
                    # intermediate vertex after moving along axes 0..j
                    for j in range(d):
                        cum_sum = cum_sum + steps[:, j:j + 1]
                        moved = steps.copy()
                        moved[:, j + 1:] = 0
                        inter = keys[src] + cum_sum - d1 * moved
                        alive &= self.table.lookup(inter[:, :d]) >= 0
                    diag += w[:, src] * w[:, dst] * coef * alive
        return diag


def lattice_build(features):
    return Lattice(features)


def _check_rows(lattice, values):
    values = np.asarray(values)
    if values.ndim != 2:
        raise ValueError("values must be an (N, c) array")
    if values.shape[0] != lattice.n_points:
        raise ValueError(f"values have {values.shape[0]} rows, lattice has {lattice.n_points} points")
    return values


def _out_dtype(values):
    return np.float64 if values.dtype == np.float64 else np.float32


def filter(lattice, values, normalize=False, reverse=False):
    """Approximate Gaussian filtering of ``values`` (N, c) over the lattice.

    Sums include each point's own contribution. With ``normalize`` every
    channel is divided by the filtered all-ones field.
    """
    values = _check_rows(lattice, values)
    out = lattice.apply(values, reverse=reverse)
    if normalize:
        norm = lattice.normalizer if not reverse else lattice.apply(
            np.ones((lattice.n_points, 1)), reverse=True)[:, 0]
        out = out / np.maximum(norm, NORM_EPS)[:, None]
    return out.astype(_out_dtype(values))


def filter_transpose(lattice, upstream):
    """Exact transpose of ``filter(lattice, ., normalize=False)``."""
    upstream = _check_rows(lattice, upstream)
    return lattice.apply(upstream, reverse=True).astype(_out_dtype(upstream))
