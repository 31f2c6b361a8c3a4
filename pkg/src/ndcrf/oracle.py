"""Brute-force float64 references for filtering, inference and gradients.

Nothing here touches the lattice code, so agreement between the two is a real
check. Everything is O(N^2) and guarded against large inputs.
"""

import numpy as np

FILTER_LIMIT = 10_000
MEAN_FIELD_LIMIT = 4_096
LOG_EPS = 1e-8


class OracleSizeError(ValueError):
    """Raised when an input is too large for brute force."""


def _features(reference, config):
    reference = np.asarray(reference, dtype=np.float64)
    spatial = reference.shape[:-1]
    grids = np.meshgrid(*[np.arange(s, dtype=np.float64) for s in spatial], indexing="ij")
    pos = np.stack([g.ravel() for g in grids], axis=1)
    if config.mode == "smoothness":
        return pos / config.theta_gamma
    colour = reference.reshape(-1, reference.shape[-1])
    return np.concatenate([pos / config.theta_alpha, colour / config.theta_beta], axis=1)


def gaussian_kernel(reference, config):
    """Dense N x N matrix of exp(-|f_i - f_j|^2 / 2)."""
    f = _features(reference, config)
    if f.shape[0] > FILTER_LIMIT:
        raise OracleSizeError(f"{f.shape[0]} points exceeds brute-force limit {FILTER_LIMIT}")
    sq = (f * f).sum(axis=1)
    d2 = np.maximum(sq[:, None] + sq[None, :] - 2.0 * f @ f.T, 0.0)
    np.fill_diagonal(d2, 0.0)
    return np.exp(-0.5 * d2)


def brute_filter(reference, values, config, exclude_self=False, normalize=False):
    """out_i = sum_j k(f_i, f_j) v_j, optionally without j == i and divided by sum_j k."""
    values = np.asarray(values, dtype=np.float64)
    kern = gaussian_kernel(reference, config)
    values = values.reshape(kern.shape[0], -1)
    total = kern.sum(axis=1)
    if exclude_self:
        np.fill_diagonal(kern, 0.0)
    out = kern @ values
    if normalize:
        out /= total[:, None]
    return out


def _softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def exact_mean_field(reference, probs, params):
    """Mean-field iterations with exact kernels, messages normalized per voxel."""
    probs = np.asarray(probs, dtype=np.float64)
    k = probs.shape[-1]
    n = probs.size // k
    if n > MEAN_FIELD_LIMIT:
        raise OracleSizeError(f"{n} points exceeds exact mean-field limit {MEAN_FIELD_LIMIT}")
    p = probs.reshape(n, k)
    p = p / np.maximum(p.sum(axis=1, keepdims=True), LOG_EPS)
    unary = -np.log(np.clip(p, LOG_EPS, 1.0))
    mu = np.array(params.mu, dtype=np.float64)
    np.fill_diagonal(mu, 0.0)
    w1, w2 = params.w

    kernels = []
    for config in (params.appearance, params.smoothness):
        kern = gaussian_kernel(reference, config)
        total = kern.sum(axis=1)
        np.fill_diagonal(kern, 0.0)
        kernels.append(kern / total[:, None])

    q = _softmax(-unary)
    for _ in range(params.iterations):
        msg = w1 * (kernels[0] @ q) + w2 * (kernels[1] @ q)
        q = _softmax(-unary - msg @ mu.T)
    return q.reshape(probs.shape)


def numeric_gradient(f, x, h=1e-3):
    """Central difference (f(x + h) - f(x - h)) / 2h."""
    hi = f(x + h)
    lo = f(x - h)
    if not (np.isfinite(hi) and np.isfinite(lo)):
        raise ValueError(f"non-finite function value at x={x} +/- {h}")
    return (hi - lo) / (2.0 * h)
