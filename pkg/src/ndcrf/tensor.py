"""Channel-last tensor helpers: simplex ops and segmentation metrics.

Tensors are numpy arrays of shape ``(*spatial, channels)`` in C order, so a
voxel's channel vector is contiguous. Label maps are integer arrays of shape
``spatial``.
"""

import numpy as np

LOG_EPS = 1e-8


class ShapeError(ValueError):
    """Raised when tensor extents or channel counts disagree."""


def check_tensor(t, name="tensor"):
    t = np.asarray(t)
    if t.ndim < 2:
        raise ShapeError(f"{name} needs at least one spatial axis and a channel axis, got shape {t.shape}")
    if min(t.shape) < 1:
        raise ShapeError(f"{name} has an empty axis: {t.shape}")
    if not np.all(np.isfinite(t)):
        raise ValueError(f"{name} contains non-finite values")
    return t


def softmax_channels(t):
    """Softmax over the last axis with max subtraction.

    Computed in float64; the result has the input's float dtype (float32 for
    anything that is not float64).
    """
    t = np.asarray(t)
    out_dtype = np.float64 if t.dtype == np.float64 else np.float32
    z = t.astype(np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return (e / e.sum(axis=-1, keepdims=True)).astype(out_dtype)


def argmax_channels(t):
    """Per-voxel index of the largest channel; ties go to the lowest index."""
    return np.argmax(np.asarray(t), axis=-1)


def dice_coefficient(a, b, positive_label):
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ShapeError(f"label maps differ in shape: {a.shape} vs {b.shape}")
    pa = a == positive_label
    pb = b == positive_label
    denom = int(pa.sum()) + int(pb.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((pa & pb).sum()) / denom


def dice_per_label(pred, truth, n_labels):
    return [dice_coefficient(pred, truth, lab) for lab in range(n_labels)]


def cross_entropy(q, target):
    """Mean over voxels of ``-log q[voxel, target]`` with q clamped at 1e-8."""
    q = np.asarray(q)
    target = np.asarray(target)
    if q.shape[:-1] != target.shape:
        raise ShapeError(f"q spatial shape {q.shape[:-1]} != target shape {target.shape}")
    if target.size and (target.min() < 0 or target.max() >= q.shape[-1]):
        raise ShapeError("target labels out of range for q's channel count")
    picked = np.take_along_axis(q, target[..., None].astype(np.intp), axis=-1)[..., 0]
    return float(np.mean(-np.log(np.maximum(picked.astype(np.float64), LOG_EPS))))


def cross_entropy_grad(q, target):
    """Gradient of :func:`cross_entropy` with respect to ``q``."""
    q = np.asarray(q, dtype=np.float64)
    target = np.asarray(target).astype(np.intp)
    grad = np.zeros_like(q)
    picked = np.take_along_axis(q, target[..., None], axis=-1)
    g = np.where(picked > LOG_EPS, -1.0 / np.maximum(picked, LOG_EPS), 0.0) / target.size
    np.put_along_axis(grad, target[..., None], g, axis=-1)
    return grad


def one_hot(labels, k):
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ShapeError(f"labels must lie in [0, {k})")
    return np.eye(k, dtype=np.float32)[labels]
