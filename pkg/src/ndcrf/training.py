"""Reverse-mode gradients through unrolled mean-field and an SGD overfit driver."""

import logging
import time
from dataclasses import dataclass, field
from typing import List

import numpy as np
from scipy.ndimage import uniform_filter

from . import densecrf
from .tensor import argmax_channels, cross_entropy, cross_entropy_grad, dice_per_label, one_hot

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    def __init__(self, step, loss):
        super().__init__(f"training diverged at step {step} (loss={loss})")
        self.step = step
        self.loss = loss


@dataclass
class Gradients:
    d_w: np.ndarray
    d_mu: np.ndarray
    d_unary: np.ndarray


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.05
    steps: int = 300
    train_mu: bool = False
    seed: int = 0

    def __post_init__(self):
        if not (np.isfinite(self.learning_rate) and self.learning_rate >= 0):
            raise ValueError("learning_rate must be finite and non-negative")
        if self.steps < 0:
            raise ValueError("steps must be non-negative")


def forward_with_tape(reference, probs, params, lattices=None):
    """Mean-field inference that also returns the :class:`densecrf.Tape`."""
    return densecrf.forward(reference, probs, params, lattices=lattices, record=True)


def _softmax_pullback(q, g):
    q = np.asarray(q, dtype=np.float64)
    return q * (g - (g * q).sum(axis=1, keepdims=True))


def backward(tape, d_loss_d_q):
    """Gradients of a scalar loss w.r.t. w, mu and the unaries.

    ``d_loss_d_q`` is the gradient with respect to the final marginals, either
    flat ``(N, k)`` or shaped like the probabilities.
    """
    params = tape.params
    n, k = tape.unary.shape
    g = np.asarray(d_loss_d_q, dtype=np.float64)
    if g.size != n * k:
        raise ValueError(f"upstream gradient has {g.size} entries, expected {n * k}")
    if len(tape) != params.iterations or tape.q_out is None:
        raise ValueError("tape does not match its parameters")
    g = g.reshape(n, k)
    w1, w2 = params.w
    mu = params.mu
    d_unary = np.zeros((n, k))
    d_mu = np.zeros((k, k))
    d_w = np.zeros(2)
    outputs = tape.q_in[1:] + [tape.q_out]
    for t in range(len(tape) - 1, -1, -1):
        dz = _softmax_pullback(outputs[t], g)
        d_unary -= dz
        d_qhat = -dz
        q_app, q_smooth = tape.q_tilde_app[t], tape.q_tilde_smooth[t]
        combined = w1 * q_app + w2 * q_smooth
        d_mu += d_qhat.T @ combined
        d_combined = d_qhat @ mu
        d_w[0] += float((d_combined * q_app).sum())
        d_w[1] += float((d_combined * q_smooth).sum())
        g = (densecrf.exclusive_message_transpose(tape.lat_app, w1 * d_combined)
             + densecrf.exclusive_message_transpose(tape.lat_smooth, w2 * d_combined))
    # initial q = softmax(-unary)
    q0 = tape.q_in[0] if len(tape) else tape.q_out
    d_unary -= _softmax_pullback(q0, g)
    np.fill_diagonal(d_mu, 0.0)
    return Gradients(d_w=d_w, d_mu=d_mu, d_unary=d_unary)


def distort_labels(labels, k, seed, strength):
    """Soft "bad classifier" output for a label map.

    Each voxel is relabelled, with probability ``strength``, to a uniformly
    chosen different label; the one-hot field is then box-blurred with a
    width-3 window along every spatial axis and renormalized.
    """
    labels = np.asarray(labels).astype(np.int64)
    if not 0.0 <= strength < 1.0:
        raise ValueError("strength must lie in [0, 1)")
    rng = np.random.default_rng(seed)
    flip = rng.random(labels.shape) < strength
    shift = rng.integers(1, k, size=labels.shape)
    noisy = np.where(flip, (labels + shift) % k, labels)
    hot = one_hot(noisy, k).astype(np.float64)
    size = (3,) * labels.ndim + (1,)
    blurred = uniform_filter(hot, size=size, mode="nearest")
    blurred /= blurred.sum(axis=-1, keepdims=True)
    return blurred.astype(np.float32)


@dataclass
class HistoryRow:
    step: int
    loss: float
    dice: List[float]
    wall_ms: float


@dataclass
class TrainResult:
    params: densecrf.CrfParams
    history: List[HistoryRow] = field(default_factory=list)
    final_loss: float = float("nan")
    final_dice: List[float] = field(default_factory=list)
    final_q: np.ndarray = None


def _evaluate(q, labels, k):
    return cross_entropy(q, labels), dice_per_label(argmax_channels(q), labels, k)


def train_overfit(reference, distorted_probs, labels, params, cfg):
    """Plain gradient descent on the kernel weights (and mu if ``cfg.train_mu``).

    History row 0 scores the distorted input itself; row ``s`` scores the CRF
    output with the parameters in use at the start of step ``s``. The final
    parameters are scored once more into ``final_loss``/``final_dice``.
    """
    labels = np.asarray(labels).astype(np.int64)
    k = params.n_labels
    start = time.perf_counter()
    lattices = densecrf.build_lattices(reference, params)

    def elapsed():
        return (time.perf_counter() - start) * 1e3

    loss0, dice0 = _evaluate(distorted_probs, labels, k)
    result = TrainResult(params=params, history=[HistoryRow(0, loss0, dice0, elapsed())])
    for step in range(1, cfg.steps + 1):
        state, tape = forward_with_tape(reference, distorted_probs, params, lattices=lattices)
        loss, dice = _evaluate(state.q, labels, k)
        if not np.isfinite(loss):
            raise DivergenceError(step, loss)
        grads = backward(tape, cross_entropy_grad(state.q, labels))
        if not (np.all(np.isfinite(grads.d_w)) and np.all(np.isfinite(grads.d_mu))):
            raise DivergenceError(step, loss)
        result.history.append(HistoryRow(step, loss, dice, elapsed()))
        w = np.array(params.w) - cfg.learning_rate * grads.d_w
        mu = params.mu - cfg.learning_rate * grads.d_mu if cfg.train_mu else params.mu
        params = params.replace(w=tuple(w), mu=mu)
        log.debug("step %d loss %.6f dice %s w %s", step, loss, dice, params.w)

    state, _ = densecrf.forward(reference, distorted_probs, params, lattices=lattices)
    result.final_loss, result.final_dice = _evaluate(state.q, labels, k)
    if not np.isfinite(result.final_loss):
        raise DivergenceError(cfg.steps + 1, result.final_loss)
    result.params = params
    result.final_q = state.q
    return result


def two_region_fixture(size=32, seed=0):
    """Sharp-edged 2D grayscale image with a bright disk as label 1.

    Returns ``(image, labels)`` with image ``(size, size, 1)`` float32 in
    [0, 1] and labels ``(size, size)`` uint8.
    """
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[:size, :size]
    c = (size - 1) / 2.0
    labels = ((yy - c) ** 2 + (xx - 0.8 * c) ** 2 <= (0.3 * size) ** 2).astype(np.uint8)
    image = np.where(labels == 1, 0.75, 0.25) + rng.normal(0.0, 0.03, labels.shape)
    image = np.clip(image, 0.0, 1.0).astype(np.float32)[..., None]
    return image, labels
