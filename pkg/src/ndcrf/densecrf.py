"""Fully-connected CRF mean-field inference on images of any spatial rank.

Messages are computed with two permutohedral filters over the image: an
appearance (bilateral) kernel over position and intensity, and a smoothness
kernel over position only. Each message is the kernel-weighted average of the
other voxels' marginals, i.e. the filtered field minus the voxel's own term,
divided by the filtered all-ones field.
"""

from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from . import permutohedral as ph
from .tensor import LOG_EPS, ShapeError, check_tensor, softmax_channels


def potts(k):
    """Compatibility matrix with ones off the diagonal."""
    return 1.0 - np.eye(k)


@dataclass
class CrfParams:
    theta_alpha: float
    theta_beta: float
    theta_gamma: float
    mu: np.ndarray
    w: Tuple[float, float] = (1.0, 1.0)
    iterations: int = 5

    def __post_init__(self):
        mu = np.array(self.mu, dtype=np.float64)
        if mu.ndim != 2 or mu.shape[0] != mu.shape[1] or mu.shape[0] < 2:
            raise ValueError(f"mu must be a k x k matrix with k >= 2, got shape {mu.shape}")
        if not np.all(np.isfinite(mu)):
            raise ValueError("mu contains non-finite values")
        np.fill_diagonal(mu, 0.0)
        self.mu = mu
        w = tuple(float(x) for x in self.w)
        if len(w) != 2 or not all(np.isfinite(w)):
            raise ValueError(f"w must be two finite floats, got {self.w!r}")
        self.w = w
        if int(self.iterations) != self.iterations or self.iterations < 1:
            raise ValueError(f"iterations must be a positive integer, got {self.iterations}")
        self.iterations = int(self.iterations)
        # raises on bad thetas
        self.appearance
        self.smoothness

    @classmethod
    def default(cls, k, theta_alpha, theta_beta, theta_gamma, iterations=5):
        return cls(theta_alpha, theta_beta, theta_gamma, mu=potts(k), iterations=iterations)

    @property
    def n_labels(self):
        return self.mu.shape[0]

    @property
    def appearance(self):
        return ph.FeatureConfig("appearance", theta_alpha=self.theta_alpha, theta_beta=self.theta_beta)

    @property
    def smoothness(self):
        return ph.FeatureConfig("smoothness", theta_gamma=self.theta_gamma)

    def replace(self, **changes):
        kw = dict(theta_alpha=self.theta_alpha, theta_beta=self.theta_beta,
                  theta_gamma=self.theta_gamma, mu=self.mu.copy(), w=self.w,
                  iterations=self.iterations)
        kw.update(changes)
        return CrfParams(**kw)


@dataclass
class MeanFieldState:
    """Final marginals, shaped ``(*spatial, k)``, plus per-iteration max |dQ|."""

    q: np.ndarray
    max_deltas: List[float] = field(default_factory=list)


def unary_from_probs(probs):
    """Unary potentials ``-log(clamp(p, 1e-8, 1))`` after renormalizing ``p``."""
    probs = check_tensor(probs, "probs")
    if probs.shape[-1] < 2:
        raise ShapeError("need at least two labels")
    dtype = np.float64 if probs.dtype == np.float64 else np.float32
    p = probs.astype(np.float64)
    p = p / np.maximum(p.sum(axis=-1, keepdims=True), LOG_EPS)
    return (-np.log(np.clip(p, LOG_EPS, 1.0))).astype(dtype)


def init_q(unary):
    return softmax_channels(-np.asarray(unary))


def build_lattices(reference, params):
    """(appearance, smoothness) lattices for a reference image."""
    reference = check_tensor(reference, "reference")
    lat_app = ph.Lattice(ph.build_features(reference, params.appearance))
    lat_smooth = ph.Lattice(ph.build_features(reference, params.smoothness))
    return lat_app, lat_smooth


def exclusive_message(lattice, q):
    """Normalized kernel sum over all other points, shape (N, k), float64."""
    inclusive = lattice.apply(q)
    own = lattice.self_weights[:, None] * np.asarray(q, dtype=np.float64)
    return (inclusive - own) / np.maximum(lattice.normalizer, ph.NORM_EPS)[:, None]


def exclusive_message_transpose(lattice, g):
    """Transpose of :func:`exclusive_message` applied to ``g`` (N, k)."""
    scaled = np.asarray(g, dtype=np.float64) / np.maximum(lattice.normalizer, ph.NORM_EPS)[:, None]
    return lattice.apply(scaled, reverse=True) - lattice.self_weights[:, None] * scaled


def message_passing(lat_app, lat_smooth, q):
    q = np.asarray(q)
    n = q.reshape(-1, q.shape[-1]).shape[0]
    if lat_app.n_points != n or lat_smooth.n_points != n:
        raise ShapeError(f"lattices built for {lat_app.n_points}/{lat_smooth.n_points} points, q has {n}")
    flat = q.reshape(n, -1)
    return exclusive_message(lat_app, flat), exclusive_message(lat_smooth, flat)


def compatibility_transform(q_tilde_app, q_tilde_smooth, params):
    """q_hat[i, l] = sum_l' mu[l, l'] * (w1 * app[i, l'] + w2 * smooth[i, l'])."""
    if np.shape(q_tilde_app) != np.shape(q_tilde_smooth):
        raise ShapeError("message shapes differ")
    if np.shape(q_tilde_app)[-1] != params.n_labels:
        raise ShapeError(f"messages have {np.shape(q_tilde_app)[-1]} labels, mu is {params.mu.shape}")
    w1, w2 = params.w
    combined = w1 * np.asarray(q_tilde_app, dtype=np.float64) + w2 * np.asarray(q_tilde_smooth, dtype=np.float64)
    return combined @ params.mu.T


def local_update(unary, q_hat):
    unary = np.asarray(unary)
    dtype = np.float64 if unary.dtype == np.float64 else np.float32
    return softmax_channels(-unary.astype(np.float64) - q_hat).astype(dtype)


@dataclass
class Tape:
    """Intermediates of one unrolled forward pass, one record per iteration."""

    lat_app: ph.Lattice
    lat_smooth: ph.Lattice
    unary: np.ndarray
    params: CrfParams
    q_in: list = field(default_factory=list)
    q_tilde_app: list = field(default_factory=list)
    q_tilde_smooth: list = field(default_factory=list)
    q_hat: list = field(default_factory=list)
    q_out: Optional[np.ndarray] = None

    def __len__(self):
        return len(self.q_in)


def run_unrolled(lat_app, lat_smooth, unary, params, tape=None):
    """T mean-field iterations on flat (N, k) unaries; returns (q, max_deltas).

    With ``tape`` given, messages are always computed and recorded; without
    it, filtering is skipped when both kernel weights are zero.
    """
    unary = np.asarray(unary)
    q = init_q(unary)
    deltas = []
    silent = params.w == (0.0, 0.0)
    for _ in range(params.iterations):
        if tape is not None or not silent:
            q_app, q_smooth = message_passing(lat_app, lat_smooth, q)
        if silent:
            q_hat = np.zeros(q.shape)
        else:
            q_hat = compatibility_transform(q_app, q_smooth, params)
        if tape is not None:
            tape.q_in.append(q)
            tape.q_tilde_app.append(q_app)
            tape.q_tilde_smooth.append(q_smooth)
            tape.q_hat.append(q_hat)
        new_q = local_update(unary, q_hat)
        deltas.append(float(np.abs(new_q.astype(np.float64) - q).max()))
        q = new_q
    if tape is not None:
        tape.q_out = q
    return q, deltas


def _check_pair(reference, probs, params):
    reference = check_tensor(reference, "reference")
    probs = check_tensor(probs, "probs")
    if reference.shape[:-1] != probs.shape[:-1]:
        raise ShapeError(f"reference extents {reference.shape[:-1]} != probs extents {probs.shape[:-1]}")
    if probs.shape[-1] != params.n_labels:
        raise ShapeError(f"probs have {probs.shape[-1]} labels but mu is {params.mu.shape}")
    return reference, probs


def forward(reference, probs, params, lattices=None, record=False):
    """Shared body of :func:`mean_field_inference` and the taped forward."""
    reference, probs = _check_pair(reference, probs, params)
    lat_app, lat_smooth = lattices if lattices is not None else build_lattices(reference, params)
    unary = unary_from_probs(probs)
    k = probs.shape[-1]
    flat_unary = unary.reshape(-1, k)
    tape = Tape(lat_app, lat_smooth, flat_unary, params) if record else None
    q, deltas = run_unrolled(lat_app, lat_smooth, flat_unary, params, tape=tape)
    return MeanFieldState(q.reshape(probs.shape), deltas), tape


def mean_field_inference(reference, probs, params):
    """Refine classifier probabilities ``probs`` (*spatial, k) against ``reference``.

    Both lattices are built once; exactly ``params.iterations`` updates run.
    float64 ``probs`` select a float64 path, anything else runs in float32.
    """
    state, _ = forward(reference, probs, params)
    return state
