"""Catmull-Rom feature sampling: control-point prediction, top-K selection,
chained-segment spline evaluation, positional queries, density maps.

Curves are parameterized by four control points in normalized image
coordinates. Endpoint duplication turns them into three chained segments,
so the sampled curve interpolates all four points.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Linear, Tensor, gelu, mlp

__all__ = [
    "logit",
    "predict_control_points",
    "select_topk",
    "catrom_matrix",
    "catrom_basis",
    "chained_sample_weights",
    "sample_curve",
    "sinusoidal_pe",
    "PositionalQueryHead",
    "control_point_density_map",
    "ProposalSet",
]

BOUNDARY_CLAMP = 1e-6  # pixel coords are clamped into (0,1) before the logit


def logit(p: np.ndarray) -> np.ndarray:
    p = np.asarray(p)
    return np.log(p) - np.log1p(-p)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-x))


def predict_control_points(p_hat, offsets) -> np.ndarray:
    """crp_j = sigmoid(offset_j + logit(p_hat)), componentwise.

    p_hat: (2,) point in (0,1)^2; offsets: (4, 2) logit-space deltas.
    Boundary coordinates are clamped into the open square first.
    """
    p_hat = np.clip(np.asarray(p_hat, dtype=np.float64),
                    BOUNDARY_CLAMP, 1.0 - BOUNDARY_CLAMP)
    offsets = np.asarray(offsets, dtype=np.float64)
    if offsets.shape != (4, 2):
        raise ValueError(f"expected 4 two-dimensional offsets, got {offsets.shape}")
    return _sigmoid(offsets + logit(p_hat))


def select_topk(scores: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest scores, descending; ties break low-index-first."""
    scores = np.asarray(scores).reshape(-1)
    if k < 1:
        raise ValueError("k must be >= 1")
    if k > scores.size:
        raise ValueError(f"k={k} exceeds candidate count {scores.size}")
    order = np.lexsort((np.arange(scores.size), -scores))
    return order[:k]


def catrom_matrix(tau: float = 0.5) -> np.ndarray:
    """Basis matrix M(tau) for row vector U = [1, u, u^2, u^3].

    The segment interpolates its middle two points with end tangents
    tau * (P_{k+1} - P_{k-1}); rows sum to (1, 0, 0, 0) so U M is a
    partition of unity.
    """
    t = float(tau)
    return np.array([
        [0.0,      1.0,       0.0,       0.0],
        [-t,       0.0,       t,         0.0],
        [2.0 * t,  t - 3.0,   3.0 - 2.0 * t, -t],
        [-t,       2.0 - t,   t - 2.0,   t],
    ])


def catrom_basis(u: float, tau: float = 0.5) -> np.ndarray:
    """Weight row U(u) M(tau); weights sum to 1 for every u."""
    u = float(u)
    big_u = np.array([1.0, u, u * u, u * u * u])
    return big_u @ catrom_matrix(tau)


# chained segments over control points (p0, p1, p2, p3) with endpoint
# duplication; each entry maps segment-local basis weights to point indices
_SEGMENT_INDEX = ((0, 0, 1, 2), (0, 1, 2, 3), (1, 2, 3, 3))


def chained_sample_weights(n: int, tau: float = 0.5) -> np.ndarray:
    """Constant [n, 4] matrix W with samples = W @ control_points.

    Sampling is uniform in the global parameter across the three chained
    segments; rows 0 and n-1 are exactly one-hot on the end points.
    """
    if n < 2:
        raise ValueError("need at least 2 samples")
    weights = np.zeros((n, 4))
    for i, t in enumerate(np.linspace(0.0, 1.0, n)):
        seg = min(int(t * 3.0), 2)
        u = t * 3.0 - seg
        basis = catrom_basis(u, tau)
        for w, idx in zip(basis, _SEGMENT_INDEX[seg]):
            weights[i, idx] += w
    return weights


def _arclength_reparam(control_points: np.ndarray, n: int, tau: float,
                       dense: int = 256) -> np.ndarray:
    w = chained_sample_weights(dense, tau)
    pts = w @ control_points
    seglen = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    cum = np.concatenate([[0.0], np.cumsum(seglen)])
    total = cum[-1]
    if total == 0.0:
        return np.linspace(0.0, 1.0, n)
    targets = np.linspace(0.0, total, n)
    dense_t = np.linspace(0.0, 1.0, dense)
    return np.interp(targets, cum, dense_t)


def sample_curve(control_points: np.ndarray, n: int, tau: float = 0.5,
                 arclength: bool = False) -> np.ndarray:
    """n points on the chained curve through the four control points."""
    cp = np.asarray(control_points, dtype=np.float64)
    if cp.shape != (4, 2):
        raise ValueError(f"expected [4, 2] control points, got {cp.shape}")
    if n < 2:
        raise ValueError("need at least 2 samples")
    if not arclength:
        return chained_sample_weights(n, tau) @ cp
    ts = _arclength_reparam(cp, n, tau)
    out = np.zeros((n, 2))
    for i, t in enumerate(ts):
        seg = min(int(t * 3.0), 2)
        u = t * 3.0 - seg
        basis = catrom_basis(u, tau)
        acc = np.zeros(2)
        for w, idx in zip(basis, _SEGMENT_INDEX[seg]):
            acc += w * cp[idx]
        out[i] = acc
    return out


def sample_curve_batch(control_points: Tensor, n: int, tau: float = 0.5) -> Tensor:
    """Differentiable batched sampling: [K, 4, 2] -> [K, n, 2].

    The parameter-uniform weights are constant, so sampling is one matmul.
    """
    w = Tensor(chained_sample_weights(n, tau).astype(control_points.dtype))
    return w.matmul(control_points)


def sinusoidal_pe(points: np.ndarray, channels: int) -> np.ndarray:
    """Deterministic sin/cos encoding of (x, y) into ``channels`` values.

    Channels split four ways: x-sin, x-cos, y-sin, y-cos; all outputs lie
    in [-1, 1].
    """
    if channels % 4 != 0:
        raise ValueError(f"channel count {channels} not divisible by 4")
    pts = np.asarray(points)
    quarter = channels // 4
    freqs = 2.0 * np.pi * (10000.0 ** (-np.arange(quarter) / quarter))
    xs = pts[..., 0:1] * freqs
    ys = pts[..., 1:2] * freqs
    return np.concatenate([np.sin(xs), np.cos(xs), np.sin(ys), np.cos(ys)], axis=-1)


def sinusoidal_pe_t(points: Tensor, channels: int) -> Tensor:
    """Differentiable version of :func:`sinusoidal_pe` for Tensor inputs."""
    if channels % 4 != 0:
        raise ValueError(f"channel count {channels} not divisible by 4")
    quarter = channels // 4
    freqs = Tensor((2.0 * np.pi * (10000.0 ** (-np.arange(quarter) / quarter))
                    ).astype(points.dtype))
    ndim = len(points.shape)
    xs = points.take([0], axis=ndim - 1).matmul(freqs.reshape(1, quarter))
    ys = points.take([1], axis=ndim - 1).matmul(freqs.reshape(1, quarter))
    return Tensor.concat([xs.sin(), xs.cos(), ys.sin(), ys.cos()], axis=ndim - 1)


class PositionalQueryHead:
    """P_q = MLP(PE(P_s)): projects encoded sample points into model width."""

    def __init__(self, channels: int, rng: np.random.Generator, dtype=np.float32):
        self.channels = channels
        self.fc1 = Linear(channels, channels, rng, dtype=dtype)
        self.fc2 = Linear(channels, channels, rng, dtype=dtype)

    def __call__(self, sampled_points: Tensor) -> Tensor:
        pe = sinusoidal_pe_t(sampled_points, self.channels)
        return mlp(pe, [self.fc1, self.fc2], gelu)

    def params(self, prefix: str) -> dict[str, Tensor]:
        out = self.fc1.params(f"{prefix}.fc1")
        out.update(self.fc2.params(f"{prefix}.fc2"))
        return out


@dataclass
class ProposalSet:
    """Top-K control-point proposals with their samples and queries."""
    control_points: np.ndarray        # [K, 4, 2]
    sampled_points: np.ndarray        # [K, n, 2]
    scores: np.ndarray                # [K], sorted descending
    n: int
    positional_queries: np.ndarray | None = None  # [K, n, C]

    def __post_init__(self):
        k = self.control_points.shape[0]
        if self.control_points.shape != (k, 4, 2):
            raise ValueError("control_points must be [K, 4, 2]")
        if self.sampled_points.shape != (k, self.n, 2):
            raise ValueError("sampled_points must be [K, n, 2]")
        if self.scores.shape != (k,):
            raise ValueError("scores must be [K]")
        if np.any(np.diff(self.scores) > 0):
            raise ValueError("scores must be sorted descending")


def control_point_density_map(control_points: np.ndarray,
                              grid_h: int, grid_w: int) -> np.ndarray:
    """2-D histogram of all K x 4 control points; total mass is 4K."""
    if grid_h < 1 or grid_w < 1:
        raise ValueError("grid extents must be >= 1")
    pts = np.asarray(control_points).reshape(-1, 2)
    cols = np.clip((pts[:, 0] * grid_w).astype(int), 0, grid_w - 1)
    rows = np.clip((pts[:, 1] * grid_h).astype(int), 0, grid_h - 1)
    grid = np.zeros((grid_h, grid_w))
    np.add.at(grid, (rows, cols), 1.0)
    return grid
