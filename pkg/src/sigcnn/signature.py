"""Truncated path-signature algebra for piecewise-linear planar paths.

A signature truncated at level m is kept as one flat float64 array: level 0
(the constant 1), level 1 (2 entries), ..., level m (2^m entries),
concatenated in increasing order, row-major Kronecker order inside each
level.  The level-k block of a straight segment with displacement v is
v^(x)k / k!, and signatures of concatenated paths combine by the graded
convolution (Chen's identity)

    (a * b)_k = sum_{i=0..k} a_i (x) b_{k-i},  k = 0..m,

truncated at level m.  Everything here is exact up to float64 rounding; no
quadrature is involved.

All functions are pure; paths are immutable after construction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "Point2",
    "Displacement2",
    "PiecewiseLinearPath",
    "TruncatedSignature",
    "signature_dimension",
    "level_slice",
    "identity_signature",
    "segment_signature",
    "chen_concat",
    "path_signature",
    "locate",
    "windowed_signature",
]

# Planar points/displacements are plain float arrays of shape (2,), (x, y)
# in pixel units.  The aliases only document intent.
Point2 = np.ndarray
Displacement2 = np.ndarray


def signature_dimension(m: int, d: int = 2) -> int:
    """Flat length 1 + d + d^2 + ... + d^m of a level-m signature in d dims."""
    if m < 0:
        raise ValueError(f"truncation level must be >= 0, got {m}")
    if d < 1:
        raise ValueError(f"path dimension must be >= 1, got {d}")
    if d == 1:
        return m + 1
    return (d ** (m + 1) - 1) // (d - 1)


def level_slice(k: int) -> slice:
    """Slice of the level-k block (2^k entries) within the flat coefficients."""
    return slice(2 ** k - 1, 2 ** (k + 1) - 1)


@dataclass(frozen=True, eq=False)
class TruncatedSignature:
    """Levels 0..m of the iterated integrals of a planar path, stored flat."""

    m: int
    coeffs: np.ndarray  # float64, length 2^(m+1) - 1; coeffs[0] == 1

    def level(self, k: int) -> np.ndarray:
        """The level-k block as a view of length 2^k."""
        if not 0 <= k <= self.m:
            raise ValueError(f"level {k} outside 0..{self.m}")
        return self.coeffs[level_slice(k)]

    def __repr__(self) -> str:
        return f"TruncatedSignature(m={self.m}, coeffs={self.coeffs.tolist()})"


def _segment_coeffs(delta: np.ndarray, m: int) -> np.ndarray:
    # Level k of a straight segment is delta^(x)k / k!; build iteratively so
    # block_k = outer(block_{k-1}, delta).ravel() / k.
    out = np.zeros(2 ** (m + 1) - 1)
    out[0] = 1.0
    block = out[:1]
    for k in range(1, m + 1):
        block = np.outer(block, delta).ravel() / k
        out[level_slice(k)] = block
    return out


def _chen_coeffs(a: np.ndarray, b: np.ndarray, m: int) -> np.ndarray:
    # Graded convolution: result level k = sum_i a_i (x) b_{k-i}.  The i=0 and
    # i=k terms are just b_k and a_k because level 0 is the scalar 1.
    out = np.empty_like(a)
    out[0] = 1.0
    for k in range(1, m + 1):
        acc = a[level_slice(k)] + b[level_slice(k)]
        for i in range(1, k):
            acc = acc + np.outer(a[level_slice(i)], b[level_slice(k - i)]).ravel()
        out[level_slice(k)] = acc
    return out


def identity_signature(m: int) -> TruncatedSignature:
    """Signature of a constant path: 1 at level 0, zeros above."""
    return TruncatedSignature(m, _segment_coeffs(np.zeros(2), m))


def segment_signature(delta, m: int) -> TruncatedSignature:
    """Exact signature of a straight segment with the given displacement."""
    delta = np.asarray(delta, dtype=float).reshape(2)
    if not np.isfinite(delta).all():
        raise ValueError(f"displacement must be finite, got {delta}")
    if m < 0:
        raise ValueError(f"truncation level must be >= 0, got {m}")
    return TruncatedSignature(m, _segment_coeffs(delta, m))


def chen_concat(a: TruncatedSignature, b: TruncatedSignature) -> TruncatedSignature:
    """Signature of the concatenated path, truncated at the common level."""
    if a.m != b.m:
        raise ValueError(
            f"cannot concatenate signatures truncated at different levels "
            f"({a.m} != {b.m})"
        )
    return TruncatedSignature(a.m, _chen_coeffs(a.coeffs, b.coeffs, a.m))


class PiecewiseLinearPath:
    """A polyline with its arc-length (unit-speed) parameterization cached.

    ``points`` is an (n, 2) float64 array, n >= 1; ``cumulative_length[i]`` is
    the arc length from the start to vertex i (so it begins at 0 and is
    non-decreasing).
    """

    __slots__ = ("points", "cumulative_length")

    def __init__(self, points):
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        if pts.ndim != 2 or pts.shape[1] != 2 or pts.shape[0] < 1:
            raise ValueError(f"expected an (n, 2) point array, got shape {pts.shape}")
        if not np.isfinite(pts).all():
            raise ValueError("path contains non-finite coordinates")
        self.points = pts
        seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
        self.cumulative_length = np.concatenate([[0.0], np.cumsum(seg)])

    @property
    def length(self) -> float:
        return float(self.cumulative_length[-1])

    def __len__(self) -> int:
        return len(self.points)

    def __repr__(self) -> str:
        return f"PiecewiseLinearPath({len(self.points)} pts, length={self.length:.3g})"


def _check_arc_range(path: PiecewiseLinearPath, t: float) -> float:
    length = path.length
    tol = 1e-9 * max(1.0, length)
    if t < -tol or t > length + tol:
        raise ValueError(f"arc length {t} outside [0, {length}]")
    return min(max(float(t), 0.0), length)


def locate(path: PiecewiseLinearPath, t: float) -> Point2:
    """The point at arc length t, interpolated within its segment."""
    t = _check_arc_range(path, t)
    cum = path.cumulative_length
    if len(cum) == 1:
        return path.points[0].copy()
    i = int(np.searchsorted(cum, t, side="right")) - 1
    i = min(max(i, 0), len(cum) - 2)
    seg = cum[i + 1] - cum[i]
    if seg <= 0.0:
        return path.points[i].copy()
    w = (t - cum[i]) / seg
    return (1.0 - w) * path.points[i] + w * path.points[i + 1]


def path_signature(path: PiecewiseLinearPath, m: int) -> TruncatedSignature:
    """Left-fold of segment signatures over the polyline's segments.

    Zero-length segments (repeated points) contribute the identity and are
    skipped; a single-point path yields the identity signature.
    """
    if m < 0:
        raise ValueError(f"truncation level must be >= 0, got {m}")
    coeffs = _segment_coeffs(np.zeros(2), m)
    for d in np.diff(path.points, axis=0):
        if d[0] != 0.0 or d[1] != 0.0:
            coeffs = _chen_coeffs(coeffs, _segment_coeffs(d, m), m)
    return TruncatedSignature(m, coeffs)


def _subpath_points(path: PiecewiseLinearPath, a: float, b: float) -> np.ndarray:
    # Vertices exactly at the window boundary belong to the following segment
    # (half-open convention), so only cum in (a, b) strictly is kept between
    # the interpolated endpoints.
    head = locate(path, a)
    if b <= a:
        return head[None, :]
    cum = path.cumulative_length
    lo = int(np.searchsorted(cum, a, side="right"))
    hi = int(np.searchsorted(cum, b, side="left"))
    tail = locate(path, b)
    return np.vstack([head[None, :], path.points[lo:hi], tail[None, :]])


def windowed_signature(
    path: PiecewiseLinearPath, t: float, delta: float, m: int
) -> TruncatedSignature:
    """Signature of the sub-path over arc lengths [t - delta, t + delta].

    The window is clipped to [0, length]; its endpoints split segments by
    linear interpolation.
    """
    if delta <= 0:
        raise ValueError(f"window half-length must be > 0, got {delta}")
    t = _check_arc_range(path, t)
    a = max(0.0, t - delta)
    b = min(path.length, t + delta)
    return path_signature(PiecewiseLinearPath(_subpath_points(path, a, b)), m)
