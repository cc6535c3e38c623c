"""Characters on a pixel grid: normalization, augmentation, and conversion
into sparse grids of windowed signature features.

A character is a list of pen strokes.  Rasterization walks each stroke at
unit speed, samples it every ``sample_step`` pixels of arc length, and
writes the signature of the surrounding arc-length window into the nearest
grid cell.  Component 0 of every stored vector is the level-0 integral,
i.e. exactly 1, so slice 0 of the grid is a binary drawing of the character.

Grayscale images ride the same grid type with ``kind="image"`` and M = 1,
where component 0 holds the pixel intensity in (0, 1] instead of the
constant 1.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .signature import (
    PiecewiseLinearPath,
    locate,
    signature_dimension,
    windowed_signature,
)

__all__ = [
    "Character",
    "RasterConfig",
    "SparseFeatureGrid",
    "normalize_character",
    "rasterize",
    "to_dense",
    "from_dense",
    "augment_translate",
    "augment_affine",
    "image_to_grid",
]


@dataclass
class Character:
    """A list of pen strokes plus an optional class label."""

    strokes: list
    label: int | None = None

    @classmethod
    def from_arrays(cls, strokes, label=None) -> "Character":
        return cls([PiecewiseLinearPath(s) for s in strokes], label)

    def all_points(self) -> np.ndarray:
        if not self.strokes:
            raise ValueError("character has no strokes")
        return np.vstack([s.points for s in self.strokes])

    def map_points(self, fn) -> "Character":
        """New character with ``fn`` applied to every stroke's point array."""
        return Character(
            [PiecewiseLinearPath(fn(s.points)) for s in self.strokes], self.label
        )


@dataclass
class RasterConfig:
    """Grid geometry and signature parameters for rasterization.

    ``delta`` defaults to n/5 (roughly the scale of path curvature);
    ``sample_step`` defaults to one pixel of arc length.
    """

    N: int
    n: int
    m: int
    delta: float | None = None
    sample_step: float = 1.0

    def __post_init__(self):
        if not 0 < self.n <= self.N:
            raise ValueError(f"need 0 < n <= N, got n={self.n}, N={self.N}")
        if self.m < 0:
            raise ValueError(f"truncation level must be >= 0, got {self.m}")
        if self.delta is None:
            self.delta = self.n / 5.0
        if self.delta <= 0:
            raise ValueError(f"delta must be > 0, got {self.delta}")
        if self.sample_step <= 0:
            raise ValueError(f"sample_step must be > 0, got {self.sample_step}")


@dataclass
class SparseFeatureGrid:
    """An N x N grid holding an M-vector only at active cells.

    ``cells`` maps (row, col) to float32 vectors of length M.  Signature
    grids have component 0 exactly 1; image grids hold intensity there.
    """

    N: int
    M: int
    cells: dict
    kind: str = "signature"
    _packed: tuple | None = field(default=None, repr=False, compare=False)

    def packed(self) -> tuple[np.ndarray, np.ndarray]:
        """(locations (n,2) int64, features (n,M) float32), cached."""
        if self._packed is None:
            if self.cells:
                loc = np.array(list(self.cells.keys()), dtype=np.int64)
                feat = np.stack([np.asarray(v, np.float32) for v in self.cells.values()])
            else:
                loc = np.zeros((0, 2), dtype=np.int64)
                feat = np.zeros((0, self.M), dtype=np.float32)
            self._packed = (loc, feat)
        return self._packed


def normalize_character(ch: Character, n: int, N: int) -> Character:
    """Uniformly rescale and translate so the bounding box fits an n-box
    centered in [0, N)^2.

    Degenerate bounding boxes (single dot, or zero extent both ways) are
    translated to the grid center without rescaling.
    """
    pts = ch.all_points()
    lo = pts.min(axis=0)
    hi = pts.max(axis=0)
    extent = float((hi - lo).max())
    scale = n / extent if extent > 0 else 1.0
    center = (lo + hi) / 2.0
    target = N / 2.0
    return ch.map_points(lambda p: (p - center) * scale + target)


def _sample_times(length: float, step: float) -> np.ndarray:
    if length <= 0:
        return np.zeros(1)
    ts = np.arange(0.0, length, step)
    if length - ts[-1] > 1e-9:
        ts = np.append(ts, length)
    else:
        ts[-1] = length
    return ts


def rasterize(ch: Character, cfg: RasterConfig) -> SparseFeatureGrid:
    """Walk each stroke at unit speed and store windowed signatures.

    The caller normalizes the character into the grid first.  Samples land
    at t = 0, step, 2*step, ..., length (endpoint included); each writes the
    window signature to the nearest cell, last write winning.
    """
    M = signature_dimension(cfg.m)
    cells: dict = {}
    top = cfg.N - 1
    for stroke in ch.strokes:
        for t in _sample_times(stroke.length, cfg.sample_step):
            sig = windowed_signature(stroke, t, cfg.delta, cfg.m)
            x, y = locate(stroke, t)
            r = min(max(int(np.floor(y + 0.5)), 0), top)
            c = min(max(int(np.floor(x + 0.5)), 0), top)
            cells[(r, c)] = sig.coeffs.astype(np.float32)
    return SparseFeatureGrid(N=cfg.N, M=M, cells=cells, kind="signature")


def to_dense(g: SparseFeatureGrid) -> np.ndarray:
    """Dense (N, N, M) float32 array; inactive cells are all-zero vectors."""
    out = np.zeros((g.N, g.N, g.M), dtype=np.float32)
    for (r, c), v in g.cells.items():
        out[r, c] = v
    return out


def from_dense(arr: np.ndarray, kind: str = "signature") -> SparseFeatureGrid:
    """Inverse of :func:`to_dense` on grids it produced (nonzero cells kept)."""
    arr = np.asarray(arr, dtype=np.float32)
    if arr.ndim != 3 or arr.shape[0] != arr.shape[1]:
        raise ValueError(f"expected an (N, N, M) array, got shape {arr.shape}")
    cells = {}
    for r, c in zip(*np.nonzero(arr.any(axis=2))):
        cells[(int(r), int(c))] = arr[r, c].copy()
    return SparseFeatureGrid(N=arr.shape[0], M=arr.shape[2], cells=cells, kind=kind)


def augment_translate(ch: Character, max_shift: int, rng) -> Character:
    """Rigid shift by integer (dx, dy) uniform on [-max_shift, max_shift]^2."""
    if max_shift < 0:
        raise ValueError(f"max_shift must be >= 0, got {max_shift}")
    off = np.asarray(rng.integers(-max_shift, max_shift + 1, size=2), dtype=float)
    return ch.map_points(lambda p: p + off)


def augment_affine(ch: Character, rng, center=None) -> Character:
    """Random rotation and axis scalings about ``center``, then a +-2 shift.

    Draws, in order: theta ~ U(-0.13, 0.13) rad, (sx, sy) ~ U(0.85, 1.15)^2,
    then the integer shift of :func:`augment_translate`.  ``center`` defaults
    to the character's bounding-box center, which coincides with the grid
    center for normalized characters.
    """
    theta = float(rng.uniform(-0.13, 0.13))
    sx, sy = rng.uniform(0.85, 1.15, size=2)
    if center is None:
        pts = ch.all_points()
        center = (pts.min(axis=0) + pts.max(axis=0)) / 2.0
    center = np.asarray(center, dtype=float)
    ct, st = np.cos(theta), np.sin(theta)
    lin = np.array([[sx, 0.0], [0.0, sy]]) @ np.array([[ct, -st], [st, ct]])
    rotated = ch.map_points(lambda p: (p - center) @ lin.T + center)
    return augment_translate(rotated, 2, rng)


def image_to_grid(img: np.ndarray, N: int, shift=(0, 0)) -> SparseFeatureGrid:
    """Center an H x W grayscale image in an N-grid as an M=1 image grid.

    Integer images are scaled by 1/255 so intensities land in (0, 1].
    Pixels that fall outside the grid (N smaller than the image, or after a
    shift) are dropped.
    """
    img = np.asarray(img)
    if img.ndim != 2:
        raise ValueError(f"expected a 2-d grayscale image, got shape {img.shape}")
    scale = 1.0 / 255.0 if np.issubdtype(img.dtype, np.integer) else 1.0
    h, w = img.shape
    dx, dy = int(shift[0]), int(shift[1])
    r0 = (N - h) // 2 + dy
    c0 = (N - w) // 2 + dx
    cells = {}
    for i, j in zip(*np.nonzero(img)):
        r, c = r0 + int(i), c0 + int(j)
        if 0 <= r < N and 0 <= c < N:
            cells[(r, c)] = np.array([img[i, j] * scale], dtype=np.float32)
    return SparseFeatureGrid(N=N, M=1, cells=cells, kind="image")
