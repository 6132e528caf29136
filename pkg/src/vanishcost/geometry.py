"""Domains, control regions and uniform finite-volume grids."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import (
    DimensionMismatchError,
    EmptyShrinkError,
    InvalidResolutionError,
    UnsupportedDomainError,
)

DEFAULT_BOUNDARY_SAMPLES = 64


def _as_points(x, dim):
    x = np.asarray(x, dtype=float)
    if x.ndim == 0:
        x = x.reshape(1)
    if x.shape[-1] != dim:
        if dim == 1 and x.ndim == 1:
            return x[:, None]
        raise DimensionMismatchError(f"expected points of dimension {dim}, got shape {x.shape}")
    return x


@dataclass(frozen=True)
class Domain:
    """Interval, axis-aligned rectangle, or disk."""

    kind: str
    lower: tuple = ()
    upper: tuple = ()
    center: tuple = ()
    radius: float = 0.0

    def __post_init__(self):
        if self.kind in ("interval", "rectangle"):
            want = 1 if self.kind == "interval" else 2
            if len(self.lower) != want or len(self.upper) != want:
                raise ValueError(f"{self.kind} needs {want} lower/upper bounds")
            if any(lo >= hi for lo, hi in zip(self.lower, self.upper)):
                raise ValueError(f"lower < upper violated: {self.lower} {self.upper}")
        elif self.kind == "disk":
            if len(self.center) != 2 or not self.radius > 0:
                raise ValueError("disk needs a 2-D center and radius > 0")
        else:
            raise ValueError(f"unknown domain kind {self.kind!r}")

    @classmethod
    def interval(cls, a, b):
        return cls("interval", (float(a),), (float(b),))

    @classmethod
    def rectangle(cls, a1, b1, a2, b2):
        return cls("rectangle", (float(a1), float(a2)), (float(b1), float(b2)))

    @classmethod
    def disk(cls, cx, cy, r):
        return cls("disk", center=(float(cx), float(cy)), radius=float(r))

    @property
    def dim(self) -> int:
        return {"interval": 1, "rectangle": 2, "disk": 2}[self.kind]

    @property
    def bbox(self):
        if self.kind == "disk":
            c = np.array(self.center)
            return c - self.radius, c + self.radius
        return np.array(self.lower), np.array(self.upper)

    @property
    def measure(self) -> float:
        if self.kind == "disk":
            return float(np.pi * self.radius**2)
        return float(np.prod(np.subtract(self.upper, self.lower)))

    @property
    def diameter(self) -> float:
        lo, hi = self.bbox
        return float(np.linalg.norm(hi - lo))

    def contains(self, x, tol=0.0):
        """Membership in the closed domain (with slack ``tol``)."""
        x = _as_points(x, self.dim)
        if self.kind == "disk":
            return np.linalg.norm(x - np.array(self.center), axis=-1) <= self.radius + tol
        lo, hi = self.bbox
        return np.all((x >= lo - tol) & (x <= hi + tol), axis=-1)

    def boundary_samples(self, n=DEFAULT_BOUNDARY_SAMPLES):
        """Points on the boundary with outward unit normals.

        Rectangle faces are sampled endpoint-inclusive, so every corner shows
        up once per adjacent face, each time with that face's normal.
        """
        if self.kind == "interval":
            pts = np.array([[self.lower[0]], [self.upper[0]]])
            nrm = np.array([[-1.0], [1.0]])
            return pts, nrm
        if self.kind == "disk":
            ang = 2 * np.pi * np.arange(n) / n
            nrm = np.stack([np.cos(ang), np.sin(ang)], axis=1)
            return np.array(self.center) + self.radius * nrm, nrm
        lo, hi = self.bbox
        s = np.linspace(0.0, 1.0, n)
        pts, nrms = [], []
        for axis in range(2):
            other = 1 - axis
            for side, val in ((-1.0, lo[axis]), (1.0, hi[axis])):
                p = np.empty((n, 2))
                p[:, axis] = val
                p[:, other] = lo[other] + s * (hi[other] - lo[other])
                nv = np.zeros((n, 2))
                nv[:, axis] = side
                pts.append(p)
                nrms.append(nv)
        return np.concatenate(pts), np.concatenate(nrms)

    def lattice(self, n):
        """Tensor lattice with ``n`` points per axis over the bounding box, kept
        if inside the closed domain, plus boundary samples.  Returns (points, spacing)."""
        lo, hi = self.bbox
        axes = [np.linspace(lo[k], hi[k], n) for k in range(self.dim)]
        mesh = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, self.dim)
        pts = mesh[self.contains(mesh, tol=1e-12)]
        if self.kind == "disk":
            bpts, _ = self.boundary_samples()
            pts = np.concatenate([pts, bpts])
        spacing = float(max((hi[k] - lo[k]) / (n - 1) for k in range(self.dim)))
        return pts, spacing


@dataclass(frozen=True)
class Box:
    lower: tuple
    upper: tuple

    def __post_init__(self):
        if len(self.lower) != len(self.upper) or any(a >= b for a, b in zip(self.lower, self.upper)):
            raise ValueError(f"degenerate box {self.lower} {self.upper}")

    @property
    def dim(self):
        return len(self.lower)

    @property
    def measure(self):
        return float(np.prod(np.subtract(self.upper, self.lower)))

    @property
    def inradius(self):
        return float(np.min(np.subtract(self.upper, self.lower)) / 2)

    def signed_distance(self, x):
        c = (np.array(self.upper) + np.array(self.lower)) / 2
        half = (np.array(self.upper) - np.array(self.lower)) / 2
        q = np.abs(x - c) - half
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
        inside = np.minimum(np.max(q, axis=-1), 0.0)
        return outside + inside

    def shrink(self, m):
        return Box(tuple(a + m for a in self.lower), tuple(b - m for b in self.upper))


@dataclass(frozen=True)
class Ball:
    center: tuple
    radius: float

    def __post_init__(self):
        if not self.radius > 0:
            raise ValueError("ball radius must be positive")

    @property
    def dim(self):
        return len(self.center)

    @property
    def measure(self):
        d = self.dim
        r = self.radius
        return {1: 2 * r, 2: np.pi * r**2, 3: 4 / 3 * np.pi * r**3}[d]

    @property
    def inradius(self):
        return float(self.radius)

    def signed_distance(self, x):
        return np.linalg.norm(x - np.array(self.center), axis=-1) - self.radius

    def shrink(self, m):
        return Ball(self.center, self.radius - m)


@dataclass(frozen=True)
class Region:
    """Finite union of open boxes and balls."""

    members: tuple = field(default_factory=tuple)

    def __post_init__(self):
        if not self.members:
            raise ValueError("region must have at least one member")
        dims = {m.dim for m in self.members}
        if len(dims) != 1:
            raise DimensionMismatchError("region members have mixed dimensions")

    @classmethod
    def interval(cls, a, b):
        return cls((Box((float(a),), (float(b),)),))

    @classmethod
    def box(cls, lower: Sequence[float], upper: Sequence[float]):
        return cls((Box(tuple(map(float, lower)), tuple(map(float, upper))),))

    @classmethod
    def ball(cls, center: Sequence[float], radius: float):
        center = tuple(map(float, center))
        if len(center) == 1:
            # a 1-D ball is an interval; boxes get exact cell fractions
            return cls.interval(center[0] - radius, center[0] + radius)
        return cls((Ball(center, float(radius)),))

    def union(self, other: "Region") -> "Region":
        return Region(self.members + other.members)

    __or__ = union

    @property
    def dim(self):
        return self.members[0].dim

    @property
    def inradius(self):
        return max(m.inradius for m in self.members)

    @property
    def measure(self):
        if len(self.members) == 1:
            return self.members[0].measure
        return _sampled_union_measure(self)

    def signed_distance(self, x):
        x = _as_points(x, self.dim)
        return np.min(np.stack([m.signed_distance(x) for m in self.members]), axis=0)

    def contains(self, x):
        """Membership in the open region."""
        return self.signed_distance(x) < 0

    def distance(self, x):
        return np.maximum(self.signed_distance(x), 0.0)

    def shrink(self, margin):
        return shrink_region(self, margin)

    def center(self):
        """Center of the member with the largest inradius."""
        m = max(self.members, key=lambda m: m.inradius)
        if isinstance(m, Ball):
            return np.array(m.center)
        return (np.array(m.lower) + np.array(m.upper)) / 2

    def bbox(self):
        los, his = [], []
        for m in self.members:
            if isinstance(m, Ball):
                c = np.array(m.center)
                los.append(c - m.radius)
                his.append(c + m.radius)
            else:
                los.append(np.array(m.lower))
                his.append(np.array(m.upper))
        return np.min(los, axis=0), np.max(his, axis=0)


def _sampled_union_measure(region, n=400):
    lo, hi = region.bbox()
    axes = [lo[k] + (np.arange(n) + 0.5) * (hi[k] - lo[k]) / n for k in range(region.dim)]
    mesh = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, region.dim)
    return float(np.mean(region.contains(mesh)) * np.prod(hi - lo))


def region_distance(region: Region, point) -> float | np.ndarray:
    """Euclidean distance from ``point`` (or an array of points) to the closure of ``region``."""
    p = np.asarray(point, dtype=float)
    if p.ndim == 0:
        p = p.reshape(1)
    if p.shape[-1] != region.dim:
        raise DimensionMismatchError(f"point of dimension {p.shape[-1]} vs region of dimension {region.dim}")
    d = region.distance(p)
    return float(d) if np.ndim(d) == 0 or p.ndim == 1 else d


def shrink_region(region: Region, margin: float) -> Region:
    """Erode every member by ``margin``; the result is compactly inside ``region``."""
    if not margin > 0:
        raise ValueError("margin must be positive")
    kept = tuple(m.shrink(margin) for m in region.members if margin < m.inradius)
    if not kept:
        raise EmptyShrinkError(f"margin {margin} is not below the inradius {region.inradius}")
    return Region(kept)


@dataclass(frozen=True, eq=False)
class Grid:
    """Uniform tensor-product cell grid over an interval or rectangle.

    Cells are flattened in C order of ``shape`` (first axis slowest).
    """

    domain: Domain
    shape: tuple
    edges: tuple
    h: tuple

    @property
    def dim(self):
        return len(self.shape)

    @property
    def n_cells(self):
        return int(np.prod(self.shape))

    @property
    def cell_volume(self):
        return float(np.prod(self.h))

    @property
    def axes(self):
        """Cell-center coordinates per axis."""
        return tuple((e[:-1] + e[1:]) / 2 for e in self.edges)

    @property
    def centers(self):
        mesh = np.meshgrid(*self.axes, indexing="ij")
        return np.stack(mesh, axis=-1).reshape(-1, self.dim)

    @property
    def volumes(self):
        return np.full(self.n_cells, self.cell_volume)

    def face_area(self, axis):
        return float(np.prod([h for k, h in enumerate(self.h) if k != axis]))

    def interior_faces(self, axis):
        """(lower cell index, upper cell index, face centers) for faces normal to ``axis``."""
        idx = np.arange(self.n_cells).reshape(self.shape)
        lo = np.take(idx, np.arange(self.shape[axis] - 1), axis=axis).ravel()
        hi = np.take(idx, np.arange(1, self.shape[axis]), axis=axis).ravel()
        c = self.centers
        fc = (c[lo] + c[hi]) / 2
        return lo, hi, fc

    def boundary_faces(self):
        """Arrays (cell, axis, side, area, normal, center) for every boundary face."""
        idx = np.arange(self.n_cells).reshape(self.shape)
        c = self.centers
        cells, axes, sides, areas, normals, centers = [], [], [], [], [], []
        for axis in range(self.dim):
            for side, pos in ((-1, 0), (1, self.shape[axis] - 1)):
                cell = np.take(idx, pos, axis=axis).ravel()
                fc = c[cell].copy()
                fc[:, axis] = self.edges[axis][0] if side < 0 else self.edges[axis][-1]
                nv = np.zeros((cell.size, self.dim))
                nv[:, axis] = side
                cells.append(cell)
                axes.append(np.full(cell.size, axis))
                sides.append(np.full(cell.size, side))
                areas.append(np.full(cell.size, self.face_area(axis)))
                normals.append(nv)
                centers.append(fc)
        return (
            np.concatenate(cells),
            np.concatenate(axes),
            np.concatenate(sides),
            np.concatenate(areas),
            np.concatenate(normals),
            np.concatenate(centers),
        )

    def region_fractions(self, region: Region, subsamples=16):
        """Fraction of each cell's volume inside ``region``.

        Exact for boxes (interval overlap products, members assumed
        disjoint); balls fall back to ``subsamples`` points per axis.
        """
        if region.dim != self.dim:
            raise DimensionMismatchError("region/grid dimension mismatch")
        if all(isinstance(m, Box) for m in region.members):
            frac = np.zeros(self.shape)
            for m in region.members:
                part = np.ones(self.shape)
                for k in range(self.dim):
                    e = self.edges[k]
                    ov = np.clip(np.minimum(e[1:], m.upper[k]) - np.maximum(e[:-1], m.lower[k]), 0, None)
                    ov = ov / self.h[k]
                    shp = [1] * self.dim
                    shp[k] = -1
                    part = part * ov.reshape(shp)
                frac += part
            return np.clip(frac.ravel(), 0.0, 1.0)
        offs = (np.arange(subsamples) + 0.5) / subsamples - 0.5
        sub = np.stack(np.meshgrid(*[offs * h for h in self.h], indexing="ij"), -1).reshape(-1, self.dim)
        c = self.centers
        inside = region.contains(c[:, None, :] + sub[None, :, :])
        return inside.mean(axis=1)

    def mask(self, region: Region):
        """Cells whose centers lie in the closure of ``region``."""
        return region.signed_distance(self.centers) <= 0


def build_grid(domain: Domain, resolution, allow_single_cell: bool = False) -> Grid:
    """Uniform cell grid with ``resolution`` cells per axis.

    ``allow_single_cell`` admits one cell per axis, used only by the
    one-cell reduction of the observability cost.
    """
    if domain.kind == "disk":
        raise UnsupportedDomainError("disk domains are accepted by flow operations only")
    res = (resolution,) if np.isscalar(resolution) else tuple(resolution)
    if len(res) != domain.dim:
        raise DimensionMismatchError(f"resolution {res} for a {domain.dim}-D domain")
    floor = 1 if allow_single_cell else 2
    if any(int(r) != r or r < floor for r in res):
        raise InvalidResolutionError(f"resolution must be >= {floor} per axis, got {res}")
    res = tuple(int(r) for r in res)
    lo, hi = domain.bbox
    edges = tuple(np.linspace(lo[k], hi[k], res[k] + 1) for k in range(domain.dim))
    h = tuple(float((hi[k] - lo[k]) / res[k]) for k in range(domain.dim))
    return Grid(domain, res, edges, h)
