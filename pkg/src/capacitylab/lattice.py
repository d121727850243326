"""Lattice geometry: shapes, blow-ups, boundaries, adjacency."""
from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from typing import Optional, Sequence

import numpy as np

from . import _index

MIN_DIM, MAX_DIM = 3, 8
SHAPE_KINDS = ("ball", "box", "annulus", "union_of_boxes")


class EmptyDomainError(ValueError):
    """Raised when a shape has no lattice point at the requested scale."""


def as_fraction(v) -> Fraction:
    """Exact rational from int, Fraction, decimal string or float literal."""
    if isinstance(v, Fraction):
        return v
    if isinstance(v, (int, np.integer)):
        return Fraction(int(v))
    if isinstance(v, float):
        return Fraction(repr(v))
    return Fraction(str(v))


def _check_dim(d):
    if not (MIN_DIM <= int(d) <= MAX_DIM):
        raise ValueError(f"dimension {d} outside supported range {MIN_DIM}..{MAX_DIM}")


@dataclass(frozen=True)
class ShapeSpec:
    """A compact set D in R^d, blown up as (N*D) ∩ Z^d.

    ball: closed ball of radius `radius`; box: closed cube [-radius, radius]^d;
    annulus: inner*radius < |x| <= outer*radius; union_of_boxes: closed boxes
    given by (lo, hi) corner pairs.
    """

    kind: str
    d: int
    radius: Fraction = Fraction(1)
    inner: Optional[Fraction] = None
    outer: Optional[Fraction] = None
    boxes: tuple = ()

    def __post_init__(self):
        _check_dim(self.d)
        if self.kind not in SHAPE_KINDS:
            raise ValueError(f"unknown shape kind {self.kind!r}")
        object.__setattr__(self, "radius", as_fraction(self.radius))
        if self.radius <= 0:
            raise ValueError("shape radius must be positive")
        if self.kind == "annulus":
            if self.inner is None or self.outer is None:
                raise ValueError("annulus needs inner and outer fractions")
            inner, outer = as_fraction(self.inner), as_fraction(self.outer)
            if not (0 < inner < outer <= 1):
                raise ValueError("annulus fractions must satisfy 0 < inner < outer <= 1")
            object.__setattr__(self, "inner", inner)
            object.__setattr__(self, "outer", outer)
        if self.kind == "union_of_boxes":
            if not self.boxes:
                raise ValueError("union_of_boxes needs at least one box")
            norm = []
            for lo, hi in self.boxes:
                if len(lo) != self.d or len(hi) != self.d:
                    raise ValueError("box corner has wrong length")
                lo = tuple(as_fraction(v) for v in lo)
                hi = tuple(as_fraction(v) for v in hi)
                if any(a > b for a, b in zip(lo, hi)):
                    raise ValueError("box corners must satisfy lo <= hi")
                norm.append((lo, hi))
            object.__setattr__(self, "boxes", tuple(norm))

    @classmethod
    def ball(cls, d, radius=1):
        return cls("ball", d, radius=as_fraction(radius))

    @classmethod
    def box(cls, d, radius=1):
        return cls("box", d, radius=as_fraction(radius))

    @classmethod
    def annulus(cls, d, inner, outer):
        return cls("annulus", d, inner=as_fraction(inner), outer=as_fraction(outer))

    @classmethod
    def union_of_boxes(cls, d, boxes):
        return cls("union_of_boxes", d, boxes=tuple(boxes))

    def to_dict(self):
        out = {"kind": self.kind, "d": self.d, "radius": str(self.radius)}
        if self.kind == "annulus":
            out.update(inner=str(self.inner), outer=str(self.outer))
        if self.kind == "union_of_boxes":
            out["boxes"] = [[[str(v) for v in lo], [str(v) for v in hi]] for lo, hi in self.boxes]
        return out

    @classmethod
    def from_dict(cls, m):
        kind = m["kind"]
        d = int(m["d"])
        if kind == "annulus":
            return cls.annulus(d, m["inner"], m["outer"])
        if kind == "union_of_boxes":
            return cls.union_of_boxes(d, [(lo, hi) for lo, hi in m["boxes"]])
        return cls(kind, d, radius=as_fraction(m.get("radius", 1)))

    def label(self):
        if self.kind == "annulus":
            return f"annulus({self.inner},{self.outer})"
        if self.kind == "union_of_boxes":
            return f"boxes{len(self.boxes)}"
        if self.radius != 1:
            return f"{self.kind}({self.radius})"
        return self.kind

    def is_centrally_symmetric_hyperoctahedral(self):
        return self.kind in ("ball", "box", "annulus")


def _lexsort_unique(pts):
    if pts.shape[0] == 0:
        return pts
    return np.unique(pts, axis=0)


class PointIndex:
    """O(1) membership and index lookup for a sorted point array."""

    def __init__(self, pts: np.ndarray):
        self.pts = np.ascontiguousarray(pts, dtype=np.int64)
        n, d = self.pts.shape
        if n == 0:
            self.lo = np.zeros(d, dtype=np.int64)
            self.ext = np.zeros(d, dtype=np.int64)
        else:
            self.lo = self.pts.min(axis=0)
            self.ext = self.pts.max(axis=0) - self.lo + 1
        vol = float(np.prod(self.ext.astype(float))) if n else 0.0
        if n and vol <= max(_index.DENSE_GRID_LIMIT, 8 * n) and vol <= 4e8:
            self.grid = _index.build_grid(self.pts, self.lo, self.ext)
            self.htab = np.empty(0, dtype=np.int32)
        else:
            size = 1 << max(4, int(np.ceil(np.log2(max(2 * n, 16)))))
            self.grid = np.empty(0, dtype=np.int32)
            self.htab = _index.build_hash(self.pts, size) if n else -np.ones(16, dtype=np.int32)

    @property
    def arrays(self):
        return self.pts, self.lo, self.ext, self.grid, self.htab

    def find(self, q) -> np.ndarray:
        q = np.ascontiguousarray(np.atleast_2d(q), dtype=np.int64)
        if self.pts.shape[0] == 0:
            return -np.ones(q.shape[0], dtype=np.int64)
        return _index.locate_many(q, *self.arrays)


@dataclass(eq=False)
class DomainInstance:
    """An immutable finite subset of Z^d with boundary and adjacency."""

    points: np.ndarray
    shape: Optional[ShapeSpec] = None
    scale: Optional[int] = None
    _index: PointIndex = field(init=False, repr=False)
    _nbr: Optional[np.ndarray] = field(init=False, default=None, repr=False)
    _bmask: Optional[np.ndarray] = field(init=False, default=None, repr=False)

    def __post_init__(self):
        pts = np.ascontiguousarray(self.points, dtype=np.int64)
        if pts.ndim != 2:
            raise ValueError("points must be an (n, d) array")
        self.points = pts
        self.points.setflags(write=False)
        self._index = PointIndex(pts)

    @classmethod
    def from_points(cls, pts, d=None, shape=None, scale=None):
        pts = np.asarray(pts, dtype=np.int64)
        if pts.size == 0:
            if d is None:
                raise ValueError("dimension needed for an empty point set")
            pts = np.empty((0, d), dtype=np.int64)
        else:
            pts = pts.reshape(pts.shape[0], -1)
        _check_dim(pts.shape[1])
        return cls(_lexsort_unique(pts), shape=shape, scale=scale)

    @property
    def d(self) -> int:
        return self.points.shape[1]

    def __len__(self):
        return self.points.shape[0]

    @property
    def index(self) -> PointIndex:
        return self._index

    def index_of(self, x) -> int:
        return int(self._index.find(np.asarray(x))[0])

    def contains(self, x) -> bool:
        return self.index_of(x) >= 0

    def contains_many(self, q) -> np.ndarray:
        return self._index.find(q) >= 0

    @property
    def nbr(self) -> np.ndarray:
        """(n, 2d) neighbor indices in the order +e1, -e1, +e2, ...; -1 outside."""
        if self._nbr is None:
            if len(self) == 0:
                self._nbr = np.empty((0, 2 * self.d), dtype=np.int32)
            else:
                self._nbr = _index.neighbor_table(*self._index.arrays)
            self._nbr.setflags(write=False)
        return self._nbr

    @property
    def boundary_mask(self) -> np.ndarray:
        if self._bmask is None:
            self._bmask = (self.nbr < 0).any(axis=1)
            self._bmask.setflags(write=False)
        return self._bmask

    @property
    def boundary_indices(self) -> np.ndarray:
        return np.flatnonzero(self.boundary_mask)

    @property
    def center(self) -> np.ndarray:
        if len(self) == 0:
            return np.zeros(self.d)
        return 0.5 * (self.points.min(axis=0) + self.points.max(axis=0))

    def radius_about(self, c=None) -> float:
        """max |x - c| over the points; c defaults to the bounding-box center."""
        if len(self) == 0:
            return 0.0
        c = self.center if c is None else np.asarray(c, dtype=float)
        return float(np.sqrt(((self.points - c) ** 2).sum(axis=1).max()))

    @property
    def diameter(self) -> float:
        """Euclidean diameter bound: twice the radius about the box center."""
        if len(self) <= 1:
            return 0.0
        return 2.0 * self.radius_about()

    def hyperoctahedral(self) -> bool:
        """True when the set is invariant under all coordinate sign flips and
        permutations about the origin (centered balls, cubes, annuli)."""
        return (self.shape is not None and self.scale is not None
                and self.shape.is_centrally_symmetric_hyperoctahedral())

    def subset(self, mask) -> "DomainInstance":
        return DomainInstance(self.points[np.asarray(mask, dtype=bool)])

    def __repr__(self):
        tag = self.shape.label() if self.shape is not None else "points"
        return f"DomainInstance(d={self.d}, {tag}, N={self.scale}, n={len(self)})"


def blow_up(shape: ShapeSpec, N: int) -> DomainInstance:
    """{x ∈ Z^d : x/N ∈ shape} with exact rational membership."""
    N = int(N)
    if N < 1:
        raise ValueError("scale N must be >= 1")
    d = shape.d
    R = shape.radius * N
    if shape.kind == "ball":
        pts = _index.radial_points(d, R * R)
    elif shape.kind == "annulus":
        outer, inner = R * shape.outer, R * shape.inner
        pts = _index.radial_points(d, outer * outer, inner * inner)
    elif shape.kind == "box":
        m = int(np.floor(R))
        ax = np.arange(-m, m + 1, dtype=np.int64)
        pts = np.stack(np.meshgrid(*([ax] * d), indexing="ij"), axis=-1).reshape(-1, d)
    else:
        chunks = []
        for lo, hi in shape.boxes:
            lo_i = [int(np.ceil(v * N)) for v in lo]
            hi_i = [int(np.floor(v * N)) for v in hi]
            if any(a > b for a, b in zip(lo_i, hi_i)):
                continue
            axes = [np.arange(a, b + 1, dtype=np.int64) for a, b in zip(lo_i, hi_i)]
            chunks.append(np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, d))
        pts = _lexsort_unique(np.concatenate(chunks)) if chunks else np.empty((0, d), dtype=np.int64)
    if pts.shape[0] == 0:
        raise EmptyDomainError(f"{shape.label()} at N={N} contains no lattice point")
    return DomainInstance(pts, shape=shape, scale=N)


def ball(d: int, N, center=None) -> DomainInstance:
    """Closed Euclidean ball of radius N (rational allowed) at the origin."""
    N = as_fraction(N)
    if N.denominator == 1:
        dom = blow_up(ShapeSpec.ball(d), int(N))
    else:
        dom = blow_up(ShapeSpec.ball(d, N), 1)
    if center is not None:
        return DomainInstance.from_points(dom.points + np.asarray(center, dtype=np.int64))
    return dom


def shrink(domain: DomainInstance, r) -> DomainInstance:
    """The ball of radius r*N with the same center, r in (0,1) rational."""
    r = as_fraction(r)
    if not (0 < r < 1):
        raise ValueError("shrink factor must lie in (0,1)")
    if domain.shape is None or domain.shape.kind != "ball" or domain.scale is None:
        raise ValueError("shrink needs a domain produced from a ball shape")
    sh = ShapeSpec.ball(domain.d, domain.shape.radius * r)
    try:
        return blow_up(sh, domain.scale)
    except EmptyDomainError:
        raise


def inner_boundary(domain: DomainInstance) -> np.ndarray:
    """Points of the domain with at least one neighbor outside, index order."""
    return domain.points[domain.boundary_mask]


def neighbors(x) -> np.ndarray:
    """The 2d nearest neighbors x+e1, x-e1, x+e2, ... of x."""
    x = np.asarray(x, dtype=np.int64)
    d = x.shape[0]
    out = np.repeat(x[None, :], 2 * d, axis=0)
    for i in range(d):
        out[2 * i, i] += 1
        out[2 * i + 1, i] -= 1
    return out


def outer_boundary(domain: DomainInstance) -> np.ndarray:
    """Sorted points outside the domain adjacent to it (possible exit sites)."""
    if len(domain) == 0:
        return np.empty((0, domain.d), dtype=np.int64)
    b = domain.boundary_indices
    cand = []
    for k in range(2 * domain.d):
        sel = b[domain.nbr[b, k] < 0]
        if sel.size:
            y = domain.points[sel].copy()
            y[:, k // 2] += 1 if k % 2 == 0 else -1
            cand.append(y)
    return _lexsort_unique(np.concatenate(cand))


def union(a: DomainInstance, b: DomainInstance) -> DomainInstance:
    return DomainInstance.from_points(np.concatenate([a.points, b.points]), d=a.d)


def is_subset(a: DomainInstance, b: DomainInstance) -> bool:
    return bool(b.contains_many(a.points).all()) if len(a) else True


def unit_vector(d: int, i: int, sign: int = 1) -> np.ndarray:
    e = np.zeros(d, dtype=np.int64)
    e[i] = sign
    return e


def points_of(seq: Sequence, d: int) -> DomainInstance:
    return DomainInstance.from_points(np.asarray(list(seq), dtype=np.int64).reshape(-1, d), d=d)
