"""Icosahedral sampling grid and its planar chart representation.

Layout (frozen):

* The icosahedron has its poles at +z / -z.  The upper ring vertices ``U_k``
  sit at azimuth ``72k`` degrees, the lower ring vertices ``L_k`` at
  ``72k + 36`` degrees, both at elevation ``+/- atan(1/2)``.
* Chart ``k`` is the strip of the four faces ``(N, U_k, U_k+1)``,
  ``(U_k, L_k, U_k+1)``, ``(L_k, U_k+1, L_k+1)`` and ``(L_k, S, L_k+1)``.
  Unfolded it is a parallelogram addressed by lattice coordinates ``(i, j)``
  with ``i`` in ``[0, 2^r]`` running from ``U_k`` towards ``N`` and ``j`` in
  ``[0, 2^(r+1)]`` running from ``U_k`` through ``L_k`` towards ``S``.
* A chart owns the cells ``0 <= i < 2^r``, ``0 <= j < 2^(r+1)``; the other
  boundary belongs to chart ``k+1``.  Planar row = ``k * 2^r + i``, planar
  column = ``j``, cell index = ``row * 2^(r+1) + col``.
* The six hexagonal neighbours of ``(i, j)`` are the lattice offsets in
  ``RING_OFFSETS``, listed counter-clockwise when seen from outside the
  sphere.  ``(+1, -1)`` and ``(-1, +1)`` are not neighbours.
* The vertex cells are ``(k, 0, 0) = U_k`` and ``(k, 0, 2^r) = L_k``.  The
  poles are not planar cells; tables that need them use the pseudo indices
  ``n_cells`` (north) and ``n_cells + 1`` (south).
"""

from __future__ import annotations

import csv
import functools
import itertools
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

logger = logging.getLogger(__name__)

# counter-clockwise (seen from outside), starting at the (+1, +1) direction
RING_OFFSETS: tuple[tuple[int, int], ...] = ((1, 1), (1, 0), (0, -1), (-1, -1), (-1, 0), (0, 1))

MATCH_TOL = 1e-6


class GridError(ValueError):
    pass


def _normalize(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def icosahedron_vertices() -> dict[str, np.ndarray]:
    """The 12 icosahedron vertices with poles on the z axis."""
    elev = math.atan(0.5)
    verts = {"N": np.array([0.0, 0.0, 1.0]), "S": np.array([0.0, 0.0, -1.0])}
    for k in range(5):
        for name, az in ((f"U{k}", 72.0 * k), (f"L{k}", 72.0 * k + 36.0)):
            a = math.radians(az)
            z = math.sin(elev) if name[0] == "U" else -math.sin(elev)
            verts[name] = np.array([math.cos(elev) * math.cos(a), math.cos(elev) * math.sin(a), z])
    return verts


def _chart_lattice(k: int, r: int) -> np.ndarray:
    """Extended lattice of chart ``k``: array ``(2^r+1, 2^(r+1)+1, 3)``."""
    v = icosahedron_vertices()
    k1 = (k + 1) % 5
    pts = np.empty((2, 3, 3))
    pts[0, 0], pts[1, 0] = v[f"U{k}"], v["N"]
    pts[0, 1], pts[1, 1] = v[f"L{k}"], v[f"U{k1}"]
    pts[0, 2], pts[1, 2] = v["S"], v[f"L{k1}"]
    for _ in range(r):
        h, w = pts.shape[0] - 1, pts.shape[1] - 1
        q = np.empty((2 * h + 1, 2 * w + 1, 3))
        q[::2, ::2] = pts
        q[1::2, ::2] = _normalize(pts[:-1, :] + pts[1:, :])
        q[::2, 1::2] = _normalize(pts[:, :-1] + pts[:, 1:])
        q[1::2, 1::2] = _normalize(pts[:-1, :-1] + pts[1:, 1:])
        pts = q
    return pts


@dataclass(frozen=True, eq=False)
class IcoGrid:
    """Icosahedral grid at resolution ``r`` with its planar chart layout.

    ``neighbors[i]`` lists the sphere neighbours of cell ``i`` (6, or 5 for
    vertex cells), using pole pseudo indices where needed.  ``ring[i, d]`` is
    the neighbour of cell ``i`` in lattice direction ``RING_OFFSETS[d]``
    (``-1`` for vertex cells).  ``pad_source``/``pad_shift`` describe the
    padded planar layout: every padded position copies the extended value
    ``pad_source`` (cells, then north pole, south pole, zero) with its
    orientation channels rotated by ``pad_shift`` steps of 60 degrees.
    """

    r: int
    coords: np.ndarray
    vertex_mask: np.ndarray
    neighbors: tuple[tuple[int, ...], ...]
    ring: np.ndarray
    ring_shift: np.ndarray
    pole_neighbors: np.ndarray
    pad_source: np.ndarray
    pad_shift: np.ndarray
    _tree: cKDTree = field(repr=False)

    charts = 5

    @property
    def chart_height(self) -> int:
        return 2**self.r

    @property
    def chart_width(self) -> int:
        return 2 ** (self.r + 1)

    @property
    def n_cells(self) -> int:
        return 5 * 2 ** (2 * self.r + 1)

    @property
    def n_points(self) -> int:
        return self.n_cells + 2

    @property
    def shape(self) -> tuple[int, int]:
        return 5 * self.chart_height, self.chart_width

    @property
    def padded_shape(self) -> tuple[int, int]:
        return 5 * (self.chart_height + 2), self.chart_width + 2

    @property
    def north(self) -> int:
        return self.n_cells

    @property
    def south(self) -> int:
        return self.n_cells + 1

    @property
    def zero_index(self) -> int:
        return self.n_cells + 2

    @property
    def vertex_indices(self) -> np.ndarray:
        return np.flatnonzero(self.vertex_mask)

    @property
    def nonvertex_indices(self) -> np.ndarray:
        return np.flatnonzero(~self.vertex_mask)

    def cell_index(self, chart: int, i: int, j: int) -> int:
        return (chart * self.chart_height + i) * self.chart_width + j

    def cell_lattice(self, cell: int) -> tuple[int, int, int]:
        row, j = divmod(cell, self.chart_width)
        chart, i = divmod(row, self.chart_height)
        return chart, i, j

    def vertex_neighbors(self) -> np.ndarray:
        """``(10, 5)`` neighbour table of the vertex cells, row order of ``vertex_indices``."""
        return np.array([self.neighbors[v] for v in self.vertex_indices])

    def nearest_cell(self, u, exclude_vertices: bool = False) -> int:
        """Cell maximizing ``coords . u``; ties go to the lowest index.

        ``exclude_vertices`` restricts the search to the cells where an SRP
        map is actually computed.
        """
        u = np.asarray(u, dtype=float)
        norm = np.linalg.norm(u)
        if abs(norm - 1.0) > 1e-6:
            if abs(norm - 1.0) > 1e-3:
                raise GridError(f"direction must be a unit vector, got norm {norm:.6g}")
            logger.warning("normalizing near-unit direction (norm %.9f)", norm)
            u = u / norm
        dots = self.coords @ u
        if exclude_vertices:
            dots[self.vertex_mask] = -np.inf
        best = dots.max()
        # exact ties only; argmax returns the first occurrence
        return int(np.argmax(dots >= best))

    def nearest_cells(self, u: np.ndarray, exclude_vertices: bool = False) -> np.ndarray:
        """Vectorized ``nearest_cell`` for an ``(..., 3)`` array of unit vectors."""
        dots = np.asarray(u, dtype=float) @ self.coords.T
        if exclude_vertices:
            dots[..., self.vertex_mask] = -np.inf
        return np.argmax(dots, axis=-1)

    def match(self, points: np.ndarray, tol: float = MATCH_TOL) -> np.ndarray:
        """Index of the cell at each point; raises if any point has no cell within ``tol``."""
        dist, idx = self._tree.query(points)
        bad = dist > tol
        if np.any(bad):
            raise GridError(f"{bad.sum()} points have no grid cell within {tol}")
        return idx

    def to_planar(self, field_: np.ndarray) -> np.ndarray:
        """Reshape a ``(..., n_cells)`` field to ``(..., 5*2^r, 2^(r+1))``."""
        return np.asarray(field_).reshape(*np.shape(field_)[:-1], *self.shape)

    def dump_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["cell_index", "x", "y", "z", "is_vertex"])
            for i, (p, v) in enumerate(zip(self.coords, self.vertex_mask)):
                w.writerow([i, repr(float(p[0])), repr(float(p[1])), repr(float(p[2])), int(v)])


def _build(r: int) -> IcoGrid:
    H, W = 2**r, 2 ** (r + 1)
    n = 5 * H * W
    lattices = [_chart_lattice(k, r) for k in range(5)]
    coords = np.concatenate([lat[:H, :W].reshape(-1, 3) for lat in lattices])
    coords = _normalize(coords)
    tree = cKDTree(coords)
    poles = np.array([[0.0, 0.0, 1.0], [0.0, 0.0, -1.0]])

    def global_ids(points: np.ndarray) -> np.ndarray:
        flat = points.reshape(-1, 3)
        dist, idx = tree.query(flat)
        for p, pid in ((poles[0], n), (poles[1], n + 1)):
            at_pole = np.linalg.norm(flat - p, axis=1) < MATCH_TOL
            idx[at_pole] = pid
            dist[at_pole] = 0.0
        if np.any(dist > MATCH_TOL):
            raise GridError("chart lattice point does not match any grid point")
        return idx.reshape(points.shape[:-1])

    ids = [global_ids(lat) for lat in lattices]

    adjacency: list[set[int]] = [set() for _ in range(n + 2)]
    for gid in ids:
        for a, b in ((gid[:-1, :], gid[1:, :]), (gid[:, :-1], gid[:, 1:]), (gid[:-1, :-1], gid[1:, 1:])):
            for x, y in zip(a.ravel(), b.ravel()):
                adjacency[x].add(int(y))
                adjacency[y].add(int(x))

    vertex_mask = np.zeros(n, dtype=bool)
    for k in range(5):
        vertex_mask[(k * H) * W + 0] = True
        vertex_mask[(k * H) * W + H] = True

    all_pts = np.concatenate([coords, poles])

    # ring[i, d]: neighbour in lattice direction d, ordered by angle around the outward normal
    cells, nbr_rows, anchor_d, anchor_id = [], [], [], []
    for k in range(5):
        gid = ids[k]
        for i in range(H):
            for j in range(W):
                c = gid[i, j]
                if vertex_mask[c]:
                    continue
                if len(adjacency[c]) != 6:
                    raise GridError(f"cell {c} has {len(adjacency[c])} neighbours")
                for d, (di, dj) in enumerate(RING_OFFSETS):
                    if 0 <= i + di <= H and 0 <= j + dj <= W:
                        anchor_d.append(d)
                        anchor_id.append(gid[i + di, j + dj])
                        break
                cells.append(c)
                nbr_rows.append(sorted(adjacency[c]))
    cells, nbr_rows = np.array(cells), np.array(nbr_rows)
    anchor_d, anchor_id = np.array(anchor_d), np.array(anchor_id)
    p = all_pts[cells]
    e1 = all_pts[anchor_id] - p
    v = all_pts[nbr_rows] - p[:, None]
    sin = np.einsum("mkx,mx->mk", np.cross(e1[:, None], v), p)
    cos = np.einsum("mkx,mx->mk", v, e1)
    angles = np.arctan2(sin, cos) % (2 * math.pi)
    angles[nbr_rows == anchor_id[:, None]] = 0.0
    order = np.take_along_axis(nbr_rows, np.argsort(angles, axis=1), axis=1)
    ring = -np.ones((n, 6), dtype=np.int64)
    dirs = (anchor_d[:, None] + np.arange(6)[None]) % 6
    ring[cells[:, None], dirs] = order

    # every lattice neighbour inside a chart must agree with the angular ordering
    for k in range(5):
        gid = ids[k]
        for d, (di, dj) in enumerate(RING_OFFSETS):
            i0, i1 = max(0, -di), min(H, H - di + 1)
            j0, j1 = max(0, -dj), min(W, W - dj + 1)
            src = gid[i0:min(i1, H), j0:min(j1, W)]
            dst = gid[i0 + di:min(i1, H) + di, j0 + dj:min(j1, W) + dj]
            src, dst = src.ravel(), dst.ravel()
            keep = (src < n)
            keep[keep] &= ~vertex_mask[src[keep]]
            if np.any(ring[src[keep], d] != dst[keep]):
                raise GridError(f"chart orientation mismatch in chart {k}")

    # frame change between a cell and each neighbour, in steps of 60 degrees
    ring_shift = np.zeros((n, 6), dtype=np.int64)
    nv = np.flatnonzero(~vertex_mask)
    m = ring[nv]
    ok = (m < n)
    ok[ok] &= ~vertex_mask[m[ok]]
    back = np.argmax(ring[np.where(ok, m, 0)] == nv[:, None, None], axis=2)
    shift = (np.arange(6)[None] + 3 - back) % 6
    ring_shift[nv] = np.where(ok, shift, 0)

    # padded layout
    PH, PW = H + 2, W + 2
    zero = n + 2
    pad_source = np.full((5 * PH, PW), zero, dtype=np.int64)
    pad_shift = np.zeros((5 * PH, PW), dtype=np.int64)
    claimed = np.zeros((5 * PH, PW), dtype=bool)
    for k in range(5):
        for i in range(H):
            for j in range(W):
                c = ids[k][i, j]
                pad_source[k * PH + i + 1, j + 1] = c
                claimed[k * PH + i + 1, j + 1] = True
        for i in range(H):
            for j in range(W):
                c = ids[k][i, j]
                if vertex_mask[c]:
                    continue
                for d, (di, dj) in enumerate(RING_OFFSETS):
                    ii, jj = i + di, j + dj
                    if 0 <= ii < H and 0 <= jj < W:
                        continue
                    pos = (k * PH + ii + 1, jj + 1)
                    src, sh = ring[c, d], ring_shift[c, d]
                    if claimed[pos]:
                        if pad_source[pos] != src or pad_shift[pos] != sh:
                            raise GridError(f"inconsistent padding at chart {k} position {(ii, jj)}")
                    pad_source[pos], pad_shift[pos] = src, sh
                    claimed[pos] = True

    neighbors = tuple(tuple(sorted(adjacency[c])) for c in range(n))
    pole_neighbors = np.array([sorted(adjacency[n]), sorted(adjacency[n + 1])])
    return IcoGrid(
        r=r,
        coords=coords,
        vertex_mask=vertex_mask,
        neighbors=neighbors,
        ring=ring,
        ring_shift=ring_shift,
        pole_neighbors=pole_neighbors,
        pad_source=pad_source,
        pad_shift=pad_shift,
        _tree=tree,
    )


@functools.lru_cache(maxsize=None)
def build_grid(r: int) -> IcoGrid:
    """Build (and cache) the icosahedral grid at resolution ``r >= 1``."""
    if not isinstance(r, (int, np.integer)) or r < 1:
        raise GridError(f"resolution must be an integer >= 1, got {r!r}")
    return _build(int(r))


def vertex_fill(field_: np.ndarray, grid: IcoGrid) -> np.ndarray:
    """Replace vertex cells (last axis) by the mean of their 5 neighbours."""
    out = np.array(field_, dtype=float, copy=True)
    nb = grid.vertex_neighbors()
    out[..., grid.vertex_indices] = out[..., nb].mean(axis=-1)
    return out


def extend_field(field_: np.ndarray, grid: IcoGrid) -> np.ndarray:
    """Append north-pole, south-pole and zero entries to a ``(..., n_cells)`` field.

    Pole values are the mean of the 5 pole neighbours, i.e. the same rule
    used for the other icosahedron vertices.
    """
    field_ = np.asarray(field_, dtype=float)
    poles = field_[..., grid.pole_neighbors].mean(axis=-1)
    zero = np.zeros(field_.shape[:-1] + (1,))
    return np.concatenate([field_, poles, zero], axis=-1)


def planar_pad(field_: np.ndarray, grid: IcoGrid) -> np.ndarray:
    """Pad a scalar ``(..., n_cells)`` field to ``(..., 5*(2^r+2), 2^(r+1)+2)``."""
    field_ = np.asarray(field_, dtype=float)
    if field_.shape[-1] != grid.n_cells:
        raise GridError(f"field has {field_.shape[-1]} values, grid has {grid.n_cells} cells")
    return extend_field(field_, grid)[..., grid.pad_source]


def _rotation(axis: np.ndarray, angle: float) -> np.ndarray:
    axis = axis / np.linalg.norm(axis)
    x, y, z = axis
    K = np.array([[0, -z, y], [z, 0, -x], [-y, x, 0]])
    return np.eye(3) + math.sin(angle) * K + (1 - math.cos(angle)) * (K @ K)


def rotation_matrices() -> np.ndarray:
    """The 60 rotations of the icosahedron, identity first."""
    verts = np.array(list(icosahedron_vertices().values()))
    d = np.linalg.norm(verts[:, None] - verts[None], axis=-1)
    edge = d[d > 1e-9].min()
    adj = np.abs(d - edge) < 1e-9
    edges = [(a, b) for a, b in itertools.combinations(range(12), 2) if adj[a, b]]
    faces = [f for f in itertools.combinations(range(12), 3) if adj[f[0], f[1]] and adj[f[1], f[2]] and adj[f[0], f[2]]]
    assert len(edges) == 30 and len(faces) == 20

    def unique_axes(vecs):
        axes = []
        for v in vecs:
            v = v / np.linalg.norm(v)
            if not any(abs(abs(v @ a) - 1) < 1e-9 for a in axes):
                axes.append(v)
        return axes

    mats = [np.eye(3)]
    for a in unique_axes(verts):
        mats += [_rotation(a, 2 * math.pi * s / 5) for s in range(1, 5)]
    for a in unique_axes([verts[list(f)].sum(0) for f in faces]):
        mats += [_rotation(a, 2 * math.pi * s / 3) for s in range(1, 3)]
    for a in unique_axes([verts[list(e)].sum(0) for e in edges]):
        mats.append(_rotation(a, math.pi))
    mats = np.array(mats)
    assert mats.shape == (60, 3, 3)
    return mats


@dataclass(frozen=True, eq=False)
class RotationSet:
    """The icosahedral rotation group acting on grid cells.

    ``cell_perm[g][i]`` is the cell that cell ``i`` is carried to by
    ``matrices[g]``.  For non-vertex cells it matches coordinates exactly;
    the 10 vertex cells are a convention (a rotation may carry a vertex cell
    to a pole, which is not a cell), chosen so that each permutation is a
    bijection mapping vertex cells to vertex cells.  Vertex values are always
    recomputed from their neighbours, so this choice never affects results.
    ``coarse_perm[q]`` holds the same permutations on the grid of resolution
    ``q`` for ``1 <= q <= r``.
    """

    matrices: np.ndarray
    cell_perm: np.ndarray
    coarse_perm: dict[int, np.ndarray]

    def __len__(self) -> int:
        return len(self.matrices)

    def act(self, g: int, field_, r: int | None = None):
        """Rotate a field whose last axis is cells: ``out[perm[i]] = field[i]``."""
        perm = self.cell_perm if r is None else self.coarse_perm[r]
        inv = np.empty_like(perm[g])
        inv[perm[g]] = np.arange(perm.shape[1])
        return field_[..., inv]

    def index_of(self, mat: np.ndarray, tol: float = 1e-9) -> int:
        diff = np.abs(self.matrices - mat).reshape(len(self.matrices), -1).max(axis=1)
        g = int(np.argmin(diff))
        if diff[g] > tol:
            raise GridError("matrix is not an icosahedral rotation")
        return g


def _cell_perms(grid: IcoGrid, mats: np.ndarray) -> np.ndarray:
    n = grid.n_cells
    nv = grid.nonvertex_indices
    vidx = grid.vertex_indices
    perms = np.empty((len(mats), n), dtype=np.int64)
    for g, R in enumerate(mats):
        perms[g, nv] = grid.match(grid.coords[nv] @ R.T)
        rotated = grid.coords[vidx] @ R.T
        dist, idx = grid._tree.query(rotated)
        hit = dist < MATCH_TOL
        perms[g, vidx[hit]] = idx[hit]
        free_targets = sorted(set(vidx) - set(idx[hit]))
        perms[g, vidx[~hit]] = free_targets
    return perms


@functools.lru_cache(maxsize=None)
def rotation_set(r: int) -> RotationSet:
    """Icosahedral rotations and their cell permutations at resolution ``r`` and below."""
    mats = rotation_matrices()
    coarse = {q: _cell_perms(build_grid(q), mats) for q in range(1, r + 1)}
    return RotationSet(matrices=mats, cell_perm=coarse[r], coarse_perm=coarse)


def quantization_angle(grid: IcoGrid, n_samples: int = 200_000, seed: int = 0) -> float:
    """Largest angle (degrees) from a direction to its nearest cell, by dense sampling."""
    rng = np.random.default_rng(seed)
    u = _normalize(rng.standard_normal((n_samples, 3)))
    best = (u @ grid.coords.T).max(axis=1)
    return float(np.degrees(np.arccos(np.clip(best.min(), -1, 1))))


def write_coords_csv(grid: IcoGrid, path: str | Path) -> None:
    grid.dump_csv(path)
