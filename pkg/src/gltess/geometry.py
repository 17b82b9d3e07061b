"""Periodic 3D Laguerre (power-diagram) tessellations of marked points.

Positions live on the unit torus [0,1)^3; marks are sphere radii.  Cells are
convex polytopes obtained by half-space clipping against radical planes of
all relevant periodic images; generators whose cell is empty are excluded
from the tessellation but remain part of the configuration.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import _kernels as K
from . import _state as S
from .errors import DegenerateInput, GeometryFailure, UnknownId


def power_distance(y, generator) -> float:
    """Squared Euclidean distance to the generator centre minus its squared
    radius (raw form, no periodic wrapping)."""
    y = np.asarray(y, dtype=float)
    d = y - generator.position
    return float(d @ d - generator.radius ** 2)


def torus_displacement(a, b):
    """Representative of b - a (mod 1) with components in [-0.5, 0.5)."""
    d = np.asarray(b, dtype=float) - np.asarray(a, dtype=float)
    return (d + 0.5) % 1.0 - 0.5


def _canonical(x):
    r = np.asarray(x, dtype=float) % 1.0
    r[r >= 1.0] = 0.0
    return r


@dataclass(frozen=True)
class MarkedGenerator:
    """A point in the unit torus with a radius mark."""

    id: int
    position: np.ndarray
    radius: float

    def __post_init__(self):
        p = np.asarray(self.position, dtype=float).reshape(3)
        if np.any(p < 0.0) or np.any(p >= 1.0):
            raise DegenerateInput(
                f"generator {self.id}: position {p} outside [0,1)^3")
        if not self.radius > 0.0:
            raise DegenerateInput(f"generator {self.id}: radius must be > 0")
        p.setflags(write=False)
        object.__setattr__(self, "position", p)
        object.__setattr__(self, "radius", float(self.radius))


class Configuration:
    """An immutable finite set of marked generators with distinct ids and
    pairwise distinct positions."""

    def __init__(self, generators: Iterable[MarkedGenerator]):
        gens = tuple(generators)
        ids = np.array([g.id for g in gens], dtype=np.int64)
        if len(np.unique(ids)) != len(ids):
            raise DegenerateInput("duplicate generator ids")
        pos = np.array([g.position for g in gens], dtype=float).reshape(-1, 3)
        if len(gens) > 1:
            order = np.lexsort(pos.T)
            same = np.all(np.diff(pos[order], axis=0) == 0.0, axis=1)
            if np.any(same):
                raise DegenerateInput("coincident generator positions")
        self._generators = gens
        self._ids = ids
        self._pos = pos
        self._rad = np.array([g.radius for g in gens], dtype=float)
        self._pos.setflags(write=False)
        self._rad.setflags(write=False)
        self._ids.setflags(write=False)

    @classmethod
    def from_arrays(cls, positions, radii, ids=None) -> "Configuration":
        positions = np.atleast_2d(np.asarray(positions, dtype=float))
        radii = np.asarray(radii, dtype=float)
        if ids is None:
            ids = np.arange(len(radii))
        return cls(MarkedGenerator(int(i), _canonical(p), float(r))
                   for i, p, r in zip(ids, positions, radii))

    @property
    def generators(self):
        return self._generators

    @property
    def n(self) -> int:
        return len(self._generators)

    @property
    def ids(self):
        return self._ids

    @property
    def positions(self):
        return self._pos

    @property
    def radii(self):
        return self._rad

    def __len__(self):
        return self.n

    def __iter__(self):
        return iter(self._generators)

    def get(self, gid: int) -> MarkedGenerator:
        idx = np.flatnonzero(self._ids == gid)
        if len(idx) == 0:
            raise UnknownId(f"no generator with id {gid}")
        return self._generators[int(idx[0])]

    def replace(self, remove_ids=(), add=()):
        """New configuration with some generators removed and others added."""
        remove = set(int(i) for i in remove_ids)
        gens = [g for g in self._generators if g.id not in remove]
        gens.extend(add)
        return Configuration(gens)


@dataclass(frozen=True)
class CellGeometry:
    """One nonempty Laguerre cell.

    vertices are in the generator's local frame (unwrapped, relative to the
    generator position); faces pair a vertex-index loop with the neighbouring
    generator id (the cell's own id marks periodic self-adjacency).
    """

    generator_id: int
    vertices: np.ndarray
    faces: tuple
    volume: float
    barycenter: np.ndarray
    nof: int
    h_min: float
    h_max: float


@dataclass(frozen=True)
class ConfigurationChange:
    """insert / delete / move, the proposal vocabulary of the sampler."""

    kind: str
    generator: MarkedGenerator | None = None
    generator_id: int | None = None

    @classmethod
    def insert(cls, generator: MarkedGenerator):
        return cls("insert", generator=generator)

    @classmethod
    def delete(cls, generator_id: int):
        return cls("delete", generator_id=int(generator_id))

    @classmethod
    def move(cls, generator_id: int, replacement: MarkedGenerator):
        return cls("move", generator=replacement, generator_id=int(generator_id))


class Tessellation:
    """Nonempty cells, face adjacency, and excluded (empty-cell) ids."""

    def __init__(self, cells: Mapping[int, CellGeometry], neighbor_pairs,
                 excluded_ids, radii: Mapping[int, float]):
        self.cells = dict(cells)
        self.neighbor_pairs = frozenset(
            (min(a, b), max(a, b)) for a, b in neighbor_pairs)
        self.excluded_ids = frozenset(int(i) for i in excluded_ids)
        self._radii = dict(radii)

    @property
    def n_cells(self) -> int:
        return len(self.cells)

    def radius_of(self, gid: int) -> float:
        return self._radii[gid]

    def volumes(self) -> np.ndarray:
        return np.array([self.cells[i].volume for i in sorted(self.cells)])


# ---------------------------------------------------------------------------
# building
# ---------------------------------------------------------------------------

class _Builder:
    """Throwaway kernel state for one configuration."""

    def __init__(self, config: Configuration, skip_id=None,
                 extra: MarkedGenerator | None = None):
        gens = list(config.generators)
        if skip_id is not None:
            gens = [g for g in gens if g.id != skip_id]
        if extra is not None:
            gens.append(extra)
        self.n = len(gens)
        self.pos = np.array([g.position for g in gens], dtype=float).reshape(-1, 3)
        self.rad = np.array([g.radius for g in gens], dtype=float)
        self.gids = np.array([g.id for g in gens], dtype=np.int64)
        self.m = K.grid_resolution(self.n)
        self.ghead = np.full(K.GRID_MMAX ** 3, -1, np.int32)
        self.gnext = np.full(max(self.n, 1), -1, np.int32)
        K.grid_build(self.pos, self.n, self.m, self.ghead, self.gnext)
        self.ws = S.alloc_workspace()
        self.maxr2 = float(np.max(self.rad) ** 2) if self.n else 0.0
        self.rhat = 1.2 / np.cbrt(max(self.n, 1))

    def clip(self, x, r, own_gid, self_idx):
        (fnv, fvx, fnb, fpl, sides, polyb, chor, cw, cr2, cj, cs, sidx,
         sstack, hkeys, hstamp, hval, hgen, vout) = self.ws
        st, nf, rmax = K.build_cell(
            x[0], x[1], x[2], r, own_gid, self_idx, -1,
            self.pos, self.rad, self.gids, self.n, self.m, self.ghead,
            self.gnext, fnv, fvx, fnb, fpl, sides, polyb, chor,
            cw, cr2, cj, cs, sidx, sstack, self.maxr2, 2.2 * self.rhat)
        if st != K.OK:
            S.raise_kernel_error(st)
        return nf

    def cell_faces(self, nf):
        """Live faces as (polygon array, neighbour gid, plane) tuples."""
        fnv, fvx, fnb, fpl = self.ws[0], self.ws[1], self.ws[2], self.ws[3]
        out = []
        for f in range(nf):
            if fnv[f] >= 3:
                out.append((fvx[f, :fnv[f]].copy(), int(fnb[f]),
                            fpl[f].copy()))
        return out


def _volume_centroid(faces):
    """Volume and centroid of the closed polytope over all live faces."""
    vol6 = 0.0
    c = np.zeros(3)
    for poly, _, _ in faces:
        v0 = poly[0]
        for k in range(1, len(poly) - 1):
            det = float(np.dot(v0, np.cross(poly[k], poly[k + 1])))
            vol6 += det
            c += det * (v0 + poly[k] + poly[k + 1])
    vol = vol6 / 6.0
    if vol <= K.EPS_EMPTY:
        return 0.0, np.zeros(3)
    return vol, c / (4.0 * vol6)


def _reported_faces(faces, own_gid, empty_ids):
    """Reporting rule: self-adjacent faces only when no other face exists;
    faces whose neighbour has an empty cell are dropped (zero-area contact)."""
    real = [f for f in faces if f[1] != own_gid and f[1] not in empty_ids]
    return real if real else [f for f in faces if f[1] == own_gid]


def _weld_faces(report):
    """Weld per-face polygons into a shared vertex list + index loops."""
    verts: list[np.ndarray] = []
    loops = []
    for poly, nb, plane in report:
        loop = []
        for p in poly:
            found = -1
            for i, v in enumerate(verts):
                d = v - p
                if d @ d < 1e-18:
                    found = i
                    break
            if found < 0:
                verts.append(p.copy())
                found = len(verts) - 1
            loop.append(found)
        loops.append((tuple(loop), nb, plane))
    vv = np.array(verts) if verts else np.zeros((0, 3))
    return vv, loops


def _assemble_cell(gid, pos, faces, empty_ids):
    """CellGeometry from clipped faces, or None when the cell is empty."""
    if not faces:
        return None
    vol, cen = _volume_centroid(faces)
    if vol <= 0.0:
        return None
    report = _reported_faces(faces, gid, empty_ids)
    verts, loops = _weld_faces(report)
    hs = [plane[3] - float(cen @ plane[:3]) for _, _, plane in loops]
    return CellGeometry(
        generator_id=gid, vertices=verts,
        faces=tuple((loop, nb) for loop, nb, _ in loops),
        volume=vol, barycenter=_canonical(pos + cen),
        nof=len(loops), h_min=min(hs), h_max=max(hs))


def _cells_from_builder(b: _Builder):
    """Clip every generator, resolve empties, and assemble CellGeometry."""
    raw = {}
    empty = set()
    for i in range(b.n):
        gid = int(b.gids[i])
        nf = b.clip(b.pos[i], b.rad[i], gid, i)
        faces = b.cell_faces(nf)
        raw[gid] = (i, faces)
        if not faces or _volume_centroid(faces)[0] <= 0.0:
            empty.add(gid)
    cells = {}
    pairs = set()
    for gid, (i, faces) in raw.items():
        if gid in empty:
            continue
        cell = _assemble_cell(gid, b.pos[i], faces, empty)
        if cell is None:
            empty.add(gid)
            continue
        cells[gid] = cell
        for loop, nb in cell.faces:
            if nb != gid:
                pairs.add((min(gid, nb), max(gid, nb)))
    return cells, pairs, empty


def build_tessellation(config: Configuration) -> Tessellation:
    """Compute the periodic Laguerre tessellation of a configuration."""
    if config.n == 0:
        raise DegenerateInput("cannot tessellate an empty configuration")
    b = _Builder(config)
    cells, pairs, empty = _cells_from_builder(b)
    tess = Tessellation(cells, pairs, empty,
                        {g.id: g.radius for g in config})
    total = sum(c.volume for c in cells.values())
    if abs(total - 1.0) > 1e-9 * config.n:
        raise GeometryFailure(
            f"cell volumes sum to {total}, expected 1 within 1e-9*n")
    return tess


# ---------------------------------------------------------------------------
# incremental updates
# ---------------------------------------------------------------------------

def _cut_candidates(tess: Tessellation, config: Configuration,
                    point, radius, exclude=frozenset()):
    """Ids of cells the radical plane of (point, radius) can reach: exact
    per-vertex power test with a conservative slack."""
    out = set()
    q = np.asarray(point, dtype=float)
    r2 = float(radius) ** 2
    for gid, cell in tess.cells.items():
        if gid in exclude:
            continue
        g = config.get(gid)
        if cell.vertices.shape[0] == 0:
            out.add(gid)
            continue
        d = torus_displacement(g.position, q)
        w = d[None, :] - cell.vertices
        w = (w + 0.5) % 1.0 - 0.5
        pw = np.einsum("ij,ij->i", w, w) - r2
        own = np.einsum("ij,ij->i", cell.vertices, cell.vertices) - g.radius ** 2
        if np.any(pw <= own + K.EPS_AFF):
            out.add(gid)
    return out


def _resurrection_candidates(tess: Tessellation, config: Configuration,
                             affected):
    """Excluded generators that could claim territory when cells in
    `affected` change (their plane reaches one of those cells)."""
    out = set()
    for ex in tess.excluded_ids:
        gex = config.get(ex)
        for gid in affected:
            cell = tess.cells.get(gid)
            if cell is None:
                continue
            g = config.get(gid)
            d = torus_displacement(g.position, gex.position)
            dist = float(np.sqrt(d @ d))
            rm = float(np.max(np.einsum(
                "ij,ij->i", cell.vertices, cell.vertices))) ** 0.5 \
                if cell.vertices.shape[0] else 0.0
            disc = rm * rm - g.radius ** 2 + gex.radius ** 2
            if disc >= 0.0 and dist <= rm + np.sqrt(disc) + 1e-9:
                out.add(ex)
                break
    return out


def affected_ids(tess: Tessellation, config: Configuration,
                 change: ConfigurationChange) -> set:
    """Superset of ids whose cell geometry differs after the change, plus
    the changed id(s)."""
    if change.kind == "insert":
        g = change.generator
        aff = _cut_candidates(tess, config, g.position, g.radius)
        aff.add(g.id)
        return aff
    if change.kind == "delete":
        gid = change.generator_id
        if gid in tess.cells:
            aff = {int(nb) for _, nb in tess.cells[gid].faces
                   if nb != gid}
        elif gid in tess.excluded_ids:
            aff = set()
        else:
            raise UnknownId(f"no generator with id {gid}")
        aff |= _resurrection_candidates(tess, config, set(aff) | {gid})
        aff.add(gid)
        return aff
    if change.kind == "move":
        gid = change.generator_id
        if gid not in tess.cells and gid not in tess.excluded_ids:
            raise UnknownId(f"no generator with id {gid}")
        g = change.generator
        aff = _cut_candidates(tess, config, g.position, g.radius,
                              exclude={gid})
        if gid in tess.cells:
            aff |= {int(nb) for _, nb in tess.cells[gid].faces if nb != gid}
        aff |= _resurrection_candidates(tess, config, set(aff) | {gid})
        aff.add(gid)
        return aff
    raise ValueError(f"unknown change kind {change.kind!r}")


def apply_change(tess: Tessellation, config: Configuration,
                 change: ConfigurationChange):
    """Apply a change, recomputing only affected cells.

    Returns (tessellation, configuration); generators whose cells became
    empty appear in the new tessellation's excluded_ids (the sampler decides
    whether to drop them from the configuration).
    """
    aff = affected_ids(tess, config, change)
    if change.kind == "insert":
        new_config = config.replace(add=[change.generator])
    elif change.kind == "delete":
        new_config = config.replace(remove_ids=[change.generator_id])
        aff.discard(change.generator_id)
    else:
        g = change.generator
        new_config = config.replace(
            remove_ids=[change.generator_id],
            add=[MarkedGenerator(change.generator_id, g.position, g.radius)])
    b = _Builder(new_config)
    idx_of = {int(g): i for i, g in enumerate(b.gids)}
    # rebuild affected cells (queue grows via the fix-point consistency rule)
    queue = sorted(i for i in aff if i in idx_of)
    rebuilt: dict[int, list] = {}
    seen = set(queue)
    while queue:
        gid = queue.pop()
        i = idx_of[gid]
        nf = b.clip(b.pos[i], b.rad[i], gid, i)
        faces = b.cell_faces(nf)
        rebuilt[gid] = faces
        for _, nb, _ in faces:
            if nb == gid or nb in seen:
                continue
            old = tess.cells.get(nb)
            known = old is not None and any(
                fnb == gid for _, fnb in old.faces)
            if not known:
                seen.add(nb)
                queue.append(nb)
    empty = {gid for gid, faces in rebuilt.items()
             if not faces or _volume_centroid(faces)[0] <= 0.0}
    cells = {}
    pairs = set()
    excluded = set(empty)
    for g in new_config:
        gid = g.id
        if gid in rebuilt:
            if gid in empty:
                continue
            cell = _assemble_cell(gid, b.pos[idx_of[gid]], rebuilt[gid], empty)
            if cell is None:
                excluded.add(gid)
                continue
            cells[gid] = cell
        elif gid in tess.cells:
            cells[gid] = tess.cells[gid]
        else:
            excluded.add(gid)  # still excluded, not resurrected
    for gid, cell in cells.items():
        for loop, nb in cell.faces:
            if nb != gid:
                pairs.add((min(gid, nb), max(gid, nb)))
    return (Tessellation(cells, pairs, excluded,
                         {g.id: g.radius for g in new_config}),
            new_config)


# ---------------------------------------------------------------------------
# export
# ---------------------------------------------------------------------------

def export_geometry(tess: Tessellation, config: Configuration) -> str:
    """Deterministic text export: per cell a header line, `v` vertex lines
    (world frame, unwrapped around the generator) and `f` face lines."""
    lines = []
    for gid in sorted(tess.cells):
        cell = tess.cells[gid]
        g = config.get(gid)
        b = cell.barycenter
        lines.append(
            f"cell {gid} volume {cell.volume:.17g} nof {cell.nof} "
            f"barycenter {b[0]:.17g} {b[1]:.17g} {b[2]:.17g}")
        for v in cell.vertices:
            w = g.position + v
            lines.append(f"v {w[0]:.17g} {w[1]:.17g} {w[2]:.17g}")
        for loop, nb in cell.faces:
            idxs = " ".join(str(i) for i in loop)
            lines.append(f"f {idxs} / {nb}")
    return "\n".join(lines) + "\n"
