"""Triangulated vessel surfaces: loading, caps, markers, and point queries.

A vessel wall arrives as an STL triangulation whose inlet/outlet openings are
left uncapped.  This module welds and orients the triangle soup, extracts the
open boundary loops, fits caps to them, resamples the wall into Lagrangian
markers with an area weight per marker, and answers the two geometric
predicates the mesher needs: is a point inside the vessel, and is a point
within a given distance of the wall.

All coordinates are in meters.  Surfaces are immutable after construction;
the query routines are pure and may be called from worker threads.
"""
from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import SurfaceError

logger = logging.getLogger(__name__)

# Vertices closer than this are considered the same point when welding.
WELD_TOLERANCE = 1e-9
# Triangles at or below this area are dropped as degenerate during load.
DEGENERATE_AREA = 1e-16
# A cap loop must deviate from its fitted plane by no more than this fraction
# of the cap radius.
CAP_PLANARITY_FRACTION = 0.05

_STL_RECORD = np.dtype(
    [("normal", "<f4", (3,)), ("verts", "<f4", (3, 3)), ("attr", "<u2")]
)


@dataclass(frozen=True)
class TriangleSurface:
    """Welded, consistently outward-oriented triangulation with open caps.

    Attributes
    ----------
    vertices : (nv, 3) float64 array
    triangles : (nt, 3) int64 array
        Outward-oriented vertex index triples.
    boundary_loops : tuple of int64 arrays
        Ordered vertex cycles of the open caps, traversed in the direction
        induced by the wall orientation.
    """

    vertices: np.ndarray
    triangles: np.ndarray
    boundary_loops: tuple[np.ndarray, ...]
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def triangle_areas(self) -> np.ndarray:
        if "areas" not in self._cache:
            self._cache["areas"] = _triangle_areas(self.vertices, self.triangles)
        return self._cache["areas"]

    @property
    def triangle_normals(self) -> np.ndarray:
        """Unit outward normals per triangle."""
        if "normals" not in self._cache:
            v = self.vertices[self.triangles]
            n = np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])
            self._cache["normals"] = n / np.linalg.norm(n, axis=1)[:, None]
        return self._cache["normals"]

    @property
    def area(self) -> float:
        return float(self.triangle_areas.sum())

    @property
    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        if "bounds" not in self._cache:
            self._cache["bounds"] = (
                self.vertices.min(axis=0),
                self.vertices.max(axis=0),
            )
        return self._cache["bounds"]

    @property
    def closed_triangles(self) -> np.ndarray:
        """Triangles plus centroid fans over each boundary loop.

        The fans close the caps so that parity ray tests and signed volumes
        see a watertight solid.  Fan vertices are appended after the welded
        vertex block; use :attr:`closed_vertices` with this array.
        """
        self._build_closure()
        return self._cache["closed_triangles"]

    @property
    def closed_vertices(self) -> np.ndarray:
        self._build_closure()
        return self._cache["closed_vertices"]

    def _build_closure(self) -> None:
        if "closed_triangles" in self._cache:
            return
        verts = [self.vertices]
        tris = [self.triangles]
        next_id = len(self.vertices)
        for loop in self.boundary_loops:
            centroid = self.vertices[loop].mean(axis=0)
            verts.append(centroid[None, :])
            nxt = np.roll(loop, -1)
            # Wall traverses each boundary edge a->b; the cap must traverse
            # b->a for the closed surface to stay consistently oriented.
            fan = np.column_stack(
                [np.full(len(loop), next_id, dtype=np.int64), nxt, loop]
            )
            tris.append(fan)
            next_id += 1
        self._cache["closed_vertices"] = np.vstack(verts)
        self._cache["closed_triangles"] = np.vstack(tris)

    def signed_volume(self) -> float:
        """Volume enclosed by the cap-closed surface (positive = outward)."""
        v = self.closed_vertices[self.closed_triangles]
        return float(np.einsum("ij,ij->i", v[:, 0], np.cross(v[:, 1], v[:, 2])).sum() / 6.0)


@dataclass(frozen=True)
class Cap:
    """Planar opening fitted to one boundary loop."""

    loop_index: int
    centroid: np.ndarray  # (3,)
    normal: np.ndarray  # (3,) unit, pointing out of the vessel
    radius: float  # effective radius sqrt(area / pi)
    area: float
    role: str  # "inlet" or "outlet"


@dataclass
class MarkerSet:
    """Lagrangian wall markers with area weights.

    positions : (n, 3) marker locations (triangle centroids)
    areas : (n,) surface patch area per marker, sums to the wall area
    normals : (n, 3) outward unit normals
    velocities : (n, 3) prescribed wall velocity (zero for rigid walls)
    """

    positions: np.ndarray
    areas: np.ndarray
    normals: np.ndarray
    velocities: np.ndarray

    def __len__(self) -> int:
        return len(self.positions)


def _triangle_areas(vertices: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    v = vertices[triangles]
    return 0.5 * np.linalg.norm(
        np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]), axis=1
    )


# ---------------------------------------------------------------------------
# STL parsing
# ---------------------------------------------------------------------------


def _looks_ascii(raw: bytes) -> bool:
    head = raw[:2048]
    if not head.lstrip().startswith(b"solid"):
        return False
    if b"facet" in head or b"endsolid" in raw:
        return True
    # "solid" prefix but binary layout: trust the record structure.
    if len(raw) >= 84:
        (count,) = struct.unpack_from("<I", raw, 80)
        if len(raw) == 84 + 50 * count:
            return False
    return True


def _parse_stl_binary(raw: bytes, path: str) -> np.ndarray:
    if len(raw) < 84:
        raise SurfaceError(
            f"{path}: binary STL truncated at byte offset {len(raw)} "
            "(header and facet count need 84 bytes)"
        )
    (count,) = struct.unpack_from("<I", raw, 80)
    expected = 84 + 50 * count
    if len(raw) < expected:
        complete = (len(raw) - 84) // 50
        raise SurfaceError(
            f"{path}: unparsable facet at byte offset {84 + 50 * complete}: "
            f"file ends after {complete} of {count} facets"
        )
    records = np.frombuffer(raw, dtype=_STL_RECORD, count=count, offset=84)
    tris = records["verts"].astype(np.float64)
    bad = ~np.isfinite(tris).all(axis=(1, 2))
    if bad.any():
        first = int(np.flatnonzero(bad)[0])
        raise SurfaceError(
            f"{path}: unparsable facet at byte offset {84 + 50 * first}: "
            "non-finite vertex coordinate"
        )
    return tris


def _parse_stl_ascii(raw: bytes, path: str) -> np.ndarray:
    coords: list[list[float]] = []
    offset = 0
    for line in raw.splitlines(keepends=True):
        stripped = line.strip().lower()
        if stripped.startswith(b"vertex"):
            parts = stripped.split()
            if len(parts) != 4:
                raise SurfaceError(
                    f"{path}: unparsable facet at byte offset {offset}: "
                    f"{line.strip()[:80]!r}"
                )
            try:
                xyz = [float(p) for p in parts[1:]]
            except ValueError:
                raise SurfaceError(
                    f"{path}: unparsable facet at byte offset {offset}: "
                    f"{line.strip()[:80]!r}"
                ) from None
            if not all(np.isfinite(xyz)):
                raise SurfaceError(
                    f"{path}: unparsable facet at byte offset {offset}: "
                    "non-finite vertex coordinate"
                )
            coords.append(xyz)
        offset += len(line)
    if len(coords) == 0 or len(coords) % 3 != 0:
        raise SurfaceError(
            f"{path}: ASCII STL holds {len(coords)} vertex lines, "
            "expected a positive multiple of 3"
        )
    return np.asarray(coords, dtype=np.float64).reshape(-1, 3, 3)


def _weld(tri_verts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Merge vertices closer than WELD_TOLERANCE; returns (vertices, triangles)."""
    flat = tri_verts.reshape(-1, 3)
    keys = np.round(flat / WELD_TOLERANCE).astype(np.int64)
    uniq, index, inverse = np.unique(
        keys, axis=0, return_index=True, return_inverse=True
    )
    del uniq
    # Keep first-occurrence coordinates so welding never invents positions.
    vertices = flat[np.sort(index)]
    order = np.argsort(index, kind="stable")
    remap = np.empty(len(order), dtype=np.int64)
    remap[order] = np.arange(len(order))
    triangles = remap[inverse].reshape(-1, 3)
    return vertices, triangles


def _drop_degenerate(vertices: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    same = (
        (triangles[:, 0] == triangles[:, 1])
        | (triangles[:, 1] == triangles[:, 2])
        | (triangles[:, 0] == triangles[:, 2])
    )
    areas = _triangle_areas(vertices, triangles)
    keep = ~same & (areas > DEGENERATE_AREA)
    dropped = int((~keep).sum())
    if dropped:
        logger.info("dropped %d degenerate facet(s) during weld", dropped)
    return triangles[keep]


def _edge_table(triangles: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Sorted edge keys per triangle side and their global inverse/counts."""
    e = np.stack(
        [triangles[:, [0, 1]], triangles[:, [1, 2]], triangles[:, [2, 0]]], axis=1
    )  # (nt, 3, 2) directed edges
    lo = e.min(axis=2)
    hi = e.max(axis=2)
    keys = lo.astype(np.int64) * (triangles.max() + 1) + hi
    uniq, inverse, counts = np.unique(keys, return_inverse=True, return_counts=True)
    del uniq
    return e, inverse.reshape(-1, 3), counts


def _orient_consistently(
    vertices: np.ndarray, triangles: np.ndarray, path: str
) -> np.ndarray:
    """Flip triangles until every shared edge is traversed in both directions."""
    nt = len(triangles)
    e, inv, counts = _edge_table(triangles)
    if (counts > 2).any():
        eid = int(np.flatnonzero(counts > 2)[0])
        rows = np.argwhere(inv == eid)
        t, s = rows[0]
        a, b = sorted(e[t, s])
        raise SurfaceError(
            f"{path}: non-manifold edge between vertices {a} and {b} "
            f"shared by {int(counts[eid])} facets"
        )
    # Adjacency through shared (2-count) edges.
    flat_inv = inv.ravel()
    order = np.argsort(flat_inv, kind="stable")
    sorted_eids = flat_inv[order]
    boundaries = np.flatnonzero(np.diff(sorted_eids)) + 1
    groups = np.split(order, boundaries)

    flip = np.zeros(nt, dtype=bool)
    seen = np.zeros(nt, dtype=bool)
    adj: list[list[tuple[int, int]]] = [[] for _ in range(nt)]
    for g in groups:
        if len(g) == 2:
            t0, s0 = divmod(int(g[0]), 3)
            t1, s1 = divmod(int(g[1]), 3)
            adj[t0].append((t1, s1 * 3 + s0))
            adj[t1].append((t0, s0 * 3 + s1))
    for seed in range(nt):
        if seen[seed]:
            continue
        seen[seed] = True
        stack = [seed]
        while stack:
            t = stack.pop()
            et = e[t]
            if flip[t]:
                et = et[:, ::-1]
            for nb, packed in adj[t]:
                s_nb, s_t = divmod(packed, 3)
                enb = e[nb, s_nb]
                if flip[nb] if seen[nb] else False:
                    enb = enb[::-1]
                mine = et[s_t]
                consistent = mine[0] == enb[1] and mine[1] == enb[0]
                if not seen[nb]:
                    seen[nb] = True
                    if not consistent:
                        flip[nb] = True
                    stack.append(nb)
                elif not consistent:
                    raise SurfaceError(
                        f"{path}: surface is not orientable near facet {nb}"
                    )
    out = triangles.copy()
    out[flip] = out[flip][:, ::-1]
    return out


def _boundary_loops(
    triangles: np.ndarray, path: str
) -> tuple[tuple[np.ndarray, ...], None]:
    e, inv, counts = _edge_table(triangles)
    boundary = counts[inv] == 1  # (nt, 3) sides on the open boundary
    edges = e[boundary]  # directed a->b in wall traversal order
    if len(edges) == 0:
        return (), None
    succ: dict[int, int] = {}
    for a, b in edges:
        a, b = int(a), int(b)
        if a in succ:
            raise SurfaceError(
                f"{path}: boundary is not a set of simple loops "
                f"(vertex {a} has two outgoing boundary edges)"
            )
        succ[a] = b
    loops = []
    remaining = dict(succ)
    while remaining:
        start = min(remaining)
        loop = [start]
        cur = remaining.pop(start)
        while cur != start:
            loop.append(cur)
            if cur not in remaining:
                raise SurfaceError(
                    f"{path}: open boundary loop through vertex {start} "
                    "does not close"
                )
            cur = remaining.pop(cur)
        loops.append(np.asarray(loop, dtype=np.int64))
    # Deterministic ordering: by smallest vertex id in the loop.
    loops.sort(key=lambda lp: int(lp.min()))
    return tuple(loops), None


def _finalize_surface(tri_verts: np.ndarray, path: str) -> TriangleSurface:
    vertices, triangles = _weld(tri_verts)
    triangles = _drop_degenerate(vertices, triangles)
    if len(triangles) == 0:
        raise SurfaceError(f"{path}: no non-degenerate facets after welding")
    used = np.unique(triangles)
    if len(used) < len(vertices):
        remap = -np.ones(len(vertices), dtype=np.int64)
        remap[used] = np.arange(len(used))
        vertices = vertices[used]
        triangles = remap[triangles]
    triangles = _orient_consistently(vertices, triangles, path)
    loops, _ = _boundary_loops(triangles, path)
    surf = TriangleSurface(vertices, triangles, loops)
    if surf.signed_volume() < 0.0:
        triangles = triangles[:, ::-1]
        loops, _ = _boundary_loops(triangles, path)
        surf = TriangleSurface(vertices, triangles, loops)
    vertices.setflags(write=False)
    triangles.setflags(write=False)
    return surf


def load_surface(path: str | Path, fmt: str | None = None) -> TriangleSurface:
    """Load an STL file into a welded, outward-oriented TriangleSurface.

    Parameters
    ----------
    path : STL file, binary or ASCII.
    fmt : "binary", "ascii", or None to auto-detect.

    Raises
    ------
    SurfaceError
        On unparsable facets (with byte offset), non-manifold edges (naming
        the edge), or a non-orientable triangulation.
    """
    path = Path(path)
    if not path.is_file():
        raise SurfaceError(f"surface file not found: {path}")
    raw = path.read_bytes()
    name = str(path)
    if fmt is None:
        fmt = "ascii" if _looks_ascii(raw) else "binary"
    if fmt == "ascii":
        tri_verts = _parse_stl_ascii(raw, name)
    elif fmt == "binary":
        tri_verts = _parse_stl_binary(raw, name)
    else:
        raise SurfaceError(f"unknown STL format {fmt!r}; use 'binary' or 'ascii'")
    return _finalize_surface(tri_verts, name)


def surface_from_triangles(tri_verts: np.ndarray, name: str = "<memory>") -> TriangleSurface:
    """Build a surface from an (n, 3, 3) triangle-vertex array (welds, orients)."""
    tri_verts = np.ascontiguousarray(tri_verts, dtype=np.float64)
    if tri_verts.ndim != 3 or tri_verts.shape[1:] != (3, 3):
        raise SurfaceError("triangle array must have shape (n, 3, 3)")
    return _finalize_surface(tri_verts, name)


def write_stl(surface: TriangleSurface, path: str | Path, binary: bool = True) -> None:
    """Write the surface to STL (caps stay open)."""
    path = Path(path)
    v = surface.vertices[surface.triangles]
    n = surface.triangle_normals
    if binary:
        records = np.zeros(len(v), dtype=_STL_RECORD)
        records["normal"] = n.astype("<f4")
        records["verts"] = v.astype("<f4")
        with open(path, "wb") as fh:
            fh.write(b"ibflow surface".ljust(80, b"\0"))
            fh.write(struct.pack("<I", len(v)))
            fh.write(records.tobytes())
    else:
        with open(path, "w") as fh:
            fh.write("solid surface\n")
            for ni, tri in zip(n, v):
                fh.write(f"  facet normal {ni[0]:.9e} {ni[1]:.9e} {ni[2]:.9e}\n")
                fh.write("    outer loop\n")
                for p in tri:
                    fh.write(f"      vertex {p[0]:.9e} {p[1]:.9e} {p[2]:.9e}\n")
                fh.write("    endloop\n  endfacet\n")
            fh.write("endsolid surface\n")


# ---------------------------------------------------------------------------
# Caps
# ---------------------------------------------------------------------------


def _loop_plane(points: np.ndarray) -> tuple[np.ndarray, np.ndarray, float]:
    """Least-squares plane through the loop: (centroid, unit normal, max deviation)."""
    centroid = points.mean(axis=0)
    centered = points - centroid
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    normal = vt[-1]
    deviation = float(np.abs(centered @ normal).max())
    return centroid, normal, deviation


def _loop_area(points: np.ndarray, centroid: np.ndarray, normal: np.ndarray) -> float:
    """Planar polygon area via the vector-area formula (sign dropped)."""
    centered = points - centroid
    nxt = np.roll(centered, -1, axis=0)
    vec = 0.5 * np.cross(centered, nxt).sum(axis=0)
    return float(abs(vec @ normal))


def detect_caps(
    surface: TriangleSurface,
    inlet_diameter: float | None = None,
    role_overrides: dict[int, str] | None = None,
) -> list[Cap]:
    """Fit planar caps to the boundary loops and assign inlet/outlet roles.

    The inlet is the cap whose effective diameter best matches
    ``inlet_diameter`` when given, otherwise the largest cap; the remaining
    caps are outlets.  ``role_overrides`` maps loop index to role and wins
    over both rules.

    Raises
    ------
    SurfaceError
        If the surface has fewer than two open loops, or a loop deviates
        from its fitted plane by more than 5% of the cap radius.
    """
    if len(surface.boundary_loops) < 2:
        raise SurfaceError(
            "surface has no open inlet/outlet pair "
            f"({len(surface.boundary_loops)} boundary loop(s) found); "
            "vessel caps must be left open"
        )
    caps = []
    for i, loop in enumerate(surface.boundary_loops):
        pts = surface.vertices[loop]
        centroid, normal, deviation = _loop_plane(pts)
        area = _loop_area(pts, centroid, normal)
        radius = float(np.sqrt(area / np.pi))
        if deviation > CAP_PLANARITY_FRACTION * radius:
            raise SurfaceError(
                f"boundary loop {i} is non-planar: deviation "
                f"{deviation:.3e} m exceeds {CAP_PLANARITY_FRACTION:.0%} of the "
                f"cap radius {radius:.3e} m"
            )
        # Point the cap normal out of the vessel: away from the wall triangles
        # touching this loop.
        touching = np.isin(surface.triangles, loop).any(axis=1)
        local = surface.vertices[surface.triangles[touching]].mean(axis=(0, 1))
        if (local - centroid) @ normal > 0:
            normal = -normal
        caps.append(
            Cap(
                loop_index=i,
                centroid=centroid,
                normal=normal,
                radius=radius,
                area=area,
                role="outlet",
            )
        )
    if role_overrides:
        for idx, role in role_overrides.items():
            if role not in ("inlet", "outlet"):
                raise SurfaceError(f"unknown cap role {role!r} for loop {idx}")
            if not (0 <= idx < len(caps)):
                raise SurfaceError(f"cap override names missing loop {idx}")
        inlet_ids = [i for i, r in role_overrides.items() if r == "inlet"]
        if len(inlet_ids) != 1:
            raise SurfaceError("cap overrides must name exactly one inlet")
        inlet_idx = inlet_ids[0]
    elif inlet_diameter is not None:
        mismatch = [abs(2.0 * c.radius - inlet_diameter) for c in caps]
        inlet_idx = int(np.argmin(mismatch))
    else:
        inlet_idx = int(np.argmax([c.radius for c in caps]))
    out = []
    for i, cap in enumerate(caps):
        role = "inlet" if i == inlet_idx else "outlet"
        if role_overrides and i in role_overrides:
            role = role_overrides[i]
        out.append(
            Cap(cap.loop_index, cap.centroid, cap.normal, cap.radius, cap.area, role)
        )
    return out


# ---------------------------------------------------------------------------
# Marker resampling
# ---------------------------------------------------------------------------


def resample_markers(
    surface: TriangleSurface,
    h: float,
    max_markers: int = 5_000_000,
) -> MarkerSet:
    """Subdivide wall triangles until each patch area is at most h**2.

    Longest-edge midpoint subdivision; one marker per final patch at the
    centroid with the patch area as its weight.  Rigid wall: marker velocity
    is zero.

    Raises
    ------
    SurfaceError
        If ``h <= 0``, ``h`` is not below the smallest cap radius, or the
        marker count would exceed ``max_markers``.
    """
    if h <= 0.0:
        raise SurfaceError(f"marker spacing h must be positive, got {h!r}")
    if surface.boundary_loops:
        radii = []
        for loop in surface.boundary_loops:
            pts = surface.vertices[loop]
            centroid, normal, _ = _loop_plane(pts)
            radii.append(np.sqrt(_loop_area(pts, centroid, normal) / np.pi))
        r_min = min(radii)
        if h >= r_min:
            raise SurfaceError(
                f"marker spacing h={h:.3e} m must be smaller than the "
                f"smallest cap radius {r_min:.3e} m"
            )
    target = h * h
    tris = surface.vertices[surface.triangles].copy()
    while True:
        areas = 0.5 * np.linalg.norm(
            np.cross(tris[:, 1] - tris[:, 0], tris[:, 2] - tris[:, 0]), axis=1
        )
        big = areas > target
        if not big.any():
            break
        if len(tris) + int(big.sum()) > max_markers:
            raise SurfaceError(
                f"marker resampling would exceed {max_markers} markers; "
                "increase h or raise the cap"
            )
        keep = tris[~big]
        split = tris[big]
        edges = np.stack(
            [
                split[:, 1] - split[:, 0],
                split[:, 2] - split[:, 1],
                split[:, 0] - split[:, 2],
            ],
            axis=1,
        )
        longest = np.argmax(np.linalg.norm(edges, axis=2), axis=1)
        n = len(split)
        idx = np.arange(n)
        a = split[idx, longest]
        b = split[idx, (longest + 1) % 3]
        c = split[idx, (longest + 2) % 3]
        m = 0.5 * (a + b)
        child1 = np.stack([a, m, c], axis=1)
        child2 = np.stack([m, b, c], axis=1)
        tris = np.concatenate([keep, child1, child2], axis=0)
    areas = 0.5 * np.linalg.norm(
        np.cross(tris[:, 1] - tris[:, 0], tris[:, 2] - tris[:, 0]), axis=1
    )
    normals = np.cross(tris[:, 1] - tris[:, 0], tris[:, 2] - tris[:, 0])
    normals /= np.linalg.norm(normals, axis=1)[:, None]
    positions = tris.mean(axis=1)
    return MarkerSet(
        positions=positions,
        areas=areas,
        normals=normals,
        velocities=np.zeros_like(positions),
    )


# ---------------------------------------------------------------------------
# Point membership (parity ray casting)
# ---------------------------------------------------------------------------


def _expand_runs(
    starts: np.ndarray, counts: np.ndarray, table: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Gather table[starts[i] : starts[i]+counts[i]] for all i, vectorized.

    Returns (owner index per gathered element, gathered elements).
    """
    total = int(counts.sum())
    if total == 0:
        return np.empty(0, dtype=np.int64), np.empty(0, dtype=table.dtype)
    owners = np.repeat(np.arange(len(counts)), counts)
    prefix = np.concatenate([[0], np.cumsum(counts)[:-1]])
    within = np.arange(total) - np.repeat(prefix, counts)
    return owners, table[np.repeat(starts, counts) + within]


def _ray_frame(direction: np.ndarray) -> np.ndarray:
    """Orthonormal frame whose last row is the ray direction."""
    d = direction / np.linalg.norm(direction)
    aux = np.array([1.0, 0.0, 0.0])
    if abs(d[0]) > 0.9:
        aux = np.array([0.0, 1.0, 0.0])
    e1 = np.cross(d, aux)
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(d, e1)
    return np.vstack([e1, e2, d])


def _cast_parity(
    points: np.ndarray,
    tri_verts: np.ndarray,
    direction: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """Hit parity of +direction rays from each point; flags unreliable casts.

    Returns (parity bool array, suspect bool array).  A cast is suspect when
    any intersection lands within tolerance of a triangle edge, vertex, or
    the ray origin, or the ray is near-parallel to a hit-candidate triangle.
    """
    frame = _ray_frame(direction)
    p2 = points @ frame.T  # columns: u, v, w (w along ray)
    t2 = tri_verts @ frame.T  # (nt, 3, 3)

    scale = max(float(np.abs(tri_verts).max()), 1e-300)
    eps_bary = 1e-10
    eps_det = 1e-14 * scale * scale

    lo = t2[..., :2].min(axis=1)
    hi = t2[..., :2].max(axis=1)
    glo = lo.min(axis=0)
    ghi = hi.max(axis=0)
    span = np.maximum(ghi - glo, 1e-300)
    ncell = int(np.clip(np.sqrt(len(tri_verts) / 2.0), 4, 256))
    cell = span / ncell

    def to_cell(xy):
        return np.clip(((xy - glo) / cell).astype(np.int64), 0, ncell - 1)

    clo = to_cell(lo)
    chi = to_cell(hi)
    spans = (chi[:, 0] - clo[:, 0] + 1) * (chi[:, 1] - clo[:, 1] + 1)
    tri_ids = np.repeat(np.arange(len(tri_verts)), spans)
    # Enumerate covered cells per triangle.
    cells = np.empty(int(spans.sum()), dtype=np.int64)
    pos = 0
    for t in range(len(tri_verts)):
        iu = np.arange(clo[t, 0], chi[t, 0] + 1)
        iv = np.arange(clo[t, 1], chi[t, 1] + 1)
        block = (iu[:, None] * ncell + iv[None, :]).ravel()
        cells[pos : pos + block.size] = block
        pos += block.size
    order = np.argsort(cells, kind="stable")
    cells_sorted = cells[order]
    tris_sorted = tri_ids[order]
    starts = np.searchsorted(cells_sorted, np.arange(ncell * ncell))
    ends = np.searchsorted(cells_sorted, np.arange(ncell * ncell), side="right")

    pc = to_cell(p2[:, :2])
    pcell = pc[:, 0] * ncell + pc[:, 1]
    point_ids, gather = _expand_runs(
        starts[pcell], ends[pcell] - starts[pcell], tris_sorted
    )

    parity = np.zeros(len(points), dtype=np.int64)
    suspect = np.zeros(len(points), dtype=bool)
    if len(gather):
        P = p2[point_ids]
        A = t2[gather, 0]
        B = t2[gather, 1]
        C = t2[gather, 2]
        # 2D barycentric test in the (u, v) plane; ray is the +w axis.
        v0 = B[:, :2] - A[:, :2]
        v1 = C[:, :2] - A[:, :2]
        v2 = P[:, :2] - A[:, :2]
        det = v0[:, 0] * v1[:, 1] - v0[:, 1] * v1[:, 0]
        near_parallel = np.abs(det) < eps_det
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = np.where(near_parallel, 0.0, 1.0 / det)
        s = (v2[:, 0] * v1[:, 1] - v2[:, 1] * v1[:, 0]) * inv
        t = (v0[:, 0] * v2[:, 1] - v0[:, 1] * v2[:, 0]) * inv
        u = 1.0 - s - t
        inside2d = (s > eps_bary) & (t > eps_bary) & (u > eps_bary)
        border = (
            (np.abs(s) <= eps_bary)
            | (np.abs(t) <= eps_bary)
            | (np.abs(u) <= eps_bary)
        ) & (s > -eps_bary) & (t > -eps_bary) & (u > -eps_bary)
        w_hit = u * A[:, 2] + s * B[:, 2] + t * C[:, 2]
        dw = w_hit - P[:, 2]
        eps_w = 1e-12 * scale
        hits = inside2d & (dw > eps_w)
        grazing = (inside2d & (np.abs(dw) <= eps_w)) | (border & (dw > -eps_w)) | (
            near_parallel
            & (s > -0.5)  # only flag plausibly overlapping casts
            & (t > -0.5)
        )
        parity = np.bincount(
            point_ids, weights=hits.astype(np.float64), minlength=len(points)
        ).astype(np.int64)
        suspect = (
            np.bincount(
                point_ids, weights=grazing.astype(np.float64), minlength=len(points)
            )
            > 0
        )
    return (parity % 2).astype(bool), suspect


def point_inside(
    surface: TriangleSurface,
    points: np.ndarray,
    seed: int = 0,
    rays: int = 3,
) -> np.ndarray | bool:
    """Parity ray test against the cap-closed surface, majority over >=3 rays.

    Deterministic for a given seed: ray directions come from a seeded
    generator, and casts that graze an edge, vertex, or triangle plane are
    re-voted with two extra rays.

    Accepts one point of shape (3,) or a batch (n, 3); returns bool or a
    bool array accordingly.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    single = np.asarray(points).ndim == 1
    if rays < 3:
        raise SurfaceError(f"parity test needs at least 3 rays, got {rays}")
    tri_verts = surface.closed_vertices[surface.closed_triangles]
    rng = np.random.default_rng(seed)

    votes = np.zeros(len(pts), dtype=np.int64)
    valid = np.zeros(len(pts), dtype=np.int64)
    active = np.arange(len(pts))
    casts = 0
    max_casts = rays + 8
    while len(active) and casts < max_casts:
        direction = rng.standard_normal(3)
        while np.linalg.norm(direction) < 1e-3:
            direction = rng.standard_normal(3)
        parity, suspect = _cast_parity(pts[active], tri_verts, direction)
        ok = ~suspect
        votes[active[ok]] += parity[ok].astype(np.int64)
        valid[active[ok]] += 1
        casts += 1
        # Suspect casts do not count; exact vote ties get extra rays.
        need_more = (valid < rays) | (2 * votes == valid)
        active = np.flatnonzero(need_more)
    inside = 2 * votes > valid
    return bool(inside[0]) if single else inside


# ---------------------------------------------------------------------------
# Distance band
# ---------------------------------------------------------------------------


def _point_triangle_distance(
    p: np.ndarray, a: np.ndarray, b: np.ndarray, c: np.ndarray
) -> np.ndarray:
    """Exact unsigned distance from points to triangles, vectorized pairwise."""
    ab = b - a
    ac = c - a
    ap = p - a
    d1 = np.einsum("ij,ij->i", ab, ap)
    d2 = np.einsum("ij,ij->i", ac, ap)
    bp = p - b
    d3 = np.einsum("ij,ij->i", ab, bp)
    d4 = np.einsum("ij,ij->i", ac, bp)
    cp = p - c
    d5 = np.einsum("ij,ij->i", ab, cp)
    d6 = np.einsum("ij,ij->i", ac, cp)

    closest = np.empty_like(p)

    cond_a = (d1 <= 0) & (d2 <= 0)
    cond_b = (d3 >= 0) & (d4 <= d3)
    cond_c = (d6 >= 0) & (d5 <= d6)

    vc = d1 * d4 - d3 * d2
    vb = d5 * d2 - d1 * d6
    va = d3 * d6 - d5 * d4

    with np.errstate(divide="ignore", invalid="ignore"):
        v_ab = np.where(d1 - d3 != 0.0, d1 / (d1 - d3), 0.0)
        w_ac = np.where(d2 - d6 != 0.0, d2 / (d2 - d6), 0.0)
        den_bc = (d4 - d3) + (d5 - d6)
        w_bc = np.where(den_bc != 0.0, (d4 - d3) / den_bc, 0.0)
        denom = va + vb + vc
        v_in = np.where(denom != 0.0, vb / denom, 0.0)
        w_in = np.where(denom != 0.0, vc / denom, 0.0)

    cond_ab = (~cond_a) & (~cond_b) & (vc <= 0) & (d1 >= 0) & (d3 <= 0)
    cond_ac = (~cond_a) & (~cond_b) & (~cond_c) & (~cond_ab) & (vb <= 0) & (d2 >= 0) & (d6 <= 0)
    cond_bc = (
        (~cond_a)
        & (~cond_b)
        & (~cond_c)
        & (~cond_ab)
        & (~cond_ac)
        & (va <= 0)
        & ((d4 - d3) >= 0)
        & ((d5 - d6) >= 0)
    )
    interior = ~(cond_a | cond_b | cond_c | cond_ab | cond_ac | cond_bc)

    closest[cond_a] = a[cond_a]
    closest[cond_b] = b[cond_b]
    closest[cond_c] = c[cond_c]
    closest[cond_ab] = a[cond_ab] + v_ab[cond_ab, None] * ab[cond_ab]
    closest[cond_ac] = a[cond_ac] + w_ac[cond_ac, None] * ac[cond_ac]
    closest[cond_bc] = b[cond_bc] + w_bc[cond_bc, None] * (c[cond_bc] - b[cond_bc])
    closest[interior] = (
        a[interior]
        + v_in[interior, None] * ab[interior]
        + w_in[interior, None] * ac[interior]
    )
    return np.linalg.norm(p - closest, axis=1)


def distance_band(
    surface: TriangleSurface,
    points: np.ndarray,
    w: float,
) -> np.ndarray | bool:
    """True where the unsigned distance to the wall is at most w.

    Wall triangles only (cap fans are not part of the wall).  With w = 0 a
    point counts as on-surface within 1e-12 m.  Uses a uniform grid over
    triangle bounding boxes so each point only tests nearby triangles.
    """
    if w < 0.0 or not np.isfinite(w) and w != np.inf:
        raise SurfaceError(f"band width must be non-negative, got {w!r}")
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    single = np.asarray(points).ndim == 1
    if not np.isfinite(w):
        out = np.ones(len(pts), dtype=bool)
        return bool(out[0]) if single else out
    threshold = max(w, 1e-12)

    tri_verts = surface.vertices[surface.triangles]
    lo = tri_verts.min(axis=1)
    hi = tri_verts.max(axis=1)
    glo = lo.min(axis=0) - threshold
    ghi = hi.max(axis=0) + threshold
    sizes = hi - lo
    cell = max(float(np.median(sizes.max(axis=1))), threshold / 4.0, 1e-12)
    ncell = np.maximum(((ghi - glo) / cell).astype(np.int64) + 1, 1)
    ncell = np.minimum(ncell, 128)
    cellsz = (ghi - glo) / ncell

    def to_cell(x, pad=0.0):
        return np.clip(
            ((x - glo - pad) / cellsz).astype(np.int64), 0, ncell - 1
        )

    # Triangles padded by the band so a cell lookup is sufficient.
    clo = np.clip(((lo - threshold - glo) / cellsz).astype(np.int64), 0, ncell - 1)
    chi = np.clip(((hi + threshold - glo) / cellsz).astype(np.int64), 0, ncell - 1)
    spans = np.prod(chi - clo + 1, axis=1)
    keys = []
    trids = []
    for t in range(len(tri_verts)):
        ix = np.arange(clo[t, 0], chi[t, 0] + 1)
        iy = np.arange(clo[t, 1], chi[t, 1] + 1)
        iz = np.arange(clo[t, 2], chi[t, 2] + 1)
        kk = (
            (ix[:, None, None] * ncell[1] + iy[None, :, None]) * ncell[2]
            + iz[None, None, :]
        ).ravel()
        keys.append(kk)
        trids.append(np.full(kk.size, t, dtype=np.int64))
    keys = np.concatenate(keys) if keys else np.empty(0, dtype=np.int64)
    trids = np.concatenate(trids) if trids else np.empty(0, dtype=np.int64)
    order = np.argsort(keys, kind="stable")
    keys_sorted = keys[order]
    trids_sorted = trids[order]

    pk = to_cell(pts)
    pkeys = (pk[:, 0] * ncell[1] + pk[:, 1]) * ncell[2] + pk[:, 2]
    s = np.searchsorted(keys_sorted, pkeys)
    e = np.searchsorted(keys_sorted, pkeys, side="right")
    out = np.zeros(len(pts), dtype=bool)
    pid, cand = _expand_runs(s, e - s, trids_sorted)
    if len(cand):
        d = _point_triangle_distance(
            pts[pid],
            tri_verts[cand, 0],
            tri_verts[cand, 1],
            tri_verts[cand, 2],
        )
        near = (d <= threshold).astype(np.float64)
        out = np.bincount(pid, weights=near, minlength=len(pts)) > 0
    return bool(out[0]) if single else out
