"""Background box mesh: uniform tet lattice plus local bisection refinement.

The fluid domain is an axis-aligned box meshed by splitting every cubic cell
of edge h0 into six positively oriented tetrahedra that share the cell's main
diagonal.  Local refinement marks tets near or inside the vessel surface and
bisects them by their longest edge; a conformity closure then bisects
neighbours until no hanging nodes remain.  One refinement *level* halves the
local spacing, which for this tet family takes three bisection generations.

Meshes are immutable; refinement returns a new mesh whose node array extends
the old one (node ids are stable across levels).
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import MeshError
from .geometry import Cap, TriangleSurface, distance_band, point_inside

logger = logging.getLogger(__name__)

MAX_TETS = 10_000_000
MAX_CLOSURE_SWEEPS = 100

# Node roles assigned by tag_boundary_nodes.
INTERIOR = 0
OUTER_WALL = 1
INLET = 2
OUTLET = 3

_EDGE_PAIRS = np.array(
    [(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)], dtype=np.int64
)
_FACE_TRIPLES = np.array(
    [(1, 2, 3), (0, 2, 3), (0, 1, 3), (0, 1, 2)], dtype=np.int64
)

# The six permutations of (x, y, z); each walks the cube from its low corner
# to the high corner and yields one tet of the Kuhn decomposition.
_PERMS = [
    (0, 1, 2), (0, 2, 1), (1, 0, 2), (1, 2, 0), (2, 0, 1), (2, 1, 0),
]


def _perm_parity(p) -> int:
    inversions = sum(
        1 for i in range(3) for j in range(i + 1, 3) if p[i] > p[j]
    )
    return -1 if inversions % 2 else 1


@dataclass(frozen=True)
class TetMesh:
    """Tetrahedral mesh of an axis-aligned box.

    nodes : (N, 3) float64 coordinates in meters
    tets : (T, 4) int64, positively oriented
    box_lo, box_hi : box corners
    h0 : base lattice spacing
    tet_gen : (T,) int32 bisection count per tet (refinement level = gen // 3)
    """

    nodes: np.ndarray
    tets: np.ndarray
    box_lo: np.ndarray
    box_hi: np.ndarray
    h0: float
    tet_gen: np.ndarray
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def n_tets(self) -> int:
        return len(self.tets)

    @property
    def volumes(self) -> np.ndarray:
        if "volumes" not in self._cache:
            self._cache["volumes"] = tet_volumes(self.nodes, self.tets)
        return self._cache["volumes"]

    @property
    def centroids(self) -> np.ndarray:
        if "centroids" not in self._cache:
            self._cache["centroids"] = self.nodes[self.tets].mean(axis=1)
        return self._cache["centroids"]

    def edge_lengths(self) -> np.ndarray:
        """(T, 6) edge lengths in _EDGE_PAIRS order."""
        v = self.nodes[self.tets]
        d = v[:, _EDGE_PAIRS[:, 0]] - v[:, _EDGE_PAIRS[:, 1]]
        return np.linalg.norm(d, axis=2)

    @property
    def min_edge(self) -> float:
        if "min_edge" not in self._cache:
            self._cache["min_edge"] = float(self.edge_lengths().min())
        return self._cache["min_edge"]

    @property
    def refinement_levels(self) -> np.ndarray:
        return self.tet_gen // 3


def tet_volumes(nodes: np.ndarray, tets: np.ndarray) -> np.ndarray:
    v = nodes[tets]
    a = v[:, 1] - v[:, 0]
    b = v[:, 2] - v[:, 0]
    c = v[:, 3] - v[:, 0]
    return np.einsum("ij,ij->i", a, np.cross(b, c)) / 6.0


def build_box_mesh(
    box_lo, box_hi, h0: float, max_tets: int = MAX_TETS
) -> TetMesh:
    """Uniform six-tets-per-cube mesh of the box.

    Box edge lengths must be integer multiples of h0 (within 1e-6 relative);
    node count is prod(n_i + 1) and tet count 6 * prod(n_i).
    """
    if h0 <= 0.0:
        raise MeshError(f"lattice spacing h0 must be positive, got {h0!r}")
    lo = np.asarray(box_lo, dtype=np.float64)
    hi = np.asarray(box_hi, dtype=np.float64)
    if (hi <= lo).any():
        raise MeshError(f"degenerate box: lo={lo.tolist()} hi={hi.tolist()}")
    ncells = np.empty(3, dtype=np.int64)
    for ax in range(3):
        n_exact = (hi[ax] - lo[ax]) / h0
        n = int(round(n_exact))
        if n < 1 or abs(n_exact - n) > 1e-6 * max(n, 1):
            raise MeshError(
                f"box edge along axis {ax} ({hi[ax] - lo[ax]:.6e} m) is not an "
                f"integer multiple of h0={h0:.6e} m"
            )
        ncells[ax] = n
    n_tets = 6 * int(np.prod(ncells))
    if n_tets > max_tets:
        raise MeshError(
            f"requested mesh needs {n_tets} tets, above the cap {max_tets}; "
            "coarsen h0 or raise the cap"
        )
    nx, ny, nz = (int(n) for n in ncells)
    xs = lo[0] + np.arange(nx + 1) * h0
    ys = lo[1] + np.arange(ny + 1) * h0
    zs = lo[2] + np.arange(nz + 1) * h0
    X, Y, Z = np.meshgrid(xs, ys, zs, indexing="ij")
    nodes = np.column_stack([X.ravel(), Y.ravel(), Z.ravel()])

    def nid(i, j, k):
        return (i * (ny + 1) + j) * (nz + 1) + k

    I, J, K = np.meshgrid(
        np.arange(nx), np.arange(ny), np.arange(nz), indexing="ij"
    )
    I, J, K = I.ravel(), J.ravel(), K.ravel()
    corner = {}
    for dx in (0, 1):
        for dy in (0, 1):
            for dz in (0, 1):
                corner[(dx, dy, dz)] = nid(I + dx, J + dy, K + dz)
    v000 = corner[(0, 0, 0)]
    v111 = corner[(1, 1, 1)]
    tet_blocks = []
    for perm in _PERMS:
        step1 = [0, 0, 0]
        step1[perm[0]] = 1
        step2 = list(step1)
        step2[perm[1]] = 1
        a = corner[tuple(step1)]
        b = corner[tuple(step2)]
        if _perm_parity(perm) > 0:
            tet_blocks.append(np.stack([v000, a, b, v111], axis=1))
        else:
            tet_blocks.append(np.stack([v000, b, a, v111], axis=1))
    tets = np.concatenate(tet_blocks).astype(np.int64)
    # Interleave so the six tets of a cell are contiguous, matching the
    # cell-major ordering users expect from the cap formula 6 * prod(n).
    tets = (
        tets.reshape(6, -1, 4).transpose(1, 0, 2).reshape(-1, 4)
    )
    mesh = TetMesh(
        nodes=nodes,
        tets=tets,
        box_lo=lo,
        box_hi=hi,
        h0=float(h0),
        tet_gen=np.zeros(len(tets), dtype=np.int32),
    )
    if (mesh.volumes <= 0.0).any():
        raise MeshError("internal error: negative Kuhn tet produced")
    return mesh


def _encode_edges(tets: np.ndarray) -> np.ndarray:
    """(T, 6) sorted-pair edge keys, a << 32 | b with a < b."""
    pa = tets[:, _EDGE_PAIRS[:, 0]]
    pb = tets[:, _EDGE_PAIRS[:, 1]]
    lo = np.minimum(pa, pb).astype(np.int64)
    hi = np.maximum(pa, pb).astype(np.int64)
    return (lo << 32) | hi


def _bisect_generation(
    mesh: TetMesh, marked: np.ndarray
) -> tuple[TetMesh, np.ndarray]:
    """One bisection generation plus conformity closure.

    Every marked tet is bisected by its longest edge (ties resolved toward
    the lexicographically smallest (min node, max node) pair); neighbours
    with hanging nodes are bisected by *their* longest edges until the mesh
    conforms.  Returns the new mesh and a map from new tets to the input tet
    they descend from.
    """
    marked = np.asarray(marked)
    if marked.dtype == bool:
        active = marked.copy()
    else:
        active = np.zeros(mesh.n_tets, dtype=bool)
        active[marked] = True

    nodes = mesh.nodes
    tets = mesh.tets
    gens = mesh.tet_gen
    parent = np.arange(mesh.n_tets, dtype=np.int64)
    # Registry of split edges: keys/ids grow per sweep, kept sorted by key.
    key_hist = np.empty(0, dtype=np.int64)
    id_hist = np.empty(0, dtype=np.int64)
    split_sorted = key_hist
    split_ids_sorted = id_hist

    for _sweep in range(MAX_CLOSURE_SWEEPS):
        idx = np.flatnonzero(active)
        if len(idx) == 0:
            break
        t = tets[idx]
        v = nodes[t]
        d = v[:, _EDGE_PAIRS[:, 0]] - v[:, _EDGE_PAIRS[:, 1]]
        lengths = np.linalg.norm(d, axis=2)
        keys = _encode_edges(t)
        # Near-ties count as ties so the node-pair tie-break, not roundoff,
        # picks the edge.
        is_max = lengths >= (1.0 - 1e-12) * lengths.max(axis=1, keepdims=True)
        masked = np.where(is_max, keys, np.iinfo(np.int64).max)
        sel = masked.argmin(axis=1)
        rows = np.arange(len(idx))
        chosen = keys[rows, sel]

        uniq = np.unique(chosen)
        fresh = uniq[~np.isin(uniq, split_sorted)]
        if len(fresh):
            a = fresh >> 32
            b = fresh & 0xFFFFFFFF
            mids = 0.5 * (nodes[a] + nodes[b])
            new_ids = np.arange(len(nodes), len(nodes) + len(fresh), dtype=np.int64)
            nodes = np.vstack([nodes, mids])
            key_hist = np.concatenate([key_hist, fresh])
            id_hist = np.concatenate([id_hist, new_ids])
            order = np.argsort(key_hist, kind="stable")
            split_sorted = key_hist[order]
            split_ids_sorted = id_hist[order]
        mid_ids = split_ids_sorted[np.searchsorted(split_sorted, chosen)]

        p_slot = _EDGE_PAIRS[sel, 0]
        q_slot = _EDGE_PAIRS[sel, 1]
        child1 = t.copy()
        child1[rows, p_slot] = mid_ids
        child2 = t.copy()
        child2[rows, q_slot] = mid_ids

        keep = ~active
        tets = np.concatenate([tets[keep], child1, child2])
        gens = np.concatenate([gens[keep], gens[idx] + 1, gens[idx] + 1])
        parent = np.concatenate([parent[keep], parent[idx], parent[idx]])

        if len(tets) > MAX_TETS:
            raise MeshError(
                f"refinement exceeded the tet cap {MAX_TETS}; coarsen the "
                "request"
            )
        # Any tet still holding a split edge is non-conforming.
        all_edge_keys = _encode_edges(tets)
        pos = np.searchsorted(split_sorted, all_edge_keys)
        pos = np.clip(pos, 0, len(split_sorted) - 1)
        hit = split_sorted[pos] == all_edge_keys
        active = hit.any(axis=1)
    else:
        raise MeshError(
            f"conformity closure did not terminate in {MAX_CLOSURE_SWEEPS} sweeps"
        )

    new_mesh = TetMesh(
        nodes=nodes,
        tets=tets,
        box_lo=mesh.box_lo,
        box_hi=mesh.box_hi,
        h0=mesh.h0,
        tet_gen=gens,
    )
    return new_mesh, parent


def bisect_tets(mesh: TetMesh, marked: np.ndarray) -> TetMesh:
    """Bisect the marked tets once (plus closure); volume is conserved."""
    new_mesh, _ = _bisect_generation(mesh, marked)
    return new_mesh


def refine_near_boundary(
    mesh: TetMesh,
    surface: TriangleSurface,
    levels: int,
    band,
    seed: int = 0,
) -> TetMesh:
    """Halve the spacing near and inside the surface, ``levels`` times.

    Per level, tets whose centroid is inside the vessel or within ``band``
    meters of the wall are marked; three bisection generations (with
    conformity closure after each) then halve the marked region's spacing.
    ``band`` may be a scalar or a per-level sequence.

    Raises MeshError if levels < 0, the tet cap is exceeded, or closure
    fails to terminate.
    """
    if levels < 0:
        raise MeshError(f"levels must be non-negative, got {levels}")
    if np.isscalar(band):
        bands = [float(band)] * levels
    else:
        bands = [float(b) for b in band]
        if len(bands) != levels:
            raise MeshError(
                f"band sequence has {len(bands)} entries for {levels} levels"
            )
    for level in range(levels):
        cent = mesh.centroids
        marked = point_inside(surface, cent, seed=seed)
        if bands[level] > 0.0:
            marked = marked | distance_band(surface, cent, bands[level])
        logger.info(
            "refine level %d/%d: %d of %d tets marked",
            level + 1, levels, int(marked.sum()), mesh.n_tets,
        )
        for _ in range(3):
            mesh, parent = _bisect_generation(mesh, marked)
            marked = marked[parent]
    return mesh


def lumped_volumes(mesh: TetMesh) -> np.ndarray:
    """Nodal control volumes: a quarter of each incident tet's volume."""
    w = np.repeat(mesh.volumes / 4.0, 4)
    return np.bincount(mesh.tets.ravel(), weights=w, minlength=mesh.n_nodes)


def _face_counts(mesh: TetMesh) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    faces = mesh.tets[:, _FACE_TRIPLES].reshape(-1, 3)
    faces_sorted = np.sort(faces, axis=1)
    uniq, inverse, counts = np.unique(
        faces_sorted, axis=0, return_inverse=True, return_counts=True
    )
    return uniq, inverse, counts


def _on_plane_mask(mesh: TetMesh, nodes_idx: np.ndarray, axis: int, value: float):
    tol = 1e-9 * max(mesh.h0, 1e-30)
    return np.abs(mesh.nodes[nodes_idx, axis] - value) <= tol


def boundary_faces(mesh: TetMesh) -> tuple[np.ndarray, np.ndarray]:
    """Faces used by exactly one tet, with the box plane each lies on.

    Returns (faces (F, 3) int64, plane (F,) int8) where plane encodes
    2*axis + (0 for the low face, 1 for the high face), or -1 if the face is
    not on the box hull (which check_conforming treats as an error).
    """
    uniq, _, counts = _face_counts(mesh)
    bfaces = uniq[counts == 1]
    plane = -np.ones(len(bfaces), dtype=np.int8)
    for ax in range(3):
        for side, value in ((0, mesh.box_lo[ax]), (1, mesh.box_hi[ax])):
            on = (
                _on_plane_mask(mesh, bfaces[:, 0], ax, value)
                & _on_plane_mask(mesh, bfaces[:, 1], ax, value)
                & _on_plane_mask(mesh, bfaces[:, 2], ax, value)
            )
            plane[on] = 2 * ax + side
    return bfaces, plane


def check_conforming(mesh: TetMesh) -> None:
    """Raise MeshError on inverted tets, hanging nodes, or over-shared faces."""
    if (mesh.volumes <= 0.0).any():
        bad = int(np.flatnonzero(mesh.volumes <= 0.0)[0])
        raise MeshError(f"tet {bad} has non-positive volume")
    uniq, _, counts = _face_counts(mesh)
    if (counts > 2).any():
        bad = uniq[np.argmax(counts > 2)]
        raise MeshError(f"face {bad.tolist()} is shared by more than two tets")
    bfaces, plane = boundary_faces(mesh)
    if (plane < 0).any():
        bad = bfaces[np.argmax(plane < 0)]
        raise MeshError(
            f"hanging node: interior face {bad.tolist()} belongs to only one tet"
        )


def tag_boundary_nodes(mesh: TetMesh, caps: list[Cap]) -> "BoundaryTags":
    """Assign interior / outer-wall / inlet / outlet roles to mesh nodes.

    Each cap must be parallel to a box face within 5 degrees; its centroid is
    projected onto the nearer face of that axis and nodes of that face within
    the cap radius (closed disk) take the cap's role.  Box-face nodes outside
    every cap disk are outer wall; everything else is interior.
    """
    n = mesh.n_nodes
    role = np.full(n, INTERIOR, dtype=np.int8)
    cap_of_node = np.full(n, -1, dtype=np.int16)
    tol = 1e-9 * mesh.h0
    on_face = np.zeros(n, dtype=bool)
    face_masks = {}
    for ax in range(3):
        for side, value in ((0, mesh.box_lo[ax]), (1, mesh.box_hi[ax])):
            m = np.abs(mesh.nodes[:, ax] - value) <= tol
            face_masks[2 * ax + side] = m
            on_face |= m
    role[on_face] = OUTER_WALL

    cos5 = np.cos(np.deg2rad(5.0))
    cap_planes = []
    cap_centers = np.zeros((len(caps), 3))
    inlet_radius = np.full(n, np.nan)
    for ci, cap in enumerate(caps):
        ax = int(np.argmax(np.abs(cap.normal)))
        if abs(cap.normal[ax]) < cos5:
            raise MeshError(
                f"cap {ci} ({cap.role}) normal {cap.normal.round(4).tolist()} is "
                "more than 5 degrees off every box axis; extend or rotate the "
                "vessel so its openings face a box side"
            )
        d_lo = abs(cap.centroid[ax] - mesh.box_lo[ax])
        d_hi = abs(cap.centroid[ax] - mesh.box_hi[ax])
        side = 0 if d_lo <= d_hi else 1
        gap = min(d_lo, d_hi)
        if gap > 2.0 * mesh.h0:
            logger.warning(
                "cap %d (%s) sits %.3e m off the box face; inflow will be "
                "applied on the face regardless",
                ci, cap.role, gap,
            )
        plane = 2 * ax + side
        cap_planes.append(plane)
        center = cap.centroid.copy()
        center[ax] = mesh.box_lo[ax] if side == 0 else mesh.box_hi[ax]
        cap_centers[ci] = center
        in_ax = [a for a in range(3) if a != ax]
        d = mesh.nodes[:, in_ax] - center[in_ax]
        r = np.linalg.norm(d, axis=1)
        disk = face_masks[plane] & (r <= cap.radius * (1.0 + 1e-12) + tol)
        clash = disk & (cap_of_node >= 0)
        if clash.any():
            other = int(cap_of_node[np.flatnonzero(clash)[0]])
            raise MeshError(
                f"cap {ci} and cap {other} claim the same box-face nodes; "
                "their openings overlap after projection"
            )
        role[disk] = INLET if cap.role == "inlet" else OUTLET
        cap_of_node[disk] = ci
        if cap.role == "inlet":
            inlet_radius[disk] = r[disk]
    return BoundaryTags(
        role=role,
        cap_of_node=cap_of_node,
        inlet_radius=inlet_radius,
        cap_planes=tuple(cap_planes),
        cap_centers=cap_centers,
    )


@dataclass(frozen=True)
class BoundaryTags:
    """Node roles on the box hull plus per-cap bookkeeping.

    role : (N,) int8 of INTERIOR / OUTER_WALL / INLET / OUTLET
    cap_of_node : (N,) int16 cap index for inlet/outlet nodes, else -1
    inlet_radius : (N,) in-plane distance to the inlet axis (nan elsewhere)
    cap_planes : box plane id (2*axis + side) per cap
    cap_centers : cap centroids projected onto their box faces
    """

    role: np.ndarray
    cap_of_node: np.ndarray
    inlet_radius: np.ndarray
    cap_planes: tuple[int, ...]
    cap_centers: np.ndarray

    @property
    def inlet_nodes(self) -> np.ndarray:
        return np.flatnonzero(self.role == INLET)

    @property
    def outlet_nodes(self) -> np.ndarray:
        return np.flatnonzero(self.role == OUTLET)

    @property
    def outer_wall_nodes(self) -> np.ndarray:
        return np.flatnonzero(self.role == OUTER_WALL)

    @property
    def dirichlet_velocity_nodes(self) -> np.ndarray:
        """Nodes with strongly imposed velocity: inlet plus outer wall."""
        return np.flatnonzero((self.role == INLET) | (self.role == OUTER_WALL))


def interior_fraction(
    mesh: TetMesh, surface: TriangleSurface, seed: int = 0
) -> float:
    """Fraction of tets whose centroid lies inside the vessel."""
    inside = point_inside(surface, mesh.centroids, seed=seed)
    return float(inside.sum()) / max(mesh.n_tets, 1)


def plan_box(
    surface: TriangleSurface,
    caps: list[Cap],
    h0: float,
    padding_cells: int = 2,
) -> tuple[np.ndarray, np.ndarray]:
    """Box around the surface: cap planes snapped to faces, others padded.

    Lateral sides get at least ``padding_cells`` cells of clearance and are
    snapped outward to the global h0 lattice (multiples of h0), so a vessel
    axis through the origin lies on node planes.  Axes carrying a cap have
    that face placed exactly on the cap plane; an axis capped on both ends
    must already span an integer multiple of h0, else MeshError.
    """
    lo, hi = (b.copy() for b in surface.bounds)
    lo -= padding_cells * h0
    hi += padding_cells * h0
    snapped_lo = [False] * 3
    snapped_hi = [False] * 3
    for cap in caps:
        ax = int(np.argmax(np.abs(cap.normal)))
        if cap.normal[ax] > 0:
            hi[ax] = cap.centroid[ax]
            snapped_hi[ax] = True
        else:
            lo[ax] = cap.centroid[ax]
            snapped_lo[ax] = True
    for ax in range(3):
        if snapped_lo[ax] and snapped_hi[ax]:
            n_exact = (hi[ax] - lo[ax]) / h0
            n = int(round(n_exact))
            if n < 1 or abs(n_exact - n) > 1e-6 * max(n, 1):
                raise MeshError(
                    f"axis {ax} is capped on both ends; its length "
                    f"{hi[ax] - lo[ax]:.6e} m must be an integer multiple of h0"
                )
        elif snapped_lo[ax]:
            n = int(np.ceil((hi[ax] - lo[ax]) / h0 - 1e-9))
            hi[ax] = lo[ax] + n * h0
        elif snapped_hi[ax]:
            n = int(np.ceil((hi[ax] - lo[ax]) / h0 - 1e-9))
            lo[ax] = hi[ax] - n * h0
        else:
            lo[ax] = np.floor(lo[ax] / h0 + 1e-9) * h0
            hi[ax] = np.ceil(hi[ax] / h0 - 1e-9) * h0
    return lo, hi


def save_mesh(mesh: TetMesh, path) -> None:
    """Dump to .npz: nodes, tets, tet_gen, box_lo, box_hi, h0 (all arrays)."""
    np.savez_compressed(
        path,
        nodes=mesh.nodes,
        tets=mesh.tets,
        tet_gen=mesh.tet_gen,
        box_lo=mesh.box_lo,
        box_hi=mesh.box_hi,
        h0=np.array([mesh.h0]),
    )


def load_mesh(path) -> TetMesh:
    with np.load(path) as d:
        return TetMesh(
            nodes=d["nodes"],
            tets=d["tets"],
            tet_gen=d["tet_gen"],
            box_lo=d["box_lo"],
            box_hi=d["box_hi"],
            h0=float(d["h0"][0]),
        )


def mesh_stats(mesh: TetMesh) -> dict:
    lengths = mesh.edge_lengths()
    return {
        "n_nodes": mesh.n_nodes,
        "n_tets": mesh.n_tets,
        "h0": mesh.h0,
        "min_edge": float(lengths.min()),
        "max_edge": float(lengths.max()),
        "total_volume": float(mesh.volumes.sum()),
        "max_level": int(mesh.refinement_levels.max()) if mesh.n_tets else 0,
    }
