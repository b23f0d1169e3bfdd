"""Eulerian-Lagrangian coupling: interpolation, spreading, velocity correction.

Markers interpolate velocity from their containing tet's linear shape
functions (operator D); forces spread back through the transpose weighted by
marker area over nodal lumped volume (operator B).  The no-slip correction
solves the small symmetric system (dt * D * B) F = U_B - D u* for marker
forces so the corrected velocity interpolates to exactly U_B.

With row scaling S = diag(areas) and G = S F, the system matrix factors as
dt * W S with W = D diag(mask / V) D^T symmetric positive (semi-)definite, so
the solve runs on W: dense Cholesky for small marker counts, otherwise
Jacobi-preconditioned CG.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.sparse as sp
from scipy.spatial import cKDTree

from .boxmesh import TetMesh, lumped_volumes
from .errors import CouplingError
from .geometry import MarkerSet
from .linalg import JacobiPreconditioner, cg

DENSE_LIMIT = 2000
BCE_RTOL = 1e-12
# Barycentric slack: points this close to a face count as inside both tets
# and the lower tet index wins.
_BARY_TOL = 1e-10


class TetLocator:
    """Point-in-tet queries via a centroid kd-tree with expanding search."""

    def __init__(self, mesh: TetMesh):
        self.mesh = mesh
        self._tree = cKDTree(mesh.centroids)
        v = mesh.nodes[mesh.tets]
        # Per-tet matrix mapping (p - v0) to the three non-v0 barycentric
        # coordinates; inverted once.
        T = np.stack([v[:, 1] - v[:, 0], v[:, 2] - v[:, 0], v[:, 3] - v[:, 0]],
                     axis=2)
        self._Tinv = np.linalg.inv(T)
        self._v0 = v[:, 0]

    def _bary(self, tet_ids: np.ndarray, points: np.ndarray) -> np.ndarray:
        """(n, 4) barycentric coords of points in the given tets."""
        lam = np.einsum(
            "nij,nj->ni", self._Tinv[tet_ids], points - self._v0[tet_ids]
        )
        lam0 = 1.0 - lam.sum(axis=1)
        return np.column_stack([lam0, lam])

    def locate(
        self, points: np.ndarray, k_start: int = 8, k_max: int = 512
    ) -> tuple[np.ndarray, np.ndarray]:
        """Containing tet and barycentric weights for each point.

        Candidates come from the k nearest tet centroids, doubling k until a
        containing tet is found; among multiple hits (face/edge points) the
        lowest tet index wins.  Raises CouplingError naming the first point
        found in no tet.
        """
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        n = len(points)
        tet_idx = np.full(n, -1, dtype=np.int64)
        bary = np.zeros((n, 4))
        pending = np.arange(n)
        k = k_start
        while len(pending) and k <= k_max:
            kk = min(k, self.mesh.n_tets)
            _, nbr = self._tree.query(points[pending], k=kk)
            nbr = nbr.reshape(len(pending), kk)
            # Sort candidates by tet index so the first hit is the lowest.
            nbr = np.sort(nbr, axis=1)
            flat = nbr.ravel()
            rep_pts = np.repeat(points[pending], nbr.shape[1], axis=0)
            lam = self._bary(flat, rep_pts).reshape(len(pending), nbr.shape[1], 4)
            ok = (lam >= -_BARY_TOL).all(axis=2)
            has = ok.any(axis=1)
            first = ok.argmax(axis=1)
            rows = np.flatnonzero(has)
            src = pending[rows]
            tet_idx[src] = nbr[rows, first[rows]]
            bary[src] = lam[rows, first[rows]]
            pending = pending[~has]
            if kk == self.mesh.n_tets:
                break
            k *= 2
        if len(pending):
            i = int(pending[0])
            raise CouplingError(
                f"point {i} at {points[i].tolist()} lies outside every tet; "
                "the box does not cover it"
            )
        # Snap the face-slack negatives to zero and renormalize so each row
        # is a partition of unity to machine precision.
        bary = np.clip(bary, 0.0, None)
        bary /= bary.sum(axis=1, keepdims=True)
        return tet_idx, bary


def interpolation_matrix(
    mesh: TetMesh, points: np.ndarray, locator: TetLocator | None = None
) -> tuple[sp.csr_matrix, np.ndarray]:
    """Sparse P1 interpolation matrix (n_points x n_nodes) and tet indices."""
    if locator is None:
        locator = TetLocator(mesh)
    tet_idx, bary = locator.locate(points)
    n = len(tet_idx)
    rows = np.repeat(np.arange(n), 4)
    cols = mesh.tets[tet_idx].ravel()
    D = sp.csr_matrix(
        (bary.ravel(), (rows, cols)), shape=(n, mesh.n_nodes)
    )
    return D, tet_idx


def merge_close_markers(markers: MarkerSet, min_separation: float) -> MarkerSet:
    """Merge markers closer than min_separation (grid-quantized, greedy).

    Positions within the same quantization cell collapse into one marker at
    the area-weighted mean with summed area; protects the correction system
    from duplicate interpolation rows.
    """
    if min_separation <= 0.0 or len(markers.positions) == 0:
        return markers
    q = np.floor(markers.positions / min_separation + 0.5).astype(np.int64)
    _, group, counts = np.unique(
        q, axis=0, return_inverse=True, return_counts=True
    )
    if (counts == 1).all():
        return markers
    m = len(counts)
    a = markers.areas
    area = np.bincount(group, weights=a, minlength=m)
    pos = np.empty((m, 3))
    nrm = np.empty((m, 3))
    vel = np.empty((m, 3))
    for c in range(3):
        pos[:, c] = np.bincount(group, weights=a * markers.positions[:, c],
                                minlength=m) / area
        nrm[:, c] = np.bincount(group, weights=a * markers.normals[:, c],
                                minlength=m)
        vel[:, c] = np.bincount(group, weights=a * markers.velocities[:, c],
                                minlength=m) / area
    norms = np.linalg.norm(nrm, axis=1)
    norms[norms == 0.0] = 1.0
    nrm /= norms[:, None]
    # Keep first-marker ordering so the merge is stable across runs.
    first = np.full(m, len(group), dtype=np.int64)
    np.minimum.at(first, group, np.arange(len(group)))
    order = np.argsort(first, kind="stable")
    return MarkerSet(
        positions=pos[order], areas=area[order], normals=nrm[order],
        velocities=vel[order],
    )


@dataclass
class CouplingOperators:
    """Interpolation/spreading pair for one mesh-marker configuration.

    D : (N_L, N_E) csr, row l = barycentric weights of marker l
    tet_index : containing tet per marker
    B_full : unmasked spreading map diag(1/V) D^T diag(areas)
    free_mask : nodes eligible to receive the in-solver correction
    """

    mesh: TetMesh
    markers: MarkerSet
    D: sp.csr_matrix
    tet_index: np.ndarray
    node_volumes: np.ndarray
    free_mask: np.ndarray
    B_full: sp.csr_matrix
    _w_dense: object = field(default=None, repr=False)
    _w_sparse: sp.csr_matrix | None = field(default=None, repr=False)
    _w_precond: object = field(default=None, repr=False)
    _dt_spread: sp.csr_matrix | None = field(default=None, repr=False)
    rtol: float = BCE_RTOL
    maxiter: int = 2000

    @property
    def n_markers(self) -> int:
        return len(self.markers.positions)

    def interpolate(self, u: np.ndarray) -> np.ndarray:
        """Velocity (or any nodal field) at the markers."""
        return self.D @ u

    def spread(self, F: np.ndarray) -> np.ndarray:
        """Nodal force density from marker forces; conserves total momentum:
        sum_j V_j f_j = sum_l dS_l F_l exactly."""
        return self.B_full @ F

    def _solve_w(self, rhs: np.ndarray, x0=None) -> np.ndarray:
        if self._w_dense is not None:
            kind, data = self._w_dense
            if kind == "chol":
                return scipy.linalg.cho_solve(data, rhs)
            # Spectral pseudoinverse: the system is semi-definite when
            # markers oversample the grid; null components of a consistent
            # right-hand side are zero, so dropping them is exact.
            eigvals, eigvecs, cut = data
            y = eigvecs.T @ rhs
            y[:cut] = 0.0
            y[cut:] /= eigvals[cut:, None]
            return eigvecs @ y
        out = np.empty_like(rhs)
        for c in range(rhs.shape[1]):
            xc, rep = cg(
                self._w_sparse, rhs[:, c],
                x0=None if x0 is None else x0[:, c],
                rtol=self.rtol, atol=0.0, maxiter=self.maxiter,
                M=self._w_precond,
            )
            if not rep.converged:
                raise CouplingError(
                    f"velocity-correction solve stalled (component {c}, "
                    f"residual {rep.residual:.3e} after {rep.iterations} "
                    "iterations); either the prescribed marker velocities "
                    "are unreachable on this grid or the marker spacing is "
                    "too fine - resample with larger h"
                )
            out[:, c] = xc
        return out

    def bce_correct(
        self, u_star: np.ndarray, U_B: np.ndarray, dt: float, g0=None
    ) -> tuple[np.ndarray, np.ndarray]:
        """Correct u_star so markers interpolate U_B; returns (u, F).

        Solves (dt D B) F = U_B - D u_star and applies u = u_star + dt B F,
        with spreading restricted to free (non-Dirichlet) nodes when the
        operators were built with a mask.
        """
        if dt <= 0.0:
            raise CouplingError(f"dt must be positive, got {dt!r}")
        rhs = (U_B - self.D @ u_star) / dt
        G = self._solve_w(rhs, x0=g0)
        F = G / self.markers.areas[:, None]
        du = self._dt_spread @ G
        return u_star + dt * du, F

    def constraint_residual(self, u: np.ndarray, U_B: np.ndarray) -> float:
        """Max interpolated-velocity mismatch over markers (inf norm)."""
        return float(np.abs(self.D @ u - U_B).max())


def locate_markers(
    mesh: TetMesh,
    markers: MarkerSet,
    free_mask: np.ndarray | None = None,
    dense_limit: int = DENSE_LIMIT,
    rtol: float = BCE_RTOL,
    merge_distance: float | None = None,
    locator: TetLocator | None = None,
) -> CouplingOperators:
    """Build coupling operators for the markers on this mesh.

    free_mask marks nodes the in-solver correction may modify (None = all);
    merge_distance defaults to a tenth of the smallest mesh edge.
    """
    if merge_distance is None:
        merge_distance = 0.1 * mesh.min_edge
    markers = merge_close_markers(markers, merge_distance)
    D, tet_idx = interpolation_matrix(mesh, markers.positions, locator)
    V = lumped_volumes(mesh)
    if free_mask is None:
        free_mask = np.ones(mesh.n_nodes, dtype=bool)
    else:
        free_mask = np.asarray(free_mask, dtype=bool)
        if free_mask.shape != (mesh.n_nodes,):
            raise CouplingError("free_mask must have one entry per mesh node")

    inv_v = 1.0 / V
    areas = markers.areas
    B_full = sp.csr_matrix(D.T.multiply(areas[None, :]).multiply(inv_v[:, None]))
    # Masked transpose used inside bce_correct: du = dt * (mask/V) D^T G.
    masked_scale = np.where(free_mask, inv_v, 0.0)
    dt_spread = sp.csr_matrix(D.T.multiply(masked_scale[:, None]))
    W = (D.multiply(masked_scale[None, :]) @ D.T).tocsr()

    diag = W.diagonal()
    if (diag <= 0.0).any():
        bad = int(np.argmax(diag <= 0.0))
        raise CouplingError(
            f"marker {bad} at {markers.positions[bad].tolist()} has no free "
            "nodes to act on (its tet is fully constrained); enlarge the box "
            "or coarsen the markers near that boundary"
        )
    ops = CouplingOperators(
        mesh=mesh, markers=markers, D=D, tet_index=tet_idx,
        node_volumes=V, free_mask=free_mask, B_full=B_full,
        _dt_spread=dt_spread, rtol=rtol,
    )
    n_l = len(areas)
    if n_l <= dense_limit:
        try:
            ops._w_dense = scipy.linalg.cho_factor(W.toarray(), lower=True)
        except scipy.linalg.LinAlgError as exc:
            raise CouplingError(
                "the marker-correction matrix is singular (markers "
                "oversample the local grid); resample with larger h or "
                "increase the merge distance"
            ) from exc
    else:
        ops._w_sparse = W
        ops._w_precond = JacobiPreconditioner(diag)
    return ops
