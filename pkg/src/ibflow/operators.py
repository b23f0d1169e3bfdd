"""P1 tetrahedral finite-element operators on the background mesh.

All global matrices share one sparsity pattern (the 16 node-pair slots of
every tet), so assembly reduces to a bincount of per-element 4x4 blocks into
a cached CSR data array.  That makes the per-step convection reassembly cheap
and keeps every reduction deterministically ordered.

Conventions:
  mass        M[i,j]   = integral phi_i phi_j
  stiffness   K[i,j]   = nu * integral grad phi_i . grad phi_j
  divergence  B_c[i,j] = integral phi_i d(phi_j)/dx_c,  div(u) = sum_c B_c u_c
  gradient    (G p)_c  = -B_c^T p   (integration by parts, boundary term
                         dropped - natural pressure condition)
  convection  C(w)[i,j] = integral phi_i (w . grad phi_j), w interpolated P1
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .boxmesh import TetMesh
from .errors import SolverError

DEGENERATE_VOLUME = 1e-18


class PatternTemplate:
    """Fixed element-pair sparsity pattern with bincount-based assembly."""

    def __init__(self, mesh: TetMesh):
        t = mesh.tets
        n = mesh.n_nodes
        rows = np.repeat(t, 4, axis=1).ravel()
        cols = np.tile(t, (1, 4)).ravel()
        keys = rows.astype(np.int64) * n + cols
        uniq, inverse = np.unique(keys, return_inverse=True)
        self.n_nodes = n
        self.nnz = len(uniq)
        self._inverse = inverse
        self._indices = (uniq % n).astype(np.int32)
        counts = np.bincount((uniq // n).astype(np.int64), minlength=n)
        self._indptr = np.concatenate([[0], np.cumsum(counts)]).astype(np.int32)
        self.row_of_slot = np.repeat(np.arange(n), counts)
        diag = np.flatnonzero(self._indices == self.row_of_slot)
        if len(diag) != n:
            raise SolverError("mesh has isolated nodes; pattern lacks diagonals")
        self.diag_slot = diag

    def assemble_data(self, elem: np.ndarray) -> np.ndarray:
        """Global CSR data array from per-element (T, 4, 4) blocks."""
        return np.bincount(self._inverse, weights=elem.ravel(),
                           minlength=self.nnz)

    def csr(self, data: np.ndarray) -> sp.csr_matrix:
        return sp.csr_matrix(
            (data, self._indices, self._indptr),
            shape=(self.n_nodes, self.n_nodes),
        )

    def assemble(self, elem: np.ndarray) -> sp.csr_matrix:
        return self.csr(self.assemble_data(elem))


def shape_gradients(mesh: TetMesh) -> np.ndarray:
    """(T, 4, 3) constant gradients of the four nodal shape functions."""
    v = mesh.nodes[mesh.tets]
    T = np.stack([v[:, 1] - v[:, 0], v[:, 2] - v[:, 0], v[:, 3] - v[:, 0]],
                 axis=1)
    Tinv = np.linalg.inv(T)
    g = Tinv.transpose(0, 2, 1)  # rows = grad lambda_1..3
    g0 = -g.sum(axis=1, keepdims=True)
    return np.concatenate([g0, g], axis=1)


# Consistent P1 mass block over a unit-volume tet: V/10 diagonal, V/20 off.
_MASS_BLOCK = (np.ones((4, 4)) + np.eye(4)) / 20.0


@dataclass
class DiscreteOperators:
    """Assembled, immutable spatial operators for one mesh and viscosity."""

    mesh: TetMesh
    nu: float
    template: PatternTemplate
    grads: np.ndarray
    volumes: np.ndarray
    M: sp.csr_matrix
    M_lumped: np.ndarray
    K: sp.csr_matrix
    B: tuple[sp.csr_matrix, sp.csr_matrix, sp.csr_matrix]
    K_data: np.ndarray = field(repr=False, default=None)

    def divergence(self, u: np.ndarray) -> np.ndarray:
        """Weak divergence Sum_c B_c u[:, c] (one value per node)."""
        return sum(self.B[c] @ u[:, c] for c in range(3))

    def gradient(self, p: np.ndarray) -> np.ndarray:
        """Weak gradient, (N, 3): column c = -B_c^T p."""
        return np.column_stack([-(self.B[c].T @ p) for c in range(3)])

    def convection_data(self, w: np.ndarray, mode: str = "skew") -> np.ndarray:
        """CSR data of the convection matrix for P1 velocity field w.

        mode 'plain' gives C; 'skew' gives the energy-neutral (C - C^T)/2;
        'none' disables convection (Stokes flow).
        """
        if mode == "none":
            return np.zeros_like(self.K_data)
        t = self.mesh.tets
        # a[e, k, j] = w_k . grad(phi_j), both local to element e
        a = np.einsum("ekc,ejc->ekj", w[t], self.grads)
        elem = np.einsum("ik,ekj->eij", _MASS_BLOCK, a) * self.volumes[:, None, None]
        if mode == "plain":
            return self.template.assemble_data(elem)
        if mode == "skew":
            half = 0.5 * (elem - elem.transpose(0, 2, 1))
            return self.template.assemble_data(half)
        raise SolverError(f"unknown convection mode {mode!r} (plain|skew|none)")


def build_operators(mesh: TetMesh, nu: float) -> DiscreteOperators:
    if nu <= 0.0:
        raise SolverError(f"kinematic viscosity must be positive, got {nu!r}")
    vol = mesh.volumes
    if (vol < DEGENERATE_VOLUME).any():
        bad = int(np.argmax(vol < DEGENERATE_VOLUME))
        raise SolverError(
            f"element {bad} is degenerate (volume {vol[bad]:.3e} m^3)"
        )
    tpl = PatternTemplate(mesh)
    g = shape_gradients(mesh)

    mass_elem = _MASS_BLOCK[None, :, :] * vol[:, None, None]
    M = tpl.assemble(mass_elem)
    M_lumped = np.bincount(
        mesh.tets.ravel(), weights=np.repeat(vol / 4.0, 4),
        minlength=mesh.n_nodes,
    )

    k_elem = nu * np.einsum("eic,ejc->eij", g, g) * vol[:, None, None]
    K_data = tpl.assemble_data(k_elem)
    K = tpl.csr(K_data)

    B = []
    for c in range(3):
        # integral phi_i d(phi_j)/dx_c = V/4 * g[j, c], independent of i
        b_elem = np.broadcast_to(
            (vol[:, None, None] / 4.0) * g[:, None, :, c],
            (mesh.n_tets, 4, 4),
        )
        B.append(tpl.assemble(np.ascontiguousarray(b_elem)))
    return DiscreteOperators(
        mesh=mesh, nu=nu, template=tpl, grads=g, volumes=vol,
        M=M, M_lumped=M_lumped, K=K, B=tuple(B), K_data=K_data,
    )


def dirichlet_rows(
    template: PatternTemplate, data: np.ndarray, mask: np.ndarray
) -> np.ndarray:
    """Copy of a CSR data array with masked rows zeroed and unit diagonal."""
    out = data.copy()
    out[mask[template.row_of_slot]] = 0.0
    out[template.diag_slot[mask]] = 1.0
    return out


def pressure_poisson(
    ops: DiscreteOperators,
    velocity_free: np.ndarray,
    pressure_fixed: np.ndarray,
) -> sp.csr_matrix:
    """Projection operator L = sum_c B_c diag(free/M_L) B_c^T, SPD after
    pinning the fixed-pressure (outlet) rows and columns to identity.

    velocity_free marks nodes whose velocity the projection may update;
    pressure_fixed marks nodes where the increment is held at zero.
    """
    scale = np.where(velocity_free, 1.0 / ops.M_lumped, 0.0)
    Dg = sp.diags(scale)
    L = None
    for c in range(3):
        term = (ops.B[c] @ Dg) @ ops.B[c].T
        L = term if L is None else L + term
    L = L.tocsr()
    # Pin fixed rows/columns symmetrically (their rhs is zero).
    keep = ~pressure_fixed
    mask_d = sp.diags(keep.astype(np.float64))
    L = mask_d @ L @ mask_d + sp.diags(pressure_fixed.astype(np.float64))
    L.sort_indices()
    return L.tocsr()
