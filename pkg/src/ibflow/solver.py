"""Fractional-step incompressible flow solver with marker coupling.

Each step advances the nodal velocity/pressure through four stages:

1. tentative velocity - Crank-Nicolson viscous/convective solve per
   component, convecting velocity extrapolated from the two previous steps;
2. marker velocity correction enforcing the immersed no-slip condition;
3. pressure-increment solve on the compatible projection operator, with the
   increment pinned to zero at outlet nodes;
4. lumped-mass velocity projection, then optional re-correction passes to
   restore the marker constraint degraded by the projection.

The projection operator is built from the same discrete divergence used in
stage 3's right-hand side, so the post-projection divergence residual equals
dt times the pressure solve's algebraic residual - the solver tolerance, not
the mesh, controls it.
"""
from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import dataclass, replace

import numpy as np

from .boxmesh import TetMesh, boundary_faces
from .coupling import CouplingOperators
from .errors import SolverError
from .inflow import InletDriver
from .linalg import JacobiPreconditioner, bicgstab, cg, make_preconditioner
from .operators import DiscreteOperators, dirichlet_rows, pressure_poisson

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class FlowState:
    """Velocity (current and previous step), kinematic pressure, time."""

    u: np.ndarray
    u_prev: np.ndarray
    p: np.ndarray
    t: float = 0.0
    step_index: int = 0


def face_flux_weights(mesh: TetMesh, plane: int) -> tuple[np.ndarray, int, float]:
    """Nodal quadrature weights for the outward flux through one box plane.

    Returns (weights, axis, sign) such that sign * weights @ u[:, axis] is
    the volumetric flux leaving the box through that plane (plane encoded as
    2*axis + side like boundary_faces).
    """
    faces, plane_ids = boundary_faces(mesh)
    sel = faces[plane_ids == plane]
    axis = plane // 2
    sign = -1.0 if plane % 2 == 0 else 1.0
    w = np.zeros(mesh.n_nodes)
    if len(sel):
        v = mesh.nodes[sel]
        cross = np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])
        areas = 0.5 * np.abs(cross[:, axis])
        np.add.at(w, sel.ravel(), np.repeat(areas / 3.0, 3))
    return w, axis, sign


class FlowSolver:
    """Owns the assembled operators and advances FlowStates.

    velocity_dirichlet marks nodes whose velocity is prescribed per step
    (inlet + outer walls); pressure_pin marks nodes where the pressure
    increment is fixed to zero (the outlet face).  coupling may be None (no
    immersed surface - plain box flow); forcing, if given, is called as
    forcing(t_mid, u_bar) and must return a weak-form momentum source (N, 3)
    added to the tentative right-hand side.
    """

    def __init__(
        self,
        mesh: TetMesh,
        ops: DiscreteOperators,
        velocity_dirichlet: np.ndarray,
        pressure_pin: np.ndarray,
        dt: float,
        coupling: CouplingOperators | None = None,
        conv_mode: str = "skew",
        rtol: float = 1e-8,
        atol: float = 1e-12,
        maxiter: int = 2000,
        pressure_rtol: float = 1e-9,
        pressure_precon: str = "jacobi",
        ib_post_passes: int = 1,
        forcing=None,
    ):
        if dt <= 0.0:
            raise SolverError(f"dt must be positive, got {dt!r}")
        self.mesh = mesh
        self.ops = ops
        self.dt = float(dt)
        self.coupling = coupling
        self.conv_mode = conv_mode
        self.rtol = rtol
        self.atol = atol
        self.maxiter = maxiter
        self.pressure_rtol = pressure_rtol
        self.ib_post_passes = int(ib_post_passes)
        self.forcing = forcing

        n = mesh.n_nodes
        self.dirichlet = np.asarray(velocity_dirichlet, dtype=bool).copy()
        self.pressure_fixed = np.asarray(pressure_pin, dtype=bool).copy()
        if self.dirichlet.shape != (n,) or self.pressure_fixed.shape != (n,):
            raise SolverError("boundary masks must be (n_nodes,) boolean")
        self.velocity_free = ~self.dirichlet
        if not self.pressure_fixed.any():
            raise SolverError(
                "empty pressure pin set: the pressure increment has no "
                "reference level (check cap tagging)"
            )

        self.L = pressure_poisson(ops, self.velocity_free, self.pressure_fixed)
        self._L_precond = make_preconditioner(pressure_precon, self.L)
        # Static part of the tentative matrix; convection joins per step.
        self._A_static = 0.5 * ops.K_data.copy()
        self._A_static[ops.template.diag_slot] += ops.M_lumped / self.dt
        self._inv_ml_free = np.where(
            self.velocity_free, 1.0 / ops.M_lumped, 0.0
        )
        # The residual is measured on the rows the projection enforces:
        # pinned rows keep the outflow boundary term and are excluded.  The
        # scale is the Frobenius norm of that row-restricted operator.
        keep = ~self.pressure_fixed
        self._div_scale = float(
            np.sqrt(sum((B[keep].data**2).sum() for B in ops.B))
        )
        self._cfl_warned = False

    def zero_state(self) -> FlowState:
        n = self.mesh.n_nodes
        return FlowState(
            u=np.zeros((n, 3)), u_prev=np.zeros((n, 3)), p=np.zeros(n)
        )

    def divergence_ratio(self, u: np.ndarray) -> float:
        """|div u| / (|div operator| |u|) over the enforced (unpinned) rows."""
        nu = float(np.linalg.norm(u))
        if nu == 0.0:
            return 0.0
        d = self.ops.divergence(u)
        d[self.pressure_fixed] = 0.0
        return float(np.linalg.norm(d)) / (self._div_scale * nu)

    def kinetic_energy(self, u: np.ndarray) -> float:
        return 0.5 * float(np.sum(self.ops.M_lumped * (u * u).sum(axis=1)))

    def _check_finite(self, arr: np.ndarray, name: str, step: int) -> None:
        if not np.isfinite(arr).all():
            raise SolverError(f"{name} became non-finite at step {step}")

    def step(self, state: FlowState, u_bc: np.ndarray) -> tuple[FlowState, dict]:
        """Advance one dt; u_bc supplies Dirichlet velocity values at t + dt."""
        ops = self.ops
        dt = self.dt
        step_idx = state.step_index
        u_n = state.u
        diag: dict = {}

        speed = float(np.abs(u_n).max())
        cfl = speed * dt / self.mesh.min_edge
        if cfl > 1.0 and not self._cfl_warned:
            logger.warning(
                "CFL %.2f above 1 at step %d (|u|=%.3g, dt=%.3g, h=%.3g); "
                "accuracy may degrade", cfl, step_idx, speed, dt,
                self.mesh.min_edge,
            )
            self._cfl_warned = True
        diag["cfl"] = cfl

        u_bar = 1.5 * u_n - 0.5 * state.u_prev
        c_data = ops.convection_data(u_bar, self.conv_mode)
        A_data = self._A_static + 0.5 * c_data
        C = ops.template.csr(c_data)

        rhs = (ops.M_lumped / dt)[:, None] * u_n
        rhs -= 0.5 * np.column_stack([ops.K @ u_n[:, c] for c in range(3)])
        rhs -= 0.5 * np.column_stack([C @ u_n[:, c] for c in range(3)])
        rhs += ops.gradient(-state.p)  # -G p_n, G = -B^T
        if self.forcing is not None:
            rhs += self.forcing(state.t + 0.5 * dt, u_bar)
        rhs[self.dirichlet] = u_bc[self.dirichlet]

        A_bc = ops.template.csr(
            dirichlet_rows(ops.template, A_data, self.dirichlet)
        )
        precon = JacobiPreconditioner(A_bc.diagonal())
        u_star = np.empty_like(u_n)
        tent_iters = []
        for c in range(3):
            x, rep = bicgstab(
                A_bc, rhs[:, c], x0=u_n[:, c], rtol=self.rtol,
                atol=self.atol, maxiter=self.maxiter, M=precon,
            )
            rep.require(f"tentative velocity component {c} at step {step_idx}")
            u_star[:, c] = x
            tent_iters.append(rep.iterations)
        self._check_finite(u_star, "tentative velocity", step_idx)
        diag["tentative_iterations"] = tent_iters

        if self.coupling is not None:
            U_B = self.coupling.markers.velocities
            u_star, _ = self.coupling.bce_correct(u_star, U_B, dt)
            diag["noslip_after_correction"] = self.coupling.constraint_residual(
                u_star, U_B
            )

        div_star = ops.divergence(u_star)
        p_rhs = -div_star / dt
        p_rhs[self.pressure_fixed] = 0.0
        dp, rep = cg(
            self.L, p_rhs, rtol=self.pressure_rtol, atol=self.atol,
            maxiter=self.maxiter, M=self._L_precond,
        )
        rep.require(f"pressure increment at step {step_idx}")
        diag["pressure_iterations"] = rep.iterations
        self._check_finite(dp, "pressure increment", step_idx)

        u_new = u_star + dt * self._inv_ml_free[:, None] * ops.gradient(-dp)
        u_new[self.dirichlet] = u_bc[self.dirichlet]
        p_new = state.p + dp
        diag["div_ratio"] = self.divergence_ratio(u_new)

        if self.coupling is not None:
            U_B = self.coupling.markers.velocities
            diag["noslip_after_projection"] = self.coupling.constraint_residual(
                u_new, U_B
            )
            for _ in range(self.ib_post_passes):
                u_new, _ = self.coupling.bce_correct(u_new, U_B, dt)
            diag["noslip_final"] = self.coupling.constraint_residual(u_new, U_B)
            diag["div_ratio_final"] = self.divergence_ratio(u_new)

        self._check_finite(u_new, "velocity", step_idx)
        self._check_finite(p_new, "pressure", step_idx)
        new_state = FlowState(
            u=u_new, u_prev=u_n, p=p_new,
            t=state.t + dt, step_index=step_idx + 1,
        )
        return new_state, diag


def _hash_state(state: FlowState) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(state.u).tobytes())
    h.update(np.ascontiguousarray(state.p).tobytes())
    return h.hexdigest()


def run(
    solver: FlowSolver,
    driver: InletDriver | None,
    n_steps: int,
    state: FlowState | None = None,
    ramp_steps: int = 0,
    snapshot_every: int = 0,
    snapshot_hook=None,
    flux_planes: dict | None = None,
    config_hash: str | None = None,
) -> tuple[FlowState, dict]:
    """Advance n_steps and collect the run manifest.

    driver None means homogeneous Dirichlet (no inflow); ramp_steps scales
    the inlet linearly over the first steps; snapshot_hook(state, label) is
    invoked every snapshot_every steps and at the end.  flux_planes maps a
    label to a face-plane id whose volumetric flux is recorded per step.

    The manifest has two sections: 'deterministic' (identical across repeat
    runs of the same configuration) and 'timing' (wall-clock, excluded from
    reproducibility comparisons).
    """
    if n_steps < 0:
        raise SolverError(f"n_steps must be non-negative, got {n_steps}")
    if state is None:
        state = solver.zero_state()
    mesh = solver.mesh
    flux_w = {}
    for label, plane in (flux_planes or {}).items():
        flux_w[label] = face_flux_weights(mesh, plane)

    hist: dict = {
        "div_ratio": [], "cfl": [], "kinetic_energy": [],
        "pressure_iterations": [], "tentative_iterations": [],
    }
    if solver.coupling is not None:
        hist["noslip_after_correction"] = []
        hist["noslip_final"] = []
        hist["div_ratio_final"] = []
    for label in flux_w:
        hist[f"flux_{label}"] = []
    snapshots = []
    t_begin = time.perf_counter()
    step_times = []

    zeros_bc = np.zeros((mesh.n_nodes, 3))
    for i in range(n_steps):
        t_new = state.t + solver.dt
        if driver is not None:
            bc = driver.bcs_at(t_new)
            u_bc = zeros_bc.copy()
            u_bc[bc.inlet_nodes] = bc.inlet_values
            if ramp_steps > 0:
                u_bc *= min(1.0, (state.step_index + 1) / ramp_steps)
        else:
            u_bc = zeros_bc
        t0 = time.perf_counter()
        state, diag = solver.step(state, u_bc)
        step_times.append(time.perf_counter() - t0)

        for key in ("div_ratio", "cfl", "pressure_iterations",
                    "tentative_iterations", "noslip_after_correction",
                    "noslip_final", "div_ratio_final"):
            if key in hist and key in diag:
                hist[key].append(diag[key])
        hist["kinetic_energy"].append(solver.kinetic_energy(state.u))
        for label, (w, axis, sign) in flux_w.items():
            hist[f"flux_{label}"].append(float(sign * (w @ state.u[:, axis])))

        if snapshot_every > 0 and state.step_index % snapshot_every == 0:
            entry = {"step": state.step_index, "t": state.t,
                     "sha256": _hash_state(state)}
            if snapshot_hook is not None:
                entry["path"] = snapshot_hook(state, f"{state.step_index:06d}")
            snapshots.append(entry)

    final_entry = {"step": state.step_index, "t": state.t,
                   "sha256": _hash_state(state)}
    if snapshot_hook is not None:
        final_entry["path"] = snapshot_hook(state, "final")
    snapshots.append(final_entry)

    manifest = {
        "deterministic": {
            "config_hash": config_hash,
            "n_steps": n_steps,
            "dt": solver.dt,
            "final_time": state.t,
            "final_state_sha256": final_entry["sha256"],
            "history": hist,
            "snapshots": snapshots,
        },
        "timing": {
            "wall_total_s": time.perf_counter() - t_begin,
            "wall_per_step_s": step_times,
        },
    }
    return state, manifest


def write_manifest(manifest: dict, path) -> None:
    """Write the deterministic section to path and timings alongside it.

    Splitting keeps the manifest file byte-identical across repeat runs while
    still recording wall-clock data (in '<path stem>.timing.json').
    """
    path = str(path)
    det = dict(manifest["deterministic"])
    stem = path[:-5] if path.endswith(".json") else path
    timing_path = stem + ".timing.json"
    det["timing_file"] = timing_path.rsplit("/", 1)[-1]
    with open(path, "w") as fh:
        json.dump(det, fh, indent=1, sort_keys=True)
        fh.write("\n")
    with open(timing_path, "w") as fh:
        json.dump(manifest["timing"], fh, indent=1, sort_keys=True)
        fh.write("\n")


def steady_stats(manifest: dict, last: int = 50) -> dict:
    """Convenience summary of the tail of a run's histories."""
    h = manifest["deterministic"]["history"]
    out = {}
    for key, vals in h.items():
        if not vals:
            continue
        tail = np.asarray(vals[-last:], dtype=np.float64)
        if tail.ndim > 1:
            tail = tail.ravel()
        out[key] = {"mean": float(tail.mean()), "max": float(tail.max())}
    return out
