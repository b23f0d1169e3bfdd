"""Krylov solvers with fixed, reproducible iteration behavior.

scipy's iterative solvers change stopping rules between releases, which makes
residual histories (recorded in run manifests) unstable.  These
implementations freeze the classics: preconditioned CG for SPD systems and
preconditioned BiCGStab for the mildly nonsymmetric ones, both stopping on
||r||_2 <= max(rtol * ||b||_2, atol).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import SolverError


@dataclass
class SolveReport:
    converged: bool
    iterations: int
    residual: float
    target: float

    def require(self, label: str) -> "SolveReport":
        if not self.converged:
            raise SolverError(
                f"{label}: no convergence in {self.iterations} iterations "
                f"(residual {self.residual:.3e}, target {self.target:.3e})"
            )
        return self


class IdentityPreconditioner:
    def __call__(self, r: np.ndarray) -> np.ndarray:
        return r


class JacobiPreconditioner:
    """Diagonal scaling; zero diagonal entries pass through unscaled."""

    def __init__(self, diagonal: np.ndarray):
        d = np.asarray(diagonal, dtype=np.float64)
        inv = np.ones_like(d)
        nz = d != 0.0
        inv[nz] = 1.0 / d[nz]
        self.inv_diag = inv

    def __call__(self, r: np.ndarray) -> np.ndarray:
        return self.inv_diag * r


class AMGPreconditioner:
    """Smoothed-aggregation V-cycle wrapper around pyamg (optional dep).

    pyamg's setup draws a random start vector for its spectral-radius
    estimate; the hierarchy is built under a fixed seed (global RNG state
    saved and restored) so repeat runs produce identical iterates.
    """

    def __init__(self, matrix_csr):
        try:
            import pyamg
        except ImportError as exc:  # pragma: no cover - pyamg is installed in CI
            raise SolverError(
                "preconditioner 'amg' requires the pyamg package"
            ) from exc
        rng_state = np.random.get_state()
        try:
            np.random.seed(1742)
            self._ml = pyamg.smoothed_aggregation_solver(matrix_csr.tocsr())
        finally:
            np.random.set_state(rng_state)
        self._M = self._ml.aspreconditioner(cycle="V")

    def __call__(self, r: np.ndarray) -> np.ndarray:
        return np.asarray(self._M @ r)


def make_preconditioner(kind: str, matrix_csr):
    kind = kind.lower()
    if kind in ("none", "identity"):
        return IdentityPreconditioner()
    if kind == "jacobi":
        return JacobiPreconditioner(matrix_csr.diagonal())
    if kind == "amg":
        return AMGPreconditioner(matrix_csr)
    raise SolverError(f"unknown preconditioner {kind!r} (none|jacobi|amg)")


def _as_operator(A):
    if callable(A) and not hasattr(A, "dot"):
        return A
    return lambda x: A @ x


def cg(
    A,
    b: np.ndarray,
    x0: np.ndarray | None = None,
    rtol: float = 1e-8,
    atol: float = 1e-12,
    maxiter: int = 2000,
    M=None,
    history: list | None = None,
) -> tuple[np.ndarray, SolveReport]:
    """Preconditioned conjugate gradients for SPD A (matrix or callable)."""
    matvec = _as_operator(A)
    precond = M if M is not None else IdentityPreconditioner()
    b = np.asarray(b, dtype=np.float64)
    x = np.zeros_like(b) if x0 is None else np.array(x0, dtype=np.float64)
    r = b - matvec(x)
    target = max(rtol * float(np.linalg.norm(b)), atol)
    res = float(np.linalg.norm(r))
    if history is not None:
        history.append(res)
    if res <= target:
        return x, SolveReport(True, 0, res, target)
    z = precond(r)
    p = z.copy()
    rz = float(r @ z)
    for it in range(1, maxiter + 1):
        Ap = matvec(p)
        pAp = float(p @ Ap)
        if pAp <= 0.0:
            raise SolverError(
                f"cg: operator is not positive definite (p'Ap={pAp:.3e} at "
                f"iteration {it})"
            )
        alpha = rz / pAp
        x += alpha * p
        r -= alpha * Ap
        res = float(np.linalg.norm(r))
        if history is not None:
            history.append(res)
        if res <= target:
            return x, SolveReport(True, it, res, target)
        z = precond(r)
        rz_new = float(r @ z)
        p = z + (rz_new / rz) * p
        rz = rz_new
    return x, SolveReport(False, maxiter, res, target)


def bicgstab(
    A,
    b: np.ndarray,
    x0: np.ndarray | None = None,
    rtol: float = 1e-8,
    atol: float = 1e-12,
    maxiter: int = 2000,
    M=None,
    history: list | None = None,
) -> tuple[np.ndarray, SolveReport]:
    """Preconditioned BiCGStab (van der Vorst) for general square A."""
    matvec = _as_operator(A)
    precond = M if M is not None else IdentityPreconditioner()
    b = np.asarray(b, dtype=np.float64)
    x = np.zeros_like(b) if x0 is None else np.array(x0, dtype=np.float64)
    r = b - matvec(x)
    target = max(rtol * float(np.linalg.norm(b)), atol)
    res = float(np.linalg.norm(r))
    if history is not None:
        history.append(res)
    if res <= target:
        return x, SolveReport(True, 0, res, target)
    r_hat = r.copy()
    rho_old = 1.0
    alpha = 1.0
    omega = 1.0
    v = np.zeros_like(b)
    p = np.zeros_like(b)
    tiny = np.finfo(np.float64).tiny
    for it in range(1, maxiter + 1):
        rho = float(r_hat @ r)
        if abs(rho) < tiny:
            raise SolverError(f"bicgstab: breakdown (rho={rho:.3e}) at iteration {it}")
        beta = (rho / rho_old) * (alpha / omega)
        p = r + beta * (p - omega * v)
        p_hat = precond(p)
        v = matvec(p_hat)
        denom = float(r_hat @ v)
        if abs(denom) < tiny:
            raise SolverError(f"bicgstab: breakdown (r_hat'v=0) at iteration {it}")
        alpha = rho / denom
        s = r - alpha * v
        res = float(np.linalg.norm(s))
        if res <= target:
            x += alpha * p_hat
            if history is not None:
                history.append(res)
            return x, SolveReport(True, it, res, target)
        s_hat = precond(s)
        t = matvec(s_hat)
        tt = float(t @ t)
        if tt < tiny:
            raise SolverError(f"bicgstab: breakdown (t=0) at iteration {it}")
        omega = float(t @ s) / tt
        if abs(omega) < tiny:
            raise SolverError(f"bicgstab: stagnation (omega=0) at iteration {it}")
        x += alpha * p_hat + omega * s_hat
        r = s - omega * t
        res = float(np.linalg.norm(r))
        if history is not None:
            history.append(res)
        if res <= target:
            return x, SolveReport(True, it, res, target)
        rho_old = rho
    return x, SolveReport(False, maxiter, res, target)
