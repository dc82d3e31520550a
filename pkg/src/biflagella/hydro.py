"""Regularized Stokeslet segments: mobility matrix, drag forces and resultants.

A node force F_j is spread as a line density F_j / l_j (l_j the node's Voronoi
length) and interpolated linearly along each straight segment. The regularized
Stokeslet with blob size eps,

    8 pi mu u(y) = f (1/R + eps^2/R^3) + (f.r) r / R^3,   R^2 = |r|^2 + eps^2,

is integrated along each segment in closed form. Nodes that belong to no segment
(the joint node) act as single regularized point forces.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla
from scipy.linalg import lapack


class MobilitySolveError(np.linalg.LinAlgError):
    pass


def stokeslet_blocks(y, x, eps):
    """3x3 regularized Stokeslet blocks for targets ``y`` (M,3) and sources ``x`` (P,3).

    Returns (M, P, 3, 3) without the 1/(8 pi mu) factor.
    """
    r = y[:, None, :] - x[None, :, :]
    R2 = np.einsum("mpi,mpi->mp", r, r) + eps**2
    R = np.sqrt(R2)
    iso = 1.0 / R + eps**2 / (R * R2)
    out = r[..., :, None] * r[..., None, :] / (R * R2)[..., None, None]
    out += iso[..., None, None] * np.eye(3)
    return out


def _segment_moments(r0, v, eps):
    """Integrals I[n, k] = int_0^1 a^n R^-k da, n = 0..3, k in (1, 3).

    ``r0`` and ``v`` have shape (..., 3); returns (I1, I3) each of shape (4, ...).
    """
    a = np.einsum("...i,...i->...", v, v)
    rv = np.einsum("...i,...i->...", r0, v)
    beta = rv / a
    c = np.einsum("...i,...i->...", r0, r0) + eps**2 - rv * beta
    # guard against round-off; c >= eps^2 analytically
    c = np.maximum(c, eps**2 * (1.0 - 1e-12))
    sa = np.sqrt(a)
    sc = np.sqrt(c)

    def prim(s):
        R = np.sqrt(a * s * s + c)
        j01 = np.arcsinh(sa * s / sc) / sa
        j11 = R / a
        j21 = s * R / (2.0 * a) - c / (2.0 * a) * j01
        j31 = R**3 / (3.0 * a * a) - c * R / (a * a)
        j03 = s / (c * R)
        j13 = -1.0 / (a * R)
        j23 = (j01 - s / R) / a
        j33 = (R + c / R) / (a * a)
        return (j01, j11, j21, j31), (j03, j13, j23, j33)

    lo1, lo3 = prim(-beta)
    hi1, hi3 = prim(1.0 - beta)
    out = []
    for lo, hi in ((lo1, hi1), (lo3, hi3)):
        J0, J1, J2, J3 = (h - l for h, l in zip(hi, lo))
        b = beta
        out.append(np.stack([J0,
                             J1 + b * J0,
                             J2 + 2 * b * J1 + b * b * J0,
                             J3 + 3 * b * J2 + 3 * b * b * J1 + b**3 * J0]))
    return out[0], out[1]


def segment_blocks(y, xa, xb, eps):
    """Velocity blocks (A1, A2) at targets ``y`` for linear force density on segments.

    With density ``(1-a) ga + a gb`` on segment ``xa -> xb`` the velocity is
    ``(A1 ga + A2 gb) / (8 pi mu)``. Shapes: y (M,3), xa/xb (S,3); returns (M,S,3,3).
    """
    r0 = y[:, None, :] - xa[None, :, :]
    v = np.broadcast_to((xb - xa)[None, :, :], r0.shape)
    L = np.linalg.norm(xb - xa, axis=1)[None, :]
    I1, I3 = _segment_moments(r0, v, eps)
    e2 = eps**2
    eye = np.eye(3)
    rr = r0[..., :, None] * r0[..., None, :]
    rv = r0[..., :, None] * v[..., None, :]
    rv = rv + np.swapaxes(rv, -1, -2)
    vv = v[..., :, None] * v[..., None, :]

    def block(iso, c_rr, c_rv, c_vv):
        return L[..., None, None] * (iso[..., None, None] * eye + c_rr[..., None, None] * rr
                                     - c_rv[..., None, None] * rv + c_vv[..., None, None] * vv)

    A1 = block(I1[0] - I1[1] + e2 * (I3[0] - I3[1]), I3[0] - I3[1], I3[1] - I3[2], I3[2] - I3[3])
    A2 = block(I1[1] + e2 * I3[1], I3[1], I3[2], I3[3])
    return A1, A2


@dataclass
class MobilityMatrix:
    """Symmetric mobility ``U = A F`` for all nodes (velocities and forces flattened)."""

    A: np.ndarray
    epsilon: float
    viscosity: float
    _chol: tuple | None = None

    def factor(self):
        if self._chol is None:
            try:
                c, low = sla.cho_factor(self.A, lower=False, check_finite=False)
            except np.linalg.LinAlgError as exc:
                raise MobilitySolveError("mobility matrix is not positive-definite") from exc
            anorm = np.abs(self.A).sum(axis=0).max()
            rcond, info = lapack.dpocon(c, anorm)
            if info != 0 or rcond < 1e-12:
                raise MobilitySolveError(f"mobility matrix ill-conditioned (rcond={rcond:.3g})")
            self._chol = (c, low)
        return self._chol

    def solve(self, U) -> np.ndarray:
        return sla.cho_solve(self.factor(), np.asarray(U, dtype=float).ravel(), check_finite=False)


def assemble_mobility(X, eps: float, mu: float, segments=None, lengths=None,
                      symmetrize: bool = True) -> MobilityMatrix:
    """Assemble the mobility matrix for node positions ``X``.

    ``segments`` is an (S, 2) array of node index pairs along which forces are
    spread; ``lengths`` are the per-node lengths converting node forces to line
    densities. Nodes not on any segment are regularized point forces.
    """
    X = np.asarray(X, dtype=float)
    n = len(X)
    diff = X[:, None, :] - X[None, :, :]
    d2 = np.einsum("ijk,ijk->ij", diff, diff)
    np.fill_diagonal(d2, np.inf)
    if d2.min() < (eps / 100.0) ** 2:
        raise ValueError("coincident nodes in mobility assembly")

    K = np.zeros((n, n, 3, 3))
    if segments is None or len(segments) == 0:
        segments = np.zeros((0, 2), dtype=np.int64)
    segments = np.asarray(segments, dtype=np.int64)
    on_seg = np.zeros(n, dtype=bool)
    on_seg[segments.ravel()] = True
    if len(segments):
        if lengths is None:
            raise ValueError("segment lengths required")
        lengths = np.asarray(lengths, dtype=float)
        A1, A2 = segment_blocks(X, X[segments[:, 0]], X[segments[:, 1]], eps)
        A1 = A1 / lengths[segments[:, 0]][None, :, None, None]
        A2 = A2 / lengths[segments[:, 1]][None, :, None, None]
        # scatter segment contributions onto their end nodes
        for col, blk in ((segments[:, 0], A1), (segments[:, 1], A2)):
            np.add.at(K, (slice(None), col), blk)
    pts = np.flatnonzero(~on_seg)
    if len(pts):
        K[:, pts] += stokeslet_blocks(X, X[pts], eps)
    K /= 8.0 * np.pi * mu
    A = K.transpose(0, 2, 1, 3).reshape(3 * n, 3 * n)
    if symmetrize:
        A = 0.5 * (A + A.T)
    return MobilityMatrix(A=A, epsilon=eps, viscosity=mu)


@dataclass
class HydroForces:
    node_forces: np.ndarray   # (n, 3) force exerted by each node on the fluid
    F1: np.ndarray
    F2: np.ndarray


def solve_forces(mob: MobilityMatrix, U) -> np.ndarray:
    """Node forces on the fluid, shape (n, 3), for node velocities ``U``."""
    U = np.asarray(U, dtype=float)
    return mob.solve(U.ravel()).reshape(-1, 3)


def flagellum_resultants(node_forces, N: int):
    """Total fluid force on each flagellum (negated sums of node forces)."""
    f = np.asarray(node_forces)
    return -f[:N].sum(axis=0), -f[N + 1:2 * N + 1].sum(axis=0)


def hydro_forces(mob: MobilityMatrix, U, N: int) -> HydroForces:
    f = solve_forces(mob, U)
    F1, F2 = flagellum_resultants(f, N)
    return HydroForces(f, F1, F2)
