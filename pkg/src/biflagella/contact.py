"""Penalty contact between rod edges.

The energy of an edge pair depends only on the minimal distance D between
the two segments:

    E(D) = (2r + delta - D)^3 / (6 delta^2)   for D < 2r + delta, else 0,

and the contact force is ``-k grad E``. Gradients and Hessians are taken
through the closest-point problem, including the clamped cases.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

_EPS = 1e-14


@dataclass(frozen=True)
class ContactParams:
    stiffness: float
    tolerance: float
    radius: float
    cutoff: float | None = None

    @property
    def reach(self) -> float:
        return 2.0 * self.radius + self.tolerance

    @property
    def candidate_cutoff(self) -> float:
        return self.reach if self.cutoff is None else max(self.cutoff, self.reach)


def _dot(a, b):
    return np.einsum("...i,...i->...", a, b)


def min_distance(a0, a1, b0, b1):
    """Minimal distance between segments a0-a1 and b0-b1 (vectorized over leading axes).

    Returns (D, s, t) with closest points a0 + s (a1 - a0) and b0 + t (b1 - b0).
    """
    a0, a1, b0, b1 = (np.asarray(v, dtype=float) for v in (a0, a1, b0, b1))
    d1, d2, r = a1 - a0, b1 - b0, a0 - b0
    a, e, f = _dot(d1, d1), _dot(d2, d2), _dot(d2, r)
    c, b = _dot(d1, r), _dot(d1, d2)
    scale = np.maximum(np.maximum(a, e), 1e-300)
    a_deg = a <= _EPS * scale
    e_deg = e <= _EPS * scale
    denom = a * e - b * b
    with np.errstate(divide="ignore", invalid="ignore"):
        s = np.where(denom > 1e-12 * a * e, np.clip((b * f - c * e) / denom, 0.0, 1.0), 0.0)
        t = (b * s + f) / e
        s = np.where(t < 0.0, np.clip(-c / a, 0.0, 1.0), s)
        s = np.where(t > 1.0, np.clip((b - c) / a, 0.0, 1.0), s)
        t = np.clip(t, 0.0, 1.0)
        # degenerate (point-like) segments
        t = np.where(a_deg, np.clip(f / e, 0.0, 1.0), t)
        s = np.where(a_deg, 0.0, s)
        s = np.where(e_deg & ~a_deg, np.clip(-c / a, 0.0, 1.0), s)
        t = np.where(e_deg, 0.0, t)
    s = np.nan_to_num(s)
    t = np.nan_to_num(t)
    dvec = a0 + s[..., None] * d1 - b0 - t[..., None] * d2
    return np.linalg.norm(dvec, axis=-1), s, t


def contact_energy(D, params: ContactParams, derivatives: int = 0):
    """Per-pair energy (without the stiffness factor) and optionally E', E''."""
    D = np.asarray(D, dtype=float)
    gap = np.maximum(params.reach - D, 0.0)
    d2 = params.tolerance**2
    E = gap**3 / (6.0 * d2)
    if derivatives == 0:
        return E
    return E, -gap**2 / (2.0 * d2), gap / d2


def distance_derivatives(a0, a1, b0, b1, hessian=True):
    """Distance, (P, 12) gradient and (P, 12, 12) Hessian for segment pairs."""
    D, s, t = min_distance(a0, a1, b0, b1)
    P = len(D)
    d1, d2 = a1 - a0, b1 - b0
    dvec = a0 + s[:, None] * d1 - b0 - t[:, None] * d2
    w = np.stack([1.0 - s, s, -(1.0 - t), -t], axis=1)           # (P, 4)
    n = dvec / D[:, None]
    grad = (w[:, :, None] * n[:, None, :]).reshape(P, 12)
    if not hessian:
        return D, grad, None
    eye = np.eye(3)
    fxx = np.einsum("pi,pj,kl->pikjl", w, w, eye).reshape(P, 12, 12)
    zero = np.zeros_like(dvec)
    fxs = np.concatenate([-dvec, dvec, zero, zero], axis=1) \
        + (w[:, :, None] * d1[:, None, :]).reshape(P, 12)
    fxt = np.concatenate([zero, zero, dvec, -dvec], axis=1) \
        - (w[:, :, None] * d2[:, None, :]).reshape(P, 12)
    fss, ftt, fst = _dot(d1, d1), _dot(d2, d2), -_dot(d1, d2)
    tol = 1e-12
    s_free = (s > tol) & (s < 1.0 - tol)
    t_free = (t > tol) & (t < 1.0 - tol)
    det = fss * ftt - fst**2
    both = s_free & t_free & (det > 1e-10 * fss * ftt)
    only_s = s_free & ~both & ~t_free
    only_t = t_free & ~both
    Hf = fxx.copy()
    if np.any(both):
        k = np.flatnonzero(both)
        inv = np.empty((len(k), 2, 2))
        inv[:, 0, 0], inv[:, 1, 1] = ftt[k], fss[k]
        inv[:, 0, 1] = inv[:, 1, 0] = -fst[k]
        inv /= det[k][:, None, None]
        G = np.stack([fxs[k], fxt[k]], axis=2)                    # (p, 12, 2)
        Hf[k] -= np.einsum("pia,pab,pjb->pij", G, inv, G)
    for mask, g, h in ((only_s, fxs, fss), (only_t, fxt, ftt)):
        if np.any(mask):
            k = np.flatnonzero(mask)
            Hf[k] -= g[k][:, :, None] * g[k][:, None, :] / h[k][:, None, None]
    gf = grad * D[:, None]
    hess = Hf / D[:, None, None] - gf[:, :, None] * gf[:, None, :] / (D**3)[:, None, None]
    return D, grad, hess


@dataclass
class ContactReport:
    energy: float
    gradient: np.ndarray          # over the DOF vector, already scaled by k
    hessian: sp.csr_matrix | None
    pairs: np.ndarray             # (P, 2) active edge pairs
    distances: np.ndarray
    min_distance: float


class ContactModel:
    """Broad and narrow phase for the robot's contact-eligible edge pairs."""

    def __init__(self, robot, params: ContactParams, segment_length: float):
        self.robot = robot
        self.params = params
        N = robot.N
        edges = robot.elastic_edges
        flag = np.where(edges < N, 0, 1)
        pres = np.zeros(robot.n_nodes, dtype=bool)
        pres[robot.prescribed_nodes] = True
        both_fixed = pres[robot.edges[edges]].all(axis=1)
        # neighbours along the same flagellum closer than this touch at rest
        self.min_gap = max(3, int(math.ceil(params.reach / segment_length)) + 1)
        ii, jj = np.triu_indices(len(edges), k=1)
        same = flag[ii] == flag[jj]
        keep = ~(same & (np.abs(edges[ii] - edges[jj]) < self.min_gap))
        keep &= ~(both_fixed[ii] & both_fixed[jj])
        self.cand = np.stack([edges[ii[keep]], edges[jj[keep]]], axis=1)

    def broad_phase(self, x) -> np.ndarray:
        e = self.robot.edges
        lo = np.minimum(x[e[:, 0]], x[e[:, 1]])
        hi = np.maximum(x[e[:, 0]], x[e[:, 1]])
        c = self.params.candidate_cutoff
        i, j = self.cand[:, 0], self.cand[:, 1]
        hit = np.all((lo[i] - c <= hi[j]) & (lo[j] - c <= hi[i]), axis=1)
        return self.cand[hit]

    def evaluate(self, x, stiffness=None, hessian=True) -> ContactReport:
        r = self.robot
        k = self.params.stiffness if stiffness is None else stiffness
        grad = np.zeros(r.n_dof)
        pairs = self.broad_phase(x)
        if len(pairs) == 0:
            return ContactReport(0.0, grad, None, pairs, np.zeros(0), math.inf)
        e = r.edges
        a0, a1 = x[e[pairs[:, 0], 0]], x[e[pairs[:, 0], 1]]
        b0, b1 = x[e[pairs[:, 1], 0]], x[e[pairs[:, 1], 1]]
        D, _, _ = min_distance(a0, a1, b0, b1)
        dmin = float(D.min())
        act = D < self.params.reach
        if not np.any(act):
            return ContactReport(0.0, grad, None, pairs[act], D[act], dmin)
        pairs, D = pairs[act], D[act]
        D, gD, HD = distance_derivatives(a0[act], a1[act], b0[act], b1[act], hessian)
        E, dE, ddE = contact_energy(D, self.params, 2)
        dofs = np.concatenate([r.node_dof[e[pairs[:, 0], 0]], r.node_dof[e[pairs[:, 0], 1]],
                               r.node_dof[e[pairs[:, 1], 0]], r.node_dof[e[pairs[:, 1], 1]]], axis=1)
        np.add.at(grad, dofs, k * dE[:, None] * gD)
        H = None
        if hessian:
            Hp = k * (ddE[:, None, None] * gD[:, :, None] * gD[:, None, :] + dE[:, None, None] * HD)
            rows = np.repeat(dofs, 12, axis=1).ravel()
            cols = np.tile(dofs, (1, 12)).ravel()
            H = sp.csr_matrix((Hp.ravel(), (rows, cols)), shape=(r.n_dof, r.n_dof))
        return ContactReport(float(k * E.sum()), grad, H, pairs, D, dmin)

    def node_forces(self, x, stiffness=None) -> np.ndarray:
        """Contact force on every node, shape (n_nodes, 3)."""
        rep = self.evaluate(x, stiffness, hessian=False)
        return -rep.gradient[self.robot.node_dof]


def contact_forces(model: ContactModel, x, stiffness=None) -> np.ndarray:
    return model.node_forces(x, stiffness)
