"""Stretching, bending and twisting energies with analytic gradients and Hessians.

Per-element kernels are vectorized over elements. Bend/twist elements use the
local DOF order ``[x_{i-1}, x_i, x_{i+1}, theta^{i-1}, theta^i]``; stretch
elements use ``[x_a, x_b]``. The derivatives treat the reference frames as
transported in time from the configuration where they were last updated, and
are exact at that configuration.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from . import frames as fr
from .config import SimConfig, derived_stiffnesses

_I3 = np.eye(3)


def _outer(a, b):
    return a[:, :, None] * b[:, None, :]


def _skew(v):
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1], out[..., 0, 2] = -v[..., 2], v[..., 1]
    out[..., 1, 0], out[..., 1, 2] = v[..., 2], -v[..., 0]
    out[..., 2, 0], out[..., 2, 1] = -v[..., 1], v[..., 0]
    return out


def _rowdot(a, b):
    return np.einsum("si,si->s", a, b)


# --- stretch -------------------------------------------------------------

def stretch_terms(xa, xb, rest, EA, derivatives=2):
    """Energy 0.5*EA*strain^2*rest per edge, with (S, 6) gradients and (S, 6, 6) Hessians."""
    e = xb - xa
    ln = np.linalg.norm(e, axis=1)
    if np.any(ln <= 0.0):
        raise ValueError("zero-length edge")
    strain = ln / rest - 1.0
    energy = 0.5 * EA * strain**2 * rest
    if derivatives == 0:
        return energy, None, None
    t = e / ln[:, None]
    ge = (EA * strain)[:, None] * t
    grad = np.concatenate([-ge, ge], axis=1)
    if derivatives == 1:
        return energy, grad, None
    tt = _outer(t, t)
    He = (EA / rest)[:, None, None] * tt + (EA * strain / ln)[:, None, None] * (_I3 - tt)
    hess = np.empty((len(e), 6, 6))
    hess[:, :3, :3] = He
    hess[:, 3:, 3:] = He
    hess[:, :3, 3:] = -He
    hess[:, 3:, :3] = -He
    return energy, grad, hess


# --- bend and twist ------------------------------------------------------

@dataclass
class BendTwist:
    kappa1: np.ndarray
    kappa2: np.ndarray
    twist: np.ndarray
    E_bend: np.ndarray
    E_twist: np.ndarray
    g_bend: np.ndarray | None = None
    g_twist: np.ndarray | None = None
    H_bend: np.ndarray | None = None
    H_twist: np.ndarray | None = None


def _assemble_position_blocks(out, De2, DeDf, DfDe, Df2):
    out[:, 0:3, 0:3] = De2
    out[:, 0:3, 3:6] = -De2 + DeDf
    out[:, 0:3, 6:9] = -DeDf
    out[:, 3:6, 0:3] = -De2 + DfDe
    out[:, 3:6, 3:6] = De2 - DeDf - DfDe + Df2
    out[:, 3:6, 6:9] = DeDf - Df2
    out[:, 6:9, 0:3] = -DfDe
    out[:, 6:9, 3:6] = DfDe - Df2
    out[:, 6:9, 6:9] = Df2


def _assemble_mixed(out, col, De, Df):
    blocks = (-De, De - Df, Df)
    for k, b in enumerate(blocks):
        out[:, 3 * k:3 * k + 3, col] = b
        out[:, col, 3 * k:3 * k + 3] = b


def bend_twist_terms(x0, x1, x2, m1e, m2e, m1f, m2f, theta_e, theta_f, ref_twist,
                     kappa_bar, twist_bar, voronoi, EI, GJ, derivatives=2) -> BendTwist:
    """Bending and twisting energy of interior nodes.

    ``kappa1 = 0.5*(m2e+m2f).kb`` and ``kappa2 = 0.5*(m1e+m1f).kb``; the twist is
    ``theta_f - theta_e + ref_twist``.
    """
    S = len(x0)
    ee, ef = x1 - x0, x2 - x1
    ne, nf = np.linalg.norm(ee, axis=1), np.linalg.norm(ef, axis=1)
    te, tf = ee / ne[:, None], ef / nf[:, None]
    chi = 1.0 + _rowdot(te, tf)
    if np.any(chi <= 1e-14):
        raise fr.DegenerateKinkError("antiparallel adjacent edges")
    kb = 2.0 * fr.cross(te, tf) / chi[:, None]
    tt = (te + tf) / chi[:, None]
    td1 = (m1e + m1f) / chi[:, None]
    td2 = (m2e + m2f) / chi[:, None]

    k1 = 0.5 * _rowdot(kb, m2e + m2f)
    # kp is the opposite-sign second curvature; its formulas below follow the
    # usual derivation and the result is negated once at the end
    kp = -0.5 * _rowdot(kb, m1e + m1f)
    k2 = -kp
    twist = theta_f - theta_e + ref_twist

    dk1 = k1 - kappa_bar[:, 0]
    dkp = kp + kappa_bar[:, 1]
    dtw = twist - twist_bar
    cb = EI / voronoi
    ct = GJ / voronoi
    Eb = 0.5 * cb * (dk1**2 + dkp**2)
    Et = 0.5 * ct * dtw**2
    res = BendTwist(k1, k2, twist, Eb, Et)
    if derivatives == 0:
        return res

    inv_e, inv_f = 1.0 / ne, 1.0 / nf
    Dk1De = inv_e[:, None] * (-k1[:, None] * tt + fr.cross(tf, td2))
    Dk1Df = inv_f[:, None] * (-k1[:, None] * tt - fr.cross(te, td2))
    DkpDe = inv_e[:, None] * (-kp[:, None] * tt - fr.cross(tf, td1))
    DkpDf = inv_f[:, None] * (-kp[:, None] * tt + fr.cross(te, td1))

    gk1 = np.empty((S, 11))
    gkp = np.empty((S, 11))
    for g, De, Df in ((gk1, Dk1De, Dk1Df), (gkp, DkpDe, DkpDf)):
        g[:, 0:3] = -De
        g[:, 3:6] = De - Df
        g[:, 6:9] = Df
    gk1[:, 9] = -0.5 * _rowdot(kb, m1e)
    gk1[:, 10] = -0.5 * _rowdot(kb, m1f)
    gkp[:, 9] = -0.5 * _rowdot(kb, m2e)
    gkp[:, 10] = -0.5 * _rowdot(kb, m2f)

    gtw = np.zeros((S, 11))
    gtw[:, 0:3] = -0.5 * inv_e[:, None] * kb
    gtw[:, 6:9] = 0.5 * inv_f[:, None] * kb
    gtw[:, 3:6] = -(gtw[:, 0:3] + gtw[:, 6:9])
    gtw[:, 9] = -1.0
    gtw[:, 10] = 1.0

    res.g_bend = cb[:, None] * (dk1[:, None] * gk1 + dkp[:, None] * gkp)
    res.g_twist = (ct * dtw)[:, None] * gtw
    if derivatives == 1:
        return res

    e2, f2, ef_ = (inv_e**2)[:, None, None], (inv_f**2)[:, None, None], (inv_e * inv_f)[:, None, None]
    c3 = chi[:, None, None]
    k1_3, kp_3 = k1[:, None, None], kp[:, None, None]
    tt_tt = _outer(tt, tt)
    Pe = _I3 - _outer(te, te)
    Pf = _I3 - _outer(tf, tf)
    te_tf = _outer(te, tf)

    def Ge(m):
        # d(kb.m)/de for a director m carried along with edge e or f
        kbm = _rowdot(kb, m)[:, None]
        v = 2.0 * fr.cross(tf, m) - kbm * tf
        return (v - te * _rowdot(te, v)[:, None]) * (inv_e / chi)[:, None]

    def Gf(m):
        kbm = _rowdot(kb, m)[:, None]
        v = 2.0 * fr.cross(m, te) - kbm * te
        return (v - tf * _rowdot(tf, v)[:, None]) * (inv_f / chi)[:, None]

    a = fr.cross(tf, td2)
    b = fr.cross(te, td2)
    H1 = np.zeros((S, 11, 11))
    De2 = e2 * (2 * k1_3 * tt_tt - _outer(a, tt) - _outer(tt, a)) - k1_3 / c3 * e2 * Pe \
        + 0.5 * e2 * _outer(kb, m2e)
    Df2 = f2 * (2 * k1_3 * tt_tt + _outer(b, tt) + _outer(tt, b)) - k1_3 / c3 * f2 * Pf \
        + 0.5 * f2 * _outer(kb, m2f)
    DeDf = -k1_3 / c3 * ef_ * (_I3 + te_tf) \
        + ef_ * (2 * k1_3 * tt_tt - _outer(a, tt) + _outer(tt, b) - _skew(td2))
    _assemble_position_blocks(H1, De2, DeDf, DeDf.transpose(0, 2, 1), Df2)
    H1[:, 9, 9] = -0.5 * _rowdot(kb, m2e)
    H1[:, 10, 10] = -0.5 * _rowdot(kb, m2f)
    _assemble_mixed(H1, 9, -0.5 * Ge(m1e), -0.5 * Gf(m1e))
    _assemble_mixed(H1, 10, -0.5 * Ge(m1f), -0.5 * Gf(m1f))

    a = fr.cross(tf, td1)
    b = fr.cross(te, td1)
    Hp = np.zeros((S, 11, 11))
    De2 = e2 * (2 * kp_3 * tt_tt + _outer(a, tt) + _outer(tt, a)) - kp_3 / c3 * e2 * Pe \
        - 0.5 * e2 * _outer(kb, m1e)
    Df2 = f2 * (2 * kp_3 * tt_tt - _outer(b, tt) - _outer(tt, b)) - kp_3 / c3 * f2 * Pf \
        - 0.5 * f2 * _outer(kb, m1f)
    DeDf = -kp_3 / c3 * ef_ * (_I3 + te_tf) \
        + ef_ * (2 * kp_3 * tt_tt + _outer(a, tt) - _outer(tt, b) + _skew(td1))
    _assemble_position_blocks(Hp, De2, DeDf, DeDf.transpose(0, 2, 1), Df2)
    Hp[:, 9, 9] = 0.5 * _rowdot(kb, m1e)
    Hp[:, 10, 10] = 0.5 * _rowdot(kb, m1f)
    _assemble_mixed(Hp, 9, -0.5 * Ge(m2e), -0.5 * Gf(m2e))
    _assemble_mixed(Hp, 10, -0.5 * Ge(m2f), -0.5 * Gf(m2f))

    res.H_bend = cb[:, None, None] * (_outer(gk1, gk1) + _outer(gkp, gkp)
                                      + dk1[:, None, None] * H1 + dkp[:, None, None] * Hp)

    skew_e, skew_f = _skew(te), _skew(tf)
    kb_te = _outer(kb, te + tt)
    kb_tf = _outer(kb, tf + tt)
    kb_tt = _outer(kb, tt)
    D2mDe2 = -0.5 * e2 * (kb_te + (2.0 / c3) * skew_f)
    D2mDf2 = -0.5 * f2 * (kb_tf + (2.0 / c3) * skew_e)
    D2mDeDf = 0.5 * ef_ * ((2.0 / c3) * skew_e - kb_tt)
    D2mDfDe = 0.5 * ef_ * ((-2.0 / c3) * skew_f - kb_tt)
    Ht = np.zeros((S, 11, 11))
    _assemble_position_blocks(Ht, D2mDe2, D2mDeDf, D2mDfDe, D2mDf2)
    res.H_twist = ct[:, None, None] * (_outer(gtw, gtw) + dtw[:, None, None] * Ht)
    return res


# --- assembly ------------------------------------------------------------

class SparseAssembler:
    """Scatter element matrices into a fixed CSR pattern with one bincount."""

    def __init__(self, n: int, dof_blocks):
        rows, cols = [], []
        for idx in dof_blocks:
            k = idx.shape[1]
            rows.append(np.repeat(idx, k, axis=1).ravel())
            cols.append(np.tile(idx, (1, k)).ravel())
        rows = np.concatenate(rows) if rows else np.zeros(0, dtype=np.int64)
        cols = np.concatenate(cols) if cols else np.zeros(0, dtype=np.int64)
        pattern = sp.csr_matrix((np.arange(1, len(rows) + 1, dtype=float), (rows, cols)),
                                shape=(n, n))
        pattern.sum_duplicates()
        # map each raw entry to its slot in the CSR data array
        key = rows * n + cols
        slot_keys = np.repeat(np.arange(n), np.diff(pattern.indptr)) * n + pattern.indices
        self.slot = np.searchsorted(slot_keys, key)
        self.indices = pattern.indices
        self.indptr = pattern.indptr
        self.n = n

    def build(self, element_mats) -> sp.csr_matrix:
        vals = np.concatenate([m.ravel() for m in element_mats])
        data = np.bincount(self.slot, weights=vals, minlength=len(self.indices))
        return sp.csr_matrix((data, self.indices.copy(), self.indptr.copy()), shape=(self.n, self.n))


@dataclass
class EnergyReport:
    E_stretch: float
    E_bend: float
    E_twist: float
    gradient: np.ndarray | None = None
    hessian: sp.csr_matrix | None = None

    @property
    def total(self) -> float:
        return self.E_stretch + self.E_bend + self.E_twist


class ElasticModel:
    """Evaluates the elastic energy of a robot over its full DOF vector."""

    def __init__(self, robot, cfg: SimConfig):
        self.robot = robot
        self.EA, self.EI, self.GJ = derived_stiffnesses(cfg.material, cfg.helix.cross_section_radius)
        self.s_dofs = robot.stretch_dofs()
        self.b_dofs = robot.stencil_dofs()
        self.assembler = SparseAssembler(robot.n_dof, [self.s_dofs, self.b_dofs, self.b_dofs])

    def terms(self, x, theta, d1, d2, ref_twist, derivatives=2):
        r = self.robot
        e = r.edges[r.elastic_edges]
        st = stretch_terms(x[e[:, 0]], x[e[:, 1]], r.rest_length[r.elastic_edges], self.EA,
                           derivatives)
        i = r.stencil_node
        ep, en = i - 1, i
        m1, m2 = fr.material_frame(d1, d2, theta)
        bt = bend_twist_terms(x[i - 1], x[i], x[i + 1], m1[ep], m2[ep], m1[en], m2[en],
                              theta[ep], theta[en], ref_twist, r.kappa_bar, r.twist_bar,
                              r.stencil_voronoi, self.EI, self.GJ, derivatives)
        return st, bt

    def evaluate(self, x, theta, d1, d2, ref_twist, derivatives=2) -> EnergyReport:
        st, bt = self.terms(x, theta, d1, d2, ref_twist, derivatives)
        rep = EnergyReport(float(st[0].sum()), float(bt.E_bend.sum()), float(bt.E_twist.sum()))
        if derivatives >= 1:
            g = np.zeros(self.robot.n_dof)
            np.add.at(g, self.s_dofs, st[1])
            np.add.at(g, self.b_dofs, bt.g_bend + bt.g_twist)
            rep.gradient = g
        if derivatives >= 2:
            Hb = 0.5 * (bt.H_bend + bt.H_bend.transpose(0, 2, 1))
            Ht = 0.5 * (bt.H_twist + bt.H_twist.transpose(0, 2, 1))
            rep.hessian = self.assembler.build([st[2], Hb, Ht])
        return rep

    def evaluate_state(self, state, derivatives=2) -> EnergyReport:
        return self.evaluate(state.x, state.theta, state.d1, state.d2, state.ref_twist, derivatives)


def stretch_energy(model: ElasticModel, state):
    """Total stretching energy and its gradient over the DOF vector."""
    st, _ = model.terms(state.x, state.theta, state.d1, state.d2, state.ref_twist, 1)
    g = np.zeros(model.robot.n_dof)
    np.add.at(g, model.s_dofs, st[1])
    return float(st[0].sum()), g


def bend_energy(model: ElasticModel, state):
    _, bt = model.terms(state.x, state.theta, state.d1, state.d2, state.ref_twist, 1)
    g = np.zeros(model.robot.n_dof)
    np.add.at(g, model.b_dofs, bt.g_bend)
    return float(bt.E_bend.sum()), g


def twist_energy(model: ElasticModel, state):
    _, bt = model.terms(state.x, state.theta, state.d1, state.d2, state.ref_twist, 1)
    g = np.zeros(model.robot.n_dof)
    np.add.at(g, model.b_dofs, bt.g_twist)
    return float(bt.E_twist.sum()), g


def lumped_masses(robot, cfg: SimConfig) -> np.ndarray:
    """Diagonal mass per DOF: rho*A*Voronoi for nodes, rho*pi*r^4*l/2 for twists."""
    r = cfg.helix.cross_section_radius
    rho = cfg.material.density
    m = np.empty(robot.n_dof)
    node_mass = rho * np.pi * r**2 * robot.node_voronoi
    # the joint node is prescribed; give it a positive placeholder mass
    node_mass[robot.base_node] = cfg.base.mass
    m[robot.node_dof] = node_mass[:, None]
    ok = robot.edge_dof >= 0
    m[robot.edge_dof[ok]] = rho * np.pi * r**4 * robot.rest_length[ok] / 2.0
    return m


def eom_residual(q, q_prev, u_prev, dt, mass, grad_E, hess_E=None, f_ext=None, df_ext=None):
    """Implicit-Euler residual ``M(q - q_prev - dt u_prev)/dt^2 + grad E - f_ext``.

    Returns ``(residual, jacobian)``; the Jacobian is ``None`` when ``hess_E`` is.
    """
    q = np.asarray(q, dtype=float)
    if not (q.shape == q_prev.shape == u_prev.shape == mass.shape == grad_E.shape):
        raise ValueError("size mismatch in residual inputs")
    r = mass * (q - q_prev - dt * u_prev) / dt**2 + grad_E
    if f_ext is not None:
        if np.shape(f_ext) != q.shape:
            raise ValueError("size mismatch in external force")
        r = r - f_ext
    if hess_E is None:
        return r, None
    J = sp.diags(mass / dt**2) + hess_E
    if df_ext is not None:
        J = J - df_ext
    return r, sp.csr_matrix(J)
