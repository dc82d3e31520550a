"""Coupled time step: motor boundary conditions, implicit rod solve, attitude update."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import frames as fr
from .attitude import (AttitudeState, base_drag, lever_torque,
                       quat_to_euler, quat_to_matrix, righting_moment, step_attitude)
from .config import SimConfig
from .contact import ContactModel, ContactParams
from .elastic import ElasticModel, eom_residual, lumped_masses
from .hydro import assemble_mobility
from .rod import RodState, build_robot, frames_at, prescribed_configuration

MAX_STIFFNESS_FACTOR = 8.0


class StepFailure(RuntimeError):
    def __init__(self, msg, residual=math.nan):
        super().__init__(msg)
        self.residual = residual


@dataclass
class SystemState:
    rod: RodState
    attitude: AttitudeState
    alphas: np.ndarray
    t: float
    q: np.ndarray                 # DOF vector
    u: np.ndarray                 # DOF velocities
    F1: np.ndarray = field(default_factory=lambda: np.zeros(3))   # world frame
    F2: np.ndarray = field(default_factory=lambda: np.zeros(3))
    stiffness_factor: float = 1.0
    min_contact_distance: float = math.inf

    def copy(self) -> "SystemState":
        return SystemState(self.rod.copy(), self.attitude.copy(), self.alphas.copy(), self.t,
                           self.q.copy(), self.u.copy(), self.F1.copy(), self.F2.copy(),
                           self.stiffness_factor, self.min_contact_distance)


@dataclass
class NewtonResult:
    q: np.ndarray
    iterations: int
    residual: float


def newton_solve(residual, q0, tol, max_iters=30, free=None, max_cuts=10):
    """Damped Newton iteration on the entries listed in ``free``.

    ``residual(q, jacobian)`` returns ``(r, J)``; ``J`` may be dense or sparse
    and is only requested when ``jacobian`` is true. Convergence is declared
    when the infinity norm of the free residual drops below ``tol``.
    """
    q = np.array(q0, dtype=float)
    free = np.arange(q.size) if free is None else np.asarray(free)
    r, J = residual(q, True)
    norm = np.abs(r[free]).max() if free.size else 0.0
    for it in range(max_iters + 1):
        if norm < tol:
            return NewtonResult(q, it, norm)
        if it == max_iters:
            break
        if sp.issparse(J):
            Jff = J.tocsc()[free][:, free]
            dq = spla.splu(Jff.tocsc()).solve(-r[free])
        else:
            Jff = np.asarray(J)[np.ix_(free, free)]
            dq = np.linalg.solve(Jff, -r[free])
        merit = np.linalg.norm(r[free])
        step = 1.0
        for _ in range(max_cuts + 1):
            trial = q.copy()
            trial[free] += step * dq
            try:
                r_new, _ = residual(trial, False)
                new_merit = np.linalg.norm(r_new[free])
            except (fr.DegenerateKinkError, fr.DegenerateTransportError, ValueError):
                new_merit = math.inf
            if new_merit < merit:
                break
            step *= 0.5
        else:
            # no decrease within the allowed cuts; accept the smallest step
            # only if it is finite
            if not np.isfinite(new_merit):
                raise StepFailure("line search failed", norm)
        q = trial
        r, J = residual(q, True)
        norm = np.abs(r[free]).max()
    raise StepFailure(f"Newton did not converge in {max_iters} iterations", norm)


class Simulator:
    """Holds the models for one trial and advances a SystemState."""

    def __init__(self, cfg: SimConfig):
        self.cfg = cfg
        self.robot, rod0 = build_robot(cfg)
        r = self.robot
        self.elastic = ElasticModel(r, cfg)
        s = cfg.solver
        self.contact_params = ContactParams(s.contact_stiffness, s.contact_tolerance,
                                            cfg.helix.cross_section_radius)
        self.contact = ContactModel(r, self.contact_params, s.segment_length)
        self.mass = lumped_masses(r, cfg)
        self.node_mass = self.mass[r.node_dof[:, 0]]
        self.free = r.free_dofs()
        self.prescribed = r.prescribed_dofs()
        self.segments = r.edges[r.elastic_edges]
        self.J = cfg.base.inertia_matrix()
        self.omegas = np.array([cfg.omega1, cfg.omega2])
        self.penetration_limit = 2.0 * cfg.helix.cross_section_radius - 10.0 * s.contact_tolerance
        # net weight minus buoyancy per node, world -z
        h = cfg.helix
        self.rod_weight = np.zeros((r.n_nodes, 3))
        if s.rod_gravity:
            area = math.pi * h.cross_section_radius**2
            w = (cfg.material.density - cfg.fluid.fluid_density) * area * r.node_voronoi * cfg.gravity
            self.rod_weight[:, 2] = -w
        self.initial = SystemState(rod0, AttitudeState.identity(), np.zeros(2), 0.0,
                                   r.pack(rod0.x, rod0.theta), np.zeros(r.n_dof))
        # body-frame application points of the flagellum resultants
        N = r.N
        self.resultant_points = r.body_positions[[N - 1, N + 1]]

    # -- pieces ----------------------------------------------------------

    def mobility(self, x):
        return assemble_mobility(x, self.cfg.epsilon, self.cfg.fluid.viscosity,
                                 self.segments, self.robot.node_voronoi)

    def apply_boundary_conditions(self, rod_prev: RodState, q: np.ndarray, attitude_q, alphas):
        """Write prescribed positions and root twists into ``q`` (in place)."""
        r = self.robot
        Rb = quat_to_matrix(attitude_q)
        nodes, pos, dirs = prescribed_configuration(r, Rb, alphas)
        q[r.node_dof[nodes]] = pos
        x, _ = r.unpack(q)
        t, _ = fr.tangents_of(x, r.edges[r.root_edges])
        d1, _ = fr.update_reference_frames(rod_prev.d1[r.root_edges], rod_prev.tangent[r.root_edges], t)
        ang = fr.signed_angle(d1, dirs, t)
        prev = rod_prev.theta[r.root_edges]
        q[r.edge_dof[r.root_edges]] = prev + fr.wrap_angle(ang - prev)
        return q

    def rod_from_q(self, rod_prev: RodState, q, u) -> RodState:
        r = self.robot
        x, theta = r.unpack(q)
        t, d1, d2, tw = frames_at(r, rod_prev, x)
        ux, uth = r.unpack(u)
        return RodState(x, theta, ux, uth, t, d1, d2, tw)

    def residual_fn(self, rod_prev: RodState, q_prev, u_prev, dt, f_ext, k_factor):
        r = self.robot
        contact_on = self.cfg.solver.contact_enabled
        k = self.contact_params.stiffness * k_factor

        def residual(q, jac):
            x, theta = r.unpack(q)
            _, d1, d2, tw = frames_at(r, rod_prev, x)
            rep = self.elastic.evaluate(x, theta, d1, d2, tw, 2 if jac else 1)
            grad, H = rep.gradient, rep.hessian
            if contact_on:
                c = self.contact.evaluate(x, k, hessian=jac)
                grad = grad + c.gradient
                if jac and c.hessian is not None:
                    H = H + c.hessian
            return eom_residual(q, q_prev, u_prev, dt, self.mass, grad, H, f_ext)

        return residual

    # -- the step --------------------------------------------------------

    def step(self, state: SystemState, dt: float | None = None) -> SystemState:
        cfg, r = self.cfg, self.robot
        dt = cfg.solver.time_step if dt is None else dt
        rod = state.rod

        # (1) explicit hydrodynamics from start-of-step velocities
        mob = self.mobility(rod.x)
        f_fluid = mob.solve(rod.u.ravel()).reshape(-1, 3)
        f_nodes = -f_fluid + self.rod_weight
        f_ext = np.zeros(r.n_dof)
        f_ext[r.node_dof] = f_nodes

        # (2) implicit rod solve with the motors advanced
        alphas = state.alphas + self.omegas * dt
        q_guess = state.q + dt * state.u
        self.apply_boundary_conditions(rod, q_guess, state.attitude.q, alphas)
        k_factor = state.stiffness_factor
        while True:
            res = self.residual_fn(rod, state.q, state.u, dt, f_ext, k_factor)
            sol = newton_solve(res, q_guess, cfg.solver.newton_tol, cfg.solver.newton_max_iters,
                               free=self.free)
            q_new = sol.q
            dmin = math.inf
            if cfg.solver.contact_enabled:
                x_new, _ = r.unpack(q_new)
                dmin = self.contact.evaluate(x_new, hessian=False).min_distance
            if dmin >= self.penetration_limit or k_factor >= MAX_STIFFNESS_FACTOR:
                break
            k_factor *= 2.0

        # (3) resultants from the converged velocities
        u_new = (q_new - state.q) / dt
        ux, _ = r.unpack(u_new)
        f_fluid = mob.solve(ux.ravel()).reshape(-1, 3)
        F1 = -f_fluid[:r.N].sum(axis=0)
        F2 = -f_fluid[r.N + 1:].sum(axis=0)
        if cfg.solver.torque_model == "reaction":
            # force the flagellum transmits through its root: the fluid load
            # and contact load minus its momentum rate
            x_new, _ = r.unpack(q_new)
            f_c = (self.contact.node_forces(x_new, self.contact_params.stiffness * k_factor)
                   if cfg.solver.contact_enabled else np.zeros_like(x_new))
            acc = self.node_mass[:, None] * (ux - rod.u) / dt
            acc[r.prescribed_nodes] = 0.0
            load = f_c - acc
            F1 = F1 + load[:r.N].sum(axis=0)
            F2 = F2 + load[r.N + 1:].sum(axis=0)

        # (4) attitude
        att = state.attitude
        if not cfg.solver.attitude_frozen:
            att = self._advance_attitude(att, F1, F2, f_fluid, q_new, dt)

        # (5) re-place the base cluster and motor roots for the new attitude
        self.apply_boundary_conditions(rod, q_new, att.q, alphas)
        u_new = (q_new - state.q) / dt
        rod_new = self.rod_from_q(rod, q_new, u_new)
        return SystemState(rod_new, att, alphas, state.t + dt, q_new, u_new, F1, F2,
                           k_factor, dmin)

    def torque(self, att_q, omega, F1, F2, f_fluid=None, x=None) -> np.ndarray:
        """Body-frame torque on the base.

        ``F1`` and ``F2`` are world-frame flagellum resultants; the per-node
        model instead uses ``f_fluid`` (node forces on the fluid) at ``x``.
        """
        cfg, r = self.cfg, self.robot
        Rb = quat_to_matrix(att_q)
        _, pitch, _, _ = quat_to_euler(att_q)
        if cfg.solver.torque_model == "per_node":
            M_f = lever_torque((x - r.joint) @ Rb, -f_fluid @ Rb)
        else:
            M_f = lever_torque(self.resultant_points, np.stack([F1, F2]) @ Rb)
        M_r = np.array([0.0, righting_moment(pitch, cfg.base, cfg.gravity), 0.0])
        return M_f + M_r + base_drag(omega, cfg.base, cfg.fluid.viscosity)

    def _advance_attitude(self, att, F1, F2, f_fluid, q_new, dt):
        x, _ = self.robot.unpack(q_new)
        # the flagellar loads are held fixed in the body frame over the step;
        # gravity and base drag follow the RK stages
        Rb0 = quat_to_matrix(att.q)
        if self.cfg.solver.torque_model == "per_node":
            M_f = lever_torque((x - self.robot.joint) @ Rb0, -f_fluid @ Rb0)
        else:
            M_f = lever_torque(self.resultant_points, np.stack([F1, F2]) @ Rb0)
        cfg = self.cfg

        def torque_fn(qq, w):
            _, pitch, _, _ = quat_to_euler(qq)
            M_r = np.array([0.0, righting_moment(pitch, cfg.base, cfg.gravity), 0.0])
            return M_f + M_r + base_drag(w, cfg.base, cfg.fluid.viscosity)

        return step_attitude(att, torque_fn, self.J, dt)
