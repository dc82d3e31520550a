"""Discretization of the two-flagella robot and the per-trial rod state.

Node layout (2N+1 nodes, 2N edges, edge k joins node k to node k+1)::

    x_0 ... x_{N-1}   flagellum 1, tip first, x_{N-1} on the motor axis
    x_N               joint (base) node
    x_{N+1} ... x_{2N} flagellum 2, x_{N+1} on the motor axis, tip last

Edges N-1 and N join the motor roots to the joint; together with their end
nodes they form the rigid base cluster and carry no elastic energy. Because a
helix of radius R never touches its own axis, each flagellum starts with a
radial crank edge from the on-axis root to the first helix node.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import frames as fr
from .config import SimConfig, derived_stiffnesses

BODY_AXIS = np.array([0.0, 0.0, 1.0])   # flagellum axes, body frame
BODY_LATERAL = np.array([1.0, 0.0, 0.0])  # motor separation direction


@dataclass(frozen=True)
class Robot:
    """Immutable topology, rest geometry and DOF layout."""

    N: int
    edges: np.ndarray           # (2N, 2)
    elastic_edges: np.ndarray   # edges carrying stretch energy
    stencil_node: np.ndarray    # interior nodes with bend/twist energy
    rest_length: np.ndarray     # (2N,)
    stencil_voronoi: np.ndarray  # (S,) rest Voronoi length per interior node
    node_voronoi: np.ndarray    # (2N+1,) flagellum Voronoi length, 0 at the joint
    kappa_bar: np.ndarray       # (S, 2)
    twist_bar: np.ndarray       # (S,)
    node_dof: np.ndarray        # (2N+1, 3)
    edge_dof: np.ndarray        # (2N,), -1 on the cluster edges
    n_dof: int
    body_positions: np.ndarray  # (2N+1, 3) rest positions in the body frame
    root_director: np.ndarray   # (2, 3) rest material director of each root edge, body frame
    root_edges: np.ndarray      # (2,)
    prescribed_nodes: np.ndarray
    motor_centers: np.ndarray   # (2, 3) body frame
    joint: np.ndarray           # (3,) world position of the ball joint

    @property
    def n_nodes(self) -> int:
        return 2 * self.N + 1

    @property
    def n_edges(self) -> int:
        return 2 * self.N

    @property
    def base_node(self) -> int:
        return self.N

    @property
    def flagellum_nodes(self):
        N = self.N
        return np.arange(0, N), np.arange(N + 1, 2 * N + 1)

    @property
    def stencil_edges(self):
        return self.stencil_node - 1, self.stencil_node

    def stencil_dofs(self) -> np.ndarray:
        i = self.stencil_node
        return np.concatenate([self.node_dof[i - 1], self.node_dof[i], self.node_dof[i + 1],
                               self.edge_dof[i - 1][:, None], self.edge_dof[i][:, None]], axis=1)

    def stretch_dofs(self) -> np.ndarray:
        e = self.edges[self.elastic_edges]
        return np.concatenate([self.node_dof[e[:, 0]], self.node_dof[e[:, 1]]], axis=1)

    def prescribed_dofs(self) -> np.ndarray:
        d = [self.node_dof[self.prescribed_nodes].ravel(), self.edge_dof[self.root_edges]]
        return np.sort(np.concatenate(d))

    def free_dofs(self) -> np.ndarray:
        mask = np.ones(self.n_dof, dtype=bool)
        mask[self.prescribed_dofs()] = False
        return np.flatnonzero(mask)

    def pack(self, x, theta) -> np.ndarray:
        q = np.zeros(self.n_dof)
        q[self.node_dof] = x
        ok = self.edge_dof >= 0
        q[self.edge_dof[ok]] = theta[ok]
        return q

    def unpack(self, q):
        x = q[self.node_dof]
        theta = np.zeros(self.n_edges)
        ok = self.edge_dof >= 0
        theta[ok] = q[self.edge_dof[ok]]
        return x, theta


@dataclass
class RodState:
    """Positions, twists, velocities and frames of both flagella."""

    x: np.ndarray
    theta: np.ndarray
    u: np.ndarray
    theta_dot: np.ndarray
    tangent: np.ndarray
    d1: np.ndarray
    d2: np.ndarray
    ref_twist: np.ndarray   # per interior node (stencil order)

    def copy(self) -> "RodState":
        return RodState(*(np.array(getattr(self, f)) for f in
                           ("x", "theta", "u", "theta_dot", "tangent", "d1", "d2", "ref_twist")))

    @property
    def material_frames(self):
        return fr.material_frame(self.d1, self.d2, self.theta)

    def edge_vectors(self, robot: Robot) -> np.ndarray:
        return self.x[robot.edges[:, 1]] - self.x[robot.edges[:, 0]]


def frames_at(robot: Robot, ref: RodState, x: np.ndarray):
    """Transport the reference frames of ``ref`` to positions ``x``.

    Returns (tangent, d1, d2, ref_twist) with the reference twist unwrapped
    relative to ``ref``.
    """
    t, _ = fr.tangents_of(x, robot.edges)
    d1, d2 = fr.update_reference_frames(ref.d1, ref.tangent, t)
    ep, en = robot.stencil_edges
    tw = fr.reference_twist(d1[ep], t[ep], d1[en], t[en], previous=ref.ref_twist)
    return t, d1, d2, tw


def flagellum_geometry(cfg: SimConfig, dl: float, center, phase: float) -> np.ndarray:
    """Rest nodes of one flagellum ordered root (on the motor axis) to tip."""
    h = cfg.helix
    helix = fr.generate_helix_nodes(h, dl, center, BODY_AXIS, phase, u=BODY_LATERAL)
    if h.helix_radius > 0.0:
        return np.vstack([np.asarray(center, dtype=float)[None, :], helix])
    return helix


def build_robot(cfg: SimConfig, joint=(0.0, 0.0, 0.0)):
    """Build the topology and the rest state for identity attitude and zero motor angle."""
    from .elastic import bend_twist_terms  # rest curvature uses the energy kernel

    dl = cfg.solver.segment_length
    d = cfg.base.motor_separation
    joint = np.asarray(joint, dtype=float)
    # flagellum 1 sits at -x_B, flagellum 2 at +x_B
    centers = np.array([-0.5 * d * BODY_LATERAL, 0.5 * d * BODY_LATERAL])
    f1 = flagellum_geometry(cfg, dl, centers[0], cfg.phase1)
    f2 = flagellum_geometry(cfg, dl, centers[1], cfg.phase2)
    if len(f1) != len(f2):
        raise ValueError("both flagella must have the same node count")
    N = len(f1)
    body = np.vstack([f1[::-1], np.zeros((1, 3)), f2])
    x = body + joint

    n_nodes, n_edges = 2 * N + 1, 2 * N
    edges = np.stack([np.arange(n_edges), np.arange(1, n_edges + 1)], axis=1)
    cluster = np.array([N - 1, N])
    elastic_edges = np.setdiff1d(np.arange(n_edges), cluster)
    stencil_node = np.concatenate([np.arange(1, N - 1), np.arange(N + 2, 2 * N)])

    # interleaved DOF numbering per flagellum, joint last
    node_dof = np.zeros((n_nodes, 3), dtype=np.int64)
    edge_dof = -np.ones(n_edges, dtype=np.int64)
    blk = 4 * N - 1
    for k in range(N):
        node_dof[k] = 4 * k + np.arange(3)
        node_dof[N + 1 + k] = blk + 4 * k + np.arange(3)
        if k < N - 1:
            edge_dof[k] = 4 * k + 3
            edge_dof[N + 1 + k] = blk + 4 * k + 3
    node_dof[N] = 2 * blk + np.arange(3)
    n_dof = 2 * blk + 3

    t, rest_len = fr.tangents_of(x, edges)
    # zero reference twist along each flagellum, starting at the root edge
    d1 = np.zeros((n_edges, 3))
    d1_f1, _ = fr.space_parallel_frames(t[:N - 1][::-1])
    d1[:N - 1] = d1_f1[::-1]
    d1[N + 1:], _ = fr.space_parallel_frames(t[N + 1:])
    for k in cluster:
        d1[k], _ = fr.orthonormal_basis(t[k])
    d1, d2 = fr.orthonormalize(d1, t)

    node_vor = np.zeros(n_nodes)
    for e in elastic_edges:
        node_vor[edges[e]] += 0.5 * rest_len[e]
    st_vor = 0.5 * (rest_len[stencil_node - 1] + rest_len[stencil_node])

    theta = np.zeros(n_edges)
    ep, en = stencil_node - 1, stencil_node
    ref_tw = fr.reference_twist(d1[ep], t[ep], d1[en], t[en])

    root_edges = np.array([N - 2, N + 1])
    prescribed = np.array([N - 2, N - 1, N, N + 1, N + 2])

    # rest curvature and twist from the discrete geometry itself
    EA, EI, GJ = derived_stiffnesses(cfg.material, cfg.helix.cross_section_radius)
    i = stencil_node
    m1, m2 = fr.material_frame(d1, d2, theta)
    res = bend_twist_terms(x[i - 1], x[i], x[i + 1], m1[ep], m2[ep], m1[en], m2[en],
                           theta[ep], theta[en], ref_tw, np.zeros((len(i), 2)),
                           np.zeros(len(i)), st_vor, EI, GJ, derivatives=0)
    kappa_bar = np.stack([res.kappa1, res.kappa2], axis=1)
    twist_bar = res.twist

    robot = Robot(
        N=N, edges=edges, elastic_edges=elastic_edges, stencil_node=stencil_node,
        rest_length=rest_len, stencil_voronoi=st_vor, node_voronoi=node_vor,
        kappa_bar=kappa_bar, twist_bar=twist_bar, node_dof=node_dof, edge_dof=edge_dof,
        n_dof=n_dof, body_positions=body, root_director=m1[root_edges].copy(),
        root_edges=root_edges, prescribed_nodes=prescribed, motor_centers=centers,
        joint=joint,
    )
    state = RodState(x=x, theta=theta, u=np.zeros_like(x), theta_dot=np.zeros(n_edges),
                     tangent=t, d1=d1, d2=d2, ref_twist=ref_tw)
    return robot, state


def rotation_about_axis(axis, angle) -> np.ndarray:
    a = np.asarray(axis, dtype=float)
    a = a / np.linalg.norm(a)
    K = np.array([[0, -a[2], a[1]], [a[2], 0, -a[0]], [-a[1], a[0], 0]])
    return np.eye(3) + math.sin(angle) * K + (1.0 - math.cos(angle)) * (K @ K)


def motor_rotation(alpha: float) -> np.ndarray:
    """Body-frame rotation of a flagellum root for motor angle ``alpha``.

    Positive angles turn counter-clockwise when looking from the base along the
    flagellum axis, i.e. a right-handed rotation about the negative axis.
    """
    return rotation_about_axis(-BODY_AXIS, alpha)


def prescribed_configuration(robot: Robot, Rb: np.ndarray, alphas):
    """World positions of the prescribed nodes and world root directors.

    ``Rb`` is the body-to-world rotation; ``alphas`` the two motor angles.
    Returns (nodes, positions (5, 3), directors (2, 3)).
    """
    N = robot.N
    groups = ((np.array([N - 2, N - 1]), 0), (np.array([N + 1, N + 2]), 1))
    pos = np.empty((len(robot.prescribed_nodes), 3))
    where = {n: k for k, n in enumerate(robot.prescribed_nodes)}
    dirs = np.empty((2, 3))
    for nodes, f in groups:
        Rm = motor_rotation(alphas[f])
        c = robot.motor_centers[f]
        body = (robot.body_positions[nodes] - c) @ Rm.T + c
        for n, b in zip(nodes, body):
            pos[where[n]] = robot.joint + Rb @ b
        dirs[f] = Rb @ (Rm @ robot.root_director[f])
    pos[where[N]] = robot.joint + Rb @ robot.body_positions[N]
    return robot.prescribed_nodes, pos, dirs
