import math

import numpy as np
import pytest
import scipy.sparse as sp

from biflagella import frames as fr
from biflagella.elastic import (ElasticModel, bend_energy, bend_twist_terms, eom_residual,
                                lumped_masses, stretch_energy, stretch_terms, twist_energy)
from biflagella.stepper import newton_solve

from conftest import perturbed_state, state_at

EA, EI, GJ = 141.93, 1.2774e-3, 8.516e-4


def rel_err(a, b):
    return np.abs(a - b).max() / np.abs(b).max()


# --- stretch -----------------------------------------------------------------

def test_single_edge_stretch_energy():
    E, _, _ = stretch_terms(np.zeros((1, 3)), np.array([[5.5e-3, 0, 0]]), np.array([5e-3]), EA)
    assert E[0] == pytest.approx(0.5 * EA * 0.1**2 * 5e-3, rel=1e-12)
    assert E[0] == pytest.approx(3.548e-3, abs=1e-6)


def test_uniform_scaling_stretch_energy(desk):
    cfg, robot, rest = desk
    model = ElasticModel(robot, cfg)
    eps = 1e-3
    s = state_at(robot, rest, rest.x * (1 + eps), rest.theta)
    E, _ = stretch_energy(model, s)
    L = robot.rest_length[robot.elastic_edges].sum()
    assert E == pytest.approx(0.5 * model.EA * eps**2 * L, rel=1e-9)


# --- bend --------------------------------------------------------------------

def chain_terms(x, theta, voronoi):
    """Bend/twist terms of a free chain with space-parallel reference frames."""
    t = fr.normalize(np.diff(x, axis=0))
    d1, d2 = fr.space_parallel_frames(t)
    m1, m2 = fr.material_frame(d1, d2, theta)
    n = len(t) - 1
    return bend_twist_terms(x[:-2], x[1:-1], x[2:], m1[:-1], m2[:-1], m1[1:], m2[1:], theta[:-1],
                            theta[1:], np.zeros(n), np.zeros((n, 2)), np.zeros(n),
                            np.full(n, voronoi), EI, GJ)


def test_rest_state_has_zero_energy_and_gradient(desk):
    cfg, robot, rest = desk
    rep = ElasticModel(robot, cfg).evaluate_state(rest, derivatives=1)
    assert rep.E_stretch == rep.E_bend == rep.E_twist == 0.0
    assert np.abs(rep.gradient).max() < 1e-12


def test_circular_arc_bending_energy_matches_continuum():
    dl, Ra, n = 5e-3, 0.1, 40
    phi = dl / Ra
    k = np.arange(n)
    x = np.stack([Ra * (1 - np.cos(k * phi)), np.zeros(n), Ra * np.sin(k * phi)], axis=1)
    chord = 2 * Ra * math.sin(phi / 2)
    res = chain_terms(x, np.zeros(n - 1), chord)
    n_inner = n - 2
    assert res.E_bend.sum() == pytest.approx(EI * n_inner * chord / (2 * Ra**2), rel=0.02)
    assert np.all(res.E_twist < 1e-20)


def test_reversing_orientation_flips_curvature_binormal():
    e0, e1 = np.array([1.0, 0.2, 0.0]), np.array([0.8, 0.7, 0.1])
    fwd = fr.curvature_binormal(e0, e1)
    rev = fr.curvature_binormal(-e1, -e0)
    np.testing.assert_allclose(rev, -fwd, atol=1e-15)


# --- twist -------------------------------------------------------------------

def test_uniform_twist_rate_energy():
    n = 10
    x = np.zeros((n, 3))
    x[:, 2] = 5e-3 * np.arange(n)
    res = chain_terms(x, 0.1 * np.arange(n - 1), 5e-3)
    np.testing.assert_allclose(res.E_twist, 0.5 * (GJ / 5e-3) * 0.01, rtol=1e-12)
    assert res.E_twist[0] == pytest.approx(8.516e-4, rel=1e-4)
    assert np.all(res.E_bend == 0.0)


def test_uniform_twist_shift_is_free(desk):
    cfg, robot, rest = desk
    model = ElasticModel(robot, cfg)
    s = perturbed_state(robot, rest, np.random.default_rng(1))
    E0 = model.evaluate_state(s, 0).total
    s.theta = s.theta + 2 * math.pi
    assert model.evaluate_state(s, 0).total == pytest.approx(E0, rel=1e-12)


# --- gradient and Hessian suite ----------------------------------------------

N_STATES = 100


def random_stencils(rng, n):
    """Random three-node stencils with frames, twists and rest values."""
    x0 = rng.normal(scale=5e-3, size=(n, 3))
    e = rng.normal(size=(n, 3))
    e = 5e-3 * e / np.linalg.norm(e, axis=1)[:, None]
    f = e + rng.normal(scale=2.5e-3, size=(n, 3))
    x1, x2 = x0 + e, x0 + e + f
    te = e / np.linalg.norm(e, axis=1)[:, None]
    tf = f / np.linalg.norm(f, axis=1)[:, None]
    d1e = np.array([fr.orthonormal_basis(t)[0] for t in te])
    d1e, d2e = fr.orthonormalize(d1e, te)
    d1f, d2f = fr.orthonormalize(fr.parallel_transport(d1e, te, tf) + 0.3 * rng.normal(size=(n, 3)), tf)
    base = dict(x=(x0, x1, x2), t=(te, tf), d1=(d1e, d1f),
                theta=rng.normal(scale=0.3, size=(n, 2)),
                kbar=rng.normal(scale=30, size=(n, 2)), tbar=rng.normal(scale=0.2, size=n),
                vor=rng.uniform(3e-3, 8e-3, size=n))
    base["tw"] = fr.reference_twist(d1e, te, d1f, tf)
    return base


def stencil_energy(base, q, which):
    """Energy of each stencil at local DOFs ``q`` (n, 11), frames transported from ``base``."""
    x0, x1, x2 = q[:, 0:3], q[:, 3:6], q[:, 6:9]
    te_new = fr.normalize(x1 - x0)
    tf_new = fr.normalize(x2 - x1)
    d1e, d2e = fr.update_reference_frames(base["d1"][0], base["t"][0], te_new)
    d1f, d2f = fr.update_reference_frames(base["d1"][1], base["t"][1], tf_new)
    tw = fr.reference_twist(d1e, te_new, d1f, tf_new, previous=base["tw"])
    m1e, m2e = fr.material_frame(d1e, d2e, q[:, 9])
    m1f, m2f = fr.material_frame(d1f, d2f, q[:, 10])
    res = bend_twist_terms(x0, x1, x2, m1e, m2e, m1f, m2f, q[:, 9], q[:, 10], tw, base["kbar"],
                           base["tbar"], base["vor"], EI, GJ, derivatives=2)
    return res, getattr(res, "E_" + which)


def bend_twist_fd_errors(which, seed=11):
    """Worst relative gradient and Hessian errors against central differences."""
    rng = np.random.default_rng(seed)
    base = random_stencils(rng, N_STATES)
    q0 = np.concatenate([*base["x"], base["theta"]], axis=1)
    res, _ = stencil_energy(base, q0, which)
    g = getattr(res, "g_" + which)
    H = getattr(res, "H_" + which)
    H = 0.5 * (H + H.transpose(0, 2, 1))
    scale = np.r_[np.full(9, 5e-3), 1.0, 1.0]
    h1 = 1e-7 * scale
    gfd = np.zeros_like(g)
    for i in range(11):
        dq = np.zeros(11)
        dq[i] = h1[i]
        gfd[:, i] = (stencil_energy(base, q0 + dq, which)[1] - stencil_energy(base, q0 - dq, which)[1]) / (2 * h1[i])
    h2 = 1e-4 * scale
    Hfd = np.zeros_like(H)
    for i in range(11):
        for j in range(i, 11):
            di = np.zeros(11)
            dj = np.zeros(11)
            di[i], dj[j] = h2[i], h2[j]
            E = [stencil_energy(base, q0 + a * di + b * dj, which)[1] for a, b in ((1, 1), (1, -1), (-1, 1), (-1, -1))]
            Hfd[:, i, j] = Hfd[:, j, i] = (E[0] - E[1] - E[2] + E[3]) / (4 * h2[i] * h2[j])
    return (max(rel_err(g[k], gfd[k]) for k in range(N_STATES)),
            max(rel_err(H[k], Hfd[k]) for k in range(N_STATES)))


@pytest.mark.parametrize("which", ["bend", "twist"])
def test_bend_twist_gradient_and_hessian_on_random_states(which):
    g_err, H_err = bend_twist_fd_errors(which)
    assert g_err < 1e-5
    assert H_err < 1e-4


def stretch_fd_errors(seed=12):
    rng = np.random.default_rng(seed)
    xa = rng.normal(scale=5e-3, size=(N_STATES, 3))
    xb = xa + rng.normal(scale=5e-3, size=(N_STATES, 3))
    rest = rng.uniform(3e-3, 8e-3, size=N_STATES)
    q0 = np.concatenate([xa, xb], axis=1)

    def energy(q):
        return stretch_terms(q[:, :3], q[:, 3:], rest, EA, derivatives=0)[0]

    _, g, H = stretch_terms(xa, xb, rest, EA)
    h = 1e-9
    gfd = np.stack([(energy(q0 + h * e) - energy(q0 - h * e)) / (2 * h) for e in np.eye(6)], axis=1)
    h = 1e-6
    Hfd = np.zeros_like(H)
    for i in range(6):
        for j in range(6):
            ei, ej = h * np.eye(6)[i], h * np.eye(6)[j]
            Hfd[:, i, j] = (energy(q0 + ei + ej) - energy(q0 + ei - ej) - energy(q0 - ei + ej)
                            + energy(q0 - ei - ej)) / (4 * h * h)
    return (max(rel_err(g[k], gfd[k]) for k in range(N_STATES)),
            max(rel_err(H[k], Hfd[k]) for k in range(N_STATES)))


def test_stretch_gradient_and_hessian_on_random_states():
    g_err, H_err = stretch_fd_errors()
    assert g_err < 1e-5
    assert H_err < 1e-4


def fixed_base_energy(model, robot, base):
    def energy(q):
        x, th = robot.unpack(q)
        s = state_at(robot, base, x, th)
        return model.evaluate_state(s, 0).total
    return energy


def test_assembled_gradient_on_perturbed_helix(coarse):
    cfg, robot, rest = coarse
    model = ElasticModel(robot, cfg)
    rng = np.random.default_rng(5)
    for _ in range(3):
        s = perturbed_state(robot, rest, rng)
        q = robot.pack(s.x, s.theta)
        energy = fixed_base_energy(model, robot, s)
        g = model.evaluate_state(s, 1).gradient
        h = np.where(np.isin(np.arange(q.size), robot.edge_dof), 1e-7, 1e-9)
        gfd = np.array([(energy(q + h[i] * e) - energy(q - h[i] * e)) / (2 * h[i])
                        for i, e in enumerate(np.eye(q.size))])
        assert rel_err(g, gfd) < 1e-6


def test_assembled_hessian_on_perturbed_helix(coarse):
    cfg, robot, rest = coarse
    model = ElasticModel(robot, cfg)
    s = perturbed_state(robot, rest, np.random.default_rng(6))
    q = robot.pack(s.x, s.theta)
    energy = fixed_base_energy(model, robot, s)
    H = model.evaluate_state(s, 2).hessian.toarray()
    n = q.size
    h = np.where(np.isin(np.arange(n), robot.edge_dof), 1e-3, 1e-5)
    I = np.eye(n) * h
    Hfd = np.zeros((n, n))
    nz = np.argwhere(np.triu(np.abs(H) + np.abs(H.T) > 0))
    for i, j in nz:
        Hfd[i, j] = Hfd[j, i] = (energy(q + I[i] + I[j]) - energy(q + I[i] - I[j]) - energy(q - I[i] + I[j])
                                 + energy(q - I[i] - I[j])) / (4 * h[i] * h[j])
    assert rel_err(H, Hfd) < 1e-4


# --- invariants --------------------------------------------------------------

def test_energies_invariant_under_rigid_motion(desk):
    cfg, robot, rest = desk
    model = ElasticModel(robot, cfg)
    rng = np.random.default_rng(7)
    for _ in range(10):
        s = perturbed_state(robot, rest, rng)
        Q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
        Q *= np.sign(np.linalg.det(Q))
        moved = s.copy()
        moved.x = s.x @ Q.T + rng.normal(size=3)
        moved.tangent, moved.d1, moved.d2 = s.tangent @ Q.T, s.d1 @ Q.T, s.d2 @ Q.T
        a = model.evaluate_state(s, 0)
        b = model.evaluate_state(moved, 0)
        for k in ("E_stretch", "E_bend", "E_twist"):
            assert abs(getattr(a, k) - getattr(b, k)) < 1e-10


def test_energies_non_negative(desk):
    cfg, robot, rest = desk
    model = ElasticModel(robot, cfg)
    rng = np.random.default_rng(8)
    for _ in range(20):
        rep = model.evaluate_state(perturbed_state(robot, rest, rng), 0)
        assert min(rep.E_stretch, rep.E_bend, rep.E_twist) >= 0.0


def test_rest_hessian_is_psd_with_rigid_nullspace(coarse):
    cfg, robot, rest = coarse
    H = ElasticModel(robot, cfg).evaluate_state(rest, 2).hessian.toarray()
    w = np.linalg.eigvalsh(H)
    assert w.min() > -1e-9 * w.max()
    assert np.sum(np.abs(w) < 1e-9 * w.max()) >= 6


# --- equations of motion -----------------------------------------------------

def test_residual_vanishes_at_rest(desk):
    cfg, robot, rest = desk
    model = ElasticModel(robot, cfg)
    q = robot.pack(rest.x, rest.theta)
    m = lumped_masses(robot, cfg)
    r, _ = eom_residual(q, q, np.zeros_like(q), 1e-3, m, model.evaluate_state(rest, 1).gradient)
    np.testing.assert_array_equal(r, 0.0)


def test_free_fall_under_constant_force():
    rng = np.random.default_rng(9)
    n, dt = 7, 1e-3
    m = rng.uniform(0.5, 2, n)
    q_prev, u_prev, f = rng.normal(size=(3, n))

    def residual(q, jac):
        return eom_residual(q, q_prev, u_prev, dt, m, np.zeros(n),
                            sp.csr_matrix((n, n)) if jac else None, f)

    sol = newton_solve(residual, q_prev, 1e-6)
    assert sol.iterations == 1
    np.testing.assert_allclose(sol.q, q_prev + dt * u_prev + dt**2 * f / m, rtol=1e-12)


def test_residual_sign_of_external_force():
    m = np.ones(3)
    r, _ = eom_residual(np.zeros(3), np.zeros(3), np.zeros(3), 1.0, m, np.zeros(3),
                        f_ext=np.array([0.0, 0.0, -1.0]))
    # a downward force must be balanced by a downward acceleration
    assert r[2] > 0


def test_masses_positive(desk):
    cfg, robot, _ = desk
    assert np.all(lumped_masses(robot, cfg) > 0)
