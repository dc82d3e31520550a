import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from biflagella.config import load_config
from biflagella.contact import (ContactModel, ContactParams, contact_energy, contact_forces,
                                distance_derivatives, min_distance)
from biflagella.rod import build_robot

R, DELTA = 6e-3, 1e-5
PARAMS = ContactParams(stiffness=1e3, tolerance=DELTA, radius=R)

coord = st.floats(-1.0, 1.0, allow_nan=False)
point = st.tuples(coord, coord, coord).map(np.array)


def brute_force_distance(a0, a1, b0, b1, n=401):
    s = np.linspace(0, 1, n)
    pa = a0 + s[:, None] * (a1 - a0)
    pb = b0 + s[:, None] * (b1 - b0)
    return np.linalg.norm(pa[:, None] - pb[None], axis=2).min()


# --- minimal distance ----------------------------------------------------

def test_skew_perpendicular_segments():
    D, s, t = min_distance(np.zeros(3), np.array([1.0, 0, 0]),
                           np.array([0.5, -0.5, 0.3]), np.array([0.5, 0.5, 0.3]))
    assert D == pytest.approx(0.3, abs=1e-12)
    assert s == pytest.approx(0.5) and t == pytest.approx(0.5)


def test_parallel_offset_segments():
    D, _, _ = min_distance(np.zeros(3), np.array([1.0, 0, 0]),
                           np.array([0.2, 1.0, 0]), np.array([1.2, 1.0, 0]))
    assert D == pytest.approx(1.0, abs=1e-12)


def test_shared_endpoint():
    D, s, t = min_distance(np.zeros(3), np.array([1.0, 0, 0]),
                           np.array([1.0, 0, 0]), np.array([1.0, 2.0, 3.0]))
    assert D == pytest.approx(0.0, abs=1e-12)
    assert s == pytest.approx(1.0) and t == pytest.approx(0.0)


def test_point_like_segment():
    D, _, _ = min_distance(np.zeros(3), np.zeros(3), np.array([-1.0, 2, 0]), np.array([1.0, 2, 0]))
    assert D == pytest.approx(2.0)


@settings(max_examples=200, deadline=None)
@given(point, point, point, point)
def test_distance_is_global_minimum(a0, a1, b0, b1):
    D, s, t = min_distance(a0, a1, b0, b1)
    assert 0.0 <= s <= 1.0 and 0.0 <= t <= 1.0
    assert D >= 0.0
    # point-like segments shorter than ~1e-7 are treated as their first endpoint
    assert D <= brute_force_distance(a0, a1, b0, b1) + 1e-7
    # the parameters realise the distance
    assert np.linalg.norm(a0 + s * (a1 - a0) - b0 - t * (b1 - b0)) == pytest.approx(D, abs=1e-12)


# --- energy --------------------------------------------------------------

def test_energy_boundary_values():
    E, dE, _ = contact_energy(2 * R + DELTA, PARAMS, 2)
    assert E == 0.0 and dE == 0.0
    assert contact_energy(2 * R + 2 * DELTA, PARAMS) == 0.0
    assert np.isfinite(contact_energy(2 * R, PARAMS))
    assert contact_energy(2 * R, PARAMS) == pytest.approx(DELTA / 6)


def test_energy_strictly_decreasing_inside_reach():
    D = np.linspace(0.0, 2 * R + DELTA, 2001)[:-1]
    E = contact_energy(D, PARAMS)
    assert np.all(np.diff(E) < 0)


def test_energy_derivatives_match_finite_differences():
    D = np.linspace(2 * R - 5 * DELTA, 2 * R + 0.9 * DELTA, 50)
    _, dE, ddE = contact_energy(D, PARAMS, 2)
    h = 1e-3 * DELTA
    E = lambda d: contact_energy(d, PARAMS)
    np.testing.assert_allclose(dE, (E(D + h) - E(D - h)) / (2 * h), rtol=1e-6, atol=1e-6 * abs(dE).max())
    np.testing.assert_allclose(ddE, (E(D + h) - 2 * E(D) + E(D - h)) / h**2, rtol=1e-4)


# --- distance derivatives ------------------------------------------------

def random_pairs(rng, n):
    """Crossing segment pairs in generic position (interior closest points)."""
    a0 = rng.normal(size=(n, 3))
    a1 = a0 + rng.normal(size=(n, 3))
    s, t = rng.uniform(0.2, 0.8, size=(2, n))
    db = rng.normal(size=(n, 3))
    normal = np.cross(a1 - a0, db)
    normal /= np.linalg.norm(normal, axis=1)[:, None]
    pa = a0 + s[:, None] * (a1 - a0)
    pb = pa + rng.uniform(0.1, 0.5, size=(n, 1)) * normal
    return a0, a1, pb - t[:, None] * db, pb + (1 - t[:, None]) * db


def clamped_pairs(rng, n):
    """Pairs whose closest point sits at an endpoint of the second segment."""
    a0 = rng.normal(size=(n, 3))
    a1 = a0 + rng.normal(size=(n, 3))
    s = rng.uniform(0.2, 0.8, size=n)
    u = np.cross(a1 - a0, rng.normal(size=(n, 3)))
    u /= np.linalg.norm(u, axis=1)[:, None]
    b0 = a0 + s[:, None] * (a1 - a0) + 0.3 * u
    b1 = b0 + u + 0.3 * rng.normal(size=(n, 3))
    return a0, a1, b0, b1


@pytest.mark.parametrize("make", [random_pairs, clamped_pairs])
def test_distance_gradient_and_hessian(make):
    rng = np.random.default_rng(0)
    segs = make(rng, 100)
    q0 = np.concatenate(segs, axis=1)

    def split(q):
        return q[:, 0:3], q[:, 3:6], q[:, 6:9], q[:, 9:12]

    D, g, H = distance_derivatives(*segs)
    h = 1e-6
    gfd = np.empty_like(g)
    Hfd = np.empty_like(H)
    for i, e in enumerate(np.eye(12)):
        Dp, gp, _ = distance_derivatives(*split(q0 + h * e))
        Dm, gm, _ = distance_derivatives(*split(q0 - h * e))
        gfd[:, i] = (Dp - Dm) / (2 * h)
        Hfd[:, :, i] = (gp - gm) / (2 * h)
    for k in range(len(D)):
        assert np.abs(g[k] - gfd[k]).max() < 1e-5 * np.abs(g[k]).max()
        assert np.abs(H[k] - Hfd[k]).max() < 1e-4 * np.abs(H[k]).max()


def near_contact_pairs(rng, n):
    """Millimetre-scale crossing pairs whose gap lies inside the contact band."""
    a0 = rng.normal(scale=5e-3, size=(n, 3))
    a1 = a0 + rng.normal(scale=5e-3, size=(n, 3))
    s, t = rng.uniform(0.2, 0.8, size=(2, n))
    db = rng.normal(scale=5e-3, size=(n, 3))
    normal = np.cross(a1 - a0, db)
    normal /= np.linalg.norm(normal, axis=1)[:, None]
    pb = a0 + s[:, None] * (a1 - a0) + rng.uniform(2 * R - 5 * DELTA, 2 * R + 0.9 * DELTA, size=(n, 1)) * normal
    return a0, a1, pb - t[:, None] * db, pb + (1 - t[:, None]) * db


def pair_energy_terms(q):
    D, gD, HD = distance_derivatives(q[:, 0:3], q[:, 3:6], q[:, 6:9], q[:, 9:12])
    E, dE, ddE = contact_energy(D, PARAMS, 2)
    g = dE[:, None] * gD
    H = ddE[:, None, None] * gD[:, :, None] * gD[:, None, :] + dE[:, None, None] * HD
    return E, g, H


def pair_energy_fd_errors(seed=5, n=100):
    """Worst relative errors of the pair energy gradient and Hessian against central differences."""
    q0 = np.concatenate(near_contact_pairs(np.random.default_rng(seed), n), axis=1)
    E, g, H = pair_energy_terms(q0)
    assert np.all(E > 0)
    h = 1e-4 * DELTA
    gfd = np.empty_like(g)
    Hfd = np.empty_like(H)
    for i, e in enumerate(np.eye(12)):
        Ep, gp, _ = pair_energy_terms(q0 + h * e)
        Em, gm, _ = pair_energy_terms(q0 - h * e)
        gfd[:, i] = (Ep - Em) / (2 * h)
        Hfd[:, :, i] = (gp - gm) / (2 * h)
    err = lambda a, b: max(np.abs(a[k] - b[k]).max() / np.abs(a[k]).max() for k in range(n))
    return err(g, gfd), err(H, Hfd)


def test_pair_energy_gradient_and_hessian():
    g_err, H_err = pair_energy_fd_errors()
    assert g_err < 1e-5
    assert H_err < 1e-4


# --- assembled model -----------------------------------------------------

@pytest.fixture(scope="module")
def entangled():
    cfg = load_config("segment_length = 10 mm\nmotor_separation = 12 mm\n")
    robot, rest = build_robot(cfg)
    rng = np.random.default_rng(1)
    x = rest.x + rng.normal(scale=1e-3, size=rest.x.shape)
    model = ContactModel(robot, ContactParams(1e3, DELTA, R), cfg.solver.segment_length)
    return robot, model, x


def test_entangled_state_has_active_pairs(entangled):
    _, model, x = entangled
    rep = model.evaluate(x)
    assert len(rep.pairs) > 0 and rep.energy > 0


def test_assembled_gradient_matches_finite_differences(entangled):
    robot, model, x = entangled
    rep = model.evaluate(x, hessian=False)
    g = rep.gradient[robot.node_dof]
    gfd = np.zeros_like(x)
    h = 1e-8
    for n in range(len(x)):
        for c in range(3):
            xp, xm = x.copy(), x.copy()
            xp[n, c] += h
            xm[n, c] -= h
            gfd[n, c] = (model.evaluate(xp, hessian=False).energy
                         - model.evaluate(xm, hessian=False).energy) / (2 * h)
    assert np.linalg.norm(g - gfd) / np.linalg.norm(g) < 1e-5


def test_assembled_hessian_matches_gradient_differences(entangled):
    robot, model, x = entangled
    H = model.evaluate(x).hessian.toarray()
    active = np.unique(robot.node_dof[robot.edges[model.evaluate(x).pairs].ravel()])
    h = 1e-9
    for i in active[:12]:
        n, c = np.argwhere(robot.node_dof == i)[0]
        xp, xm = x.copy(), x.copy()
        xp[n, c] += h
        xm[n, c] -= h
        col = (model.evaluate(xp, hessian=False).gradient
               - model.evaluate(xm, hessian=False).gradient) / (2 * h)
        assert np.abs(col - H[:, i]).max() < 1e-4 * np.abs(H[:, i]).max()


def test_momentum_neutrality(entangled):
    _, model, x = entangled
    f = contact_forces(model, x)
    assert np.abs(f.sum(axis=0)).max() < 1e-12 * np.abs(f).max()


def test_rigid_motion_equivariance(entangled):
    _, model, x = entangled
    rng = np.random.default_rng(2)
    Q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
    Q *= np.sign(np.linalg.det(Q))
    shift = rng.normal(scale=0.01, size=3)
    f = contact_forces(model, x)
    f_moved = contact_forces(model, x @ Q.T + shift)
    assert np.abs(f_moved - f @ Q.T).max() < 1e-9 * np.abs(f).max()


def test_parallel_edges_repel_along_mutual_perpendicular():
    gap = 2 * R - DELTA
    a0, a1 = np.array([[0.0, 0, 0]]), np.array([[0.0, 0, 0.01]])
    b0, b1 = a0 + [0, gap, 0], a1 + [0, gap, 0]
    D, g, _ = distance_derivatives(a0, a1, b0, b1, hessian=False)
    _, dE, _ = contact_energy(D, PARAMS, 1)
    f = (-PARAMS.stiffness * dE[:, None] * g).reshape(4, 3)
    fa, fb = f[:2].sum(axis=0), f[2:].sum(axis=0)
    assert fa[1] < 0 < fb[1]
    np.testing.assert_allclose(fa, -fb, atol=1e-12 * abs(fa[1]))
    assert abs(fa[0]) < 1e-12 * abs(fa[1]) and abs(fa[2]) < 1e-12 * abs(fa[1])


def test_no_force_beyond_reach(desk):
    cfg, robot, rest = desk
    model = ContactModel(robot, PARAMS, cfg.solver.segment_length)
    assert not contact_forces(model, rest.x).any()


def test_candidate_exclusions(desk):
    cfg, robot, _ = desk
    model = ContactModel(robot, PARAMS, cfg.solver.segment_length)
    N = robot.N
    a, b = model.cand[:, 0], model.cand[:, 1]
    same = (a < N) == (b < N)
    assert np.all(np.abs(a - b)[same] >= 3)
    # the two rigid cluster edges carry no contact
    assert not np.isin([N - 1, N], model.cand).any()
