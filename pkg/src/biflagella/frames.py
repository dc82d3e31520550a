"""Geometric primitives for discrete rods: helix sampling, transport and frames.

Every function accepts stacked inputs of shape (..., 3) so that a whole rod can
be processed without Python loops.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.optimize import brentq

TRANSPORT_EPS = 1e-10


class DegenerateTransportError(ArithmeticError):
    """Tangents are (nearly) antiparallel; the minimal rotation is undefined."""


class DegenerateKinkError(ArithmeticError):
    """Adjacent edges fold back onto each other."""


def _dot(a, b):
    return np.einsum("...i,...i->...", a, b)


def cross(a, b):
    """Row-wise cross product; cheaper than ``np.cross`` for small arrays."""
    a0, a1, a2 = a[..., 0], a[..., 1], a[..., 2]
    b0, b1, b2 = b[..., 0], b[..., 1], b[..., 2]
    return np.stack([a1 * b2 - a2 * b1, a2 * b0 - a0 * b2, a0 * b1 - a1 * b0], axis=-1)


def normalize(v):
    v = np.asarray(v, dtype=float)
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def orthonormal_basis(axis):
    """Return (u, v) completing ``axis`` to a right-handed orthonormal triad."""
    a = np.asarray(axis, dtype=float)
    n = np.linalg.norm(a)
    if not np.isfinite(n) or n < 1e-300:
        raise ValueError("degenerate axis")
    a = a / n
    trial = np.array([1.0, 0.0, 0.0]) if abs(a[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    u = trial - a * (trial @ a)
    u /= np.linalg.norm(u)
    return u, cross(a, u)


def helix_step_angle(R: float, pitch: float, dl: float) -> float:
    """Polar angle increment whose chord on the helix equals ``dl`` exactly."""
    b = pitch / (2.0 * math.pi)
    if R == 0.0:
        return dl / b

    def chord(phi):
        return math.hypot(2.0 * R * math.sin(0.5 * phi), b * phi) - dl

    # the chord grows monotonically for phi below one full turn
    hi = dl / b if b > 0 else math.pi
    hi = min(hi, 2.0 * math.pi)
    lo = dl / math.hypot(R, b)
    if chord(hi) < 0.0:
        raise ValueError("segment length exceeds one helix turn")
    return brentq(chord, lo, hi, xtol=1e-16, rtol=4 * np.finfo(float).eps, maxiter=200)


def generate_helix_nodes(helix, dl: float, root, axis, phase: float = 0.0,
                         u=None) -> np.ndarray:
    """Sample a helix with uniform chord length ``dl``.

    The helix starts at ``root + R*(cos(phase) u + sin(phase) v)`` and advances
    along ``axis``. Nodes are placed at a constant polar-angle step so that every
    chord has length ``dl``; sampling stops at the last node within the contour
    length.
    """
    axis = np.asarray(axis, dtype=float)
    n = np.linalg.norm(axis)
    if not np.isfinite(n) or n < 1e-300:
        raise ValueError("degenerate axis")
    axis = axis / n
    if u is None:
        u, v = orthonormal_basis(axis)
    else:
        u = normalize(np.asarray(u, dtype=float) - axis * (np.asarray(u) @ axis))
        v = cross(axis, u)
    R, pitch = helix.helix_radius, helix.helix_pitch
    Lc = helix.contour_length
    if dl >= Lc:
        raise ValueError("segment length must be smaller than the contour length")
    total_angle = 2.0 * math.pi * helix.turns
    dphi = helix_step_angle(R, pitch, dl)
    arc_per_rad = math.hypot(R, pitch / (2.0 * math.pi))
    count = int(math.floor(total_angle / dphi + 1e-12)) + 1
    phi = dphi * np.arange(count)
    sign = 1.0 if helix.handedness == "right" else -1.0
    ang = phase + sign * phi
    axial = (pitch / (2.0 * math.pi)) * phi
    pts = (np.asarray(root, dtype=float)[None, :]
           + axial[:, None] * axis[None, :]
           + R * (np.cos(ang)[:, None] * u[None, :] + np.sin(ang)[:, None] * v[None, :]))
    assert (count - 1) * dphi * arc_per_rad <= Lc * (1 + 1e-12)
    return pts


def parallel_transport(v, t_from, t_to):
    """Rotate ``v`` by the minimal rotation carrying ``t_from`` onto ``t_to``."""
    v = np.asarray(v, dtype=float)
    t_from = np.asarray(t_from, dtype=float)
    t_to = np.asarray(t_to, dtype=float)
    c = _dot(t_from, t_to)
    if np.any(c <= -1.0 + TRANSPORT_EPS):
        raise DegenerateTransportError("antiparallel tangents in parallel transport")
    b = cross(t_from, t_to)
    bv = _dot(b, v)
    return (c[..., None] * v + cross(b, v)
            + b * (bv / (1.0 + c))[..., None])


def signed_angle(a, b, n):
    """Angle rotating ``a`` onto ``b`` about the unit normal ``n``."""
    return np.arctan2(_dot(cross(a, b), n), _dot(a, b))


def wrap_angle(a):
    """Map to (-pi, pi]."""
    return np.pi - np.mod(np.pi - a, 2.0 * np.pi)


def material_frame(d1, d2, theta):
    c = np.cos(theta)[..., None]
    s = np.sin(theta)[..., None]
    return c * d1 + s * d2, -s * d1 + c * d2


def curvature_binormal(e_prev, e_next):
    e_prev = np.asarray(e_prev, dtype=float)
    e_next = np.asarray(e_next, dtype=float)
    denom = (np.linalg.norm(e_prev, axis=-1) * np.linalg.norm(e_next, axis=-1)
             + _dot(e_prev, e_next))
    scale = np.linalg.norm(e_prev, axis=-1) * np.linalg.norm(e_next, axis=-1)
    if np.any(denom <= 1e-14 * scale):
        raise DegenerateKinkError("antiparallel adjacent edges")
    return 2.0 * cross(e_prev, e_next) / denom[..., None]


def reference_twist(d1_prev, t_prev, d1_next, t_next, previous=None):
    """Twist of the reference frame across a node.

    ``d1_prev`` is transported from ``t_prev`` to ``t_next`` and compared with
    ``d1_next`` about ``t_next``. When ``previous`` is given the result is
    unwrapped to the branch nearest to it.
    """
    moved = parallel_transport(d1_prev, t_prev, t_next)
    ang = signed_angle(moved, d1_next, t_next)
    if previous is not None:
        ang = previous + wrap_angle(ang - previous)
    return ang


def orthonormalize(d1, t):
    """One Gram-Schmidt pass: make ``d1`` unit and normal to ``t``; return (d1, d2)."""
    d1 = d1 - t * _dot(d1, t)[..., None]
    d1 = d1 / np.linalg.norm(d1, axis=-1, keepdims=True)
    return d1, cross(t, d1)


def update_reference_frames(d1_old, t_old, t_new):
    """Time-parallel transport of the reference directors to new tangents."""
    d1 = parallel_transport(d1_old, t_old, t_new)
    return orthonormalize(d1, t_new)


def space_parallel_frames(tangents, d1_first=None):
    """Frames transported along the rod from the first edge (zero reference twist)."""
    tangents = np.asarray(tangents, dtype=float)
    d1 = np.empty_like(tangents)
    if d1_first is None:
        d1_first, _ = orthonormal_basis(tangents[0])
    d1[0], _ = orthonormalize(np.asarray(d1_first, dtype=float), tangents[0])
    for k in range(1, len(tangents)):
        d1[k] = parallel_transport(d1[k - 1], tangents[k - 1], tangents[k])
    return orthonormalize(d1, tangents)


def tangents_of(x, edges):
    """Unit tangents and lengths of ``edges`` (index pairs) for nodes ``x``."""
    e = x[edges[:, 1]] - x[edges[:, 0]]
    ln = np.linalg.norm(e, axis=1)
    return e / ln[:, None], ln
