"""Rigid-body attitude of the base on its ball joint.

Quaternions are scalar-first (w, x, y, z) and rotate body vectors into the
world frame. Angular velocity is expressed in the body frame.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass
class AttitudeState:
    q: np.ndarray       # unit quaternion
    omega: np.ndarray   # body-frame angular velocity (rad/s)

    @classmethod
    def identity(cls) -> "AttitudeState":
        return cls(np.array([1.0, 0.0, 0.0, 0.0]), np.zeros(3))

    def copy(self) -> "AttitudeState":
        return AttitudeState(self.q.copy(), self.omega.copy())


@dataclass
class TorqueBreakdown:
    flagella: np.ndarray
    righting: np.ndarray
    drag: np.ndarray

    @property
    def total(self) -> np.ndarray:
        return self.flagella + self.righting + self.drag


def quat_mul(p, q):
    pw, px, py, pz = p
    qw, qx, qy, qz = q
    return np.array([pw * qw - px * qx - py * qy - pz * qz,
                     pw * qx + px * qw + py * qz - pz * qy,
                     pw * qy - px * qz + py * qw + pz * qx,
                     pw * qz + px * qy - py * qx + pz * qw])


def quat_to_matrix(q) -> np.ndarray:
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def quat_from_axis_angle(axis, angle) -> np.ndarray:
    a = np.asarray(axis, dtype=float)
    a = a / np.linalg.norm(a)
    return np.concatenate([[math.cos(0.5 * angle)], math.sin(0.5 * angle) * a])


def quat_to_euler(q):
    """Intrinsic Z-Y-X angles (yaw, pitch, roll) and a gimbal-proximity flag."""
    w, x, y, z = np.asarray(q, dtype=float) / np.linalg.norm(q)
    sp_ = np.clip(2.0 * (w * y - z * x), -1.0, 1.0)
    pitch = math.asin(sp_)
    yaw = math.atan2(2.0 * (w * z + x * y), 1.0 - 2.0 * (y * y + z * z))
    roll = math.atan2(2.0 * (w * x + y * z), 1.0 - 2.0 * (x * x + y * y))
    # keep the half-open ranges (-pi, pi]
    if yaw == -math.pi:
        yaw = math.pi
    if roll == -math.pi:
        roll = math.pi
    gimbal = abs(pitch) > 0.5 * math.pi - 1e-6
    return yaw, pitch, roll, gimbal


def euler_to_quat(yaw, pitch, roll) -> np.ndarray:
    cy, sy = math.cos(0.5 * yaw), math.sin(0.5 * yaw)
    cp, sp_ = math.cos(0.5 * pitch), math.sin(0.5 * pitch)
    cr, sr = math.cos(0.5 * roll), math.sin(0.5 * roll)
    return np.array([cr * cp * cy + sr * sp_ * sy,
                     sr * cp * cy - cr * sp_ * sy,
                     cr * sp_ * cy + sr * cp * sy,
                     cr * cp * sy - sr * sp_ * cy])


def righting_moment(theta, base, g: float) -> float:
    """Gravity moment about the pitch axis; restores toward zero pitch."""
    return -base.mass * g * base.mass_center_shift * math.sin(theta)


def base_drag(omega, base, mu: float) -> np.ndarray:
    c = 2.0 * math.pi * mu * base.base_radius**3 * np.asarray(base.drag_coeffs, dtype=float)
    return -c * np.asarray(omega, dtype=float)


def flagella_torque(F1, F2, d: float) -> np.ndarray:
    """Moment of the two flagellum resultants with the closed-form lever arms."""
    F1 = np.asarray(F1, dtype=float)
    F2 = np.asarray(F2, dtype=float)
    return np.array([(F1[0] - F2[0]) * 0.0,
                     (F1[2] - F2[2]) * d / 2.0,
                     (F1[1] - F2[1]) * d / 2.0])


def assemble_torque(F1, F2, theta, omega, base, mu, g=9.81) -> TorqueBreakdown:
    """Body-frame torque from body-frame resultants, gravity and base drag."""
    return TorqueBreakdown(flagella_torque(F1, F2, base.motor_separation),
                           np.array([0.0, righting_moment(theta, base, g), 0.0]),
                           base_drag(omega, base, mu))


def lever_torque(points, forces) -> np.ndarray:
    """Sum of r x F for body-frame application points and forces."""
    return np.cross(np.asarray(points), np.asarray(forces)).sum(axis=0)


def _rates(q, w, torque_fn, J, Jinv):
    M = torque_fn(q, w)
    dq = 0.5 * quat_mul(q, np.concatenate([[0.0], w]))
    dw = Jinv @ (M - np.cross(w, J @ w))
    return dq, dw


def step_attitude(state: AttitudeState, M, J, dt: float) -> AttitudeState:
    """One classical Runge-Kutta step of the quaternion and Euler equations.

    ``M`` is either a constant body torque or a callable ``M(q, omega)``
    evaluated at every stage.
    """
    J = np.asarray(J, dtype=float)
    Jinv = np.linalg.inv(J)
    torque_fn = M if callable(M) else (lambda q, w, _m=np.asarray(M, dtype=float): _m)
    q0, w0 = state.q, state.omega
    k1q, k1w = _rates(q0, w0, torque_fn, J, Jinv)
    k2q, k2w = _rates(q0 + 0.5 * dt * k1q, w0 + 0.5 * dt * k1w, torque_fn, J, Jinv)
    k3q, k3w = _rates(q0 + 0.5 * dt * k2q, w0 + 0.5 * dt * k2w, torque_fn, J, Jinv)
    k4q, k4w = _rates(q0 + dt * k3q, w0 + dt * k3w, torque_fn, J, Jinv)
    q = q0 + dt / 6.0 * (k1q + 2 * k2q + 2 * k3q + k4q)
    w = w0 + dt / 6.0 * (k1w + 2 * k2w + 2 * k3w + k4w)
    return AttitudeState(q / np.linalg.norm(q), w)
