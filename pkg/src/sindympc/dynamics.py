"""Six-DOF multirotor rigid-body model with payload and lumped drag.

Frames follow the NED convention: inertial x north, y east, z down; the
body frame is forward-right-down. The 12-dimensional state vector is
ordered (position, inertial velocity, ZYX Euler angles, body rates).
Collective thrust acts along body z, so negative ``f_z`` lifts the
vehicle and gravity enters the vertical acceleration as ``+g``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import SingularAttitude

# state vector layout
POS = slice(0, 3)
VEL = slice(3, 6)
EULER = slice(6, 9)
RATES = slice(9, 12)
STATE_DIM = 12
YAW_IDX = 8

# pitch margin [rad] before the Euler-rate map is treated as singular
EPS_SING = 1e-3


@dataclass(eq=False)
class VehicleParams:
    """Physical constants of the airframe plus an optional rigid payload.

    The payload is assumed to add mass and diagonal inertia only (no
    center-of-gravity shift, no inertia cross terms). Defaults describe
    the reference vehicle used throughout the shipped experiments.
    """

    m_m: float = 1.3                          # airframe mass [kg]
    m_p: float = 0.0                          # payload mass [kg]
    i_m: tuple = (0.0281, 0.0286, 0.0551)     # airframe inertia diag [kg m^2]
    i_p: tuple = (0.0029, 0.0094, 0.0079)     # payload inertia diag [kg m^2]
    d_x: float = 0.165                        # rotor arm offset, roll axis [m]
    d_y: float = 0.165                        # rotor arm offset, pitch axis [m]
    c_t: float = 0.0135                       # thrust-to-yaw-torque coefficient [m]
    k_f: tuple = (1.0, 1.0, 1.0)              # drag on inertial velocity [N/(m/s)]
    k_m: tuple = (0.001, 0.001, 0.001)        # damping on body rates [N m/(rad/s)]
    g: float = 9.807                          # gravity [m/s^2]
    j_r: float = 6.8e-4                       # rotor spin inertia [kg m^2]; 0 disables
    k_omega: float = 0.01                     # per-rotor thrust / speed^2 [N/(rad/s)^2]
    t_max: float = 8.0                        # per-rotor thrust ceiling [N]

    def __post_init__(self):
        if self.m_m <= 0.0 or self.m_p < 0.0:
            raise ValueError("masses must satisfy m_m > 0 and m_p >= 0")
        if self.d_x <= 0.0 or self.d_y <= 0.0 or self.c_t <= 0.0:
            raise ValueError("mixer geometry d_x, d_y, c_t must be positive")
        if any(k < 0.0 for k in self.k_f) or any(k < 0.0 for k in self.k_m):
            raise ValueError("drag coefficients must be non-negative")
        self.m_t = self.m_m + self.m_p
        self.i_t = np.asarray(self.i_m, dtype=float) + np.asarray(self.i_p, dtype=float)
        if np.any(self.i_t <= 0.0):
            raise ValueError("combined inertia diagonal must be positive")
        # plus-configuration mixer: wrench = mix @ thrusts
        self.mix = np.array([
            [-1.0, -1.0, -1.0, -1.0],
            [-self.d_x, self.d_x, self.d_x, -self.d_x],
            [self.d_y, self.d_y, -self.d_y, -self.d_y],
            [self.c_t, -self.c_t, self.c_t, -self.c_t],
        ])
        self.mix_inv = np.linalg.inv(self.mix)


def combined_mass_inertia(params: VehicleParams):
    """Total mass and diagonal inertia of vehicle plus payload."""
    return params.m_t, params.i_t.copy()


def rotation_body_to_inertial(euler) -> np.ndarray:
    """ZYX Euler rotation matrix taking body-frame vectors to the inertial frame."""
    phi, theta, psi = euler
    cphi, sphi = math.cos(phi), math.sin(phi)
    cth, sth = math.cos(theta), math.sin(theta)
    cpsi, spsi = math.cos(psi), math.sin(psi)
    return np.array([
        [cth * cpsi, sphi * sth * cpsi - cphi * spsi, cphi * sth * cpsi + sphi * spsi],
        [cth * spsi, sphi * sth * spsi + cphi * cpsi, cphi * sth * spsi - sphi * cpsi],
        [-sth, sphi * cth, cphi * cth],
    ])


def _check_pitch(theta: float, eps_sing: float) -> None:
    if abs(theta) >= math.pi / 2.0 - eps_sing:
        raise SingularAttitude(f"pitch {theta:.6f} rad within {eps_sing} of +/-pi/2")


def euler_rate_matrix(euler, eps_sing: float = EPS_SING) -> np.ndarray:
    """Matrix mapping body rates (p, q, r) to Euler-angle rates.

    Raises SingularAttitude when pitch is within ``eps_sing`` of +/-90 deg.
    """
    phi, theta = euler[0], euler[1]
    _check_pitch(theta, eps_sing)
    cphi, sphi = math.cos(phi), math.sin(phi)
    cth = math.cos(theta)
    tth = math.tan(theta)
    return np.array([
        [1.0, sphi * tth, cphi * tth],
        [0.0, cphi, -sphi],
        [0.0, sphi / cth, cphi / cth],
    ])


def mixer(thrusts, params: VehicleParams) -> np.ndarray:
    """Map four rotor thrusts to the wrench (f_z, L, M, N)."""
    return params.mix @ np.asarray(thrusts, dtype=float)


def inverse_mixer(wrench, params: VehicleParams):
    """Allocate a wrench to rotor thrusts, clamped to [0, t_max].

    Returns (thrusts, saturated). When the exact solution leaves the thrust
    box the clamped allocation is returned and ``saturated`` is True.
    """
    raw = params.mix_inv @ np.asarray(wrench, dtype=float)
    thrusts = np.clip(raw, 0.0, params.t_max)
    saturated = bool(np.any(raw < -1e-12) or np.any(raw > params.t_max + 1e-12))
    return thrusts, saturated


def rotor_speed(thrusts, params: VehicleParams) -> float:
    """Summed rotor speed implied by per-rotor thrusts, T_i = k_omega * w_i^2."""
    t = np.maximum(np.asarray(thrusts, dtype=float), 0.0)
    return float(np.sum(np.sqrt(t / params.k_omega)))


def rotor_speed_from_wrench(wrench, params: VehicleParams) -> float:
    """Summed rotor speed for a commanded wrench after thrust clamping."""
    thrusts, _ = inverse_mixer(wrench, params)
    return rotor_speed(thrusts, params)


def aero_wrench(state, params: VehicleParams):
    """Lumped aerodynamic drag: force on inertial velocity, moment on body rates."""
    f_a = np.array([
        -params.k_f[0] * state[3],
        -params.k_f[1] * state[4],
        -params.k_f[2] * state[5],
    ])
    tau_a = np.array([
        -params.k_m[0] * state[9],
        -params.k_m[1] * state[10],
        -params.k_m[2] * state[11],
    ])
    return f_a, tau_a


def hover_wrench(params: VehicleParams) -> np.ndarray:
    """Wrench that exactly balances gravity at level attitude."""
    return np.array([-params.m_t * params.g, 0.0, 0.0, 0.0])


def state_derivative(state, wrench, params: VehicleParams,
                     eps_sing: float = EPS_SING) -> np.ndarray:
    """Continuous-time derivative of the 12-state under a constant wrench.

    Translational dynamics resolve the body-z thrust into the inertial
    frame and add drag and gravity; rotational dynamics are the Euler
    equations with damping and, for j_r > 0, the rotor gyroscopic torque
    driven by the summed rotor speed implied by the commanded wrench.
    """
    phi, theta = state[6], state[7]
    _check_pitch(theta, eps_sing)
    psi = state[8]
    cphi, sphi = math.cos(phi), math.sin(phi)
    cth, sth = math.cos(theta), math.sin(theta)
    cpsi, spsi = math.cos(psi), math.sin(psi)
    tth = sth / cth

    xd, yd, zd = state[3], state[4], state[5]
    p, q, r = state[9], state[10], state[11]
    fz, tl, tm, tn = wrench[0], wrench[1], wrench[2], wrench[3]

    m_t = params.m_t
    ix, iy, iz = params.i_t
    kfx, kfy, kfz = params.k_f
    kmp, kmq, kmr = params.k_m

    # thrust column of the body-to-inertial rotation
    r13 = cphi * sth * cpsi + sphi * spsi
    r23 = cphi * sth * spsi - sphi * cpsi
    r33 = cphi * cth

    ax = (r13 * fz - kfx * xd) / m_t
    ay = (r23 * fz - kfy * yd) / m_t
    az = (r33 * fz - kfz * zd) / m_t + params.g

    phid = p + sphi * tth * q + cphi * tth * r
    thetad = cphi * q - sphi * r
    psid = (sphi * q + cphi * r) / cth

    pd = (tl - kmp * p - (iz - iy) * q * r) / ix
    qd = (tm - kmq * q - (ix - iz) * p * r) / iy
    rd = (tn - kmr * r - (iy - ix) * p * q) / iz

    if params.j_r > 0.0:
        omega_r = rotor_speed_from_wrench(wrench, params)
        pd -= (params.j_r / ix) * q * omega_r
        qd -= (params.j_r / iy) * p * omega_r

    out = np.empty(12)
    out[0] = xd
    out[1] = yd
    out[2] = zd
    out[3] = ax
    out[4] = ay
    out[5] = az
    out[6] = phid
    out[7] = thetad
    out[8] = psid
    out[9] = pd
    out[10] = qd
    out[11] = rd
    return out
