"""Fixed-step simulation, reference courses, and the data-collection PID.

The closed-loop data-collection flight runs a cascade PID (position loop
feeding tilt and collective commands into an attitude loop) around the
ground-truth plant and logs time-aligned snapshots of the channels the
identification stage consumes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import dynamics
from .dynamics import VehicleParams, rotation_body_to_inertial
from .errors import DataError, DivergedSimulation, TooFewSamples

TWO_PI = 2.0 * math.pi

# channel order of the snapshot CSV
SNAPSHOT_HEADER = ("t,xdot,ydot,zdot,phi,theta,psi,p,q,r,"
                   "u_tr1,u_tr2,u_tr3,L,M,N,omega_r")


@dataclass
class SimConfig:
    dt: float = 0.002           # integration step [s]
    duration: float = 100.0     # simulated time [s]
    seed: int = 0               # reserved for randomized excitation
    decimation: int = 1         # log every n-th step
    diverge_bound: float = 1e4  # abort when any state magnitude exceeds this

    def __post_init__(self):
        if self.dt <= 0.0:
            raise ValueError("dt must be positive")
        if self.duration < self.dt:
            raise ValueError("duration must cover at least one step")
        if self.decimation < 1:
            raise ValueError("decimation must be >= 1")


@dataclass
class TrajectorySpec:
    """Reference course: a closed rectangle, a fixed setpoint, or a
    waypoint course, optionally overlaid with yaw and altitude waves."""

    kind: str = "rectangular"           # rectangular | setpoint | course
    side: float = 10.0                  # rectangle edge length [m]
    altitude: float = -5.0              # rectangle altitude [m], NED z
    lap_time: float = 100.0             # seconds per rectangle lap
    laps: int = 1
    waypoints: tuple = ()               # course corners, 3-tuples [m]
    segment_times: tuple = ()           # course leg durations [s]
    accel_fraction: float = 0.25        # trapezoid ramp fraction per leg
    yaw_amplitude: float = 0.0          # square-wave yaw excitation [rad]
    yaw_period: float = 20.0
    yaw_ramp: float = 1.0               # transition time between yaw plateaus [s]
    altitude_amplitude: float = 0.0     # square-wave altitude excitation [m]
    altitude_period: float = 25.0
    altitude_ramp: float = 4.0
    x_amplitude: float = 0.0            # lateral excitation waves [m]
    x_period: float = 13.0
    x_ramp: float = 2.5
    y_amplitude: float = 0.0
    y_period: float = 17.0
    y_ramp: float = 2.5
    setpoint: tuple = (0.0, 0.0, -5.0)
    yaw_setpoint: float = 0.0

    def __post_init__(self):
        if self.kind not in ("rectangular", "setpoint", "course"):
            raise ValueError(f"unknown trajectory kind {self.kind!r}")
        if self.kind == "rectangular" and (self.lap_time <= 0.0 or self.side <= 0.0):
            raise ValueError("rectangle needs positive side and lap_time")
        if self.kind == "course":
            if len(self.waypoints) < 2:
                raise ValueError("course needs at least two waypoints")
            if len(self.segment_times) != len(self.waypoints) - 1:
                raise ValueError("need one segment time per course leg")
        if not 0.0 < self.accel_fraction < 0.5:
            raise ValueError("accel_fraction must lie in (0, 0.5)")


def collection_course() -> TrajectorySpec:
    """Default excitation course for identification flights.

    One lap of a 10 m square at z = -5 m over 100 s with a +/-30 deg yaw
    square wave, plus smooth square waves on x, y, and altitude so that
    tilt, thrust, and the vertical channel all carry usable signal.
    """
    return TrajectorySpec(
        kind="rectangular", side=10.0, altitude=-5.0, lap_time=100.0, laps=1,
        yaw_amplitude=math.radians(30.0), yaw_period=20.0, yaw_ramp=1.0,
        altitude_amplitude=1.2, altitude_period=11.0, altitude_ramp=3.5,
        x_amplitude=1.0, x_period=13.0, x_ramp=2.5,
        y_amplitude=1.0, y_period=17.0, y_ramp=2.5,
    )


def holdout_course() -> TrajectorySpec:
    """Shorter, faster validation course distinct from the training lap."""
    return TrajectorySpec(
        kind="rectangular", side=6.0, altitude=-5.0, lap_time=20.0, laps=1,
        yaw_amplitude=math.radians(20.0), yaw_period=8.0, yaw_ramp=0.8,
        altitude_amplitude=0.5, altitude_period=9.0, altitude_ramp=2.0,
        x_amplitude=0.5, x_period=6.0, x_ramp=1.5,
        y_amplitude=0.5, y_period=7.0, y_ramp=1.5,
    )


def _trapezoid(tau: float, a: float):
    """Normalized trapezoidal motion profile on [0, 1].

    Returns (position fraction, velocity in leg lengths per leg time).
    """
    if tau <= 0.0:
        return 0.0, 0.0
    if tau >= 1.0:
        return 1.0, 0.0
    scale = 1.0 / (1.0 - a)
    if tau < a:
        return 0.5 * tau * tau / a * scale, tau / a * scale
    if tau <= 1.0 - a:
        return (tau - 0.5 * a) * scale, scale
    rem = 1.0 - tau
    return 1.0 - 0.5 * rem * rem / a * scale, rem / a * scale


def _square_wave(t: float, period: float, ramp: float):
    """Square wave in [-1, 1] with cubic-smoothed transitions.

    Returns value and rate. Transitions of duration ``ramp`` are centered
    on 0 and period/2, so the wave starts at 0 heading to +1; the rate is
    continuous and vanishes at the plateau junctions.
    """
    tau = t % period
    half = 0.5 * period
    h = 0.5 * ramp

    def blend(x, lo, hi, span):
        # cubic smoothstep from lo to hi as x goes 0 -> span
        u = x / span
        s = u * u * (3.0 - 2.0 * u)
        return lo + (hi - lo) * s, (hi - lo) * 6.0 * u * (1.0 - u) / span

    if tau < h:
        return blend(tau + h, -1.0, 1.0, ramp)
    if tau < half - h:
        return 1.0, 0.0
    if tau < half + h:
        return blend(tau - (half - h), 1.0, -1.0, ramp)
    if tau < period - h:
        return -1.0, 0.0
    return blend(tau - (period - h), -1.0, 1.0, ramp)


def _rect_corners(spec: TrajectorySpec):
    a = spec.altitude
    s = spec.side
    return (
        (0.0, 0.0, a), (s, 0.0, a), (s, s, a), (0.0, s, a), (0.0, 0.0, a),
    )


def sample_reference(spec: TrajectorySpec, t: float):
    """Reference sample at time t: (position, yaw, velocity feedforward).

    Legs are traversed with a trapezoidal speed profile, so position is
    continuous and the feedforward is its exact derivative away from leg
    boundaries (the left limit, zero, is returned at the boundaries).
    """
    if t < 0.0:
        raise ValueError("reference time must be non-negative")

    if spec.kind == "setpoint":
        pos = np.asarray(spec.setpoint, dtype=float).copy()
        vel = np.zeros(3)
        yaw = spec.yaw_setpoint
    else:
        if spec.kind == "rectangular":
            corners = _rect_corners(spec)
            leg_times = (spec.lap_time / 4.0,) * 4
            total = spec.lap_time * spec.laps
            tt = t % spec.lap_time if t < total else 0.0
        else:
            corners = spec.waypoints
            leg_times = spec.segment_times
            total = float(sum(leg_times))
            tt = min(t, total)
        pos = np.asarray(corners[-1], dtype=float).copy()
        vel = np.zeros(3)
        elapsed = 0.0
        for i, leg_t in enumerate(leg_times):
            if tt <= elapsed + leg_t or i == len(leg_times) - 1:
                if tt >= elapsed + leg_t:   # resting at the final corner
                    pos = np.asarray(corners[i + 1], dtype=float).copy()
                    break
                p0 = np.asarray(corners[i], dtype=float)
                p1 = np.asarray(corners[i + 1], dtype=float)
                frac, vfac = _trapezoid((tt - elapsed) / leg_t, spec.accel_fraction)
                pos = p0 + frac * (p1 - p0)
                vel = (p1 - p0) * (vfac / leg_t)
                break
            elapsed += leg_t
        yaw = spec.yaw_setpoint

    if spec.yaw_amplitude != 0.0:
        w, _ = _square_wave(t, spec.yaw_period, spec.yaw_ramp)
        yaw = yaw + spec.yaw_amplitude * w
    for axis, (amp, period, ramp) in enumerate((
            (spec.x_amplitude, spec.x_period, spec.x_ramp),
            (spec.y_amplitude, spec.y_period, spec.y_ramp),
            (spec.altitude_amplitude, spec.altitude_period, spec.altitude_ramp))):
        if amp != 0.0:
            w, wd = _square_wave(t, period, ramp)
            pos[axis] += amp * w
            vel[axis] += amp * wd
    return pos, yaw, vel


@dataclass
class PidGains:
    """Cascade PID fixture constants, tuned once for bounded tracking."""

    pos_kp: tuple = (1.2, 1.2, 1.8)
    pos_ki: tuple = (0.25, 0.25, 0.6)
    pos_kd: tuple = (1.8, 1.8, 2.4)
    pos_int_limit: float = 2.0          # clamp on integrated position error [m s]
    att_kp: tuple = (3.0, 3.0, 0.9)
    att_ki: tuple = (0.8, 0.8, 0.25)
    att_kd: tuple = (0.45, 0.45, 0.35)  # damping on body rates
    att_int_limit: float = 0.5
    tilt_limit: float = 0.35            # roll/pitch command clamp [rad]
    moment_limit: tuple = (0.8, 0.8, 0.12)
    fz_scale_min: float = 0.2           # collective clamp, fractions of m_hat * g
    fz_scale_max: float = 2.5
    m_hat: float = 1.3                  # controller's mass estimate [kg]
    g: float = 9.807

    def __post_init__(self):
        for grp in (self.pos_kp, self.pos_ki, self.pos_kd,
                    self.att_kp, self.att_ki, self.att_kd):
            if any(k < 0.0 for k in grp):
                raise ValueError("PID gains must be non-negative")
        if self.tilt_limit <= 0.0 or any(m <= 0.0 for m in self.moment_limit):
            raise ValueError("command limits must be positive")


@dataclass
class PidState:
    pos_int: np.ndarray = field(default_factory=lambda: np.zeros(3))
    att_int: np.ndarray = field(default_factory=lambda: np.zeros(3))


def wrap_angle(a: float) -> float:
    """Wrap to (-pi, pi]."""
    return math.pi - (math.pi - a) % TWO_PI


def pid_cascade_update(state, ref, gains: PidGains, dt: float, pid: PidState):
    """One cascade PID update.

    ``ref`` is a (position, yaw, velocity) triple from sample_reference.
    The position loop produces a desired acceleration, inverted through
    the small-angle thrust map into tilt commands and collective; the
    attitude loop turns angle errors and measured rates into moments.
    Integrators use simple anti-windup clamping.
    """
    ref_pos, ref_yaw, ref_vel = ref
    pos = state[0:3]
    vel = state[3:6]
    phi, theta, psi = state[6], state[7], state[8]
    p, q, r = state[9], state[10], state[11]

    e_pos = np.asarray(ref_pos, dtype=float) - pos
    e_vel = np.asarray(ref_vel, dtype=float) - vel
    pos_int = np.clip(pid.pos_int + e_pos * dt, -gains.pos_int_limit, gains.pos_int_limit)

    a_des = (np.asarray(gains.pos_kp) * e_pos
             + np.asarray(gains.pos_ki) * pos_int
             + np.asarray(gains.pos_kd) * e_vel)

    # specific force demanded from the rotors (thrust/m = a_des - g e_z)
    m_hat = gains.m_hat
    s_z = a_des[2] - gains.g
    fz = m_hat * s_z / max(math.cos(phi) * math.cos(theta), 0.5)
    fz_hover = m_hat * gains.g
    fz = float(np.clip(fz, -gains.fz_scale_max * fz_hover,
                       -gains.fz_scale_min * fz_hover))

    cpsi, spsi = math.cos(psi), math.sin(psi)
    u_x = m_hat * a_des[0] / fz
    u_y = m_hat * a_des[1] / fz
    theta_d = float(np.clip(u_x * cpsi + u_y * spsi, -gains.tilt_limit, gains.tilt_limit))
    phi_d = float(np.clip(u_x * spsi - u_y * cpsi, -gains.tilt_limit, gains.tilt_limit))

    e_att = np.array([phi_d - phi, theta_d - theta, wrap_angle(ref_yaw - psi)])
    att_int = np.clip(pid.att_int + e_att * dt, -gains.att_int_limit, gains.att_int_limit)

    moments = (np.asarray(gains.att_kp) * e_att
               + np.asarray(gains.att_ki) * att_int
               - np.asarray(gains.att_kd) * np.array([p, q, r]))
    limit = np.asarray(gains.moment_limit)
    moments = np.clip(moments, -limit, limit)

    wrench = np.array([fz, moments[0], moments[1], moments[2]])
    return wrench, PidState(pos_int=pos_int, att_int=att_int)


def rk4_step(deriv, state, wrench, dt: float) -> np.ndarray:
    """Classical fourth-order Runge-Kutta step with the wrench held constant.

    For 12-dimensional vehicle states the yaw component is wrapped to
    (-pi, pi] after the update.
    """
    k1 = deriv(state, wrench)
    k2 = deriv(state + (0.5 * dt) * k1, wrench)
    k3 = deriv(state + (0.5 * dt) * k2, wrench)
    k4 = deriv(state + dt * k3, wrench)
    out = state + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    if out.shape == (12,):
        out[8] = wrap_angle(out[8])
    return out


@dataclass
class SnapshotSet:
    """Time-aligned snapshot matrices from one flight.

    ``x_tr`` holds inertial velocities, ``u_tr`` the thrust column of the
    rotation matrix scaled by collective, ``x_ro`` body rates and ``u_ro``
    body moments. Derivative blocks are filled by estimate_derivatives.
    """

    t: np.ndarray
    x_tr: np.ndarray
    euler: np.ndarray
    x_ro: np.ndarray
    u_tr: np.ndarray
    u_ro: np.ndarray
    omega_r: np.ndarray
    xdot_tr: np.ndarray | None = None
    xdot_ro: np.ndarray | None = None

    _CHANNELS = {
        "xdot": ("x_tr", 0), "ydot": ("x_tr", 1), "zdot": ("x_tr", 2),
        "phi": ("euler", 0), "theta": ("euler", 1), "psi": ("euler", 2),
        "p": ("x_ro", 0), "q": ("x_ro", 1), "r": ("x_ro", 2),
        "u_tr1": ("u_tr", 0), "u_tr2": ("u_tr", 1), "u_tr3": ("u_tr", 2),
        "L": ("u_ro", 0), "M": ("u_ro", 1), "N": ("u_ro", 2),
        "omega_r": ("omega_r", None),
    }

    def __post_init__(self):
        self.validate()

    def validate(self):
        w = len(self.t)
        if w < 2:
            raise TooFewSamples(f"snapshot set needs >= 2 rows, got {w}")
        blocks = [self.x_tr, self.euler, self.x_ro, self.u_tr, self.u_ro]
        if any(b.shape != (w, 3) for b in blocks) or self.omega_r.shape != (w,):
            raise DataError("snapshot blocks disagree on row count")
        steps = np.diff(self.t)
        if np.any(steps <= 0.0):
            raise DataError("snapshot times must be strictly increasing")
        dt = steps[0]
        if np.max(np.abs(steps - dt)) > 1e-9 * max(dt, 1.0):
            raise DataError("snapshot times must be uniformly spaced")
        for d in (self.xdot_tr, self.xdot_ro):
            if d is not None and d.shape != (w, 3):
                raise DataError("derivative block shape mismatch")

    @property
    def rows(self) -> int:
        return len(self.t)

    @property
    def dt(self) -> float:
        return float(self.t[1] - self.t[0])

    def channel(self, name: str) -> np.ndarray:
        from .errors import UnknownChannel
        try:
            attr, col = self._CHANNELS[name]
        except KeyError:
            raise UnknownChannel(name) from None
        block = getattr(self, attr)
        return block if col is None else block[:, col]

    def slice(self, start: int, stop: int) -> "SnapshotSet":
        sel = slice(start, stop)
        return SnapshotSet(
            t=self.t[sel].copy(), x_tr=self.x_tr[sel].copy(),
            euler=self.euler[sel].copy(), x_ro=self.x_ro[sel].copy(),
            u_tr=self.u_tr[sel].copy(), u_ro=self.u_ro[sel].copy(),
            omega_r=self.omega_r[sel].copy(),
            xdot_tr=None if self.xdot_tr is None else self.xdot_tr[sel].copy(),
            xdot_ro=None if self.xdot_ro is None else self.xdot_ro[sel].copy(),
        )


def initial_state(traj: TrajectorySpec) -> np.ndarray:
    """Rest state on the reference at t = 0."""
    pos, yaw, _ = sample_reference(traj, 0.0)
    state = np.zeros(12)
    state[0:3] = pos
    state[8] = yaw
    return state


def run_data_collection(params: VehicleParams, sim: SimConfig,
                        traj: TrajectorySpec, gains: PidGains) -> SnapshotSet:
    """Fly the closed PID loop and log identification snapshots.

    States are logged at the sample instants. The commanded wrench is a
    zero-order-hold staircase, so the logged input row is its average over
    the differencing window centered on the same instant; pairing the
    windowed mean with centrally differenced derivatives removes the
    half-step hold bias. The logged translational input is the thrust
    column of the body-to-inertial rotation at the instant, scaled by the
    averaged collective.
    """
    n_steps = int(round(sim.duration / sim.dt))
    state = initial_state(traj)
    pid = PidState()
    deriv = lambda s, u: dynamics.state_derivative(s, u, params)

    n_log = n_steps // sim.decimation + 1
    t_log = np.empty(n_log)
    x_tr = np.empty((n_log, 3))
    euler = np.empty((n_log, 3))
    x_ro = np.empty((n_log, 3))
    wrenches = np.empty((n_steps + 1, 4))
    omega_steps = np.empty(n_steps + 1)

    k = 0
    for i in range(n_steps + 1):
        t = i * sim.dt
        ref = sample_reference(traj, t)
        wrench, pid = pid_cascade_update(state, ref, gains, sim.dt, pid)
        wrenches[i] = wrench
        omega_steps[i] = dynamics.rotor_speed_from_wrench(wrench, params)
        if i % sim.decimation == 0:
            t_log[k] = t
            x_tr[k] = state[3:6]
            euler[k] = state[6:9]
            x_ro[k] = state[9:12]
            k += 1
        if i < n_steps:
            state = rk4_step(deriv, state, wrench, sim.dt)
            if not np.all(np.isfinite(state)) or np.max(np.abs(state)) > sim.diverge_bound:
                raise DivergedSimulation(f"state left envelope at t = {t + sim.dt:.3f} s")

    u_tr = np.empty((n_log, 3))
    u_ro = np.empty((n_log, 3))
    omega_r = np.empty(n_log)
    d = sim.decimation
    for j in range(k):
        i = j * d
        lo = max(i - d, 0)
        hi = min(i + d, n_steps)            # commands active over the window
        w_avg = wrenches[lo:hi].mean(axis=0) if hi > lo else wrenches[i]
        rot = rotation_body_to_inertial(euler[j])
        u_tr[j] = rot[:, 2] * w_avg[0]
        u_ro[j] = w_avg[1:4]
        omega_r[j] = omega_steps[lo:hi].mean() if hi > lo else omega_steps[i]

    return SnapshotSet(t=t_log[:k], x_tr=x_tr[:k], euler=euler[:k], x_ro=x_ro[:k],
                       u_tr=u_tr[:k], u_ro=u_ro[:k], omega_r=omega_r[:k])


def write_snapshots(snap: SnapshotSet, path) -> None:
    """Write the snapshot CSV (full precision, lossless round trip)."""
    cols = np.column_stack([
        snap.t, snap.x_tr, snap.euler, snap.x_ro,
        snap.u_tr, snap.u_ro, snap.omega_r,
    ])
    try:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(SNAPSHOT_HEADER + "\n")
            for row in cols.tolist():
                fh.write(",".join(repr(v) for v in row) + "\n")
    except OSError as exc:
        raise OSError(f"cannot write snapshot CSV {path}: {exc}") from exc


def read_snapshots(path) -> SnapshotSet:
    """Read a snapshot CSV produced by write_snapshots."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            header = fh.readline().strip()
            if header != SNAPSHOT_HEADER:
                raise DataError(f"unexpected snapshot header in {path}")
            data = np.loadtxt(fh, delimiter=",", ndmin=2)
    except OSError as exc:
        raise OSError(f"cannot read snapshot CSV {path}: {exc}") from exc
    if data.size == 0 or data.shape[1] != 17:
        raise DataError(f"snapshot CSV {path} has wrong column count")
    return SnapshotSet(
        t=data[:, 0], x_tr=data[:, 1:4], euler=data[:, 4:7], x_ro=data[:, 7:10],
        u_tr=data[:, 10:13], u_ro=data[:, 13:16], omega_r=data[:, 16],
    )
