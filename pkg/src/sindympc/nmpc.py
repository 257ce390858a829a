"""Receding-horizon nonlinear MPC with spherical keep-out constraints.

The finite-horizon problem is reduced to the input sequence by single
shooting (RK4 discretization of the prediction model), solved with a
Gauss-Newton SQP: residual linearization through the model's analytic
Jacobians, a least-squares step, projection onto the input box inside a
backtracking line search, and an escalating quadratic penalty for the
obstacle inequality with a post-hoc feasibility check.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import dynamics
from .dynamics import VehicleParams
from .errors import DivergedSimulation, InfeasibleStart, SingularAttitude
from .sim import (PidGains, SimConfig, SnapshotSet, TrajectorySpec,
                  rk4_step, sample_reference, wrap_angle)


@dataclass(frozen=True)
class ObstacleSpec:
    center: tuple
    d_min: float

    def __post_init__(self):
        if self.d_min <= 0.0:
            raise ValueError("keep-out radius must be positive")
        if not all(math.isfinite(c) for c in self.center):
            raise ValueError("obstacle center must be finite")


def obstacle_margin(position, obs: ObstacleSpec) -> float:
    """Signed clearance: distance to center minus keep-out radius."""
    d = np.asarray(position, dtype=float) - np.asarray(obs.center, dtype=float)
    return float(np.linalg.norm(d) - obs.d_min)


@dataclass
class MpcConfig:
    horizon: int = 20
    dt: float = 0.05
    q: tuple = (20.0, 20.0, 20.0, 2.0)       # output-error weights
    r: tuple = (0.1, 1.0, 1.0, 1.0)          # input-deviation weights
    u_min: tuple = (-30.0, -1.5, -1.5, -0.3)
    u_max: tuple = (0.0, 1.5, 1.5, 0.3)
    obstacles: tuple = ()
    mu0: float = 500.0                        # initial obstacle penalty weight
    mu_scale: float = 10.0
    max_escalations: int = 3
    max_iters: int = 30                       # SQP iterations per penalty level
    tol: float = 1e-4                         # step-norm convergence tolerance
    stall_rtol: float = 1e-9                  # relative cost progress considered a stall
    ls_shrink: float = 0.5                    # backtracking factor
    ls_max: int = 12
    delta_obs: float = 0.01                   # allowed predicted penetration [m]
    margin_pad: float = 0.0                   # extra radius used while planning [m]
    output_indices: tuple = (0, 1, 2, 8)      # y = (x, y, z, yaw)
    yaw_output: int = 3                       # position of yaw in y, -1 if absent
    position_indices: tuple = (0, 1, 2)
    u_ref: tuple | None = None                # input-deviation reference

    def __post_init__(self):
        if self.horizon < 2:
            raise ValueError("horizon must be at least 2")
        if self.dt <= 0.0:
            raise ValueError("mpc step must be positive")
        if any(w < 0.0 for w in self.q) or any(w <= 0.0 for w in self.r):
            raise ValueError("need q >= 0 and r > 0")
        if len(self.u_min) != len(self.u_max) or \
                any(a >= b for a, b in zip(self.u_min, self.u_max)):
            raise ValueError("need u_min < u_max componentwise")
        if len(self.q) != len(self.output_indices):
            raise ValueError("one q weight per output")


@dataclass
class OcpSolution:
    inputs: np.ndarray          # (N, n_u)
    states: np.ndarray          # (N + 1, n_x)
    cost: float
    max_penetration: float      # worst keep-out violation on the prediction [m]
    iterations: int
    solve_time: float
    converged: bool
    cost_history: list = field(default_factory=list)
    mu_final: float = 0.0


def rollout(model, x_init, inputs, dt: float) -> np.ndarray:
    """Forward RK4 rollout of the model; returns N+1 states incl. x_init."""
    inputs = np.atleast_2d(inputs)
    n = inputs.shape[0]
    states = np.empty((n + 1, len(x_init)))
    states[0] = x_init
    for k in range(n):
        states[k + 1] = rk4_step(model.f, states[k], inputs[k], dt)
    return states


def _output_error(y, ref, cfg: MpcConfig):
    e = y - ref
    if cfg.yaw_output >= 0:
        e[cfg.yaw_output] = wrap_angle(e[cfg.yaw_output])
    return e


def _penalized_cost(model, x_init, inputs, refs, cfg: MpcConfig, mu: float):
    """Tracking cost, input-deviation cost, and obstacle penalty for one
    input sequence; infinite when the rollout leaves the attitude envelope."""
    try:
        states = rollout(model, x_init, inputs, cfg.dt)
    except SingularAttitude:
        return math.inf, None
    if not np.all(np.isfinite(states)):
        return math.inf, None
    q = np.asarray(cfg.q)
    r = np.asarray(cfg.r)
    u_ref = np.zeros(inputs.shape[1]) if cfg.u_ref is None else np.asarray(cfg.u_ref)
    out_idx = list(cfg.output_indices)
    cost = 0.0
    for k in range(inputs.shape[0]):
        e = _output_error(states[k + 1][out_idx], refs[k], cfg)
        du = inputs[k] - u_ref
        cost += float(e @ (q * e) + du @ (r * du))
        if cfg.obstacles:
            pos = states[k + 1][list(cfg.position_indices)]
            for obs in cfg.obstacles:
                viol = max(0.0, -(obstacle_margin(pos, obs) - cfg.margin_pad))
                cost += mu * viol * viol
    return cost, states


def ocp_cost(model, x_init, inputs, refs, cfg: MpcConfig, mu: float | None = None):
    """Objective value of an input sequence (obstacle penalty at weight mu,
    defaulting to the configured initial weight)."""
    cost, _ = _penalized_cost(model, x_init, np.atleast_2d(inputs), np.atleast_2d(refs),
                              cfg, cfg.mu0 if mu is None else mu)
    return cost


def _linearize(model, x_init, inputs, dt: float):
    """Rollout with input sensitivities via the RK4 chain rule.

    States follow the exact RK4 map. Step transition Jacobians freeze the
    stage Jacobians at the step start (fourth-order Taylor of the matrix
    exponential), which is exact for linear models and a standard
    inexact-Gauss-Newton shortcut otherwise. Returns (states, sens) where
    sens[k] is d(state_{k+1})/d(vec U).
    """
    n = inputs.shape[0]
    n_x = len(x_init)
    n_u = inputs.shape[1]
    states = np.empty((n + 1, n_x))
    states[0] = x_init
    sens = np.zeros((n, n_x, n * n_u))
    eye = np.eye(n_x)
    h = dt
    for k in range(n):
        x = states[k]
        u = inputs[k]
        k1, a, b = model.f_and_jac(x, u)
        k2 = model.f(x + 0.5 * h * k1, u)
        k3 = model.f(x + 0.5 * h * k2, u)
        k4 = model.f(x + h * k3, u)
        states[k + 1] = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if n_x == 12:
            states[k + 1, 8] = wrap_angle(states[k + 1, 8])
        if not np.all(np.isfinite(states[k + 1])):
            raise SingularAttitude("prediction rolled out to non-finite values")

        ah = h * a
        # a_d = I + ah + ah^2/2 + ah^3/6 + ah^4/24, via Horner
        a_d = eye + ah @ (eye + 0.5 * (ah @ (eye + (ah / 3.0) @ (eye + 0.25 * ah))))
        # b_d = h (I + ah/2 + ah^2/6 + ah^3/24) b
        b_d = h * (b + ah @ (0.5 * b + ah @ (b / 6.0 + (ah / 24.0) @ b)))

        s = sens[k]
        if k:
            np.matmul(a_d, sens[k - 1], out=s)
        s[:, k * n_u:(k + 1) * n_u] += b_d
    return states, sens


class _SoftEnvelope:
    """Prediction-model wrapper for optimizer internals.

    The strict model raises once pitch nears +/-90 deg, but the solver
    needs its iterates to stay evaluable everywhere, so pitch is clamped
    just inside the envelope before evaluation. Predictions there are
    meaningless and expensive, which is exactly what steers the search
    back inside.
    """

    PITCH_CLAMP = math.pi / 2.0 - 0.15

    def __init__(self, model):
        self._model = model
        self.n_x = getattr(model, "n_x", None)
        self.n_u = getattr(model, "n_u", None)

    def _clamped(self, x):
        if len(x) == 12 and abs(x[7]) > self.PITCH_CLAMP:
            x = np.array(x, dtype=float)
            x[7] = math.copysign(self.PITCH_CLAMP, x[7])
        return x

    def f(self, x, u):
        return self._model.f(self._clamped(x), u)

    def f_and_jac(self, x, u):
        return self._model.f_and_jac(self._clamped(x), u)

    def hover_input(self):
        return self._model.hover_input()


def _max_penetration(states, cfg: MpcConfig) -> float:
    if not cfg.obstacles:
        return 0.0
    worst = 0.0
    pos_idx = list(cfg.position_indices)
    for k in range(1, states.shape[0]):
        pos = states[k][pos_idx]
        for obs in cfg.obstacles:
            worst = max(worst, -obstacle_margin(pos, obs))
    return worst


def solve_ocp(model, x_init, refs, cfg: MpcConfig, warm_start=None,
              mu_init: float | None = None) -> OcpSolution:
    """Solve the finite-horizon problem from x_init.

    Returns the best iterate with diagnostics; ``converged`` is False when
    the iteration cap was hit (degraded-mode result, still box-feasible).
    ``mu_init`` lets a receding-horizon caller carry the escalated obstacle
    penalty weight over from the previous solve.
    """
    t0 = time.perf_counter()
    refs = np.atleast_2d(np.asarray(refs, dtype=float))
    n = cfg.horizon
    if refs.shape[0] != n:
        raise ValueError(f"need {n} reference rows, got {refs.shape[0]}")
    x_init = np.asarray(x_init, dtype=float)
    u_lo = np.asarray(cfg.u_min, dtype=float)
    u_hi = np.asarray(cfg.u_max, dtype=float)
    n_u = len(u_lo)
    u_ref = np.zeros(n_u) if cfg.u_ref is None else np.asarray(cfg.u_ref, dtype=float)

    for obs in cfg.obstacles:
        margin = obstacle_margin(x_init[list(cfg.position_indices)], obs)
        if margin < -0.5 * obs.d_min:
            raise InfeasibleStart(
                f"start violates keep-out by {-margin:.3f} m (> d_min/2)")

    model = _SoftEnvelope(model)
    u_rest = np.clip(u_ref, u_lo, u_hi)
    if warm_start is not None and np.asarray(warm_start).shape == (n, n_u):
        u = np.clip(np.asarray(warm_start, dtype=float), u_lo, u_hi)
    else:
        u = np.tile(u_rest, (n, 1))

    sqrt_q = np.sqrt(np.asarray(cfg.q))
    sqrt_r = np.sqrt(np.asarray(cfg.r))
    out_idx = list(cfg.output_indices)
    pos_idx = list(cfg.position_indices)

    mu = cfg.mu0 if mu_init is None else max(float(mu_init), cfg.mu0)
    total_iters = 0
    converged = True
    cost_history = []
    cost, states = _penalized_cost(model, x_init, u, refs, cfg, mu)
    escalations = 0

    # the input-deviation block of the residual Jacobian is constant
    jac_in = np.kron(np.eye(n), np.diag(sqrt_r))

    while True:
        level_converged = False
        while total_iters < cfg.max_iters:
            total_iters += 1
            try:
                states, sens = _linearize(model, x_init, u, cfg.dt)
            except (SingularAttitude, FloatingPointError):
                # iterate rolled out to non-finite values; restart near rest
                u = np.tile(u_rest, (n, 1))
                cost, states = _penalized_cost(model, x_init, u, refs, cfg, mu)
                states, sens = _linearize(model, x_init, u, cfg.dt)

            err = np.empty((n, len(out_idx)))
            for k in range(n):
                err[k] = _output_error(states[k + 1][out_idx], refs[k], cfg)
            res_out = (sqrt_q * err).ravel()
            jac_out = (sqrt_q[None, :, None] * sens[:, out_idx, :]).reshape(-1, n * n_u)
            res_in = (sqrt_r * (u - u_ref)).ravel()
            res_blocks = [res_out, res_in]
            jac_blocks = [jac_out, jac_in]
            if cfg.obstacles:
                smu = math.sqrt(mu)
                for k in range(n):
                    pos = states[k + 1][pos_idx]
                    for obs in cfg.obstacles:
                        margin = obstacle_margin(pos, obs) - cfg.margin_pad
                        if margin < 0.0:
                            d = pos - np.asarray(obs.center)
                            dist = np.linalg.norm(d)
                            res_blocks.append(np.array([-smu * margin]))
                            grad = -smu * (d / max(dist, 1e-9)) @ sens[k][pos_idx]
                            jac_blocks.append(grad[None, :])

            res = np.concatenate(res_blocks)
            jac = np.vstack(jac_blocks)
            step, *_ = np.linalg.lstsq(jac, -res, rcond=None)
            step = step.reshape(n, n_u)

            # projected full step already negligible: stationary point
            if float(np.max(np.abs(np.clip(u + step, u_lo, u_hi) - u))) < cfg.tol:
                level_converged = True
                break

            alpha = 1.0
            accepted = False
            for _ in range(cfg.ls_max):
                u_new = np.clip(u + alpha * step, u_lo, u_hi)
                move = float(np.max(np.abs(u_new - u)))
                if move < cfg.tol:
                    break
                new_cost, new_states = _penalized_cost(model, x_init, u_new, refs, cfg, mu)
                if new_cost < cost:
                    accepted = True
                    break
                alpha *= cfg.ls_shrink
            if not accepted:
                level_converged = True
                break
            progress = cost - new_cost
            u = u_new
            cost = new_cost
            states = new_states
            cost_history.append(cost)
            if move < cfg.tol or progress < cfg.stall_rtol * max(1.0, abs(cost)):
                level_converged = True
                break
        if not level_converged:
            converged = False

        penetration = _max_penetration(states, cfg)
        if not cfg.obstacles or penetration <= cfg.delta_obs or \
                escalations >= cfg.max_escalations or total_iters >= cfg.max_iters:
            break
        mu *= cfg.mu_scale
        escalations += 1
        cost, states = _penalized_cost(model, x_init, u, refs, cfg, mu)

    return OcpSolution(
        inputs=u, states=states, cost=cost,
        max_penetration=_max_penetration(states, cfg),
        iterations=total_iters, solve_time=time.perf_counter() - t0,
        converged=converged, cost_history=cost_history, mu_final=mu,
    )


def hover_reference_input(model) -> np.ndarray:
    """Input-deviation reference for vehicle models: the model's own hover."""
    return model.hover_input()


class MpcController:
    """Single-owner receding-horizon controller.

    Warm-starts each solve from the shifted previous input sequence and
    carries the escalated obstacle penalty weight forward while the
    constraint stays active, decaying it one scale per step otherwise.
    """

    def __init__(self, model, cfg: MpcConfig):
        if cfg.u_ref is None and getattr(model, "n_x", 0) == 12:
            from dataclasses import replace
            cfg = replace(cfg, u_ref=tuple(hover_reference_input(model)))
        self.model = model
        self.cfg = cfg
        self._prev = None
        self._mu = cfg.mu0

    def step(self, x_now, refs):
        """Solve the OCP warm-started from the shifted previous solution and
        return (first input, full solution)."""
        warm = None
        if self._prev is not None:
            warm = np.vstack([self._prev[1:], self._prev[-1:]])
        sol = solve_ocp(self.model, x_now, refs, self.cfg, warm_start=warm,
                        mu_init=self._mu)
        self._prev = sol.inputs
        if sol.max_penetration > 0.0:
            self._mu = sol.mu_final
        else:
            self._mu = max(self.cfg.mu0, sol.mu_final / self.cfg.mu_scale)
        return sol.inputs[0].copy(), sol


FLIGHT_LOG_HEADER = ("t,x,y,z,x_ref,y_ref,z_ref,phi,theta,psi,p,q,r,"
                     "fz,L,M,N,solve_time_s,min_obstacle_margin_m")


@dataclass
class FlightLog:
    rows: np.ndarray            # columns per FLIGHT_LOG_HEADER
    rmse: np.ndarray            # per-axis position RMSE over every plant step
    min_margin: float           # worst keep-out clearance over every plant step
    solve_times: np.ndarray
    iterations: np.ndarray
    saturated_steps: int
    converged_all: bool

    def solve_time_stats(self):
        return float(np.mean(self.solve_times)), float(np.max(self.solve_times))


def write_flight_log(log: FlightLog, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(FLIGHT_LOG_HEADER + "\n")
        for row in log.rows.tolist():
            fh.write(",".join(repr(v) for v in row) + "\n")


def reference_min_margin(traj: TrajectorySpec, obstacles, duration: float,
                         dt: float = 0.01) -> float:
    """Worst keep-out clearance of the raw reference path (no controller)."""
    worst = math.inf
    t = 0.0
    while t <= duration:
        pos, _, _ = sample_reference(traj, t)
        for obs in obstacles:
            worst = min(worst, obstacle_margin(pos, obs))
        t += dt
    return worst


def run_closed_loop(plant: VehicleParams, model, cfg: MpcConfig,
                    traj: TrajectorySpec, sim: SimConfig) -> FlightLog:
    """Track a course with the true plant in the loop.

    The controller runs every cfg.dt with zero-order hold; its wrench is
    allocated to clamped rotor thrusts and remixed before it reaches the
    plant. States, references, commands, solve times, and obstacle margins
    are logged once per controller period; tracking RMSE and the minimum
    margin are accumulated at every plant step.
    """
    steps_per_ctrl = int(round(cfg.dt / sim.dt))
    if abs(steps_per_ctrl * sim.dt - cfg.dt) > 1e-9:
        raise ValueError("controller period must be a multiple of the plant step")
    n_ctrl = int(round(sim.duration / cfg.dt))

    controller = MpcController(model, cfg)
    cfg = controller.cfg
    state = np.zeros(12)
    pos0, yaw0, _ = sample_reference(traj, 0.0)
    state[0:3] = pos0
    state[8] = yaw0

    deriv = lambda s, u: dynamics.state_derivative(s, u, plant)
    rows = np.empty((n_ctrl, 19))
    solve_times = np.empty(n_ctrl)
    iterations = np.empty(n_ctrl, dtype=int)
    err_sq = np.zeros(3)
    n_err = 0
    min_margin = math.inf
    saturated = 0
    converged_all = True

    for i in range(n_ctrl):
        t = i * cfg.dt
        refs = np.empty((cfg.horizon, 4))
        for k in range(cfg.horizon):
            pos, yaw, _ = sample_reference(traj, t + (k + 1) * cfg.dt)
            refs[k, 0:3] = pos
            refs[k, 3] = yaw
        wrench, sol = controller.step(state, refs)
        converged_all &= sol.converged
        thrusts, sat = dynamics.inverse_mixer(wrench, plant)
        saturated += int(sat)
        applied = dynamics.mixer(thrusts, plant)

        ref_now, _, _ = sample_reference(traj, t)
        margin_now = min((obstacle_margin(state[0:3], o) for o in cfg.obstacles),
                         default=math.inf)
        rows[i] = [t, state[0], state[1], state[2], ref_now[0], ref_now[1], ref_now[2],
                   state[6], state[7], state[8], state[9], state[10], state[11],
                   applied[0], applied[1], applied[2], applied[3],
                   sol.solve_time, margin_now]
        solve_times[i] = sol.solve_time
        iterations[i] = sol.iterations

        for j in range(steps_per_ctrl):
            ref_pos, _, _ = sample_reference(traj, t + j * sim.dt)
            e = state[0:3] - ref_pos
            err_sq += e * e
            n_err += 1
            for obs in cfg.obstacles:
                min_margin = min(min_margin, obstacle_margin(state[0:3], obs))
            state = rk4_step(deriv, state, applied, sim.dt)
            if not np.all(np.isfinite(state)) or \
                    np.max(np.abs(state)) > sim.diverge_bound:
                raise DivergedSimulation(
                    f"closed loop diverged at t = {t + (j + 1) * sim.dt:.3f} s")

    return FlightLog(
        rows=rows, rmse=np.sqrt(err_sq / n_err), min_margin=min_margin,
        solve_times=solve_times, iterations=iterations,
        saturated_steps=saturated, converged_all=bool(converged_all),
    )
