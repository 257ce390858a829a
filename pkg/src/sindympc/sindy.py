"""Sparse identification of the multirotor dynamics.

Derivatives are estimated from snapshot logs by central differences, a
physics-informed candidate library is evaluated column by column, and
sequential thresholded least squares prunes it to a sparse coefficient
matrix. The identified blocks combine with the known kinematics into a
smooth predictive model with closed-form Jacobians for the controller.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import dynamics
from .dynamics import VehicleParams
from .errors import DataError, RankDeficient, TooFewSamples, UnknownChannel
from .sim import SnapshotSet, rk4_step


@dataclass(frozen=True)
class Term:
    """One candidate function: the product of the named snapshot channels.

    An empty factor tuple is the constant 1.
    """
    name: str
    factors: tuple


@dataclass(frozen=True)
class LibrarySpec:
    terms: tuple

    def __post_init__(self):
        names = [t.name for t in self.terms]
        if len(set(names)) != len(names):
            raise ValueError("library term names must be unique")

    @property
    def names(self):
        return tuple(t.name for t in self.terms)

    def __len__(self):
        return len(self.terms)


def translational_library() -> LibrarySpec:
    """Thrust inputs, a constant, linear velocities, squares and cross terms."""
    t = [Term(n, (n,)) for n in ("u_tr1", "u_tr2", "u_tr3")]
    t.append(Term("1", ()))
    t += [Term(n, (n,)) for n in ("xdot", "ydot", "zdot")]
    t += [Term(f"{n}^2", (n, n)) for n in ("xdot", "ydot", "zdot")]
    t += [Term("xdot*ydot", ("xdot", "ydot")),
          Term("ydot*zdot", ("ydot", "zdot")),
          Term("xdot*zdot", ("xdot", "zdot"))]
    return LibrarySpec(tuple(t))


def rotational_library(include_gyro: bool = True) -> LibrarySpec:
    """Moments, inertial coupling products, rotor-speed products, constant,
    linear rates and squares."""
    t = [Term(n, (n,)) for n in ("L", "M", "N")]
    t += [Term("p*q", ("p", "q")), Term("q*r", ("q", "r")), Term("p*r", ("p", "r"))]
    if include_gyro:
        t += [Term("p*omega_r", ("p", "omega_r")), Term("q*omega_r", ("q", "omega_r"))]
    t.append(Term("1", ()))
    t += [Term(n, (n,)) for n in ("p", "q", "r")]
    t += [Term(f"{n}^2", (n, n)) for n in ("p", "q", "r")]
    return LibrarySpec(tuple(t))


def estimate_derivatives(snap: SnapshotSet) -> SnapshotSet:
    """Fill the derivative blocks by second-order finite differences.

    Interior rows use central differences; the first and last rows use
    one-sided three-point stencils of the same order.
    """
    if snap.rows < 3:
        raise TooFewSamples("derivative estimation needs at least 3 rows")
    dt = snap.dt

    def diff(x):
        d = np.empty_like(x)
        d[1:-1] = (x[2:] - x[:-2]) / (2.0 * dt)
        d[0] = (-3.0 * x[0] + 4.0 * x[1] - x[2]) / (2.0 * dt)
        d[-1] = (3.0 * x[-1] - 4.0 * x[-2] + x[-3]) / (2.0 * dt)
        return d

    return SnapshotSet(
        t=snap.t, x_tr=snap.x_tr, euler=snap.euler, x_ro=snap.x_ro,
        u_tr=snap.u_tr, u_ro=snap.u_ro, omega_r=snap.omega_r,
        xdot_tr=diff(snap.x_tr), xdot_ro=diff(snap.x_ro),
    )


def build_library(snap: SnapshotSet, spec: LibrarySpec):
    """Evaluate every candidate term at every snapshot.

    Returns the w-by-k library matrix and the term names.
    """
    w = snap.rows
    psi = np.empty((w, len(spec)))
    for j, term in enumerate(spec.terms):
        col = np.ones(w)
        for ch in term.factors:
            col = col * snap.channel(ch)
        psi[:, j] = col
    return psi, spec.names


def stls(psi: np.ndarray, xdot: np.ndarray, threshold: float,
         max_iters: int = 10, term_names=None):
    """Sequential thresholded least squares, column by column.

    Columns are scaled to unit RMS for conditioning; thresholding acts on
    the rescaled physical-unit coefficients. Each output column is solved,
    sub-threshold coefficients are zeroed, and the fit is repeated on the
    surviving support until a fixed point. ``max_iters`` bounds the prune
    rounds; a final cleanup still guarantees every returned coefficient is
    exactly zero or at least ``threshold`` in magnitude and least-squares
    optimal over its support.

    Returns (coefficients, diagnostics) where diagnostics carries per-column
    iteration counts and residual RMS values.
    """
    psi = np.asarray(psi, dtype=float)
    xdot = np.atleast_2d(np.asarray(xdot, dtype=float))
    if xdot.shape[0] == 1 and psi.shape[0] != 1:
        xdot = xdot.T
    w, k = psi.shape
    if threshold < 0.0:
        raise ValueError("threshold must be non-negative")
    if term_names is None:
        term_names = tuple(f"term_{j}" for j in range(k))

    norms = np.sqrt(np.mean(psi ** 2, axis=0))
    usable = norms > 0.0
    psi_n = np.zeros_like(psi)
    psi_n[:, usable] = psi[:, usable] / norms[usable]

    m = xdot.shape[1]
    sigma = np.zeros((k, m))
    iters = np.zeros(m, dtype=int)
    resid = np.zeros(m)

    for j in range(m):
        y = xdot[:, j]
        active = usable.copy()
        coef = np.zeros(k)
        if w < int(active.sum()):
            raise RankDeficient(j, np.asarray(term_names)[active])

        def solve(mask):
            cols = np.flatnonzero(mask)
            if cols.size == 0:
                return np.zeros(k), float(np.sqrt(np.mean(y ** 2)))
            sol, _, rank, _ = np.linalg.lstsq(psi_n[:, cols], y, rcond=None)
            if rank < cols.size:
                raise RankDeficient(j, np.asarray(term_names)[cols])
            full = np.zeros(k)
            full[cols] = sol / norms[cols]
            rms = float(np.sqrt(np.mean((y - psi[:, cols] @ full[cols]) ** 2)))
            return full, rms

        coef, rms = solve(active)
        rounds = 1
        for _ in range(max_iters):
            small = active & (np.abs(coef) < threshold)
            if not np.any(small):
                break
            active &= ~small
            coef, rms = solve(active)
            rounds += 1
        else:
            # prune rounds exhausted: finish zeroing without counting
            while True:
                small = active & (np.abs(coef) < threshold)
                if not np.any(small):
                    break
                active &= ~small
                coef, rms = solve(active)

        sigma[:, j] = coef
        iters[j] = rounds
        resid[j] = rms

    diagnostics = {"iterations": iters.tolist(), "residual_rms": resid.tolist()}
    return sigma, diagnostics


@dataclass
class SparseModel:
    """Identified coefficient blocks plus everything needed to evaluate them.

    ``synthesis`` carries the mixer geometry and the rotor speed constant so
    the model can reconstruct the summed rotor speed from a commanded wrench
    the same way the plant does.
    """

    sigma_tr: np.ndarray
    sigma_ro: np.ndarray
    tr_spec: LibrarySpec
    ro_spec: LibrarySpec
    threshold: float
    metadata: dict = field(default_factory=dict)
    synthesis: dict = field(default_factory=dict)

    def __post_init__(self):
        self.sigma_tr = np.asarray(self.sigma_tr, dtype=float)
        self.sigma_ro = np.asarray(self.sigma_ro, dtype=float)
        if self.sigma_tr.shape != (len(self.tr_spec), 3):
            raise ValueError("translational coefficient shape mismatch")
        if self.sigma_ro.shape != (len(self.ro_spec), 3):
            raise ValueError("rotational coefficient shape mismatch")
        for sig in (self.sigma_tr, self.sigma_ro):
            nz = sig[sig != 0.0]
            if nz.size and np.min(np.abs(nz)) < self.threshold:
                raise ValueError("nonzero coefficient below threshold")
            if not np.all(np.isfinite(sig)):
                raise ValueError("coefficients must be finite")


def default_synthesis(params: VehicleParams) -> dict:
    return {"d_x": params.d_x, "d_y": params.d_y, "c_t": params.c_t,
            "k_omega": params.k_omega, "t_max": params.t_max}


def fit_translational(snap: SnapshotSet, threshold: float = 0.008,
                      max_iters: int = 10):
    """Regress measured accelerations onto the translational library."""
    if snap.xdot_tr is None:
        raise DataError("derivatives missing; run estimate_derivatives first")
    spec = translational_library()
    psi, names = build_library(snap, spec)
    sigma, diag = stls(psi, snap.xdot_tr, threshold, max_iters, names)
    return sigma, spec, diag


def fit_rotational(snap: SnapshotSet, threshold: float = 0.008,
                   max_iters: int = 10, include_gyro: bool = True):
    """Regress measured angular accelerations onto the rotational library."""
    if snap.xdot_ro is None:
        raise DataError("derivatives missing; run estimate_derivatives first")
    spec = rotational_library(include_gyro=include_gyro)
    psi, names = build_library(snap, spec)
    sigma, diag = stls(psi, snap.xdot_ro, threshold, max_iters, names)
    return sigma, spec, diag


def fit_model(snap: SnapshotSet, params: VehicleParams, threshold: float = 0.008,
              max_iters: int = 10, include_gyro: bool = True) -> SparseModel:
    """Convenience wrapper: both blocks plus metadata in one SparseModel."""
    sigma_tr, tr_spec, d_tr = fit_translational(snap, threshold, max_iters)
    sigma_ro, ro_spec, d_ro = fit_rotational(snap, threshold, max_iters, include_gyro)
    return SparseModel(
        sigma_tr=sigma_tr, sigma_ro=sigma_ro, tr_spec=tr_spec, ro_spec=ro_spec,
        threshold=threshold,
        metadata={"translational": d_tr, "rotational": d_ro,
                  "max_iters": max_iters, "rows": snap.rows},
        synthesis=default_synthesis(params),
    )


def model_from_params(params: VehicleParams, include_aero: bool = True,
                      include_gyro: bool | None = None) -> SparseModel:
    """Exact-coefficient model implied by known vehicle parameters.

    Used both as the nominal prediction model (aero and gyro switched off,
    payload excluded by the caller) and as ground truth in recovery reports.
    """
    if include_gyro is None:
        include_gyro = params.j_r > 0.0
    m_t = params.m_t
    ix, iy, iz = params.i_t
    tr_spec = translational_library()
    ro_spec = rotational_library(include_gyro=include_gyro)

    tr = {name: np.zeros(3) for name in tr_spec.names}
    tr["u_tr1"][0] = 1.0 / m_t
    tr["u_tr2"][1] = 1.0 / m_t
    tr["u_tr3"][2] = 1.0 / m_t
    tr["1"][2] = params.g
    if include_aero:
        tr["xdot"][0] = -params.k_f[0] / m_t
        tr["ydot"][1] = -params.k_f[1] / m_t
        tr["zdot"][2] = -params.k_f[2] / m_t

    ro = {name: np.zeros(3) for name in ro_spec.names}
    ro["L"][0] = 1.0 / ix
    ro["M"][1] = 1.0 / iy
    ro["N"][2] = 1.0 / iz
    ro["q*r"][0] = (iy - iz) / ix
    ro["p*r"][1] = (iz - ix) / iy
    ro["p*q"][2] = (ix - iy) / iz
    if include_aero:
        ro["p"][0] = -params.k_m[0] / ix
        ro["q"][1] = -params.k_m[1] / iy
        ro["r"][2] = -params.k_m[2] / iz
    if include_gyro:
        ro["q*omega_r"][0] = -params.j_r / ix
        ro["p*omega_r"][1] = -params.j_r / iy

    return SparseModel(
        sigma_tr=np.array([tr[n] for n in tr_spec.names]),
        sigma_ro=np.array([ro[n] for n in ro_spec.names]),
        tr_spec=tr_spec, ro_spec=ro_spec, threshold=0.0,
        metadata={"source": "parameters"},
        synthesis=default_synthesis(params),
    )


# channel catalogue for assembled models: value plus closed-form gradients
# with respect to the 12-state and the wrench (f_z, L, M, N)
_MODEL_CHANNELS = ("one", "u_tr1", "u_tr2", "u_tr3", "xdot", "ydot", "zdot",
                   "p", "q", "r", "L", "M", "N", "omega_r")
_CH_IDX = {n: i for i, n in enumerate(_MODEL_CHANNELS)}


class SindyDynamics:
    """Smooth full-order dynamics assembled from identified coefficients.

    Combines the known kinematics (position and Euler-angle propagation)
    with the identified translational and rotational blocks. Provides the
    derivative, its analytic Jacobians, and a batched evaluator. Instances
    reuse internal gradient buffers and are not thread-safe; create one
    instance per concurrent run.
    """

    def __init__(self, model: SparseModel):
        self.model = model
        self.n_x = 12
        self.n_u = 4
        geom = model.synthesis
        self._mix_inv = np.linalg.inv(np.array([
            [-1.0, -1.0, -1.0, -1.0],
            [-geom["d_x"], geom["d_x"], geom["d_x"], -geom["d_x"]],
            [geom["d_y"], geom["d_y"], -geom["d_y"], -geom["d_y"]],
            [geom["c_t"], -geom["c_t"], geom["c_t"], -geom["c_t"]],
        ]))
        self._k_omega = geom["k_omega"]
        self._t_max = geom["t_max"]
        self._tr_pairs = self._index_terms(model.tr_spec)
        self._ro_pairs = self._index_terms(model.ro_spec)
        self._k_tr = len(model.tr_spec)
        self._pairs_a = np.concatenate([self._tr_pairs[:, 0], self._ro_pairs[:, 0]])
        self._pairs_b = np.concatenate([self._tr_pairs[:, 1], self._ro_pairs[:, 1]])
        # block-diagonal coefficient map from stacked term values to the
        # six identified acceleration rows
        k_all = self._k_tr + len(model.ro_spec)
        self._sig_all_t = np.zeros((6, k_all))
        self._sig_all_t[0:3, :self._k_tr] = model.sigma_tr.T
        self._sig_all_t[3:6, self._k_tr:] = model.sigma_ro.T
        # channel gradient buffers; the constant sparsity is written once
        nc = len(_MODEL_CHANNELS)
        self._cdx = np.zeros((nc, 12))
        self._cdu = np.zeros((nc, 4))
        self._cdx[4, 3] = self._cdx[5, 4] = self._cdx[6, 5] = 1.0
        self._cdx[7, 9] = self._cdx[8, 10] = self._cdx[9, 11] = 1.0
        self._cdu[10, 1] = self._cdu[11, 2] = self._cdu[12, 3] = 1.0

    @staticmethod
    def _index_terms(spec: LibrarySpec):
        pairs = np.empty((len(spec), 2), dtype=int)
        for j, term in enumerate(spec.terms):
            fac = list(term.factors)
            if len(fac) > 2:
                raise ValueError(f"term {term.name!r}: assembled models support "
                                 "products of at most two channels")
            while len(fac) < 2:
                fac.append("one")
            try:
                pairs[j] = (_CH_IDX[fac[0]], _CH_IDX[fac[1]])
            except KeyError as exc:
                raise UnknownChannel(str(exc)) from None
        return pairs

    def _rotor_speed(self, u):
        thrusts = np.clip(self._mix_inv @ u, 0.0, self._t_max)
        return float(np.sum(np.sqrt(thrusts / self._k_omega))), thrusts

    def _rotor_speed_grad(self, u):
        raw = self._mix_inv @ u
        inside = (raw > 0.0) & (raw < self._t_max)
        thrusts = np.clip(raw, 0.0, self._t_max)
        val = float(np.sum(np.sqrt(thrusts / self._k_omega)))
        if np.all(inside):
            grad = self._mix_inv.T @ (0.5 / np.sqrt(self._k_omega * thrusts))
        else:
            scale = np.where(inside, 0.5 / np.sqrt(self._k_omega * np.maximum(thrusts, 1e-300)), 0.0)
            grad = self._mix_inv.T @ scale
        return val, grad

    def _channels(self, x, u, with_grad: bool):
        phi, theta, psi = x[6], x[7], x[8]
        cphi, sphi = math.cos(phi), math.sin(phi)
        cth, sth = math.cos(theta), math.sin(theta)
        cpsi, spsi = math.cos(psi), math.sin(psi)
        fz = u[0]
        r13 = cphi * sth * cpsi + sphi * spsi
        r23 = cphi * sth * spsi - sphi * cpsi
        r33 = cphi * cth

        nc = len(_MODEL_CHANNELS)
        c = np.empty(nc)
        c[0] = 1.0
        c[1] = r13 * fz
        c[2] = r23 * fz
        c[3] = r33 * fz
        c[4:7] = x[3:6]
        c[7:10] = x[9:12]
        c[10:13] = u[1:4]
        if not with_grad:
            c[13] = self._rotor_speed(u)[0]
            return c, None, None

        omega_r, d_omega = self._rotor_speed_grad(u)
        c[13] = omega_r

        # only the thrust-column and rotor-speed rows vary with (x, u)
        dx = self._cdx
        du = self._cdu
        dx[1, 6] = (-sphi * sth * cpsi + cphi * spsi) * fz
        dx[1, 7] = (cphi * cth * cpsi) * fz
        dx[1, 8] = (-cphi * sth * spsi + sphi * cpsi) * fz
        dx[2, 6] = (-sphi * sth * spsi - cphi * cpsi) * fz
        dx[2, 7] = (cphi * cth * spsi) * fz
        dx[2, 8] = (cphi * sth * cpsi + sphi * spsi) * fz
        dx[3, 6] = -sphi * cth * fz
        dx[3, 7] = -cphi * sth * fz
        du[1, 0] = r13
        du[2, 0] = r23
        du[3, 0] = r33
        du[13] = d_omega
        return c, dx, du

    def _kinematics(self, x, with_grad: bool):
        phi, theta = x[6], x[7]
        dynamics._check_pitch(theta, dynamics.EPS_SING)
        cphi, sphi = math.cos(phi), math.sin(phi)
        cth, sth = math.cos(theta), math.sin(theta)
        tth = sth / cth
        p, q, r = x[9], x[10], x[11]
        ed = np.array([
            p + sphi * tth * q + cphi * tth * r,
            cphi * q - sphi * r,
            (sphi * q + cphi * r) / cth,
        ])
        if not with_grad:
            return ed, None
        jac = np.zeros((3, 12))
        sum_qr = sphi * q + cphi * r
        jac[0, 6] = (cphi * q - sphi * r) * tth
        jac[0, 7] = sum_qr / (cth * cth)
        jac[0, 9:12] = (1.0, sphi * tth, cphi * tth)
        jac[1, 6] = -sphi * q - cphi * r
        jac[1, 9:12] = (0.0, cphi, -sphi)
        jac[2, 6] = (cphi * q - sphi * r) / cth
        jac[2, 7] = sum_qr * sth / (cth * cth)
        jac[2, 9:12] = (0.0, sphi / cth, cphi / cth)
        return ed, jac

    def f(self, x, u) -> np.ndarray:
        """Model derivative of the 12-state."""
        c, _, _ = self._channels(x, u, with_grad=False)
        ed, _ = self._kinematics(x, with_grad=False)
        acc = self._sig_all_t @ (c[self._pairs_a] * c[self._pairs_b])
        out = np.empty(12)
        out[0:3] = x[3:6]
        out[3:6] = acc[0:3]
        out[6:9] = ed
        out[9:12] = acc[3:6]
        return out

    def f_and_jac(self, x, u):
        """Derivative plus analytic Jacobians (A = df/dx, B = df/du)."""
        c, cdx, cdu = self._channels(x, u, with_grad=True)
        ed, ed_jac = self._kinematics(x, with_grad=True)

        ia, ib = self._pairs_a, self._pairs_b
        ca, cb = c[ia], c[ib]
        acc = self._sig_all_t @ (ca * cb)
        jx = self._sig_all_t @ (cb[:, None] * cdx[ia] + ca[:, None] * cdx[ib])
        ju = self._sig_all_t @ (cb[:, None] * cdu[ia] + ca[:, None] * cdu[ib])

        out = np.empty(12)
        a = np.zeros((12, 12))
        b = np.zeros((12, 4))
        out[0:3] = x[3:6]
        a[0, 3] = a[1, 4] = a[2, 5] = 1.0
        out[6:9] = ed
        a[6:9] = ed_jac
        out[3:6] = acc[0:3]
        out[9:12] = acc[3:6]
        a[3:6] = jx[0:3]
        a[9:12] = jx[3:6]
        b[3:6] = ju[0:3]
        b[9:12] = ju[3:6]
        return out, a, b

    def jac(self, x, u):
        _, a, b = self.f_and_jac(x, u)
        return a, b

    def f_batch(self, xs: np.ndarray, us: np.ndarray) -> np.ndarray:
        """Vectorized derivative over rows of stacked states and inputs."""
        phi, theta, psi = xs[:, 6], xs[:, 7], xs[:, 8]
        if np.any(np.abs(theta) >= math.pi / 2.0 - dynamics.EPS_SING):
            raise dynamics.SingularAttitude("pitch near +/-pi/2 in batch")
        cphi, sphi = np.cos(phi), np.sin(phi)
        cth, sth = np.cos(theta), np.sin(theta)
        cpsi, spsi = np.cos(psi), np.sin(psi)
        fz = us[:, 0]
        n = xs.shape[0]
        c = np.empty((n, len(_MODEL_CHANNELS)))
        c[:, 0] = 1.0
        c[:, 1] = (cphi * sth * cpsi + sphi * spsi) * fz
        c[:, 2] = (cphi * sth * spsi - sphi * cpsi) * fz
        c[:, 3] = (cphi * cth) * fz
        c[:, 4:7] = xs[:, 3:6]
        c[:, 7:10] = xs[:, 9:12]
        c[:, 10:13] = us[:, 1:4]
        thrusts = np.clip(us @ self._mix_inv.T, 0.0, self._t_max)
        c[:, 13] = np.sum(np.sqrt(thrusts / self._k_omega), axis=1)

        tth = sth / cth
        out = np.empty((n, 12))
        out[:, 0:3] = xs[:, 3:6]
        out[:, 3:6] = (c[:, self._tr_pairs[:, 0]] * c[:, self._tr_pairs[:, 1]]) @ self.model.sigma_tr
        p, q, r = xs[:, 9], xs[:, 10], xs[:, 11]
        out[:, 6] = p + sphi * tth * q + cphi * tth * r
        out[:, 7] = cphi * q - sphi * r
        out[:, 8] = (sphi * q + cphi * r) / cth
        out[:, 9:12] = (c[:, self._ro_pairs[:, 0]] * c[:, self._ro_pairs[:, 1]]) @ self.model.sigma_ro
        return out

    def hover_input(self) -> np.ndarray:
        """Wrench making the vertical acceleration vanish at rest, level."""
        x0 = np.zeros(12)
        u = np.zeros(4)
        u[0] = -1.0
        for _ in range(50):
            val, _, b = self.f_and_jac(x0, u)
            if abs(val[5]) < 1e-12:
                break
            if b[5, 0] == 0.0:
                raise ValueError("model vertical channel does not respond to thrust")
            u[0] -= val[5] / b[5, 0]
        return u


def assemble_model(model: SparseModel) -> SindyDynamics:
    """Wrap a SparseModel into an evaluable dynamics object."""
    return SindyDynamics(model)


@dataclass
class ValidationReport:
    channels: tuple
    rmse: np.ndarray
    max_err: np.ndarray
    signal_std: np.ndarray
    t: np.ndarray
    predicted: np.ndarray
    measured: np.ndarray

    def to_text(self) -> str:
        lines = [f"{'channel':<8}{'rmse':>14}{'max_err':>14}{'signal_std':>14}{'rmse/std':>12}"]
        for i, ch in enumerate(self.channels):
            ratio = self.rmse[i] / self.signal_std[i] if self.signal_std[i] > 0 else math.inf
            lines.append(f"{ch:<8}{self.rmse[i]:>14.6g}{self.max_err[i]:>14.6g}"
                         f"{self.signal_std[i]:>14.6g}{ratio:>12.4f}")
        return "\n".join(lines)


def one_step_validate(dyn: SindyDynamics, snap: SnapshotSet) -> ValidationReport:
    """Score one-step acceleration predictions against differenced data.

    From every logged state the model is integrated one sample forward and
    one backward under the logged input; the centered slope of those
    predictions is compared per channel against the differenced log, which
    uses the same stencil, so a perfect model scores zero up to integrator
    round-off.
    """
    if snap.rows < 2:
        raise TooFewSamples("validation needs at least 2 rows")
    if snap.xdot_tr is None or snap.xdot_ro is None:
        snap = estimate_derivatives(snap)
    dt = snap.dt
    w = snap.rows

    states = np.zeros((w, 12))
    states[:, 3:6] = snap.x_tr
    states[:, 6:9] = snap.euler
    states[:, 9:12] = snap.x_ro
    r33 = np.cos(snap.euler[:, 0]) * np.cos(snap.euler[:, 1])
    fz = snap.u_tr[:, 2] / r33
    inputs = np.column_stack([fz, snap.u_ro])

    def rk4_batch(xs, us, h):
        k1 = dyn.f_batch(xs, us)
        k2 = dyn.f_batch(xs + 0.5 * h * k1, us)
        k3 = dyn.f_batch(xs + 0.5 * h * k2, us)
        k4 = dyn.f_batch(xs + h * k3, us)
        return xs + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)

    fwd = rk4_batch(states, inputs, dt)
    bwd = rk4_batch(states, inputs, -dt)
    pred = np.column_stack([
        (fwd[:, 3:6] - bwd[:, 3:6]) / (2.0 * dt),
        (fwd[:, 9:12] - bwd[:, 9:12]) / (2.0 * dt),
    ])
    meas = np.column_stack([snap.xdot_tr, snap.xdot_ro])

    err = pred - meas
    return ValidationReport(
        channels=("xddot", "yddot", "zddot", "pdot", "qdot", "rdot"),
        rmse=np.sqrt(np.mean(err ** 2, axis=0)),
        max_err=np.max(np.abs(err), axis=0),
        signal_std=np.std(meas, axis=0),
        t=snap.t.copy(), predicted=pred, measured=meas,
    )


def write_validation_csv(report: ValidationReport, path) -> None:
    names = report.channels
    header = "t," + ",".join(f"{n}_pred" for n in names) + "," + \
        ",".join(f"{n}_meas" for n in names)
    cols = np.column_stack([report.t, report.predicted, report.measured])
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(header + "\n")
        for row in cols.tolist():
            fh.write(",".join(repr(v) for v in row) + "\n")


def _spec_to_json(spec: LibrarySpec):
    return [{"name": t.name, "factors": list(t.factors)} for t in spec.terms]


def _spec_from_json(items) -> LibrarySpec:
    return LibrarySpec(tuple(Term(d["name"], tuple(d["factors"])) for d in items))


def save_model(model: SparseModel, path) -> None:
    """Write the model file: JSON with full-precision coefficients."""
    doc = {
        "schema": "sparse-dynamics-model/1",
        "threshold": model.threshold,
        "translational": {
            "terms": _spec_to_json(model.tr_spec),
            "coefficients": model.sigma_tr.tolist(),
        },
        "rotational": {
            "terms": _spec_to_json(model.ro_spec),
            "coefficients": model.sigma_ro.tolist(),
        },
        "synthesis": model.synthesis,
        "metadata": model.metadata,
    }
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(doc, fh, indent=2)
        fh.write("\n")


def load_model(path) -> SparseModel:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise OSError(f"cannot read model file {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"model file {path} is not valid JSON: {exc}") from exc
    if doc.get("schema") != "sparse-dynamics-model/1":
        raise DataError(f"model file {path} has unknown schema {doc.get('schema')!r}")
    return SparseModel(
        sigma_tr=np.array(doc["translational"]["coefficients"]),
        sigma_ro=np.array(doc["rotational"]["coefficients"]),
        tr_spec=_spec_from_json(doc["translational"]["terms"]),
        ro_spec=_spec_from_json(doc["rotational"]["terms"]),
        threshold=float(doc["threshold"]),
        metadata=doc.get("metadata", {}),
        synthesis=doc.get("synthesis", {}),
    )
