"""Experiment configuration files: flat INI sections with a strict schema.

Unknown sections or keys are hard errors so that a typo in a tuning
parameter cannot silently skew a comparison.
"""

from __future__ import annotations

import configparser
import hashlib
import math
from dataclasses import dataclass, field

from .dynamics import VehicleParams
from .errors import ConfigError
from .nmpc import MpcConfig, ObstacleSpec
from .sim import PidGains, SimConfig, TrajectorySpec

SCHEMA_VERSION = 1

_SCHEMA = {
    "experiment": {"schema_version", "seed", "name"},
    "plant": {"m_m", "m_p", "i_m", "i_p", "d_x", "d_y", "c_t", "k_f", "k_m",
              "g", "j_r", "k_omega", "t_max"},
    "sim": {"dt", "duration", "decimation"},
    "trajectory": {"kind", "side", "altitude", "lap_time", "laps",
                   "waypoints", "segment_times", "accel_fraction",
                   "yaw_amplitude_deg", "yaw_period", "yaw_ramp",
                   "altitude_amplitude", "altitude_period", "altitude_ramp",
                   "x_amplitude", "x_period", "x_ramp",
                   "y_amplitude", "y_period", "y_ramp",
                   "setpoint", "yaw_setpoint_deg"},
    "pid": {"pos_kp", "pos_ki", "pos_kd", "pos_int_limit",
            "att_kp", "att_ki", "att_kd", "att_int_limit",
            "tilt_limit", "moment_limit", "fz_scale_min", "fz_scale_max",
            "m_hat", "g"},
    "sindy": {"threshold", "max_iters", "include_gyro", "holdout_rows"},
    "mpc": {"horizon", "dt", "q", "r", "u_min", "u_max", "mu0", "mu_scale",
            "max_escalations", "max_iters", "tol", "delta_obs", "margin_pad"},
    "obstacles": None,  # obstacle_<n> = x y z d_min
}


@dataclass
class ExperimentConfig:
    path: str
    sha256: str
    seed: int
    name: str
    plant: VehicleParams
    sim: SimConfig
    trajectory: TrajectorySpec
    pid: PidGains
    sindy: dict
    mpc: MpcConfig
    obstacles: tuple = ()


def _find_line(text: str, section: str, key: str | None) -> int:
    """Best-effort line number of a section or key for error messages."""
    in_section = False
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if line.startswith("[") and line.endswith("]"):
            if in_section and key is not None:
                break
            in_section = line[1:-1].strip() == section
            if in_section and key is None:
                return lineno
        elif in_section and key is not None:
            name = line.split("=", 1)[0].strip()
            if name == key:
                return lineno
    return 0


class _Section:
    def __init__(self, parser, name, text, path):
        self._has = parser.has_section(name)
        self._items = dict(parser.items(name)) if self._has else {}
        self._name = name
        self._text = text
        self._path = path

    def _err(self, key, msg):
        line = _find_line(self._text, self._name, key)
        where = f"{self._path}:{line}" if line else self._path
        raise ConfigError(f"{where}: [{self._name}] {key}: {msg}")

    def get(self, key, cast, default):
        if key not in self._items:
            return default
        raw = self._items[key]
        try:
            return cast(raw)
        except (ValueError, TypeError):
            self._err(key, f"cannot parse {raw!r}")

    def keys(self):
        return self._items.keys()


def _floats(raw: str) -> tuple:
    vals = tuple(float(v) for v in raw.replace(",", " ").split())
    if not vals:
        raise ValueError("empty")
    return vals


def _points(raw: str) -> tuple:
    pts = []
    for chunk in raw.split(";"):
        chunk = chunk.strip()
        if chunk:
            pts.append(_floats(chunk))
    return tuple(pts)


def _bool(raw: str) -> bool:
    low = raw.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(raw)


def load_config(path) -> ExperimentConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc

    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text, source=str(path))
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from exc

    for section in parser.sections():
        if section not in _SCHEMA:
            line = _find_line(text, section, None)
            raise ConfigError(f"{path}:{line}: unknown section [{section}]")
        allowed = _SCHEMA[section]
        for key, _ in parser.items(section):
            if allowed is None:
                if not key.startswith("obstacle_"):
                    line = _find_line(text, section, key)
                    raise ConfigError(
                        f"{path}:{line}: [{section}] unknown key {key!r}")
            elif key not in allowed:
                line = _find_line(text, section, key)
                raise ConfigError(f"{path}:{line}: [{section}] unknown key {key!r}")

    exp = _Section(parser, "experiment", text, path)
    version = exp.get("schema_version", int, SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        exp._err("schema_version", f"unsupported version {version}")
    seed = exp.get("seed", int, 0)
    name = exp.get("name", str, "experiment")

    pl = _Section(parser, "plant", text, path)
    try:
        plant = VehicleParams(
            m_m=pl.get("m_m", float, 1.3),
            m_p=pl.get("m_p", float, 0.0),
            i_m=pl.get("i_m", _floats, (0.0281, 0.0286, 0.0551)),
            i_p=pl.get("i_p", _floats, (0.0029, 0.0094, 0.0079)),
            d_x=pl.get("d_x", float, 0.165),
            d_y=pl.get("d_y", float, 0.165),
            c_t=pl.get("c_t", float, 0.0135),
            k_f=pl.get("k_f", _floats, (1.0, 1.0, 1.0)),
            k_m=pl.get("k_m", _floats, (0.001, 0.001, 0.001)),
            g=pl.get("g", float, 9.807),
            j_r=pl.get("j_r", float, 6.8e-4),
            k_omega=pl.get("k_omega", float, 1.0e-5),
            t_max=pl.get("t_max", float, 8.0),
        )
    except ValueError as exc:
        raise ConfigError(f"{path}: [plant]: {exc}") from exc

    sm = _Section(parser, "sim", text, path)
    try:
        sim = SimConfig(
            dt=sm.get("dt", float, 0.002),
            duration=sm.get("duration", float, 100.0),
            seed=seed,
            decimation=sm.get("decimation", int, 1),
        )
    except ValueError as exc:
        raise ConfigError(f"{path}: [sim]: {exc}") from exc

    tr = _Section(parser, "trajectory", text, path)
    try:
        trajectory = TrajectorySpec(
            kind=tr.get("kind", str, "rectangular"),
            side=tr.get("side", float, 10.0),
            altitude=tr.get("altitude", float, -5.0),
            lap_time=tr.get("lap_time", float, 100.0),
            laps=tr.get("laps", int, 1),
            waypoints=tr.get("waypoints", _points, ()),
            segment_times=tr.get("segment_times", _floats, ()),
            accel_fraction=tr.get("accel_fraction", float, 0.25),
            yaw_amplitude=math.radians(tr.get("yaw_amplitude_deg", float, 0.0)),
            yaw_period=tr.get("yaw_period", float, 20.0),
            yaw_ramp=tr.get("yaw_ramp", float, 1.0),
            altitude_amplitude=tr.get("altitude_amplitude", float, 0.0),
            altitude_period=tr.get("altitude_period", float, 25.0),
            altitude_ramp=tr.get("altitude_ramp", float, 4.0),
            x_amplitude=tr.get("x_amplitude", float, 0.0),
            x_period=tr.get("x_period", float, 13.0),
            x_ramp=tr.get("x_ramp", float, 2.5),
            y_amplitude=tr.get("y_amplitude", float, 0.0),
            y_period=tr.get("y_period", float, 17.0),
            y_ramp=tr.get("y_ramp", float, 2.5),
            setpoint=tr.get("setpoint", _floats, (0.0, 0.0, -5.0)),
            yaw_setpoint=math.radians(tr.get("yaw_setpoint_deg", float, 0.0)),
        )
    except ValueError as exc:
        raise ConfigError(f"{path}: [trajectory]: {exc}") from exc

    pid_sec = _Section(parser, "pid", text, path)
    try:
        pid = PidGains(
            pos_kp=pid_sec.get("pos_kp", _floats, PidGains.pos_kp),
            pos_ki=pid_sec.get("pos_ki", _floats, PidGains.pos_ki),
            pos_kd=pid_sec.get("pos_kd", _floats, PidGains.pos_kd),
            pos_int_limit=pid_sec.get("pos_int_limit", float, PidGains.pos_int_limit),
            att_kp=pid_sec.get("att_kp", _floats, PidGains.att_kp),
            att_ki=pid_sec.get("att_ki", _floats, PidGains.att_ki),
            att_kd=pid_sec.get("att_kd", _floats, PidGains.att_kd),
            att_int_limit=pid_sec.get("att_int_limit", float, PidGains.att_int_limit),
            tilt_limit=pid_sec.get("tilt_limit", float, PidGains.tilt_limit),
            moment_limit=pid_sec.get("moment_limit", _floats, PidGains.moment_limit),
            fz_scale_min=pid_sec.get("fz_scale_min", float, PidGains.fz_scale_min),
            fz_scale_max=pid_sec.get("fz_scale_max", float, PidGains.fz_scale_max),
            m_hat=pid_sec.get("m_hat", float, plant.m_m),
            g=pid_sec.get("g", float, plant.g),
        )
    except ValueError as exc:
        raise ConfigError(f"{path}: [pid]: {exc}") from exc

    sd = _Section(parser, "sindy", text, path)
    sindy = {
        "threshold": sd.get("threshold", float, 0.008),
        "max_iters": sd.get("max_iters", int, 10),
        "include_gyro": sd.get("include_gyro", _bool, True),
        "holdout_rows": sd.get("holdout_rows", int, 0),
    }

    obstacles = []
    ob = _Section(parser, "obstacles", text, path)
    for key in sorted(ob.keys()):
        vals = ob.get(key, _floats, ())
        if len(vals) != 4:
            ob._err(key, "expected 'x y z d_min'")
        try:
            obstacles.append(ObstacleSpec(center=vals[0:3], d_min=vals[3]))
        except ValueError as exc:
            ob._err(key, str(exc))

    mp = _Section(parser, "mpc", text, path)
    try:
        mpc = MpcConfig(
            horizon=mp.get("horizon", int, 20),
            dt=mp.get("dt", float, 0.05),
            q=mp.get("q", _floats, MpcConfig.q),
            r=mp.get("r", _floats, MpcConfig.r),
            u_min=mp.get("u_min", _floats, MpcConfig.u_min),
            u_max=mp.get("u_max", _floats, MpcConfig.u_max),
            obstacles=tuple(obstacles),
            mu0=mp.get("mu0", float, MpcConfig.mu0),
            mu_scale=mp.get("mu_scale", float, MpcConfig.mu_scale),
            max_escalations=mp.get("max_escalations", int, MpcConfig.max_escalations),
            max_iters=mp.get("max_iters", int, MpcConfig.max_iters),
            tol=mp.get("tol", float, MpcConfig.tol),
            delta_obs=mp.get("delta_obs", float, MpcConfig.delta_obs),
            margin_pad=mp.get("margin_pad", float, MpcConfig.margin_pad),
        )
    except ValueError as exc:
        raise ConfigError(f"{path}: [mpc]: {exc}") from exc

    return ExperimentConfig(
        path=str(path), sha256=hashlib.sha256(text.encode()).hexdigest(),
        seed=seed, name=name, plant=plant, sim=sim, trajectory=trajectory,
        pid=pid, sindy=sindy, mpc=mpc, obstacles=tuple(obstacles),
    )
