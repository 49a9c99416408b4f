"""Contact simulator: a compliant hand pressing a 4x6 three-axis taxel array.

The hand is modelled as a pose that follows the commanded pose through a
first-order lag, then deflects under the contact wrench (normal force lifts
it, taxel moments tilt it back, friction drag at the pad pitches/rolls it so
the leading edge digs in). Each taxel is a normal spring against the surface
plus a tangential anchor spring capped by the Coulomb cone.

Geometry conventions (sensor faces down, x is the travel direction, +y is the
left side):

* increasing roll lowers the +y (left) edge, increasing pitch lowers the -x
  (rear) edge, so a proportional loop on the taxel moments is stabilizing;
* the 72-vector form of a frame is ``frame.reshape(-1)``, i.e. taxel-major
  ``(fx0, fy0, fz0, fx1, ...)``.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass, field
from importlib import resources

import numpy as np
import yaml

N_ROWS = 6
N_COLS = 4
N_TAXELS = N_ROWS * N_COLS
SENSOR_LENGTH = 51.5  # mm, along x
SENSOR_WIDTH = 31.0  # mm, along y


class NonFiniteCommand(ValueError):
    pass


@dataclass(frozen=True)
class TaxelLayout:
    positions: np.ndarray  # (24, 2) mm, row-major: index = row * 4 + col
    pitch: tuple

    @property
    def x(self):
        return self.positions[:, 0]

    @property
    def y(self):
        return self.positions[:, 1]

    def envelope(self):
        """Outer extent (x, y) of the taxel cells in mm."""
        span = self.positions.max(axis=0) - self.positions.min(axis=0)
        return span[0] + self.pitch[0], span[1] + self.pitch[1]

    def right_column(self):
        """Indices of the six taxels with the smallest y."""
        return np.flatnonzero(np.isclose(self.y, self.y.min()))

    def left_taxels(self):
        return np.setdiff1d(np.arange(N_TAXELS), self.right_column())


def taxel_layout():
    px = SENSOR_LENGTH / N_ROWS
    py = SENSOR_WIDTH / N_COLS
    rows, cols = np.meshgrid(np.arange(N_ROWS), np.arange(N_COLS), indexing="ij")
    xs = (rows.ravel() - (N_ROWS - 1) / 2) * px
    ys = (cols.ravel() - (N_COLS - 1) / 2) * py
    return TaxelLayout(np.column_stack([xs, ys]), (px, py))


@dataclass(frozen=True)
class MaterialParams:
    name: str
    stiffness: float  # force units per mm of penetration, per taxel
    friction: float
    waviness_amp: float = 0.0  # mm
    waviness_len: float = 40.0  # mm
    rattle_gain: float = 1.0

    def __post_init__(self):
        if not self.stiffness > 0:
            raise ValueError(f"{self.name}: stiffness must be > 0")
        if not self.friction >= 0:
            raise ValueError(f"{self.name}: friction must be >= 0")
        if not self.waviness_amp >= 0:
            raise ValueError(f"{self.name}: waviness_amp must be >= 0")
        if not self.waviness_len > 0:
            raise ValueError(f"{self.name}: waviness_len must be > 0")
        if not self.rattle_gain >= 0:
            raise ValueError(f"{self.name}: rattle_gain must be >= 0")


def load_materials(path=None):
    """Material library from YAML; the bundled library when ``path`` is None.

    Returns ``(materials, meta)`` where ``materials`` maps name to
    :class:`MaterialParams` and ``meta`` carries the ``training``/``held_out``
    name lists and the ``family`` map if present.
    """
    if path is None:
        text = resources.files("wipelab").joinpath("materials.yaml").read_text()
    else:
        with open(path) as fh:
            text = fh.read()
    doc = yaml.safe_load(text)
    materials = {}
    for name, rec in doc["materials"].items():
        materials[name] = MaterialParams(name=name, **rec)
    meta = {k: v for k, v in doc.items() if k != "materials"}
    return materials, meta


def surface_height(material, x, y):
    if material.waviness_amp == 0:
        return np.zeros(np.broadcast(x, y).shape) if np.ndim(x) or np.ndim(y) else 0.0
    k = 2 * np.pi / material.waviness_len
    return material.waviness_amp * np.sin(k * np.asarray(x)) * np.sin(k * np.asarray(y))


@dataclass
class HandPose:
    x: float = 0.0
    y: float = 0.0
    z: float = 0.0
    roll: float = 0.0
    pitch: float = 0.0
    yaw: float = 0.0

    def as_array(self):
        return np.array([self.x, self.y, self.z, self.roll, self.pitch, self.yaw], dtype=np.float64)

    @classmethod
    def from_array(cls, a):
        return cls(*(float(v) for v in a))


@dataclass(frozen=True)
class SimParams:
    """Free parameters of the robot/sensor model (not material dependent)."""
    lag_tau: float = 0.15  # s
    deflect_z: float = 0.002  # mm per unit of total normal force
    deflect_rot: float = 0.0005  # deg per unit of raw taxel moment (force * mm)
    drag_tilt: float = 0.002  # deg per unit of total tangential force
    tangential_stiffness: float = 50.0  # force units per mm, per taxel
    rattle_base: float = 0.05  # mm
    rattle_load: float = 0.02  # mm per 100 units of mean normal force
    offset_std: float = 0.0  # sensor offset spread; 0 means an offset-free sensor
    newton_iters: int = 40


@dataclass
class SimState:
    lag_pose: np.ndarray
    realized: np.ndarray
    anchors: np.ndarray
    active: np.ndarray
    shear: np.ndarray
    load: float
    rng: np.random.Generator
    offset: np.ndarray
    t: int = 0

    @property
    def realized_pose(self):
        return HandPose.from_array(self.realized)

    def copy(self):
        return SimState(self.lag_pose.copy(), self.realized.copy(), self.anchors.copy(),
                        self.active.copy(), self.shear.copy(), self.load,
                        copy.deepcopy(self.rng), self.offset.copy(), self.t)


def init_state(pose, seed, params=SimParams()):
    rng = np.random.default_rng(seed)
    a = pose.as_array() if isinstance(pose, HandPose) else np.asarray(pose, dtype=np.float64)
    offset = params.offset_std * rng.standard_normal((N_TAXELS, 3)) if params.offset_std else np.zeros((N_TAXELS, 3))
    return SimState(a.copy(), a.copy(), np.zeros((N_TAXELS, 2)), np.zeros(N_TAXELS, dtype=bool),
                    np.zeros(2), 0.0, rng, offset)


_D2R = np.pi / 180.0
_LAYOUT = taxel_layout()


def taxel_world(pose, layout=_LAYOUT):
    """World (x, y, z) of every taxel for a pose array (x, y, z, roll, pitch, yaw)."""
    x, y, z, roll, pitch = pose[:5]
    r, p = roll * _D2R, pitch * _D2R
    lx, ly = layout.x, layout.y
    wx = x + lx * np.cos(p)
    wy = y + ly * np.cos(r)
    wz = z + lx * np.sin(p) - ly * np.cos(p) * np.sin(r)
    return wx, wy, wz


def normal_forces(material, pose, layout=_LAYOUT):
    wx, wy, wz = taxel_world(pose, layout)
    depth = surface_height(material, wx, wy) - wz
    return material.stiffness * np.maximum(0.0, depth), depth


def _deflection(material, q, base, params, layout):
    """Residual and Jacobian of ``q = base + compliance(wrench(q))`` in (z, roll, pitch)."""
    pose = base.copy()
    pose[2:5] = q
    fz, depth = normal_forces(material, pose, layout)
    lx, ly = layout.x, layout.y
    tau_r = ly @ fz
    tau_p = -lx @ fz
    d = np.array([params.deflect_z * fz.sum(),
                  -params.deflect_rot * tau_r,
                  -params.deflect_rot * tau_p])
    res = q - base[2:5] - d
    r, p = q[1] * _D2R, q[2] * _D2R
    dh = np.column_stack([np.ones(N_TAXELS),
                          -ly * np.cos(p) * np.cos(r) * _D2R,
                          (lx * np.cos(p) + ly * np.sin(p) * np.sin(r)) * _D2R])
    dfz = -material.stiffness * (depth > 0)[:, None] * dh
    dd = np.vstack([params.deflect_z * dfz.sum(axis=0),
                    -params.deflect_rot * (ly @ dfz),
                    params.deflect_rot * (lx @ dfz)])
    return res, np.eye(3) - dd


def _solve_pose(material, base, guess, params, layout):
    q = guess.copy()
    res, jac = _deflection(material, q, base, params, layout)
    norm = np.abs(res).max()
    for _ in range(params.newton_iters):
        if norm < 1e-11:
            break
        step = np.linalg.solve(jac, res)
        lam = 1.0
        while True:
            cand = q - lam * step
            cres, cjac = _deflection(material, cand, base, params, layout)
            cnorm = np.abs(cres).max()
            if cnorm < norm or lam < 1e-4:
                break
            lam *= 0.5
        q, res, jac, norm = cand, cres, cjac, cnorm
    return q


def sim_step(state, material, commanded, dt=0.2, params=SimParams(), layout=_LAYOUT):
    """Advance one tick; returns ``(new_state, frame)`` with ``frame`` of shape (24, 3).

    ``state`` is not modified.
    """
    state = state.copy()
    frame = step_inplace(state, material, commanded, dt, params, layout)
    return state, frame


def step_inplace(state, material, commanded, dt=0.2, params=SimParams(), layout=_LAYOUT):
    if dt <= 0:
        raise ValueError("dt must be positive")
    cmd = commanded.as_array() if isinstance(commanded, HandPose) else np.asarray(commanded, dtype=np.float64)
    if not np.all(np.isfinite(cmd)):
        raise NonFiniteCommand(f"commanded pose {cmd} is not finite")
    cmd = cmd.copy()
    cmd[5] = 0.0  # yaw is held at zero

    alpha = 1.0 - np.exp(-dt / params.lag_tau)
    state.lag_pose += alpha * (cmd - state.lag_pose)

    base = state.lag_pose.copy()
    if material.rattle_gain > 0:
        posture = 1.0 + abs(base[0]) / 100.0
        std = material.rattle_gain * posture * (params.rattle_base + params.rattle_load * state.load / 100.0)
        noise = state.rng.standard_normal(5) * std
        base[:3] += noise[:3]
        base[3:5] += 0.5 * noise[3:5]
    # friction drag at the pad tilts the compliant wrist so the leading edge digs in
    base[4] += params.drag_tilt * state.shear[0]
    base[3] -= params.drag_tilt * state.shear[1]

    q = _solve_pose(material, base, state.realized[2:5], params, layout)
    pose = base.copy()
    pose[2:5] = q
    fz, _ = normal_forces(material, pose, layout)
    wx, wy, _ = taxel_world(pose, layout)
    pts = np.column_stack([wx, wy])

    active = fz > 0
    fresh = active & ~state.active
    state.anchors[fresh] = pts[fresh]
    kt = params.tangential_stiffness
    ft = kt * (state.anchors - pts)
    mag = np.hypot(ft[:, 0], ft[:, 1])
    cap = material.friction * fz
    slip = mag > cap
    scale = np.where(slip, cap / np.where(mag > 0, mag, 1.0), 1.0)
    ft *= scale[:, None]
    ft[~active] = 0.0
    state.anchors[slip] = pts[slip] + ft[slip] / kt
    state.anchors[~active] = pts[~active]

    state.active = active
    state.realized = pose
    state.shear = ft.sum(axis=0)
    state.load = float(fz.mean())
    state.t += 1
    frame = np.column_stack([ft, fz]) + state.offset
    return frame


class Simulator:
    """Mutable convenience wrapper around :func:`step_inplace`."""

    def __init__(self, material, seed=0, start=None, params=SimParams(), dt=0.2):
        self.material = material
        self.params = params
        self.dt = dt
        self.state = init_state(start if start is not None else HandPose(z=5.0), seed, params)

    def step(self, commanded):
        return step_inplace(self.state, self.material, commanded, self.dt, self.params)


def remove_offsets(frame, bias):
    out = np.asarray(frame, dtype=np.float64) - np.asarray(bias, dtype=np.float64)
    out[..., 2] = np.maximum(out[..., 2], 0.0)
    return out
