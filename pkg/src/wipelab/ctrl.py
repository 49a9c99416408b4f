"""Inner proportional contact controller and data-collection target walk.

``x_z_ref`` is measured along the tool axis, which points into the surface:
a positive step presses harder. The simulator's world z points up, so the
harness commands ``z = -x_z_ref``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .sim import _LAYOUT

TAU_MIN, TAU_MAX = -50.0, 50.0
F_MIN, F_MAX = 50.0, 300.0
# raw moments are in force-unit * mm; this brings them into the +-50 target band
TORQUE_SCALE = 0.01
LOWER = np.array([TAU_MIN, TAU_MIN, F_MIN])
UPPER = np.array([TAU_MAX, TAU_MAX, F_MAX])


@dataclass(frozen=True)
class ControlInput:
    tau_roll_ref: float = 0.0
    tau_pitch_ref: float = 0.0
    f_z_ref: float = 200.0

    def as_array(self):
        return np.array([self.tau_roll_ref, self.tau_pitch_ref, self.f_z_ref])

    @classmethod
    def from_array(cls, a):
        return cls(float(a[0]), float(a[1]), float(a[2]))

    def clipped(self):
        return ControlInput.from_array(clip_u(self.as_array()))


def clip_u(u):
    """Project control vectors (..., 3) onto the target box."""
    return np.clip(u, LOWER, UPPER)


@dataclass(frozen=True)
class CtrlState:
    theta_roll_ref: float = 0.0  # deg
    theta_pitch_ref: float = 0.0  # deg
    x_z_ref: float = 0.0  # mm along the tool axis


@dataclass(frozen=True)
class Gains:
    k_theta: float = 0.01
    k_z: float = 0.03
    dtheta_max: float = 3.0
    theta_max: float = 5.0
    dz_max: float = 5.0

    def __post_init__(self):
        if min(self.k_theta, self.k_z, self.dtheta_max, self.theta_max, self.dz_max) <= 0:
            raise ValueError("gains and clamps must be positive")


def sensed_torques(frame, layout=_LAYOUT, scale=TORQUE_SCALE):
    """Roll/pitch moments of the normal forces about the sensor centre.

    Positive roll when the left (+y) side carries more load, positive pitch
    when the rear (-x) side does.
    """
    fz = np.asarray(frame)[..., 2]
    return scale * (fz @ layout.y), scale * (fz @ -layout.x)


def mean_normal(frame):
    return float(np.mean(np.asarray(frame)[..., 2]))


def _clamp(v, lim):
    return max(-lim, min(v, lim))


def proportional_step(state, u, frame, layout=_LAYOUT, gains=Gains()):
    """One tick of the proportional loop; returns ``(new_state, (d_roll, d_pitch, d_z))``."""
    tau_roll, tau_pitch = sensed_torques(frame, layout)
    f_ave = mean_normal(frame)
    d_roll = _clamp(gains.k_theta * (u.tau_roll_ref - tau_roll), gains.dtheta_max)
    d_pitch = _clamp(gains.k_theta * (u.tau_pitch_ref - tau_pitch), gains.dtheta_max)
    d_z = _clamp(gains.k_z * (u.f_z_ref - f_ave), gains.dz_max)
    new = CtrlState(
        theta_roll_ref=_clamp(state.theta_roll_ref + d_roll, gains.theta_max),
        theta_pitch_ref=_clamp(state.theta_pitch_ref + d_pitch, gains.theta_max),
        # no absolute limit on the pressing axis
        x_z_ref=state.x_z_ref + d_z,
    )
    return new, (d_roll, d_pitch, d_z)


def random_walk_targets(u, sigma_theta, sigma_z, rng):
    """Gaussian step on every target, then clamp to the target box.

    With both sigmas zero no random numbers are drawn.
    """
    if sigma_theta == 0 and sigma_z == 0:
        return u
    step = rng.standard_normal(3) * np.array([sigma_theta, sigma_theta, sigma_z])
    return ControlInput.from_array(clip_u(u.as_array() + step))

