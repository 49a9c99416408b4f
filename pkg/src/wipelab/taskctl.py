"""Gradient-through-model predictive control of the contact targets.

The learned model is unrolled ``N_STEP`` ticks with its own predictions fed
back as the next force input. Losses and the descent step both live in the
network's scaled coordinates (forces / 200, targets / (50, 50, 300)), so the
step sizes on the gamma grid are comparable across the three target axes.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import ctrl, netcore
from .sim import _LAYOUT, N_TAXELS
from .ttnpb import N_F, U_SLICE, flat_forces

log = logging.getLogger(__name__)

N_STEP = 4
F_REF = 200.0
TRACK, SHEARVAR, BIASRIGHT = "track", "shearvar", "biasright"
LOSS_KINDS = (TRACK, SHEARVAR, BIASRIGHT)
COLD_START = ctrl.ControlInput(0.0, 0.0, 200.0)

_RIGHT = _LAYOUT.right_column()
_LEFT = _LAYOUT.left_taxels()


class NonFiniteLoss(ArithmeticError):
    pass


@dataclass(frozen=True)
class TaskLoss:
    kind: str = TRACK
    smooth: float = 0.01
    f_ref: float = F_REF

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise ValueError(f"unknown loss kind {self.kind!r}")
        if self.smooth < 0:
            raise ValueError("smoothness weight must be >= 0")


@dataclass(frozen=True)
class OptConfig:
    n_batch: int = 5
    n_epoch: int = 3
    gamma_max: float = 0.1
    ratio: float = 10 ** -0.5

    def gammas(self):
        """Exponentially spaced step sizes in (0, gamma_max], ascending."""
        return self.gamma_max * self.ratio ** np.arange(self.n_batch - 1, -1, -1, dtype=np.float64)


def _scaled_loss(loss, Fs, us):
    """Loss and gradients for scaled forces (..., N, 24, 3) and targets (..., N, 3)."""
    ref = loss.f_ref / F_REF
    fz = Fs[..., 2]
    dF = np.zeros_like(Fs)
    if loss.kind == TRACK:
        e = fz - ref
        val = (e ** 2).sum(axis=(-1, -2))
        dF[..., 2] = 2 * e
    elif loss.kind == SHEARVAR:
        fy = Fs[..., 1]
        c = fy - fy.mean(axis=-1, keepdims=True)
        n_h = Fs.shape[-3]
        val = (c ** 2).mean(axis=-1).mean(axis=-1)
        dF[..., 1] = 2 * c / (N_TAXELS * n_h)
    else:
        er = fz[..., _RIGHT] - ref
        el = fz[..., _LEFT]
        val = (er ** 2).sum(axis=(-1, -2)) + (el ** 2).sum(axis=(-1, -2))
        dF[..., _RIGHT, 2] = 2 * er
        dF[..., _LEFT, 2] = 2 * el
    du = np.zeros_like(us)
    if loss.smooth > 0 and us.shape[-2] > 1:
        d = np.diff(us, axis=-2)
        val = val + loss.smooth * (d ** 2).sum(axis=(-1, -2))
        du[..., 1:, :] += 2 * loss.smooth * d
        du[..., :-1, :] -= 2 * loss.smooth * d
    return val, dF, du


def task_loss(loss, F_pred_seq, u_seq, f_scale=F_REF, u_scale=(50.0, 50.0, 300.0)):
    """Task loss of a force sequence (N, 24, 3) or (N, 72) and targets (N, 3)."""
    if isinstance(loss, str):
        loss = TaskLoss(loss)
    F = flat_forces(F_pred_seq)
    if F.shape[0] == 0:
        raise ValueError("empty sequence")
    Fs = F.reshape(F.shape[:-1] + (N_TAXELS, 3)) / f_scale
    us = np.asarray(u_seq, dtype=np.float64) / np.asarray(u_scale)
    return float(_scaled_loss(loss, Fs, us)[0])


def warm_start(prev_plan):
    """Previous plan shifted one tick with its last element duplicated."""
    prev = np.asarray(prev_plan, dtype=np.float64)
    return np.concatenate([prev[1:], prev[-1:]], axis=0)


def cold_plan(n_step=N_STEP):
    return np.tile(COLD_START.as_array(), (n_step, 1))


class ModelObjective:
    """Task loss of a model rollout from a fixed state, in scaled target space."""

    def __init__(self, model, F_t, x_t, p, rstate, loss):
        self.model = model
        self.F0 = flat_forces(F_t) / model.scaling.force
        self.x = np.asarray(x_t, dtype=np.float64)
        self.p = np.asarray(p, dtype=np.float64)
        self.rstate = rstate if rstate is not None else model.zero_state(1)
        self.loss = loss
        self.u_scale = np.asarray(model.scaling.control)
        self.lower = ctrl.LOWER / self.u_scale
        self.upper = ctrl.UPPER / self.u_scale

    def scale(self, u):
        return np.asarray(u, dtype=np.float64) / self.u_scale

    def unscale(self, us):
        return us * self.u_scale

    def _rollout(self, us):
        """us: (B, N, 3) scaled. Returns scaled outputs (B, N, 72) and tapes."""
        B, N, _ = us.shape
        m = self.model
        xs = self.x / np.asarray(m.scaling.position)
        F = np.broadcast_to(self.F0, (B, N_F))
        state = self.rstate
        outs, tapes = [], []
        for h in range(N):
            inp = np.concatenate([F, np.broadcast_to(xs, (B, 3)), us[:, h],
                                  np.broadcast_to(self.p, (B, len(self.p)))], axis=1)
            F, state, tape = netcore.forward(m.specs, m.weights, inp, state)
            outs.append(F)
            tapes.append(tape)
        return np.stack(outs, axis=1), tapes

    def value(self, us):
        us = np.asarray(us, dtype=np.float64)
        single = us.ndim == 2
        if single:
            us = us[None]
        out, _ = self._rollout(us)
        val, _, _ = _scaled_loss(self.loss, out.reshape(out.shape[:2] + (N_TAXELS, 3)), us)
        return val[0] if single else val

    def value_and_grad(self, us):
        us = np.asarray(us, dtype=np.float64)[None]
        out, tapes = self._rollout(us)
        val, dF, du = _scaled_loss(self.loss, out.reshape(out.shape[:2] + (N_TAXELS, 3)), us)
        dF = dF.reshape(out.shape)
        grad = du[0].copy()
        carry = np.zeros((1, N_F))
        dstate = None
        for h in range(len(tapes) - 1, -1, -1):
            _, dx, dstate = netcore.backward(tapes[h], dF[:, h] + carry, dstate)
            carry = dx[:, :N_F]
            grad[h] += dx[0, U_SLICE]
        return float(val[0]), grad


def expand(model, F_t, x_t, u_seq, p, rstate=None):
    """Predicted frames (N, 72) for targets ``u_seq`` (N, 3); ``rstate`` is not mutated."""
    u_seq = np.asarray(u_seq, dtype=np.float64)
    if u_seq.ndim != 2 or u_seq.shape[1] != 3:
        raise netcore.DimensionMismatch(f"u_seq must be (N, 3), got {u_seq.shape}")
    obj = ModelObjective(model, F_t, x_t, p, rstate, TaskLoss())
    out, _ = obj._rollout(obj.scale(u_seq)[None])
    return out[0] * model.scaling.force


@dataclass
class StepInfo:
    init_loss: float
    loss: float
    gammas: list = field(default_factory=list)
    nonfinite: bool = False


def optimize_plan(objective, init_scaled, cfg=OptConfig()):
    """Gamma-grid gradient descent on a scaled plan, keeping the best plan so far.

    ``objective`` needs ``value(batch)``, ``value_and_grad(plan)`` and box
    bounds ``lower``/``upper`` in the same scaled space.
    """
    gammas = cfg.gammas()
    best = np.clip(init_scaled, objective.lower, objective.upper)
    best_val, grad = objective.value_and_grad(best)
    info = StepInfo(best_val, best_val)
    if not np.isfinite(best_val) or not np.all(np.isfinite(grad)):
        info.nonfinite = True
        return best, info
    for epoch in range(cfg.n_epoch):
        if epoch > 0:
            _, grad = objective.value_and_grad(best)
            if not np.all(np.isfinite(grad)):
                info.nonfinite = True
                break
        if not np.any(grad):
            break
        cands = np.clip(best[None] - gammas[:, None, None] * grad[None], objective.lower, objective.upper)
        vals = np.asarray(objective.value(cands), dtype=np.float64)
        vals = np.where(np.isfinite(vals), vals, np.inf)
        j = int(np.lexsort((gammas, vals))[0])  # lowest loss, then smaller gamma
        info.gammas.append(float(gammas[j]))
        if vals[j] < best_val:
            best, best_val = cands[j], float(vals[j])
        else:
            break
    info.loss = best_val
    return best, info


def optimize_step(model, F_t, x_t, rstate, prev_plan, p, loss=TaskLoss(), cfg=OptConfig(), n_step=N_STEP):
    """One control tick; returns ``(u_opt, plan, info)`` in raw target units."""
    obj = ModelObjective(model, F_t, x_t, p, rstate, loss)
    init = cold_plan(n_step) if prev_plan is None else warm_start(prev_plan)
    init = ctrl.clip_u(init)
    plan_s, info = optimize_plan(obj, obj.scale(init), cfg)
    if info.nonfinite:
        log.warning("non-finite loss in control optimization; keeping the initial plan")
        plan = init
    else:
        plan = ctrl.clip_u(obj.unscale(plan_s))
    return plan[0].copy(), plan, info


@dataclass
class Metrics:
    E1_ave: float
    E2_ave: float
    E3_ave: float
    E2_excluded: int
    E1: np.ndarray
    E2: np.ndarray
    E3: np.ndarray


def step_metrics(frame, f_ref=F_REF):
    """(E1, E2, E3) of one frame; E2 is nan when the mean |F_y| is ~0."""
    f = np.asarray(frame, dtype=np.float64).reshape(N_TAXELS, 3)
    fz, fy = f[:, 2], f[:, 1]
    e1 = float(np.linalg.norm(fz - f_ref))
    absave = float(np.abs(fy).mean())
    e2 = float(fy.std() / absave) if absave >= 1e-9 else np.nan
    e3 = float(np.linalg.norm(fz[_RIGHT] - f_ref) + np.linalg.norm(fz[_LEFT]))
    return e1, e2, e3


def eval_metrics(history, f_ref=F_REF):
    """Time averages of the three evaluation values over a frame history."""
    frames = np.asarray(history, dtype=np.float64)
    if len(frames) == 0:
        raise ValueError("empty history")
    vals = np.array([step_metrics(f, f_ref) for f in frames])
    e2 = vals[:, 1]
    ok = np.isfinite(e2)
    return Metrics(float(vals[:, 0].mean()), float(e2[ok].mean()) if ok.any() else np.nan,
                   float(vals[:, 2].mean()), int((~ok).sum()), vals[:, 0], e2, vals[:, 2])


def metric_for(kind, metrics):
    return {TRACK: metrics.E1_ave, SHEARVAR: metrics.E2_ave, BIASRIGHT: metrics.E3_ave}[kind]
