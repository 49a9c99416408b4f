"""Experiment orchestration: trajectories, data collection, training,
online recognition and control comparison, with file outputs.

Every random stream is derived from the experiment seed plus fixed keys, so
a (seed, config) pair fully determines every artifact.
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path

import numpy as np
import yaml

from . import ctrl, sim, taskctl, ttnpb
from .ctrl import ControlInput, CtrlState
from .sim import HandPose

log = logging.getLogger(__name__)

DT = 0.2
DEFAULT_SIGMAS = ((10.0, 30.0), (3.0, 10.0))
CSV_VERSION = 1
PB_TRAJ_COLUMNS = ["csv_version", "update", "step", "p0", "p1", "nearest"]
PCA_COLUMNS = ["csv_version", "key", "material", "p0", "p1", "pc1", "pc2"]
LOSS_COLUMNS = ["csv_version", "epoch", "mse"]
METRIC_COLUMNS = ["csv_version", "material", "loss", "pb", "seed", "ticks", "E_ave", "E1_ave", "E2_ave",
                  "E3_ave", "E2_excluded", "mean_tau_roll_ref", "mean_tau_pitch_ref", "mean_f_z_ref"]


class ConfigError(ValueError):
    pass


@dataclass
class TrajectoryConfig:
    stroke: float = 120.0  # mm along x
    pitch: float = 20.0  # mm lateral shift between strokes
    speed: float = 30.0  # mm/s
    lateral_extent: float = 80.0  # mm; the lateral direction reverses at +-extent/2


@dataclass
class CollectConfig:
    materials: list = field(default_factory=lambda: ["desk", "paper", "cardboard", "plastic", "foam"])
    sigmas: list = field(default_factory=lambda: [list(s) for s in DEFAULT_SIGMAS])
    steps: int = 1000
    warmup: int = 10


@dataclass
class RecognizeConfig:
    materials: list = field(default_factory=lambda: ["desk", "foam", "cardboard", "thin_cardboard"])
    steps: int = 1500
    sigma: list = field(default_factory=lambda: [10.0, 30.0])
    lr: float = 0.01
    momentum: float = 0.9
    start: str = "farthest"  # "farthest" trained PB from the target family, "mean", or a material name


@dataclass
class ControlConfig:
    material: str = "foam"
    wrong_material: str = "desk"
    steps: int = 600
    smooth: float = 0.01
    online_pb: bool = False


@dataclass
class ExperimentConfig:
    seed: int = 0
    material_library: str | None = None
    trajectory: TrajectoryConfig = field(default_factory=TrajectoryConfig)
    collect: CollectConfig = field(default_factory=CollectConfig)
    train: ttnpb.TrainConfig = field(default_factory=ttnpb.TrainConfig)
    recognize: RecognizeConfig = field(default_factory=RecognizeConfig)
    control: ControlConfig = field(default_factory=ControlConfig)

    def materials(self):
        try:
            return sim.load_materials(self.material_library)
        except (OSError, yaml.YAMLError, KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"bad material library {self.material_library}: {exc}") from exc

    def validate(self):
        mats, _ = self.materials()
        referenced = set(self.collect.materials) | set(self.recognize.materials)
        referenced |= {self.control.material, self.control.wrong_material}
        missing = referenced - set(mats)
        if missing:
            raise ConfigError(f"materials not in library: {sorted(missing)}")
        t = self.trajectory
        if min(t.stroke, t.pitch, t.speed) <= 0:
            raise ConfigError("trajectory stroke, pitch and speed must be positive")
        return self

    def to_dict(self):
        return asdict(self)


def _merge(dc, overrides, where="config"):
    names = {f.name: f for f in fields(dc)}
    for key, val in (overrides or {}).items():
        if key not in names:
            raise ConfigError(f"unknown key {where}.{key}")
        cur = getattr(dc, key)
        if is_dataclass(cur):
            if not isinstance(val, dict):
                raise ConfigError(f"{where}.{key} must be a section")
            _merge(cur, val, f"{where}.{key}")
        else:
            setattr(dc, key, val)
    return dc


def load_config(path=None, **overrides):
    cfg = ExperimentConfig()
    if path is not None:
        try:
            with open(path) as fh:
                doc = yaml.safe_load(fh) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(doc, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        _merge(cfg, doc)
    _merge(cfg, {k: v for k, v in overrides.items() if v is not None})
    return cfg.validate()


def gen_trajectory(cfg, n_strokes, dt=DT):
    """Serpentine xy path sampled at ``dt``, starting at (-stroke/2, 0).

    Each stroke runs the full length along x and is followed by one lateral
    shift of ``pitch``; consecutive points are at most ``speed * dt`` apart.
    """
    if min(cfg.stroke, cfg.pitch, cfg.speed) <= 0:
        raise ValueError("stroke, pitch and speed must be positive")
    step = cfg.speed * dt
    x, y = -cfg.stroke / 2, 0.0
    xdir, ydir = 1.0, 1.0
    pts = []

    def move_to(tx, ty):
        nonlocal x, y
        dist = np.hypot(tx - x, ty - y)
        n = int(np.ceil(dist / step - 1e-9))
        x0, y0 = x, y
        for k in range(1, n + 1):
            pts.append((x0 + (tx - x0) * k / n, y0 + (ty - y0) * k / n))
        x, y = tx, ty

    for _ in range(n_strokes):
        move_to(x + xdir * cfg.stroke, y)
        xdir = -xdir
        if abs(y + ydir * cfg.pitch) > cfg.lateral_extent / 2 + 1e-9:
            ydir = -ydir
        move_to(x, y + ydir * cfg.pitch)
    return np.array(pts).reshape(-1, 2)


def trajectory_points(cfg, steps, dt=DT):
    """At least ``steps`` points of the serpentine path."""
    per_stroke = (cfg.stroke + cfg.pitch) / (cfg.speed * dt) + 2
    n = int(np.ceil(steps / per_stroke)) + 1
    pts = gen_trajectory(cfg, n, dt)
    while len(pts) < steps:
        n *= 2
        pts = gen_trajectory(cfg, n, dt)
    return pts[:steps]


def _seed(*keys):
    return np.random.SeedSequence([int(k) for k in keys])


def _child(seed_seq, k):
    # like SeedSequence.spawn, but without advancing the parent's child counter,
    # so passing one seed to several runs gives each run the same streams
    return np.random.SeedSequence(seed_seq.entropy, spawn_key=tuple(seed_seq.spawn_key) + (k,),
                                  pool_size=seed_seq.pool_size)


def _name_key(name):
    return int.from_bytes(hashlib.sha256(name.encode()).digest()[:4], "little")


class WipeRig:
    """Simulated robot + sensor + proportional loop, stepped at the control tick."""

    def __init__(self, material, seed_seq, start_xy=(0.0, 0.0), hover=5.0):
        self.material = material
        sim_ss = _child(seed_seq, 0)
        self.sim = sim.Simulator(material, seed=sim_ss, start=HandPose(start_xy[0], start_xy[1], hover), dt=DT)
        self.cs = CtrlState(x_z_ref=-hover)
        self.xy = np.array(start_xy, dtype=np.float64)
        # offsets captured while hovering
        self.bias = self.sim.step(self.command())
        self.frame = sim.remove_offsets(self.bias, self.bias)

    def command(self):
        return HandPose(self.xy[0], self.xy[1], -self.cs.x_z_ref, self.cs.theta_roll_ref, self.cs.theta_pitch_ref)

    def position(self):
        """What the robot believes its hand position is: the commanded one."""
        return np.array([self.xy[0], self.xy[1], -self.cs.x_z_ref])

    def tick(self, u, next_xy):
        self.cs, _ = ctrl.proportional_step(self.cs, u, self.frame)
        self.xy = np.asarray(next_xy, dtype=np.float64)
        raw = self.sim.step(self.command())
        self.frame = sim.remove_offsets(raw, self.bias)
        return self.frame


BASIC_U = ControlInput(0.0, 0.0, 200.0)


def collect_episode(material, sigma, steps, seed_seq, traj_cfg, trial_id, warmup=10):
    """One data-collection run: proportional control + random target walk."""
    rig_ss, walk_ss = _child(seed_seq, 0), _child(seed_seq, 1)
    pts = trajectory_points(traj_cfg, steps)
    rig = WipeRig(material, rig_ss, start_xy=pts[0] if len(pts) else (0.0, 0.0))
    for _ in range(warmup):
        rig.tick(BASIC_U, rig.xy)
    rng = np.random.default_rng(walk_ss)
    u = BASIC_U
    F = np.empty((steps, ttnpb.N_F))
    X = np.empty((steps, 3))
    U = np.empty((steps, 3))
    for t in range(steps):
        u = ctrl.random_walk_targets(u, sigma[0], sigma[1], rng)
        F[t] = rig.frame.reshape(-1)
        X[t] = rig.position()
        U[t] = u.as_array()
        rig.tick(u, pts[t])
    return ttnpb.Episode(material.name, trial_id, F, X, U)


def trial_id(material, k):
    return f"{material}-s{k}"


def cmd_collect(cfg, out):
    """Write one episode file per (material, sigma setting); returns the paths."""
    mats, _ = cfg.materials()
    out = Path(out) / "episodes"
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for name in cfg.collect.materials:
        for k, sigma in enumerate(cfg.collect.sigmas):
            tid = trial_id(name, k)
            ep = collect_episode(mats[name], sigma, cfg.collect.steps,
                                 _seed(cfg.seed, 1, _name_key(name), k),
                                 cfg.trajectory, tid, cfg.collect.warmup)
            path = out / f"{tid}.jsonl"
            tmp = path.with_suffix(".jsonl.part")
            try:
                ttnpb.write_episode(tmp, ep)
                os.replace(tmp, path)
            finally:
                if tmp.exists():
                    tmp.unlink()
            paths.append(path)
    return paths


def file_sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_csv(path, columns, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([CSV_VERSION] + [repr(v) if isinstance(v, float) else v for v in r])


def load_episodes(paths):
    eps = [ttnpb.read_episode(p) for p in sorted(map(str, paths))]
    if not eps:
        raise ttnpb.InsufficientData("no episode files")
    return eps


def cmd_train(cfg, episode_paths, out, progress=None):
    """Train on episode files; writes checkpoint, loss curve and PB table. Returns the result."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    eps = load_episodes(episode_paths)
    tcfg = ttnpb.TrainConfig(**{**asdict(cfg.train), "seed": cfg.train.seed + cfg.seed})
    result = ttnpb.train(eps, tcfg, progress)
    ckpt = out / "checkpoint.bin"
    ttnpb.save_checkpoint(ckpt, result.model, result.pbs, {
        "train": asdict(tcfg), "initial_mse": result.initial_mse, "final_mse": result.final_mse})
    _write_csv(out / "loss_curve.csv", LOSS_COLUMNS, [(i, v) for i, v in enumerate(result.curve)])
    write_pca(result.pbs, out / "pb_pca.csv")
    _write_record(out / "train_record.json", cfg, ckpt, {
        "episodes": sorted(map(str, episode_paths)), "checkpoint": str(ckpt)},
        {"initial_mse": result.initial_mse, "final_mse": result.final_mse, "epochs": len(result.curve)})
    return result


def write_pca(pbs, path):
    pca = ttnpb.pb_pca(pbs)
    rows = [(k, pbs.material[k], float(p[0]), float(p[1]), float(q[0]), float(q[1]))
            for k, p, q in zip(pbs.keys(), pbs.points(), pca.projected)]
    _write_csv(path, PCA_COLUMNS, rows)
    return pca


def _write_record(path, cfg, ckpt, files, summary):
    rec = {"config": cfg.to_dict(), "checkpoint_sha256": file_sha256(ckpt) if ckpt else None,
           "files": files, "summary": summary}
    with open(path, "w") as fh:
        json.dump(rec, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return rec


def verify_record(path):
    """Recheck the checkpoint hash stored in a run record; raises on mismatch."""
    with open(path) as fh:
        rec = json.load(fh)
    ckpt = rec["files"].get("checkpoint")
    if ckpt and file_sha256(ckpt) != rec["checkpoint_sha256"]:
        raise ttnpb.InsufficientData(f"{path}: checkpoint {ckpt} changed since the run")
    return rec


@dataclass
class Recognition:
    trajectory: np.ndarray  # (n_updates, 2)
    steps: list
    nearest: list
    start: np.ndarray


def start_pb(pbs, how, target=None):
    """Initial PB: "mean" of the trained centroids, "farthest" from ``target``, or a material name."""
    cents = pbs.by_material()
    if how == "mean":
        return np.mean(list(cents.values()), axis=0)
    if how == "farthest":
        if target not in cents:
            raise ConfigError(f"no trained PB for {target!r} to measure from")
        return max(cents.values(), key=lambda c: float(np.linalg.norm(c - cents[target]))).copy()
    if how not in cents:
        raise ConfigError(f"no trained PB for {how!r}")
    return cents[how].copy()


def recognize(model, pbs, material, steps, seed_seq, traj_cfg, sigma=(10.0, 30.0), p0=None,
              lr=0.01, momentum=0.9, warmup=10):
    """Random-target wiping with online PB updates after every tick."""
    rig_ss, walk_ss = _child(seed_seq, 0), _child(seed_seq, 1)
    pts = trajectory_points(traj_cfg, steps)
    rig = WipeRig(material, rig_ss, start_xy=pts[0] if len(pts) else (0.0, 0.0))
    for _ in range(warmup):
        rig.tick(BASIC_U, rig.xy)
    rng = np.random.default_rng(walk_ss)
    p = np.zeros(ttnpb.N_P) if p0 is None else np.array(p0, dtype=np.float64)
    start = p.copy()
    buf = ttnpb.OnlineBuffer()
    opt = ttnpb.netcore.MomentumSGD(lr, momentum)
    u = BASIC_U
    traj, at, nearest = [], [], []
    for t in range(steps):
        u = ctrl.random_walk_targets(u, sigma[0], sigma[1], rng)
        buf.append(rig.frame, rig.position(), u.as_array())
        if buf.ready():
            p = ttnpb.online_update_pb(model, buf, p, opt)
            traj.append(p.copy())
            at.append(t)
            nearest.append(pbs.nearest_material(p))
        rig.tick(u, pts[t])
    return Recognition(np.array(traj).reshape(-1, ttnpb.N_P), at, nearest, start)


def cmd_recognize(cfg, checkpoint, material, out, steps=None, start=None):
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    mats, _ = cfg.materials()
    if material not in mats:
        raise ConfigError(f"unknown material {material!r}")
    model, pbs, _ = ttnpb.load_checkpoint(checkpoint)
    rc = cfg.recognize
    steps = rc.steps if steps is None else steps
    _, meta = cfg.materials()
    family = meta.get("family", {}).get(material, material)
    p0 = start_pb(pbs, start or rc.start, family)
    res = recognize(model, pbs, mats[material], steps, _seed(cfg.seed, 2, _name_key(material)),
                    cfg.trajectory, rc.sigma, p0, rc.lr, rc.momentum)
    if len(res.trajectory) == 0:
        log.warning("%d steps is below the online threshold; no PB updates were made", steps)
    path = out / f"pb_traj_{material}.csv"
    _write_csv(path, PB_TRAJ_COLUMNS, [(i, s, float(p[0]), float(p[1]), n) for i, (s, p, n)
                                       in enumerate(zip(res.steps, res.trajectory, res.nearest))])
    _write_record(out / f"recognize_{material}.json", cfg, checkpoint, {
        "checkpoint": str(checkpoint), "pb_trajectory": str(path)},
        {"material": material, "updates": len(res.trajectory),
         "final_p": res.trajectory[-1].tolist() if len(res.trajectory) else None,
         "final_nearest": res.nearest[-1] if res.nearest else None})
    return res


@dataclass
class ControlRun:
    frames: np.ndarray  # (T, 24, 3)
    u: np.ndarray  # (T, 3)
    metrics: taskctl.Metrics | None
    nonfinite_ticks: list
    records: list


def pb_for_mode(pbs, mode, material):
    """PB vector for 'correct', 'basic' (None) or 'wrong:<name>'."""
    cents = pbs.by_material()
    if mode == "basic":
        return None
    if mode == "correct":
        name = material
    elif mode.startswith("wrong:"):
        name = mode.split(":", 1)[1]
    else:
        raise ConfigError(f"unknown pb mode {mode!r}")
    if name not in cents:
        raise ConfigError(f"no trained PB for {name!r}")
    return cents[name].copy()


def replay_state(model, hist_F, hist_x, hist_u, p):
    """Recurrent state after running the recent history from a zero state."""
    if not hist_F:
        return model.zero_state(1)
    inp = model.encode(np.array(hist_F), np.array(hist_x), np.array(hist_u), p)[:, None, :]
    _, state, _ = ttnpb.netcore.forward(model.specs, model.weights, inp)
    return state


def run_control(model, pbs, material, loss_kind, mode, steps, seed_seq, traj_cfg,
                smooth=0.01, opt_cfg=taskctl.OptConfig(), online_pb=False, warmup=10):
    """Closed loop: optimize_step -> proportional_step -> sim, one tick at a time."""
    rig_ss = _child(seed_seq, 0)
    pts = trajectory_points(traj_cfg, steps)
    rig = WipeRig(material, rig_ss, start_xy=pts[0] if len(pts) else (0.0, 0.0))
    for _ in range(warmup):
        rig.tick(BASIC_U, rig.xy)
    p = pb_for_mode(pbs, mode, material.name) if mode != "basic" else None
    loss = taskctl.TaskLoss(loss_kind, smooth)
    context = max(1, ttnpb.TrainConfig().window - taskctl.N_STEP)
    hist_F, hist_x, hist_u = [], [], []
    buf = ttnpb.OnlineBuffer()
    pb_opt = ttnpb.netcore.MomentumSGD(0.01, 0.9)
    plan = None
    frames, us, bad, records = [], [], [], []
    for t in range(steps):
        F_t = rig.frame.copy()
        x_t = rig.position()
        if p is None:
            u = BASIC_U.as_array()
        else:
            rstate = replay_state(model, hist_F, hist_x, hist_u, p)
            u, plan, info = taskctl.optimize_step(model, F_t, x_t, rstate, plan, p, loss, opt_cfg)
            if info.nonfinite:
                bad.append(t)
                log.warning("tick %d: non-finite control loss", t)
            hist_F.append(F_t.reshape(-1))
            hist_x.append(x_t)
            hist_u.append(u)
            if len(hist_F) > context:
                del hist_F[0], hist_x[0], hist_u[0]
            if online_pb:
                buf.append(F_t, x_t, u)
                if buf.ready():
                    p = ttnpb.online_update_pb(model, buf, p, pb_opt)
        e1, e2, e3 = taskctl.step_metrics(F_t)
        tr, tp = ctrl.sensed_torques(F_t)
        records.append({"t": t, "u_opt": [float(v) for v in u],
                        "F": {"fz_mean": float(F_t[:, 2].mean()), "tau_roll": float(tr), "tau_pitch": float(tp),
                              "fy_absmean": float(np.abs(F_t[:, 1]).mean())},
                        "E": [e1, None if np.isnan(e2) else e2, e3]})
        frames.append(F_t)
        us.append(np.asarray(u, dtype=np.float64))
        rig.tick(ControlInput.from_array(u), pts[t])
    metrics = taskctl.eval_metrics(frames) if frames else None
    return ControlRun(np.array(frames).reshape(-1, 24, 3), np.array(us).reshape(-1, 3), metrics, bad, records)


def control_seed(cfg_seed, material, run_seed):
    # shared by Basic/Correct/Wrong so the three modes see the same rattle noise
    return _seed(cfg_seed, 3, _name_key(material), run_seed)


def cmd_control(cfg, checkpoint, out, material=None, loss_kind=taskctl.TRACK, pb_mode="correct",
                steps=None, run_seed=0):
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    mats, _ = cfg.materials()
    material = material or cfg.control.material
    if material not in mats:
        raise ConfigError(f"unknown material {material!r}")
    if loss_kind not in taskctl.LOSS_KINDS:
        raise ConfigError(f"unknown loss {loss_kind!r}")
    model, pbs, _ = ttnpb.load_checkpoint(checkpoint)
    steps = cfg.control.steps if steps is None else steps
    run = run_control(model, pbs, mats[material], loss_kind, pb_mode, steps,
                      control_seed(cfg.seed, material, run_seed), cfg.trajectory,
                      cfg.control.smooth, online_pb=cfg.control.online_pb)
    tag = f"{material}_{loss_kind}_{pb_mode.replace(':', '-')}_{run_seed}"
    log_path = out / f"control_{tag}.jsonl"
    with open(log_path, "w") as fh:
        for r in run.records:
            fh.write(json.dumps(r) + "\n")
    row = metrics_row(material, loss_kind, pb_mode, run_seed, run)
    met_path = out / f"metrics_{tag}.csv"
    _write_csv(met_path, METRIC_COLUMNS, [row[1:]])
    _write_record(out / f"control_{tag}.json", cfg, checkpoint, {
        "checkpoint": str(checkpoint), "control_log": str(log_path), "metrics": str(met_path)},
        dict(zip(METRIC_COLUMNS[1:], row[1:])) | {"nonfinite_ticks": run.nonfinite_ticks})
    if steps == 0:
        log.warning("0 control steps: metrics are undefined")
    return run


def metrics_row(material, loss_kind, pb_mode, run_seed, run):
    m = run.metrics
    nan = float("nan")
    if m is None:
        vals = [nan, nan, nan, nan, 0]
        means = [nan, nan, nan]
    else:
        vals = [float(taskctl.metric_for(loss_kind, m)), m.E1_ave, m.E2_ave, m.E3_ave, m.E2_excluded]
        means = [float(v) for v in run.u.mean(axis=0)]
    return [CSV_VERSION, material, loss_kind, pb_mode, run_seed, len(run.frames)] + vals + means


def cmd_eval(run_dir, out=None):
    """Collect every control run record under ``run_dir`` into one metrics CSV."""
    run_dir = Path(run_dir)
    rows = []
    for rec_path in sorted(run_dir.glob("control_*.json")):
        rec = verify_record(rec_path)
        s = rec["summary"]
        rows.append([s[c] for c in METRIC_COLUMNS[1:]])
    path = Path(out or run_dir) / "metrics.csv"
    _write_csv(path, METRIC_COLUMNS, rows)
    return path, rows


def cmd_pca(checkpoint, out):
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    _, pbs, _ = ttnpb.load_checkpoint(checkpoint)
    return write_pca(pbs, out / "pb_pca.csv")
