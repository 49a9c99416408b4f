"""Tactile transition network with parametric bias (PB).

The network maps ``(F_t, x_t, u_t, p)`` to ``F_{t+1}``. ``p`` is a
2-vector fed as an ordinary input; offline it is optimized jointly with the
weights (one vector per trial group), online it is the only thing updated.
"""
from __future__ import annotations

import io
import json
import logging
import struct
from collections import deque
from dataclasses import asdict, dataclass, field

import numpy as np

from . import netcore
from .netcore import FC, LSTM, LayerSpec

log = logging.getLogger(__name__)

N_F, N_X, N_U, N_P = 72, 3, 3, 2
N_IN = N_F + N_X + N_U + N_P
PB_SLICE = slice(N_F + N_X + N_U, N_IN)
U_SLICE = slice(N_F + N_X, N_F + N_X + N_U)

CHECKPOINT_MAGIC = b"TTNPBCK\x00"
CHECKPOINT_VERSION = 1


class InsufficientData(ValueError):
    pass


class BufferTooSmall(ValueError):
    pass


class DegenerateData(ValueError):
    pass


class EpisodeParseError(ValueError):
    pass


def layer_specs(n_in=N_IN, n_out=N_F, lstm=100):
    widths = [n_in, 300, 200, 100, 100]
    specs = [LayerSpec(FC, a, b) for a, b in zip(widths[:-1], widths[1:])]
    specs += [LayerSpec(LSTM, 100, lstm), LayerSpec(LSTM, lstm, lstm)]
    tail = [lstm, 100, 200, 300]
    specs += [LayerSpec(FC, a, b) for a, b in zip(tail[:-1], tail[1:])]
    # unbounded output: normal forces exceed the tanh range after scaling
    specs.append(LayerSpec(FC, 300, n_out, "linear"))
    return specs


@dataclass(frozen=True)
class Scaling:
    force: float = 200.0
    position: tuple = (60.0, 40.0, 20.0)
    control: tuple = (50.0, 50.0, 300.0)


@dataclass
class TTNPBModel:
    specs: list
    weights: np.ndarray
    scaling: Scaling = field(default_factory=Scaling)

    @classmethod
    def initialized(cls, seed=0, specs=None):
        specs = specs or layer_specs()
        return cls(specs, netcore.init_weights(specs, np.random.default_rng(seed)))

    def encode(self, F, x, u, p):
        """Scaled network input; arguments broadcast over leading axes."""
        s = self.scaling
        F = np.asarray(F, dtype=np.float64)
        lead = np.broadcast_shapes(F.shape[:-1], np.shape(x)[:-1], np.shape(u)[:-1], np.shape(p)[:-1])
        parts = [F / s.force, np.asarray(x) / np.asarray(s.position),
                 np.asarray(u) / np.asarray(s.control), np.asarray(p, dtype=np.float64)]
        return np.concatenate([np.broadcast_to(a, lead + a.shape[-1:]) for a in parts], axis=-1)

    def zero_state(self, batch=1):
        return netcore.zero_state(self.specs, batch)


def flat_forces(F):
    """Accept frames as (..., 24, 3) or (..., 72) and return (..., 72)."""
    F = np.asarray(F, dtype=np.float64)
    if F.shape[-2:] == (N_F // 3, 3):
        F = F.reshape(F.shape[:-2] + (N_F,))
    if F.shape[-1] != N_F:
        raise netcore.DimensionMismatch(f"force vector must have {N_F} entries, got shape {F.shape}")
    return F


def predict(model, F_t, x_t, u_t, p, rstate=None):
    """One-step prediction in force units; returns ``(F_next, rstate')``."""
    inp = model.encode(flat_forces(F_t), x_t, u_t, p)
    out, rstate, _ = netcore.forward(model.specs, model.weights, inp, rstate)
    return out * model.scaling.force, rstate


@dataclass
class Episode:
    material_id: str
    trial_id: str
    F: np.ndarray  # (T, 72)
    x: np.ndarray  # (T, 3)
    u: np.ndarray  # (T, 3)

    def __len__(self):
        return len(self.F)


def write_episode(path, ep):
    with open(path, "w") as fh:
        for t in range(len(ep)):
            rec = {"t": t, "material_id": ep.material_id, "trial_id": ep.trial_id,
                   "F": ep.F[t].tolist(), "x": ep.x[t].tolist(), "u": ep.u[t].tolist()}
            fh.write(json.dumps(rec) + "\n")


def read_episode(path):
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                F = np.asarray(rec["F"], dtype=np.float64)
                x = np.asarray(rec["x"], dtype=np.float64)
                u = np.asarray(rec["u"], dtype=np.float64)
                if F.shape != (N_F,) or x.shape != (N_X,) or u.shape != (N_U,):
                    raise ValueError("wrong vector lengths")
                rows.append((rec["material_id"], rec["trial_id"], rec["t"], F, x, u))
            except (ValueError, KeyError, TypeError) as exc:
                raise EpisodeParseError(f"{path}:{lineno}: {exc}") from exc
    if not rows:
        raise EpisodeParseError(f"{path}: no records")
    mats = {r[0] for r in rows}
    trials = {r[1] for r in rows}
    if len(mats) != 1 or len(trials) != 1:
        raise EpisodeParseError(f"{path}: mixed material/trial ids")
    ts = [r[2] for r in rows]
    if ts != list(range(len(ts))):
        raise EpisodeParseError(f"{path}: steps are not contiguous")
    return Episode(rows[0][0], rows[0][1], np.array([r[3] for r in rows]),
                   np.array([r[4] for r in rows]), np.array([r[5] for r in rows]))


class PBTable:
    """Trained PB vectors keyed by trial group, each tagged with its material."""

    def __init__(self):
        self.entries = {}
        self.material = {}

    def add(self, key, material, p):
        self.entries[key] = np.asarray(p, dtype=np.float64).copy()
        self.material[key] = material

    def keys(self):
        return list(self.entries)

    def points(self):
        return np.array([self.entries[k] for k in self.entries])

    def labels(self):
        return [self.material[k] for k in self.entries]

    def materials(self):
        return sorted(set(self.material.values()))

    def by_material(self):
        """Centroid PB per material."""
        return {m: np.mean([p for k, p in self.entries.items() if self.material[k] == m], axis=0)
                for m in self.materials()}

    def nearest_material(self, p):
        cents = self.by_material()
        return min(cents, key=lambda m: (float(np.linalg.norm(cents[m] - p)), m))

    def to_json(self):
        return {k: {"material": self.material[k], "p": self.entries[k].tolist()} for k in self.entries}

    @classmethod
    def from_json(cls, doc):
        t = cls()
        for k, rec in doc.items():
            t.add(k, rec["material"], rec["p"])
        return t


@dataclass
class TrainConfig:
    window: int = 20
    stride: int = 10
    batch: int = 32
    max_epochs: int = 200
    patience: int = 20
    lr: float = 1e-3
    pb_lr: float = 1e-2
    seed: int = 0
    # "trial": one PB per (material, sigma) run; "material": one shared PB per material
    pb_grouping: str = "trial"
    # keep the PB mean at zero by folding it into the first-layer bias after each step
    center_pb: bool = True


@dataclass
class TrainResult:
    model: TTNPBModel
    pbs: PBTable
    curve: list
    initial_mse: float
    final_mse: float


def _group_key(ep, grouping):
    return ep.material_id if grouping == "material" else ep.trial_id


def make_windows(episodes, window, stride):
    """Window index as (episode, start, length) triples; short episodes give one shorter window."""
    starts = []
    for i, ep in enumerate(episodes):
        T = len(ep)
        if T < 2:
            continue
        w = min(window, T - 1)
        s = 0
        while s + w + 1 <= T:
            starts.append((i, s, w))
            s += stride
    return starts


def _window_block(model, episodes, idx, starts, pb, group_of):
    """Input (W, B, 80) and target (W, B, 72) blocks for a batch of windows."""
    w = starts[idx[0]][2]
    sel = [starts[j] for j in idx]
    X = np.empty((w, len(sel), N_IN))
    Y = np.empty((w, len(sel), N_F))
    groups = []
    for b, (i, s, _) in enumerate(sel):
        ep = episodes[i]
        g = group_of[i]
        groups.append(g)
        X[:, b] = model.encode(ep.F[s:s + w], ep.x[s:s + w], ep.u[s:s + w], pb[g])
        Y[:, b] = ep.F[s + 1:s + w + 1] / model.scaling.force
    return X, Y, np.array(groups)


class _RowAdam:
    """Adam over the rows of a PB table; rows without gradient are left alone."""

    def __init__(self, shape, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = np.zeros(shape)
        self.v = np.zeros(shape)
        self.t = np.zeros(shape[0], dtype=int)

    def step(self, params, grads, rows):
        for r in rows:
            self.t[r] += 1
            self.m[r] = self.beta1 * self.m[r] + (1 - self.beta1) * grads[r]
            self.v[r] = self.beta2 * self.v[r] + (1 - self.beta2) * grads[r] ** 2
            mhat = self.m[r] / (1 - self.beta1 ** self.t[r])
            vhat = self.v[r] / (1 - self.beta2 ** self.t[r])
            params[r] -= self.lr * mhat / (np.sqrt(vhat) + self.eps)


def dataset_mse(model, episodes, pb, group_of, starts, batch=256):
    total, count = 0.0, 0
    order = np.arange(len(starts))
    for b0 in range(0, len(order), batch):
        idx = order[b0:b0 + batch]
        for w in sorted({starts[j][2] for j in idx}):
            sub = [j for j in idx if starts[j][2] == w]
            X, Y, _ = _window_block(model, episodes, sub, starts, pb, group_of)
            out, _, _ = netcore.forward(model.specs, model.weights, X)
            total += float(((out - Y) ** 2).sum())
            count += Y.size
    return total / count


class Trainer:
    """Joint weight/PB optimizer; exposed so tests can take single steps."""

    def __init__(self, episodes, cfg=TrainConfig(), model=None, min_materials=2):
        if cfg.pb_grouping not in ("trial", "material"):
            raise ValueError(f"unknown pb_grouping {cfg.pb_grouping!r}")
        mats = {ep.material_id for ep in episodes}
        if len(mats) < min_materials:
            raise InsufficientData(f"training needs at least {min_materials} materials")
        self.cfg = cfg
        self.episodes = list(episodes)
        self.starts = make_windows(self.episodes, cfg.window, cfg.stride)
        covered = {self.episodes[i].material_id for i, _, _ in self.starts}
        missing = mats - covered
        if missing:
            raise InsufficientData(f"no complete training window for {sorted(missing)}")
        self.group_keys = []
        self.group_material = {}
        self.group_of = []
        for ep in self.episodes:
            key = _group_key(ep, cfg.pb_grouping)
            if key not in self.group_material:
                self.group_keys.append(key)
                self.group_material[key] = ep.material_id
            self.group_of.append(self.group_keys.index(key))
        self.model = model or TTNPBModel.initialized(cfg.seed)
        self.pb = np.zeros((len(self.group_keys), N_P))
        self.opt_w = netcore.Adam(cfg.lr)
        self.opt_p = _RowAdam(self.pb.shape, cfg.pb_lr)
        self.rng = np.random.default_rng(cfg.seed)

    def step(self, idx):
        """One optimizer step on the windows ``idx``; returns the batch MSE."""
        X, Y, groups = _window_block(self.model, self.episodes, idx, self.starts, self.pb, self.group_of)
        out, _, tape = netcore.forward(self.model.specs, self.model.weights, X)
        err = out - Y
        loss = float(np.mean(err ** 2))
        dw, dx, _ = netcore.backward(tape, 2.0 * err / err.size)
        dp = np.zeros_like(self.pb)
        np.add.at(dp, groups, dx[:, :, PB_SLICE].sum(axis=0))
        self.opt_w.step(self.model.weights, dw)
        self.opt_p.step(self.pb, dp, sorted(set(groups.tolist())))
        if self.cfg.center_pb:
            self._center()
        return loss

    def _center(self):
        # p only enters the first layer as p @ W_p, so a common shift of every
        # PB is a pure bias change: move it there and the network is unchanged
        shift = self.pb.mean(axis=0)
        W, b = netcore.unpack(self.model.specs, self.model.weights)[0][:2]
        b += shift @ W[PB_SLICE]
        self.pb -= shift

    def batches(self):
        """Shuffled batches; windows of different length never share a batch."""
        order = self.rng.permutation(len(self.starts))
        buckets = {}
        for j in order:
            buckets.setdefault(self.starts[j][2], []).append(int(j))
        out = []
        for w in sorted(buckets):
            b = buckets[w]
            out += [b[i:i + self.cfg.batch] for i in range(0, len(b), self.cfg.batch)]
        if len(buckets) > 1:
            out = [out[i] for i in self.rng.permutation(len(out))]
        return out

    def epoch(self):
        return float(np.mean([self.step(idx) for idx in self.batches()]))

    def mse(self):
        return dataset_mse(self.model, self.episodes, self.pb, self.group_of, self.starts)

    def table(self):
        t = PBTable()
        for k, key in enumerate(self.group_keys):
            t.add(key, self.group_material[key], self.pb[k])
        return t


def train(episodes, cfg=TrainConfig(), progress=None):
    """Fit weights and PBs jointly with Adam on next-step MSE."""
    tr = Trainer(episodes, cfg)
    initial = tr.mse()
    curve = []
    best, stale = np.inf, 0
    for ep in range(cfg.max_epochs):
        loss = tr.epoch()
        if not np.isfinite(loss):
            raise FloatingPointError(f"training loss became {loss} at epoch {ep}")
        curve.append(loss)
        if progress:
            progress(ep, loss)
        log.debug("epoch %d loss %.6g", ep, loss)
        if loss < best * (1 - 1e-4):
            best, stale = loss, 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    return TrainResult(tr.model, tr.table(), curve, initial, tr.mse())


class OnlineBuffer:
    """Most recent contiguous steps used for online PB updates."""

    def __init__(self, capacity=30, threshold=10):
        self.capacity = capacity
        self.threshold = threshold
        self.F = deque(maxlen=capacity)
        self.x = deque(maxlen=capacity)
        self.u = deque(maxlen=capacity)

    def append(self, F, x, u):
        self.F.append(np.asarray(F, dtype=np.float64).reshape(N_F))
        self.x.append(np.asarray(x, dtype=np.float64))
        self.u.append(np.asarray(u, dtype=np.float64))

    def __len__(self):
        return len(self.F)

    def ready(self):
        return len(self) >= self.threshold

    def arrays(self):
        return np.array(self.F), np.array(self.x), np.array(self.u)


def pb_loss_grad(model, F, x, u, p):
    """Next-step MSE over a window (state reset at its start) and its gradient in ``p``."""
    X = model.encode(F[:-1], x[:-1], u[:-1], p)[:, None, :]
    Y = F[1:, None, :] / model.scaling.force
    out, _, tape = netcore.forward(model.specs, model.weights, X)
    err = out - Y
    _, dx, _ = netcore.backward(tape, 2.0 * err / err.size)
    return float(np.mean(err ** 2)), dx[:, 0, PB_SLICE].sum(axis=0)


def online_update_pb(model, buffer, p, optim=None, epochs=3):
    """Refit only ``p`` on the buffered window; the weights are never written."""
    if not buffer.ready():
        raise BufferTooSmall(f"buffer holds {len(buffer)} steps, needs {buffer.threshold}")
    optim = optim or netcore.MomentumSGD(0.01, 0.9)
    p = np.array(p, dtype=np.float64)
    F, x, u = buffer.arrays()
    for _ in range(epochs):
        _, g = pb_loss_grad(model, F, x, u, p)
        optim.step(p, g)
    return p


@dataclass
class PCAResult:
    mean: np.ndarray
    components: np.ndarray  # rows are principal axes, descending variance
    variances: np.ndarray
    projected: np.ndarray


def pb_pca(points):
    """PCA of PB points (table or array); each axis' first nonzero loading is positive."""
    pts = points.points() if isinstance(points, PBTable) else np.asarray(points, dtype=np.float64)
    if len(pts) < 2:
        raise DegenerateData("need at least two PB points")
    mean = pts.mean(axis=0)
    centered = pts - mean
    if np.allclose(centered, 0.0, atol=1e-15):
        raise DegenerateData("all PB points are identical")
    cov = centered.T @ centered / len(pts)
    vals, vecs = np.linalg.eigh(cov)
    order = np.argsort(vals)[::-1]
    vals, vecs = vals[order], vecs[:, order].T.copy()
    for v in vecs:
        nz = np.flatnonzero(np.abs(v) > 1e-12)
        if len(nz) and v[nz[0]] < 0:
            v *= -1
    return PCAResult(mean, vecs, vals, centered @ vecs.T)


def silhouette(points, labels):
    """Mean silhouette coefficient with Euclidean distance."""
    pts = np.asarray(points, dtype=np.float64)
    labels = np.asarray(labels)
    d = np.linalg.norm(pts[:, None, :] - pts[None, :, :], axis=-1)
    uniq = np.unique(labels)
    scores = []
    for i in range(len(pts)):
        same = (labels == labels[i])
        same[i] = False
        if not same.any():
            scores.append(0.0)
            continue
        a = d[i, same].mean()
        b = min(d[i, labels == other].mean() for other in uniq if other != labels[i])
        scores.append((b - a) / max(a, b) if max(a, b) > 0 else 0.0)
    return float(np.mean(scores))


def save_checkpoint(path, model, pbs, config=None):
    buf = io.BytesIO()
    header = json.dumps({
        "format_version": CHECKPOINT_VERSION,
        "scaling": asdict(model.scaling),
        "pb_table": pbs.to_json(),
        "config": config or {},
    }, sort_keys=True).encode()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", len(header)))
    buf.write(header)
    netcore.write_segment(buf, model.specs, model.weights)
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path):
    """Returns ``(model, pbs, config)``."""
    with open(path, "rb") as fh:
        if fh.read(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
            raise netcore.CheckpointError(f"{path}: not a TTNPB checkpoint")
        (n,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(n))
        if header["format_version"] != CHECKPOINT_VERSION:
            raise netcore.CheckpointError(f"{path}: unsupported version {header['format_version']}")
        specs, weights = netcore.read_segment(fh)
    sc = header["scaling"]
    scaling = Scaling(sc["force"], tuple(sc["position"]), tuple(sc["control"]))
    return TTNPBModel(specs, weights, scaling), PBTable.from_json(header["pb_table"]), header["config"]
