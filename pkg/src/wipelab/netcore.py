"""Small differentiable network kernel: fully-connected and LSTM layers.

Layers are evaluated layer-major over a whole ``(T, B, features)`` block, so
the fully-connected layers do one matmul per call and only the LSTM layers
loop over time. The tape returned by :func:`forward` holds everything needed
for exact reverse mode; :func:`backward` returns gradients for the flat weight
vector, for the input block, and for the initial recurrent state (the last is
what lets callers chain single-step calls through a feedback rollout).

Everything runs in float64.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass

import numpy as np

FC = "fc"
LSTM = "lstm"

SEGMENT_MAGIC = b"NCSG"
SEGMENT_VERSION = 1


class DimensionMismatch(ValueError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    in_dim: int
    out_dim: int
    activation: str = "tanh"

    def __post_init__(self):
        if self.kind not in (FC, LSTM):
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.activation not in ("tanh", "linear"):
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.in_dim <= 0 or self.out_dim <= 0:
            raise ValueError("layer widths must be positive")


def check_specs(specs):
    for a, b in zip(specs[:-1], specs[1:]):
        if a.out_dim != b.in_dim:
            raise DimensionMismatch(f"layer widths do not chain: {a.out_dim} -> {b.in_dim}")


def layer_shapes(spec):
    """Parameter array shapes of one layer, in storage order."""
    if spec.kind == FC:
        return [(spec.in_dim, spec.out_dim), (spec.out_dim,)]
    h4 = 4 * spec.out_dim
    return [(spec.in_dim, h4), (spec.out_dim, h4), (h4,)]


def param_count(specs):
    return sum(int(np.prod(s)) for spec in specs for s in layer_shapes(spec))


def unpack(specs, flat):
    """Per-layer lists of views into ``flat`` (writes go through)."""
    if flat.shape != (param_count(specs),):
        raise DimensionMismatch(f"expected {param_count(specs)} parameters, got {flat.shape}")
    views, pos = [], 0
    for spec in specs:
        arrs = []
        for shape in layer_shapes(spec):
            n = int(np.prod(shape))
            arrs.append(flat[pos:pos + n].reshape(shape))
            pos += n
        views.append(arrs)
    return views


def init_weights(specs, rng):
    """Uniform +-1/sqrt(fan_in) init; LSTM forget-gate bias starts at +1."""
    check_specs(specs)
    flat = np.zeros(param_count(specs))
    for spec, arrs in zip(specs, unpack(specs, flat)):
        if spec.kind == FC:
            bound = 1.0 / np.sqrt(spec.in_dim)
            arrs[0][...] = rng.uniform(-bound, bound, arrs[0].shape)
            arrs[1][...] = rng.uniform(-bound, bound, arrs[1].shape)
        else:
            hid = spec.out_dim
            arrs[0][...] = rng.uniform(-1, 1, arrs[0].shape) / np.sqrt(spec.in_dim)
            arrs[1][...] = rng.uniform(-1, 1, arrs[1].shape) / np.sqrt(hid)
            arrs[2][hid:2 * hid] = 1.0
    return flat


def zero_state(specs, batch=1):
    return [(np.zeros((batch, s.out_dim)), np.zeros((batch, s.out_dim)))
            for s in specs if s.kind == LSTM]


def copy_state(rstate):
    return [(h.copy(), c.copy()) for h, c in rstate]


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


class Tape:
    """Caches from one :func:`forward` call."""

    def __init__(self, specs, views, in_ndim, in_shape):
        self.specs = specs
        self.views = views
        self.in_ndim = in_ndim
        self.in_shape = in_shape
        self.caches = []


def _as_block(x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        return x[None, None, :]
    if x.ndim == 2:
        return x[None, :, :]
    if x.ndim == 3:
        return x
    raise DimensionMismatch(f"input must be 1-3 dimensional, got shape {x.shape}")


def _restore(y, ndim):
    if ndim == 1:
        return y[0, 0]
    if ndim == 2:
        return y[0]
    return y


def forward(specs, weights, x, rstate=None):
    """Run the stack on ``x`` of shape (in,), (B, in) or (T, B, in).

    Returns ``(output, new_rstate, tape)``; output has the same leading shape
    as ``x``. ``rstate`` defaults to zeros; a batch-1 state broadcasts.
    """
    block = _as_block(x)
    if block.shape[-1] != specs[0].in_dim:
        raise DimensionMismatch(f"input width {block.shape[-1]} != {specs[0].in_dim}")
    T, B, _ = block.shape
    views = unpack(specs, weights)
    if rstate is None:
        rstate = zero_state(specs, B)
    tape = Tape(specs, views, np.ndim(x), block.shape)
    new_state = []
    k = 0
    h = block
    for spec, arrs in zip(specs, views):
        if spec.kind == FC:
            W, b = arrs
            z = h @ W + b
            y = np.tanh(z) if spec.activation == "tanh" else z
            tape.caches.append((h, y))
            h = y
        else:
            h0, c0 = rstate[k]
            k += 1
            h, last = _lstm_forward(arrs, h, h0, c0, B, tape)
            new_state.append(last)
    return _restore(h, tape.in_ndim), new_state, tape


def _lstm_forward(arrs, x, h0, c0, B, tape):
    Wx, Wh, b = arrs
    H = Wh.shape[0]
    T = x.shape[0]
    hp = np.broadcast_to(h0, (B, H))
    cp = np.broadcast_to(c0, (B, H))
    xproj = x @ Wx + b
    gates = np.empty((T, B, 4 * H))
    cs = np.empty((T, B, H))
    tcs = np.empty((T, B, H))
    hs = np.empty((T, B, H))
    for t in range(T):
        a = xproj[t] + hp @ Wh
        g = gates[t]
        g[:, :H] = _sigmoid(a[:, :H])
        g[:, H:2 * H] = _sigmoid(a[:, H:2 * H])
        g[:, 2 * H:3 * H] = np.tanh(a[:, 2 * H:3 * H])
        g[:, 3 * H:] = _sigmoid(a[:, 3 * H:])
        cs[t] = g[:, H:2 * H] * cp + g[:, :H] * g[:, 2 * H:3 * H]
        tcs[t] = np.tanh(cs[t])
        hs[t] = g[:, 3 * H:] * tcs[t]
        hp, cp = hs[t], cs[t]
    tape.caches.append((x, np.array(h0, copy=True), np.array(c0, copy=True), gates, cs, tcs, hs))
    return hs, (hs[-1].copy(), cs[-1].copy())


def backward(tape, output_grad, state_grad=None):
    """Reverse pass for ``tape``.

    ``output_grad`` matches the forward output's shape. ``state_grad`` is the
    gradient w.r.t. the returned recurrent state (None means zero). Returns
    ``(weight_grads, input_grads, initial_state_grads)``.
    """
    specs = tape.specs
    T, B, _ = tape.in_shape
    dy = np.asarray(output_grad, dtype=np.float64).reshape(T, B, specs[-1].out_dim)
    grad = np.zeros(param_count(specs))
    gviews = unpack(specs, grad)
    n_lstm = sum(s.kind == LSTM for s in specs)
    if state_grad is None:
        state_grad = [None] * n_lstm
    dstate0 = [None] * n_lstm
    k = n_lstm
    for spec, arrs, garrs, cache in zip(reversed(specs), reversed(tape.views),
                                        reversed(gviews), reversed(tape.caches)):
        if spec.kind == FC:
            x, y = cache
            dz = dy * (1.0 - y * y) if spec.activation == "tanh" else dy
            garrs[0][...] = x.reshape(-1, spec.in_dim).T @ dz.reshape(-1, spec.out_dim)
            garrs[1][...] = dz.sum(axis=(0, 1))
            dy = dz @ arrs[0].T
        else:
            k -= 1
            dy, dstate0[k] = _lstm_backward(arrs, garrs, cache, dy, state_grad[k])
    return grad, _restore(dy, tape.in_ndim), dstate0


def _lstm_backward(arrs, garrs, cache, dY, sgrad):
    Wx, Wh, _ = arrs
    x, h0, c0, gates, cs, tcs, hs = cache
    T, B, H = hs.shape
    if sgrad is None:
        dh_next = np.zeros((B, H))
        dc_next = np.zeros((B, H))
    else:
        dh_next = np.array(sgrad[0], dtype=np.float64) + np.zeros((B, H))
        dc_next = np.array(sgrad[1], dtype=np.float64) + np.zeros((B, H))
    da = np.empty((T, B, 4 * H))
    dWh = garrs[1]
    h0b = np.broadcast_to(h0, (B, H))
    c0b = np.broadcast_to(c0, (B, H))
    for t in range(T - 1, -1, -1):
        g = gates[t]
        i, f, gg, o = g[:, :H], g[:, H:2 * H], g[:, 2 * H:3 * H], g[:, 3 * H:]
        c_prev = cs[t - 1] if t > 0 else c0b
        h_prev = hs[t - 1] if t > 0 else h0b
        dh = dY[t] + dh_next
        dc = dh * o * (1.0 - tcs[t] ** 2) + dc_next
        d = da[t]
        d[:, :H] = dc * gg * i * (1.0 - i)
        d[:, H:2 * H] = dc * c_prev * f * (1.0 - f)
        d[:, 2 * H:3 * H] = dc * i * (1.0 - gg * gg)
        d[:, 3 * H:] = dh * tcs[t] * o * (1.0 - o)
        dWh += h_prev.T @ d
        dh_next = d @ Wh.T
        dc_next = dc * f
    garrs[0][...] = x.reshape(-1, Wx.shape[0]).T @ da.reshape(-1, 4 * H)
    garrs[2][...] = da.sum(axis=(0, 1))
    dx = da @ Wx.T
    # initial state may have been broadcast from batch 1
    if h0.shape[0] != B:
        dh_next = dh_next.sum(axis=0, keepdims=True)
        dc_next = dc_next.sum(axis=0, keepdims=True)
    return dx, (dh_next, dc_next)


@dataclass
class OptimConfig:
    rule: str = "adam"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    momentum: float = 0.9

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if self.rule not in ("adam", "momentum"):
            raise ValueError(f"unknown update rule {self.rule!r}")

    def build(self):
        if self.rule == "adam":
            return Adam(self.lr, self.beta1, self.beta2, self.eps)
        return MomentumSGD(self.lr, self.momentum)


class Adam:
    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = None
        self.v = None

    def step(self, params, grads):
        """Update ``params`` in place."""
        if self.m is None:
            self.m = np.zeros_like(params)
            self.v = np.zeros_like(params)
        self.t += 1
        self.m *= self.beta1
        self.m += (1 - self.beta1) * grads
        self.v *= self.beta2
        self.v += (1 - self.beta2) * grads * grads
        mhat = self.m / (1 - self.beta1 ** self.t)
        vhat = self.v / (1 - self.beta2 ** self.t)
        params -= self.lr * mhat / (np.sqrt(vhat) + self.eps)
        return params


class MomentumSGD:
    def __init__(self, lr=0.01, momentum=0.9):
        self.lr, self.momentum = lr, momentum
        self.velocity = None

    def step(self, params, grads):
        if self.velocity is None:
            self.velocity = np.zeros_like(params)
        self.velocity *= self.momentum
        self.velocity -= self.lr * grads
        params += self.velocity
        return params


def write_segment(fp, specs, weights):
    """Versioned header + little-endian float64 parameters."""
    header = json.dumps({
        "format_version": SEGMENT_VERSION,
        "specs": [asdict(s) for s in specs],
        "param_count": param_count(specs),
    }, sort_keys=True).encode()
    fp.write(SEGMENT_MAGIC)
    fp.write(struct.pack("<I", len(header)))
    fp.write(header)
    fp.write(np.asarray(weights, dtype="<f8").tobytes())


def read_segment(fp):
    if fp.read(4) != SEGMENT_MAGIC:
        raise CheckpointError("not a network segment")
    (n,) = struct.unpack("<I", fp.read(4))
    header = json.loads(fp.read(n))
    if header["format_version"] != SEGMENT_VERSION:
        raise CheckpointError(f"unsupported segment version {header['format_version']}")
    specs = [LayerSpec(**s) for s in header["specs"]]
    count = header["param_count"]
    if count != param_count(specs):
        raise CheckpointError("parameter count does not match layer specs")
    raw = fp.read(8 * count)
    if len(raw) != 8 * count:
        raise CheckpointError("truncated parameter block")
    return specs, np.frombuffer(raw, dtype="<f8").astype(np.float64)
