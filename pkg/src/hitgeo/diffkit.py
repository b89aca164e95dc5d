"""Dense feed-forward networks with hand-written reverse mode, Adam, grad checks.

Everything runs in float64.  A :class:`DenseNet` records one tape per
forward call; losses that need the same network at several inputs stack
those inputs into one batch so a single backward pass covers them.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import erf

from ._rng import substream
from .errors import FormatError, FrozenViolation, NonFiniteInput, NoTape, ShapeMismatch

NORM_EPS = 1e-12
_SQRT2 = np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


def _relu(x):
    return np.maximum(x, 0.0)


def _relu_grad(x):
    return (x > 0).astype(np.float64)


def _gelu(x):
    return 0.5 * x * (1.0 + erf(x / _SQRT2))


def _gelu_grad(x):
    return 0.5 * (1.0 + erf(x / _SQRT2)) + x * _INV_SQRT2PI * np.exp(-0.5 * x * x)


ACTIVATIONS = {"relu": (_relu, _relu_grad), "gelu": (_gelu, _gelu_grad)}


class DenseNet:
    """Affine layers with an activation between them; the output layer is linear.

    Weights are stored as ``(fan_in, fan_out)`` so that ``x @ W + b`` maps a
    ``(batch, fan_in)`` array.  Initialization is uniform in
    ``[-1/sqrt(fan_in), 1/sqrt(fan_in)]`` from the given seed.
    """

    def __init__(self, layer_dims, activation="gelu", seed=0):
        if len(layer_dims) < 2:
            raise ValueError("need at least input and output dimensions")
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        self.layer_dims = tuple(int(d) for d in layer_dims)
        self.activation = activation
        self.seed = seed
        self.requires_grad = True
        self._tape = None
        rng = substream(seed, "init")
        self.params = []
        for fan_in, fan_out in zip(self.layer_dims[:-1], self.layer_dims[1:]):
            bound = 1.0 / np.sqrt(fan_in)
            self.params.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
            self.params.append(rng.uniform(-bound, bound, size=fan_out))

    @property
    def n_layers(self):
        return len(self.layer_dims) - 1

    @property
    def n_params(self):
        return sum(p.size for p in self.params)

    def param_names(self):
        names = []
        for i in range(self.n_layers):
            names += [f"W{i}", f"b{i}"]
        return names

    def freeze(self):
        self.requires_grad = False
        self._tape = None
        return self

    def copy(self):
        twin = DenseNet.__new__(DenseNet)
        twin.layer_dims = self.layer_dims
        twin.activation = self.activation
        twin.seed = self.seed
        twin.requires_grad = self.requires_grad
        twin._tape = None
        twin.params = [p.copy() for p in self.params]
        return twin

    def forward(self, x, record=True):
        x = np.asarray(x, dtype=np.float64)
        squeeze = x.ndim == 1
        if squeeze:
            x = x[None, :]
        if x.shape[-1] != self.layer_dims[0]:
            raise ShapeMismatch(f"expected input width {self.layer_dims[0]}, got {x.shape[-1]}")
        if not np.all(np.isfinite(x)):
            raise NonFiniteInput("network input contains NaN or Inf")
        act, _ = ACTIVATIONS[self.activation]
        pre_acts = []
        inputs = [x]
        h = x
        for i in range(self.n_layers):
            W, b = self.params[2 * i], self.params[2 * i + 1]
            z = h @ W + b
            if i < self.n_layers - 1:
                pre_acts.append(z)
                h = act(z)
                inputs.append(h)
            else:
                h = z
        if record and self.requires_grad:
            self._tape = (inputs, pre_acts, squeeze)
        return h[0] if squeeze else h

    __call__ = forward

    def backward(self, upstream):
        """Gradients of <upstream, output> for the last recorded forward pass.

        Returns ``(param_grads, input_grad)``; ``param_grads`` is aligned
        with ``self.params``.  The tape is consumed.
        """
        if not self.requires_grad:
            raise FrozenViolation("backward() on a frozen network")
        if self._tape is None:
            raise NoTape("backward() called without a recorded forward pass")
        inputs, pre_acts, squeeze = self._tape
        self._tape = None
        g = np.asarray(upstream, dtype=np.float64)
        if squeeze:
            g = g[None, :]
        _, act_grad = ACTIVATIONS[self.activation]
        grads = [None] * len(self.params)
        for i in reversed(range(self.n_layers)):
            W = self.params[2 * i]
            grads[2 * i] = inputs[i].T @ g
            grads[2 * i + 1] = g.sum(axis=0)
            g = g @ W.T
            if i > 0:
                g = g * act_grad(pre_acts[i - 1])
        return grads, (g[0] if squeeze else g)

    def flat(self):
        return np.concatenate([p.ravel() for p in self.params])

    def set_flat(self, vec):
        vec = np.asarray(vec, dtype=np.float64)
        if vec.size != self.n_params:
            raise ShapeMismatch("flat parameter vector has the wrong size")
        pos = 0
        for p in self.params:
            p[...] = vec[pos : pos + p.size].reshape(p.shape)
            pos += p.size

    def polyak_update(self, source, tau):
        """self <- (1 - tau) * self + tau * source, in place."""
        for p, q in zip(self.params, source.params):
            p *= 1.0 - tau
            p += tau * q


def forward(net, x):
    return net.forward(x)


def backward(net, upstream):
    return net.backward(upstream)


def unit_rows(z):
    """Row-normalize with the stabilized denominator ||z|| + 1e-12."""
    norm = np.linalg.norm(z, axis=-1, keepdims=True)
    return z / (norm + NORM_EPS), norm


def unit_rows_backward(z, norm, grad_unit):
    """Pull a gradient w.r.t. z / (||z|| + eps) back to z."""
    denom = norm + NORM_EPS
    safe = np.where(norm > 0, norm, 1.0)
    proj = np.sum(z * grad_unit, axis=-1, keepdims=True)
    return grad_unit / denom - z * proj / (safe * denom * denom) * (norm > 0)


@dataclass
class OptimizerState:
    """Adam state; moment buffers are allocated lazily on the first step."""

    learning_rate: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps_stab: float = 1e-8
    step: int = 0
    m: list = None
    v: list = None

    def to_dict(self):
        return {
            "learning_rate": self.learning_rate,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "eps_stab": self.eps_stab,
            "step": self.step,
        }


def opt_step(state, params, grads):
    """One bias-corrected Adam update applied to ``params`` in place."""
    if len(params) != len(grads) or any(p.shape != g.shape for p, g in zip(params, grads)):
        raise ShapeMismatch("gradient shapes do not match parameters")
    if state.m is None:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    elif any(p.shape != m.shape for p, m in zip(params, state.m)):
        raise ShapeMismatch("optimizer moments do not match parameters")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= state.learning_rate * (m / c1) / (np.sqrt(v / c2) + state.eps_stab)
    return params, state


@dataclass(frozen=True)
class GradReport:
    max_rel_err: float
    worst_param: str
    n_checked: int


def grad_check(loss, params, step=1e-5, names=None, max_coords=10_000, seed=0, floor=1e-4):
    """Compare analytic gradients against central differences.

    ``loss()`` must return ``(value, grads)`` evaluated at the current
    contents of ``params`` (arrays perturbed in place here).  The relative
    error per coordinate is ``|a - n| / max(|a|, |n|, floor)``.  The floor
    keeps exactly-zero gradients (e.g. an output bias that every loss term
    cancels) from turning central-difference roundoff, ~1e-11, into a large
    relative error.  Above
    ``max_coords`` coordinates a seeded random subset is checked.
    """
    names = names or [f"p{i}" for i in range(len(params))]
    _, analytic = loss()
    analytic = [np.array(g, dtype=np.float64) for g in analytic]
    coords = [(i, j) for i, p in enumerate(params) for j in range(p.size)]
    if len(coords) > max_coords:
        rng = substream(seed, "gradcheck")
        pick = np.sort(rng.choice(len(coords), size=max_coords, replace=False))
        coords = [coords[k] for k in pick]
    worst, worst_name = 0.0, ""
    for i, j in coords:
        flat = params[i].reshape(-1)
        orig = flat[j]
        flat[j] = orig + step
        up, _ = loss()
        flat[j] = orig - step
        down, _ = loss()
        flat[j] = orig
        numeric = (up - down) / (2.0 * step)
        a = analytic[i].reshape(-1)[j]
        err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
        if err > worst:
            worst, worst_name = err, f"{names[i]}[{j}]"
    return GradReport(float(worst), worst_name, len(coords))


CKPT_MAGIC = b"HITGEO-CKPT\n"
CKPT_VERSION = 1


def save_checkpoint(path, nets, optimizers=None, meta=None):
    """Write named networks (and optional Adam states) to one checkpoint file.

    Layout: magic | uint32 version | uint32 header_len | header JSON | float64
    payload.  The header lists each block's name, shape and offset so the
    file is self-describing.
    """
    optimizers = optimizers or {}
    blocks, arrays = [], []
    offset = 0

    def add(name, arr):
        nonlocal offset
        arr = np.ascontiguousarray(arr, dtype="<f8")
        blocks.append({"name": name, "shape": list(arr.shape), "offset": offset})
        arrays.append(arr)
        offset += arr.size

    net_info = {}
    for name, net in nets.items():
        net_info[name] = {
            "layer_dims": list(net.layer_dims),
            "activation": net.activation,
            "seed": net.seed,
            "frozen": not net.requires_grad,
        }
        add(f"{name}/params", net.flat())
    opt_info = {}
    for name, st in optimizers.items():
        opt_info[name] = st.to_dict()
        if st.m is not None:
            add(f"{name}/m", np.concatenate([m.ravel() for m in st.m]))
            add(f"{name}/v", np.concatenate([v.ravel() for v in st.v]))
    header = json.dumps(
        {"nets": net_info, "optimizers": opt_info, "blocks": blocks, "meta": meta or {}},
        sort_keys=True,
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<II", CKPT_VERSION, len(header)))
        fh.write(header)
        for arr in arrays:
            fh.write(arr.tobytes())
    return Path(path)


def load_checkpoint(path):
    """Return ``(nets, optimizers, meta)`` from :func:`save_checkpoint` output."""
    raw = Path(path).read_bytes()
    if not raw.startswith(CKPT_MAGIC):
        raise FormatError(f"{path}: not a HITGEO-CKPT file")
    pos = len(CKPT_MAGIC)
    version, hlen = struct.unpack_from("<II", raw, pos)
    if version != CKPT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    pos += 8
    header = json.loads(raw[pos : pos + hlen])
    payload = np.frombuffer(raw, dtype="<f8", offset=pos + hlen).astype(np.float64)
    blocks = {}
    for b in header["blocks"]:
        size = int(np.prod(b["shape"]))
        blocks[b["name"]] = payload[b["offset"] : b["offset"] + size].reshape(b["shape"])
    nets = {}
    for name, info in header["nets"].items():
        net = DenseNet(info["layer_dims"], info["activation"], info["seed"])
        net.set_flat(blocks[f"{name}/params"])
        if info["frozen"]:
            net.freeze()
        nets[name] = net
    opts = {}
    for name, info in header["optimizers"].items():
        st = OptimizerState(
            info["learning_rate"], info["beta1"], info["beta2"], info["eps_stab"], info["step"]
        )
        if f"{name}/m" in blocks:
            shapes = [p.shape for p in nets[name].params] if name in nets else None
            if shapes is None:
                raise FormatError(f"{path}: optimizer {name!r} has no matching network")
            st.m = _split(blocks[f"{name}/m"], shapes)
            st.v = _split(blocks[f"{name}/v"], shapes)
        opts[name] = st
    return nets, opts, header["meta"]


def _split(vec, shapes):
    out, pos = [], 0
    for shape in shapes:
        size = int(np.prod(shape))
        out.append(vec[pos : pos + size].reshape(shape).copy())
        pos += size
    return out
