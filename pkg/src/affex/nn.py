"""Dense-tensor layers with explicit forward/backward passes, optimizers,
a finite-difference gradient checker and the parameter container format.

Every ``*_apply``/``*_forward`` function returns its output together with a
backward closure mapping the upstream gradient to input and parameter
gradients.  All math is float64.
"""

from __future__ import annotations

import io
import json
import math
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Mapping

import numpy as np

from . import kernels
from .errors import ContractError, IntegrityError, ShapeError

ACTIVATIONS = ("identity", "relu", "tanh")


# --------------------------------------------------------------------------
# parameters


@dataclass
class Parameter:
    value: np.ndarray
    trainable: bool = True


class ParameterSet:
    """Ordered ``name -> Parameter`` map; names are unique."""

    def __init__(self):
        self._params: dict[str, Parameter] = {}

    def add(self, name: str, value, trainable: bool = True) -> None:
        if name in self._params:
            raise ContractError(f"duplicate parameter name {name!r}")
        arr = np.array(value, dtype=np.float64)
        if arr.ndim == 0 or arr.ndim > 3:
            raise ShapeError(f"parameter {name!r} must have rank 1..3, got shape {arr.shape}")
        self._params[name] = Parameter(arr, bool(trainable))

    def __getitem__(self, name: str) -> np.ndarray:
        return self._params[name].value

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def parameter(self, name: str) -> Parameter:
        return self._params[name]

    def items(self):
        return ((k, p.value) for k, p in self._params.items())

    def is_trainable(self, name: str) -> bool:
        return self._params[name].trainable

    def trainable_names(self) -> list[str]:
        return [k for k, p in self._params.items() if p.trainable]

    def set_trainable(self, name: str, flag: bool) -> None:
        self._params[name].trainable = bool(flag)

    def values(self) -> dict[str, np.ndarray]:
        """Live (not copied) view as a plain dict, for the layer functions."""
        return {k: p.value for k, p in self._params.items()}

    def count(self, prefix: str = "") -> int:
        return sum(p.value.size for k, p in self._params.items() if k.startswith(prefix))

    def copy(self) -> "ParameterSet":
        out = ParameterSet()
        for k, p in self._params.items():
            out.add(k, p.value.copy(), p.trainable)
        return out

    def update(self, other: "ParameterSet") -> None:
        for k in other:
            p = other.parameter(k)
            self.add(k, p.value, p.trainable)

    def bit_equal(self, other: "ParameterSet") -> bool:
        if list(self) != list(other):
            return False
        for k in self:
            a, b = self.parameter(k), other.parameter(k)
            if a.trainable != b.trainable or a.value.shape != b.value.shape:
                return False
            if a.value.tobytes() != b.value.tobytes():
                return False
        return True


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, shape) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


# --------------------------------------------------------------------------
# dense / softmax


def _activate(z, activation):
    if activation == "identity":
        return z
    if activation == "relu":
        return np.maximum(z, 0.0)
    if activation == "tanh":
        return np.tanh(z)
    raise ContractError(f"unknown activation {activation!r}; expected one of {ACTIVATIONS}")


def dense_apply(x, W, b, activation: str = "identity"):
    """``act(x @ W + b)`` for ``x [batch, in]``.

    The backward closure maps ``d_out [batch, out]`` to ``(dx, dW, db)``.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or W.ndim != 2 or x.shape[1] != W.shape[0] or b.shape != (W.shape[1],):
        raise ShapeError(f"dense: input {x.shape} incompatible with weights {W.shape} / bias {b.shape}")
    z = x @ W + b
    out = _activate(z, activation)

    def backward(d_out):
        if activation == "relu":
            dz = d_out * (z > 0)
        elif activation == "tanh":
            dz = d_out * (1.0 - out * out)
        else:
            dz = d_out
        return dz @ W.T, x.T @ dz, dz.sum(axis=0)

    return out, backward


def softmax(logits):
    logits = np.asarray(logits, dtype=np.float64)
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_backward(probs, d_probs):
    """Vector-Jacobian product of :func:`softmax` along the last axis."""
    return probs * (d_probs - (d_probs * probs).sum(axis=-1, keepdims=True))


# --------------------------------------------------------------------------
# LSTM


def init_lstm(rng: np.random.Generator, d_in: int, hidden: int, forget_bias: float = 1.0) -> dict[str, np.ndarray]:
    b = np.zeros(4 * hidden)
    b[hidden : 2 * hidden] = forget_bias
    return {
        "Wx": glorot_uniform(rng, d_in, 4 * hidden, (d_in, 4 * hidden)),
        "Wh": glorot_uniform(rng, hidden, 4 * hidden, (hidden, 4 * hidden)),
        "b": b,
    }


def lstm_step(x, h, c, params: Mapping[str, np.ndarray]):
    """One LSTM cell step on single vectors.

    ``params`` holds ``Wx [d_in, 4H]``, ``Wh [H, 4H]``, ``b [4H]`` with gates
    packed as input, forget, candidate, output.  Returns ``(h', c', backward)``
    where ``backward(dh', dc')`` gives ``(dx, dh, dc, {"Wx", "Wh", "b"})``.
    """
    Wx, Wh, b = params["Wx"], params["Wh"], params["b"]
    x, h, c = (np.asarray(a, dtype=np.float64) for a in (x, h, c))
    H = Wh.shape[0]
    if Wx.shape != (x.shape[0], 4 * H) or Wh.shape != (H, 4 * H) or b.shape != (4 * H,):
        raise ShapeError(f"lstm: x {x.shape}, Wx {Wx.shape}, Wh {Wh.shape}, b {b.shape} are not conformable")
    if h.shape != (H,) or c.shape != (H,):
        raise ShapeError(f"lstm: state shapes h {h.shape}, c {c.shape} do not match hidden size {H}")
    z = x @ Wx + h @ Wh + b
    i = kernels._pure.sigmoid(z[:H])
    f = kernels._pure.sigmoid(z[H : 2 * H])
    g = np.tanh(z[2 * H : 3 * H])
    o = kernels._pure.sigmoid(z[3 * H :])
    c_new = f * c + i * g
    tc = np.tanh(c_new)
    h_new = o * tc

    def backward(dh_new, dc_new):
        dc_tot = dc_new + dh_new * o * (1.0 - tc * tc)
        dz = np.concatenate(
            [
                dc_tot * g * i * (1.0 - i),
                dc_tot * c * f * (1.0 - f),
                dc_tot * i * (1.0 - g * g),
                dh_new * tc * o * (1.0 - o),
            ]
        )
        grads = {"Wx": np.outer(x, dz), "Wh": np.outer(h, dz), "b": dz}
        return dz @ Wx.T, dz @ Wh.T, dc_tot * f, grads

    return h_new, c_new, backward


def init_bilstm(rng: np.random.Generator, d_in: int, hidden: int, depth: int = 1) -> dict[str, np.ndarray]:
    if depth not in (1, 2):
        raise ContractError(f"depth must be 1 or 2, got {depth}")
    out = {}
    for layer in range(depth):
        width = d_in if layer == 0 else 2 * hidden
        for direction in ("fwd", "bwd"):
            for k, v in init_lstm(rng, width, hidden).items():
                out[f"l{layer}.{direction}.{k}"] = v
    return out


def bilstm_param_count(d_in: int, hidden: int, depth: int = 1) -> int:
    total = 0
    for layer in range(depth):
        width = d_in if layer == 0 else 2 * hidden
        total += 2 * (width * 4 * hidden + hidden * 4 * hidden + 4 * hidden)
    return total


def bilstm_forward(X, params: Mapping[str, np.ndarray], depth: int = 1, prefix: str = ""):
    """Bidirectional LSTM over a batch ``X [B, T, d_in]``.

    Output ``[B, 2H]`` is the final left-to-right hidden state followed by the
    final right-to-left hidden state.  With ``depth=2`` the first layer's
    per-step outputs (both directions, time-aligned) feed the second layer.
    The backward closure maps ``d_out [B, 2H]`` to ``(dX, grads)`` with grads
    keyed ``prefix + "l{layer}.{fwd|bwd}.{Wx|Wh|b}"``.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 3 or X.shape[1] < 1:
        raise ContractError(f"bilstm needs a non-empty [batch, T, d_in] sequence, got shape {X.shape}")
    if depth not in (1, 2):
        raise ContractError(f"depth must be 1 or 2, got {depth}")
    caches = []
    layer_in = X
    for layer in range(depth):
        per_dir = {}
        for direction in ("fwd", "bwd"):
            key = f"{prefix}l{layer}.{direction}."
            Wx, Wh, b = params[key + "Wx"], params[key + "Wh"], params[key + "b"]
            if Wx.shape[0] != layer_in.shape[2]:
                raise ShapeError(f"bilstm layer {layer}: input width {layer_in.shape[2]} vs Wx {Wx.shape}")
            seq = layer_in if direction == "fwd" else layer_in[:, ::-1]
            seq = np.ascontiguousarray(seq)
            Hs, gates, Cs = kernels.lstm_seq_forward(seq, Wx, Wh, b)
            per_dir[direction] = (key, seq, Hs, gates, Cs)
        caches.append(per_dir)
        fwd_hs = per_dir["fwd"][2]
        bwd_hs = per_dir["bwd"][2][:, ::-1]
        layer_in = np.concatenate([fwd_hs, bwd_hs], axis=2)
    last = caches[-1]
    out = np.concatenate([last["fwd"][2][:, -1], last["bwd"][2][:, -1]], axis=1)

    def backward(d_out):
        grads = {}
        B, T = X.shape[:2]
        d_layer_out = None
        for layer in range(depth - 1, -1, -1):
            per_dir = caches[layer]
            H = per_dir["fwd"][2].shape[2]
            if layer == depth - 1:
                d_fwd = np.zeros((B, T, H))
                d_bwd = np.zeros((B, T, H))
                d_fwd[:, -1] = d_out[:, :H]
                d_bwd[:, -1] = d_out[:, H:]
            else:
                d_fwd = d_layer_out[:, :, :H]
                d_bwd = d_layer_out[:, ::-1, H:]
            d_in = None
            for direction, dHs in (("fwd", d_fwd), ("bwd", d_bwd)):
                key, seq, Hs, gates, Cs = per_dir[direction]
                dX, dWx, dWh, db = kernels.lstm_seq_backward(
                    dHs, seq, params[key + "Wx"], params[key + "Wh"], Hs, gates, Cs
                )
                grads[key + "Wx"], grads[key + "Wh"], grads[key + "b"] = dWx, dWh, db
                if direction == "bwd":
                    dX = dX[:, ::-1]
                d_in = dX if d_in is None else d_in + dX
            d_layer_out = d_in
        return d_layer_out, grads

    return out, backward


def bilstm_apply(sequence, params: Mapping[str, np.ndarray], depth: int = 1):
    """Single-sequence form of :func:`bilstm_forward`: ``[T, d_in] -> [2H]``."""
    seq = np.asarray(sequence, dtype=np.float64)
    if seq.ndim != 2 or seq.shape[0] < 1:
        raise ContractError(f"bilstm needs a non-empty [T, d_in] sequence, got shape {seq.shape}")
    out, backward = bilstm_forward(seq[None], params, depth)

    def single_backward(d_out):
        dX, grads = backward(np.asarray(d_out, dtype=np.float64)[None])
        return dX[0], grads

    return out[0], single_backward


# --------------------------------------------------------------------------
# gradient checking


def grad_check(
    fragment: Callable[[], tuple[float, Mapping[str, np.ndarray]]],
    params: Mapping[str, np.ndarray],
    h: float = 1e-5,
    names=None,
    per_param: bool = False,
):
    """Compare analytic gradients with central differences.

    ``fragment()`` evaluates a scalar loss at the current contents of
    ``params`` (perturbed in place here) and returns ``(loss, grads)``.
    Relative error per coordinate is ``|a - n| / max(|a|, |n|, 1e-8)``.
    Returns the maximum, or a ``name -> max`` dict with ``per_param``.
    """
    loss, grads = fragment()
    if np.ndim(loss) != 0:
        raise ContractError(f"grad_check needs a scalar loss, got shape {np.shape(loss)}")
    names = list(grads) if names is None else list(names)
    errors = {}
    for name in names:
        theta = params[name]
        analytic = np.asarray(grads[name], dtype=np.float64)
        if analytic.shape != theta.shape:
            raise ShapeError(f"gradient for {name!r} has shape {analytic.shape}, parameter {theta.shape}")
        flat = theta.reshape(-1)
        if not np.shares_memory(flat, theta):
            raise ContractError(f"parameter {name!r} must be contiguous to perturb in place")
        numeric = np.empty(flat.size)
        for j in range(flat.size):
            old = flat[j]
            flat[j] = old + h
            f_plus = float(fragment()[0])
            flat[j] = old - h
            f_minus = float(fragment()[0])
            flat[j] = old
            numeric[j] = (f_plus - f_minus) / (2.0 * h)
        a = analytic.reshape(-1)
        denom = np.maximum(np.maximum(np.abs(a), np.abs(numeric)), 1e-8)
        errors[name] = float(np.max(np.abs(a - numeric) / denom)) if a.size else 0.0
    if per_param:
        return errors
    return max(errors.values(), default=0.0)


# --------------------------------------------------------------------------
# optimizers


@dataclass
class Optimizer:
    """SGD or Adam state.  ``step`` mutates the parameter set in place."""

    kind: str = "adam"
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        self.kind = self.kind.lower()
        if self.kind not in ("sgd", "adam"):
            raise ContractError(f"optimizer must be SGD or Adam, got {self.kind!r}")
        if not self.learning_rate > 0:
            raise ContractError("learning_rate must be > 0")

    def step(self, params: ParameterSet, grads: Mapping[str, np.ndarray]) -> None:
        for name in grads:
            if name not in params:
                raise ContractError(f"gradient for unknown parameter {name!r}")
            if not params.is_trainable(name):
                raise ContractError(f"gradient supplied for frozen parameter {name!r}")
        missing = [n for n in params.trainable_names() if n not in grads]
        if missing:
            raise ContractError(f"missing gradients for trainable parameters: {missing[:5]}")
        self.step_count += 1
        lr = self.learning_rate
        if self.kind == "sgd":
            for name, g in grads.items():
                params[name][...] -= lr * g
            return
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.step_count
        c2 = 1.0 - b2**self.step_count
        for name, g in grads.items():
            m = self.m.setdefault(name, np.zeros_like(g))
            v = self.v.setdefault(name, np.zeros_like(g))
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            params[name][...] -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def optimizer_step(state: Optimizer, params: ParameterSet, grads: Mapping[str, np.ndarray]) -> None:
    state.step(params, grads)


# --------------------------------------------------------------------------
# parameter container file
#
#   magic        8 bytes  b"AFXPARM1"
#   meta_len     uint32   length of the UTF-8 JSON metadata that follows
#   meta         bytes    JSON object (sorted keys)
#   count        uint32   number of parameter entries
#   per entry:
#     name_len   uint16, name UTF-8 bytes
#     trainable  uint8 (0/1)
#     ndim       uint8, then ndim x uint32 dimensions
#     data       prod(dims) x float64, row-major
#   crc32        uint32   zlib.crc32 of every preceding byte
#
# All integers and floats are little-endian.

MAGIC = b"AFXPARM1"


def dump_parameters(params: ParameterSet, meta: Mapping | None = None) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    meta_bytes = json.dumps(meta or {}, sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<I", len(meta_bytes)))
    buf.write(meta_bytes)
    buf.write(struct.pack("<I", len(params)))
    for name in params:
        p = params.parameter(name)
        raw = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<BB", int(p.trainable), p.value.ndim))
        buf.write(struct.pack(f"<{p.value.ndim}I", *p.value.shape))
        buf.write(np.ascontiguousarray(p.value, dtype="<f8").tobytes())
    body = buf.getvalue()
    return body + struct.pack("<I", zlib.crc32(body))


def parse_parameters(data: bytes) -> tuple[ParameterSet, dict]:
    if len(data) < len(MAGIC) + 12 or not data.startswith(MAGIC):
        raise IntegrityError("not a parameter container (bad magic or too short)")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc:
        raise IntegrityError("checksum mismatch: file is corrupted or truncated")
    pos = len(MAGIC)

    def take(n):
        nonlocal pos
        if pos + n > len(body):
            raise IntegrityError(f"unexpected end of data at byte {pos} (needed {n} more)")
        chunk = body[pos : pos + n]
        pos += n
        return chunk

    (meta_len,) = struct.unpack("<I", take(4))
    meta = json.loads(take(meta_len).decode("utf-8"))
    (count,) = struct.unpack("<I", take(4))
    params = ParameterSet()
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        name = take(name_len).decode("utf-8")
        trainable, ndim = struct.unpack("<BB", take(2))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        size = int(np.prod(shape)) if ndim else 1
        values = np.frombuffer(take(8 * size), dtype="<f8").reshape(shape).astype(np.float64)
        params.add(name, values, bool(trainable))
    if pos != len(body):
        raise IntegrityError(f"{len(body) - pos} trailing bytes after the last parameter")
    return params, meta


def save_parameters(path: str | Path, params: ParameterSet, meta: Mapping | None = None) -> None:
    Path(path).write_bytes(dump_parameters(params, meta))


def load_parameters(path: str | Path) -> tuple[ParameterSet, dict]:
    return parse_parameters(Path(path).read_bytes())
