"""Minimal reverse-mode differentiation for the MLP/GNN computations.

Only the primitives the model needs are provided. A ``Tape`` owns the forward
record; every primitive returns a ``Var`` and registers a closure that pushes
the output gradient back to its inputs. Parameters enter the tape through
``Tape.param`` so ``Tape.backward`` can report one gradient per stored array.
"""

from __future__ import annotations

import json
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp

from . import _binio

OCKP_MAGIC = b"OCKP"
OCKP_VERSION = 1

LN_EPS = 1e-5


class TapeError(RuntimeError):
    pass


# ----------------------------------------------------------------------------
# parameters


class ParamStore:
    """Named parameter arrays in insertion order."""

    def __init__(self, dtype=np.float32, seed: int = 0):
        self.dtype = np.dtype(dtype)
        self.seed = seed
        self._arrays: OrderedDict[str, np.ndarray] = OrderedDict()

    def add(self, name: str, value: np.ndarray) -> None:
        if name in self._arrays:
            raise KeyError(f"duplicate parameter {name!r}")
        self._arrays[name] = np.array(value, dtype=self.dtype)

    def __getitem__(self, name: str) -> np.ndarray:
        return self._arrays[name]

    def __setitem__(self, name: str, value: np.ndarray) -> None:
        old = self._arrays[name]
        value = np.asarray(value, dtype=self.dtype)
        if value.shape != old.shape:
            raise ValueError(f"shape of {name!r} is fixed at {old.shape}")
        self._arrays[name] = value

    def __contains__(self, name: str) -> bool:
        return name in self._arrays

    def __iter__(self):
        return iter(self._arrays)

    def __len__(self) -> int:
        return len(self._arrays)

    def names(self) -> list[str]:
        return list(self._arrays)

    def items(self):
        return self._arrays.items()

    def size(self) -> int:
        return sum(a.size for a in self._arrays.values())

    def astype(self, dtype) -> "ParamStore":
        out = ParamStore(dtype, self.seed)
        for k, v in self._arrays.items():
            out.add(k, v)
        return out

    def copy(self) -> "ParamStore":
        return self.astype(self.dtype)

    def equal(self, other: "ParamStore") -> bool:
        return self.names() == other.names() and all(
            np.array_equal(self[k], other[k]) for k in self
        )


def truncated_normal(rng: np.random.Generator, shape, std: float, bound: float = 2.0) -> np.ndarray:
    out = rng.standard_normal(shape)
    bad = np.abs(out) > bound
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > bound
    return out * std


# ----------------------------------------------------------------------------
# sparse index helpers


class Index:
    """Edge endpoint ids with a cached scatter-add matrix (n_nodes x n_edges)."""

    def __init__(self, ids, n: int):
        ids = np.asarray(ids, dtype=np.int64)
        if ids.ndim != 1:
            raise ValueError("index must be one-dimensional")
        if len(ids) and (ids.min() < 0 or ids.max() >= n):
            raise IndexError(f"index out of range for {n} nodes")
        self.ids = ids
        self.n = int(n)
        self._mats: dict = {}

    def __len__(self) -> int:
        return len(self.ids)

    def _matrix(self, dtype) -> sp.csr_matrix:
        key = np.dtype(dtype).str
        m = self._mats.get(key)
        if m is None:
            e = len(self.ids)
            m = sp.csr_matrix(
                (np.ones(e, dtype=dtype), (self.ids, np.arange(e))), shape=(self.n, e)
            )
            self._mats[key] = m
        return m

    def scatter(self, values: np.ndarray) -> np.ndarray:
        """Sum rows of ``values`` into their node slots; empty slots stay zero."""
        if values.shape[0] != len(self.ids):
            raise ValueError("values and index lengths differ")
        if not len(self.ids):
            return np.zeros((self.n,) + values.shape[1:], dtype=values.dtype)
        return np.asarray(self._matrix(values.dtype) @ values)


def segment_sum(values: np.ndarray, receiver_ids, n_nodes: int) -> np.ndarray:
    return Index(receiver_ids, n_nodes).scatter(np.asarray(values))


# ----------------------------------------------------------------------------
# tape


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form: overflow-free and several times faster than scipy's expit here
    s = np.multiply(x, 0.5)
    np.tanh(s, out=s)
    s *= 0.5
    s += 0.5
    return s


# Short-axis reductions as BLAS products: much faster than ufunc.reduce on tall arrays.
def _row_mean(a: np.ndarray) -> np.ndarray:
    return (a @ np.full(a.shape[1], 1.0 / a.shape[1], dtype=a.dtype))[:, None]


def _col_sum(a: np.ndarray) -> np.ndarray:
    return np.ones(a.shape[0], dtype=a.dtype) @ a


class Var:
    __slots__ = ("value", "grad", "needs_grad")

    def __init__(self, value: np.ndarray, needs_grad: bool):
        self.value = value
        self.grad = None
        self.needs_grad = needs_grad

    @property
    def shape(self):
        return self.value.shape


def _acc(v: Var, g: np.ndarray) -> None:
    if v.needs_grad:
        v.grad = g if v.grad is None else v.grad + g


class Tape:
    """Forward record over one ParamStore."""

    def __init__(self, params: ParamStore, record: bool = True):
        self.params = params
        self.dtype = params.dtype
        self.record = record
        self._backs: list[Callable[[], None]] = []
        self._param_vars: dict[str, Var] = {}

    # leaves ---------------------------------------------------------------
    def param(self, name: str) -> Var:
        v = self._param_vars.get(name)
        if v is None:
            v = self._param_vars[name] = Var(self.params[name], self.record)
        return v

    def const(self, value) -> Var:
        return Var(np.asarray(value, dtype=self.dtype), False)

    def input(self, value) -> Var:
        """A leaf that collects a gradient (for sensitivity checks)."""
        return Var(np.asarray(value, dtype=self.dtype), True)

    def _out(self, value, *inputs: Var) -> Var:
        return Var(value, any(x.needs_grad for x in inputs))

    def _push(self, out: Var, fn: Callable[[np.ndarray], None]) -> Var:
        if out.needs_grad:
            def back():
                if out.grad is not None:
                    fn(out.grad)
            self._backs.append(back)
        return out

    # primitives -----------------------------------------------------------
    def matmul(self, x: Var, w: Var, rows: slice | None = None) -> Var:
        wv = w.value if rows is None else w.value[rows]
        if x.value.shape[1] != wv.shape[0]:
            raise ValueError(f"matmul shape mismatch {x.value.shape} @ {wv.shape}")
        out = self._out(x.value @ wv, x, w)

        def back(g):
            if x.needs_grad:
                _acc(x, g @ wv.T)
            if w.needs_grad:
                gw = x.value.T @ g
                if w.grad is None:
                    w.grad = np.zeros_like(w.value)
                if rows is None:
                    w.grad = w.grad + gw
                else:
                    w.grad = w.grad.copy()
                    w.grad[rows] += gw

        return self._push(out, back)

    def add_bias(self, x: Var, b: Var) -> Var:
        out = self._out(x.value + b.value, x, b)

        def back(g):
            _acc(x, g)
            _acc(b, _col_sum(g))

        return self._push(out, back)

    def add(self, *xs: Var) -> Var:
        value = xs[0].value
        for x in xs[1:]:
            if x.value.shape != value.shape:
                raise ValueError(f"add shape mismatch {x.value.shape} vs {value.shape}")
            value = value + x.value
        out = self._out(value, *xs)

        def back(g):
            for x in xs:
                _acc(x, g)

        return self._push(out, back)

    def silu(self, x: Var) -> Var:
        s = _sigmoid(x.value)
        y = x.value * s
        out = self._out(y, x)

        def back(g):
            # d/dx x*sigmoid(x) = s + y * (1 - s)
            d = np.subtract(1, s, dtype=s.dtype)
            d *= y
            d += s
            d *= g
            _acc(x, d)

        return self._push(out, back)

    def layer_norm(self, x: Var, gain: Var, offset: Var) -> Var:
        n = x.value.shape[1]
        xhat = x.value - _row_mean(x.value)
        inv = 1.0 / np.sqrt(np.einsum("ij,ij->i", xhat, xhat)[:, None] / n + LN_EPS)
        xhat *= inv
        y = xhat * gain.value
        y += offset.value
        out = self._out(y, x, gain, offset)

        def back(g):
            _acc(gain, np.einsum("ij,ij->j", g, xhat))
            _acc(offset, _col_sum(g))
            if x.needs_grad:
                gx = g * gain.value
                proj = np.einsum("ij,ij->i", gx, xhat)[:, None] / n
                gx -= _row_mean(gx)
                gx -= xhat * proj
                gx *= inv
                _acc(x, gx)

        return self._push(out, back)

    def gather(self, x: Var, index: Index) -> Var:
        if x.value.shape[0] != index.n:
            raise ValueError(f"gather from {x.value.shape[0]} rows with index over {index.n}")
        out = self._out(x.value[index.ids], x)
        return self._push(out, lambda g: _acc(x, index.scatter(g)))

    def segment_sum(self, x: Var, index: Index) -> Var:
        out = self._out(index.scatter(x.value), x)
        return self._push(out, lambda g: _acc(x, g[index.ids]))

    def concat(self, xs: Sequence[Var]) -> Var:
        widths = [x.value.shape[1] for x in xs]
        out = self._out(np.concatenate([x.value for x in xs], axis=1), *xs)
        bounds = np.cumsum([0] + widths)

        def back(g):
            for x, a, b in zip(xs, bounds[:-1], bounds[1:]):
                _acc(x, g[:, a:b])

        return self._push(out, back)

    def affine(self, x: Var, scale, shift=None) -> Var:
        """x * scale + shift with constant (broadcastable) scale and shift."""
        scale = np.asarray(scale, dtype=self.dtype)
        value = x.value * scale
        if shift is not None:
            value = value + np.asarray(shift, dtype=self.dtype)
        out = self._out(value, x)
        return self._push(out, lambda g: _acc(x, g * scale))

    def mse(self, pred: Var, target, weights=None) -> Var:
        """Mean over rows and channels of weights * (pred - target)^2."""
        target = np.asarray(target, dtype=self.dtype)
        diff = pred.value - target
        w = np.ones(diff.shape[1], self.dtype) if weights is None else np.asarray(weights, self.dtype)
        n = diff.size
        out = self._out(np.asarray((w * diff * diff).sum() / n, dtype=self.dtype), pred)
        return self._push(out, lambda g: _acc(pred, g * 2.0 * w * diff / n))

    def scale_sum(self, xs: Sequence[Var], scale: float) -> Var:
        total = self.add(*xs) if len(xs) > 1 else xs[0]
        return self.affine(total, scale)

    # reverse pass --------------------------------------------------------
    def backward(self, out: Var, seed=None) -> "OrderedDict[str, np.ndarray]":
        """Gradients for every stored parameter, zeros for untouched ones."""
        if not self._backs:
            raise TapeError("backward called before any differentiable forward computation")
        out.grad = (
            np.ones_like(out.value) if seed is None else np.asarray(seed, dtype=out.value.dtype)
        )
        for back in reversed(self._backs):
            back()
        grads = OrderedDict()
        for name, arr in self.params.items():
            v = self._param_vars.get(name)
            grads[name] = (
                np.zeros_like(arr) if v is None or v.grad is None else np.asarray(v.grad, arr.dtype)
            )
        self._backs.clear()
        return grads


def check_finite(v: Var | np.ndarray, stage: str) -> None:
    value = v.value if isinstance(v, Var) else v
    if not np.isfinite(value).all():
        raise FloatingPointError(f"non-finite values after {stage}")


# ----------------------------------------------------------------------------
# MLPs


@dataclass(frozen=True)
class MlpSpec:
    in_width: int
    hidden: int = 192
    out: int = 192
    hidden_layers: int = 1
    layer_norm: bool = True
    activation: str = "silu"

    def __post_init__(self):
        if min(self.in_width, self.hidden, self.out) <= 0:
            raise ValueError("MLP widths must be positive")
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    def layer_shapes(self) -> list[tuple[int, int]]:
        widths = [self.in_width] + [self.hidden] * self.hidden_layers + [self.out]
        return list(zip(widths[:-1], widths[1:]))


_ACTIVATIONS = {"silu": Tape.silu}


def init_mlp(store: ParamStore, spec: MlpSpec, name: str, rng: np.random.Generator) -> None:
    """Fan-in scaled truncated-normal weights, zero biases, unit norm gains."""
    for i, (fan_in, fan_out) in enumerate(spec.layer_shapes()):
        store.add(f"{name}.w{i}", truncated_normal(rng, (fan_in, fan_out), 1.0 / np.sqrt(fan_in)))
        store.add(f"{name}.b{i}", np.zeros(fan_out))
    if spec.layer_norm:
        store.add(f"{name}.ln_gain", np.ones(spec.out))
        store.add(f"{name}.ln_offset", np.zeros(spec.out))


def output_layer_names(spec: MlpSpec, name: str) -> tuple[str, str]:
    last = len(spec.layer_shapes()) - 1
    return f"{name}.w{last}", f"{name}.b{last}"


def mlp_forward(spec: MlpSpec, name: str, inputs, tape: Tape) -> Var:
    """Apply an MLP to the column-concatenation of ``inputs``.

    Each input is a Var or a (Var, Index) pair; an Index gathers rows after the
    first affine map, which equals gathering before it but costs one matmul per
    node instead of per edge.
    """
    if isinstance(inputs, Var):
        inputs = [inputs]
    blocks = [(b, None) if isinstance(b, Var) else b for b in inputs]
    width = sum(x.value.shape[1] for x, _ in blocks)
    if width != spec.in_width:
        raise ValueError(f"{name}: input width {width} != {spec.in_width}")
    act = _ACTIVATIONS[spec.activation]
    n_layers = len(spec.layer_shapes())

    w0 = tape.param(f"{name}.w0")
    parts, off = [], 0
    for x, idx in blocks:
        w = x.value.shape[1]
        h = tape.matmul(x, w0, rows=slice(off, off + w))
        parts.append(tape.gather(h, idx) if idx is not None else h)
        off += w
    h = tape.add(*parts) if len(parts) > 1 else parts[0]
    h = tape.add_bias(h, tape.param(f"{name}.b0"))
    for i in range(1, n_layers):
        h = act(tape, h)
        h = tape.add_bias(tape.matmul(h, tape.param(f"{name}.w{i}")), tape.param(f"{name}.b{i}"))
    if spec.layer_norm:
        h = tape.layer_norm(h, tape.param(f"{name}.ln_gain"), tape.param(f"{name}.ln_offset"))
    return h


# ----------------------------------------------------------------------------
# optimizer


@dataclass
class AdamW:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: dict = field(default_factory=dict, repr=False)
    v: dict = field(default_factory=dict, repr=False)

    def hyper(self) -> dict:
        return {k: getattr(self, k) for k in ("lr", "beta1", "beta2", "eps", "weight_decay")}

    def update(self, params: ParamStore, grads) -> None:
        """One decoupled-weight-decay step with bias-corrected moments, in place."""
        self.step += 1
        dt = params.dtype.type
        b1, b2 = dt(self.beta1), dt(self.beta2)
        c1 = dt(1.0 - self.beta1**self.step)
        c2 = dt(1.0 - self.beta2**self.step)
        lr, eps, wd = dt(self.lr), dt(self.eps), dt(self.weight_decay)
        for name, p in params.items():
            g = np.asarray(grads[name], dtype=params.dtype)
            m = self.m.get(name)
            if m is None:
                m = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
            m = b1 * m + (dt(1) - b1) * g
            v = b2 * self.v[name] + (dt(1) - b2) * g * g
            self.m[name], self.v[name] = m, v
            new = p - lr * wd * p if self.weight_decay else p
            new = new - lr * (m / c1) / (np.sqrt(v / c2) + eps)
            params[name] = new


def adamw_step(state: AdamW, params: ParamStore, grads) -> tuple[ParamStore, AdamW]:
    state.update(params, grads)
    return params, state


def global_norm(grads) -> float:
    return float(np.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values())))


# ----------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, params: ParamStore, optimizer: AdamW | None = None, config: dict | None = None) -> None:
    """Parameters, optimizer state and a provenance JSON blob; values stored as float32."""
    with open(path, "wb") as f:
        _binio.write_magic(f, OCKP_MAGIC, OCKP_VERSION)
        f.write(np.array([len(params), params.seed], "<u4").tobytes())
        for name, arr in params.items():
            _binio.write_str(f, name)
            f.write(np.array([arr.ndim], "<u1").tobytes())
            f.write(np.array(arr.shape, "<u4").tobytes())
            _binio.write_array(f, arr, "<f4")
        if optimizer is None:
            f.write(b"\x00")
        else:
            f.write(b"\x01")
            f.write(np.array([optimizer.step], "<u8").tobytes())
            hyper = optimizer.hyper()
            f.write(np.array([hyper[k] for k in ("lr", "beta1", "beta2", "eps", "weight_decay")], "<f8").tobytes())
            for name, arr in params.items():
                m = optimizer.m.get(name, np.zeros_like(arr))
                v = optimizer.v.get(name, np.zeros_like(arr))
                _binio.write_array(f, m, "<f4")
                _binio.write_array(f, v, "<f4")
        _binio.write_str(f, json.dumps(config or {}, sort_keys=True), width="<I")


def load_checkpoint(path) -> tuple[ParamStore, AdamW | None, dict]:
    with open(Path(path), "rb") as f:
        _binio.read_magic(f, OCKP_MAGIC, (OCKP_VERSION,))
        n, seed = _binio.read(f, "<II")
        params = ParamStore(np.float32, seed)
        for _ in range(n):
            name = _binio.read_str(f)
            (ndim,) = _binio.read(f, "<B")
            shape = _binio.read(f, f"<{ndim}I") if ndim else ()
            count = int(np.prod(shape)) if shape else 1
            params.add(name, _binio.read_array(f, "<f4", count).reshape(shape))
        (flag,) = _binio.read(f, "<B")
        optimizer = None
        if flag:
            (step,) = _binio.read(f, "<Q")
            lr, b1, b2, eps, wd = _binio.read(f, "<5d")
            optimizer = AdamW(lr=lr, beta1=b1, beta2=b2, eps=eps, weight_decay=wd, step=int(step))
            for name, arr in params.items():
                optimizer.m[name] = _binio.read_array(f, "<f4", arr.size).reshape(arr.shape)
                optimizer.v[name] = _binio.read_array(f, "<f4", arr.size).reshape(arr.shape)
        config = json.loads(_binio.read_str(f, width="<I"))
    return params, optimizer, config
