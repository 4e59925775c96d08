"""Reverse-mode autodiff on numpy arrays, MLPs, Adam and Polyak averaging.

Everything runs in float64. A fresh graph is recorded on every forward pass
and discarded once :func:`grad` has walked it, so there is no persistent tape
to keep in sync with parameter updates.
"""

from __future__ import annotations

import contextlib
import ctypes
import ctypes.util
import json
import struct
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64

_grad_enabled = True


class NonFiniteError(FloatingPointError):
    """Raised when a forward or backward pass produces NaN or Inf."""


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


class Tensor:
    """A float64 array plus the bookkeeping needed for reverse-mode gradients."""

    __slots__ = ("data", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.name = name

    # -- graph construction -------------------------------------------------
    @staticmethod
    def _make(data: np.ndarray, parents: tuple["Tensor", ...], backward: Callable) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = data
        out.name = None
        if _grad_enabled:
            for p in parents:
                if p.requires_grad:
                    out.requires_grad = True
                    out._parents = parents
                    out._backward = backward
                    return out
        out.requires_grad = False
        out._parents = ()
        out._backward = None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    # -- arithmetic ---------------------------------------------------------
    def __add__(self, other) -> "Tensor":
        other = as_tensor(other)
        a_shape, b_shape = self.shape, other.shape
        return Tensor._make(
            self.data + other.data,
            (self, other),
            lambda g: (_unbroadcast(g, a_shape), _unbroadcast(g, b_shape)),
        )

    __radd__ = __add__

    def __sub__(self, other) -> "Tensor":
        other = as_tensor(other)
        a_shape, b_shape = self.shape, other.shape
        return Tensor._make(
            self.data - other.data,
            (self, other),
            lambda g: (_unbroadcast(g, a_shape), -_unbroadcast(g, b_shape)),
        )

    def __rsub__(self, other) -> "Tensor":
        return as_tensor(other) - self

    def __mul__(self, other) -> "Tensor":
        other = as_tensor(other)
        a, b = self.data, other.data
        return Tensor._make(
            a * b,
            (self, other),
            lambda g: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)),
        )

    __rmul__ = __mul__

    def __truediv__(self, other) -> "Tensor":
        other = as_tensor(other)
        a, b = self.data, other.data
        return Tensor._make(
            a / b,
            (self, other),
            lambda g: (_unbroadcast(g / b, a.shape), _unbroadcast(-g * a / (b * b), b.shape)),
        )

    def __rtruediv__(self, other) -> "Tensor":
        return as_tensor(other) / self

    def __neg__(self) -> "Tensor":
        return Tensor._make(-self.data, (self,), lambda g: (-g,))

    def __pow__(self, p: float) -> "Tensor":
        a = self.data
        return Tensor._make(a**p, (self,), lambda g: (g * p * a ** (p - 1),))

    def __matmul__(self, other) -> "Tensor":
        other = as_tensor(other)
        a, b = self.data, other.data
        if a.ndim != 2 or b.ndim != 2:
            raise ValueError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
        return Tensor._make(a @ b, (self, other), lambda g: (g @ b.T, a.T @ g))

    def __getitem__(self, idx) -> "Tensor":
        shape = self.shape

        basic = isinstance(idx, slice) or (isinstance(idx, tuple) and all(isinstance(i, slice) for i in idx))

        def backward(g):
            full = np.zeros(shape, dtype=DTYPE)
            if basic:  # slices never repeat an element
                full[idx] = g
            else:
                np.add.at(full, idx, g)
            return (full,)

        return Tensor._make(self.data[idx], (self,), backward)

    # -- reductions ---------------------------------------------------------
    def sum(self, axis: int | None = None, keepdims: bool = False) -> "Tensor":
        shape = self.shape

        def backward(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)

        return Tensor._make(np.sum(self.data, axis=axis, keepdims=keepdims), (self,), backward)

    def mean(self, axis: int | None = None, keepdims: bool = False) -> "Tensor":
        n = self.data.size if axis is None else self.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def reshape(self, *shape) -> "Tensor":
        old = self.shape
        return Tensor._make(self.data.reshape(*shape), (self,), lambda g: (g.reshape(old),))


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# -- elementwise functions --------------------------------------------------
def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0.0)
    return Tensor._make(out, (x,), lambda g: (g * (out > 0),))


def tanh(x: Tensor) -> Tensor:
    t = np.tanh(x.data)
    return Tensor._make(t, (x,), lambda g: (g * (1.0 - t * t),))


def identity(x: Tensor) -> Tensor:
    return x


def exp(x: Tensor) -> Tensor:
    e = np.exp(x.data)
    return Tensor._make(e, (x,), lambda g: (g * e,))


def expm1(x: Tensor) -> Tensor:
    a = x.data
    return Tensor._make(np.expm1(a), (x,), lambda g: (g * np.exp(a),))


def log(x: Tensor) -> Tensor:
    a = x.data
    return Tensor._make(np.log(a), (x,), lambda g: (g / a,))


def square(x: Tensor) -> Tensor:
    a = x.data
    return Tensor._make(a * a, (x,), lambda g: (2.0 * g * a,))


def sigmoid_np(a: np.ndarray) -> np.ndarray:
    out = np.empty_like(a)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    ea = np.exp(a[~pos])
    out[~pos] = ea / (1.0 + ea)
    return out


def softplus(x: Tensor) -> Tensor:
    """log(1 + e^x), computed without overflow."""
    a = x.data
    out = np.maximum(a, 0.0) + np.log1p(np.exp(-np.abs(a)))
    return Tensor._make(out, (x,), lambda g: (g * sigmoid_np(a),))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    bounds = np.concatenate([[0], np.cumsum([t.shape[axis] for t in tensors])])

    def backward(g):
        g = np.moveaxis(g, axis, 0)
        return tuple(np.moveaxis(g[lo:hi], 0, axis) for lo, hi in zip(bounds[:-1], bounds[1:]))

    return Tensor._make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward)


def _affine_node(x: Tensor, w: Tensor, b: Tensor | None, out: np.ndarray, mask: np.ndarray | None) -> Tensor:
    xa, wa = x.data, w.data

    def backward(g):
        if mask is not None:
            g = g * mask
        gx = g @ wa.T if x.requires_grad else None
        gw = xa.T @ g if w.requires_grad else None
        if b is None:
            return gx, gw
        return gx, gw, (g.sum(axis=0) if b.requires_grad else None)

    return Tensor._make(out, (x, w) if b is None else (x, w, b), backward)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """x @ w (+ b) as a single graph node."""
    out = x.data @ w.data
    if b is not None:
        out += b.data
    return _affine_node(x, w, b, out, None)


def linear_relu(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """relu(x @ w (+ b)) fused into one node; same values and gradients as the pair."""
    out = x.data @ w.data
    if b is not None:
        out += b.data
    np.maximum(out, 0.0, out=out)
    return _affine_node(x, w, b, out, out > 0)


def gaussian_kl(mu, log_sigma_sq) -> Tensor:
    """KL(N(mu, diag sigma^2) || N(0, I)) summed over the last axis."""
    mu, lv = as_tensor(mu), as_tensor(log_sigma_sq)
    m, v = mu.data, lv.data
    if not (np.all(np.isfinite(m)) and np.all(np.isfinite(v))):
        raise NonFiniteError("gaussian_kl received non-finite parameters")
    em1 = np.expm1(v)
    out = (m * m + (em1 - v)).sum(axis=-1) * 0.5

    def backward(g):
        g = g[..., None]
        return (g * m if mu.requires_grad else None, 0.5 * g * em1 if lv.requires_grad else None)

    return Tensor._make(out, (mu, lv), backward)


def gaussian_sample(mu, log_var, eps: np.ndarray) -> Tensor:
    """mu + exp(log_var / 2) * eps as one node, differentiable in mu and log_var."""
    mu, lv = as_tensor(mu), as_tensor(log_var)
    noise = np.exp(lv.data * 0.5) * eps
    return Tensor._make(mu.data + noise, (mu, lv),
                        lambda g: (g if mu.requires_grad else None, 0.5 * g * noise if lv.requires_grad else None))


def half_sq_error(x, target: np.ndarray) -> Tensor:
    """0.5 * sum((x - target)^2) over the last axis."""
    x = as_tensor(x)
    d = x.data - target
    return Tensor._make((d * d).sum(axis=-1) * 0.5, (x,), lambda g: (g[..., None] * d,))


# -- backward ---------------------------------------------------------------
def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def grad(loss: Tensor, params: Sequence[Tensor]) -> list[np.ndarray]:
    """Gradients of a scalar ``loss`` with respect to each of ``params``.

    Parameters that the loss does not depend on get an all-zero gradient.
    """
    if loss.data.size != 1:
        raise ValueError(f"loss must be a scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        raise RuntimeError("loss is detached from any parameter; nothing to differentiate")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None) if node._backward is not None else grads.get(id(node))
        if g is None or node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad or pg is None:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    out = []
    for p in params:
        g = grads.get(id(p))
        if g is None:
            g = np.zeros_like(p.data)
        elif not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for parameter {p.name!r}")
        out.append(np.asarray(g, dtype=DTYPE).reshape(p.shape))
    return out


# -- networks ---------------------------------------------------------------
ACTIVATIONS: dict[str, Callable[[Tensor], Tensor]] = {
    "relu": relu,
    "tanh": tanh,
    "identity": identity,
}


@dataclass(frozen=True)
class MlpSpec:
    input_dim: int
    hidden_dims: tuple[int, ...]
    output_dim: int
    use_bias: bool = True
    activation: str = "relu"
    output_activation: str = "identity"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS or self.output_activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation in {self}")
        if min((self.input_dim, self.output_dim, *self.hidden_dims)) <= 0:
            raise ValueError(f"all layer widths must be positive: {self}")


class Mlp:
    """Fully connected network; weights are stored as (fan_in, fan_out)."""

    def __init__(self, spec: MlpSpec, rng: np.random.Generator, name: str = "mlp"):
        self.spec = spec
        self.name = name
        dims = [spec.input_dim, *spec.hidden_dims, spec.output_dim]
        self.weights: list[Tensor] = []
        self.biases: list[Tensor | None] = []
        for i, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
            bound = 1.0 / np.sqrt(fan_in)
            self.weights.append(
                Tensor(rng.uniform(-bound, bound, (fan_in, fan_out)), requires_grad=True, name=f"{name}.w{i}")
            )
            if spec.use_bias:
                self.biases.append(
                    Tensor(rng.uniform(-bound, bound, fan_out), requires_grad=True, name=f"{name}.b{i}")
                )
            else:
                self.biases.append(None)

    @property
    def params(self) -> list[Tensor]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.append(w)
            if b is not None:
                out.append(b)
        return out

    def named_params(self) -> dict[str, Tensor]:
        return {p.name: p for p in self.params}

    def __call__(self, x, detach_params: bool = False) -> Tensor:
        """Forward pass.

        With ``detach_params`` the weights enter the graph as constants, so
        gradients flow to ``x`` but never to this network.
        """
        x = as_tensor(x)
        squeeze = x.ndim == 1
        if squeeze:
            x = x.reshape(1, -1)
        if x.ndim != 2 or x.shape[1] != self.spec.input_dim:
            raise ValueError(f"{self.name}: expected input (*, {self.spec.input_dim}), got {x.shape}")
        act = ACTIVATIONS[self.spec.activation]
        n_layers = len(self.weights)
        h = x
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if detach_params:
                w = Tensor(w.data)
                b = None if b is None else Tensor(b.data)
            if i < n_layers - 1 and act is relu:
                h = linear_relu(h, w, b)
            else:
                h = linear(h, w, b)
                h = act(h) if i < n_layers - 1 else ACTIVATIONS[self.spec.output_activation](h)
        if not np.all(np.isfinite(h.data)):
            raise NonFiniteError(f"{self.name}: non-finite forward output")
        return h.reshape(-1) if squeeze else h

    def predict(self, x, dtype=DTYPE) -> np.ndarray:
        """Graph-free forward pass on plain arrays.

        With the default dtype the values equal ``__call__``; float32 trades
        precision for speed on large no-gradient batches. Output is float64.
        """
        h = np.asarray(x, dtype=dtype)
        squeeze = h.ndim == 1
        h = np.atleast_2d(h)
        if h.ndim != 2 or h.shape[1] != self.spec.input_dim:
            raise ValueError(f"{self.name}: expected input (*, {self.spec.input_dim}), got {h.shape}")
        n_layers = len(self.weights)
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w.data.astype(dtype, copy=False)
            if b is not None:
                h += b.data.astype(dtype, copy=False)
            name = self.spec.activation if i < n_layers - 1 else self.spec.output_activation
            if name == "relu":
                np.maximum(h, 0.0, out=h)
            elif name == "tanh":
                np.tanh(h, out=h)
        if not np.all(np.isfinite(h)):
            raise NonFiniteError(f"{self.name}: non-finite forward output")
        h = h.astype(DTYPE, copy=False)
        return h[0] if squeeze else h

    def copy(self, name: str | None = None) -> "Mlp":
        clone = Mlp.__new__(Mlp)
        clone.spec = self.spec
        clone.name = name or self.name
        clone.weights = [Tensor(w.data.copy(), requires_grad=True, name=w.name) for w in self.weights]
        clone.biases = [
            None if b is None else Tensor(b.data.copy(), requires_grad=True, name=b.name) for b in self.biases
        ]
        return clone


_allocator_tuned = False


def tune_allocator() -> bool:
    """Keep freed activation buffers on the glibc heap instead of returning them to the OS.

    Minibatch activations are a few hundred KB, above glibc's default mmap
    threshold, so every forward pass otherwise pays fresh page faults. No-op
    off Linux or when libc cannot be loaded.
    """
    global _allocator_tuned
    if _allocator_tuned:
        return True
    if not sys.platform.startswith("linux"):
        return False
    try:
        libc = ctypes.CDLL(ctypes.util.find_library("c") or "libc.so.6")
        m_trim_threshold, m_top_pad, m_mmap_threshold = -1, -2, -3
        ok = all(libc.mallopt(opt, val) == 1 for opt, val in (
            (m_mmap_threshold, 32 << 20), (m_trim_threshold, 128 << 20), (m_top_pad, 64 << 20)))
    except (OSError, AttributeError):
        return False
    _allocator_tuned = ok
    return ok


# -- optimisation -----------------------------------------------------------
@dataclass
class Adam:
    """Bias-corrected Adam over a fixed list of parameters (updated in place).

    Parameter arrays are re-pointed at views of one flat buffer so that a step
    is a handful of vector operations regardless of how many tensors there are.
    """

    params: list[Tensor]
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    first_moment: list[np.ndarray] = field(default_factory=list)
    second_moment: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if len({id(p) for p in self.params}) != len(self.params):
            raise ValueError("duplicate parameters")
        sizes = [p.data.size for p in self.params]
        self._offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(int)
        self._flat = np.concatenate([p.data.ravel() for p in self.params]) if self.params else np.zeros(0)
        for p, lo, hi in zip(self.params, self._offsets[:-1], self._offsets[1:]):
            p.data = self._flat[lo:hi].reshape(p.data.shape)
        m_init = np.concatenate([np.ravel(m) for m in self.first_moment]) if self.first_moment else None
        v_init = np.concatenate([np.ravel(v) for v in self.second_moment]) if self.second_moment else None
        self._m = np.zeros_like(self._flat) if m_init is None else m_init.astype(DTYPE)
        self._v = np.zeros_like(self._flat) if v_init is None else v_init.astype(DTYPE)
        self.first_moment = self._views(self._m)
        self.second_moment = self._views(self._v)

    def _views(self, flat: np.ndarray) -> list[np.ndarray]:
        return [flat[lo:hi].reshape(p.data.shape)
                for p, lo, hi in zip(self.params, self._offsets[:-1], self._offsets[1:])]

    def step(self, grads: Sequence[np.ndarray]) -> None:
        if len(grads) != len(self.params):
            raise ValueError(f"expected {len(self.params)} gradients, got {len(grads)}")
        for p, g in zip(self.params, grads):
            if g.shape != p.data.shape:
                raise ValueError(f"gradient shape {g.shape} does not match parameter {p.data.shape}")
        if not self.params:
            return
        self.step_count += 1
        t = self.step_count
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**t
        c2 = 1.0 - b2**t
        g = np.concatenate([np.ravel(g) for g in grads])
        m, v = self._m, self._v
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        self._flat -= self.learning_rate * (m / c1) / (np.sqrt(v / c2) + self.epsilon)

    def minimize(self, loss: Tensor) -> list[np.ndarray]:
        grads = grad(loss, self.params)
        self.step(grads)
        return grads


def polyak_update(target_params: Iterable[Tensor], main_params: Iterable[Tensor], tau: float) -> None:
    """target <- tau * main + (1 - tau) * target, in place."""
    if not 0.0 <= tau <= 1.0:
        raise ValueError(f"tau must lie in [0, 1], got {tau}")
    for t, m in zip(target_params, main_params, strict=True):
        if tau == 1.0:
            t.data[...] = m.data
        elif tau > 0.0:
            t.data *= 1.0 - tau
            t.data += tau * m.data


# -- checkpoints ------------------------------------------------------------
_MAGIC = b"FQLCKPT1"


def save_checkpoint(path: str | Path, arrays: dict[str, np.ndarray]) -> None:
    """Write arrays as: magic, u64 manifest length, JSON manifest, f64 LE payload.

    Offsets in the manifest are byte offsets into the payload section.
    """
    entries = []
    offset = 0
    for name, arr in arrays.items():
        arr = np.asarray(arr, dtype="<f8")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size * 8
    manifest = json.dumps({"dtype": "float64-le", "arrays": entries}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(manifest)))
        fh.write(manifest)
        for arr in arrays.values():
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    raw = Path(path).read_bytes()
    if raw[:8] != _MAGIC:
        raise ValueError(f"{path} is not a checkpoint file")
    (n,) = struct.unpack("<Q", raw[8:16])
    manifest = json.loads(raw[16 : 16 + n])
    payload = raw[16 + n :]
    out = {}
    for entry in manifest["arrays"]:
        count = int(np.prod(entry["shape"], dtype=np.int64))
        start = entry["offset"]
        out[entry["name"]] = (
            np.frombuffer(payload, dtype="<f8", count=count, offset=start).astype(DTYPE).reshape(entry["shape"])
        )
    return out
