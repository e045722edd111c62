"""Minimal fp64 tensor library with reverse-mode autodiff.

Everything the inference equations need: linear maps, stable softmax,
multi-head attention, layer norm, gathers and concatenation, plus the Adam
optimizer (decoupled weight decay) and a finite-difference gradient checker.
Buffers are row-major float64 numpy arrays; any non-finite intermediate
raises immediately instead of propagating.
"""

from __future__ import annotations

import json
import struct
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import DimensionError, NumericError, StateError

CHECKPOINT_MAGIC = b"CQCK"
CHECKPOINT_VERSION = 1


def _check_finite(arr: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite value in {what}")


class Tensor:
    """A float64 array that participates in the gradient tape.

    Tensors built by operations keep closures back to their parents; calling
    :func:`backward` on a scalar result accumulates gradients into every
    reachable tensor with ``requires_grad=True``.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (), _backward=None):
        arr = np.asarray(data, dtype=np.float64)
        _check_finite(arr, "tensor construction")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> np.ndarray:
        return self.data.copy()

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)


def _result(data: np.ndarray, parents: tuple, backward) -> Tensor:
    requires = any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=requires, _parents=parents if requires else (),
                 _backward=backward if requires else None)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcasted gradient back to the original operand shape."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def add(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data + b.data

    def backward(out: Tensor) -> None:
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(out.grad, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(out.grad, b.shape))

    return _result(out_data, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data - b.data

    def backward(out: Tensor) -> None:
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(out.grad, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(-out.grad, b.shape))

    return _result(out_data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data * b.data

    def backward(out: Tensor) -> None:
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(out.grad * b.data, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(out.grad * a.data, b.shape))

    return _result(out_data, (a, b), backward)


def scale(a: Tensor, c: float) -> Tensor:
    out_data = a.data * c

    def backward(out: Tensor) -> None:
        if a.requires_grad:
            a.accumulate_grad(out.grad * c)

    return _result(out_data, (a,), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} do not align")
    out_data = a.data @ b.data

    def backward(out: Tensor) -> None:
        if a.requires_grad:
            a.accumulate_grad(out.grad @ b.data.T)
        if b.requires_grad:
            b.accumulate_grad(a.data.T @ out.grad)

    return _result(out_data, (a, b), backward)


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """y = xW + b with gradient flow to all three operands."""
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[0]:
        raise DimensionError(f"linear: input {x.shape} incompatible with weight {w.shape}")
    if b.data.shape not in ((w.shape[1],), (1, w.shape[1])):
        raise DimensionError(f"linear: bias {b.shape} incompatible with weight {w.shape}")
    return add(matmul(x, w), b)


def take(x: Tensor, indices) -> Tensor:
    """Gather rows (2-D input) or elements (1-D input) by index."""
    idx = np.asarray(indices, dtype=np.intp)
    out_data = x.data[idx]

    def backward(out: Tensor) -> None:
        if x.requires_grad:
            g = np.zeros_like(x.data)
            np.add.at(g, idx, out.grad)
            x.accumulate_grad(g)

    return _result(out_data, (x,), backward)


def row_slice(x: Tensor, lo: int, hi: int) -> Tensor:
    """Contiguous row range x[lo:hi]; cheaper than take for slot access."""
    out_data = x.data[lo:hi]

    def backward(out: Tensor) -> None:
        if x.requires_grad:
            g = np.zeros_like(x.data)
            g[lo:hi] += out.grad
            x.accumulate_grad(g)

    return _result(out_data, (x,), backward)


def col(x: Tensor, j: int) -> Tensor:
    """Column j of a 2-D tensor, as a 1-D vector."""
    out_data = x.data[:, j]

    def backward(out: Tensor) -> None:
        if x.requires_grad:
            g = np.zeros_like(x.data)
            g[:, j] += out.grad
            x.accumulate_grad(g)

    return _result(out_data, (x,), backward)


def pick(x: Tensor, i: int) -> Tensor:
    """Scalar element of a 1-D tensor."""
    out_data = x.data[i]

    def backward(out: Tensor) -> None:
        if x.requires_grad:
            g = np.zeros_like(x.data)
            g[i] += out.grad
            x.accumulate_grad(g)

    return _result(out_data, (x,), backward)


def concat(parts: Sequence[Tensor], axis: int = 1) -> Tensor:
    if not parts:
        raise DimensionError("concat of zero tensors")
    out_data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]

    def backward(out: Tensor) -> None:
        offset = 0
        for p, size in zip(parts, sizes):
            if p.requires_grad:
                sl = [slice(None)] * out.grad.ndim
                sl[axis] = slice(offset, offset + size)
                p.accumulate_grad(out.grad[tuple(sl)])
            offset += size

    return _result(out_data, tuple(parts), backward)


def tensor_sum(x: Tensor) -> Tensor:
    out_data = np.asarray(x.data.sum())

    def backward(out: Tensor) -> None:
        if x.requires_grad:
            x.accumulate_grad(np.full_like(x.data, float(out.grad)))

    return _result(out_data, (x,), backward)


def mean(x: Tensor) -> Tensor:
    out_data = np.asarray(x.data.mean())

    def backward(out: Tensor) -> None:
        if x.requires_grad:
            x.accumulate_grad(np.full_like(x.data, float(out.grad) / x.data.size))

    return _result(out_data, (x,), backward)


def tanh(x: Tensor) -> Tensor:
    out_data = np.tanh(x.data)

    def backward(out: Tensor) -> None:
        if x.requires_grad:
            x.accumulate_grad(out.grad * (1.0 - out_data * out_data))

    return _result(out_data, (x,), backward)


def softmax(x: Tensor) -> Tensor:
    """Stable softmax over the last axis; slices each sum to 1."""
    if x.data.ndim == 0 or x.data.shape[-1] == 0:
        raise DimensionError(f"softmax: empty last dimension in shape {x.shape}")
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=-1, keepdims=True)

    def backward(out: Tensor) -> None:
        if x.requires_grad:
            g = out.grad
            dot = (g * out_data).sum(axis=-1, keepdims=True)
            x.accumulate_grad(out_data * (g - dot))

    return _result(out_data, (x,), backward)


def log_softmax(x: Tensor) -> Tensor:
    if x.data.ndim == 0 or x.data.shape[-1] == 0:
        raise DimensionError(f"log_softmax: empty last dimension in shape {x.shape}")
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    out_data = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))

    def backward(out: Tensor) -> None:
        if x.requires_grad:
            g = out.grad
            x.accumulate_grad(g - np.exp(out_data) * g.sum(axis=-1, keepdims=True))

    return _result(out_data, (x,), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-6) -> Tensor:
    """Per-row normalization of a 2-D tensor with learned gain and bias."""
    mu = x.data.mean(axis=1, keepdims=True)
    var = x.data.var(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = (x.data - mu) * inv
    out_data = y * gain.data + bias.data

    def backward(out: Tensor) -> None:
        g = out.grad
        if gain.requires_grad:
            gain.accumulate_grad(_unbroadcast(g * y, gain.shape))
        if bias.requires_grad:
            bias.accumulate_grad(_unbroadcast(g, bias.shape))
        if x.requires_grad:
            dy = g * gain.data
            term = dy - dy.mean(axis=1, keepdims=True) - y * (dy * y).mean(axis=1, keepdims=True)
            x.accumulate_grad(term * inv)

    return _result(out_data, (x, gain, bias), backward)


def attention(q: Tensor, k: Tensor, v: Tensor, heads: int = 1) -> Tensor:
    """Scaled dot-product multi-head attention: softmax(QKᵀ/√d_head)V per head."""
    out, _ = attention_with_weights(q, k, v, heads)
    return out


def attention_with_weights(q: Tensor, k: Tensor, v: Tensor, heads: int = 1):
    """Attention plus the detached per-head weight matrices [heads, m, n]."""
    from .errors import ConfigurationError

    if q.data.ndim != 2 or k.data.ndim != 2 or v.data.ndim != 2:
        raise DimensionError("attention expects 2-D Q, K, V")
    m, d_k = q.shape
    n, d_k2 = k.shape
    n2, d_v = v.shape
    if d_k != d_k2:
        raise DimensionError(f"attention: Q width {d_k} != K width {d_k2}")
    if n != n2:
        raise DimensionError(f"attention: K rows {n} != V rows {n2}")
    if n < 1:
        raise DimensionError("attention: empty key/value sequence")
    if heads < 1 or d_k % heads != 0 or d_v % heads != 0:
        raise ConfigurationError(
            f"attention: heads={heads} must divide d_k={d_k} and d_v={d_v}")

    dk_h = d_k // heads
    dv_h = d_v // heads
    inv_sqrt = 1.0 / np.sqrt(dk_h)

    weights = np.empty((heads, m, n))
    out_data = np.empty((m, d_v))
    for h in range(heads):
        qs = q.data[:, h * dk_h:(h + 1) * dk_h]
        ks = k.data[:, h * dk_h:(h + 1) * dk_h]
        vs = v.data[:, h * dv_h:(h + 1) * dv_h]
        logits = (qs @ ks.T) * inv_sqrt
        logits -= logits.max(axis=1, keepdims=True)
        e = np.exp(logits)
        w = e / e.sum(axis=1, keepdims=True)
        weights[h] = w
        out_data[:, h * dv_h:(h + 1) * dv_h] = w @ vs
    _check_finite(out_data, "attention output")

    def backward(out: Tensor) -> None:
        gq = np.zeros_like(q.data) if q.requires_grad else None
        gk = np.zeros_like(k.data) if k.requires_grad else None
        gv = np.zeros_like(v.data) if v.requires_grad else None
        for h in range(heads):
            w = weights[h]
            gy = out.grad[:, h * dv_h:(h + 1) * dv_h]
            vs = v.data[:, h * dv_h:(h + 1) * dv_h]
            if gv is not None:
                gv[:, h * dv_h:(h + 1) * dv_h] = w.T @ gy
            if gq is not None or gk is not None:
                dw = gy @ vs.T
                da = w * (dw - (dw * w).sum(axis=1, keepdims=True))
                if gq is not None:
                    gq[:, h * dk_h:(h + 1) * dk_h] = (da @ k.data[:, h * dk_h:(h + 1) * dk_h]) * inv_sqrt
                if gk is not None:
                    gk[:, h * dk_h:(h + 1) * dk_h] = (da.T @ q.data[:, h * dk_h:(h + 1) * dk_h]) * inv_sqrt
        if gq is not None:
            q.accumulate_grad(gq)
        if gk is not None:
            k.accumulate_grad(gk)
        if gv is not None:
            v.accumulate_grad(gv)

    return _result(out_data, (q, k, v), backward), weights


def backward(loss: Tensor) -> None:
    """Reverse-mode pass from a scalar loss through the whole tape."""
    if loss.data.ndim != 0:
        raise DimensionError(f"backward expects a scalar loss, got shape {loss.shape}")
    _check_finite(loss.data, "loss")

    # Iterative topological sort; tapes can exceed the recursion limit.
    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))

    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node)


class Parameter:
    """A named trainable tensor carrying its Adam moment buffers."""

    __slots__ = ("name", "tensor", "m", "v", "step")

    def __init__(self, name: str, data: np.ndarray):
        self.name = name
        self.tensor = Tensor(np.asarray(data, dtype=np.float64), requires_grad=True)
        self.m = np.zeros_like(self.tensor.data)
        self.v = np.zeros_like(self.tensor.data)
        self.step = 0

    @property
    def data(self) -> np.ndarray:
        return self.tensor.data

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.tensor.shape})"


def init_weight(rng: np.random.Generator, name: str, d_in: int, d_out: int) -> Parameter:
    """Uniform(-1/sqrt(d_in), +1/sqrt(d_in)) weight initialization."""
    bound = 1.0 / np.sqrt(d_in)
    return Parameter(name, rng.uniform(-bound, bound, size=(d_in, d_out)))


def init_bias(name: str, d: int) -> Parameter:
    return Parameter(name, np.zeros(d))


def adam_step(params: Iterable[Parameter], lr: float, weight_decay: float = 0.0,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """Bias-corrected Adam update with decoupled weight decay; clears gradients."""
    for p in params:
        g = p.tensor.grad
        if g is None:
            raise StateError(f"adam_step: no gradient for parameter {p.name!r}")
        p.step += 1
        p.m = beta1 * p.m + (1.0 - beta1) * g
        p.v = beta2 * p.v + (1.0 - beta2) * (g * g)
        m_hat = p.m / (1.0 - beta1 ** p.step)
        v_hat = p.v / (1.0 - beta2 ** p.step)
        update = lr * m_hat / (np.sqrt(v_hat) + eps)
        if weight_decay:
            update = update + lr * weight_decay * p.tensor.data
        p.tensor.data -= update
        _check_finite(p.tensor.data, f"parameter {p.name} after adam step")
        p.tensor.zero_grad()


def zero_grads(params: Iterable[Parameter]) -> None:
    for p in params:
        p.tensor.zero_grad()


def gradient_check(fn: Callable[[], Tensor], params: Sequence[Parameter],
                   eps: float = 1e-5, max_coords_per_param: int | None = None,
                   rng: np.random.Generator | None = None) -> float:
    """Max relative error between tape gradients and central differences.

    ``fn`` must be a deterministic scalar-valued forward pass over ``params``.
    The error at each sampled coordinate is
    |analytic - numeric| / max(1, |analytic|, |numeric|).
    """
    if not (1e-7 <= eps <= 1e-3):
        raise ValueError(f"eps {eps} outside [1e-7, 1e-3]")
    if rng is None:
        rng = np.random.default_rng(0)

    zero_grads(params)
    loss = fn()
    _check_finite(np.asarray(loss.data), "gradient_check loss")
    backward(loss)
    analytic = {}
    for p in params:
        if p.tensor.grad is None:
            analytic[p.name] = np.zeros_like(p.tensor.data)
        else:
            analytic[p.name] = p.tensor.grad.copy()
    zero_grads(params)

    worst = 0.0
    for p in params:
        flat = p.tensor.data.reshape(-1)
        n = flat.size
        if max_coords_per_param is not None and n > max_coords_per_param:
            coords = rng.choice(n, size=max_coords_per_param, replace=False)
        else:
            coords = np.arange(n)
        a_flat = analytic[p.name].reshape(-1)
        for c in coords:
            orig = flat[c]
            flat[c] = orig + eps
            up = fn().item()
            flat[c] = orig - eps
            down = fn().item()
            flat[c] = orig
            numeric = (up - down) / (2.0 * eps)
            a = a_flat[c]
            err = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
            if err > worst:
                worst = err
    return worst


def save_checkpoint(path: str, params: Sequence[Parameter], seed: int, meta: dict | None = None) -> None:
    """Write name -> (shape, little-endian fp64 buffer) plus version and seed.

    Parameters are serialized in sorted-name order so identical runs produce
    byte-identical files.
    """
    ordered = sorted(params, key=lambda p: p.name)
    header = {
        "format": "chainqa-checkpoint",
        "version": CHECKPOINT_VERSION,
        "seed": int(seed),
        "meta": meta or {},
        "params": [{"name": p.name, "shape": list(p.tensor.shape)} for p in ordered],
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for p in ordered:
            fh.write(np.ascontiguousarray(p.tensor.data, dtype="<f8").tobytes())


def load_checkpoint(path: str) -> tuple[dict[str, np.ndarray], dict]:
    """Read a checkpoint back as (name -> array, header)."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise StateError(f"{path}: not a chainqa checkpoint")
        (hlen,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        if header.get("version") != CHECKPOINT_VERSION:
            raise StateError(f"{path}: unsupported checkpoint version {header.get('version')}")
        arrays: dict[str, np.ndarray] = {}
        for entry in header["params"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            buf = fh.read(count * 8)
            if len(buf) != count * 8:
                raise StateError(f"{path}: truncated buffer for {entry['name']!r}")
            arrays[entry["name"]] = np.frombuffer(buf, dtype="<f8").reshape(shape).copy()
    return arrays, header
