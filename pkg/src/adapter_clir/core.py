"""Dense float64 tensors with reverse-mode differentiation and a parameter registry.

Only the operations the encoder, adapters and retrieval heads need are provided.
Every op records its parents and a closure that pushes the upstream gradient
back to them; :func:`backward` walks the resulting DAG once in reverse
topological order.
"""

from __future__ import annotations

import hashlib
import struct
import zlib
from collections import OrderedDict
from pathlib import Path
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

INIT_RANGE = 0.05


class DimensionError(ValueError):
    pass


class ConfigError(ValueError):
    pass


class StateError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "_parents", "_backward", "requires_grad")

    def __init__(self, data, parents: Sequence["Tensor"] = (), backward: Callable | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self._parents = tuple(parents)
        self._backward = backward
        self.requires_grad = any(p.requires_grad for p in self._parents)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def _accum(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __getitem__(self, idx):
        return take(self, idx)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape})"


class ParamTensor(Tensor):
    """A named leaf tensor owned by a :class:`ParamRegistry`.

    Frozen parameters (``trainable=False``) still take part in the graph so
    gradients can flow through them; their own grads are zeroed after backward.
    """

    __slots__ = ("name", "trainable")

    def __init__(self, name: str, data, trainable: bool = True):
        super().__init__(data)
        self.name = name
        self.trainable = trainable
        self.requires_grad = True

    def zero_grad(self) -> None:
        self.grad = None

    def checksum(self) -> str:
        return hashlib.sha256(np.ascontiguousarray(self.data, dtype="<f8").tobytes()).hexdigest()

    def __repr__(self) -> str:
        flag = "" if self.trainable else ", frozen"
        return f"ParamTensor({self.name!r}, shape={self.shape}{flag})"


def const(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def named_rng(seed: int, name: str) -> np.random.Generator:
    """Generator keyed by (seed, name) so init does not depend on creation order."""
    return np.random.default_rng([int(seed), zlib.crc32(name.encode("utf-8"))])


class ParamRegistry:
    def __init__(self, rng_seed: int = 0):
        self.rng_seed = rng_seed
        self._params: OrderedDict[str, ParamTensor] = OrderedDict()

    def create(self, name: str, shape: Sequence[int], init: str = "uniform", trainable: bool = True) -> ParamTensor:
        if name in self._params:
            raise ConfigError(f"duplicate parameter name {name!r}")
        shape = tuple(int(s) for s in shape)
        if init == "uniform":
            data = named_rng(self.rng_seed, name).uniform(-INIT_RANGE, INIT_RANGE, size=shape)
        elif init == "zeros":
            data = np.zeros(shape)
        elif init == "ones":
            data = np.ones(shape)
        else:
            raise ConfigError(f"unknown init {init!r}")
        p = ParamTensor(name, data, trainable)
        self._params[name] = p
        return p

    def add(self, param: ParamTensor) -> ParamTensor:
        if param.name in self._params and self._params[param.name] is not param:
            raise ConfigError(f"duplicate parameter name {param.name!r}")
        self._params[param.name] = param
        return param

    def remove_prefix(self, prefix: str) -> list[ParamTensor]:
        gone = [p for n, p in self._params.items() if n.startswith(prefix)]
        for p in gone:
            del self._params[p.name]
        return gone

    def __getitem__(self, name: str) -> ParamTensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[ParamTensor]:
        return iter(self._params.values())

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def total_params(self) -> int:
        return sum(int(p.data.size) for p in self)

    def trainable_params(self) -> int:
        return sum(int(p.data.size) for p in self if p.trainable)

    def set_trainable(self, predicate: Callable[[str], bool]) -> None:
        for p in self:
            p.trainable = bool(predicate(p.name))

    def zero_grad(self) -> None:
        for p in self:
            p.grad = None

    def checksums(self, prefix: str = "") -> dict[str, str]:
        return {p.name: p.checksum() for p in self if p.name.startswith(prefix)}

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for p in self:
            h.update(p.name.encode())
            h.update(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
        return h.hexdigest()


# ---------------------------------------------------------------------------
# graph traversal


def topological_order(root: Tensor) -> list[Tensor]:
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


class Graph:
    """The recorded DAG below a scalar loss, in topological order."""

    def __init__(self, loss: Tensor):
        self.loss = loss
        self.nodes = topological_order(loss)

    def __len__(self) -> int:
        return len(self.nodes)

    def params(self) -> list[ParamTensor]:
        return [n for n in self.nodes if isinstance(n, ParamTensor)]


def backward(loss: Tensor, on_visit: Callable[[Tensor], None] | None = None) -> Graph:
    if loss.data.size != 1:
        raise StateError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss._parents or not loss.requires_grad:
        raise StateError("no recorded forward pass below this node")
    graph = Graph(loss)
    for node in graph.nodes:
        if not isinstance(node, ParamTensor):
            node.grad = None
    loss.grad = np.ones_like(loss.data)
    for node in reversed(graph.nodes):
        if on_visit is not None:
            on_visit(node)
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
    for p in graph.params():
        if not p.trainable:
            p.grad = np.zeros_like(p.data)
    # drop intermediate grads so large activations can be freed
    for node in graph.nodes:
        if not isinstance(node, ParamTensor):
            node.grad = None
    return graph


# ---------------------------------------------------------------------------
# ops


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = const(a), const(b)
    out = Tensor(a.data + b.data, (a, b))

    def bw(g):
        a._accum(_unbroadcast(g, a.shape))
        b._accum(_unbroadcast(g, b.shape))

    out._backward = bw
    return out


def sub(a, b) -> Tensor:
    a, b = const(a), const(b)
    out = Tensor(a.data - b.data, (a, b))

    def bw(g):
        a._accum(_unbroadcast(g, a.shape))
        b._accum(_unbroadcast(-g, b.shape))

    out._backward = bw
    return out


def mul(a, b) -> Tensor:
    a, b = const(a), const(b)
    out = Tensor(a.data * b.data, (a, b))

    def bw(g):
        a._accum(_unbroadcast(g * b.data, a.shape))
        b._accum(_unbroadcast(g * a.data, b.shape))

    out._backward = bw
    return out


def scale(a: Tensor, c: float) -> Tensor:
    out = Tensor(a.data * c, (a,))
    out._backward = lambda g: a._accum(g * c)
    return out


def matmul(a, b) -> Tensor:
    """Batched matrix product over the last two axes (numpy broadcasting rules)."""
    a, b = const(a), const(b)
    if a.shape[-1] != b.shape[-2 if b.data.ndim > 1 else 0]:
        raise DimensionError(f"matmul shapes {a.shape} and {b.shape} do not conform")
    out = Tensor(a.data @ b.data, (a, b))

    def bw(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))

    out._backward = bw
    return out


def affine(x, W: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ W + b`` over the last axis of ``x`` (any leading batch shape)."""
    x = const(x)
    if W.data.ndim != 2 or x.shape[-1] != W.shape[0] or (b is not None and b.shape != (W.shape[1],)):
        raise DimensionError(
            f"affine: x {x.shape} and W {W.shape}" + (f" and b {b.shape}" if b is not None else "") + " do not conform"
        )
    y = x.data @ W.data
    if b is not None:
        y = y + b.data
    parents = (x, W) if b is None else (x, W, b)
    out = Tensor(y, parents)

    def bw(g):
        if x.requires_grad:
            x._accum(g @ W.data.T)
        g2 = g.reshape(-1, g.shape[-1])
        if W.requires_grad:
            W._accum(x.data.reshape(-1, x.shape[-1]).T @ g2)
        if b is not None and b.requires_grad:
            b._accum(g2.sum(axis=0))

    out._backward = bw
    return out


def layer_norm(x, gamma: Tensor, beta: Tensor, eps: float = 1e-12) -> Tensor:
    """Row normalization with population variance; ``eps`` sits inside the square root."""
    x = const(x)
    width = x.shape[-1]
    if width == 0:
        raise DimensionError("layer_norm over zero-width rows")
    if gamma.shape != (width,) or beta.shape != (width,):
        raise DimensionError(f"layer_norm: x {x.shape}, gamma {gamma.shape}, beta {beta.shape}")
    if eps <= 0:
        raise ConfigError("eps must be positive")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = Tensor(xhat * gamma.data + beta.data, (x, gamma, beta))

    def bw(g):
        if gamma.requires_grad:
            gamma._accum((g * xhat).reshape(-1, width).sum(axis=0))
        if beta.requires_grad:
            beta._accum(g.reshape(-1, width).sum(axis=0))
        if x.requires_grad:
            dxhat = g * gamma.data
            dx = inv / width * (
                width * dxhat
                - dxhat.sum(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True)
            )
            x._accum(dx)

    out._backward = bw
    return out


def relu(x) -> Tensor:
    x = const(x)
    on = x.data > 0
    out = Tensor(np.where(on, x.data, 0.0), (x,))
    out._backward = lambda g: x._accum(g * on)
    return out


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(x) -> Tensor:
    """tanh approximation of GELU."""
    x = const(x)
    xd = x.data
    x2 = xd * xd
    t = np.tanh(_GELU_C * xd * (1.0 + 0.044715 * x2))
    out = Tensor(0.5 * xd * (1.0 + t), (x,))

    def bw(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        d = 1.0 - t * t
        d *= du
        d *= xd
        d += 1.0 + t
        d *= 0.5
        d *= g
        x._accum(d)

    out._backward = bw
    return out


def _softmax(z: np.ndarray) -> np.ndarray:
    e = z - z.max(axis=-1, keepdims=True)
    np.exp(e, out=e)
    e /= e.sum(axis=-1, keepdims=True)
    return e


def softmax_rows(x) -> Tensor:
    x = const(x)
    p = _softmax(x.data)
    out = Tensor(p, (x,))
    out._backward = lambda g: x._accum(p * (g - (g * p).sum(axis=-1, keepdims=True)))
    return out


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    out = Tensor(table.data[ids], (table,))

    def bw(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        table._accum(gt)

    out._backward = bw
    return out


def take(x: Tensor, idx) -> Tensor:
    out = Tensor(x.data[idx], (x,))

    def bw(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        x._accum(gx)

    out._backward = bw
    return out


def reshape(x: Tensor, shape) -> Tensor:
    out = Tensor(x.data.reshape(shape), (x,))
    out._backward = lambda g: x._accum(g.reshape(x.shape))
    return out


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = Tensor(np.transpose(x.data, axes), (x,))
    out._backward = lambda g: x._accum(np.transpose(g, inv))
    return out


def total(x: Tensor, axis=None) -> Tensor:
    out = Tensor(x.data.sum(axis=axis), (x,))

    def bw(g):
        gg = g if axis is None else np.expand_dims(g, axis)
        x._accum(np.broadcast_to(gg, x.shape))

    out._backward = bw
    return out


def mean(x: Tensor) -> Tensor:
    return scale(total(x), 1.0 / x.data.size)


def stack(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [const(x) for x in xs]
    out = Tensor(np.stack([x.data for x in xs], axis=axis), xs)

    def bw(g):
        for i, x in enumerate(xs):
            x._accum(np.take(g, i, axis=axis))

    out._backward = bw
    return out


def l2_normalize(x: Tensor, eps: float = 1e-12) -> Tensor:
    n = np.sqrt((x.data * x.data).sum(axis=-1, keepdims=True) + eps)
    y = x.data / n
    out = Tensor(y, (x,))
    out._backward = lambda g: x._accum((g - y * (g * y).sum(axis=-1, keepdims=True)) / n)
    return out


def softplus(x: Tensor) -> Tensor:
    """``log(1 + exp(x))`` evaluated without overflow."""
    z = x.data
    out = Tensor(np.logaddexp(0.0, z), (x,))
    sig = np.exp(-np.logaddexp(0.0, -z))
    out._backward = lambda g: x._accum(g * sig)
    return out


def cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer targets under row softmax."""
    targets = np.asarray(targets, dtype=np.int64)
    z = logits.data
    m = z.max(axis=-1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(z - m).sum(axis=-1))
    n = len(targets)
    nll = lse - z[np.arange(n), targets]
    out = Tensor(nll.mean(), (logits,))

    def bw(g):
        p = np.exp(z - lse[:, None])
        p[np.arange(n), targets] -= 1.0
        logits._accum(p * (g / n))

    out._backward = bw
    return out


def self_attention(q: Tensor, k: Tensor, v: Tensor, heads: int, mask: np.ndarray) -> Tensor:
    """Multi-head scaled dot-product attention over [B, n, h] inputs.

    ``mask`` is a boolean [B, n] array of real tokens; masked keys receive
    exactly zero weight so they cannot influence any output row.
    """
    B, n, h = q.shape
    d = h // heads

    def split(t):
        return t.reshape(B, n, heads, d).transpose(0, 2, 1, 3)

    Q, K, V = split(q.data), split(k.data), split(v.data)
    sc = 1.0 / np.sqrt(d)
    S = Q @ K.transpose(0, 1, 3, 2)
    S *= sc
    if not mask.all():
        S[np.broadcast_to(~mask[:, None, None, :], S.shape)] = -np.inf
    P = _softmax(S)
    O = P @ V
    out = Tensor(O.transpose(0, 2, 1, 3).reshape(B, n, h), (q, k, v))

    def bw(g):
        G = split(g)
        dV = P.transpose(0, 1, 3, 2) @ G
        dS = G @ V.transpose(0, 1, 3, 2)
        dS -= np.einsum("bhij,bhij->bhi", dS, P)[..., None]
        dS *= P
        dS *= sc
        dQ = dS @ K
        dK = dS.transpose(0, 1, 3, 2) @ Q

        def merge(t):
            return t.transpose(0, 2, 1, 3).reshape(B, n, h)

        q._accum(merge(dQ))
        k._accum(merge(dK))
        v._accum(merge(dV))

    out._backward = bw
    return out


def maxsim(Q: Tensor, D: Tensor, q_mask: np.ndarray, d_mask: np.ndarray) -> Tensor:
    """Batched late-interaction score: per pair, sum over real query tokens of
    the max inner product against real document tokens. Q [B,nq,e], D [B,nd,e]."""
    S = Q.data @ np.swapaxes(D.data, -1, -2)
    S = np.where(d_mask[:, None, :], S, -np.inf)
    arg = S.argmax(axis=-1)
    best = np.take_along_axis(S, arg[..., None], axis=-1)[..., 0]
    qm = q_mask.astype(np.float64)
    out = Tensor((np.where(q_mask, best, 0.0)).sum(axis=-1), (Q, D))

    def bw(g):
        dS = np.zeros_like(S)
        np.put_along_axis(dS, arg[..., None], (g[:, None] * qm)[..., None], axis=-1)
        Q._accum(dS @ D.data)
        D._accum(np.swapaxes(dS, -1, -2) @ Q.data)

    out._backward = bw
    return out


# ---------------------------------------------------------------------------
# optimisation


class AdamState:
    def __init__(self):
        self.step = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}


def adam_step(
    params: Iterable[ParamTensor],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """One bias-corrected Adam update on trainable params that hold a grad.

    Frozen parameters are never written, whatever their grad holds.
    """
    if lr <= 0:
        raise ConfigError(f"learning rate must be positive, got {lr}")
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for p in params:
        if not p.trainable or p.grad is None:
            continue
        m = state.m.get(p.name)
        if m is None:
            m = state.m[p.name] = np.zeros_like(p.data)
            state.v[p.name] = np.zeros_like(p.data)
        v = state.v[p.name]
        g = p.grad
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


# ---------------------------------------------------------------------------
# checkpoints
#
# Layout (all integers little-endian):
#   magic  b"ACLRCKPT"          8 bytes
#   version                     uint32 (currently 1)
#   record count                uint32
#   per record:
#     name length               uint32, then UTF-8 name bytes
#     ndim                      uint32, then ndim x uint64 dims
#     values                    prod(dims) x float64, C order
#     trainable                 uint8 (0/1)

MAGIC = b"ACLRCKPT"
VERSION = 1


def save_checkpoint(path: str | Path, params: Iterable[ParamTensor]) -> None:
    params = list(params)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", VERSION, len(params)))
        for p in params:
            name = p.name.encode("utf-8")
            f.write(struct.pack("<I", len(name)))
            f.write(name)
            f.write(struct.pack("<I", p.data.ndim))
            f.write(struct.pack(f"<{p.data.ndim}Q", *p.data.shape))
            f.write(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
            f.write(struct.pack("<B", int(p.trainable)))


def load_checkpoint(path: str | Path) -> list[ParamTensor]:
    with open(path, "rb") as f:
        buf = f.read()
    if buf[:8] != MAGIC:
        raise ConfigError(f"{path}: not a parameter checkpoint")
    version, count = struct.unpack_from("<II", buf, 8)
    if version != VERSION:
        raise ConfigError(f"{path}: unsupported checkpoint version {version}")
    off = 16
    out = []
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", buf, off)
        off += 4
        name = buf[off : off + nlen].decode("utf-8")
        off += nlen
        (ndim,) = struct.unpack_from("<I", buf, off)
        off += 4
        shape = struct.unpack_from(f"<{ndim}Q", buf, off)
        off += 8 * ndim
        size = int(np.prod(shape, dtype=np.int64)) if ndim else 1
        data = np.frombuffer(buf, dtype="<f8", count=size, offset=off).reshape(shape).astype(np.float64)
        off += 8 * size
        (tr,) = struct.unpack_from("<B", buf, off)
        off += 1
        out.append(ParamTensor(name, data, bool(tr)))
    return out
