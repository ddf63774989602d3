"""A small reverse-mode autodiff core over dense (B, C, H, W) numpy arrays.

Only the operators the generator and its loss need are provided. Every op
keeps the dtype of its inputs, so the same graph runs in float32 for
training and float64 for gradient checks.
"""

from __future__ import annotations

import itertools
import struct
import zlib
from pathlib import Path

import numpy as np

_ids = itertools.count()


class Tensor:
    """Array plus the bookkeeping needed to backpropagate through it."""

    __slots__ = ("data", "grad", "parents", "backward_fn", "op", "requires_grad", "name", "id")

    def __init__(self, data, parents=(), op="leaf", backward_fn=None, requires_grad=False, name=None):
        self.data = np.asarray(data)
        if not np.issubdtype(self.data.dtype, np.floating):
            self.data = self.data.astype(np.float64)
        self.parents = tuple(parents)
        self.backward_fn = backward_fn
        self.op = op
        self.requires_grad = requires_grad or any(p.requires_grad for p in self.parents)
        self.grad = None
        self.name = name
        self.id = next(_ids)

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        tag = f" {self.name}" if self.name else ""
        return f"Tensor({self.op}{tag}, shape={self.shape}, dtype={self.dtype})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other, self.dtype)))

    def __rsub__(self, other):
        return add(as_tensor(other, self.dtype), neg(self))

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def sum(self):
        return sum_all(self)

    def mean(self):
        return mean_all(self)

    def backward(self, grad=None):
        backward(self, grad)


class Parameter(Tensor):
    """Trainable leaf with a gradient accumulator."""

    __slots__ = ()

    def __init__(self, data, name=None):
        super().__init__(np.array(data), requires_grad=True, name=name)
        self.grad = np.zeros_like(self.data)

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype or np.float64))


def zero_grads(params):
    for p in params:
        p.zero_grad()


def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


def topological_order(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root`` that need gradients, parents first."""
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if node.id in seen or not node.requires_grad:
            continue
        seen.add(node.id)
        stack.append((node, True))
        for p in node.parents:
            if p.id not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, grad=None) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable Parameter's ``.grad``."""
    if grad is None:
        if loss.data.size != 1:
            raise ValueError("backward() without a seed gradient needs a scalar loss")
        grad = np.ones_like(loss.data)
    grads = {loss.id: np.asarray(grad, dtype=loss.dtype)}
    for node in reversed(topological_order(loss)):
        g = grads.pop(node.id, None)
        if g is None:
            continue
        if node.backward_fn is None:
            if isinstance(node, Parameter):
                node.grad = node.grad + g
            else:
                node.grad = g if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            if parent.id in grads:
                grads[parent.id] = grads[parent.id] + pg
            else:
                grads[parent.id] = pg


def ancestors(root: Tensor) -> set[int]:
    """Ids of every node ``root`` depends on, including itself."""
    seen, stack = set(), [root]
    while stack:
        n = stack.pop()
        if n.id in seen:
            continue
        seen.add(n.id)
        stack.extend(n.parents)
    return seen


# -- elementwise and structural ops -----------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return Tensor(a.data + b.data, (a, b), "add",
                  lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def neg(a: Tensor) -> Tensor:
    return Tensor(-a.data, (a,), "neg", lambda g: (-g,))


def mul(a, b) -> Tensor:
    """Elementwise product; either side may be size-1 along the channel axis."""
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return Tensor(ad * bd, (a, b), "mul",
                  lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def scale(a: Tensor, k: float) -> Tensor:
    return Tensor(a.data * k, (a,), "scale", lambda g: (g * k,))


def affine_channels(a: Tensor, mult, offset) -> Tensor:
    """y[:, c] = x[:, c] * mult[c] + offset[c] for a (B, C, H, W) tensor."""
    m = np.asarray(mult, dtype=a.dtype).reshape(1, -1, 1, 1)
    o = np.asarray(offset, dtype=a.dtype).reshape(1, -1, 1, 1)
    return Tensor(a.data * m + o, (a,), "affine", lambda g: (g * m,))


def abs_(a: Tensor) -> Tensor:
    s = np.sign(a.data)
    return Tensor(np.abs(a.data), (a,), "abs", lambda g: (g * s,))


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    return Tensor(np.asarray(a.data.sum(), dtype=a.dtype), (a,), "sum",
                  lambda g: (np.broadcast_to(g, shape).copy(),))


def mean_all(a: Tensor) -> Tensor:
    shape, n = a.shape, a.data.size
    return Tensor(np.asarray(a.data.mean(), dtype=a.dtype), (a,), "mean",
                  lambda g: (np.full(shape, g / n, dtype=a.dtype),))


def square(a: Tensor) -> Tensor:
    x = a.data
    return Tensor(x * x, (a,), "square", lambda g: (2 * x * g,))


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    pos = a.data > 0
    factor = np.where(pos, 1.0, slope).astype(a.dtype)
    return Tensor(a.data * factor, (a,), "leaky_relu", lambda g: (g * factor,))


def softmax_pair(a: Tensor, b: Tensor) -> tuple[Tensor, Tensor]:
    """Two-way softmax per element, shifted by the elementwise max."""
    if a.shape != b.shape:
        raise ValueError(f"softmax_pair shape mismatch: {a.shape} vs {b.shape}")
    m = np.maximum(a.data, b.data)
    ea = np.exp(a.data - m)
    eb = np.exp(b.data - m)
    s = ea + eb
    ma, mb = ea / s, eb / s
    # both masks hang off one node so backward sees the coupling once
    joint = Tensor(np.stack([ma, mb]), (a, b), "softmax_pair", None)

    def back(g):
        d = ma * mb * (g[0] - g[1])
        return d, -d

    joint.backward_fn = back
    return select(joint, 0), select(joint, 1)


def select(a: Tensor, index: int) -> Tensor:
    """``a[index]`` along the leading axis."""
    shape = a.shape

    def back(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[index] = g
        return (full,)

    return Tensor(a.data[index], (a,), "select", back)


def slice_channels(a: Tensor, start: int, stop: int) -> Tensor:
    shape = a.shape

    def back(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[:, start:stop] = g
        return (full,)

    return Tensor(a.data[:, start:stop], (a,), "slice_channels", back)


def concat_channels(tensors) -> Tensor:
    tensors = list(tensors)
    sizes = [t.shape[1] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def back(g):
        return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(tensors)))

    return Tensor(np.concatenate([t.data for t in tensors], axis=1), tensors, "concat", back)


def vertical_pixel_shuffle(a: Tensor, rate: int) -> Tensor:
    """(B, C, H, W) -> (B, C/rate, rate*H, W): out[b,c,rate*i+p,j] = in[b,c*rate+p,i,j]."""
    B, C, H, W = a.shape
    if rate < 1 or C % rate:
        raise ValueError(f"channel count {C} not divisible by rate {rate}")
    out = a.data.reshape(B, C // rate, rate, H, W).transpose(0, 1, 3, 2, 4).reshape(B, C // rate, rate * H, W)
    return Tensor(out, (a,), "vshuffle",
                  lambda g: (vertical_pixel_unshuffle_array(g, rate),))


def vertical_pixel_unshuffle_array(x: np.ndarray, rate: int) -> np.ndarray:
    B, C, H, W = x.shape
    if H % rate:
        raise ValueError(f"height {H} not divisible by rate {rate}")
    return x.reshape(B, C, H // rate, rate, W).transpose(0, 1, 3, 2, 4).reshape(B, C * rate, H // rate, W)


def vertical_pixel_unshuffle(a: Tensor, rate: int) -> Tensor:
    B, C, H, W = a.shape
    out = vertical_pixel_unshuffle_array(a.data, rate)
    return Tensor(out, (a,), "vunshuffle",
                  lambda g: (g.reshape(B, C, rate, H // rate, W).transpose(0, 1, 3, 2, 4).reshape(B, C, H, W),))


def gather_rows(a: Tensor, rows) -> Tensor:
    """(B, C, H, W) -> (B, C, len(rows), W) with out[..., k, :] = in[..., rows[k], :]."""
    rows = np.asarray(rows, dtype=np.intp)
    H = a.shape[2]
    if rows.ndim != 1 or (rows.size and (rows.min() < 0 or rows.max() >= H)):
        raise ValueError(f"row indices must be a 1-D array within [0, {H})")

    def back(g):
        out = np.zeros(a.shape, dtype=g.dtype)
        np.add.at(out, (slice(None), slice(None), rows), g)
        return (out,)

    return Tensor(a.data[:, :, rows], (a,), "gather_rows", back)


# -- convolution -------------------------------------------------------------

def _im2col(xp, k, dil, H, W):
    B, C = xp.shape[:2]
    cols = np.empty((B, C, k, k, H, W), dtype=xp.dtype)
    for a in range(k):
        for b in range(k):
            cols[:, :, a, b] = xp[:, :, a * dil:a * dil + H, b * dil:b * dil + W]
    return cols.reshape(B, C * k * k, H * W)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, dilation: int = 1) -> Tensor:
    """Same-size 2D convolution (cross-correlation) with dilation and zero padding."""
    B, C, H, W = x.shape
    O, Cw, k, k2 = weight.shape
    if k != k2 or k % 2 == 0:
        raise ValueError(f"kernel must be square and odd, got {k}x{k2}")
    if Cw != C:
        raise ValueError(f"conv expects {Cw} input channels, got {C}")
    if dilation < 1:
        raise ValueError("dilation must be >= 1")
    w2 = weight.data.reshape(O, C * k * k)
    if k == 1:
        cols = x.data.reshape(B, C, H * W)
    else:
        pad = dilation * (k - 1) // 2
        xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
        cols = _im2col(xp, k, dilation, H, W)
    out = np.matmul(w2, cols).reshape(B, O, H, W)
    if bias is not None:
        out += bias.data.reshape(1, O, 1, 1)

    def back(g):
        g2 = g.reshape(B, O, H * W)
        gw = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0).reshape(weight.shape)
        gcols = np.matmul(w2.T, g2)
        if k == 1:
            gx = gcols.reshape(B, C, H, W)
        else:
            gcols = gcols.reshape(B, C, k, k, H, W)
            gxp = np.zeros(xp.shape, dtype=g.dtype)
            for a in range(k):
                for b in range(k):
                    gxp[:, :, a * dilation:a * dilation + H, b * dilation:b * dilation + W] += gcols[:, :, a, b]
            gx = gxp[:, :, pad:pad + H, pad:pad + W]
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor(out, parents, f"conv{k}x{k}d{dilation}", back)


def pointwise_mlp(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Shared per-pixel linear layer: a 1x1 convolution."""
    if weight.shape[2:] != (1, 1):
        raise ValueError(f"pointwise layer needs a 1x1 kernel, got {weight.shape[2:]}")
    return conv2d(x, weight, bias, dilation=1)


# -- gradient checking -------------------------------------------------------

def _numeric(f, flat, i, eps):
    old = flat[i]
    flat[i] = old + eps
    fp = f()
    flat[i] = old - eps
    fm = f()
    flat[i] = old
    return fp, fm


def grad_check(fn, params, eps: float = 1e-3, tol: float = 1e-4, max_coords: int | None = None,
               seed: int = 0, refine: int = 3) -> float:
    """Largest relative error between backprop and central differences.

    ``fn`` rebuilds the graph from ``params`` and returns a scalar Tensor; run
    it on float64 parameters. Piecewise-linear ops (leaky_relu, abs) make the
    central difference wrong whenever the +-eps interval straddles a kink, so
    a coordinate that is not clearly inside ``tol`` (within a tenth of it) is
    retried with the step shrunk tenfold ``refine`` times and once with it
    grown tenfold (for roundoff on tiny gradients), keeping the best
    agreement. A wrong analytic gradient disagrees at every step size and
    still fails.
    """
    params = list(params)
    zero_grads(params)
    loss = fn()
    loss.backward()
    analytic = [p.grad.copy() for p in params]
    rng = np.random.default_rng(seed)

    def value():
        return float(fn().data)

    # smaller steps clear kinks, the larger one beats roundoff on tiny gradients
    steps = [eps] + [eps * 10.0 ** -k for k in range(1, refine + 1)] + [eps * 10.0]
    worst = 0.0
    for p, ga in zip(params, analytic):
        flat = p.data.reshape(-1)
        gflat = ga.reshape(-1)
        idx = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            idx = rng.choice(flat.size, max_coords, replace=False)
        for i in idx:
            best = np.inf
            for h in steps:
                fp, fm = _numeric(value, flat, i, h)
                best = min(best, _rel_err(gflat[i], (fp - fm) / (2 * h)))
                if h == eps and best < 0.1 * tol:
                    break
            worst = max(worst, best)
    zero_grads(params)
    return worst


def _rel_err(a, n, floor=1e-10):
    denom = max(abs(a), abs(n))
    if denom < floor:
        return 0.0
    return abs(a - n) / denom


# -- parameter files ---------------------------------------------------------

_PMAGIC = b"HALP"
_PHEAD = struct.Struct("<4sHII")


def tensors_to_bytes(named: dict[str, np.ndarray]) -> bytes:
    body = bytearray()
    for name, arr in named.items():
        key = name.encode()
        arr = np.asarray(arr)
        body += struct.pack("<H", len(key)) + key
        body += struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
        body += np.ascontiguousarray(arr, dtype="<f4").tobytes()
    return _PHEAD.pack(_PMAGIC, 1, len(named), zlib.crc32(body)) + bytes(body)


def tensors_from_bytes(data: bytes) -> dict[str, np.ndarray]:
    if len(data) < _PHEAD.size:
        raise ValueError("truncated parameter file")
    magic, version, count, crc = _PHEAD.unpack_from(data)
    if magic != _PMAGIC or version != 1:
        raise ValueError("not a parameter file")
    body = memoryview(data)[_PHEAD.size:]
    if zlib.crc32(body) != crc:
        raise ValueError("parameter file checksum mismatch")
    out, off = {}, 0
    for _ in range(count):
        (n,) = struct.unpack_from("<H", body, off)
        off += 2
        name = bytes(body[off:off + n]).decode()
        off += n
        (ndim,) = struct.unpack_from("<B", body, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", body, off)
        off += 4 * ndim
        size = int(np.prod(shape, dtype=np.int64))
        out[name] = np.frombuffer(body, dtype="<f4", count=size, offset=off).reshape(shape).astype(np.float32)
        off += 4 * size
    if off != len(body):
        raise ValueError("trailing bytes in parameter file")
    return out


def save_tensors(path, named: dict[str, np.ndarray]) -> None:
    """Write atomically: temp file then rename."""
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(tensors_to_bytes(named))
    tmp.replace(path)


def load_tensors(path) -> dict[str, np.ndarray]:
    return tensors_from_bytes(Path(path).read_bytes())
