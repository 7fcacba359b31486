"""Minimal reverse-mode automatic differentiation on dense numpy arrays.

Dynamic tape: every op returns a Tensor holding its parents and a closure that
pushes the output gradient back to them. backward() on a scalar loss replays
the tape in reverse topological order, accumulating (+=) into .grad. Compute
is float64 throughout; checkpoints store float32 at rest.

The op set is exactly what the renderer and losses need: broadcasting
arithmetic, matmul, reductions, gelu/sigmoid/tanh, layer norm, masked softmax
attention, 2-D convolution, and differentiable bilinear gathering.
"""

from __future__ import annotations

import struct

import numpy as np


class AutodiffError(ValueError):
    pass


class Tensor:
    __slots__ = ("values", "grad", "requires_grad", "_parents", "_backward_fn")

    def __init__(self, values, requires_grad=False, parents=(), backward_fn=None):
        self.values = np.asarray(values, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad) or any(p.requires_grad for p in parents)
        self._parents = tuple(parents)
        self._backward_fn = backward_fn

    @property
    def shape(self):
        return self.values.shape

    @property
    def ndim(self):
        return self.values.ndim

    def zero_grad(self):
        self.grad = None

    def accumulate(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.values)
        self.grad += g

    def backward(self):
        if self.values.size != 1:
            raise AutodiffError("backward() requires a scalar loss")
        topo, seen = [], set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self.accumulate(np.ones_like(self.values))
        for node in reversed(topo):
            if node._backward_fn is not None and node.grad is not None:
                node._backward_fn(node.grad)

    # operator sugar -------------------------------------------------------
    def __add__(self, other):
        return add(self, _as_tensor(other))

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    __rmul__ = __mul__

    def __sub__(self, other):
        return add(self, mul(_as_tensor(other), _as_tensor(-1.0)))

    def __rsub__(self, other):
        return add(_as_tensor(other), mul(self, _as_tensor(-1.0)))

    def __neg__(self):
        return mul(self, _as_tensor(-1.0))

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise AutodiffError("divide by a constant, or use mul + power")
        return mul(self, _as_tensor(1.0 / other))

    def reshape(self, *shape):
        return reshape(self, shape)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(values) -> Tensor:
    return Tensor(values, requires_grad=False)


def parameter(values) -> Tensor:
    return Tensor(values, requires_grad=True)


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Sum a broadcasted gradient back down to the parent's shape."""
    if grad.shape == tuple(shape):
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def add(a: Tensor, b: Tensor) -> Tensor:
    out_vals = a.values + b.values

    def bw(g):
        if a.requires_grad:
            a.accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast(g, b.shape))

    return Tensor(out_vals, parents=(a, b), backward_fn=bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out_vals = a.values * b.values

    def bw(g):
        if a.requires_grad:
            a.accumulate(_unbroadcast(g * b.values, a.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast(g * a.values, b.shape))

    return Tensor(out_vals, parents=(a, b), backward_fn=bw)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    out_vals = a.values @ b.values

    def bw(g):
        if a.requires_grad:
            ga = g @ np.swapaxes(b.values, -1, -2)
            a.accumulate(_unbroadcast(ga, a.shape))
        if b.requires_grad:
            gb = np.swapaxes(a.values, -1, -2) @ g
            b.accumulate(_unbroadcast(gb, b.shape))

    return Tensor(out_vals, parents=(a, b), backward_fn=bw)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    out_vals = a.values.reshape(shape)

    def bw(g):
        if a.requires_grad:
            a.accumulate(g.reshape(old))

    return Tensor(out_vals, parents=(a,), backward_fn=bw)


def transpose(a: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)
    out_vals = a.values.transpose(axes)

    def bw(g):
        if a.requires_grad:
            a.accumulate(g.transpose(inv))

    return Tensor(out_vals, parents=(a,), backward_fn=bw)


def concat(tensors, axis=-1) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    out_vals = np.concatenate([t.values for t in tensors], axis=axis)
    sizes = [t.values.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            if t.requires_grad:
                t.accumulate(piece)

    return Tensor(out_vals, parents=tuple(tensors), backward_fn=bw)


def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    out_vals = a.values.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if not a.requires_grad:
            return
        if axis is None:
            a.accumulate(np.broadcast_to(g, a.shape).copy())
        else:
            if not keepdims:
                g = np.expand_dims(g, axis)
            a.accumulate(np.broadcast_to(g, a.shape).copy())

    return Tensor(out_vals, parents=(a,), backward_fn=bw)


def tmean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    n = a.values.size if axis is None else a.values.shape[axis]
    return mul(tsum(a, axis=axis, keepdims=keepdims), _as_tensor(1.0 / n))


def power(a: Tensor, p: float) -> Tensor:
    out_vals = a.values ** p

    def bw(g):
        if a.requires_grad:
            a.accumulate(g * p * a.values ** (p - 1))

    return Tensor(out_vals, parents=(a,), backward_fn=bw)


def exp(a: Tensor) -> Tensor:
    out_vals = np.exp(a.values)

    def bw(g):
        if a.requires_grad:
            a.accumulate(g * out_vals)

    return Tensor(out_vals, parents=(a,), backward_fn=bw)


def tanh(a: Tensor) -> Tensor:
    out_vals = np.tanh(a.values)

    def bw(g):
        if a.requires_grad:
            a.accumulate(g * (1.0 - out_vals ** 2))

    return Tensor(out_vals, parents=(a,), backward_fn=bw)


def sigmoid(a: Tensor) -> Tensor:
    out_vals = 1.0 / (1.0 + np.exp(-a.values))

    def bw(g):
        if a.requires_grad:
            a.accumulate(g * out_vals * (1.0 - out_vals))

    return Tensor(out_vals, parents=(a,), backward_fn=bw)


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a: Tensor) -> Tensor:
    """tanh-approximation GELU; backward uses the matching analytic form."""
    x = a.values
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(inner)
    out_vals = 0.5 * x * (1.0 + t)

    def bw(g):
        if a.requires_grad:
            dinner = _GELU_C * (1.0 + 3 * 0.044715 * x ** 2)
            da = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t ** 2) * dinner
            a.accumulate(g * da)

    return Tensor(out_vals, parents=(a,), backward_fn=bw)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    out = matmul(x, w)
    if b is not None:
        out = add(out, b)
    return out


def layernorm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then scale+shift."""
    mu = x.values.mean(axis=-1, keepdims=True)
    var = x.values.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.values - mu) * inv
    out_vals = xhat * gain.values + bias.values

    def bw(g):
        if gain.requires_grad:
            gain.accumulate(_unbroadcast(g * xhat, gain.shape))
        if bias.requires_grad:
            bias.accumulate(_unbroadcast(g, bias.shape))
        if x.requires_grad:
            dxhat = g * gain.values
            m1 = dxhat.mean(axis=-1, keepdims=True)
            m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
            x.accumulate((dxhat - m1 - xhat * m2) * inv)

    return Tensor(out_vals, parents=(x, gain, bias), backward_fn=bw)


def masked_softmax(z: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis; mask (broadcastable, True=keep) removes
    entries entirely. A row with no unmasked entry is an error."""
    zv = z.values
    if mask is None:
        m = np.ones(zv.shape, dtype=bool)
    else:
        m = np.broadcast_to(np.asarray(mask, dtype=bool), zv.shape)
    if np.any(~m.any(axis=-1)):
        raise AutodiffError("softmax row with all entries masked")
    zmax = np.where(m, zv, -np.inf).max(axis=-1, keepdims=True)
    e = np.where(m, np.exp(zv - zmax), 0.0)
    out_vals = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        if z.requires_grad:
            dot = (g * out_vals).sum(axis=-1, keepdims=True)
            z.accumulate(out_vals * (g - dot))

    return Tensor(out_vals, parents=(z,), backward_fn=bw)


def softmax_attention(q: Tensor, k: Tensor, v: Tensor,
                      mask: np.ndarray | None = None) -> Tensor:
    """Scaled dot-product attention softmax(q k^T / sqrt(d)) v.

    Leading batch axes broadcast; mask has shape (..., n_k) and excludes
    masked keys from the softmax support.
    """
    d = q.shape[-1]
    scores = mul(matmul(q, transpose(k, tuple(range(k.ndim - 2)) + (k.ndim - 1, k.ndim - 2))),
                 _as_tensor(1.0 / np.sqrt(d)))
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)[..., None, :]
    weights = masked_softmax(scores, mask)
    return matmul(weights, v)


def conv2d(x: Tensor, kernels: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D convolution (cross-correlation layout, as is conventional for
    learned kernels): x (C, H, W), kernels (O, C, kh, kw) -> (O, H', W')."""
    c, h, w = x.shape
    o, c2, kh, kw = kernels.shape
    if c != c2:
        raise AutodiffError(f"conv2d channel mismatch: {c} vs {c2}")
    xp = np.pad(x.values, ((0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    win = win[:, ::stride, ::stride]              # (C, ho, wo, kh, kw)
    cols = win.transpose(1, 2, 0, 3, 4).reshape(ho * wo, c * kh * kw)
    kmat = kernels.values.reshape(o, c * kh * kw)
    out_vals = (cols @ kmat.T).T.reshape(o, ho, wo)

    def bw(g):
        gmat = g.reshape(o, ho * wo).T            # (ho*wo, O)
        if kernels.requires_grad:
            kernels.accumulate((gmat.T @ cols).reshape(kernels.shape))
        if x.requires_grad:
            dcols = (gmat @ kmat).reshape(ho, wo, c, kh, kw).transpose(2, 3, 4, 0, 1)
            dxp = np.zeros_like(xp)
            for a in range(kh):
                for b in range(kw):
                    dxp[:, a:a + ho * stride:stride, b:b + wo * stride:stride] += dcols[:, a, b]
            if pad:
                dxp = dxp[:, pad:-pad, pad:-pad]
            x.accumulate(dxp)

    return Tensor(out_vals, parents=(x, kernels), backward_fn=bw)


def gather_bilinear(feature_map: Tensor, coords: np.ndarray,
                    in_bounds: np.ndarray) -> Tensor:
    """Differentiable bilinear lookup into an (H, W, C) map at (M, 2) pixel
    coordinates. Gradients scatter back into the map; coordinates are fixed.
    Out-of-bounds rows produce zeros."""
    fm = feature_map.values
    h, w = fm.shape[:2]
    p = np.asarray(coords, dtype=np.float64)
    inb = np.asarray(in_bounds, dtype=bool)
    xs = np.where(inb, p[..., 0], 0.0)
    ys = np.where(inb, p[..., 1], 0.0)
    x0 = np.clip(np.floor(xs).astype(int), 0, max(w - 2, 0))
    y0 = np.clip(np.floor(ys).astype(int), 0, max(h - 2, 0))
    fx = (xs - x0)[..., None]
    fy = (ys - y0)[..., None]
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    w00 = (1 - fx) * (1 - fy) * inb[..., None]
    w01 = fx * (1 - fy) * inb[..., None]
    w10 = (1 - fx) * fy * inb[..., None]
    w11 = fx * fy * inb[..., None]
    out_vals = (fm[y0, x0] * w00 + fm[y0, x1] * w01
                + fm[y1, x0] * w10 + fm[y1, x1] * w11)

    def bw(g):
        if feature_map.requires_grad:
            acc = np.zeros_like(fm)
            np.add.at(acc, (y0, x0), g * w00)
            np.add.at(acc, (y0, x1), g * w01)
            np.add.at(acc, (y1, x0), g * w10)
            np.add.at(acc, (y1, x1), g * w11)
            feature_map.accumulate(acc)

    return Tensor(out_vals, parents=(feature_map,), backward_fn=bw)


# ---------------------------------------------------------------------------
# Parameters, initialization, optimizer
# ---------------------------------------------------------------------------

def xavier_uniform(shape, rng: np.random.Generator, fan_in=None, fan_out=None) -> np.ndarray:
    if fan_in is None:
        fan_in = int(np.prod(shape[:-1])) if len(shape) > 1 else shape[0]
    if fan_out is None:
        fan_out = shape[-1]
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


class ParamStore:
    """Named learnable tensors plus per-parameter Adam state."""

    def __init__(self):
        self.params: dict[str, Tensor] = {}
        self.moment1: dict[str, np.ndarray] = {}
        self.moment2: dict[str, np.ndarray] = {}
        self.step_count = 0

    def create(self, name: str, values) -> Tensor:
        if name in self.params:
            raise AutodiffError(f"duplicate parameter name {name!r}")
        t = parameter(values)
        self.params[name] = t
        self.moment1[name] = np.zeros_like(t.values)
        self.moment2[name] = np.zeros_like(t.values)
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __contains__(self, name):
        return name in self.params

    def zero_grad(self):
        for t in self.params.values():
            t.zero_grad()

    def num_values(self) -> int:
        return sum(t.values.size for t in self.params.values())


def adam_step(store: ParamStore, lr: float, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8):
    """One bias-corrected Adam update over every parameter with a gradient;
    zeroes all gradients afterwards."""
    store.step_count += 1
    t = store.step_count
    for name, p in store.params.items():
        g = p.grad
        if g is None:
            continue
        if not np.all(np.isfinite(g)):
            raise AutodiffError(f"non-finite gradient in parameter {name!r}")
        m = store.moment1[name]
        v = store.moment2[name]
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * g * g
        mhat = m / (1 - beta1 ** t)
        vhat = v / (1 - beta2 ** t)
        p.values -= lr * mhat / (np.sqrt(vhat) + eps)
    store.zero_grad()


def lr_at_step(initial_lr: float, step: int, total_steps: int,
               final_fraction: float = 0.1) -> float:
    """Exponential decay from initial_lr to final_fraction*initial_lr over
    total_steps."""
    if total_steps <= 1:
        return initial_lr
    frac = min(step / (total_steps - 1), 1.0)
    return initial_lr * final_fraction ** frac


# ---------------------------------------------------------------------------
# Checkpoint format: magic, version, global step, name-sorted parameter table
# (name, shape, float32 data), then Adam state (moments as float32, step).
# ---------------------------------------------------------------------------

CKPT_MAGIC = b"LNVSCKPT"
CKPT_VERSION = 1


def _write_array(f, arr: np.ndarray):
    a = np.ascontiguousarray(arr, dtype="<f4")
    f.write(struct.pack("<B", a.ndim))
    for s in a.shape:
        f.write(struct.pack("<q", s))
    f.write(a.tobytes())


def _read_array(f) -> np.ndarray:
    ndim, = struct.unpack("<B", f.read(1))
    shape = tuple(struct.unpack("<q", f.read(8))[0] for _ in range(ndim))
    count = int(np.prod(shape)) if shape else 1
    return np.frombuffer(f.read(count * 4), dtype="<f4").reshape(shape).astype(np.float64)


def save_checkpoint(path, store: ParamStore, global_step: int = 0):
    names = sorted(store.params)
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<IQI", CKPT_VERSION, global_step, len(names)))
        for name in names:
            nb = name.encode()
            f.write(struct.pack("<H", len(nb)))
            f.write(nb)
            _write_array(f, store.params[name].values)
            _write_array(f, store.moment1[name])
            _write_array(f, store.moment2[name])
        f.write(struct.pack("<Q", store.step_count))


def load_checkpoint(path, store: ParamStore | None = None) -> tuple[ParamStore, int]:
    """Load a checkpoint. With an existing store, names and shapes must match
    exactly; otherwise a fresh store is built from the file."""
    with open(path, "rb") as f:
        if f.read(8) != CKPT_MAGIC:
            raise AutodiffError(f"{path} is not a checkpoint")
        version, global_step, nparams = struct.unpack("<IQI", f.read(16))
        if version != CKPT_VERSION:
            raise AutodiffError(f"unsupported checkpoint version {version}")
        fresh = store is None
        if fresh:
            store = ParamStore()
        seen = []
        for _ in range(nparams):
            nlen, = struct.unpack("<H", f.read(2))
            name = f.read(nlen).decode()
            vals = _read_array(f)
            m1 = _read_array(f)
            m2 = _read_array(f)
            seen.append(name)
            if fresh:
                store.create(name, vals)
            else:
                if name not in store.params:
                    raise AutodiffError(f"checkpoint parameter {name!r} not in model")
                if store.params[name].shape != vals.shape:
                    raise AutodiffError(
                        f"shape mismatch for {name!r}: "
                        f"{store.params[name].shape} vs {vals.shape}")
                store.params[name].values = vals
            store.moment1[name] = m1
            store.moment2[name] = m2
        if not fresh and set(seen) != set(store.params):
            missing = set(store.params) - set(seen)
            raise AutodiffError(f"checkpoint missing parameters {sorted(missing)}")
        store.step_count, = struct.unpack("<Q", f.read(8))
    return store, global_step
