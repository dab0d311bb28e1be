"""Small dense reverse-mode autodiff over float64 numpy arrays.

Only the primitives the two-head network and its losses need are provided.
Image-like tensors use NHWC layout.
"""
from __future__ import annotations

import contextlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


_grad_enabled = True
_kink_log: list | None = None


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording the graph."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextlib.contextmanager
def record_kinks():
    """Collect the activation pattern (ReLU signs, max-pool winners) of every
    forward evaluated inside the block. Used by gradient checks to drop
    coordinates whose finite-difference stencil straddles a kink."""
    global _kink_log
    prev = _kink_log
    _kink_log = []
    try:
        yield _kink_log
    finally:
        _kink_log = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.op = "leaf"
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def backward(self) -> None:
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(op: str, data: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite value produced by {op}")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    out.name = None
    needs = _grad_enabled and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    return out


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# elementwise -----------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if b.data.ndim == 0 or a.data.ndim == 0:
        sa, sb = a.data.ndim == 0, b.data.ndim == 0

        def back(g):
            return (g.sum() if sa else g, g.sum() if sb else g)
        return _result("add", a.data + b.data, (a, b), back)
    _same_shape("add", a, b)
    return _result("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if b.data.ndim == 0 or a.data.ndim == 0:
        sa, sb = a.data.ndim == 0, b.data.ndim == 0

        def back(g):
            return (g.sum() if sa else g, -(g.sum() if sb else g))
        return _result("sub", a.data - b.data, (a, b), back)
    _same_shape("sub", a, b)
    return _result("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if b.data.ndim == 0 or a.data.ndim == 0:
        sa, sb = a.data.ndim == 0, b.data.ndim == 0
        ad, bd = a.data, b.data

        def back(g):
            ga, gb = g * bd, g * ad
            return (ga.sum() if sa else ga, gb.sum() if sb else gb)
        return _result("mul", a.data * b.data, (a, b), back)
    _same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _result("mul", ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _result("scale", a.data * c, (a,), lambda g: (g * c,))


def relu(a: Tensor) -> Tensor:
    x = a.data
    if _kink_log is not None:
        _kink_log.append(np.packbits(x > 0).tobytes())
    pos = x > 0
    return _result("relu", np.where(pos, x, 0.0), (a,), lambda g: (g * pos,))


def sigmoid(a: Tensor) -> Tensor:
    s = _sigmoid(a.data)
    return _result("sigmoid", s, (a,), lambda g: (g * s * (1.0 - s),))


def exp(a: Tensor) -> Tensor:
    e = np.exp(a.data)
    return _result("exp", e, (a,), lambda g: (g * e,))


def log(a: Tensor) -> Tensor:
    x = a.data
    if np.any(x <= 0):
        raise NonFiniteError("log of non-positive value")
    return _result("log", np.log(x), (a,), lambda g: (g / x,))


def square(a: Tensor) -> Tensor:
    x = a.data
    return _result("square", x * x, (a,), lambda g: (2.0 * g * x,))


def smooth_l1(a: Tensor, beta: float = 1.0) -> Tensor:
    """Elementwise Huber-style smooth L1 of ``a``."""
    x = a.data
    ax = np.abs(x)
    small = ax < beta
    out = np.where(small, 0.5 * x * x / beta, ax - 0.5 * beta)
    return _result("smooth_l1", out, (a,), lambda g: (g * np.where(small, x / beta, np.sign(x)),))


def bce_with_logits(z: Tensor, target: np.ndarray) -> Tensor:
    """Elementwise binary cross-entropy on logits, stable form."""
    x = z.data
    y = np.asarray(target, dtype=np.float64)
    if y.shape != x.shape:
        raise ShapeError(f"bce_with_logits: shape mismatch {x.shape} vs {y.shape}")
    out = np.maximum(x, 0.0) - x * y + np.log1p(np.exp(-np.abs(x)))
    return _result("bce_with_logits", out, (z,), lambda g: (g * (_sigmoid(x) - y),))


def stop_gradient(a: Tensor) -> Tensor:
    """Identity forward; contributes nothing backward."""
    out = _result("stop_gradient", a.data, (a,), lambda g: (None,))
    return out


# reductions and reshaping ---------------------------------------------------

def sum(a: Tensor) -> Tensor:  # noqa: A001
    shape = a.shape
    return _result("sum", np.asarray(a.data.sum()), (a,), lambda g: (np.full(shape, float(g)),))


def mean(a: Tensor) -> Tensor:
    shape, n = a.shape, a.size
    return _result("mean", np.asarray(a.data.mean()), (a,), lambda g: (np.full(shape, float(g) / n),))


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _result("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)
    return _result("transpose", np.ascontiguousarray(a.data.transpose(axes)), (a,),
                   lambda g: (g.transpose(inv),))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    """Concatenate along ``axis`` (channels last by default)."""
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(s != r for i, (s, r) in enumerate(zip(t.shape, ref)) if i != ax):
            raise ShapeError(f"concat: incompatible shapes {ref} vs {t.shape} on axis {axis}")
    splits = np.cumsum([t.shape[ax] for t in tensors])[:-1]
    return _result("concat", np.concatenate([t.data for t in tensors], axis=ax), tensors,
                   lambda g: tuple(np.split(g, splits, axis=ax)))


# linear algebra / spatial ----------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    return _result("matmul", ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def _im2col3(x: np.ndarray) -> np.ndarray:
    n, h, w, c = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    win = sliding_window_view(xp, (3, 3), axis=(1, 2))  # n, h, w, c, 3, 3
    return win.transpose(0, 1, 2, 4, 5, 3).reshape(n * h * w, 9 * c)


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """3x3 convolution, stride 1, zero padding 1.

    x: (N, H, W, Cin); w: (3, 3, Cin, Cout); b: (Cout,) or None.
    """
    if x.data.ndim != 4 or w.data.ndim != 4 or w.shape[:2] != (3, 3) or w.shape[2] != x.shape[3]:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with kernel {w.shape}")
    if b is not None and b.shape != (w.shape[3],):
        raise ShapeError(f"conv2d: bias {b.shape} does not match {w.shape[3]} output channels")
    n, h, wd, cin = x.shape
    cout = w.shape[3]
    cols = _im2col3(x.data)
    wmat = w.data.reshape(9 * cin, cout)
    out = cols @ wmat
    if b is not None:
        out += b.data
    out = out.reshape(n, h, wd, cout)
    need_x = x.requires_grad

    def back(g):
        g2 = g.reshape(-1, cout)
        gw = (cols.T @ g2).reshape(w.shape)
        gx = None
        if need_x:
            # full correlation with the flipped kernel
            wflip = w.data[::-1, ::-1].transpose(0, 1, 3, 2).reshape(9 * cout, cin)
            gx = (_im2col3(g) @ wflip).reshape(n, h, wd, cin)
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    parents = (x, w) if b is None else (x, w, b)
    return _result("conv2d", out, parents, back)


def maxpool2(x: Tensor) -> Tensor:
    """2x2 max pool, stride 2. Ties go to the first element in scan order."""
    n, h, w, c = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2: spatial size {h}x{w} not divisible by 2")
    blocks = x.data.reshape(n, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 5, 2, 4).reshape(n, h // 2, w // 2, c, 4)
    idx = blocks.argmax(axis=-1)
    if _kink_log is not None:
        _kink_log.append(idx.astype(np.uint8).tobytes())
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    def back(g):
        gb = np.zeros_like(blocks)
        np.put_along_axis(gb, idx[..., None], g[..., None], axis=-1)
        return (gb.reshape(n, h // 2, w // 2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(n, h, w, c),)

    return _result("maxpool2", out, (x,), back)


def upsample2(x: Tensor) -> Tensor:
    """Nearest-neighbour x2 upsampling of an NHWC tensor."""
    n, h, w, c = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=1), 2, axis=2)

    def back(g):
        return (g.reshape(n, h, 2, w, 2, c).sum(axis=(2, 4)),)

    return _result("upsample2", out, (x,), back)


def spatial_softmax(x: Tensor) -> Tensor:
    """Softmax over the H*W positions of each channel of an (N, H, W, C) tensor."""
    if x.data.ndim != 4:
        raise ShapeError(f"spatial_softmax expects NHWC, got {x.shape}")
    z = x.data - x.data.max(axis=(1, 2), keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=(1, 2), keepdims=True)

    def back(g):
        return (s * (g - (g * s).sum(axis=(1, 2), keepdims=True)),)

    return _result("spatial_softmax", s, (x,), back)


PRIMITIVES = {
    "add": add, "sub": sub, "mul": mul, "scale": scale, "matmul": matmul,
    "conv2d": conv2d, "upsample2": upsample2, "maxpool2": maxpool2,
    "relu": relu, "sigmoid": sigmoid, "exp": exp, "log": log,
    "sum": sum, "mean": mean, "concat": concat, "spatial_softmax": spatial_softmax,
    "stop_gradient": stop_gradient, "square": square, "smooth_l1": smooth_l1,
    "bce_with_logits": bce_with_logits, "reshape": reshape, "transpose": transpose,
}


def primitive_set() -> dict[str, Callable]:
    return dict(PRIMITIVES)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# backward -------------------------------------------------------------------

def _topo(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every requires_grad leaf
    reachable from ``loss``. Leaves reached only through stop_gradient get zeros."""
    if loss.data.ndim != 0 and loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = _topo(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if node._backward is None:
            if node.requires_grad:
                if g is None:
                    g = np.zeros_like(node.data)
                node.grad = g if node.grad is None else node.grad + g
            continue
        if g is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            pg = np.asarray(pg, dtype=np.float64)
            if pg.shape != parent.shape:
                pg = pg.reshape(parent.shape)
            prev = grads.get(id(parent))
            grads[id(parent)] = pg if prev is None else prev + pg


def grad(loss_fn: Callable[[dict[str, Tensor]], Tensor], params: dict[str, np.ndarray]) -> tuple[float, dict[str, np.ndarray]]:
    """Evaluate ``loss_fn`` on fresh leaves built from ``params``; return (loss, grads)."""
    leaves = {k: Tensor(v, requires_grad=True, name=k) for k, v in params.items()}
    loss = loss_fn(leaves)
    backward(loss)
    grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in leaves.items()}
    return float(loss.data), grads


# finite differences ------------------------------------------------------------

def finite_diff_grad(f: Callable[[dict[str, np.ndarray]], float], params: dict[str, np.ndarray],
                     step: float = 1e-5, coords: dict[str, Iterable[int]] | None = None) -> dict[str, np.ndarray]:
    """Central-difference gradient estimate.

    ``coords`` optionally restricts each block to a set of flat indices; the
    other entries of the returned arrays are NaN.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    out = {}
    for name, value in params.items():
        base = np.array(value, dtype=np.float64)
        est = np.full(base.shape, np.nan) if coords is not None else np.zeros(base.shape)
        idxs = range(base.size) if coords is None else coords.get(name, ())
        flat = base.reshape(-1)
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + step
            fp = f({**params, name: base})
            flat[i] = orig - step
            fm = f({**params, name: base})
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NonFiniteError(f"non-finite objective while probing {name}[{i}]")
            est.reshape(-1)[i] = (fp - fm) / (2.0 * step)
        out[name] = est
    return out


def kink_signature(f: Callable[[dict[str, np.ndarray]], float], params: dict[str, np.ndarray]) -> bytes:
    with no_grad(), record_kinks() as log_:
        f(params)
    return b"".join(log_)


@dataclass
class GradCheckResult:
    name: str
    max_rel_error: float
    n_checked: int
    n_skipped: int

    @property
    def passed(self) -> bool:
        return self.max_rel_error < 1e-4


def check_gradients(loss_fn: Callable[[dict[str, Tensor]], Tensor], params: dict[str, np.ndarray],
                    step: float = 1e-5, max_coords: int | None = None, rng: np.random.Generator | None = None,
                    floor: float = 1e-8, name: str = "") -> GradCheckResult:
    """Compare backward() against central differences.

    Coordinates whose +/- probe changes the ReLU/max-pool activation pattern
    are skipped. ``floor`` guards the relative error against tiny gradients.
    """
    _, analytic = grad(loss_fn, params)

    def f(p):
        with no_grad():
            return float(loss_fn({k: Tensor(v) for k, v in p.items()}).data)

    coords = {}
    for k, v in params.items():
        if max_coords is None or v.size <= max_coords:
            coords[k] = list(range(v.size))
        else:
            rng = rng or np.random.default_rng(0)
            coords[k] = sorted(rng.choice(v.size, size=max_coords, replace=False).tolist())
    worst, checked, skipped = 0.0, 0, 0
    for k, idxs in coords.items():
        base = np.array(params[k], dtype=np.float64)
        flat = base.reshape(-1)
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + step
            sp = kink_signature(f, {**params, k: base})
            fp = f({**params, k: base})
            flat[i] = orig - step
            sm = kink_signature(f, {**params, k: base})
            fm = f({**params, k: base})
            flat[i] = orig
            if sp != sm:
                skipped += 1
                continue
            num = (fp - fm) / (2.0 * step)
            a = analytic[k].reshape(-1)[i]
            rel = abs(a - num) / max(abs(a), abs(num), floor)
            worst = max(worst, rel)
            checked += 1
    return GradCheckResult(name, worst, checked, skipped)


# Adam ----------------------------------------------------------------------------

@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def copy(self) -> "AdamState":
        return AdamState(self.beta1, self.beta2, self.eps, self.step_count,
                         {k: a.copy() for k, a in self.m.items()}, {k: a.copy() for k, a in self.v.items()})


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState, lr: float,
              frozen: Iterable[str] = ()) -> tuple[dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update. Returns new params; ``state`` is advanced in place.

    Blocks named in ``frozen`` (or missing from ``grads``) keep their values and moments.
    """
    for k, g in grads.items():
        if k in params and g.shape != params[k].shape:
            raise ShapeError(f"adam_step: gradient for {k} has shape {g.shape}, parameter {params[k].shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"adam_step: non-finite gradient in parameter block {k!r}")
    frozen = set(frozen)
    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    new = {}
    for k, p in params.items():
        g = grads.get(k)
        if g is None or k in frozen:
            new[k] = p
            continue
        m = state.m.get(k)
        v = state.v.get(k)
        if m is None:
            m = np.zeros_like(p)
            v = np.zeros_like(p)
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * (g * g)
        state.m[k], state.v[k] = m, v
        new[k] = p - lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return new, state


# checkpoint container ---------------------------------------------------------------

_MAGIC = b"HADCKPT1"


def save_checkpoint(path: str | Path, params: dict[str, np.ndarray], meta: dict | None = None) -> None:
    """Write ``MAGIC | u64 header length | JSON header | float64 LE payloads``."""
    entries, offset = [], 0
    for k in sorted(params):
        a = np.asarray(params[k], dtype="<f8")
        entries.append({"name": k, "shape": list(a.shape), "offset": offset, "nbytes": a.nbytes})
        offset += a.nbytes
    header = json.dumps({"tensors": entries, "meta": meta or {}}, sort_keys=True).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for k in sorted(params):
            fh.write(np.ascontiguousarray(params[k], dtype="<f8").tobytes())


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    if raw[:8] != _MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16:16 + hlen])
    base = 16 + hlen
    params = {}
    for e in header["tensors"]:
        start = base + e["offset"]
        buf = raw[start:start + e["nbytes"]]
        params[e["name"]] = np.frombuffer(buf, dtype="<f8").astype(np.float64).reshape(e["shape"])
    return params, header["meta"]
