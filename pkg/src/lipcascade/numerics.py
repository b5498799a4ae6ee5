"""Dense float64 tensors with reverse-mode automatic differentiation.

The graph is recorded eagerly: each operation returns a Tensor that
remembers its parents and a closure mapping the output gradient to
per-parent contributions. `backward` replays the graph once in reverse
topological order (iteratively, so graph depth is not limited by the
Python recursion limit).

Everything is 64-bit so finite-difference verification is meaningful.
Broadcasting is restricted to scalar-tensor and row-bias addition; any
other shape mismatch raises ShapeError. A graph and its tensors belong
to one thread; independent graphs may run on independent threads.
"""

from __future__ import annotations

import contextvars
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import NumericError, ShapeError

_grad_enabled: contextvars.ContextVar[bool] = contextvars.ContextVar(
    "grad_enabled", default=True
)


class no_grad:
    """Context manager that suspends graph recording (decoding, evaluation)."""

    def __enter__(self) -> "no_grad":
        self._token = _grad_enabled.set(False)
        return self

    def __exit__(self, *exc) -> bool:
        _grad_enabled.reset(self._token)
        return False


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __add__(self, other) -> "Tensor":
        return add(self, other)

    def __mul__(self, other) -> "Tensor":
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return add(self, scale(other, -1.0))


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad)


def from_op(data: np.ndarray, parents: Sequence[Tensor], vjp: Callable) -> Tensor:
    """Wrap an op result, recording the graph edge when grads are live.

    `vjp(g)` must return one gradient contribution (ndarray or None) per
    parent, each exactly the parent's shape. Composite modules (fused GRU
    cell, convolution stacks) register their own ops through this hook.
    """
    out = Tensor(data)
    if _grad_enabled.get() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._vjp = vjp
    return out


def backward(root: Tensor) -> None:
    """Accumulate gradients of `root` into every reachable requires_grad tensor.

    Calling twice without zero_grad adds the gradients a second time.
    """
    if root.data.size != 1:
        raise ShapeError(f"backward requires a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        return
    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, children_done = stack.pop()
        if children_done:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    flowing: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for node in reversed(topo):
        g = flowing.pop(id(node), None)
        if g is None:
            continue
        node.grad = g.copy() if node.grad is None else node.grad + g
        if node._vjp is None:
            continue
        for parent, contrib in zip(node._parents, node._vjp(g)):
            if contrib is None or not parent.requires_grad:
                continue
            prev = flowing.get(id(parent))
            flowing[id(parent)] = contrib if prev is None else prev + contrib


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


# ---------------------------------------------------------------- operations


def matmul(a: Tensor, b: Tensor) -> Tensor:
    ad, bd = a.data, b.data
    if ad.ndim not in (1, 2) or bd.ndim not in (1, 2):
        raise ShapeError(f"matmul needs 1-D/2-D operands, got {ad.shape} and {bd.shape}")
    if ad.shape[-1] != bd.shape[0]:
        raise ShapeError(f"matmul inner dimensions disagree: {ad.shape} vs {bd.shape}")
    na, nb = a.requires_grad, b.requires_grad

    def vjp(g):
        ga = gb = None
        if na:
            if bd.ndim == 2:
                ga = g @ bd.T
            elif ad.ndim == 2:  # (m,k) @ (k,) -> (m,)
                ga = np.outer(g, bd)
            else:  # (k,) @ (k,) -> ()
                ga = g * bd
        if nb:
            if ad.ndim == 2:
                gb = ad.T @ g
            elif bd.ndim == 2:  # (k,) @ (k,n) -> (n,)
                gb = np.outer(ad, g)
            else:
                gb = g * ad
        return ga, gb

    return from_op(ad @ bd, (a, b), vjp)


def add(a: Tensor, b) -> Tensor:
    if isinstance(b, (int, float)):
        c = float(b)
        return from_op(a.data + c, (a,), lambda g: (g,))
    ad, bd = a.data, b.data
    if ad.shape == bd.shape:
        return from_op(ad + bd, (a, b), lambda g: (g, g))
    if bd.size == 1 and bd.ndim <= ad.ndim:  # scalar tensor
        return from_op(
            ad + bd.reshape(()),
            (a, b),
            lambda g: (g, np.asarray(g.sum()).reshape(bd.shape)),
        )
    if ad.size == 1 and ad.ndim <= bd.ndim:
        return from_op(
            ad.reshape(()) + bd,
            (a, b),
            lambda g: (np.asarray(g.sum()).reshape(ad.shape), g),
        )
    if ad.ndim == 2 and bd.ndim == 1 and ad.shape[1] == bd.shape[0]:  # row bias
        return from_op(ad + bd, (a, b), lambda g: (g, g.sum(axis=0)))
    raise ShapeError(f"add cannot combine shapes {ad.shape} and {bd.shape}")


def mul(a: Tensor, b: Tensor) -> Tensor:
    ad, bd = a.data, b.data
    if ad.shape != bd.shape:
        raise ShapeError(f"mul needs equal shapes, got {ad.shape} and {bd.shape}")
    return from_op(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    return from_op(a.data * s, (a,), lambda g: (g * s,))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    s = _sigmoid(a.data)
    return from_op(s, (a,), lambda g: (g * s * (1.0 - s),))


def tanh(a: Tensor) -> Tensor:
    t = np.tanh(a.data)
    return from_op(t, (a,), lambda g: (g * (1.0 - t * t),))


def pointwise(kind: str, *operands) -> Tensor:
    """Dispatch on kind in {sigmoid, tanh, add, mul, scale}."""
    table = {"sigmoid": sigmoid, "tanh": tanh, "add": add, "mul": mul, "scale": scale}
    if kind not in table:
        raise ValueError(f"unknown pointwise kind {kind!r}")
    return table[kind](*operands)


def softmax(a: Tensor) -> Tensor:
    """Softmax along the last axis, computed with max subtraction."""
    x = a.data
    if x.shape[-1] < 1:
        raise ShapeError("softmax needs at least one element on the last axis")
    if not np.isfinite(x).all():
        raise NumericError("softmax input contains non-finite values")
    m = x.max(axis=-1, keepdims=True)
    e = np.exp(x - m)
    s = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        return ((g - (g * s).sum(axis=-1, keepdims=True)) * s,)

    return from_op(s, (a,), vjp)


def log_softmax(a: Tensor) -> Tensor:
    x = a.data
    if not np.isfinite(x).all():
        raise NumericError("log_softmax input contains non-finite values")
    m = x.max(axis=-1, keepdims=True)
    e = np.exp(x - m)
    z = e.sum(axis=-1, keepdims=True)
    out = x - m - np.log(z)
    s = e / z

    def vjp(g):
        return (g - s * g.sum(axis=-1, keepdims=True),)

    return from_op(out, (a,), vjp)


def _check_ids(ids, limit: int) -> np.ndarray:
    arr = np.asarray(list(ids), dtype=np.int64)
    if arr.size and (arr.min() < 0 or arr.max() >= limit):
        bad = int(arr[(arr < 0) | (arr >= limit)][0])
        raise IndexError(f"id {bad} out of range for table with {limit} rows")
    return arr


def gather_rows(table: Tensor, ids) -> Tensor:
    """Select rows of a [V x d] table; gradients scatter-add back."""
    td = table.data
    if td.ndim != 2:
        raise ShapeError(f"gather_rows needs a 2-D table, got {td.shape}")
    arr = _check_ids(ids, td.shape[0])
    out = td[arr] if arr.size else np.zeros((0, td.shape[1]))

    def vjp(g):
        gt = np.zeros_like(td)
        if arr.size:
            np.add.at(gt, arr, g)
        return (gt,)

    return from_op(out, (table,), vjp)


def stack_rows(rows: Sequence[Tensor]) -> Tensor:
    if not rows:
        raise ShapeError("stack_rows needs at least one row")
    out = np.stack([r.data for r in rows])

    def vjp(g):
        return tuple(g[i] for i in range(len(rows)))

    return from_op(out, tuple(rows), vjp)


def concat(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate 1-D tensors."""
    sizes = [p.data.shape[0] for p in parts]
    out = np.concatenate([p.data for p in parts])
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        return tuple(g[offsets[i] : offsets[i + 1]] for i in range(len(parts)))

    return from_op(out, tuple(parts), vjp)


def reshape(a: Tensor, shape) -> Tensor:
    orig = a.data.shape
    return from_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(orig),))


def sum_all(a: Tensor) -> Tensor:
    shp = a.data.shape
    return from_op(
        np.asarray(a.data.sum()), (a,), lambda g: (np.full(shp, float(g)),)
    )


def nll_loss(log_probs: Tensor, targets, pad_id: int | None = None) -> Tensor:
    """Sum of negative target log-probabilities, pad positions excluded."""
    lp = log_probs.data
    if lp.ndim != 2:
        raise ShapeError(f"nll_loss needs [L x V] log-probs, got {lp.shape}")
    arr = _check_ids(targets, lp.shape[1])
    if arr.shape[0] != lp.shape[0]:
        raise ShapeError(
            f"nll_loss got {lp.shape[0]} rows of log-probs for {arr.shape[0]} targets"
        )
    keep = np.ones(arr.shape[0], dtype=bool)
    if pad_id is not None:
        keep = arr != pad_id
    rows = np.nonzero(keep)[0]
    out = np.asarray(-lp[rows, arr[rows]].sum()) if rows.size else np.asarray(0.0)

    def vjp(g):
        gl = np.zeros_like(lp)
        if rows.size:
            gl[rows, arr[rows]] = -float(g)
        return (gl,)

    return from_op(out, (log_probs,), vjp)


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor) -> Tensor:
    """Valid cross-correlation: [Cin,H,W] * [Cout,Cin,kh,kw] + [Cout]."""
    xd, kd, bd = x.data, kernel.data, bias.data
    if xd.ndim != 3 or kd.ndim != 4 or bd.ndim != 1:
        raise ShapeError(
            f"conv2d needs ([Cin,H,W], [Cout,Cin,kh,kw], [Cout]), got "
            f"{xd.shape}, {kd.shape}, {bd.shape}"
        )
    cout, cin, kh, kw = kd.shape
    if cin != xd.shape[0] or bd.shape[0] != cout:
        raise ShapeError(f"conv2d channel mismatch: {xd.shape} vs {kd.shape}")
    if kh > xd.shape[1] or kw > xd.shape[2]:
        raise ShapeError(f"conv2d kernel {kd.shape} larger than input {xd.shape}")
    win = np.lib.stride_tricks.sliding_window_view(xd, (kh, kw), axis=(1, 2))
    out = np.einsum("cijhw,ochw->oij", win, kd, optimize=True) + bd[:, None, None]
    oh, ow = out.shape[1], out.shape[2]
    nx, nk = x.requires_grad, kernel.requires_grad

    def vjp(g):
        gx = gk = None
        if nk:
            gk = np.einsum("oij,cijhw->ochw", g, win, optimize=True)
        if nx:
            gx = np.zeros_like(xd)
            for h in range(kh):
                for w in range(kw):
                    gx[:, h : h + oh, w : w + ow] += np.einsum(
                        "oij,oc->cij", g, kd[:, :, h, w]
                    )
        return gx, gk, g.sum(axis=(1, 2))

    return from_op(out, (x, kernel, bias), vjp)


def mean_spatial(x: Tensor) -> Tensor:
    """Global average pooling: [C,H,W] -> [C]."""
    xd = x.data
    if xd.ndim != 3:
        raise ShapeError(f"mean_spatial needs [C,H,W], got {xd.shape}")
    n = xd.shape[1] * xd.shape[2]

    def vjp(g):
        return (np.broadcast_to(g[:, None, None] / n, xd.shape).copy(),)

    return from_op(xd.mean(axis=(1, 2)), (x,), vjp)


# ------------------------------------------------------------- grad checking


@dataclass
class GradCheckReport:
    eps: float
    tol: float
    per_param: dict[str, float] = field(default_factory=dict)

    @property
    def max_rel_error(self) -> float:
        return max(self.per_param.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return all(e <= self.tol for e in self.per_param.values())


def grad_check(
    loss_fn: Callable[[], Tensor],
    params,
    eps: float = 1e-5,
    tol: float = 1e-4,
    max_coords: int = 64,
    seed: int = 0,
) -> GradCheckReport:
    """Compare autodiff gradients against central differences.

    `loss_fn` must be a deterministic scalar function of `params`
    (a name -> Tensor mapping or (name, Tensor) pairs). At most
    `max_coords` coordinates per tensor are checked, chosen
    deterministically from `seed`.
    """
    named = list(params.items()) if isinstance(params, dict) else list(params)
    for _, p in named:
        p.grad = None
    loss = loss_fn()
    if loss.data.size != 1:
        raise ShapeError(f"grad_check loss must be scalar, got {loss.shape}")
    if not np.isfinite(loss.data).all():
        raise NumericError("grad_check loss is not finite")
    backward(loss)
    analytic = {
        name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
        for name, p in named
    }
    report = GradCheckReport(eps=eps, tol=tol)
    with no_grad():
        for idx, (name, p) in enumerate(named):
            flat = p.data.reshape(-1)
            n = flat.shape[0]
            if n == 0:
                report.per_param[name] = 0.0
                continue
            rng = np.random.default_rng(np.random.SeedSequence([seed, idx]))
            coords = (
                np.arange(n) if n <= max_coords
                else rng.choice(n, size=max_coords, replace=False)
            )
            aflat = analytic[name].reshape(-1)
            worst = 0.0
            for c in coords:
                orig = flat[c]
                flat[c] = orig + eps
                f_plus = float(loss_fn().data)
                flat[c] = orig - eps
                f_minus = float(loss_fn().data)
                flat[c] = orig
                if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                    raise NumericError(f"non-finite loss while perturbing {name}")
                numeric = (f_plus - f_minus) / (2.0 * eps)
                a = aflat[c]
                rel = abs(a - numeric) / max(1e-8, abs(a) + abs(numeric))
                worst = max(worst, rel)
            report.per_param[name] = worst
    return report
