"""Dense float64 arrays with define-by-run reverse-mode differentiation.

Every op records its parents and a closure mapping the output gradient to
parent gradients. ``Tensor.backward`` walks the tape once in reverse
topological order, summing gradients where a node feeds several consumers.
"""

from __future__ import annotations

import hashlib
import math
from collections.abc import Callable, Iterable

import numpy as np

DTYPE = np.float64
EPSILON_NORM = 1e-8


class DimensionError(ValueError):
    pass


class DegenerateEmbeddingError(ValueError):
    pass


class Tensor:
    """A node in the differentiation graph.

    ``sink`` is set on parameter leaves: gradients reaching the leaf are added
    into that array in place, which is how a :class:`ParamStore` collects them.
    """

    __slots__ = ("data", "parents", "backward_fn", "requires_grad", "sink", "op")

    def __init__(self, data, parents=(), backward_fn=None, op="const", sink=None, requires_grad=None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.parents = tuple(parents)
        self.backward_fn = backward_fn
        self.op = op
        self.sink = sink
        if requires_grad is None:
            requires_grad = sink is not None or any(p.requires_grad for p in self.parents)
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def __repr__(self) -> str:
        return f"Tensor(op={self.op}, shape={self.shape})"

    def __add__(self, other: Tensor) -> Tensor:
        return add(self, other)

    def __sub__(self, other: Tensor) -> Tensor:
        return sub(self, other)

    def __mul__(self, other) -> Tensor:
        if isinstance(other, Tensor) and other.data.size != 1:
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other: Tensor) -> Tensor:
        return matmul(self, other)

    def backward(self, grad=None) -> None:
        """Propagate ``grad`` (default 1 for scalars) to every reachable leaf."""
        if grad is None:
            if self.data.size != 1:
                raise DimensionError("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=DTYPE)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.sink is not None:
                node.sink += g
            if node.backward_fn is None:
                continue
            for parent, pg in zip(node.parents, node.backward_fn(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def _topological_order(root: Tensor) -> list[Tensor]:
    # iterative DFS; recursion would overflow on long chains
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _shape_str(*tensors: Tensor) -> str:
    return " and ".join(str(list(t.shape)) for t in tensors)


# ---------------------------------------------------------------- ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: incompatible shapes {_shape_str(a, b)}")
    A, B = a.data, b.data

    def backward(g):
        return (g @ B.T if a.requires_grad else None, A.T @ g if b.requires_grad else None)

    return Tensor(A @ B, (a, b), backward, "matmul")


def elementwise(a: Tensor, b: Tensor, kind: str) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"{kind}: shapes differ, {_shape_str(a, b)}")
    A, B = a.data, b.data
    if kind == "add":
        return Tensor(A + B, (a, b), lambda g: (g, g), "add")
    if kind == "sub":
        return Tensor(A - B, (a, b), lambda g: (g, -g), "sub")
    if kind == "mul":
        return Tensor(A * B, (a, b), lambda g: (g * B, g * A), "mul")
    raise ValueError(f"unknown elementwise kind {kind!r}")


def add(a: Tensor, b: Tensor) -> Tensor:
    return elementwise(a, b, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    return elementwise(a, b, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    return elementwise(a, b, "mul")


def scale(a: Tensor, s) -> Tensor:
    """Scalar times tensor; ``s`` may be a float or a one-element Tensor."""
    if not isinstance(s, Tensor):
        c = float(s)
        return Tensor(a.data * c, (a,), lambda g: (g * c,), "scale")
    if s.data.size != 1:
        raise DimensionError(f"scale: multiplier must be scalar, got shape {list(s.shape)}")
    A, c = a.data, s.data.reshape(())

    def backward(g):
        return g * c, np.reshape(np.sum(g * A), s.shape)

    return Tensor(A * c, (a, s), backward, "scale")


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add a bias row vector to every row of a matrix (explicit, not implicit broadcasting)."""
    if x.data.ndim != 2 or b.data.ndim != 1 or x.shape[1] != b.shape[0]:
        raise DimensionError(f"add_bias: incompatible shapes {_shape_str(x, b)}")
    return Tensor(x.data + b.data, (x, b), lambda g: (g, g.sum(axis=0)), "add_bias")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return Tensor(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise DimensionError(f"transpose: expected a matrix, got shape {list(a.shape)}")
    return Tensor(a.data.T.copy(), (a,), lambda g: (g.T,), "transpose")


def take_rows(a: Tensor, index) -> Tensor:
    """Gather rows by integer index; backward scatter-adds into the source rows."""
    idx = np.asarray(index, dtype=np.int64)
    shape = a.shape

    def backward(g):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return (out,)

    return Tensor(a.data[idx], (a,), backward, "take_rows")


def concat(a: Tensor, b: Tensor, axis: int = -1) -> Tensor:
    """Concatenate along ``axis`` (last by default); backward splits at the seam."""
    if a.data.ndim != b.data.ndim:
        raise DimensionError(f"concat: rank mismatch, {_shape_str(a, b)}")
    ax = axis % a.data.ndim
    for i, (p, q) in enumerate(zip(a.shape, b.shape)):
        if i != ax and p != q:
            raise DimensionError(f"concat: non-concat dimensions differ, {_shape_str(a, b)}")
    split = a.shape[ax]

    def backward(g):
        ga, gb = np.split(g, [split], axis=ax)
        return ga, gb

    return Tensor(np.concatenate([a.data, b.data], axis=ax), (a, b), backward, "concat")


def l2_normalize(a: Tensor, eps: float = EPSILON_NORM) -> Tensor:
    """Scale each row to unit Euclidean norm. Rows with norm below ``eps`` are an error."""
    X = a.data if a.data.ndim == 2 else a.data.reshape(1, -1)
    norms = np.sqrt(np.sum(X * X, axis=1, keepdims=True))
    if np.any(norms < eps):
        bad = int(np.argmin(norms[:, 0]))
        raise DegenerateEmbeddingError(f"l2_normalize: row {bad} has norm {norms[bad, 0]:.3e} < {eps}")
    Y = X / norms

    def backward(g):
        G = g.reshape(Y.shape)
        dX = (G - Y * np.sum(Y * G, axis=1, keepdims=True)) / norms
        return (dX.reshape(a.shape),)

    return Tensor(Y.reshape(a.shape), (a,), backward, "l2_normalize")


def softmax_cross_entropy(scores: Tensor) -> Tensor:
    """Mean over rows of -log softmax(row)[row index] for a square score matrix."""
    S = scores.data
    if S.ndim != 2 or S.shape[0] != S.shape[1] or S.shape[0] < 1:
        raise DimensionError(f"softmax_cross_entropy: need a non-empty N×N matrix, got {list(scores.shape)}")
    n = S.shape[0]
    shifted = S - S.max(axis=1, keepdims=True)
    lse = np.log(np.sum(np.exp(shifted), axis=1))
    diag = np.diagonal(shifted)
    loss = float(np.mean(lse - diag))

    def backward(g):
        p = np.exp(shifted - lse[:, None])
        p[np.diag_indices(n)] -= 1.0
        return (p * (float(g) / n),)

    return Tensor(loss, (scores,), backward, "softmax_ce")


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    return Tensor(np.sum(a.data), (a,), lambda g: (np.full(shape, float(g)),), "sum")


def mean_all(a: Tensor) -> Tensor:
    shape, n = a.shape, a.data.size
    return Tensor(np.mean(a.data), (a,), lambda g: (np.full(shape, float(g) / n),), "mean")


# ---------------------------------------------------------------- parameters


class ParamStore:
    """Named parameter arrays plus same-shaped gradient accumulators.

    Parameters requested through :meth:`param` during a step are marked as
    touched; optimizers update only touched entries, so a parameter that no
    loss term reached is left bit-for-bit unchanged.
    """

    def __init__(self) -> None:
        self.values: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.step_count = 0
        self.slots: dict[str, dict[str, np.ndarray]] = {}
        self.frozen: set[str] = set()
        self._touched: set[str] = set()

    def add(self, name: str, value) -> None:
        if name in self.values:
            raise KeyError(f"duplicate parameter name {name!r}")
        arr = np.array(value, dtype=DTYPE)
        self.values[name] = arr
        self.grads[name] = np.zeros_like(arr)

    def param(self, name: str) -> Tensor:
        self._touched.add(name)
        return Tensor(self.values[name], op=f"param:{name}", sink=self.grads[name])

    def __getitem__(self, name: str) -> np.ndarray:
        return self.values[name]

    def __contains__(self, name: str) -> bool:
        return name in self.values

    def names(self, prefix: str = "") -> list[str]:
        return sorted(n for n in self.values if n.startswith(prefix))

    @property
    def touched(self) -> set[str]:
        return set(self._touched)

    def zero_grad(self) -> None:
        for g in self.grads.values():
            g.fill(0.0)
        self._touched.clear()

    def copy(self) -> ParamStore:
        out = ParamStore()
        for name in self.values:
            out.add(name, self.values[name])
        out.step_count = self.step_count
        return out

    def fingerprint(self, prefix: str = "") -> str:
        h = hashlib.sha256()
        for name in self.names(prefix):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.values[name]).astype("<f8").tobytes())
        return h.hexdigest()


def _update_targets(params: ParamStore) -> list[str]:
    return sorted(n for n in params.touched if n not in params.frozen)


def sgd_step(params: ParamStore, lr: float, momentum: float = 0.0) -> None:
    """In-place (momentum) SGD over touched parameters, then zero gradients."""
    for name in _update_targets(params):
        g = params.grads[name]
        if momentum:
            slot = params.slots.setdefault(name, {})
            v = slot.get("velocity")
            v = g.copy() if v is None else momentum * v + g
            slot["velocity"] = v
            params.values[name] -= lr * v
        else:
            params.values[name] -= lr * g
    params.step_count += 1
    params.zero_grad()


def adam_step(params: ParamStore, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """In-place Adam with per-parameter bias correction, then zero gradients."""
    for name in _update_targets(params):
        g = params.grads[name]
        slot = params.slots.setdefault(name, {"m": np.zeros_like(g), "v": np.zeros_like(g), "t": np.zeros(())})
        slot["t"] += 1
        t = float(slot["t"])
        slot["m"] = beta1 * slot["m"] + (1 - beta1) * g
        slot["v"] = beta2 * slot["v"] + (1 - beta2) * g * g
        m_hat = slot["m"] / (1 - beta1**t)
        v_hat = slot["v"] / (1 - beta2**t)
        params.values[name] -= lr * m_hat / (np.sqrt(v_hat) + eps)
    params.step_count += 1
    params.zero_grad()


def relative_error(analytic: float, numeric: float, floor: float = 1e-10) -> float:
    denom = max(abs(analytic), abs(numeric))
    if denom < floor:
        return 0.0
    return abs(analytic - numeric) / denom


def finite_diff_check(
    f: Callable[[ParamStore], Tensor],
    params: ParamStore,
    probes: int = 20,
    h: float = 1e-6,
    rng: np.random.Generator | None = None,
    names: Iterable[str] | None = None,
) -> float:
    """Worst relative error between backprop and central differences.

    ``probes`` coordinates are drawn by first picking a parameter name
    uniformly, then a flat index within it. Parameter values are restored
    exactly after each probe.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    pool = sorted(names) if names is not None else params.names()
    params.zero_grad()
    f(params).backward()
    analytic = {n: params.grads[n].copy() for n in pool}
    params.zero_grad()

    worst = 0.0
    for _ in range(probes):
        name = pool[int(rng.integers(len(pool)))]
        flat = params.values[name].reshape(-1)
        idx = int(rng.integers(flat.size))
        orig = flat[idx]
        flat[idx] = orig + h
        up = f(params).item()
        flat[idx] = orig - h
        down = f(params).item()
        flat[idx] = orig
        numeric = (up - down) / (2 * h)
        err = relative_error(float(analytic[name].reshape(-1)[idx]), numeric)
        if not math.isfinite(err):
            return math.inf
        worst = max(worst, err)
    params.zero_grad()
    return worst
