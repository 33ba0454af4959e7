"""Reverse-mode autodiff over numpy arrays, plus the numeric ops used by the losses.

The engine is deliberately small: a ``Tensor`` wraps a float64 ndarray and
remembers how it was produced; ``Tensor.backward`` walks the tape in reverse
topological order. Loss-level operations (tempered softmax, cross-entropy,
KL, BCE) are fused primitives with hand-written adjoints so their forward
passes can be numerically stabilized and clamped without breaking the
gradient. Every public op also accepts plain arrays, in which case it
returns plain numbers/arrays instead of graph nodes.

All computation is double precision. Finite-difference verification lives in
``grad_check`` and is the independent oracle for every adjoint in here.
"""

from __future__ import annotations

from typing import Callable, Iterable, Iterator

import numpy as np

from .errors import (
    ConfigError,
    DegenerateInputError,
    DomainError,
    ShapeError,
    TrainingDivergedError,
)

# Numerical guards: clamp inside logs, smallest norm treated as nonzero.
EPS_LOG = 1e-7
EPS_NORM = 1e-12


class Tensor:
    """Node in a dynamically built computation graph.

    Leaves created with ``requires_grad=True`` own a persistent gradient
    accumulator (``grad``); interior nodes receive adjoints only transiently
    during ``backward``.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], list[tuple["Tensor", np.ndarray]]] | None = None

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``grad``.

        Only defined for scalar outputs (losses).
        """
        if self.data.shape != ():
            raise ShapeError("backward() requires a scalar tensor")
        order = self._toposort()
        adjoint: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = adjoint.pop(id(node), None)
            if g is None:
                continue
            if node._backward is not None:
                for parent, pg in node._backward(g):
                    if not parent.requires_grad:
                        continue
                    key = id(parent)
                    if key in adjoint:
                        adjoint[key] = adjoint[key] + pg
                    else:
                        adjoint[key] = pg
            elif node.grad is not None:
                node.grad += g

    def _toposort(self) -> list["Tensor"]:
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                stack.append((parent, False))
        return order

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _sum_to_shape(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcasted gradient back to the original operand shape."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# Elementwise / linear-algebra primitives
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    data = a.data + b.data

    def backward(g):
        return [(a, _sum_to_shape(g, a.data.shape)), (b, _sum_to_shape(g, b.data.shape))]

    return _node(data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    data = a.data * b.data

    def backward(g):
        return [
            (a, _sum_to_shape(g * b.data, a.data.shape)),
            (b, _sum_to_shape(g * a.data, b.data.shape)),
        ]

    return _node(data, (a, b), backward)


def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.data.ndim == 0 or b.data.ndim == 0:
        raise ShapeError("matmul operands must be at least 1-d")
    data = a.data @ b.data

    def backward(g):
        ad, bd = a.data, b.data
        if ad.ndim == 1 and bd.ndim == 1:        # dot product -> scalar
            ga, gb = g * bd, g * ad
        elif ad.ndim == 2 and bd.ndim == 1:      # (m,n)@(n,) -> (m,)
            ga, gb = np.outer(g, bd), ad.T @ g
        elif ad.ndim == 1 and bd.ndim == 2:      # (n,)@(n,p) -> (p,)
            ga, gb = bd @ g, np.outer(ad, g)
        else:                                    # (m,n)@(n,p) -> (m,p)
            ga, gb = g @ bd.T, ad.T @ g
        return [(a, ga), (b, gb)]

    return _node(data, (a, b), backward)


def transpose(a) -> Tensor:
    a = _wrap(a)

    def backward(g):
        return [(a, g.T)]

    return _node(a.data.T, (a,), backward)


def reshape(a, shape) -> Tensor:
    a = _wrap(a)
    data = a.data.reshape(shape)

    def backward(g):
        return [(a, g.reshape(a.data.shape))]

    return _node(data, (a,), backward)


def relu(a) -> Tensor:
    a = _wrap(a)
    mask = a.data > 0
    data = np.where(mask, a.data, 0.0)

    def backward(g):
        return [(a, g * mask)]

    return _node(data, (a,), backward)


def _sigmoid_raw(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(x):
    """Logistic function; graph-aware for Tensor input."""
    if isinstance(x, Tensor):
        data = _sigmoid_raw(np.asarray(x.data, dtype=np.float64))

        def backward(g):
            return [(x, g * data * (1.0 - data))]

        return _node(data, (x,), backward)
    return _sigmoid_raw(np.asarray(x, dtype=np.float64))


# ---------------------------------------------------------------------------
# Fused probabilistic ops
# ---------------------------------------------------------------------------

def _check_temperature(tau_d) -> float:
    tau = float(tau_d)
    if not np.isfinite(tau) or tau <= 0:
        raise ConfigError(f"temperature must be a positive real, got {tau_d!r}")
    return tau


def _check_logits(z: np.ndarray) -> None:
    if z.ndim != 1 or z.size == 0:
        raise ShapeError(f"logits must be a non-empty vector, got shape {z.shape}")
    if not np.all(np.isfinite(z)):
        raise DomainError("logits contain non-finite entries")


def _softmax_raw(z: np.ndarray, tau: float) -> np.ndarray:
    s = z / tau
    s = s - s.max()
    e = np.exp(s)
    return e / e.sum()


def softmax_temp(z, tau_d):
    """Tempered softmax: exp(z/tau) normalized to a distribution.

    Stabilized by max-subtraction, so it is exactly invariant to adding a
    constant to all logits.
    """
    tau = _check_temperature(tau_d)
    if isinstance(z, Tensor):
        _check_logits(z.data)
        p = _softmax_raw(z.data, tau)

        def backward(g):
            return [(z, p * (g - float(g @ p)) / tau)]

        return _node(p, (z,), backward)
    z = np.asarray(z, dtype=np.float64)
    _check_logits(z)
    return _softmax_raw(z, tau)


def _check_distribution(p: np.ndarray, name: str) -> None:
    if p.ndim != 1 or p.size == 0:
        raise ShapeError(f"{name} must be a non-empty vector, got shape {p.shape}")
    if np.any(p < 0):
        raise DomainError(f"{name} has negative entries")
    if abs(float(p.sum()) - 1.0) > 1e-6:
        raise DomainError(f"{name} does not sum to 1 (sum={p.sum():.9f})")


def entropy(p) -> float:
    """Shannon entropy in nats, with 0*log(0) treated as 0."""
    p = np.asarray(p, dtype=np.float64)
    _check_distribution(p, "distribution")
    nz = p > 0
    return float(-(p[nz] * np.log(p[nz])).sum())


def kl_div(p, q):
    """KL(p || q) in nats; q is clamped to EPS_LOG inside the log.

    ``p`` is always treated as a constant target; pass a Tensor as ``q`` to
    get gradients into the approximating distribution.
    """
    p_arr = np.asarray(p.data if isinstance(p, Tensor) else p, dtype=np.float64)
    _check_distribution(p_arr, "target distribution")
    q_is_node = isinstance(q, Tensor)
    q_arr = q.data if q_is_node else np.asarray(q, dtype=np.float64)
    if q_arr.shape != p_arr.shape:
        raise ShapeError(f"distribution length mismatch: {p_arr.shape} vs {q_arr.shape}")
    _check_distribution(q_arr, "approximating distribution")

    q_safe = np.maximum(q_arr, EPS_LOG)
    nz = p_arr > 0
    value = float((p_arr[nz] * (np.log(p_arr[nz]) - np.log(q_safe[nz]))).sum())
    if not q_is_node:
        return value

    def backward(g):
        gq = np.zeros_like(q_arr)
        live = nz & (q_arr > EPS_LOG)
        gq[live] = -float(g) * p_arr[live] / q_arr[live]
        return [(q, gq)]

    return _node(np.float64(value), (q,), backward)


def cross_entropy(z, label, tau_d):
    """-log softmax_temp(z, tau_d)[label], computed via a stable logsumexp."""
    tau = _check_temperature(tau_d)
    z_is_node = isinstance(z, Tensor)
    z_arr = z.data if z_is_node else np.asarray(z, dtype=np.float64)
    _check_logits(z_arr)
    label = int(label)
    if not 0 <= label < z_arr.size:
        raise DomainError(f"label {label} out of range for {z_arr.size} classes")

    s = z_arr / tau
    m = s.max()
    value = float(np.log(np.exp(s - m).sum()) + m - s[label])
    if not z_is_node:
        return value

    def backward(g):
        p = _softmax_raw(z_arr, tau)
        p[label] -= 1.0
        return [(z, float(g) * p / tau)]

    return _node(np.float64(value), (z,), backward)


def bce(r, r_star):
    """Binary cross-entropy of a probability against a 0/1 target.

    The probability is clamped into [EPS_LOG, 1-EPS_LOG]; a clamped input
    receives zero gradient, matching the clamped forward value.
    """
    target = float(r_star)
    if target not in (0.0, 1.0):
        raise DomainError(f"binary target must be 0 or 1, got {r_star!r}")
    r_is_node = isinstance(r, Tensor)
    r_arr = r.data if r_is_node else np.asarray(r, dtype=np.float64)
    if r_arr.size != 1:
        raise ShapeError(f"bce expects a scalar probability, got shape {r_arr.shape}")
    r_val = float(r_arr.reshape(()))
    rc = min(max(r_val, EPS_LOG), 1.0 - EPS_LOG)
    value = -target * np.log(rc) - (1.0 - target) * np.log(1.0 - rc)
    if not r_is_node:
        return float(value)

    def backward(g):
        if r_val <= EPS_LOG or r_val >= 1.0 - EPS_LOG:
            return [(r, np.zeros_like(r_arr))]
        local = -target / rc + (1.0 - target) / (1.0 - rc)
        return [(r, np.full_like(r_arr, float(g) * local))]

    return _node(np.float64(value), (r,), backward)


def l2_normalize(v):
    """Scale rows (or a single vector) to unit Euclidean norm."""
    v_is_node = isinstance(v, Tensor)
    v_arr = v.data if v_is_node else np.asarray(v, dtype=np.float64)
    if v_arr.ndim not in (1, 2) or v_arr.size == 0:
        raise ShapeError(f"expected a vector or matrix of rows, got shape {v_arr.shape}")
    norms = np.linalg.norm(v_arr, axis=-1, keepdims=True)
    if np.any(norms <= EPS_NORM):
        raise DegenerateInputError("cannot normalize a (near-)zero vector")
    y = v_arr / norms

    if not v_is_node:
        return y

    def backward(g):
        # d/dv [v/|v|] applied rowwise: (g - y * <y, g>) / |v|
        inner = (y * g).sum(axis=-1, keepdims=True)
        return [(v, (g - y * inner) / norms)]

    return _node(y, (v,), backward)


def cosine(p, q) -> float:
    """Cosine similarity of two plain vectors (no gradient path needed)."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape or p.ndim != 1:
        raise ShapeError(f"cosine expects two equal-length vectors, got {p.shape} vs {q.shape}")
    np_, nq = np.linalg.norm(p), np.linalg.norm(q)
    if np_ <= EPS_NORM or nq <= EPS_NORM:
        raise DegenerateInputError("cosine undefined for (near-)zero vectors")
    return float(np.clip(p @ q / (np_ * nq), -1.0, 1.0))


# ---------------------------------------------------------------------------
# Parameters, SGD, and the finite-difference oracle
# ---------------------------------------------------------------------------

class ParamSet:
    """Ordered, named collection of trainable tensors.

    Supports composition: merging two ParamSets shares the underlying
    tensors, so one optimizer step can update several components.
    """

    def __init__(self):
        self._items: dict[str, Tensor] = {}

    def add(self, name: str, data) -> Tensor:
        if name in self._items:
            raise ConfigError(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(data, dtype=np.float64), requires_grad=True)
        self._items[name] = t
        return t

    def adopt(self, name: str, tensor: Tensor) -> None:
        if name in self._items:
            raise ConfigError(f"duplicate parameter name {name!r}")
        if not tensor.requires_grad:
            raise ConfigError(f"parameter {name!r} must require gradients")
        self._items[name] = tensor

    @staticmethod
    def union(parts: dict[str, "ParamSet"]) -> "ParamSet":
        out = ParamSet()
        for prefix, ps in parts.items():
            for name, t in ps._items.items():
                out.adopt(f"{prefix}.{name}", t)
        return out

    def __getitem__(self, name: str) -> Tensor:
        return self._items[name]

    def __contains__(self, name: str) -> bool:
        return name in self._items

    def __len__(self) -> int:
        return len(self._items)

    def names(self) -> list[str]:
        return list(self._items)

    def items(self) -> Iterator[tuple[str, Tensor]]:
        return iter(self._items.items())

    def tensors(self) -> Iterable[Tensor]:
        return self._items.values()

    def count(self) -> int:
        return sum(t.data.size for t in self._items.values())

    def zero_grad(self) -> None:
        for t in self._items.values():
            t.grad[...] = 0.0

    def copy(self) -> "ParamSet":
        out = ParamSet()
        for name, t in self._items.items():
            c = out.add(name, t.data.copy())
            c.grad[...] = t.grad
        return out

    def load_from(self, other: "ParamSet") -> None:
        if other.names() != self.names():
            raise ConfigError("parameter sets do not match")
        for name, t in self._items.items():
            src = other[name]
            if src.data.shape != t.data.shape:
                raise ShapeError(f"shape mismatch for {name!r}")
            t.data[...] = src.data
            t.grad[...] = 0.0


def sgd_step(params: ParamSet, lr: float) -> None:
    """In-place p <- p - lr * grad for every parameter, then zero gradients."""
    if not np.isfinite(lr) or lr <= 0:
        raise ConfigError(f"learning rate must be positive, got {lr!r}")
    for name, t in params.items():
        if not np.all(np.isfinite(t.grad)):
            raise TrainingDivergedError(f"non-finite gradient in parameter {name!r}")
        t.data -= lr * t.grad
    params.zero_grad()


def grad_check(
    loss_fn: Callable[[ParamSet], Tensor],
    params: ParamSet,
    h: float = 1e-4,
    grad_hook: Callable[[str, np.ndarray], np.ndarray] | None = None,
) -> float:
    """Max relative error between tape gradients and central differences.

    Per component: |analytic - central| / max(1, |central|). ``loss_fn`` must
    be a deterministic function of the parameters; it is re-evaluated
    2 * count(params) times, all in double precision.

    Parameters are perturbed in place and restored bitwise, so ``loss_fn``
    may simply close over the component that owns them. Gradient
    accumulators are zeroed on entry and left zeroed on exit. ``grad_hook``
    is a fault-injection seam for negative-control tests: it may rewrite the
    analytic gradient of a named parameter before comparison.
    """
    if not 1e-5 <= h <= 1e-3:
        raise ConfigError(f"finite-difference step must lie in [1e-5, 1e-3], got {h!r}")

    params.zero_grad()
    loss = loss_fn(params)
    if not isinstance(loss, Tensor):
        raise ConfigError("loss_fn must return a scalar Tensor")
    if not np.isfinite(loss.data):
        raise DomainError("loss is not finite at the evaluation point")
    loss.backward()
    analytic = {name: t.grad.copy() for name, t in params.items()}
    if grad_hook is not None:
        analytic = {name: grad_hook(name, g) for name, g in analytic.items()}
    params.zero_grad()

    worst = 0.0
    for name, t in params.items():
        flat = t.data.reshape(-1)
        a_flat = analytic[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = float(loss_fn(params).data)
            flat[i] = orig - h
            down = float(loss_fn(params).data)
            flat[i] = orig
            if not (np.isfinite(up) and np.isfinite(down)):
                raise DomainError("loss is not finite at a perturbed point")
            central = (up - down) / (2.0 * h)
            err = abs(a_flat[i] - central) / max(1.0, abs(central))
            if err > worst:
                worst = err
    return worst
