"""Reverse-mode differentiation, the sign straight-through estimator and a
finite-difference gradient checker."""
from __future__ import annotations

from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from r2b.tensor import Function, Tensor, as_tensor

# Gradient passes through sign() where |x| <= STE_CLIP.
STE_CLIP = 1.0


class Graph:
    """Topologically ordered view of the nodes that feed ``output``."""

    def __init__(self, output: Tensor):
        self.output = output
        self.nodes: List[Tensor] = self._toposort(output)

    @staticmethod
    def _toposort(root: Tensor) -> List[Tensor]:
        order: List[Tensor] = []
        seen = set()
        stack = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            if node._ctx is not None:
                for parent in node._ctx.parents:
                    if parent.requires_grad and id(parent) not in seen:
                        stack.append((parent, False))
        return order

    def __len__(self) -> int:
        return len(self.nodes)


def backward(loss: Tensor, grad: Optional[np.ndarray] = None) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf requiring grad.

    Gradients of intermediate nodes are kept only for the duration of the
    traversal, so calling this twice on the same graph exactly doubles the
    leaf gradients.
    """
    if grad is None:
        if loss.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        grad = np.ones_like(loss.data)
    if not loss.requires_grad:
        return
    graph = Graph(loss)
    grads: Dict[int, np.ndarray] = {id(loss): np.asarray(grad, dtype=loss.dtype)}
    for node in reversed(graph.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._ctx is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        parent_grads = node._ctx.backward(g)
        for parent, pg in zip(node._ctx.parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            pg = np.asarray(pg, dtype=parent.dtype)
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


class SignSTE(Function):
    def forward(self, x, clip=STE_CLIP):
        self.pass_mask = np.abs(x) <= clip
        return np.where(x >= 0, 1.0, -1.0).astype(x.dtype)

    def backward(self, g):
        return (g * self.pass_mask,)


def sign_ste(input: Tensor, clip: float = STE_CLIP) -> Tensor:
    """sign() with sign(0) = +1; clipped-identity gradient (|x| <= clip)."""
    return SignSTE.apply(as_tensor(input), clip=clip)


class Tanh(Function):
    def forward(self, x):
        self.out = np.tanh(x)
        return self.out

    def backward(self, g):
        return (g * (1.0 - self.out * self.out),)


def tanh_soft_binarize(input: Tensor) -> Tensor:
    return Tanh.apply(as_tensor(input))


class NonSmoothPointError(ValueError):
    """The probe point lies within one step of a kink of the checked op."""


def finite_diff_check(op: Callable[..., Tensor], point: Sequence[np.ndarray], step: float = 1e-6,
                      directions: int = 6, rng: Optional[np.random.Generator] = None,
                      kink_distance: Optional[Callable[..., np.ndarray]] = None) -> float:
    """Compare backward() against central-difference directional derivatives.

    ``op`` maps tensors built from ``point`` to an output tensor of any shape;
    it is reduced to a scalar by a fixed random projection. For each random
    direction the analytic JVP (from backward) is compared with
    ``(f(x + h d) - f(x - h d)) / 2h`` and the worst relative error is
    returned.

    ``kink_distance``, when given, returns per-element distances to the
    nearest non-differentiable point of ``op``; if any element is within
    ``step`` the point is rejected with :class:`NonSmoothPointError`.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    rng = rng or np.random.default_rng(0)
    point = [np.asarray(p, dtype=np.float64) for p in point]
    if kink_distance is not None:
        dist = np.asarray(kink_distance(*point))
        if np.any(dist <= step):
            raise NonSmoothPointError("probe point straddles a kink; excluded from gradient check")

    probe = op(*[Tensor(p) for p in point])
    proj = rng.standard_normal(probe.shape)

    def f(arrays):
        return float((op(*[Tensor(a) for a in arrays]).data * proj).sum())

    leaves = [Tensor(p.copy(), requires_grad=True) for p in point]
    out = op(*leaves)
    (out * Tensor(proj)).sum().backward()
    analytic_grads = [leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data) for leaf in leaves]

    worst = 0.0
    for _ in range(directions):
        dirs = [rng.standard_normal(p.shape) for p in point]
        analytic = sum(float((g * d).sum()) for g, d in zip(analytic_grads, dirs))
        plus = f([p + step * d for p, d in zip(point, dirs)])
        minus = f([p - step * d for p, d in zip(point, dirs)])
        numeric = (plus - minus) / (2 * step)
        denom = max(abs(analytic), abs(numeric), 1e-8)
        worst = max(worst, abs(analytic - numeric) / denom)
    return worst
