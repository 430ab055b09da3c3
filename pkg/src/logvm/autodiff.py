"""Reverse-mode differentiation over the primitive-op graph.

Every primitive op that sees a taped input attaches a ``TapeNode`` to its
output.  The node stores the op name, handles to the parent nodes and a
backward closure over whatever activations the rule needs.  ``backward``
walks the resulting DAG once, in reverse topological order, accumulating
gradients at fan-out points.  ``gradcheck`` compares the tape's gradients
against central finite differences and is the anchor for every analytic
backward rule in the package.
"""

from __future__ import annotations

import numpy as np

__all__ = ["TapeNode", "backward", "gradcheck", "gradcheck_sampled"]


class TapeNode:
    """One recorded operation: identifier, parent handles, backward rule.

    Leaves (trainable parameters / probed inputs) have no backward_fn and
    keep a reference to the Tensor they belong to, so gradient maps can be
    keyed by the parameter object itself.
    """

    __slots__ = ("op", "parents", "backward_fn", "shape", "tensor")

    def __init__(self, op, parents, backward_fn, shape):
        self.op = op
        self.parents = parents          # tuple[TapeNode | None, ...]
        self.backward_fn = backward_fn  # grad ndarray -> tuple of parent grads
        self.shape = shape
        self.tensor = None              # set for leaves only

    @property
    def is_leaf(self):
        return self.backward_fn is None

    def __repr__(self):
        return f"TapeNode(op={self.op!r}, shape={self.shape})"


def _toposort(root):
    """Iterative post-order over the DAG; each node visited exactly once."""
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if node is None or id(node) in seen:
            continue
        if expanded:
            seen.add(id(node))
            order.append(node)
        else:
            stack.append((node, True))
            for parent in node.parents:
                if parent is not None and id(parent) not in seen:
                    stack.append((parent, False))
    return order


def backward(loss):
    """Gradients of a scalar taped value w.r.t. every reachable leaf.

    Returns a dict mapping leaf Tensors to gradient Tensors of the same
    shape.  Gradients at fan-out points are summed.  Traversal order is a
    fixed function of the tape, so repeated calls are bitwise identical.
    """
    from .tensor import Tensor

    if loss.node is None:
        raise ValueError("loss is not attached to a tape (no taped inputs)")
    if loss.data.shape != ():
        raise ValueError(f"loss must be scalar, got shape {loss.data.shape}")

    order = _toposort(loss.node)
    grads = {id(loss.node): np.ones((), dtype=np.float64)}
    leaf_grads = {}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            leaf_grads[node.tensor] = Tensor(g)
            continue
        parent_grads = node.backward_fn(g)
        for parent, pg in zip(node.parents, parent_grads):
            if parent is None or pg is None:
                continue
            acc = grads.get(id(parent))
            if acc is None:
                grads[id(parent)] = np.array(pg, dtype=np.float64, copy=True)
            else:
                acc += pg
    return leaf_grads


def _fd_gradient(f, values, which, idx, eps):
    """Central difference of f at one coordinate of one input."""
    from .tensor import Tensor

    def evaluate(shift):
        probes = []
        for k, v in enumerate(values):
            arr = np.array(v, copy=True)
            if k == which:
                arr[idx] += shift
            probes.append(Tensor(arr))
        return float(f(*probes).data)

    return (evaluate(eps) - evaluate(-eps)) / (2.0 * eps)


def gradcheck(f, inputs, eps=1e-5):
    """Max relative error between tape gradients and central differences.

    ``f`` must map the given Tensors to a scalar Tensor.  Every element of
    every input is probed.  Relative error per coordinate is
    |g_ad - g_fd| / max(|g_ad|, |g_fd|, 1e-8).
    """
    return _gradcheck_impl(f, inputs, eps, coords=None, rng=None)


def gradcheck_sampled(f, inputs, eps=1e-5, max_coords=200, rng=None):
    """gradcheck over a random subsample of coordinates (for large models)."""
    if rng is None:
        rng = np.random.default_rng(0)
    return _gradcheck_impl(f, inputs, eps, coords=max_coords, rng=rng)


def _gradcheck_impl(f, inputs, eps, coords, rng):
    from .tensor import Tensor, parameter

    if not (1e-7 <= eps <= 1e-4):
        raise ValueError(f"eps must lie in [1e-7, 1e-4], got {eps}")

    values = [np.array(t.data, dtype=np.float64, copy=True) for t in inputs]
    leaves = [parameter(v) for v in values]
    out = f(*leaves)
    if out.data.shape != ():
        raise ValueError("gradcheck requires a scalar-valued function")
    gmap = backward(out)

    all_coords = []
    for k, v in enumerate(values):
        for idx in np.ndindex(v.shape):
            all_coords.append((k, idx))
    if coords is not None and len(all_coords) > coords:
        pick = rng.choice(len(all_coords), size=coords, replace=False)
        all_coords = [all_coords[i] for i in sorted(pick)]

    worst = 0.0
    for k, idx in all_coords:
        leaf = leaves[k]
        g_ad = float(gmap[leaf].data[idx]) if leaf in gmap else 0.0
        g_fd = _fd_gradient(f, values, k, idx, eps)
        rel = abs(g_ad - g_fd) / max(abs(g_ad), abs(g_fd), 1e-8)
        worst = max(worst, rel)
    return worst
