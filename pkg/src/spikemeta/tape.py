"""Reverse-mode autodiff over recorded vector operations.

Every operation appends one node holding its inputs, parameters, and output
value; granularity is per vector operation, not per scalar, which keeps the
tape for a 100-step unroll in the tens of thousands of nodes.  `backward`
walks the node list in reverse, accumulating adjoints into every leaf.
`replay` re-executes the recorded forward and must reproduce every stored
value bit-exactly (stochastic rounding draws are stored on the node).

Spike thresholds record surrogate adjoints (hard forward) or exact adjoints
of a soft spike function (smooth forward); weight quantization records a
straight-through identity adjoint; the error-trigger gate enters as a
stop-gradient mask.  This is deliberately not a general-purpose autodiff:
only the operations the simulator needs exist.
"""

from __future__ import annotations

import numpy as np

from .quantize import QuantizationScheme
from .surrogate import SurrogateConfig, soft_spike, surrogate_derivative

__all__ = ["Node", "Tape", "backward", "gradients", "replay"]


class Node:
    __slots__ = ("op", "parents", "aux", "value", "idx")

    def __init__(self, op, parents, aux, value, idx):
        self.op = op
        self.parents = parents
        self.aux = aux
        self.value = value
        self.idx = idx

    def __repr__(self):  # pragma: no cover
        shape = getattr(self.value, "shape", ())
        return f"<Node {self.idx} {self.op} {shape}>"


# Pure forward rules, used both at record time and for replay.

def _f_leaf(_parents, aux):
    return aux[0]


def _f_linear(parents, _aux):
    x, w = parents
    return x @ np.swapaxes(w, -1, -2)


def _f_linear_cx(parents, aux):
    (w,) = parents
    return aux[0] @ np.swapaxes(w, -1, -2)


def _f_decay_add(parents, aux):
    prev, drive = parents
    a = aux[0]
    return a * prev + (1.0 - a) * drive


def _f_decay_add_c(parents, aux):
    (prev,) = parents
    a, drive = aux
    return a * prev + (1.0 - a) * drive


def _f_add(parents, _aux):
    return parents[0] + parents[1]


def _f_axpy(parents, aux):
    return parents[0] + aux[0] * parents[1]


def _f_sub_from_const(parents, aux):
    return aux[0] - parents[0]


def _f_mul_const(parents, aux):
    return aux[0] * parents[0]


def _f_mul(parents, _aux):
    return parents[0] * parents[1]


def _f_rowcol_outer(parents, _aux):
    e, p = parents
    return e[..., :, None] * p[..., None, :]


def _f_spike(parents, aux):
    threshold = aux[0]
    return (parents[0] >= threshold).astype(np.float64)


def _f_spike_soft(parents, aux):
    threshold, cfg = aux
    return soft_spike(parents[0], threshold, cfg)


def _f_reset_hard(parents, _aux):
    v, s = parents
    return v * (1.0 - s)


def _f_reset_soft(parents, aux):
    v, s = parents
    return v - aux[0] * s


def _f_quantize_st(parents, aux):
    draws, scheme = aux
    x = parents[0]
    lo = scheme.step * np.floor(x / scheme.step)
    frac = (x - lo) / scheme.step
    rounded = lo + scheme.step * (draws < frac)
    return np.clip(rounded, scheme.min, scheme.max)


def _f_tile(parents, aux):
    (w,) = parents
    return np.broadcast_to(w, (aux[0],) + w.shape).copy()


def _f_reshape(parents, aux):
    return parents[0].reshape(aux[0])


def _f_stopgrad(parents, _aux):
    return parents[0]


def _softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    ez = np.exp(z)
    return ez / ez.sum(axis=-1, keepdims=True)


def _f_ce_counts(parents, aux):
    # counts (E, B, O) or (B, O); loss = sum over episodes of mean over shots.
    labels = aux[0]
    counts = parents[0]
    if counts.ndim == 2:
        counts = counts[None]
        labels = labels[None]
    probs = _softmax(counts)
    e_idx, b_idx = np.indices(labels.shape)
    logp = np.log(probs[e_idx, b_idx, labels])
    return float(-logp.mean(axis=1).sum())


FORWARD = {
    "leaf": _f_leaf,
    "linear": _f_linear,
    "linear_cx": _f_linear_cx,
    "decay_add": _f_decay_add,
    "decay_add_c": _f_decay_add_c,
    "add": _f_add,
    "axpy": _f_axpy,
    "sub_from_const": _f_sub_from_const,
    "mul_const": _f_mul_const,
    "mul": _f_mul,
    "rowcol_outer": _f_rowcol_outer,
    "spike": _f_spike,
    "spike_soft": _f_spike_soft,
    "reset_hard": _f_reset_hard,
    "reset_soft": _f_reset_soft,
    "quantize_st": _f_quantize_st,
    "tile": _f_tile,
    "reshape": _f_reshape,
    "stopgrad": _f_stopgrad,
    "ce_counts": _f_ce_counts,
}


class Tape:
    """Ordered record of primitive operations with their adjoint rules."""

    def __init__(self):
        self.nodes: list[Node] = []

    def __len__(self):
        return len(self.nodes)

    def _apply(self, op, parents, aux):
        value = FORWARD[op](tuple(p.value for p in parents), aux)
        node = Node(op, parents, aux, value, len(self.nodes))
        self.nodes.append(node)
        return node

    def leaf(self, value) -> Node:
        """Differentiable parameter; receives an adjoint after backward."""
        return self._apply("leaf", (), (np.asarray(value, dtype=np.float64),))

    def linear(self, x: Node, w: Node) -> Node:
        """x @ w.T with w either (post, pre) shared or (..., post, pre) batched."""
        return self._apply("linear", (x, w), ())

    def linear_const_input(self, x: np.ndarray, w: Node) -> Node:
        return self._apply("linear_cx", (w,), (np.asarray(x, dtype=np.float64),))

    def decay_add(self, prev: Node, drive: Node, alpha: float) -> Node:
        """alpha * prev + (1 - alpha) * drive, the first-order filter step."""
        return self._apply("decay_add", (prev, drive), (float(alpha),))

    def decay_add_const(self, prev: Node, drive: np.ndarray, alpha: float) -> Node:
        return self._apply(
            "decay_add_c", (prev,), (float(alpha), np.asarray(drive, dtype=np.float64))
        )

    def add(self, a: Node, b: Node) -> Node:
        return self._apply("add", (a, b), ())

    def axpy(self, a: Node, b: Node, c: float) -> Node:
        """a + c * b."""
        return self._apply("axpy", (a, b), (float(c),))

    def sub_from_const(self, c, a: Node) -> Node:
        """c - a."""
        return self._apply("sub_from_const", (a,), (np.asarray(c, dtype=np.float64),))

    def mul_const(self, c, a: Node) -> Node:
        """c * a; c may broadcast but must not enlarge a's shape."""
        return self._apply("mul_const", (a,), (np.asarray(c, dtype=np.float64),))

    def mul(self, a: Node, b: Node) -> Node:
        return self._apply("mul", (a, b), ())

    def rowcol_outer(self, e: Node, p: Node) -> Node:
        """(..., O) x (..., P) -> (..., O, P) outer product."""
        return self._apply("rowcol_outer", (e, p), ())

    def spike(self, v: Node, threshold: float, cfg: SurrogateConfig) -> Node:
        """Hard threshold forward, surrogate derivative backward."""
        return self._apply("spike", (v,), (float(threshold), cfg))

    def spike_soft(self, v: Node, threshold: float, cfg: SurrogateConfig) -> Node:
        """Soft spike forward, exact derivative backward (smoothed mode)."""
        return self._apply("spike_soft", (v,), (float(threshold), cfg))

    def reset(self, v: Node, s: Node, mode: str, threshold: float) -> Node:
        if mode == "hard":
            return self._apply("reset_hard", (v, s), ())
        return self._apply("reset_soft", (v, s), (float(threshold),))

    def quantize_st(
        self, w: Node, scheme: QuantizationScheme, rng: np.random.Generator
    ) -> Node:
        """Stochastic round + clamp forward, straight-through identity backward.

        Draws are stored on the node so replay is exact.
        """
        draws = rng.random(size=np.shape(w.value))
        return self._apply("quantize_st", (w,), (draws, scheme))

    def tile(self, w: Node, reps: int) -> Node:
        """Copy a shared parameter along a new leading axis; adjoints sum back."""
        return self._apply("tile", (w,), (int(reps),))

    def reshape(self, a: Node, shape: tuple[int, ...]) -> Node:
        return self._apply("reshape", (a,), (tuple(shape), np.shape(a.value)))

    def stopgrad(self, a: Node) -> Node:
        return self._apply("stopgrad", (a,), ())

    def cross_entropy_on_counts(self, counts: Node, labels: np.ndarray) -> Node:
        """Sum over episodes of the mean per-shot cross entropy on count logits."""
        return self._apply(
            "ce_counts", (counts,), (np.asarray(labels, dtype=np.int64),)
        )


# Adjoint rules: given the node and its output adjoint, return one gradient
# per parent (None to skip).  All rules preserve parent shapes.

def _b_linear(node, g):
    x, w = (p.value for p in node.parents)
    gx = g @ w
    if w.ndim == 2:
        gw = np.tensordot(g, x, axes=(range(g.ndim - 1), range(x.ndim - 1)))
    else:
        gw = np.swapaxes(g, -1, -2) @ x
    return (gx, gw)


def _b_linear_cx(node, g):
    x = node.aux[0]
    w = node.parents[0].value
    if w.ndim == 2:
        gw = np.tensordot(g, x, axes=(range(g.ndim - 1), range(x.ndim - 1)))
    else:
        gw = np.swapaxes(g, -1, -2) @ x
    return (gw,)


def _b_decay_add(node, g):
    a = node.aux[0]
    return (a * g, (1.0 - a) * g)


def _b_decay_add_c(node, g):
    return (node.aux[0] * g,)


def _b_add(node, g):
    return (g, g)


def _b_axpy(node, g):
    return (g, node.aux[0] * g)


def _b_sub_from_const(node, g):
    return (-g,)


def _b_mul_const(node, g):
    return (node.aux[0] * g,)


def _b_mul(node, g):
    a, b = (p.value for p in node.parents)
    return (g * b, g * a)


def _b_rowcol_outer(node, g):
    e, p = (pa.value for pa in node.parents)
    ge = (g * p[..., None, :]).sum(axis=-1)
    gp = (g * e[..., :, None]).sum(axis=-2)
    return (ge, gp)


def _b_spike(node, g):
    threshold, cfg = node.aux
    return (g * surrogate_derivative(node.parents[0].value, threshold, cfg),)


def _b_reset_hard(node, g):
    v, s = (p.value for p in node.parents)
    return (g * (1.0 - s), -g * v)


def _b_reset_soft(node, g):
    return (g, -node.aux[0] * g)


def _b_quantize_st(node, g):
    return (g,)


def _b_tile(node, g):
    return (g.sum(axis=0),)


def _b_reshape(node, g):
    return (np.asarray(g).reshape(node.aux[1]),)


def _b_stopgrad(node, g):
    return (None,)


def _b_ce_counts(node, g):
    labels = node.aux[0]
    counts = node.parents[0].value
    squeeze = counts.ndim == 2
    if squeeze:
        counts = counts[None]
        labels = labels[None]
    probs = _softmax(counts)
    e_idx, b_idx = np.indices(labels.shape)
    probs[e_idx, b_idx, labels] -= 1.0
    grad = probs / labels.shape[1]
    if squeeze:
        grad = grad[0]
    return (g * grad,)


BACKWARD = {
    "linear": _b_linear,
    "linear_cx": _b_linear_cx,
    "decay_add": _b_decay_add,
    "decay_add_c": _b_decay_add_c,
    "add": _b_add,
    "axpy": _b_axpy,
    "sub_from_const": _b_sub_from_const,
    "mul_const": _b_mul_const,
    "mul": _b_mul,
    "rowcol_outer": _b_rowcol_outer,
    "spike": _b_spike,
    "spike_soft": _b_spike,  # soft forward differentiates to the same surrogate
    "reset_hard": _b_reset_hard,
    "reset_soft": _b_reset_soft,
    "quantize_st": _b_quantize_st,
    "tile": _b_tile,
    "reshape": _b_reshape,
    "stopgrad": _b_stopgrad,
    "ce_counts": _b_ce_counts,
}


def backward(tape: Tape, root: Node) -> list:
    """Adjoints for every node, seeded with d(root)/d(root) = 1."""
    adj: list = [None] * len(tape.nodes)
    adj[root.idx] = np.ones_like(np.asarray(root.value, dtype=np.float64))
    for node in reversed(tape.nodes):
        g = adj[node.idx]
        if g is None or node.op == "leaf":
            continue
        for parent, pg in zip(node.parents, BACKWARD[node.op](node, g)):
            if pg is None:
                continue
            if adj[parent.idx] is None:
                adj[parent.idx] = pg
            else:
                adj[parent.idx] = adj[parent.idx] + pg
    return adj


def gradients(tape: Tape, root: Node, wrt: list[Node]) -> list[np.ndarray]:
    """Adjoints of `root` with respect to the given leaves (zeros if unreached)."""
    adj = backward(tape, root)
    out = []
    for node in wrt:
        g = adj[node.idx]
        out.append(np.zeros_like(np.asarray(node.value, dtype=np.float64)) if g is None else g)
    return out


def replay(tape: Tape) -> list:
    """Re-execute the recorded forward; returns the recomputed values in order."""
    values: list = [None] * len(tape.nodes)
    for node in tape.nodes:
        parents = tuple(values[p.idx] for p in node.parents)
        values[node.idx] = FORWARD[node.op](parents, node.aux)
    return values
