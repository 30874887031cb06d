##################################################################################################
#                                        OVERVIEW                                                #
#                                                                                                #
# Dense 64-bit tensors with reverse-mode differentiation.                                        #
#                                                                                                #
# Every primitive is a `Function` with a numpy `forward` and a `backward` that is written in     #
# terms of Tensor operations. Running the backward pass with `create_graph=True` therefore       #
# records the backward pass itself as a differentiable graph, which is what makes                #
# Hessian-vector products available (see fitkit/graph.py).                                      #
#                                                                                                #
# Conventions:                                                                                   #
# - ReLU derivative at 0 is 0.                                                                   #
# - Gather indices equal to -1 read an implicit zero (used for convolution padding).             #
# - Grad mode and the active recording tape are thread-local, so independent graphs can be       #
#   evaluated by concurrent workers.                                                             #
##################################################################################################

##################################################################################################
#                                            IMPORTS                                             #
##################################################################################################

import itertools
import threading
import weakref
from contextlib import contextmanager

import numpy as np

from fitkit.errors import ShapeError, ValidationError

##################################################################################################
#                                        CONFIGURATION                                           #
##################################################################################################

DTYPE = np.float64

_NODE_IDS = itertools.count()   # Global creation order; a node's id is larger than its inputs'
_state = threading.local()      # Per-thread grad mode and recording tape

##################################################################################################
#                                        GRAD MODE                                               #
##################################################################################################

def is_grad_enabled():
    return getattr(_state, "grad_enabled", True)


@contextmanager
def _grad_mode(enabled):
    previous = is_grad_enabled()
    _state.grad_enabled = enabled
    try:
        yield
    finally:
        _state.grad_enabled = previous


def no_grad():
    """Context manager disabling graph construction in the current thread."""
    return _grad_mode(False)


def enable_grad():
    """Context manager re-enabling graph construction in the current thread."""
    return _grad_mode(True)


def _tape_stack():
    stack = getattr(_state, "tapes", None)
    if stack is None:
        stack = _state.tapes = []
    return stack


def current_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None

##################################################################################################
#                                        IMPLEMENTATION                                          #
##################################################################################################

class Tensor:
    """
    Dense float64 array with an optional gradient and a link to the operation that produced it.

    Attributes:
        data (np.ndarray): Values, row-major, always float64.
        requires_grad (bool): Whether gradients flow to/through this tensor.
        grad (Tensor | None): Gradient buffer populated by `backward`, same shape as `data`.
        name (str | None): Optional label used in graph records and error messages.
    """

    __array_priority__ = 100  # numpy defers binary operators to Tensor

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name
        self._node = None
        self._retain = False

    # --- introspection -------------------------------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return int(self.data.size)

    @property
    def is_leaf(self):
        return self._node is None

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self):
        return self.data

    def detach(self):
        return Tensor(self.data, requires_grad=False, name=self.name)

    def retain_grad(self):
        """Keep the gradient of a non-leaf tensor when `backward` runs."""
        self._retain = True
        return self

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self):
        return self.shape[0]

    # --- arithmetic ----------------------------------------------------------------------------

    def __add__(self, other):
        return Add.apply(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return Add.apply(self, Neg.apply(other))

    def __rsub__(self, other):
        return Add.apply(other, Neg.apply(self))

    def __mul__(self, other):
        return Mul.apply(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return Div.apply(self, other)

    def __rtruediv__(self, other):
        return Div.apply(other, self)

    def __neg__(self):
        return Neg.apply(self)

    def __pow__(self, exponent):
        if isinstance(exponent, Tensor):
            raise ValidationError("Only constant exponents are supported.")
        return PowConst.apply(self, exponent=float(exponent))

    def __matmul__(self, other):
        return MatMul.apply(self, other)

    def __rmatmul__(self, other):
        return MatMul.apply(other, self)

    # --- shape and reductions -------------------------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return Reshape.apply(self, shape=tuple(shape))

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        return Transpose.apply(self, axes=tuple(axes))

    @property
    def T(self):
        return self.transpose()

    def sum(self, axis=None, keepdims=False):
        return Sum.apply(self, axis=_normalize_axis(axis, self.ndim), keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        axes = _normalize_axis(axis, self.ndim)
        count = int(np.prod([self.shape[a] for a in axes])) if axes else 1
        return self.sum(axis=axes, keepdims=keepdims) * (1.0 / count)

    def exp(self):
        return Exp.apply(self)

    def log(self):
        return Log.apply(self)

    def relu(self):
        return Relu.apply(self)

    def broadcast_to(self, shape):
        return broadcast_to(self, shape)


def as_tensor(value):
    """Wraps scalars and arrays as constant tensors; returns tensors unchanged."""
    if isinstance(value, Tensor):
        return value
    return Tensor(value, requires_grad=False)


def _normalize_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


class Context:
    """Per-call storage handed from `forward` to `backward`."""

    def __init__(self, inputs, params):
        self.inputs = inputs
        self.params = params
        self.needs_input_grad = tuple(t.requires_grad for t in inputs)
        self.saved = {}

    def save(self, **items):
        self.saved.update(items)


class Node:
    """One recorded application of a Function."""

    __slots__ = ("id", "fn", "ctx", "inputs", "out_ref", "__weakref__")

    def __init__(self, fn, ctx, inputs):
        self.id = next(_NODE_IDS)
        self.fn = fn
        self.ctx = ctx
        self.inputs = inputs
        self.out_ref = None


class Function:
    """
    Base class for differentiable primitives.

    Subclasses implement `forward(ctx, *arrays, **params) -> np.ndarray` and
    `backward(ctx, grad: Tensor) -> tuple[Tensor | None, ...]` (one entry per input).
    """

    @classmethod
    def apply(cls, *inputs, **params):
        tensors = tuple(as_tensor(t) for t in inputs)
        ctx = Context(tensors, params)
        tape = current_tape()
        try:
            data = cls.forward(ctx, *(t.data for t in tensors), **params)
        except (ValueError, IndexError) as exc:
            node_id = tape.next_node_id if tape is not None else None
            raise ShapeError(f"{cls.__name__} failed at node {node_id}: {exc}", node_id=node_id) from exc

        track = is_grad_enabled() and any(ctx.needs_input_grad)
        out = Tensor(data, requires_grad=track)
        if track:
            node = Node(cls, ctx, tensors)
            node.out_ref = weakref.ref(out)
            out._node = node
        if tape is not None:
            tape.record(cls.__name__, tensors, out, ctx)
        return out

    @staticmethod
    def forward(ctx, *arrays, **params):
        raise NotImplementedError

    @staticmethod
    def backward(ctx, grad):
        raise NotImplementedError

##################################################################################################
#                                        PRIMITIVES                                              #
##################################################################################################

def _reduce_to_shape(x, shape):
    extra = x.ndim - len(shape)
    if extra:
        x = x.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and x.shape[i] != 1)
    if axes:
        x = x.sum(axis=axes, keepdims=True)
    return x.reshape(shape)


def sum_to(t, shape):
    shape = tuple(shape)
    return t if t.shape == shape else SumTo.apply(t, shape=shape)


def broadcast_to(t, shape):
    shape = tuple(shape)
    t = as_tensor(t)
    return t if t.shape == shape else BroadcastTo.apply(t, shape=shape)


class SumTo(Function):
    @staticmethod
    def forward(ctx, x, shape):
        ctx.save(in_shape=x.shape)
        return _reduce_to_shape(x, shape)

    @staticmethod
    def backward(ctx, grad):
        return (broadcast_to(grad, ctx.saved["in_shape"]),)


class BroadcastTo(Function):
    @staticmethod
    def forward(ctx, x, shape):
        ctx.save(in_shape=x.shape)
        return np.array(np.broadcast_to(x, shape))

    @staticmethod
    def backward(ctx, grad):
        return (sum_to(grad, ctx.saved["in_shape"]),)


class Add(Function):
    @staticmethod
    def forward(ctx, a, b):
        return a + b

    @staticmethod
    def backward(ctx, grad):
        a, b = ctx.inputs
        return (
            sum_to(grad, a.shape) if ctx.needs_input_grad[0] else None,
            sum_to(grad, b.shape) if ctx.needs_input_grad[1] else None,
        )


class Neg(Function):
    @staticmethod
    def forward(ctx, a):
        return -a

    @staticmethod
    def backward(ctx, grad):
        return (-grad,)


class Mul(Function):
    @staticmethod
    def forward(ctx, a, b):
        return a * b

    @staticmethod
    def backward(ctx, grad):
        a, b = ctx.inputs
        return (
            sum_to(grad * b, a.shape) if ctx.needs_input_grad[0] else None,
            sum_to(grad * a, b.shape) if ctx.needs_input_grad[1] else None,
        )


class Div(Function):
    @staticmethod
    def forward(ctx, a, b):
        return a / b

    @staticmethod
    def backward(ctx, grad):
        a, b = ctx.inputs
        return (
            sum_to(grad / b, a.shape) if ctx.needs_input_grad[0] else None,
            sum_to(-(grad * a) / (b * b), b.shape) if ctx.needs_input_grad[1] else None,
        )


class PowConst(Function):
    @staticmethod
    def forward(ctx, a, exponent):
        return a ** exponent

    @staticmethod
    def backward(ctx, grad):
        (a,) = ctx.inputs
        p = ctx.params["exponent"]
        if p == 1.0:
            return (grad,)
        return (grad * p * (a ** (p - 1.0)),)


class Exp(Function):
    @staticmethod
    def forward(ctx, a):
        return np.exp(a)

    @staticmethod
    def backward(ctx, grad):
        (a,) = ctx.inputs
        return (grad * a.exp(),)


class Log(Function):
    @staticmethod
    def forward(ctx, a):
        return np.log(a)

    @staticmethod
    def backward(ctx, grad):
        (a,) = ctx.inputs
        return (grad / a,)


class Relu(Function):
    @staticmethod
    def forward(ctx, a):
        mask = (a > 0).astype(DTYPE)
        ctx.save(mask=mask)
        return a * mask

    @staticmethod
    def backward(ctx, grad):
        return (grad * Tensor(ctx.saved["mask"]),)


class MatMul(Function):
    @staticmethod
    def forward(ctx, a, b):
        if a.ndim != 2 or b.ndim != 2:
            raise ValueError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
        if a.shape[1] != b.shape[0]:
            raise ValueError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
        return a @ b

    @staticmethod
    def backward(ctx, grad):
        a, b = ctx.inputs
        return (
            grad @ b.T if ctx.needs_input_grad[0] else None,
            a.T @ grad if ctx.needs_input_grad[1] else None,
        )


class Reshape(Function):
    @staticmethod
    def forward(ctx, a, shape):
        ctx.save(in_shape=a.shape)
        return a.reshape(shape)

    @staticmethod
    def backward(ctx, grad):
        return (grad.reshape(ctx.saved["in_shape"]),)


class Transpose(Function):
    @staticmethod
    def forward(ctx, a, axes):
        return np.ascontiguousarray(np.transpose(a, axes))

    @staticmethod
    def backward(ctx, grad):
        inverse = tuple(int(i) for i in np.argsort(ctx.params["axes"]))
        return (grad.transpose(inverse),)


class Sum(Function):
    @staticmethod
    def forward(ctx, a, axis, keepdims):
        ctx.save(in_shape=a.shape)
        return np.asarray(a.sum(axis=axis, keepdims=keepdims))

    @staticmethod
    def backward(ctx, grad):
        in_shape = ctx.saved["in_shape"]
        if not ctx.params["keepdims"]:
            kept = tuple(1 if i in ctx.params["axis"] else s for i, s in enumerate(in_shape))
            grad = grad.reshape(kept)
        return (broadcast_to(grad, in_shape),)


def _padded(x):
    return np.concatenate([x, np.zeros((x.shape[0], 1), dtype=DTYPE)], axis=1)


class Gather(Function):
    """
    Row-wise gather on a 2-D tensor: out[n, m] = x[n, idx[m]] (shared) or x[n, idx[n, m]].

    Index -1 reads an implicit zero. The adjoint is `ScatterAdd`, so both are linear maps and
    arbitrarily high derivatives stay exact.
    """

    @staticmethod
    def forward(ctx, x, idx):
        if x.ndim != 2:
            raise ValueError(f"gather expects a 2-D tensor, got {x.shape}")
        width = x.shape[1]
        safe = np.where(idx < 0, width, idx)
        ctx.save(width=width)
        xp = _padded(x)
        if safe.ndim == 1:
            return xp[:, safe]
        return np.take_along_axis(xp, safe, axis=1)

    @staticmethod
    def backward(ctx, grad):
        return (ScatterAdd.apply(grad, idx=ctx.params["idx"], width=ctx.saved["width"]),)


class ScatterAdd(Function):
    @staticmethod
    def forward(ctx, g, idx, width):
        n = g.shape[0]
        safe = np.where(idx < 0, width, idx)
        out = np.zeros((n, width + 1), dtype=DTYPE)
        if safe.ndim == 1:
            np.add.at(out.T, safe, g.T)
        else:
            rows = np.broadcast_to(np.arange(n)[:, None], safe.shape)
            np.add.at(out, (rows, safe), g)
        return out[:, :width]

    @staticmethod
    def backward(ctx, grad):
        return (Gather.apply(grad, idx=ctx.params["idx"]),)


def gather(x, idx):
    return Gather.apply(x, idx=np.asarray(idx, dtype=np.int64))


def zeros(shape, requires_grad=False):
    return Tensor(np.zeros(shape, dtype=DTYPE), requires_grad=requires_grad)


def ones_like(t):
    return Tensor(np.ones_like(t.data))

##################################################################################################
#                                        REVERSE MODE                                            #
##################################################################################################

def _collect_nodes(outputs):
    nodes = {}
    stack = [o._node for o in outputs if o._node is not None]
    while stack:
        node = stack.pop()
        if node.id in nodes:
            continue
        nodes[node.id] = node
        stack.extend(t._node for t in node.inputs if t._node is not None and t._node.id not in nodes)
    return nodes


def _run_backward(outputs, grad_outputs, wanted_leaves, wanted_nodes, all_leaves, create_graph):
    """
    Shared reverse sweep.

    Args:
        outputs (list[Tensor]): Roots of the sweep.
        grad_outputs (list[Tensor]): Seeds, one per output.
        wanted_leaves (set[int]): `id()` of leaf tensors whose gradient is requested.
        wanted_nodes (set[int]): Node ids of non-leaf tensors whose gradient is requested.
        all_leaves (bool): Collect every leaf requiring grad (used by `backward`).
        create_graph (bool): Record the sweep so its result can be differentiated again.

    Returns:
        tuple[dict, dict]: Leaf gradients keyed by `id(tensor)` as (tensor, grad) pairs and
        non-leaf gradients keyed by node id.
    """

    nodes = _collect_nodes(outputs)

    # Prune nodes that do not lead to any requested tensor
    needed = set()
    for nid in sorted(nodes):
        node = nodes[nid]
        for t in node.inputs:
            if not t.requires_grad:
                continue
            if t._node is None:
                if all_leaves or id(t) in wanted_leaves:
                    needed.add(nid)
                    break
            elif t._node.id in needed or t._node.id in wanted_nodes:
                needed.add(nid)
                break

    node_grads, leaf_grads, kept = {}, {}, {}

    def accumulate(t, g):
        if t._node is not None:
            key = t._node.id
            node_grads[key] = g if key not in node_grads else node_grads[key] + g
        else:
            key = id(t)
            if key in leaf_grads:
                leaf_grads[key] = (t, leaf_grads[key][1] + g)
            else:
                leaf_grads[key] = (t, g)

    with _grad_mode(create_graph):
        for out, seed in zip(outputs, grad_outputs):
            if out._node is None:
                if out.requires_grad and (all_leaves or id(out) in wanted_leaves):
                    accumulate(out, seed)
            elif out._node.id in needed or out._node.id in wanted_nodes:
                accumulate(out, seed)

        for nid in sorted(nodes, reverse=True):
            node = nodes[nid]
            g = node_grads.get(nid)
            if g is None:
                continue
            if nid in wanted_nodes:
                kept[nid] = g
            out = node.out_ref() if node.out_ref is not None else None
            if out is not None and out._retain:
                out.grad = g if out.grad is None else out.grad + g
            if nid not in needed:
                continue
            input_grads = node.fn.backward(node.ctx, g)
            for t, gi in zip(node.inputs, input_grads):
                if gi is None or not t.requires_grad:
                    continue
                if gi.shape != t.shape:
                    raise ShapeError(
                        f"{node.fn.__name__} produced gradient {gi.shape} for input {t.shape}",
                        node_id=nid,
                    )
                if t._node is not None:
                    if t._node.id in needed or t._node.id in wanted_nodes:
                        accumulate(t, gi)
                elif all_leaves or id(t) in wanted_leaves:
                    accumulate(t, gi)

    return leaf_grads, kept


def _seeds(outputs, grad_outputs):
    if grad_outputs is None:
        grad_outputs = [None] * len(outputs)
    seeds = []
    for out, seed in zip(outputs, grad_outputs):
        if seed is None:
            if out.size != 1:
                raise ValidationError(f"A seed is required for non-scalar output of shape {out.shape}.")
            seed = Tensor(np.ones(out.shape, dtype=DTYPE))
        seed = as_tensor(seed)
        if seed.shape != out.shape:
            raise ShapeError(f"Seed shape {seed.shape} does not match output shape {out.shape}.")
        seeds.append(seed)
    return seeds


def grad(outputs, inputs, grad_outputs=None, create_graph=False):
    """
    Computes d(outputs)/d(inputs) contracted with `grad_outputs`.

    Inputs that do not influence the outputs receive zero gradients.

    Args:
        outputs (Tensor | list[Tensor]): Differentiated tensors.
        inputs (Tensor | list[Tensor]): Tensors to differentiate with respect to (leaf or not).
        grad_outputs (list[Tensor] | None): Seeds; defaults to ones for scalar outputs.
        create_graph (bool): If True the returned gradients are themselves differentiable.

    Returns:
        list[Tensor]: One gradient per input.
    """

    outputs = [outputs] if isinstance(outputs, Tensor) else list(outputs)
    single = isinstance(inputs, Tensor)
    inputs = [inputs] if single else list(inputs)
    seeds = _seeds(outputs, grad_outputs)

    wanted_leaves = {id(t) for t in inputs if t._node is None}
    wanted_nodes = {t._node.id for t in inputs if t._node is not None}
    leaf_grads, node_grads = _run_backward(outputs, seeds, wanted_leaves, wanted_nodes, False, create_graph)

    result = []
    for t in inputs:
        if t._node is None:
            g = leaf_grads.get(id(t), (None, None))[1]
        else:
            g = node_grads.get(t._node.id)
        result.append(g if g is not None else Tensor(np.zeros(t.shape, dtype=DTYPE)))
    return result[0] if single else result


def backward(output, seed=None, create_graph=False):
    """Accumulates d(output)/d(leaf) into `.grad` of every leaf requiring grad."""

    seeds = _seeds([output], None if seed is None else [seed])
    leaf_grads, _ = _run_backward([output], seeds, set(), set(), True, create_graph)
    for t, g in leaf_grads.values():
        t.grad = g if t.grad is None else t.grad + g
