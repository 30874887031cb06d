##################################################################################################
#                                        OVERVIEW                                                #
#                                                                                                #
# Recorded computation graphs on top of fitkit.tensor, plus the second-order tooling built from  #
# them:                                                                                          #
# - ComputationGraph: wraps a tensor function with a declared input signature, records one      #
#   NodeRecord per primitive while running forward, and differentiates back to its inputs.       #
# - grad_check: reverse-mode gradient against central finite differences.                        #
# - HessianOperator / hessian_vector_product: H·v by differentiating <grad f, v>.                 #
# - exact_hessian: dense oracle assembled column by column (small models only).                  #
##################################################################################################

##################################################################################################
#                                            IMPORTS                                             #
##################################################################################################

from dataclasses import dataclass, field

import numpy as np

from fitkit import tensor as T
from fitkit.errors import OracleLimitError, ShapeError, StateError, ValidationError
from fitkit.tensor import Tensor

##################################################################################################
#                                        CONFIGURATION                                           #
##################################################################################################

ORACLE_LIMIT = 2000           # Largest parameter count for dense Hessian / Fisher oracles
MAX_EPSILON = 1e-2            # Upper bound on the finite-difference step
RELATIVE_FLOOR = 1e-4         # Denominator floor of the relative error in grad_check

##################################################################################################
#                                        RECORDING                                               #
##################################################################################################

@dataclass
class NodeRecord:
    """One operation in a recorded graph. Input ids always reference earlier records."""

    id: int
    op: str
    inputs: tuple
    shape: tuple
    saved: dict = field(default_factory=dict)


class Tape:
    """Collects NodeRecords while a ComputationGraph runs forward."""

    def __init__(self, graph_inputs=()):
        self.records = []
        self._ids = {}
        self._pinned = []  # keeps recorded tensors alive so id() values stay unique
        for tensor in graph_inputs:
            self._register(tensor, "input")

    @property
    def next_node_id(self):
        return len(self.records)

    def _register(self, tensor, op, inputs=(), saved=None):
        node_id = len(self.records)
        self.records.append(NodeRecord(node_id, op, tuple(inputs), tensor.shape, dict(saved or {})))
        self._ids[id(tensor)] = node_id
        self._pinned.append(tensor)
        return node_id

    def record(self, op, inputs, out, ctx):
        input_ids = []
        for tensor in inputs:
            node_id = self._ids.get(id(tensor))
            if node_id is None:
                node_id = self._register(tensor, "const")
            input_ids.append(node_id)
        self._register(out, op, input_ids, ctx.saved)

    def __enter__(self):
        T._tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc_val, exc_tb):
        T._tape_stack().pop()


class ComputationGraph:
    """
    A tensor function with a fixed input signature and a record of its last forward run.

    Args:
        fn (Callable[..., Tensor | tuple[Tensor, ...]]): Function of the input tensors.
        input_shapes (list[tuple[int, ...]]): Declared shapes, one per input.
        name (str, optional): Label used in log and error messages.

    Attributes:
        nodes (list[NodeRecord]): Records of the last forward run, in topological order.
        outputs (list[int]): Node ids of the outputs of the last forward run.
    """

    def __init__(self, fn, input_shapes, name=None):
        self.fn = fn
        self.input_shapes = [tuple(s) for s in input_shapes]
        self.name = name or getattr(fn, "__name__", "graph")
        self.nodes = []
        self.outputs = []
        self.inputs = None
        self._output_tensors = None

    def _check_inputs(self, inputs):
        if len(inputs) != len(self.input_shapes):
            raise ShapeError(f"{self.name}: expected {len(self.input_shapes)} inputs, got {len(inputs)}.")
        arrays = []
        for i, (value, shape) in enumerate(zip(inputs, self.input_shapes)):
            data = value.data if isinstance(value, Tensor) else np.asarray(value, dtype=T.DTYPE)
            if data.shape != shape:
                raise ShapeError(f"{self.name}: input {i} has shape {data.shape}, expected {shape}.", node_id=i)
            arrays.append(data)
        return arrays

    def forward(self, inputs):
        """
        Runs the function on fresh leaf tensors and records every primitive.

        Args:
            inputs (list[Tensor | np.ndarray]): Values matching the declared signature.

        Returns:
            list[Tensor]: Output tensors.

        Raises:
            ShapeError: If an input or an intermediate operation has an incompatible shape.
        """

        arrays = self._check_inputs(inputs)
        leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays]
        with T.enable_grad(), Tape(leaves) as tape:
            result = self.fn(*leaves)
        outputs = [result] if isinstance(result, Tensor) else list(result)
        outputs = [T.as_tensor(o) for o in outputs]

        self.inputs = leaves
        self._output_tensors = outputs
        self.nodes = tape.records
        self.outputs = [tape._ids.get(id(o), -1) for o in outputs]
        return outputs

    def evaluate(self, inputs):
        """Plain forward evaluation (no recording, no gradient tracking), used for finite differences."""

        arrays = self._check_inputs(inputs)
        with T.no_grad():
            result = self.fn(*(Tensor(a) for a in arrays))
        outputs = [result] if isinstance(result, Tensor) else list(result)
        return [T.as_tensor(o).data for o in outputs]

    def backward(self, seed=None, create_graph=False):
        """
        Differentiates the outputs of the last forward run back to the inputs.

        Args:
            seed (Tensor | list[Tensor] | None): Output cotangents; defaults to 1 for scalar outputs.
            create_graph (bool): Keep the backward pass differentiable.

        Returns:
            list[Tensor]: One gradient per input; also stored on each input's `.grad`.

        Raises:
            StateError: If forward has not run.
            ShapeError: If a seed does not match its output.
        """

        if self._output_tensors is None:
            raise StateError(f"{self.name}: backward called before forward.")
        seeds = seed if isinstance(seed, (list, tuple)) else [seed] * len(self._output_tensors)
        grads = T.grad(self._output_tensors, self.inputs, grad_outputs=seeds, create_graph=create_graph)
        for leaf, g in zip(self.inputs, grads):
            leaf.grad = g
        return grads

##################################################################################################
#                                        GRADIENT CHECK                                          #
##################################################################################################

def grad_check(graph, inputs, epsilon=1e-5, seed=0):
    """
    Compares reverse-mode gradients against central finite differences.

    Non-scalar outputs are reduced with a fixed random projection so a single scalar is checked.

    Args:
        graph (ComputationGraph): Graph under test.
        inputs (list[np.ndarray | Tensor]): Evaluation point.
        epsilon (float): Finite-difference step in (0, 1e-2].
        seed (int): Seed of the output projection.

    Returns:
        float: Worst relative discrepancy |a - b| / max(|a|, |b|, floor) over all input entries.

    Raises:
        ValidationError: On non-finite inputs/outputs or an out-of-range epsilon.
    """

    if not 0.0 < epsilon <= MAX_EPSILON:
        raise ValidationError(f"epsilon must lie in (0, {MAX_EPSILON}], got {epsilon}.")
    arrays = [np.array(x.data if isinstance(x, Tensor) else x, dtype=T.DTYPE) for x in inputs]
    if not all(np.all(np.isfinite(a)) for a in arrays):
        raise ValidationError("grad_check inputs must be finite.")

    outputs = graph.forward(arrays)
    if not all(np.all(np.isfinite(o.data)) for o in outputs):
        raise ValidationError("grad_check outputs must be finite.")
    rng = np.random.default_rng(seed)
    projections = [rng.standard_normal(o.shape) for o in outputs]

    seeds = [Tensor(p) for p in projections]
    analytic = [g.data for g in graph.backward(seeds)]

    def projected(values):
        return sum(float(np.sum(p * o)) for p, o in zip(projections, graph.evaluate(values)))

    worst = 0.0
    for k, base in enumerate(arrays):
        flat = base.reshape(-1)
        for j in range(flat.size):
            original = flat[j]
            flat[j] = original + epsilon
            plus = projected(arrays)
            flat[j] = original - epsilon
            minus = projected(arrays)
            flat[j] = original
            numeric = (plus - minus) / (2.0 * epsilon)
            exact = analytic[k].reshape(-1)[j]
            if not np.isfinite(numeric):
                raise ValidationError(f"Non-finite finite difference at input {k}, entry {j}.")
            denom = max(abs(numeric), abs(exact), RELATIVE_FLOOR)
            worst = max(worst, abs(numeric - exact) / denom)
    return worst

##################################################################################################
#                                        SECOND ORDER                                            #
##################################################################################################

def flatten(tensors):
    return np.concatenate([t.data.reshape(-1) for t in tensors]) if tensors else np.zeros(0)


def _loss_and_params(loss_graph, params):
    if isinstance(loss_graph, ComputationGraph):
        loss = loss_graph.forward(params)[0]
        params = loss_graph.inputs
    else:
        loss = loss_graph()
    if loss.size != 1:
        raise ValidationError(f"Loss must be scalar, got shape {loss.shape}.")
    return loss, list(params)


class HessianOperator:
    """
    Matrix-free Hessian of a scalar loss with respect to a list of parameter tensors.

    The gradient graph is built once; every `matvec` differentiates <grad, v> through it.

    Args:
        loss_graph (ComputationGraph | Callable[[], Tensor]): Scalar loss. A ComputationGraph is
            run on `params`; a callable must close over the `params` tensors.
        params (list[Tensor | np.ndarray]): Differentiation variables.
    """

    def __init__(self, loss_graph, params):
        self.loss, self.params = _loss_and_params(loss_graph, params)
        self.sizes = [p.size for p in self.params]
        self.dim = int(sum(self.sizes))
        self.gradient = T.grad(self.loss, self.params, create_graph=True)

    def split(self, flat):
        pieces, start = [], 0
        for p, size in zip(self.params, self.sizes):
            pieces.append(flat[start:start + size].reshape(p.shape))
            start += size
        return pieces

    def matvec(self, v):
        v = np.asarray(v.data if isinstance(v, Tensor) else v, dtype=T.DTYPE).reshape(-1)
        if v.size != self.dim:
            raise ShapeError(f"Vector has {v.size} entries, parameters have {self.dim}.")
        inner = None
        for g, piece in zip(self.gradient, self.split(v)):
            term = (g * Tensor(piece)).sum()
            inner = term if inner is None else inner + term
        if inner is None or not inner.requires_grad:
            return np.zeros(self.dim)
        return flatten(T.grad(inner, self.params))


def hessian_vector_product(loss_graph, params, v):
    """
    Computes H·v for a scalar loss.

    Args:
        loss_graph (ComputationGraph | Callable[[], Tensor]): Scalar loss.
        params (list[Tensor | np.ndarray]): Differentiation variables.
        v (np.ndarray | Tensor): Direction, shaped like the flattened parameter vector.

    Returns:
        Tensor: Flat H·v.
    """

    return Tensor(HessianOperator(loss_graph, params).matvec(v))


def exact_hessian(loss_graph, params, limit=ORACLE_LIMIT):
    """
    Dense Hessian assembled column by column from Hessian-vector products.

    Returns:
        tuple[np.ndarray, float]: The symmetrized matrix (H + Hᵀ)/2 and max|H - Hᵀ| before
        symmetrization.

    Raises:
        OracleLimitError: If the parameter count exceeds `limit`.
    """

    count = sum(int(np.asarray(p.data if isinstance(p, Tensor) else p).size) for p in params)
    if count > limit:
        raise OracleLimitError(f"Dense Hessian requested for {count} parameters (limit {limit}).")
    op = HessianOperator(loss_graph, params)
    columns = np.zeros((op.dim, op.dim))
    basis = np.zeros(op.dim)
    for j in range(op.dim):
        basis[j] = 1.0
        columns[:, j] = op.matvec(basis)
        basis[j] = 0.0
    asymmetry = float(np.max(np.abs(columns - columns.T))) if op.dim else 0.0
    return 0.5 * (columns + columns.T), asymmetry
