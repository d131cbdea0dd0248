"""Dense float64 tensors with reverse-mode differentiation.

Tensors wrap read-only numpy arrays. A primitive applied to tensors that
belong to a :class:`Tape` records a node holding its vector-Jacobian product;
:meth:`Tape.backward` replays the recorded graph in reverse topological
order. Tensors without a tape are plain constants and record nothing.

Broadcasting is limited to leading-axis expansion: the shape of one operand
of a binary primitive must be a suffix of the other's.
"""
import logging
from itertools import count

import numpy as np
from networkx import DiGraph, ancestors, is_directed_acyclic_graph, topological_sort

from trajmoe.checks import check_seed

logger = logging.getLogger(__name__)

_CHECKED = True
# kink inputs within this distance of zero enter the branch signature by value
KINK_TOL = 1e-7


class ShapeError(ValueError):
    """Shape mismatch in a primitive."""

    def __init__(self, op, shape_a, shape_b):
        self.op = op
        self.shapes = (tuple(shape_a), tuple(shape_b))
        super(ShapeError, self).__init__(
            "%s: incompatible shapes %s and %s" % (op, list(shape_a), list(shape_b))
        )


class NonFiniteError(FloatingPointError):
    """A checked tensor holds NaN or Inf."""


class DivergenceError(FloatingPointError):
    """Training left the numerically safe range."""


def set_checked(enabled: bool):
    """Switches finiteness checks on construction. Returns the previous mode."""
    global _CHECKED
    previous = _CHECKED
    _CHECKED = bool(enabled)
    return previous


class Tensor:
    """Immutable float64 array, optionally recorded on a tape.

    Args:
        data (array_like): Values, copied.
        tape (Tape, optional): Tape the tensor belongs to. Defaults to None.
        node (int, optional): Node id on the tape. Defaults to None.
    """

    __slots__ = ("_value", "tape", "node")

    def __init__(self, data, tape=None, node=None):
        self._set(np.array(data, dtype=np.float64), tape, node)

    @classmethod
    def _wrap(cls, value, tape=None, node=None):
        tensor = cls.__new__(cls)
        tensor._set(np.asarray(value, dtype=np.float64), tape, node)
        return tensor

    def _set(self, value, tape, node):
        if _CHECKED and not np.isfinite(value).all():
            raise NonFiniteError("tensor of shape %s holds NaN or Inf" % list(value.shape))
        if value.flags.writeable:
            value.setflags(write=False)
        self._value = value
        self.tape = tape
        self.node = node

    @property
    def shape(self):
        return list(self._value.shape)

    @property
    def value(self):
        """Read-only numpy view."""
        return self._value

    @property
    def data(self):
        """Values in row-major order."""
        return self._value.reshape(-1)

    @property
    def ndim(self):
        return self._value.ndim

    def item(self):
        return float(self._value.reshape(-1)[0]) if self._value.size == 1 else self._value.item()

    def numpy(self):
        return np.array(self._value)

    def __repr__(self):
        return "Tensor(shape=%s, tracked=%s)" % (self.shape, self.tape is not None)

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x):
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


class Tape:
    """Ordered record of primitive operations.

    Nodes are kept in a ``networkx.DiGraph`` whose edges run from inputs to
    outputs. Node ids grow with recording order, so every input precedes the
    operations that consume it.
    """

    def __init__(self):
        self.graph = DiGraph()
        self._ids = count()
        self._leaves = {}
        self._patterns = []

    def __len__(self):
        return self.graph.number_of_nodes()

    def watch(self, value, name=None):
        """Registers a differentiable leaf and returns it as a tensor."""
        node = next(self._ids)
        tensor = Tensor(value, tape=self, node=node)
        self.graph.add_node(node, op="leaf", name=name, inputs=(), vjp=None)
        if name is not None:
            if name in self._leaves:
                raise ValueError("Leaf %s already watched on this tape." % name)
            self._leaves[name] = tensor
        return tensor

    def record(self, op, inputs, value, vjp):
        node = next(self._ids)
        input_nodes = tuple(t.node if t.tape is self else None for t in inputs)
        self.graph.add_node(node, op=op, inputs=input_nodes, vjp=vjp)
        for parent in input_nodes:
            if parent is not None:
                self.graph.add_edge(parent, node)
        return Tensor._wrap(value, tape=self, node=node)

    def note_pattern(self, op, pattern, inputs=None):
        """Remembers a piecewise branch choice (ReLU, |x| and clip sides, top-k).

        With ``inputs``, the values lying within KINK_TOL of the kink are kept
        too, so any move of such an input changes the signature.
        """
        near = b""
        if inputs is not None:
            inputs = np.asarray(inputs, dtype=np.float64)
            near = inputs[np.abs(inputs) <= KINK_TOL].tobytes()
        self._patterns.append((op, np.asarray(pattern).tobytes(), near))

    def signature(self):
        """Branch choices seen so far; differs across a kink."""
        return tuple(self._patterns)

    @property
    def leaves(self):
        return dict(self._leaves)

    def backward(self, loss):
        """Propagates d(loss)/d(leaf) to every watched leaf.

        Args:
            loss (Tensor): Scalar recorded on this tape.

        Returns:
            dict: leaf name -> gradient array (zeros for unreached leaves).
        """
        if int(np.prod(loss.shape)) != 1:
            raise ValueError("backward requires a scalar loss, got shape %s" % loss.shape)
        if loss.tape is not self:
            raise ValueError("Loss was not recorded on this tape.")
        relevant = ancestors(self.graph, loss.node)
        relevant.add(loss.node)
        sub_graph = self.graph.subgraph(relevant)
        if not is_directed_acyclic_graph(sub_graph):
            raise RuntimeError("Tape is not acyclic.")
        pending = {loss.node: np.ones(loss.value.shape)}
        reached = {}
        for node in reversed(list(topological_sort(sub_graph))):
            grad = pending.pop(node, None)
            if grad is None:
                continue
            attributes = self.graph.nodes[node]
            if attributes["vjp"] is None:
                reached[node] = grad
                continue
            for parent, parent_grad in zip(attributes["inputs"], attributes["vjp"](grad)):
                if parent is None or parent_grad is None:
                    continue
                if parent in pending:
                    pending[parent] = pending[parent] + parent_grad
                else:
                    pending[parent] = parent_grad
        grads = {}
        for name, leaf in self._leaves.items():
            if leaf.node in reached:
                grads[name] = np.reshape(reached[leaf.node], leaf.value.shape)
            else:
                grads[name] = np.zeros(leaf.value.shape)
        return grads


def backward(tape, loss):
    """Functional form of :meth:`Tape.backward`."""
    return tape.backward(loss)


def _tape_of(inputs):
    tape = None
    for tensor in inputs:
        if tensor.tape is not None:
            if tape is not None and tensor.tape is not tape:
                raise ValueError("Tensors were recorded on different tapes.")
            tape = tensor.tape
    return tape


def _result(op, inputs, value, vjp):
    tape = _tape_of(inputs)
    if tape is None:
        return Tensor._wrap(value)
    return tape.record(op, inputs, value, vjp)


def _check_broadcast(op, shape_a, shape_b):
    shorter, longer = sorted((tuple(shape_a), tuple(shape_b)), key=len)
    if len(shorter) and longer[len(longer) - len(shorter):] != shorter:
        raise ShapeError(op, shape_a, shape_b)


def _unbroadcast(grad, shape):
    shape = tuple(shape)
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    return grad.sum(axis=tuple(range(extra))).reshape(shape)


# Elementwise binary primitives


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a.shape, b.shape)
    value = a.value + b.value
    return _result(
        "add",
        (a, b),
        value,
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a.shape, b.shape)
    value = a.value - b.value
    return _result(
        "sub",
        (a, b),
        value,
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a.shape, b.shape)
    value = a.value * b.value
    return _result(
        "mul",
        (a, b),
        value,
        lambda g: (
            _unbroadcast(g * b.value, a.shape),
            _unbroadcast(g * a.value, b.shape),
        ),
    )


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("div", a.shape, b.shape)
    value = a.value / b.value
    return _result(
        "div",
        (a, b),
        value,
        lambda g: (
            _unbroadcast(g / b.value, a.shape),
            _unbroadcast(-g * value / b.value, b.shape),
        ),
    )


def minimum(a, b):
    """Elementwise minimum; ties route the gradient to ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("minimum", a.shape, b.shape)
    pick_a = a.value <= b.value
    value = np.where(pick_a, a.value, b.value)
    return _result(
        "minimum",
        (a, b),
        value,
        lambda g: (
            _unbroadcast(np.where(pick_a, g, 0.0), a.shape),
            _unbroadcast(np.where(pick_a, 0.0, g), b.shape),
        ),
    )


def matmul(a, b):
    """Matrix product over the last two axes.

    ``b`` either shares ``a``'s leading axes or is a plain matrix that is
    expanded over them.
    """
    a, b = as_tensor(a), as_tensor(b)
    if (
        a.ndim < 2
        or b.ndim < 2
        or a.shape[-1] != b.shape[-2]
        or (b.ndim > 2 and a.shape[:-2] != b.shape[:-2])
    ):
        raise ShapeError("matmul", a.shape, b.shape)
    value = a.value @ b.value

    def vjp(g):
        grad_a = g @ np.swapaxes(b.value, -1, -2)
        grad_b = np.swapaxes(a.value, -1, -2) @ g
        return grad_a, _unbroadcast(grad_b, b.shape)

    return _result("matmul", (a, b), value, vjp)


# Elementwise unary primitives


def relu(x):
    x = as_tensor(x)
    positive = x.value > 0
    if x.tape is not None:
        x.tape.note_pattern("relu", positive, x.value)
    return _result("relu", (x,), np.where(positive, x.value, 0.0), lambda g: (g * positive,))


def absolute(x):
    x = as_tensor(x)
    sign = np.sign(x.value)
    if x.tape is not None:
        x.tape.note_pattern("abs", sign, x.value)
    return _result("abs", (x,), np.abs(x.value), lambda g: (g * sign,))


def log(x):
    x = as_tensor(x)
    with np.errstate(divide="ignore", invalid="ignore"):
        value = np.log(x.value)
    return _result("log", (x,), value, lambda g: (g / x.value,))


def exp(x):
    x = as_tensor(x)
    with np.errstate(over="ignore"):
        value = np.exp(x.value)
    return _result("exp", (x,), value, lambda g: (g * value,))


def sigmoid(x):
    x = as_tensor(x)
    value = 0.5 * (1.0 + np.tanh(0.5 * x.value))
    return _result("sigmoid", (x,), value, lambda g: (g * value * (1.0 - value),))


def softplus(x):
    x = as_tensor(x)
    value = np.logaddexp(0.0, x.value)
    slope = 0.5 * (1.0 + np.tanh(0.5 * x.value))
    return _result("softplus", (x,), value, lambda g: (g * slope,))


def clip(x, low: float, high: float):
    """Clamps into [low, high]; zero gradient outside the band."""
    x = as_tensor(x)
    inside = (x.value >= low) & (x.value <= high)
    if x.tape is not None:
        distance = np.minimum(np.abs(x.value - low), np.abs(x.value - high))
        x.tape.note_pattern("clip", np.sign(x.value - low) + np.sign(x.value - high), distance)
    return _result(
        "clip", (x,), np.clip(x.value, low, high), lambda g: (np.where(inside, g, 0.0),)
    )


# Reductions and normalisations


def _expand_reduced(g, shape, axis, keepdims):
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def sum(x, axis=None, keepdims=False):
    x = as_tensor(x)
    value = np.sum(x.value, axis=axis, keepdims=keepdims)
    return _result(
        "sum",
        (x,),
        value,
        lambda g: (np.array(_expand_reduced(g, x.value.shape, axis, keepdims)),),
    )


def mean(x, axis=None, keepdims=False):
    x = as_tensor(x)
    value = np.mean(x.value, axis=axis, keepdims=keepdims)
    n = x.value.size if axis is None else x.value.shape[axis]
    return _result(
        "mean",
        (x,),
        value,
        lambda g: (np.array(_expand_reduced(g, x.value.shape, axis, keepdims)) / n,),
    )


def softmax(x):
    """Softmax over the last axis, computed after max subtraction."""
    x = as_tensor(x)
    shifted = x.value - x.value.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    value = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        return (value * (g - (g * value).sum(axis=-1, keepdims=True)),)

    return _result("softmax", (x,), value, vjp)


def layer_norm(x, eps: float = 1e-5):
    """Normalises the last axis to zero mean and unit population variance."""
    x = as_tensor(x)
    centered = x.value - x.value.mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt((centered ** 2).mean(axis=-1, keepdims=True) + eps)
    value = centered * inv_std

    def vjp(g):
        return (
            inv_std
            * (
                g
                - g.mean(axis=-1, keepdims=True)
                - value * (g * value).mean(axis=-1, keepdims=True)
            ),
        )

    return _result("layer_norm", (x,), value, vjp)


# Shape and indexing


def reshape(x, shape):
    x = as_tensor(x)
    try:
        value = x.value.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", x.shape, shape)
    return _result("reshape", (x,), value, lambda g: (g.reshape(x.value.shape),))


def transpose(x, axes):
    x = as_tensor(x)
    inverse = np.argsort(axes)
    return _result(
        "transpose", (x,), np.transpose(x.value, axes), lambda g: (np.transpose(g, inverse),)
    )


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    try:
        value = np.concatenate([t.value for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError("concat", tensors[0].shape, tensors[-1].shape)
    bounds = np.cumsum([t.value.shape[axis] for t in tensors])[:-1]
    return _result(
        "concat", tuple(tensors), value, lambda g: tuple(np.split(g, bounds, axis=axis))
    )


def gather(x, index):
    """Rows of ``x`` selected by an integer index along axis 0."""
    x = as_tensor(x)
    index = np.asarray(index, dtype=np.int64)
    rows = x.value.shape[0]

    def vjp(g):
        grad = np.zeros(x.value.shape)
        np.add.at(grad, index, g)
        return (grad,)

    if index.size and (index.min() < 0 or index.max() >= rows):
        raise ShapeError("gather", x.shape, index.shape)
    return _result("gather", (x,), x.value[index], vjp)


def scatter_add(x, index, rows: int):
    """Adds rows of ``x`` into a zero tensor with ``rows`` rows (inverse of gather)."""
    x = as_tensor(x)
    index = np.asarray(index, dtype=np.int64)
    if index.shape[0] != x.value.shape[0]:
        raise ShapeError("scatter_add", x.shape, index.shape)
    value = np.zeros((rows,) + x.value.shape[1:])
    np.add.at(value, index, x.value)
    return _result("scatter_add", (x,), value, lambda g: (g[index],))


def take_along(x, index):
    """Entries along the last axis picked per row by ``index``."""
    x = as_tensor(x)
    index = np.asarray(index, dtype=np.int64)
    if index.shape[:-1] != x.value.shape[:-1]:
        raise ShapeError("take_along", x.shape, index.shape)

    def vjp(g):
        grad = np.zeros(x.value.shape)
        # repeated indices accumulate
        lead = tuple(np.indices(index.shape)[:-1])
        np.add.at(grad, lead + (index,), g)
        return (grad,)

    return _result("take_along", (x,), np.take_along_axis(x.value, index, axis=-1), vjp)


def put_along(x, index, width: int):
    """Places ``x`` at ``index`` of a zero tensor whose last axis has ``width`` entries."""
    x = as_tensor(x)
    index = np.asarray(index, dtype=np.int64)
    if index.shape != x.value.shape:
        raise ShapeError("put_along", x.shape, index.shape)
    value = np.zeros(x.value.shape[:-1] + (width,))
    np.put_along_axis(value, index, x.value, axis=-1)
    return _result(
        "put_along", (x,), value, lambda g: (np.take_along_axis(g, index, axis=-1),)
    )


# Finite-difference oracle


class GradCheckEntry:
    """One checked parameter entry."""

    __slots__ = ("name", "index", "analytic", "numeric", "error", "skipped")

    def __init__(self, name, index, analytic, numeric, error, skipped):
        self.name = name
        self.index = index
        self.analytic = analytic
        self.numeric = numeric
        self.error = error
        self.skipped = skipped


class GradCheckReport:
    """Result of :func:`grad_check`.

    Args:
        entries (list): Checked entries.
        tol (float): Relative tolerance.
    """

    def __init__(self, entries, tol):
        self.entries = entries
        self.tol = tol

    @property
    def checked(self):
        return [e for e in self.entries if not e.skipped]

    @property
    def skipped(self):
        return [e for e in self.entries if e.skipped]

    @property
    def max_error(self):
        errors = [e.error for e in self.checked]
        return max(errors) if errors else 0.0

    @property
    def passed(self):
        return all(e.error <= self.tol for e in self.checked)

    def failures(self):
        return [e for e in self.checked if e.error > self.tol]

    def per_parameter(self):
        """Maximum error per parameter name."""
        worst = {}
        for entry in self.checked:
            worst[entry.name] = max(worst.get(entry.name, 0.0), entry.error)
        return worst

    def __str__(self):
        return "grad_check %s: %s entries checked, %s skipped at kinks, max error %.3e (tol %.1e)" % (
            "passed" if self.passed else "FAILED",
            len(self.checked),
            len(self.skipped),
            self.max_error,
            self.tol,
        )


def _evaluate(f, params):
    tape = Tape()
    bound = {name: tape.watch(value, name) for name, value in params.items()}
    loss = f(bound)
    if int(np.prod(loss.shape)) != 1:
        raise ValueError("grad_check requires a scalar function.")
    return tape, loss


def grad_check(f, params, h: float = 1e-5, tol: float = 1e-4, sample: int = None, seed=0):
    """Compares reverse-mode gradients with central finite differences.

    Args:
        f (callable): Maps a dict of watched tensors to a scalar tensor.
        params (dict): Parameter name -> array.
        h (float, optional): Step in (0, 1e-2]. Defaults to 1e-5.
        tol (float, optional): Relative tolerance. Defaults to 1e-4.
        sample (int, optional): Entries checked per parameter, seeded.
            Defaults to None (every entry).
        seed (int, optional): Seed for the entry sample. Defaults to 0.

    Returns:
        GradCheckReport: per-entry |ad - fd| / max(1, |ad|, |fd|).
        Entries whose branch signature differs between x+h and x-h sit on a
        kink and are skipped.
    """
    if not 0 < h <= 1e-2:
        raise ValueError("Step h must lie in (0, 1e-2], got %s." % h)
    params = {name: np.array(value, dtype=np.float64) for name, value in params.items()}
    tape, loss = _evaluate(f, params)
    _, again = _evaluate(f, params)
    if loss.item() != again.item():
        raise ValueError("Function is not deterministic: %r != %r" % (loss.item(), again.item()))
    analytic = tape.backward(loss)
    random_state = check_seed(seed)

    entries = []
    for name, value in params.items():
        size = value.size
        if sample is None or sample >= size:
            flat_indices = np.arange(size)
        else:
            flat_indices = np.sort(random_state.choice(size, sample, replace=False))
        for flat in flat_indices:
            index = np.unravel_index(flat, value.shape)
            values = []
            signatures = []
            for step in (h, -h):
                shifted = dict(params)
                shifted[name] = value.copy()
                shifted[name][index] += step
                shifted_tape, shifted_loss = _evaluate(f, shifted)
                values.append(shifted_loss.item())
                signatures.append(shifted_tape.signature())
            numeric = (values[0] - values[1]) / (2 * h)
            ad = float(analytic[name][index])
            skipped = signatures[0] != signatures[1]
            error = abs(ad - numeric) / max(1.0, abs(ad), abs(numeric))
            entries.append(GradCheckEntry(name, tuple(int(i) for i in index), ad, numeric, error, skipped))
    report = GradCheckReport(entries, tol)
    logger.debug("%s", report)
    return report
