"""Reverse-mode differentiation over a per-forward tape.

Each forward pass records a fresh tape: nodes are appended in creation
order, which is already a topological order, so the backward sweep is a
single reverse iteration. Parameters live outside the tape in a
:class:`ParamStore`; ``backward`` accumulates into their gradient buffers,
so calling it twice without zeroing doubles every gradient.

``gradcheck`` is the finite-difference referee: central differences on a
seeded sample of coordinates per parameter tensor, run in double precision.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Optional

import hashlib
import numpy as np

from . import kernels
from .tensor import PrecisionError, ShapeError, Tensor, check_same_precision, dtype_for


def seeded_rng(seed: int, *labels) -> np.random.Generator:
    """Generator derived deterministically from a seed and string labels."""
    digest = hashlib.sha256(("/".join([str(seed), *map(str, labels)])).encode()).digest()
    return np.random.default_rng(np.frombuffer(digest[:16], dtype=np.uint64))


class Parameter:
    __slots__ = ("value", "grad", "trainable")

    def __init__(self, value: Tensor, trainable: bool = True):
        self.value = value
        self.grad = np.zeros(value.shape, dtype=value.dtype)
        self.trainable = trainable


class ParamStore:
    """Named parameter registry: value, gradient accumulator, trainable flag."""

    def __init__(self, precision: str = "single"):
        self.precision = precision
        self.dtype = dtype_for(precision)
        self._entries: dict[str, Parameter] = {}

    def register(self, name: str, value, trainable: bool = True) -> str:
        if name in self._entries:
            raise ValueError(f"parameter {name!r} already registered")
        tensor = value if isinstance(value, Tensor) else Tensor(np.asarray(value, dtype=self.dtype))
        if tensor.dtype != self.dtype:
            tensor = tensor.astype(self.precision)
        self._entries[name] = Parameter(tensor, trainable)
        return name

    def __contains__(self, name):
        return name in self._entries

    def __getitem__(self, name: str) -> Parameter:
        return self._entries[name]

    def names(self):
        return list(self._entries)

    def items(self):
        return self._entries.items()

    def trainable_items(self):
        return [(n, p) for n, p in self._entries.items() if p.trainable]

    def set_value(self, name: str, value) -> None:
        entry = self._entries[name]
        arr = np.asarray(value, dtype=self.dtype)
        if arr.shape != entry.value.shape:
            raise ShapeError(
                f"parameter {name!r}: new value shape {arr.shape} does not match {entry.value.shape}"
            )
        entry.value = Tensor(arr)

    def zero_grads(self) -> None:
        for p in self._entries.values():
            p.grad[...] = 0

    def param_count(self, trainable_only: bool = True) -> int:
        return sum(p.value.size for p in self._entries.values() if p.trainable or not trainable_only)

    def state_arrays(self) -> dict:
        """All values (trainable and buffers) as plain arrays, for checkpointing."""
        return {name: p.value.data.copy() for name, p in self._entries.items()}


class Node:
    """One recorded operation: output tensor plus how to push gradients back."""

    __slots__ = ("idx", "kind", "inputs", "value", "grad_fn", "scope", "meta", "param_name")

    def __init__(self, idx, kind, inputs, value, grad_fn, scope, meta=None, param_name=None):
        self.idx = idx
        self.kind = kind
        self.inputs = inputs
        self.value = value
        self.grad_fn = grad_fn
        self.scope = scope
        self.meta = meta
        self.param_name = param_name

    @property
    def shape(self):
        return self.value.shape


class Tape:
    """Dynamic computation graph, rebuilt on every forward pass."""

    def __init__(self, params: Optional[ParamStore] = None, training: bool = True):
        self.params = params
        self.training = training
        self.nodes: list[Node] = []
        self.staged_updates: list[tuple[str, np.ndarray]] = []
        self._scope: list[str] = []

    # -- graph construction ------------------------------------------------

    @contextmanager
    def scope(self, name: str):
        self._scope.append(name)
        try:
            yield
        finally:
            self._scope.pop()

    @property
    def current_scope(self) -> str:
        return ".".join(self._scope)

    def record(self, kind: str, inputs: tuple, value: Tensor,
               grad_fn: Optional[Callable], meta=None, param_name=None) -> Node:
        if len(inputs) > 1:
            check_same_precision(*[n.value.data for n in inputs])
        node = Node(len(self.nodes), kind, inputs, value, grad_fn, self.current_scope,
                    meta=meta, param_name=param_name)
        self.nodes.append(node)
        return node

    def constant(self, data) -> Node:
        tensor = data if isinstance(data, Tensor) else Tensor(data)
        return self.record("constant", (), tensor, None)

    def param(self, name: str) -> Node:
        entry = self.params[name]
        return self.record("param", (), entry.value, None, param_name=name)

    def stage_update(self, name: str, value: np.ndarray) -> None:
        """Queue a buffer update (e.g. BN running stats) for the commit phase."""
        self.staged_updates.append((name, value))

    def commit_updates(self) -> None:
        for name, value in self.staged_updates:
            self.params.set_value(name, value)
        self.staged_updates.clear()

    # -- built-in ops --------------------------------------------------------

    def conv2d(self, x: Node, w: Node, stride: int = 1, padding: int = 0) -> Node:
        xd, wd = x.value.data, w.value.data
        out = kernels.conv2d(xd, wd, stride, padding)

        def grad_fn(g):
            return (kernels.conv2d_input_grad(g, wd, xd.shape, stride, padding),
                    kernels.conv2d_kernel_grad(g, xd, wd.shape, stride, padding))

        meta = {"kernel_shape": wd.shape, "out_shape": out.shape, "stride": stride, "padding": padding}
        return self.record("conv2d", (x, w), Tensor(out), grad_fn, meta=meta)

    def relu(self, x: Node) -> Node:
        xd = x.value.data
        mask = xd > 0  # subgradient at exactly 0 is 0
        out = np.where(mask, xd, xd.dtype.type(0))

        def grad_fn(g):
            return (np.where(mask, g, g.dtype.type(0)),)

        return self.record("relu", (x,), Tensor(out), grad_fn, meta={"mask": mask})

    def add(self, a: Node, b: Node) -> Node:
        out = kernels.add(a.value.data, b.value.data)

        def grad_fn(g):
            return (g, g)

        return self.record("add", (a, b), Tensor(out), grad_fn)

    def scale(self, x: Node, c: float) -> Node:
        xd = x.value.data
        factor = xd.dtype.type(c)
        out = xd * factor

        def grad_fn(g):
            return (g * factor,)

        return self.record("scale", (x,), Tensor(out), grad_fn)

    def global_avg_pool(self, x: Node) -> Node:
        xd = x.value.data
        out = kernels.global_avg_pool(xd)

        def grad_fn(g):
            return (kernels.global_avg_pool_grad(g, xd.shape),)

        return self.record("global_avg_pool", (x,), Tensor(out), grad_fn,
                           meta={"in_shape": xd.shape})

    def flatten(self, x: Node) -> Node:
        xd = x.value.data
        out = xd.reshape(xd.shape[0], -1)

        def grad_fn(g):
            return (g.reshape(xd.shape),)

        return self.record("flatten", (x,), Tensor(out), grad_fn)

    def linear(self, x: Node, w: Node, b: Node) -> Node:
        xd, wd, bd = x.value.data, w.value.data, b.value.data
        out = kernels.linear(xd, wd, bd)

        def grad_fn(g):
            return (g @ wd, g.T @ xd, g.sum(axis=0))

        return self.record("linear", (x, w, b), Tensor(out), grad_fn)

    def sum(self, x: Node) -> Node:
        xd = x.value.data
        out = xd.sum()

        def grad_fn(g):
            return (np.full(xd.shape, g, dtype=xd.dtype),)

        return self.record("sum", (x,), Tensor(out), grad_fn)

    # -- backward ------------------------------------------------------------

    def backward(self, loss: Node) -> None:
        """Reverse accumulation from a scalar loss into the ParamStore."""
        if loss.value.shape != ():
            raise ShapeError(f"backward requires a scalar loss, got shape {loss.value.shape}")
        grads: dict[int, np.ndarray] = {loss.idx: np.asarray(loss.value.dtype.type(1.0))}
        # grad_fn outputs may alias each other (add hands the same array to
        # both inputs), so accumulate copy-on-write: only arrays this sweep
        # allocated itself are ever mutated in place.
        owned: set[int] = {loss.idx}
        for node in reversed(self.nodes):
            g = grads.pop(node.idx, None)
            owned.discard(node.idx)
            if g is None:
                continue
            if node.kind == "param":
                self.params[node.param_name].grad += g
                continue
            if node.grad_fn is None:
                continue
            input_grads = node.grad_fn(g)
            for inp, ig in zip(node.inputs, input_grads):
                if ig is None:
                    continue
                if inp.idx not in grads:
                    grads[inp.idx] = ig
                elif inp.idx in owned:
                    grads[inp.idx] += ig
                else:
                    grads[inp.idx] = grads[inp.idx] + ig
                    owned.add(inp.idx)

    def relu_signature(self) -> list:
        """Sign masks of every ReLU on the tape, in creation order."""
        return [n.meta["mask"] for n in self.nodes if n.kind == "relu"]


# -- finite-difference checker ----------------------------------------------


@dataclass
class GradcheckResult:
    max_rel_err: float
    per_param: dict = field(default_factory=dict)
    checked: int = 0
    skipped: int = 0

    def passed(self, threshold: float = 1e-6) -> bool:
        return self.max_rel_err < threshold


def _masks_equal(sig_a, sig_b) -> bool:
    if len(sig_a) != len(sig_b):
        return False
    return all(a.shape == b.shape and np.array_equal(a, b) for a, b in zip(sig_a, sig_b))


def gradcheck(loss_builder: Callable[[Tape], Node], params: ParamStore,
              eps: float = 1e-5, sample: int = 64, seed: int = 0,
              atol: float = 1e-10) -> GradcheckResult:
    """Compare reverse-mode gradients against central finite differences.

    ``loss_builder`` must build the scalar loss on the tape it is handed;
    it is re-invoked for every perturbed evaluation. For each trainable
    tensor a seeded sample of coordinates (all, if the tensor is small) is
    checked. Coordinates whose +/-eps evaluations land on different sides
    of a ReLU kink are skipped: the two-sided difference is meaningless
    across the non-differentiable point.

    A coordinate whose two gradients agree within ``atol`` absolute counts
    as passing before the relative comparison: central differences of an
    O(1) loss carry about 1e-12..1e-11 of rounding noise at eps=1e-5, so a
    tiny true gradient (a BN shift feeding a 1x1 conv into the next BN has
    exactly zero) can never clear a purely relative bar, while any real
    backward defect disagrees by many orders more than ``atol``.
    """
    if params.precision != "double":
        raise PrecisionError("gradcheck requires a double-precision ParamStore")

    params.zero_grads()
    base_tape = Tape(params, training=True)
    loss = loss_builder(base_tape)
    base_tape.backward(loss)
    analytic = {name: p.grad.copy() for name, p in params.trainable_items()}

    def eval_loss(name, idx, delta):
        original = params[name].value.data
        perturbed = original.copy()
        perturbed[idx] += delta
        params.set_value(name, perturbed)
        try:
            tape = Tape(params, training=True)
            value = float(loss_builder(tape).value.data)
            return value, tape.relu_signature()
        finally:
            params.set_value(name, original)

    result = GradcheckResult(max_rel_err=0.0)
    for name, p in params.trainable_items():
        size = p.value.size
        if size <= sample:
            flat_indices = np.arange(size)
        else:
            flat_indices = seeded_rng(seed, "gradcheck", name).choice(size, size=sample, replace=False)
        worst = 0.0
        for flat in flat_indices:
            idx = np.unravel_index(int(flat), p.value.shape)
            plus, sig_plus = eval_loss(name, idx, eps)
            minus, sig_minus = eval_loss(name, idx, -eps)
            if not _masks_equal(sig_plus, sig_minus):
                result.skipped += 1
                continue
            numeric = (plus - minus) / (2 * eps)
            ana = float(analytic[name][idx])
            result.checked += 1
            if abs(ana - numeric) < atol:
                continue
            rel = abs(ana - numeric) / max(abs(ana), abs(numeric), 1e-12)
            worst = max(worst, rel)
        result.per_param[name] = worst
        result.max_rel_err = max(result.max_rel_err, worst)
    return result
