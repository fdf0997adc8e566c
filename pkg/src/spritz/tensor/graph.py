"""Layered differentiable networks built from the op set in :mod:`.ops`."""
import copy
from dataclasses import dataclass, field

import numpy as np

from . import ops
from .tensor import GraphError, ShapeError, Tensor

LAYER_KINDS = (
    "conv2d", "tconv2d", "dense", "maxpool2x2", "relu", "sigmoid",
    "batchnorm", "flatten", "reshape", "scale",
)


@dataclass
class OpNode:
    kind: str
    params: dict = field(default_factory=dict)
    attrs: dict = field(default_factory=dict)
    tap: str = None
    state: dict = None

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.kind in ("conv2d", "tconv2d"):
            w = self.params["w"]
            if w.shape[:2] != (3, 3):
                raise ValueError(f"{self.kind} kernels are 3x3, got {w.shape[:2]}")
            if self.attrs.get("stride", 1) not in (1, 2):
                raise ValueError("stride must be 1 or 2")


class ModelGraph:
    """An ordered stack of :class:`OpNode` layers with named tap points.

    ``forward`` caches every tapped activation in ``self.taps`` so feature
    extractors (the 2C ``flatten``, an auto-encoder ``latent``) can be read
    back or used as a stopping point.
    """

    def __init__(self, name, input_shape, nodes):
        self.name = name
        self.input_shape = tuple(input_shape)
        self.nodes = list(nodes)
        self.taps = {}
        self.last_input = None
        self.training = False
        self._params = {}
        for i, node in enumerate(self.nodes):
            for pname, t in node.params.items():
                key = f"{i}.{node.kind}.{pname}"
                t.name = key
                t.requires_grad = True
                self._params[key] = t

    def __repr__(self):
        return f"ModelGraph({self.name!r}, input={self.input_shape}, params={self.parameter_count})"

    def parameters(self):
        return dict(self._params)

    @property
    def parameter_count(self):
        return int(sum(t.size for t in self._params.values()))

    def tap_names(self):
        return [n.tap for n in self.nodes if n.tap]

    def requires_grad_(self, flag):
        for t in self._params.values():
            t.requires_grad = flag
        return self

    def zero_grad(self):
        for t in self._params.values():
            t.grad = None

    def copy(self):
        return copy.deepcopy(self)

    def prepare(self, x):
        """Coerce ``x`` to a batched tensor and check it against ``input_shape``."""
        t = x if isinstance(x, Tensor) else Tensor(x)
        shape = t.shape
        expected = self.input_shape
        if len(expected) == 3 and expected[-1] == 1 and shape[-2:] == expected[:2]:
            data = t.data.reshape((-1,) + expected)
        elif shape == expected:
            data = t.data.reshape((1,) + expected)
        elif shape[1:] == expected:
            data = t.data
        else:
            raise ShapeError(f"{self.name}: input shape {shape} does not match {expected}")
        if data is t.data:
            return t
        out = Tensor(data, requires_grad=t.requires_grad)
        if t.requires_grad:
            out._parents = (t,)
            out._backward = lambda g: t._accumulate(g.reshape(shape))
        return out

    def forward(self, x, until=None, record=None):
        """Run the stack on ``x``; stop after the node tapped ``until`` if given."""
        if until is not None and until not in self.tap_names():
            raise KeyError(f"{self.name} has no tap {until!r}")
        h = self.prepare(x)
        self.last_input = x if isinstance(x, Tensor) else h
        self.taps = {}
        for i, node in enumerate(self.nodes):
            try:
                h = self._apply(node, h, record)
            except ShapeError as exc:
                raise ShapeError(f"{self.name} node {i} ({node.kind}): {exc}") from None
            if node.tap:
                self.taps[node.tap] = h
                if node.tap == until:
                    break
        return h

    def _apply(self, node, h, record):
        p, a = node.params, node.attrs
        kind = node.kind
        if kind == "conv2d":
            return ops.conv2d(h, p["w"], p["b"], a.get("stride", 1))
        if kind == "tconv2d":
            return ops.conv_transpose2d(h, p["w"], p["b"], a.get("stride", 2))
        if kind == "dense":
            return ops.dense(h, p["w"], p["b"])
        if kind == "maxpool2x2":
            return ops.maxpool2x2(h, record)
        if kind == "relu":
            return ops.relu(h, record)
        if kind == "sigmoid":
            return ops.sigmoid(h)
        if kind == "batchnorm":
            return ops.batchnorm(h, p["gamma"], p["beta"], node.state, self.training)
        if kind == "flatten":
            return ops.flatten(h)
        if kind == "reshape":
            return ops.reshape(h, a["shape"])
        if kind == "scale":
            return ops.scale(h, a["factor"], a.get("offset", 0.0))
        raise ValueError(kind)

    def __call__(self, x, **kw):
        return self.forward(x, **kw)

    def predict(self, x, until=None):
        """Forward pass without building a gradient tape; returns an ndarray."""
        saved = {k: t.requires_grad for k, t in self._params.items()}
        self.requires_grad_(False)
        try:
            return self.forward(np.asarray(x.data if isinstance(x, Tensor) else x), until=until).data
        finally:
            for k, t in self._params.items():
                t.requires_grad = saved[k]

    def descriptor(self):
        """JSON-able architecture description (no parameter values)."""
        layers = []
        for node in self.nodes:
            entry = {"kind": node.kind, "attrs": _jsonable(node.attrs)}
            if node.params:
                entry["params"] = {k: list(t.shape) for k, t in node.params.items()}
            if node.tap:
                entry["tap"] = node.tap
            layers.append(entry)
        return {"name": self.name, "input_shape": list(self.input_shape), "layers": layers}

    def state_arrays(self):
        """Every parameter and running statistic as a flat name -> array dict."""
        out = {k: t.data for k, t in self._params.items()}
        for i, node in enumerate(self.nodes):
            if node.state is not None:
                for k, v in node.state.items():
                    out[f"{i}.{node.kind}.state.{k}"] = np.asarray(v)
        return out

    def load_state_arrays(self, arrays):
        own = self.state_arrays()
        if set(own) != set(arrays):
            missing = sorted(set(own) ^ set(arrays))
            raise ValueError(f"state mismatch for {self.name}: {missing[:5]}")
        for k, t in self._params.items():
            if arrays[k].shape != t.shape:
                raise ValueError(f"{k}: shape {arrays[k].shape} != {t.shape}")
            t.data = np.array(arrays[k], dtype=np.float64)
        for i, node in enumerate(self.nodes):
            if node.state is not None:
                for k in node.state:
                    node.state[k] = np.array(arrays[f"{i}.{node.kind}.state.{k}"], dtype=np.float64)


def _jsonable(attrs):
    return {k: (list(v) if isinstance(v, tuple) else v) for k, v in attrs.items()}


def forward(graph, x, **kw):
    return graph.forward(x, **kw)


def backward(graph, loss):
    """Backpropagate a scalar ``loss`` produced from ``graph``'s last forward.

    Returns ``{parameter name: grad}`` plus ``"input"`` when the input
    tensor was tracked.
    """
    if graph.last_input is None:
        raise GraphError(f"backward on {graph.name} before any forward pass")
    if np.asarray(loss.data).size != 1:
        raise GraphError("loss must be a scalar")
    loss.backward()
    grads = {k: t.grad for k, t in graph.parameters().items() if t.grad is not None}
    if graph.last_input.grad is not None:
        grads["input"] = graph.last_input.grad
    for g in grads.values():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError("non-finite gradient")
    return grads
