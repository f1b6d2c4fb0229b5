"""Minimal dense MLP substrate with analytic backpropagation and Adam.

Everything is float64 numpy. Parameters live in flat ``ParamVector``s whose
layout (ordered name/shape pairs) makes checkpoints self-describing and lets
Adam moments share the same storage scheme. Forward/backward are pure
functions of (spec, params, input); there is no computation graph.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

ACTIVATIONS = ("tanh", "relu")


class LayoutError(ValueError):
    """Shape or layout disagreement between a spec, params, or input."""


class NonFiniteGradientError(ValueError):
    """Gradient passed to the optimizer contains NaN or inf."""


@dataclass
class ParamVector:
    """Flat float64 parameter storage plus its (name, shape) layout."""

    layout: tuple[tuple[str, tuple[int, ...]], ...]
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64).ravel()
        expected = sum(int(np.prod(shape)) for _, shape in self.layout)
        if self.values.size != expected:
            raise LayoutError(
                f"param vector holds {self.values.size} values, layout needs {expected}"
            )

    @classmethod
    def zeros(cls, layout) -> "ParamVector":
        layout = tuple((name, tuple(shape)) for name, shape in layout)
        n = sum(int(np.prod(shape)) for _, shape in layout)
        return cls(layout, np.zeros(n))

    def zeros_like(self) -> "ParamVector":
        return ParamVector(self.layout, np.zeros_like(self.values))

    def copy(self) -> "ParamVector":
        return ParamVector(self.layout, self.values.copy())

    def view(self, name: str) -> np.ndarray:
        """Reshaped view of one named block; writes through to the flat array."""
        off = 0
        for block, shape in self.layout:
            n = int(np.prod(shape))
            if block == name:
                return self.values[off : off + n].reshape(shape)
            off += n
        raise LayoutError(f"no parameter block named {name!r}")

    def blocks(self):
        off = 0
        for name, shape in self.layout:
            n = int(np.prod(shape))
            yield name, self.values[off : off + n].reshape(shape)
            off += n

    def same_layout(self, other: "ParamVector") -> bool:
        return self.layout == other.layout

    def validate(self):
        if not np.isfinite(self.values).all():
            raise LayoutError("param vector contains non-finite values")


@dataclass(frozen=True)
class MlpSpec:
    """Architecture of a fully-connected net: input -> hidden... -> output.

    Hidden layers use ``activation``; the output layer is linear.
    """

    input_dim: int
    hidden: tuple[int, ...]
    output_dim: int
    activation: str = "tanh"

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        dims = (self.input_dim, *self.hidden, self.output_dim)
        if any(d <= 0 for d in dims):
            raise LayoutError(f"all layer dims must be positive, got {dims}")
        if self.activation not in ACTIVATIONS:
            raise LayoutError(f"unknown activation {self.activation!r}")

    @property
    def layer_dims(self) -> tuple[int, ...]:
        return (self.input_dim, *self.hidden, self.output_dim)

    @property
    def n_layers(self) -> int:
        return len(self.hidden) + 1

    def param_layout(self) -> tuple[tuple[str, tuple[int, ...]], ...]:
        dims = self.layer_dims
        out = []
        for i in range(self.n_layers):
            out.append((f"w{i}", (dims[i], dims[i + 1])))
            out.append((f"b{i}", (dims[i + 1],)))
        return tuple(out)


def init_params(spec: MlpSpec, rng: np.random.Generator, final_scale: float = 1.0) -> ParamVector:
    """Scaled-uniform init (He for relu, Xavier for tanh), zero biases.

    ``final_scale`` shrinks the last layer's weights; policy heads use 0.01
    so the initial action distribution is near zero-mean.
    """
    params = ParamVector.zeros(spec.param_layout())
    dims = spec.layer_dims
    for i in range(spec.n_layers):
        fan_in, fan_out = dims[i], dims[i + 1]
        if spec.activation == "relu":
            bound = np.sqrt(6.0 / fan_in)
        else:
            bound = np.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        if i == spec.n_layers - 1:
            w *= final_scale
        params.view(f"w{i}")[...] = w
    return params


def _check_shapes(spec: MlpSpec, params: ParamVector, x: np.ndarray):
    if params.layout != spec.param_layout():
        raise LayoutError("params layout does not match spec layout")
    if x.shape[-1] != spec.input_dim:
        raise LayoutError(
            f"layer w0: input has {x.shape[-1]} features, spec expects {spec.input_dim}"
        )


def _act(z: np.ndarray, kind: str) -> np.ndarray:
    return np.tanh(z) if kind == "tanh" else np.maximum(z, 0.0)


def _act_grad(z: np.ndarray, kind: str) -> np.ndarray:
    if kind == "tanh":
        t = np.tanh(z)
        return 1.0 - t * t
    return (z > 0.0).astype(np.float64)


def forward(spec: MlpSpec, params: ParamVector, x: np.ndarray) -> np.ndarray:
    """Evaluate the net on a single input (d,) or a batch (N, d)."""
    x = np.asarray(x, dtype=np.float64)
    _check_shapes(spec, params, x)
    h = x
    for i in range(spec.n_layers):
        z = h @ params.view(f"w{i}") + params.view(f"b{i}")
        h = _act(z, spec.activation) if i < spec.n_layers - 1 else z
    return h


def forward_cached(spec: MlpSpec, params: ParamVector, x: np.ndarray):
    """Forward pass keeping pre-activations and layer inputs for backward."""
    x = np.asarray(x, dtype=np.float64)
    _check_shapes(spec, params, x)
    inputs = [x]
    preacts = []
    h = x
    for i in range(spec.n_layers):
        z = h @ params.view(f"w{i}") + params.view(f"b{i}")
        preacts.append(z)
        h = _act(z, spec.activation) if i < spec.n_layers - 1 else z
        inputs.append(h)
    return h, (inputs, preacts)


def backward(
    spec: MlpSpec,
    params: ParamVector,
    x: np.ndarray,
    output_grad: np.ndarray,
    cache=None,
) -> tuple[ParamVector, np.ndarray]:
    """Gradient of ``output . output_grad`` w.r.t. params and input.

    Batched inputs sum parameter gradients over the batch; the input
    gradient keeps the batch dimension.
    """
    x = np.asarray(x, dtype=np.float64)
    output_grad = np.asarray(output_grad, dtype=np.float64)
    if output_grad.shape[-1] != spec.output_dim:
        raise LayoutError(
            f"layer w{spec.n_layers - 1}: output_grad has {output_grad.shape[-1]} "
            f"features, spec expects {spec.output_dim}"
        )
    if cache is None:
        _, cache = forward_cached(spec, params, x)
    inputs, preacts = cache
    grad = params.zeros_like()
    batched = x.ndim == 2
    delta = output_grad
    for i in reversed(range(spec.n_layers)):
        if i < spec.n_layers - 1:
            delta = delta * _act_grad(preacts[i], spec.activation)
        h_in = inputs[i]
        if batched:
            grad.view(f"w{i}")[...] += h_in.T @ delta
            grad.view(f"b{i}")[...] += delta.sum(axis=0)
        else:
            grad.view(f"w{i}")[...] += np.outer(h_in, delta)
            grad.view(f"b{i}")[...] += delta
        delta = delta @ params.view(f"w{i}").T
    return grad, delta


@dataclass
class AdamState:
    """Adam moments matching one ParamVector's layout."""

    first_moment: ParamVector
    second_moment: ParamVector
    step_count: int = 0
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: ParamVector, lr: float = 3e-4, **kw) -> "AdamState":
        return cls(params.zeros_like(), params.zeros_like(), lr=lr, **kw)


def adam_step(state: AdamState, params: ParamVector, grad: ParamVector):
    """One bias-corrected Adam update, in place. Returns (params, state).

    A non-finite gradient raises and leaves params and moments untouched.
    """
    if not (params.same_layout(grad) and params.same_layout(state.first_moment)):
        raise LayoutError("params, grad, and optimizer moments must share one layout")
    if not np.isfinite(grad.values).all():
        raise NonFiniteGradientError("gradient contains non-finite values; update skipped")
    state.step_count += 1
    b1, b2 = state.beta1, state.beta2
    m, v = state.first_moment.values, state.second_moment.values
    m *= b1
    m += (1.0 - b1) * grad.values
    v *= b2
    v += (1.0 - b2) * grad.values**2
    m_hat = m / (1.0 - b1**state.step_count)
    v_hat = v / (1.0 - b2**state.step_count)
    params.values -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return params, state
