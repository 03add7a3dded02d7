"""Dense float64 MLP with forward-mode (JVP) and reverse-mode differentiation.

Arrays are plain ``numpy.ndarray`` of dtype float64. Batched inputs have shape
``(batch, features)``; a 1-D input is treated as a single row.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

ACTIVATIONS = ("tanh", "silu", "identity")


class DimensionError(ValueError):
    """Array shapes do not line up."""


class NonFiniteError(FloatingPointError):
    """A NaN or Inf reached a checked boundary."""


def as_tensor(x, checked: bool = True) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if checked and not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite entries in array of shape {arr.shape}")
    return arr


@dataclass
class Layer:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)
    activation: str = "tanh"

    def __post_init__(self) -> None:
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise DimensionError(
                f"layer weight {self.weight.shape} and bias {self.bias.shape} disagree"
            )

    @property
    def fan_in(self) -> int:
        return self.weight.shape[1]

    @property
    def fan_out(self) -> int:
        return self.weight.shape[0]


@dataclass
class MlpParams:
    layers: list[Layer]

    def __post_init__(self) -> None:
        if not self.layers:
            raise DimensionError("an MLP needs at least one layer")
        for prev, nxt in zip(self.layers[:-1], self.layers[1:]):
            if prev.fan_out != nxt.fan_in:
                raise DimensionError(
                    f"layer widths do not chain: {prev.fan_out} -> {nxt.fan_in}"
                )
        if self.layers[-1].activation != "identity":
            raise ValueError("final layer activation must be identity")

    @property
    def input_dim(self) -> int:
        return self.layers[0].fan_in

    @property
    def output_dim(self) -> int:
        return self.layers[-1].fan_out

    def arrays(self) -> list[np.ndarray]:
        """Flat view in storage order: W0, b0, W1, b1, ..."""
        out = []
        for layer in self.layers:
            out.extend((layer.weight, layer.bias))
        return out

    def with_arrays(self, arrays: list[np.ndarray]) -> "MlpParams":
        if len(arrays) != 2 * len(self.layers):
            raise DimensionError("array count does not match layer count")
        layers = []
        for k, layer in enumerate(self.layers):
            w, b = arrays[2 * k], arrays[2 * k + 1]
            if w.shape != layer.weight.shape or b.shape != layer.bias.shape:
                raise DimensionError("array shapes do not match layer shapes")
            layers.append(Layer(np.array(w, dtype=np.float64), np.array(b, dtype=np.float64), layer.activation))
        return MlpParams(layers)

    def copy(self) -> "MlpParams":
        return self.with_arrays([a.copy() for a in self.arrays()])

    def dims(self) -> list[int]:
        return [self.input_dim] + [layer.fan_out for layer in self.layers]

    def num_parameters(self) -> int:
        return sum(a.size for a in self.arrays())


def init_mlp(
    dims: list[int],
    rng: np.random.Generator,
    activation: str = "tanh",
    final_scale: float = 1.0,
) -> MlpParams:
    """Glorot-normal weights, zero biases, identity on the last layer."""
    layers = []
    n = len(dims) - 1
    for k, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
        std = np.sqrt(2.0 / (fan_in + fan_out))
        w = rng.standard_normal((fan_out, fan_in)) * std
        if k == n - 1:
            w *= final_scale
        act = "identity" if k == n - 1 else activation
        layers.append(Layer(w, np.zeros(fan_out), act))
    return MlpParams(layers)


def _act(name: str, h: np.ndarray) -> np.ndarray:
    if name == "tanh":
        return np.tanh(h)
    if name == "silu":
        return h / (1.0 + np.exp(-h))
    return h


def _act_deriv(name: str, h: np.ndarray, a: np.ndarray) -> np.ndarray:
    if name == "tanh":
        return 1.0 - a * a
    if name == "silu":
        s = 1.0 / (1.0 + np.exp(-h))
        return s * (1.0 + h * (1.0 - s))
    return np.ones_like(h)


def _as_batch(x: np.ndarray, width: int) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != width:
        raise DimensionError(f"expected input of width {width}, got shape {x.shape}")
    return x, squeeze


def _forward_trace(params: MlpParams, x: np.ndarray):
    pre, post = [], [x]
    a = x
    for layer in params.layers:
        h = a @ layer.weight.T + layer.bias
        a = _act(layer.activation, h)
        pre.append(h)
        post.append(a)
    return pre, post


def mlp_forward(params: MlpParams, x: np.ndarray) -> np.ndarray:
    xb, squeeze = _as_batch(x, params.input_dim)
    a = xb
    for layer in params.layers:
        a = _act(layer.activation, a @ layer.weight.T + layer.bias)
    return a[0] if squeeze else a


@dataclass
class DualTensor:
    primal: np.ndarray
    tangent: np.ndarray

    def __post_init__(self) -> None:
        self.primal = np.asarray(self.primal, dtype=np.float64)
        self.tangent = np.asarray(self.tangent, dtype=np.float64)
        if self.primal.shape != self.tangent.shape:
            raise DimensionError(
                f"primal {self.primal.shape} and tangent {self.tangent.shape} differ"
            )


def mlp_jvp(params: MlpParams, x: DualTensor) -> DualTensor:
    """Push (input, input tangent) through the net; returns (output, J @ tangent)."""
    a, squeeze = _as_batch(x.primal, params.input_dim)
    da, _ = _as_batch(x.tangent, params.input_dim)
    for layer in params.layers:
        h = a @ layer.weight.T + layer.bias
        dh = da @ layer.weight.T
        a = _act(layer.activation, h)
        da = _act_deriv(layer.activation, h, a) * dh
    if squeeze:
        return DualTensor(a[0], da[0])
    return DualTensor(a, da)


@dataclass
class Gradients:
    """Parameter gradients in ``MlpParams.arrays()`` order, plus the input cotangent."""

    arrays: list[np.ndarray]
    input: np.ndarray = field(repr=False)


@dataclass
class ForwardTrace:
    """Pre- and post-activation values cached for a reverse pass."""

    pre: list[np.ndarray]
    post: list[np.ndarray]

    @property
    def output(self) -> np.ndarray:
        return self.post[-1]


def mlp_trace(params: MlpParams, x: np.ndarray) -> ForwardTrace:
    xb, _ = _as_batch(x, params.input_dim)
    return ForwardTrace(*_forward_trace(params, xb))


def mlp_backward(params: MlpParams, trace: ForwardTrace, cotangent: np.ndarray) -> Gradients:
    g = np.asarray(cotangent, dtype=np.float64)
    if g.shape != trace.output.shape:
        raise DimensionError(
            f"cotangent shape {g.shape} does not match output {trace.output.shape}"
        )
    grads: list[np.ndarray] = [None] * (2 * len(params.layers))  # type: ignore[list-item]
    for k in reversed(range(len(params.layers))):
        layer = params.layers[k]
        g = g * _act_deriv(layer.activation, trace.pre[k], trace.post[k + 1])
        grads[2 * k] = g.T @ trace.post[k]
        grads[2 * k + 1] = g.sum(axis=0)
        g = g @ layer.weight
    return Gradients(grads, g)


def mlp_grad(params: MlpParams, x: np.ndarray, cotangent: np.ndarray) -> Gradients:
    """Reverse-mode gradient of ``sum(cotangent * mlp_forward(params, x))``.

    Also returns the cotangent pulled back to the input.
    """
    squeeze = np.ndim(x) == 1
    trace = mlp_trace(params, x)
    g = np.asarray(cotangent, dtype=np.float64)
    if squeeze and g.ndim == 1:
        g = g[None, :]
    out = mlp_backward(params, trace, g)
    if squeeze:
        out.input = out.input[0]
    return out


@dataclass
class OptimizerState:
    first_moment: list[np.ndarray]
    second_moment: list[np.ndarray]
    step_count: int = 0
    learning_rate: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps_stability: float = 1e-8

    @classmethod
    def zeros_like(cls, params: MlpParams, **hyper) -> "OptimizerState":
        arrays = params.arrays()
        return cls(
            [np.zeros_like(a) for a in arrays],
            [np.zeros_like(a) for a in arrays],
            **hyper,
        )


def adam_step(
    state: OptimizerState,
    params: MlpParams,
    grads: list[np.ndarray],
    checked: bool = True,
) -> tuple[MlpParams, OptimizerState]:
    """Bias-corrected Adam update. Inputs are not mutated."""
    arrays = params.arrays()
    if len(grads) != len(arrays):
        raise DimensionError("gradient count does not match parameter count")
    for g, a in zip(grads, arrays):
        if g.shape != a.shape:
            raise DimensionError(f"gradient shape {g.shape} != parameter shape {a.shape}")
        if checked and not np.all(np.isfinite(g)):
            bad = int(np.size(g) - np.count_nonzero(np.isfinite(g)))
            raise NonFiniteError(
                f"non-finite gradient at step {state.step_count + 1}: {bad} bad entries"
            )
    step = state.step_count + 1
    b1, b2 = state.beta1, state.beta2
    corr1 = 1.0 - b1**step
    corr2 = 1.0 - b2**step
    new_m, new_v, new_p = [], [], []
    for p, g, m, v in zip(arrays, grads, state.first_moment, state.second_moment):
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        m_hat = m / corr1
        v_hat = v / corr2
        new_p.append(p - state.learning_rate * m_hat / (np.sqrt(v_hat) + state.eps_stability))
        new_m.append(m)
        new_v.append(v)
    new_state = OptimizerState(
        new_m, new_v, step, state.learning_rate, b1, b2, state.eps_stability
    )
    return params.with_arrays(new_p), new_state


@dataclass
class EmaState:
    shadow: MlpParams
    decay: float = 0.999

    def __post_init__(self) -> None:
        if not 0.0 <= self.decay <= 1.0:
            raise ValueError(f"EMA decay must lie in [0, 1], got {self.decay}")


def ema_update(state: EmaState, params: MlpParams) -> EmaState:
    d = state.decay
    shadow = state.shadow.arrays()
    current = params.arrays()
    if len(shadow) != len(current) or any(s.shape != c.shape for s, c in zip(shadow, current)):
        raise DimensionError("EMA shadow and parameters have different shapes")
    return EmaState(
        state.shadow.with_arrays([d * s + (1.0 - d) * c for s, c in zip(shadow, current)]),
        d,
    )
