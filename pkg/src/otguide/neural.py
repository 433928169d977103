"""Small numpy MLPs with hand-written reverse mode, gradient penalty and Adam.

Parameters are kept as a flat list ``[W1, b1, W2, b2, ...]`` with
``W_l`` of shape ``(d_in, d_out)``; gradients use the same layout.
Hidden layers use a leaky rectifier (slope 0.2, right derivative 1 at 0),
the output layer is affine.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import OTGuideError, StructuralError

LEAK = 0.2


class StaleTapeError(OTGuideError, RuntimeError):
    pass


class NonFiniteGradientError(OTGuideError, FloatingPointError):
    pass


@dataclass(frozen=True, eq=False)
class Mlp:
    params: tuple[np.ndarray, ...]
    slope: float = LEAK

    def __post_init__(self):
        ps = tuple(np.array(p, dtype=float) for p in self.params)
        if len(ps) % 2 or not ps:
            raise StructuralError("params must alternate weights and biases")
        for l in range(0, len(ps), 2):
            w, b = ps[l], ps[l + 1]
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise StructuralError(f"layer {l // 2}: weight {w.shape} and bias {b.shape} disagree")
            if l and ps[l - 2].shape[1] != w.shape[0]:
                raise StructuralError(f"layer {l // 2}: input width {w.shape[0]} != previous output")
        for p in ps:
            if not np.all(np.isfinite(p)):
                raise StructuralError("parameters must be finite")
            p.setflags(write=False)
        object.__setattr__(self, "params", ps)

    @property
    def dims(self) -> list[int]:
        ws = self.params[0::2]
        return [ws[0].shape[0]] + [w.shape[1] for w in ws]

    @property
    def n_layers(self) -> int:
        return len(self.params) // 2

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return forward(self, x)[0]

    def to_json(self) -> dict:
        return {
            "dims": self.dims,
            "layers": [
                {"w": self.params[l].tolist(), "b": self.params[l + 1].tolist()}
                for l in range(0, len(self.params), 2)
            ],
        }

    @classmethod
    def from_json(cls, doc: dict) -> "Mlp":
        params = []
        for layer in doc["layers"]:
            w = np.asarray(layer["w"], dtype=float).reshape(-1, len(layer["b"]))
            params += [w, np.asarray(layer["b"], dtype=float)]
        net = cls(tuple(params))
        if "dims" in doc and list(doc["dims"]) != net.dims:
            raise StructuralError(f"declared dims {doc['dims']} do not match layers {net.dims}")
        return net


def init_mlp(dims, rng: np.random.Generator) -> Mlp:
    """Glorot-uniform weights, zero biases."""
    dims = list(dims)
    if len(dims) < 2:
        raise ValueError("need at least input and output widths")
    params = []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        params.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        params.append(np.zeros(fan_out))
    return Mlp(tuple(params))


def leaky_relu(z: np.ndarray, slope: float = LEAK) -> np.ndarray:
    return np.where(z >= 0, z, slope * z)


def leaky_relu_grad(z: np.ndarray, slope: float = LEAK) -> np.ndarray:
    return np.where(z >= 0, 1.0, slope)


@dataclass(eq=False)
class Tape:
    net: Mlp
    inputs: list[np.ndarray] = field(default_factory=list)  # input to each layer
    pre: list[np.ndarray] = field(default_factory=list)  # pre-activations


def forward(net: Mlp, x: np.ndarray) -> tuple[np.ndarray, Tape]:
    x = np.asarray(x, dtype=float)
    if x.ndim != 2 or x.shape[1] != net.dims[0]:
        raise StructuralError(f"batch of shape {x.shape} does not fit input width {net.dims[0]}")
    tape = Tape(net)
    h = x
    last = net.n_layers - 1
    for l in range(net.n_layers):
        w, b = net.params[2 * l], net.params[2 * l + 1]
        tape.inputs.append(h)
        z = h @ w + b
        tape.pre.append(z)
        h = z if l == last else leaky_relu(z, net.slope)
    return h, tape


def backward(net: Mlp, tape: Tape, output_grad: np.ndarray) -> tuple[list[np.ndarray], np.ndarray]:
    """Parameter gradients and input gradient of ``sum(output * output_grad)``."""
    if tape.net is not net:
        raise StaleTapeError("tape was recorded for a different parameter set")
    delta = np.asarray(output_grad, dtype=float)
    if delta.shape != tape.pre[-1].shape:
        raise StructuralError(f"output gradient {delta.shape} does not match output {tape.pre[-1].shape}")
    grads: list[np.ndarray] = [None] * len(net.params)
    for l in range(net.n_layers - 1, -1, -1):
        if l != net.n_layers - 1:
            delta = delta * leaky_relu_grad(tape.pre[l], net.slope)
        grads[2 * l] = tape.inputs[l].T @ delta
        grads[2 * l + 1] = delta.sum(axis=0)
        delta = delta @ net.params[2 * l].T
    return grads, delta


def input_gradient(net: Mlp, x: np.ndarray) -> np.ndarray:
    """Per-sample gradient of a scalar-output network with respect to its input."""
    out, tape = forward(net, x)
    if out.shape[1] != 1:
        raise StructuralError("input_gradient needs a scalar-output network")
    return backward(net, tape, np.ones_like(out))[1]


@dataclass(frozen=True, eq=False)
class PenaltyResult:
    value: float
    grads: list[np.ndarray]
    zero_norms: int  # samples whose input gradient vanished exactly


def gradient_penalty(critic: Mlp, interpolates: np.ndarray) -> PenaltyResult:
    """``mean((||grad_x D(x)||_2 - 1)^2)`` and its exact parameter gradient.

    The input gradient is a product of weight matrices and the (locally
    constant) activation slopes, so the penalty gradient is obtained by a
    second reverse pass through that product.  Biases only move the slope
    pattern and get zero gradient.
    """
    x = np.asarray(interpolates, dtype=float)
    if not np.all(np.isfinite(x)):
        raise ValueError("interpolates must be finite")
    out, tape = forward(critic, x)
    if out.shape[1] != 1:
        raise StructuralError("gradient penalty needs a scalar-output critic")
    k = x.shape[0]
    L = critic.n_layers
    ws = critic.params[0::2]
    slopes = [leaky_relu_grad(z, critic.slope) for z in tape.pre[:-1]]

    # first pass: t[l] is d out / d h_l, q[l] the same before masking
    t = [None] * (L + 1)
    t[L] = np.ones((k, 1))
    q = [None] * L
    for l in range(L, 0, -1):
        q[l - 1] = t[l] @ ws[l - 1].T
        if l - 1 >= 1:
            t[l - 1] = q[l - 1] * slopes[l - 2]
    g = q[0]

    norms = np.sqrt((g * g).sum(axis=1))
    value = float(np.mean((norms - 1.0) ** 2))
    zero = norms == 0.0
    scale = np.where(zero, 0.0, 2.0 * (norms - 1.0) / np.where(zero, 1.0, norms)) / k

    # second pass
    grads = [np.zeros_like(p) for p in critic.params]
    dq = g * scale[:, None]
    for l in range(1, L + 1):
        grads[2 * (l - 1)] = dq.T @ t[l]
        if l < L:
            dq = (dq @ ws[l - 1]) * slopes[l - 1]
    return PenaltyResult(value, grads, int(zero.sum()))


# --- Adam --------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class AdamState:
    m: tuple[np.ndarray, ...]
    v: tuple[np.ndarray, ...]
    t: int = 0
    beta1: float = 0.5
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params, **kw) -> "AdamState":
        return cls(tuple(np.zeros_like(p) for p in params), tuple(np.zeros_like(p) for p in params), **kw)


def adam_step(net: Mlp, grads, state: AdamState, lr: float) -> tuple[Mlp, AdamState]:
    if len(grads) != len(net.params):
        raise StructuralError(f"{len(grads)} gradients for {len(net.params)} parameters")
    for k, (p, g) in enumerate(zip(net.params, grads)):
        if np.shape(g) != p.shape:
            raise StructuralError(f"gradient {k} has shape {np.shape(g)}, parameter {p.shape}")
        if not np.all(np.isfinite(g)):
            kind = "weight" if k % 2 == 0 else "bias"
            raise NonFiniteGradientError(f"non-finite gradient in layer {k // 2} {kind}")
    t = state.t + 1
    b1, b2 = state.beta1, state.beta2
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(net.params, grads, state.m, state.v):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        new_p.append(p - lr * m_hat / (np.sqrt(v_hat) + state.eps))
        new_m.append(m)
        new_v.append(v)
    return (
        Mlp(tuple(new_p), net.slope),
        AdamState(tuple(new_m), tuple(new_v), t, b1, b2, state.eps),
    )


def add_grads(a, b, scale: float = 1.0) -> list[np.ndarray]:
    return [x + scale * y for x, y in zip(a, b)]
