"""Small dense networks f(W; x) with per-layer analytic gradients.

A DeepNet is an ordered list of weight matrices with one activation kind
shared by the hidden layers. The last layer is linear by default
(top_linear=True), which is what every separability argument needs; set
top_linear=False to push the activation through the output as well.

Gradients are exact backprop, returned per layer with the same shapes as
the weights, so that Euler identities like sum_ij dF/dW_ij * W_ij = f can
be checked entry by entry.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

from .linalg import check_vector, frobenius_norm

ACTIVATIONS = ("relu", "smoothed_relu", "polynomial", "linear")
DEFAULT_EPSILON = 0.05
HOMOGENEOUS = ("relu", "linear")


def _sigmoid(u):
    out = np.empty_like(u, dtype=float)
    pos = u >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-u[pos]))
    eu = np.exp(u[~pos])
    out[~pos] = eu / (1.0 + eu)
    return out


@dataclass(frozen=True)
class DeepNet:
    """Weights plus activation; immutable once built."""

    layers: tuple  # of 2-d float arrays, applied first to last
    activation: str = "relu"
    epsilon: float = DEFAULT_EPSILON  # smoothed_relu width
    coefficients: tuple = ()  # polynomial activation, constant term first
    top_linear: bool = True

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.activation == "smoothed_relu" and not self.epsilon > 0:
            raise ValueError("smoothed_relu needs epsilon > 0")
        if self.activation == "polynomial" and len(self.coefficients) == 0:
            raise ValueError("polynomial activation needs coefficients")
        layers = tuple(np.asarray(w, dtype=float) for w in self.layers)
        if not layers:
            raise ValueError("need at least one layer")
        for k, w in enumerate(layers):
            if w.ndim != 2:
                raise ValueError(f"layer {k + 1} is not a matrix")
            if not np.all(np.isfinite(w)):
                raise ValueError(f"layer {k + 1} has non-finite entries")
        for k in range(len(layers) - 1):
            if layers[k + 1].shape[1] != layers[k].shape[0]:
                raise ValueError(
                    f"layer {k + 2} expects {layers[k + 1].shape[1]} inputs, "
                    f"layer {k + 1} outputs {layers[k].shape[0]}"
                )
        object.__setattr__(self, "layers", layers)

    @property
    def depth(self) -> int:
        return len(self.layers)

    @property
    def in_dim(self) -> int:
        return self.layers[0].shape[1]

    @property
    def out_dim(self) -> int:
        return self.layers[-1].shape[0]

    @property
    def n_params(self) -> int:
        return sum(w.size for w in self.layers)

    def with_layers(self, layers) -> "DeepNet":
        return replace(self, layers=tuple(layers))


@dataclass(frozen=True)
class LayerGradient:
    """Per-layer d f / d W_k at one input; kink_hit flags a relu
    pre-activation that was exactly zero (subgradient 0 was used)."""

    grads: tuple
    kink_hit: bool = False


def _activate(net: DeepNet, z: np.ndarray) -> np.ndarray:
    if net.activation == "linear":
        return z
    if net.activation == "relu":
        return np.maximum(z, 0.0)
    if net.activation == "smoothed_relu":
        return z * _sigmoid(z / net.epsilon**2)
    # polynomial, constant term first
    out = np.zeros_like(z)
    for c in reversed(net.coefficients):
        out = out * z + c
    return out


def _activate_deriv(net: DeepNet, z: np.ndarray):
    """Derivative of the activation and whether a relu kink was hit."""
    if net.activation == "linear":
        return np.ones_like(z), False
    if net.activation == "relu":
        return (z > 0.0).astype(float), bool(np.any(z == 0.0))
    if net.activation == "smoothed_relu":
        u = z / net.epsilon**2
        s = _sigmoid(u)
        return s + u * s * (1.0 - s), False
    deriv = np.zeros_like(z)
    for i in range(len(net.coefficients) - 1, 0, -1):
        deriv = deriv * z + i * net.coefficients[i]
    return deriv, False


def _forward_pass(net: DeepNet, x: np.ndarray):
    """Returns (output vector, pre-activations per layer, activations per
    layer input). preacts[k] = W_{k+1} @ acts[k]."""
    acts = [x]
    preacts = []
    h = x
    for k, w in enumerate(net.layers):
        z = w @ h
        preacts.append(z)
        last = k == net.depth - 1
        h = z if (last and net.top_linear) else _activate(net, z)
        acts.append(h)
    return h, preacts, acts


def forward_multi(net: DeepNet, x) -> np.ndarray:
    """Network output as a vector (multiclass heads keep all rows)."""
    x = check_vector(x, "x")
    if x.shape[0] != net.in_dim:
        raise ValueError(
            f"input has dimension {x.shape[0]}, layer 1 expects {net.in_dim}"
        )
    out, _, _ = _forward_pass(net, x)
    return out


def forward(net: DeepNet, x) -> float:
    """Scalar network output; requires a single output row."""
    if net.out_dim != 1:
        raise ValueError(f"forward needs one output row, net has {net.out_dim}")
    return float(forward_multi(net, x)[0])


def backprop(net: DeepNet, x, out_delta) -> LayerGradient:
    """Per-layer gradients of <out_delta, f(W;x)> with respect to each W_k."""
    x = check_vector(x, "x")
    if x.shape[0] != net.in_dim:
        raise ValueError(
            f"input has dimension {x.shape[0]}, layer 1 expects {net.in_dim}"
        )
    out_delta = np.atleast_1d(np.asarray(out_delta, dtype=float))
    _, preacts, acts = _forward_pass(net, x)
    kink = False
    delta = out_delta
    if not net.top_linear:
        dtop, k = _activate_deriv(net, preacts[-1])
        delta = delta * dtop
        kink = kink or k
    grads = [None] * net.depth
    for k in range(net.depth - 1, -1, -1):
        grads[k] = np.outer(delta, acts[k])
        if k > 0:
            back = net.layers[k].T @ delta
            dk, hit = _activate_deriv(net, preacts[k - 1])
            delta = back * dk
            kink = kink or hit
    return LayerGradient(tuple(grads), kink)


def layer_gradients(net: DeepNet, x) -> LayerGradient:
    """d f / d W_k for a scalar-output net, shaped like the layers."""
    if net.out_dim != 1:
        raise ValueError("layer_gradients needs one output row")
    return backprop(net, x, np.ones(1))


def activation_profile(net: DeepNet, x) -> list:
    """0/1 indicator per hidden unit (1 iff pre-activation > 0)."""
    x = check_vector(x, "x")
    _, preacts, _ = _forward_pass(net, x)
    upto = net.depth - 1 if net.top_linear else net.depth
    return [(preacts[k] > 0.0).astype(float) for k in range(upto)]


def homogeneity_residual(net: DeepNet, x, k: int) -> float:
    """|sum_ij df/d(W_k)_ij (W_k)_ij - f(x)| for one layer k (1-based).

    Requires a positively homogeneous activation; each layer of a
    relu/linear net contributes exactly f via the degree-1 Euler identity.
    """
    if net.activation not in HOMOGENEOUS:
        raise ValueError(
            f"homogeneity holds for {HOMOGENEOUS}, not {net.activation!r}"
        )
    if not 1 <= k <= net.depth:
        raise ValueError(f"layer index {k} outside 1..{net.depth}")
    f = forward(net, x)
    g = layer_gradients(net, x).grads[k - 1]
    return float(abs((g * net.layers[k - 1]).sum() - f))


def normalize_layers(net: DeepNet):
    """Split W_k = rho_k V_k with ||V_k||_F = 1; returns (rhos, unit net).

    For homogeneous activations the original forward equals
    prod(rho_k) * forward of the returned net.
    """
    rhos = []
    units = []
    for k, w in enumerate(net.layers):
        r = frobenius_norm(w)
        if r == 0.0:
            raise ValueError(f"layer {k + 1} is zero; cannot normalize")
        rhos.append(r)
        units.append(w / r)
    return list(rhos), net.with_layers(units)


def flatten_params(layers) -> np.ndarray:
    return np.concatenate([np.asarray(w, float).ravel() for w in layers])


def unflatten_params(vec, shapes) -> list:
    out = []
    i = 0
    for shape in shapes:
        n = shape[0] * shape[1]
        out.append(np.asarray(vec[i : i + n], float).reshape(shape))
        i += n
    if i != len(vec):
        raise ValueError("parameter vector length mismatch")
    return out


def to_json(net: DeepNet) -> str:
    """Serialize; floats go through repr so decoding is bit-exact."""
    obj = {
        "activation": net.activation,
        "top_linear": net.top_linear,
        "layers": [
            {"rows": w.shape[0], "cols": w.shape[1], "entries": w.ravel().tolist()}
            for w in net.layers
        ],
    }
    if net.activation == "smoothed_relu":
        obj["epsilon"] = net.epsilon
    if net.activation == "polynomial":
        obj["coefficients"] = list(net.coefficients)
    return json.dumps(obj)


def from_json(text: str) -> DeepNet:
    obj = json.loads(text)
    layers = []
    for spec in obj["layers"]:
        w = np.array(spec["entries"], dtype=float).reshape(
            spec["rows"], spec["cols"]
        )
        layers.append(w)
    return DeepNet(
        layers=tuple(layers),
        activation=obj["activation"],
        epsilon=float(obj.get("epsilon", DEFAULT_EPSILON)),
        coefficients=tuple(obj.get("coefficients", ())),
        top_linear=bool(obj.get("top_linear", True)),
    )


def random_net(rng, dims, activation="relu", scale=1.0, **kwargs) -> DeepNet:
    """Gaussian init: dims = (in, hidden..., out)."""
    layers = [
        scale * rng.normal(size=(dims[k + 1], dims[k]))
        for k in range(len(dims) - 1)
    ]
    return DeepNet(layers=tuple(layers), activation=activation, **kwargs)
