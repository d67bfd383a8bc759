"""Loss functionals and their weight gradients.

Losses are sums over samples, never means; step-size choices downstream
absorb the 1/N. Supported: square, exponential, logistic, and softmax
cross-entropy. Gradients run through a batched backprop so that long flow
loops stay cheap; summation order over samples is fixed, so repeated
evaluation is bit-identical.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass

import numpy as np

from .network import DeepNet, _activate, _activate_deriv

LOSS_KINDS = ("square", "exponential", "logistic", "softmax_cross_entropy")
TASKS = ("binary", "multiclass", "regression")
# largest exponent fed to exp(); beyond this the per-sample term is clamped
EXP_CLAMP = 709.0


@dataclass(frozen=True)
class Dataset:
    """Inputs (N x d) and labels (N,). Binary labels are -1/+1, multiclass
    labels are 0-based class indices, regression labels are real."""

    inputs: np.ndarray
    labels: np.ndarray
    task: str = "binary"

    def __post_init__(self):
        x = np.asarray(self.inputs, dtype=float)
        if x.ndim != 2 or x.shape[0] < 1:
            raise ValueError("inputs must be a nonempty N x d array")
        if not np.all(np.isfinite(x)):
            raise ValueError("inputs contain non-finite values")
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}")
        if self.task == "multiclass":
            y = np.asarray(self.labels, dtype=int)
            if np.any(y < 0):
                raise ValueError("multiclass labels are 0-based class indices")
        else:
            y = np.asarray(self.labels, dtype=float)
            if not np.all(np.isfinite(y)):
                raise ValueError("labels contain non-finite values")
            if self.task == "binary" and not np.all(np.abs(y) == 1.0):
                raise ValueError("binary labels must be -1 or +1")
        if y.shape != (x.shape[0],):
            raise ValueError("labels must be one per input row")
        object.__setattr__(self, "inputs", x)
        object.__setattr__(self, "labels", y)

    @property
    def n_samples(self) -> int:
        return self.inputs.shape[0]

    @property
    def dim(self) -> int:
        return self.inputs.shape[1]


def dataset_to_json(data: Dataset) -> str:
    return json.dumps(
        {
            "inputs": data.inputs.tolist(),
            "labels": data.labels.tolist(),
            "task": data.task,
        }
    )


def dataset_from_json(text: str) -> Dataset:
    obj = json.loads(text)
    for key in ("inputs", "labels", "task"):
        if key not in obj:
            raise ValueError(f"dataset is missing field {key!r}")
    return Dataset(
        inputs=np.array(obj["inputs"], dtype=float),
        labels=np.array(obj["labels"]),
        task=obj["task"],
    )


def _check_kind(kind: str, data: Dataset, net: DeepNet):
    if kind not in LOSS_KINDS:
        raise ValueError(f"unknown loss {kind!r}")
    if kind == "softmax_cross_entropy":
        if data.task != "multiclass":
            raise ValueError("softmax_cross_entropy needs multiclass labels")
        if np.any(data.labels >= net.out_dim):
            raise ValueError(
                f"label {int(data.labels.max())} out of range for "
                f"{net.out_dim} output rows"
            )
    elif kind in ("exponential", "logistic"):
        if data.task != "binary":
            raise ValueError(f"{kind} loss needs binary -1/+1 labels")
    else:  # square accepts binary or real-valued targets
        if data.task == "multiclass":
            raise ValueError("square loss needs binary or regression labels")
    if data.dim != net.in_dim:
        raise ValueError(
            f"dataset dimension {data.dim} does not match net input "
            f"{net.in_dim}"
        )


def batch_forward(net: DeepNet, inputs):
    """Outputs (N,) for one-row nets, else (N, C); plus cached internals."""
    x = np.asarray(inputs, dtype=float)
    h = x.T  # columns are samples
    preacts = []
    acts = [h]
    for k, w in enumerate(net.layers):
        z = w @ h
        preacts.append(z)
        last = k == net.depth - 1
        h = z if (last and net.top_linear) else _activate(net, z)
        acts.append(h)
    return h, preacts, acts


def batch_outputs(net: DeepNet, inputs) -> np.ndarray:
    out, _, _ = batch_forward(net, inputs)
    return out[0] if out.shape[0] == 1 else out.T


def batch_backprop(net: DeepNet, preacts, acts, out_delta):
    """Sum over samples of per-layer gradients, given d loss / d output
    as columns of out_delta (C x N). Returns (grads list, kink flag)."""
    kink = False
    delta = out_delta
    if not net.top_linear:
        dtop, hit = _activate_deriv(net, preacts[-1])
        delta = delta * dtop
        kink = kink or hit
    grads = [None] * net.depth
    for k in range(net.depth - 1, -1, -1):
        grads[k] = delta @ acts[k].T
        if k > 0:
            back = net.layers[k].T @ delta
            dk, hit = _activate_deriv(net, preacts[k - 1])
            delta = back * dk
            kink = kink or hit
    return grads, kink


def _clamped_exp(u, context):
    if np.any(u > EXP_CLAMP):
        warnings.warn(
            f"{context}: exponent clamped at {EXP_CLAMP:.0f}; the flow has "
            "left the regime where the exponential loss is meaningful",
            RuntimeWarning,
        )
        u = np.minimum(u, EXP_CLAMP)
    return np.exp(u)


def _softmax_rows(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def loss(kind: str, net: DeepNet, data: Dataset) -> float:
    """Sum over samples of the per-sample loss."""
    _check_kind(kind, data, net)
    if kind == "softmax_cross_entropy":
        logits = batch_outputs(net, data.inputs)
        if logits.ndim == 1:
            logits = logits[:, None]
        y = data.labels
        z = logits - logits.max(axis=1, keepdims=True)
        log_norm = np.log(np.exp(z).sum(axis=1))
        picked = z[np.arange(len(y)), y]
        return float((log_norm - picked).sum())
    f = batch_outputs(net, data.inputs)
    y = data.labels
    if kind == "square":
        return float(((y - f) ** 2).sum())
    if kind == "exponential":
        return float(_clamped_exp(-y * f, "exponential loss").sum())
    # logistic: log(1 + e^{-yf}), stable on both tails
    m = -y * f
    return float((np.maximum(m, 0.0) + np.log1p(np.exp(-np.abs(m)))).sum())


def loss_and_gradient(kind: str, net: DeepNet, data: Dataset):
    """Returns (loss value, per-layer gradient list, relu kink flag)."""
    _check_kind(kind, data, net)
    out, preacts, acts = batch_forward(net, data.inputs)
    y = data.labels
    if kind == "softmax_cross_entropy":
        logits = out.T
        p = _softmax_rows(logits)
        picked = np.log(p[np.arange(len(y)), y])
        value = float(-picked.sum())
        delta = p.copy()
        delta[np.arange(len(y)), y] -= 1.0
        grads, kink = batch_backprop(net, preacts, acts, delta.T)
        return value, grads, kink
    f = out[0]
    if kind == "square":
        value = float(((y - f) ** 2).sum())
        ddelta = 2.0 * (f - y)
    elif kind == "exponential":
        e = _clamped_exp(-y * f, "exponential loss")
        value = float(e.sum())
        ddelta = -y * e
    else:
        m = -y * f
        value = float((np.maximum(m, 0.0) + np.log1p(np.exp(-np.abs(m)))).sum())
        sig = np.where(m > 0, 1.0 / (1.0 + np.exp(-m)), np.exp(m) / (1.0 + np.exp(m)))
        ddelta = -y * sig
    grads, kink = batch_backprop(net, preacts, acts, ddelta[None, :])
    return value, grads, kink


def loss_gradient(kind: str, net: DeepNet, data: Dataset) -> list:
    """Per-layer gradient matrices of the loss, shaped like net.layers."""
    _, grads, _ = loss_and_gradient(kind, net, data)
    return grads


def separability_margin(net: DeepNet, data: Dataset) -> float:
    """min_n y_n f(x_n) for binary data; for multiclass the worst logit gap
    min_n min_{c != y_n} (f_y - f_c). Positive iff the net separates."""
    if data.task == "binary":
        if net.out_dim != 1:
            raise ValueError("binary margin needs a single output row")
        f = batch_outputs(net, data.inputs)
        return float((data.labels * f).min())
    if data.task == "multiclass":
        logits = batch_outputs(net, data.inputs)
        if logits.ndim == 1:
            logits = logits[:, None]
        y = data.labels
        rows = np.arange(len(y))
        own = logits[rows, y]
        masked = logits.copy()
        masked[rows, y] = -np.inf
        return float((own - masked.max(axis=1)).min())
    raise ValueError("separability is a classification notion")


def classification_error(net: DeepNet, data: Dataset) -> float:
    """Fraction of misclassified samples (sign rule; f = 0 counts wrong)."""
    if data.task == "binary":
        if net.out_dim != 1:
            raise ValueError("binary error rate needs a single output row")
        f = batch_outputs(net, data.inputs)
        return float(np.mean(data.labels * f <= 0.0))
    if data.task == "multiclass":
        logits = batch_outputs(net, data.inputs)
        if logits.ndim == 1:
            logits = logits[:, None]
        return float(np.mean(logits.argmax(axis=1) != data.labels))
    raise ValueError("classification error needs a classification task")


def mean_squared_error(net: DeepNet, data: Dataset) -> float:
    f = batch_outputs(net, data.inputs)
    return float(np.mean((data.labels - f) ** 2))


def descent_direction_check(
    net: DeepNet, separator: DeepNet, data: Dataset, kind: str = "exponential"
) -> float:
    """sum_k <W*_k, grad_k L(W)> where W* is a separating weight setting.

    The contract for exponential-family losses on data that W* separates is
    a strictly negative value: the loss keeps decreasing along W*.
    """
    margin = separability_margin(separator, data)
    if margin <= 0.0:
        raise ValueError(
            f"separator does not separate the data (margin {margin:.3e})"
        )
    if [w.shape for w in separator.layers] != [w.shape for w in net.layers]:
        raise ValueError("separator layers must match the net's shapes")
    grads = loss_gradient(kind, net, data)
    return float(
        sum((ws * g).sum() for ws, g in zip(separator.layers, grads))
    )
