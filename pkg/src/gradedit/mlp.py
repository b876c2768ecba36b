"""Fully-connected classifier models whose backward pass exposes, per
example, the rank-1 gradient factors (layer input u, pre-activation
gradient delta) for every layer.

Layer l computes z_{l+1} = W_l u_l + b_l with relu between layers and raw
logits at the output. The per-example gradient of the loss w.r.t. W_l is
outer(delta_{l+1}, u_l); summing those outer products over the batch
recovers the dense gradient exactly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ContractError, DataError, ShapeError
from .ndops import Array, check_finite, log_softmax, outer, relu, relu_grad, xavier_uniform

MODEL_FORMAT_VERSION = 1


@dataclass
class Mlp:
    """Stack of affine layers with relu activations (identity on the last)."""

    weights: list[Array]  # weights[l] has shape (n_l, m_l)
    biases: list[Array]  # biases[l] has shape (n_l,)

    def __post_init__(self) -> None:
        for l in range(len(self.weights) - 1):
            if self.weights[l + 1].shape[1] != self.weights[l].shape[0]:
                raise ShapeError(
                    f"layer {l} output dim {self.weights[l].shape[0]} != "
                    f"layer {l + 1} input dim {self.weights[l + 1].shape[1]}"
                )

    @property
    def num_layers(self) -> int:
        return len(self.weights)

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def num_classes(self) -> int:
        return self.weights[-1].shape[0]

    def layer_shape(self, layer: int) -> tuple[int, int]:
        """(m, n) = (input dim, output dim) of `layer`'s weight matrix."""
        n, m = self.weights[layer].shape
        return m, n


def init_mlp(layer_dims: list[int], rng: np.random.Generator) -> Mlp:
    """Random model with dims [input, hidden..., num_classes]."""
    weights = [
        xavier_uniform(layer_dims[l + 1], layer_dims[l], rng)
        for l in range(len(layer_dims) - 1)
    ]
    biases = [np.zeros(layer_dims[l + 1]) for l in range(len(layer_dims) - 1)]
    return Mlp(weights, biases)


@dataclass
class ForwardTrace:
    """Cached per-layer inputs and pre-activations from one forward call."""

    model: Mlp
    inputs: list[Array]  # inputs[l]: (B, m_l)
    preacts: list[Array]  # preacts[l]: (B, n_l)
    logits: Array  # (B, C)


@dataclass
class GradFactors:
    """Per-example rank-1 factors of one layer's weight gradient."""

    layer: int
    u: Array  # (B, m)
    delta: Array  # (B, n)

    @property
    def batch_size(self) -> int:
        return self.u.shape[0]


def forward(model: Mlp, batch: Array) -> tuple[Array, ForwardTrace]:
    """Forward pass over a (B, input_dim) batch; returns logits and trace."""
    batch = np.atleast_2d(np.asarray(batch, dtype=np.float64))
    if batch.shape[1] != model.input_dim:
        raise ShapeError(f"input dim {batch.shape[1]} != model input dim {model.input_dim}")
    inputs, preacts = [], []
    act = batch
    for l in range(model.num_layers):
        inputs.append(act)
        z = act @ model.weights[l].T + model.biases[l]
        preacts.append(z)
        act = z if l == model.num_layers - 1 else relu(z)
    check_finite(act, "logits")
    return act, ForwardTrace(model, inputs, preacts, act)


def backward(
    model: Mlp, trace: ForwardTrace, dlogits: Array
) -> tuple[list[GradFactors], list[Array], list[Array]]:
    """Backprop arbitrary per-example logit gradients through the trace.

    Returns (factors per layer, dense weight grads, dense bias grads); the
    dense grads are the unaveraged sum over the batch, i.e. gradients of the
    summed per-example loss, matching the factor sum exactly.
    """
    if trace.model is not model:
        raise ContractError("trace was produced by a different model")
    factors: list[GradFactors] = [None] * model.num_layers  # type: ignore[list-item]
    wgrads: list[Array] = [None] * model.num_layers  # type: ignore[list-item]
    bgrads: list[Array] = [None] * model.num_layers  # type: ignore[list-item]
    delta = np.asarray(dlogits, dtype=np.float64)
    for l in range(model.num_layers - 1, -1, -1):
        u = trace.inputs[l]
        factors[l] = GradFactors(l, u, delta)
        wgrads[l] = delta.T @ u
        bgrads[l] = delta.sum(axis=0)
        if l > 0:
            delta = (delta @ model.weights[l]) * relu_grad(trace.preacts[l - 1])
    return factors, wgrads, bgrads


def backward_nll(
    model: Mlp, trace: ForwardTrace, labels: np.ndarray
) -> tuple[float, list[GradFactors], list[Array], list[Array]]:
    """Mean NLL loss and its per-example factorized / dense gradients.

    Factors and dense grads correspond to the *summed* per-example NLL; the
    caller divides by B where a mean-loss gradient is wanted.
    """
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    logits = trace.logits
    if labels.shape[0] != logits.shape[0]:
        raise ShapeError("one label per example required")
    if labels.min() < 0 or labels.max() >= model.num_classes:
        raise IndexError("label out of range")
    logp = log_softmax(logits)
    loss = -float(np.mean(logp[np.arange(labels.size), labels]))
    dlogits = np.exp(logp)
    dlogits[np.arange(labels.size), labels] -= 1.0
    factors, wgrads, bgrads = backward(model, trace, dlogits)
    return loss, factors, wgrads, bgrads


def reconstruct_gradient(factors: GradFactors) -> Array:
    """Sum of per-example outer products; equals the dense weight gradient."""
    if factors.batch_size == 0:
        raise ShapeError("empty factors")
    return factors.delta.T @ factors.u


def clone_with_weights(model: Mlp, replacements: dict[int, Array]) -> Mlp:
    """Independent copy of `model` with some weight matrices replaced."""
    for l, w in replacements.items():
        if not 0 <= l < model.num_layers:
            raise ShapeError(f"unknown layer id {l}")
        if w.shape != model.weights[l].shape:
            raise ShapeError(
                f"replacement for layer {l} has shape {w.shape}, "
                f"expected {model.weights[l].shape}"
            )
    weights = [
        np.array(replacements.get(l, model.weights[l]), dtype=np.float64, copy=True)
        for l in range(model.num_layers)
    ]
    biases = [np.array(b, copy=True) for b in model.biases]
    return Mlp(weights, biases)


def save_model(model: Mlp, path: str | Path) -> None:
    payload = {
        "format_version": MODEL_FORMAT_VERSION,
        "layer_dims": [model.input_dim] + [w.shape[0] for w in model.weights],
        "weights": [w.tolist() for w in model.weights],
        "biases": [b.tolist() for b in model.biases],
    }
    Path(path).write_text(json.dumps(payload))


def load_model(path: str | Path) -> Mlp:
    try:
        payload = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise DataError(f"malformed model checkpoint {path}: {e}") from e
    if payload.get("format_version") != MODEL_FORMAT_VERSION:
        raise DataError(
            f"model checkpoint version {payload.get('format_version')} "
            f"unsupported (want {MODEL_FORMAT_VERSION})"
        )
    weights = [np.array(w, dtype=np.float64) for w in payload["weights"]]
    biases = [np.array(b, dtype=np.float64) for b in payload["biases"]]
    return Mlp(weights, biases)
