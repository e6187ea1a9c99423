"""Small MLP classifiers split into a feature trunk and a linear head.

The trunk (all hidden layers) is the representation space that group
re-labeling clusters over; the final linear layer is the classifier. Both
forwards run through the differentiation engine so training and inference
share one code path.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad

_ACTIVATIONS = ("relu", "tanh")

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class MLPSpec:
    """Architecture of a classifier: input_dim -> hidden_dims -> num_classes."""

    input_dim: int
    hidden_dims: tuple
    num_classes: int
    activation: str = "relu"

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if self.input_dim < 1:
            raise ValueError("input_dim must be positive")
        if not self.hidden_dims or any(h < 1 for h in self.hidden_dims):
            raise ValueError("need at least one positive hidden layer")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"activation must be one of {_ACTIVATIONS}")

    @property
    def layer_dims(self):
        """(fan_in, fan_out) per layer, classifier last."""
        dims = (self.input_dim,) + self.hidden_dims + (self.num_classes,)
        return tuple(zip(dims[:-1], dims[1:]))

    @property
    def feature_dim(self) -> int:
        return self.hidden_dims[-1]


@dataclass
class MLPParams:
    """Weight/bias pairs per layer; the final pair is the linear classifier."""

    layers: list
    spec: MLPSpec

    def arrays(self) -> list:
        """Flat [W0, b0, W1, b1, ...] view used by the engine and optimizers."""
        out = []
        for w, b in self.layers:
            out.append(w)
            out.append(b)
        return out

    def copy(self) -> "MLPParams":
        return MLPParams([(w.copy(), b.copy()) for w, b in self.layers], self.spec)

    def num_params(self) -> int:
        return sum(w.size + b.size for w, b in self.layers)

    @classmethod
    def from_arrays(cls, arrays, spec: MLPSpec) -> "MLPParams":
        layers = [(arrays[i], arrays[i + 1]) for i in range(0, len(arrays), 2)]
        return cls(layers, spec)


def init_mlp(spec: MLPSpec, seed: int) -> MLPParams:
    """Fan-in scaled normal weights, zero biases; bitwise reproducible per seed."""
    rng = np.random.default_rng(seed)
    layers = []
    for fan_in, fan_out in spec.layer_dims:
        w = rng.standard_normal((fan_out, fan_in)) / np.sqrt(fan_in)
        b = np.zeros(fan_out)
        layers.append((w, b))
    return MLPParams(layers, spec)


def _dense(x: ad.Node, w: ad.Node, b: ad.Node) -> ad.Node:
    return ad.add_bias(ad.matmul(x, ad.transpose(w)), b)


def features_node(spec: MLPSpec, leaves, x: ad.Node) -> ad.Node:
    """Activations of the last hidden layer (the clustering space)."""
    act = ad.relu if spec.activation == "relu" else ad.tanh
    h = x
    for i in range(len(spec.hidden_dims)):
        h = act(_dense(h, leaves[2 * i], leaves[2 * i + 1]))
    return h


def logits_node(spec: MLPSpec, leaves, x: ad.Node) -> ad.Node:
    h = features_node(spec, leaves, x)
    last = len(spec.hidden_dims)
    return _dense(h, leaves[2 * last], leaves[2 * last + 1])


def _check_input(spec: MLPSpec, X) -> np.ndarray:
    X = np.ascontiguousarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != spec.input_dim:
        raise ValueError(f"expected (n, {spec.input_dim}) inputs, got {X.shape}")
    return X


def forward_features(params: MLPParams, X) -> np.ndarray:
    X = _check_input(params.spec, X)
    leaves = [ad.constant(a) for a in params.arrays()]
    return features_node(params.spec, leaves, ad.constant(X)).value


def forward_logits(params: MLPParams, X) -> np.ndarray:
    X = _check_input(params.spec, X)
    leaves = [ad.constant(a) for a in params.arrays()]
    return logits_node(params.spec, leaves, ad.constant(X)).value


def per_sample_nll(logits: ad.Node, labels) -> ad.Node:
    """Negative log-softmax of the true class, one entry per row."""
    labels = np.ascontiguousarray(labels, dtype=np.int64)
    n, c = logits.shape
    if n == 0:
        raise ValueError("loss of an empty batch is undefined")
    if labels.min() < 0 or labels.max() >= c:
        raise ValueError(f"labels must lie in [0, {c})")
    return ad.scale(ad.gather_rows(ad.log_softmax(logits), labels), -1.0)


def cross_entropy(logits: ad.Node, labels, reduction: str = "mean") -> ad.Node:
    """Cross-entropy over the batch; mean by default, sum on request."""
    labels = np.ascontiguousarray(labels, dtype=np.int64)
    n, c = logits.shape
    if n == 0:
        raise ValueError("loss of an empty batch is undefined")
    if labels.min() < 0 or labels.max() >= c:
        raise ValueError(f"labels must lie in [0, {c})")
    picked = ad.sum_all(ad.gather_rows(ad.log_softmax(logits), labels))
    if reduction == "mean":
        return ad.scale(picked, -1.0 / n)
    if reduction == "sum":
        return ad.scale(picked, -1.0)
    raise ValueError(f"unknown reduction {reduction!r}")


def loss_expression(spec: MLPSpec, X, y, reduction: str = "mean") -> ad.ScalarExpression:
    """Cross-entropy of the model on fixed (X, y) as a function of its parameters."""
    X = _check_input(spec, X)
    y = np.ascontiguousarray(y, dtype=np.int64)

    def build(leaves):
        return cross_entropy(logits_node(spec, leaves, ad.constant(X)), y, reduction)

    return ad.ScalarExpression(build)


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def predict_labels(params: MLPParams, X) -> np.ndarray:
    return np.argmax(forward_logits(params, X), axis=1)


def save_params(params: MLPParams, path) -> None:
    """Binary checkpoint; round-trips bit-exactly."""
    spec = params.spec
    payload = {
        "version": np.int64(CHECKPOINT_VERSION),
        "input_dim": np.int64(spec.input_dim),
        "hidden_dims": np.asarray(spec.hidden_dims, dtype=np.int64),
        "num_classes": np.int64(spec.num_classes),
        "activation": np.bytes_(spec.activation.encode()),
    }
    for i, (w, b) in enumerate(params.layers):
        payload[f"w{i}"] = w
        payload[f"b{i}"] = b
    np.savez(path, **payload)


def load_params(path) -> MLPParams:
    with np.load(path) as data:
        version = int(data["version"])
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        spec = MLPSpec(
            input_dim=int(data["input_dim"]),
            hidden_dims=tuple(int(h) for h in data["hidden_dims"]),
            num_classes=int(data["num_classes"]),
            activation=bytes(data["activation"]).decode(),
        )
        layers = []
        for i in range(len(spec.hidden_dims) + 1):
            layers.append((data[f"w{i}"].copy(), data[f"b{i}"].copy()))
    return MLPParams(layers, spec)
