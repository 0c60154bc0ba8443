"""Dense feed-forward networks with hand-written backprop and an annealed SGD."""

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidArgument, ModelFormatError, StateError

CE_FLOOR = 1e-12


@dataclass
class DenseLayer:
    weight: np.ndarray  # (out_dim, in_dim)
    bias: np.ndarray  # (out_dim,)

    @property
    def in_dim(self):
        return self.weight.shape[1]

    @property
    def out_dim(self):
        return self.weight.shape[0]


@dataclass
class Gradients:
    weights: list
    biases: list
    inputs: np.ndarray  # d loss / d x, used to chain a classifier into its generator

    def scale(self, c):
        return Gradients([c * w for w in self.weights], [c * b for b in self.biases], c * self.inputs)

    def __add__(self, other):
        return Gradients(
            [a + b for a, b in zip(self.weights, other.weights)],
            [a + b for a, b in zip(self.biases, other.biases)],
            self.inputs + other.inputs,
        )


class Network:
    """ReLU on hidden layers, identity on the last one (it emits raw logits/features).

    ``forward`` caches the activations needed by ``backward``; ``predict`` is the
    cache-free path for read-only inference.
    """

    def __init__(self, layers, hidden_activation="relu"):
        if not layers:
            raise InvalidArgument("network needs at least one layer")
        if hidden_activation != "relu":
            raise InvalidArgument(f"unsupported hidden activation {hidden_activation!r}")
        for a, b in zip(layers, layers[1:]):
            if a.out_dim != b.in_dim:
                raise InvalidArgument(f"layer dims do not chain: {a.out_dim} -> {b.in_dim}")
        for layer in layers:
            if layer.bias.shape != (layer.out_dim,):
                raise InvalidArgument("bias shape does not match weight rows")
            if not (np.all(np.isfinite(layer.weight)) and np.all(np.isfinite(layer.bias))):
                raise InvalidArgument("non-finite parameter")
        self.layers = layers
        self.hidden_activation = hidden_activation
        self._cache = None

    @property
    def layer_dims(self):
        return [self.layers[0].in_dim] + [layer.out_dim for layer in self.layers]

    @property
    def in_dim(self):
        return self.layers[0].in_dim

    @property
    def out_dim(self):
        return self.layers[-1].out_dim

    def parameters(self):
        out = []
        for layer in self.layers:
            out += [layer.weight, layer.bias]
        return out

    def copy(self):
        return Network(
            [DenseLayer(l.weight.copy(), l.bias.copy()) for l in self.layers],
            self.hidden_activation,
        )

    def fingerprint(self):
        h = hashlib.sha256()
        for p in self.parameters():
            h.update(np.ascontiguousarray(p).tobytes())
        return h.hexdigest()

    def _check_input(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise InvalidArgument(f"expected input of shape (n, {self.in_dim}), got {x.shape}")
        return x

    def predict(self, x):
        a = self._check_input(x)
        last = len(self.layers) - 1
        for i, layer in enumerate(self.layers):
            a = a @ layer.weight.T + layer.bias
            if i < last:
                a = np.maximum(a, 0.0)
        return a

    __call__ = predict

    def forward(self, x):
        a = self._check_input(x)
        inputs, pre = [], []
        last = len(self.layers) - 1
        for i, layer in enumerate(self.layers):
            inputs.append(a)
            z = a @ layer.weight.T + layer.bias
            pre.append(z)
            a = np.maximum(z, 0.0) if i < last else z
        self._cache = (inputs, pre)
        return a

    def backward(self, grad_out):
        """Exact gradient of sum(grad_out * outputs) for the last forward batch.

        Losses hand in the gradient of their batch *mean*, so the result is
        the batch-averaged parameter gradient.
        """
        if self._cache is None:
            raise StateError("backward called before forward")
        inputs, pre = self._cache
        g = np.asarray(grad_out, dtype=np.float64)
        if g.shape != pre[-1].shape:
            raise InvalidArgument(f"upstream gradient shape {g.shape} != output shape {pre[-1].shape}")
        n_layers = len(self.layers)
        dws, dbs = [None] * n_layers, [None] * n_layers
        for i in range(n_layers - 1, -1, -1):
            dws[i] = g.T @ inputs[i]
            dbs[i] = g.sum(axis=0)
            g = g @ self.layers[i].weight
            if i > 0:
                g = g * (pre[i - 1] > 0.0)
        return Gradients(dws, dbs, g)

    def zero_grads(self):
        return Gradients(
            [np.zeros_like(l.weight) for l in self.layers],
            [np.zeros_like(l.bias) for l in self.layers],
            np.zeros((0, self.in_dim)),
        )


def init_network(layer_dims, seed, hidden_activation="relu"):
    dims = list(layer_dims)
    if len(dims) < 2 or any(int(d) != d or d < 1 for d in dims):
        raise InvalidArgument(f"layer_dims must hold >= 2 positive integers, got {dims}")
    rng = np.random.default_rng(seed)
    layers = []
    for d_in, d_out in zip(dims, dims[1:]):
        s = 1.0 / np.sqrt(d_in)
        layers.append(DenseLayer(rng.uniform(-s, s, size=(d_out, d_in)), np.zeros(d_out)))
    return Network(layers, hidden_activation)


def softmax(logits):
    z = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise InvalidArgument("softmax input must be finite")
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_backward(p, grad_p):
    """Pull a gradient w.r.t. softmax outputs back to the logits (row-wise)."""
    return p * (grad_p - np.sum(grad_p * p, axis=-1, keepdims=True))


def cross_entropy(p, label):
    p = np.asarray(p, dtype=np.float64)
    k = p.shape[-1]
    label = np.asarray(label)
    if np.any(label < 0) or np.any(label >= k):
        raise InvalidArgument(f"label out of range [0, {k})")
    if p.ndim == 1:
        return float(-np.log(p[int(label)] + CE_FLOOR))
    return -np.log(p[np.arange(len(p)), label] + CE_FLOOR)


def cross_entropy_grad(p, labels):
    """d/dp of the floored cross-entropy, one row per sample."""
    g = np.zeros_like(p)
    idx = np.arange(len(p))
    g[idx, labels] = -1.0 / (p[idx, labels] + CE_FLOOR)
    return g


@dataclass
class OptimizerState:
    base_lr: float
    momentum: float = 0.9
    weight_decay: float = 5e-4
    anneal_a: float = 10.0
    anneal_b: float = 0.75
    lr_multiplier: float = 1.0
    progress: float = 0.0
    velocity: list = field(default_factory=list)

    def __post_init__(self):
        if self.base_lr <= 0:
            raise InvalidArgument("base_lr must be positive")
        if not 0 <= self.momentum < 1:
            raise InvalidArgument("momentum must lie in [0, 1)")
        if self.weight_decay < 0 or self.anneal_a < 0 or self.anneal_b < 0:
            raise InvalidArgument("weight_decay and annealing constants must be >= 0")

    @property
    def lr(self):
        return self.base_lr * self.lr_multiplier / (1.0 + self.anneal_a * self.progress) ** self.anneal_b


def sgd_step(net, grads, opt):
    """Momentum SGD with L2 decay, applied in place; returns ``(net, opt)``."""
    params = net.parameters()
    flat = []
    for dw, db in zip(grads.weights, grads.biases):
        flat += [dw, db]
    if len(flat) != len(params) or any(g.shape != p.shape for g, p in zip(flat, params)):
        raise InvalidArgument("gradient shapes do not match network parameters")
    if not opt.velocity:
        opt.velocity = [np.zeros_like(p) for p in params]
    elif any(v.shape != p.shape for v, p in zip(opt.velocity, params)):
        raise InvalidArgument("optimizer velocity does not match network parameters")
    lr, m, wd = opt.lr, opt.momentum, opt.weight_decay
    for p, g, v in zip(params, flat, opt.velocity):
        if wd:
            g = g + wd * p
        v *= m
        v -= lr * g
        p += v
    return net, opt


# -- model file ---------------------------------------------------------------

def _fmt(x):
    return format(float(x), ".17g")


def _fmt_list(values):
    return "[" + ",".join(_fmt(v) for v in np.ravel(values)) + "]"


def network_to_dict_json(net):
    layers = ",".join(
        '{"weight":' + _fmt_list(l.weight) + ',"bias":' + _fmt_list(l.bias) + "}" for l in net.layers
    )
    dims = "[" + ",".join(str(d) for d in net.layer_dims) + "]"
    return '{"layer_dims":' + dims + ',"layers":[' + layers + "]}"


def serialize(net):
    return network_to_dict_json(net).encode("ascii")


def network_from_obj(obj):
    if not isinstance(obj, dict):
        raise ModelFormatError("model must be a JSON object")
    try:
        dims = obj["layer_dims"]
        raw_layers = obj["layers"]
    except KeyError as e:
        raise ModelFormatError(f"missing field {e.args[0]!r}") from None
    if not isinstance(dims, list) or len(dims) < 2 or not all(isinstance(d, int) and d > 0 for d in dims):
        raise ModelFormatError("layer_dims must be a list of >= 2 positive integers")
    if not isinstance(raw_layers, list) or len(raw_layers) != len(dims) - 1:
        raise ModelFormatError("layers length must be len(layer_dims) - 1")
    layers = []
    for i, (d_in, d_out) in enumerate(zip(dims, dims[1:])):
        raw = raw_layers[i]
        if not isinstance(raw, dict) or "weight" not in raw or "bias" not in raw:
            raise ModelFormatError(f"layer {i} needs 'weight' and 'bias'")
        try:
            w = np.array(raw["weight"], dtype=np.float64)
            b = np.array(raw["bias"], dtype=np.float64)
        except (TypeError, ValueError):
            raise ModelFormatError(f"layer {i} holds non-numeric values") from None
        if w.shape != (d_in * d_out,) or b.shape != (d_out,):
            raise ModelFormatError(f"layer {i} has wrong parameter count for dims {d_in}->{d_out}")
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
            raise ModelFormatError(f"layer {i} holds non-finite values")
        layers.append(DenseLayer(w.reshape(d_out, d_in), b))
    return Network(layers)


def deserialize(data):
    if isinstance(data, (bytes, bytearray)):
        data = data.decode("utf-8", errors="replace")
    try:
        obj = json.loads(data)
    except json.JSONDecodeError as e:
        raise ModelFormatError(e.msg, e.pos) from None
    return network_from_obj(obj)
