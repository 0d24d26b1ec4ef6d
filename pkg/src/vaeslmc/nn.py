"""Dense feed-forward networks with exact reverse-mode gradients and Adam.

Only what the VAE needs: fully-connected layers with exact (erf-based) gelu
or identity activations, batched forward/backward passes in float64, an Adam
optimizer and a versioned binary checkpoint format.

Layers store weights as ``(out, in)`` matrices, so a layer computes
``h @ W.T + b`` on a batch ``h`` of shape ``(n, in)``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import ndtr

from .errors import CorruptFileError, DimensionError, StateError, TrainingError

ACTIVATIONS = ("identity", "gelu")
_INV_SQRT_2PI = 0.3989422804014327

MAGIC = b"VSNN"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sHI")
_LAYER_HEADER = struct.Struct("<IIB")


def gelu(x):
    """Exact gelu, ``x * Phi(x)`` with the Gaussian CDF."""
    return x * ndtr(x)


def gelu_grad(x):
    return ndtr(x) + x * np.exp(-0.5 * x * x) * _INV_SQRT_2PI


@dataclass
class DenseLayer:
    weights: np.ndarray
    biases: np.ndarray
    activation: str = "gelu"

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.biases = np.asarray(self.biases, dtype=np.float64)
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.weights.ndim != 2 or self.biases.shape != (self.weights.shape[0],):
            raise DimensionError(
                f"weights {self.weights.shape} and biases {self.biases.shape} do not match"
            )

    @property
    def in_dim(self) -> int:
        return self.weights.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights.shape[0]

    @classmethod
    def init(cls, in_dim, out_dim, activation, rng):
        # fan-in scaled uniform: Var(W) = 1 / in_dim
        limit = np.sqrt(3.0 / in_dim)
        w = rng.uniform(-limit, limit, size=(out_dim, in_dim))
        return cls(w, np.zeros(out_dim), activation)


@dataclass
class _Tape:
    inputs: list
    preacts: list
    cdfs: list
    squeeze: bool


class Network:
    """A chain of dense layers.

    ``forward`` is read-only.  ``forward(x, keep=True)`` additionally records
    the activations needed by the next ``backward`` call; that recording is
    the only mutable state, so training a network is single-writer.
    """

    def __init__(self, layers):
        layers = list(layers)
        if not layers:
            raise ValueError("a network needs at least one layer")
        for k, (a, b) in enumerate(zip(layers[:-1], layers[1:])):
            if a.out_dim != b.in_dim:
                raise DimensionError(
                    f"layer {k} outputs {a.out_dim} values but layer {k + 1} expects {b.in_dim}"
                )
        self.layers = layers
        self._tape = None

    @classmethod
    def mlp(cls, sizes, rng, hidden_activation="gelu", output_activation="identity"):
        """Build ``sizes[0] -> ... -> sizes[-1]`` with fan-in uniform init."""
        sizes = list(sizes)
        layers = []
        for k, (i, o) in enumerate(zip(sizes[:-1], sizes[1:])):
            act = output_activation if k == len(sizes) - 2 else hidden_activation
            layers.append(DenseLayer.init(i, o, act, rng))
        return cls(layers)

    @property
    def input_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def output_dim(self) -> int:
        return self.layers[-1].out_dim

    def params(self):
        """Parameter arrays in a fixed order ``[W0, b0, W1, b1, ...]`` (views, not copies)."""
        out = []
        for layer in self.layers:
            out.extend((layer.weights, layer.biases))
        return out

    def copy(self):
        return Network(
            [DenseLayer(l.weights.copy(), l.biases.copy(), l.activation) for l in self.layers]
        )

    def _check_input(self, x):
        x = np.asarray(x, dtype=np.float64)
        squeeze = x.ndim == 1
        x2 = x[None, :] if squeeze else x
        if x2.ndim != 2 or x2.shape[1] != self.input_dim:
            raise DimensionError(f"expected input of dim {self.input_dim}, got shape {x.shape}")
        if not np.all(np.isfinite(x2)):
            raise ValueError("network input contains non-finite values")
        return x2, squeeze

    def forward(self, x, keep=False):
        """Evaluate on a vector ``(in,)`` or a batch ``(n, in)``."""
        h, squeeze = self._check_input(x)
        inputs, preacts, cdfs = [], [], []
        for layer in self.layers:
            a = h @ layer.weights.T + layer.biases
            cdf = ndtr(a) if layer.activation == "gelu" else None
            if keep:
                inputs.append(h)
                preacts.append(a)
                cdfs.append(cdf)
            h = a * cdf if cdf is not None else a
        self._tape = _Tape(inputs, preacts, cdfs, squeeze) if keep else None
        return h[0] if squeeze else h

    def backward(self, upstream):
        """Gradients of ``sum(upstream * forward(x))`` for the last kept forward pass.

        Returns ``(param_grads, input_grad)`` with ``param_grads`` in the same
        order as :meth:`params`.
        """
        tape = self._tape
        if tape is None:
            raise StateError("backward() needs a preceding forward(x, keep=True)")
        g = np.asarray(upstream, dtype=np.float64)
        if tape.squeeze:
            g = g[None, :]
        if g.shape != (tape.inputs[0].shape[0], self.output_dim):
            raise DimensionError(f"upstream gradient has shape {g.shape}")
        grads = [None] * (2 * len(self.layers))
        for k in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[k]
            if layer.activation == "gelu":
                a = tape.preacts[k]
                g = g * (tape.cdfs[k] + a * np.exp(-0.5 * a * a) * _INV_SQRT_2PI)
            grads[2 * k] = g.T @ tape.inputs[k]
            grads[2 * k + 1] = g.sum(axis=0)
            g = g @ layer.weights
        self._tape = None
        return grads, (g[0] if tape.squeeze else g)

    def __call__(self, x):
        return self.forward(x)

    def __getstate__(self):
        return {"layers": self.layers}

    def __setstate__(self, state):
        self.layers = state["layers"]
        self._tape = None


@dataclass
class AdamState:
    first_moment: list
    second_moment: list
    step_count: int = 0
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8

    @classmethod
    def for_params(cls, params, learning_rate=1e-3, beta1=0.9, beta2=0.999, eps_adam=1e-8):
        return cls(
            [np.zeros_like(p) for p in params],
            [np.zeros_like(p) for p in params],
            0,
            learning_rate,
            beta1,
            beta2,
            eps_adam,
        )


def adam_step(params, grads, opt: AdamState):
    """One bias-corrected Adam update, applied to ``params`` in place.

    Raises :class:`TrainingError` (with ``param_index``) if any gradient is
    non-finite; in that case no parameter is modified.
    """
    if len(params) != len(grads) or len(params) != len(opt.first_moment):
        raise DimensionError("params, grads and optimizer state have different lengths")
    for i, (p, g) in enumerate(zip(params, grads)):
        if p.shape != g.shape or p.shape != opt.first_moment[i].shape:
            raise DimensionError(f"shape mismatch at parameter {i}")
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for parameter {i}", param_index=i)
    opt.step_count += 1
    t = opt.step_count
    c1 = 1.0 - opt.beta1**t
    c2 = 1.0 - opt.beta2**t
    for p, g, m, v in zip(params, grads, opt.first_moment, opt.second_moment):
        m *= opt.beta1
        m += (1.0 - opt.beta1) * g
        v *= opt.beta2
        v += (1.0 - opt.beta2) * (g * g)
        p -= opt.learning_rate * (m / c1) / (np.sqrt(v / c2) + opt.eps_adam)
    return params, opt


def save_weights(net: Network, path):
    """Write ``net`` to ``path`` in the versioned little-endian binary format."""
    chunks = [_HEADER.pack(MAGIC, FORMAT_VERSION, len(net.layers))]
    for layer in net.layers:
        tag = ACTIVATIONS.index(layer.activation)
        chunks.append(_LAYER_HEADER.pack(layer.in_dim, layer.out_dim, tag))
        chunks.append(np.ascontiguousarray(layer.weights, dtype="<f8").tobytes())
        chunks.append(np.ascontiguousarray(layer.biases, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def read_weights(path) -> Network:
    """Read a checkpoint into a new network."""
    buf = Path(path).read_bytes()
    if len(buf) < _HEADER.size:
        raise CorruptFileError(f"{path}: file too short for header")
    magic, version, n_layers = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise CorruptFileError(f"{path}: bad magic bytes {magic!r}")
    if version != FORMAT_VERSION:
        raise CorruptFileError(f"{path}: unsupported format version {version}")
    offset = _HEADER.size
    layers = []
    for k in range(n_layers):
        if len(buf) < offset + _LAYER_HEADER.size:
            raise CorruptFileError(f"{path}: truncated in header of layer {k}")
        n_in, n_out, tag = _LAYER_HEADER.unpack_from(buf, offset)
        offset += _LAYER_HEADER.size
        if tag >= len(ACTIVATIONS):
            raise CorruptFileError(f"{path}: unknown activation tag {tag} in layer {k}")
        n_bytes = 8 * (n_out * n_in + n_out)
        if len(buf) < offset + n_bytes:
            raise CorruptFileError(f"{path}: truncated in weights of layer {k}")
        w = np.frombuffer(buf, dtype="<f8", count=n_out * n_in, offset=offset)
        b = np.frombuffer(buf, dtype="<f8", count=n_out, offset=offset + 8 * n_out * n_in)
        offset += n_bytes
        layers.append(DenseLayer(w.reshape(n_out, n_in).astype(np.float64), b.astype(np.float64), ACTIVATIONS[tag]))
    if offset != len(buf):
        raise CorruptFileError(f"{path}: {len(buf) - offset} trailing bytes")
    return Network(layers)


def load_weights(net: Network, path):
    """Load a checkpoint into ``net``, which must have the same architecture."""
    loaded = read_weights(path)
    if len(loaded.layers) != len(net.layers):
        raise DimensionError(f"checkpoint has {len(loaded.layers)} layers, network has {len(net.layers)}")
    for k, (dst, src) in enumerate(zip(net.layers, loaded.layers)):
        if dst.weights.shape != src.weights.shape:
            raise DimensionError(
                f"layer {k}: checkpoint is {src.in_dim}->{src.out_dim}, network is {dst.in_dim}->{dst.out_dim}"
            )
        if dst.activation != src.activation:
            raise DimensionError(f"layer {k}: activation {src.activation} != {dst.activation}")
    for dst, src in zip(net.layers, loaded.layers):
        dst.weights[...] = src.weights
        dst.biases[...] = src.biases
    net._tape = None
    return net
