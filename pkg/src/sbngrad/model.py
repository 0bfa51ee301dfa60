"""Stochastic binary network model.

A network maps a real input ``x0`` through layers ``k = 1..L``; each layer
computes an affine preactivation of the previous state and emits a binary
state in {-1, +1} with ``P(x_j = +1) = F_Z(a_j)``, where ``F_Z`` is the cdf of
the injected noise. A softmax cross-entropy head scores the last binary layer.

Arrays carry a leading batch axis everywhere: states and preactivations are
``(B, n)``. Functions that accept a single vector promote it to ``B = 1``.
Conv layers store their activations flattened in C order ``(c, h, w)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit, logsumexp

from .errors import ContractError, DomainError, ShapeError

# Stream tags for make_rng; keep stable, they are part of the reproducibility contract.
STREAM_SAMPLES = 0
STREAM_TRAIN = 1
STREAM_METRICS = 2
STREAM_WHITEN = 3
STREAM_DATA = 4


def make_rng(seed: int, *keys: int) -> np.random.Generator:
    """Counter-style generator keyed by ``(seed, *keys)``.

    Each key tuple gets an independent Philox stream, so results for a given
    sample index do not depend on evaluation order.
    """
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, *keys])))


# ---------------------------------------------------------------------------
# noise


class LogisticNoise:
    kind = "logistic"

    def cdf(self, a):
        a = np.asarray(a, dtype=np.float64)
        if not np.all(np.isfinite(a)):
            raise DomainError("noise cdf evaluated at a non-finite preactivation")
        return expit(a)

    def pdf(self, a):
        a = np.asarray(a, dtype=np.float64)
        return expit(a) * expit(-a)

    def score(self, a, x):
        """d/da log P(x | a) for binary ``x``; equals ``x * pdf(a) / cdf(x * a)``."""
        return x * expit(-x * np.asarray(a, dtype=np.float64))

    def log_cdf(self, a):
        return -np.logaddexp(0.0, -np.asarray(a, dtype=np.float64))


LOGISTIC = LogisticNoise()


def noise_cdf(model, a):
    return model.cdf(a)


def noise_pdf(model, a):
    return model.pdf(a)


# ---------------------------------------------------------------------------
# layers


def _as_batch(x, size: int, what: str = "input") -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != size:
        raise ShapeError(f"{what} has shape {x.shape}, expected (B, {size})")
    return x


@dataclass(frozen=True, eq=False)
class FCLayer:
    """Fully connected preactivation ``a = W x + b`` with ``W`` of shape (n_out, n_in)."""

    W: np.ndarray
    b: np.ndarray

    kind = "fc"

    def __post_init__(self):
        W = np.asarray(self.W, dtype=np.float64)
        b = np.asarray(self.b, dtype=np.float64)
        if W.ndim != 2 or b.shape != (W.shape[0],):
            raise ShapeError(f"fc layer weights {W.shape} and bias {b.shape} disagree")
        object.__setattr__(self, "W", W)
        object.__setattr__(self, "b", b)

    @property
    def in_size(self) -> int:
        return self.W.shape[1]

    @property
    def out_size(self) -> int:
        return self.W.shape[0]

    @property
    def params(self) -> tuple[np.ndarray, np.ndarray]:
        return (self.W, self.b)

    def with_params(self, W, b) -> FCLayer:
        return FCLayer(W, b)

    def preactivation(self, x):
        x = _as_batch(x, self.in_size)
        return x @ self.W.T + self.b

    def param_grads(self, x, grad_a, per_sample=False):
        """Parameter gradient given the gradient wrt the preactivation."""
        if per_sample:
            return (grad_a[:, :, None] * x[:, None, :], grad_a.copy())
        return (grad_a.T @ x, grad_a.sum(axis=0))

    def backward_input(self, grad_a):
        return grad_a @ self.W


@dataclass(frozen=True, eq=False)
class Conv2DLayer:
    """Valid cross-correlation with stride and a per-output-channel bias.

    ``a[o, y, x] = b[o] + sum_{c,u,v} W[o, c, u, v] * x[c, y*s + u, x*s + v]``.
    """

    W: np.ndarray
    b: np.ndarray
    in_shape: tuple[int, int, int]
    stride: int = 1

    kind = "conv"

    def __post_init__(self):
        W = np.asarray(self.W, dtype=np.float64)
        b = np.asarray(self.b, dtype=np.float64)
        in_shape = tuple(int(s) for s in self.in_shape)
        if W.ndim != 4 or b.shape != (W.shape[0],) or len(in_shape) != 3:
            raise ShapeError(f"conv layer weights {W.shape}, bias {b.shape}, input {in_shape}")
        if in_shape[0] != W.shape[1]:
            raise ShapeError(f"conv kernel expects {W.shape[1]} channels, input has {in_shape[0]}")
        if self.stride < 1:
            raise ShapeError("stride must be >= 1")
        if in_shape[1] < W.shape[2] or in_shape[2] < W.shape[3]:
            raise ShapeError("kernel larger than input")
        object.__setattr__(self, "W", W)
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "in_shape", in_shape)

    @property
    def out_shape(self) -> tuple[int, int, int]:
        c, h, w = self.in_shape
        kh, kw = self.W.shape[2:]
        s = self.stride
        return (self.W.shape[0], (h - kh) // s + 1, (w - kw) // s + 1)

    @property
    def in_size(self) -> int:
        return int(np.prod(self.in_shape))

    @property
    def out_size(self) -> int:
        return int(np.prod(self.out_shape))

    @property
    def params(self) -> tuple[np.ndarray, np.ndarray]:
        return (self.W, self.b)

    def with_params(self, W, b) -> Conv2DLayer:
        return Conv2DLayer(W, b, self.in_shape, self.stride)

    def _windows(self, x):
        # (B, c, Ho, Wo, kh, kw); strided view, no copy
        x = x.reshape((-1,) + self.in_shape)
        kh, kw = self.W.shape[2:]
        win = sliding_window_view(x, (kh, kw), axis=(2, 3))
        return win[:, :, :: self.stride, :: self.stride]

    def input_slice(self, u: int, v: int):
        """Input positions read by kernel offset (u, v), one per output location."""
        _, ho, wo = self.out_shape
        s = self.stride
        return (slice(u, u + s * (ho - 1) + 1, s), slice(v, v + s * (wo - 1) + 1, s))

    def preactivation(self, x):
        x = _as_batch(x, self.in_size)
        a = np.einsum("bchwuv,ocuv->bohw", self._windows(x), self.W, optimize=True)
        a += self.b[None, :, None, None]
        return a.reshape(x.shape[0], -1)

    def param_grads(self, x, grad_a, per_sample=False):
        g = grad_a.reshape((-1,) + self.out_shape)
        win = self._windows(x)
        if per_sample:
            return (np.einsum("bohw,bchwuv->bocuv", g, win, optimize=True), g.sum(axis=(2, 3)))
        return (np.einsum("bohw,bchwuv->ocuv", g, win, optimize=True), g.sum(axis=(0, 2, 3)))

    def backward_input(self, grad_a):
        g = grad_a.reshape((-1,) + self.out_shape)
        out = np.zeros((g.shape[0],) + self.in_shape)
        kh, kw = self.W.shape[2:]
        for u in range(kh):
            for v in range(kw):
                sy, sx = self.input_slice(u, v)
                out[:, :, sy, sx] += np.einsum("bohw,oc->bchw", g, self.W[:, :, u, v])
        return out.reshape(g.shape[0], -1)

    def to_dense(self) -> FCLayer:
        """Equivalent fully connected layer, built by unrolling the kernel."""
        eye = np.eye(self.in_size)
        zero_bias = self.with_params(self.W, np.zeros_like(self.b))
        M = zero_bias.preactivation(eye).T
        bias = np.repeat(self.b, self.out_shape[1] * self.out_shape[2])
        return FCLayer(M, bias)


def preactivation(layer, x_prev):
    return layer.preactivation(x_prev)


def preactivation_flip_fc(layer: FCLayer, x_prev, a, i: int):
    """Preactivation after sign-flipping input unit ``i``; O(n_out)."""
    if layer.kind != "fc":
        raise ContractError("preactivation_flip_fc requires a fully connected layer")
    if not 0 <= i < layer.in_size:
        raise IndexError(f"unit {i} out of range for layer input of size {layer.in_size}")
    x_prev = np.asarray(x_prev, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    return a - 2.0 * layer.W[:, i] * x_prev[..., i : i + 1]


# ---------------------------------------------------------------------------
# head


@dataclass(frozen=True, eq=False)
class SoftmaxHead:
    """Affine class scores followed by softmax cross-entropy."""

    W: np.ndarray
    b: np.ndarray

    kind = "softmax"

    def __post_init__(self):
        W = np.asarray(self.W, dtype=np.float64)
        b = np.asarray(self.b, dtype=np.float64)
        if W.ndim != 2 or b.shape != (W.shape[0],):
            raise ShapeError(f"head weights {W.shape} and bias {b.shape} disagree")
        if W.shape[0] < 2:
            raise ShapeError("the head needs at least two classes")
        object.__setattr__(self, "W", W)
        object.__setattr__(self, "b", b)

    @property
    def n_in(self) -> int:
        return self.W.shape[1]

    @property
    def n_classes(self) -> int:
        return self.W.shape[0]

    @property
    def params(self):
        return (self.W, self.b)

    def with_params(self, W, b) -> SoftmaxHead:
        return SoftmaxHead(W, b)

    def _labels(self, y, batch):
        y = np.broadcast_to(np.asarray(y), (batch,))
        if not np.issubdtype(y.dtype, np.integer):
            if not np.all(np.equal(np.mod(y, 1), 0)):
                raise IndexError("labels must be integer class indices")
            y = y.astype(np.int64)
        if np.any((y < 0) | (y >= self.n_classes)):
            raise IndexError(f"label outside [0, {self.n_classes})")
        return y

    def logits(self, x):
        return x @ self.W.T + self.b

    def loss(self, x, y):
        z = self.logits(x)
        y = self._labels(y, z.shape[0])
        return logsumexp(z, axis=1) - z[np.arange(z.shape[0]), y]

    def loss_flips(self, x, y):
        """``f(x) - f(x with unit i flipped)`` for every i, via rank-1 logit updates."""
        z = self.logits(x)
        y = self._labels(y, z.shape[0])
        rows = np.arange(z.shape[0])
        f = logsumexp(z, axis=1) - z[rows, y]
        zf = z[:, None, :] - 2.0 * x[:, :, None] * self.W.T[None, :, :]
        ff = logsumexp(zf, axis=2) - zf[rows, :, y]
        return f[:, None] - ff

    def _grad_logits(self, x, y):
        z = self.logits(x)
        y = self._labels(y, z.shape[0])
        p = np.exp(z - logsumexp(z, axis=1, keepdims=True))
        p[np.arange(z.shape[0]), y] -= 1.0
        return p

    def grad_x(self, x, y):
        return self._grad_logits(x, y) @ self.W

    def param_grads(self, x, y, weights=None, per_sample=False):
        g = self._grad_logits(x, y)
        if weights is not None:
            g = g * np.asarray(weights)[:, None]
        if per_sample:
            return (g[:, :, None] * x[:, None, :], g)
        return (g.T @ x, g.sum(axis=0))

    def probabilities(self, x):
        z = self.logits(x)
        return np.exp(z - logsumexp(z, axis=1, keepdims=True))


# ---------------------------------------------------------------------------
# network


@dataclass(frozen=True, eq=False)
class Network:
    layers: tuple
    head: object
    noise: LogisticNoise = field(default=LOGISTIC)

    def __post_init__(self):
        layers = tuple(self.layers)
        if not layers:
            raise ShapeError("a network needs at least one stochastic layer")
        for k in range(1, len(layers)):
            if layers[k].in_size != layers[k - 1].out_size:
                raise ShapeError(
                    f"layer {k + 1} expects {layers[k].in_size} inputs, "
                    f"layer {k} produces {layers[k - 1].out_size}"
                )
        if self.head.n_in != layers[-1].out_size:
            raise ShapeError("head input size does not match the last layer")
        object.__setattr__(self, "layers", layers)

    @property
    def depth(self) -> int:
        return len(self.layers)

    @property
    def input_size(self) -> int:
        return self.layers[0].in_size

    @property
    def widths(self) -> list[int]:
        return [layer.out_size for layer in self.layers]

    def param_blocks(self) -> list[tuple[np.ndarray, ...]]:
        """Parameters per block: layers 1..L, then the head as block L+1."""
        return [layer.params for layer in self.layers] + [tuple(self.head.params)]

    def flat_params(self) -> np.ndarray:
        return np.concatenate([p.ravel() for blk in self.param_blocks() for p in blk])

    @property
    def n_params(self) -> int:
        return sum(p.size for blk in self.param_blocks() for p in blk)

    def with_flat_params(self, theta) -> Network:
        theta = np.asarray(theta, dtype=np.float64)
        if theta.shape != (self.n_params,):
            raise ShapeError(f"flat parameter vector has shape {theta.shape}")
        pos = 0
        blocks = []
        for blk in self.param_blocks():
            new = []
            for p in blk:
                new.append(theta[pos : pos + p.size].reshape(p.shape).copy())
                pos += p.size
            blocks.append(new)
        layers = tuple(l.with_params(*b) for l, b in zip(self.layers, blocks[:-1]))
        head = self.head.with_params(*blocks[-1]) if blocks[-1] else self.head
        return replace(self, layers=layers, head=head)

    def block_slices(self) -> list[slice]:
        """Slices of the flat parameter vector, one per block (layers then head)."""
        out, pos = [], 0
        for blk in self.param_blocks():
            n = sum(p.size for p in blk)
            out.append(slice(pos, pos + n))
            pos += n
        return out


@dataclass
class SampleTrace:
    """One forward sample per batch row.

    ``states[0]`` is the real input; ``states[k]`` and ``preacts[k]`` for
    ``k = 1..L`` hold layer k's binary state and preactivation. ``preacts[0]``
    is None.
    """

    states: list[np.ndarray]
    preacts: list

    @property
    def depth(self) -> int:
        return len(self.states) - 1

    @property
    def batch_size(self) -> int:
        return self.states[0].shape[0]


def sample_layer(a, model, rng: np.random.Generator) -> np.ndarray:
    """Bernoulli states: +1 iff u < F_Z(a) with u ~ U[0, 1)."""
    p = model.cdf(a)
    u = rng.random(np.shape(p))
    return np.where(u < p, 1.0, -1.0)


def forward_sample(net: Network, x0, rng: np.random.Generator) -> SampleTrace:
    x = _as_batch(x0, net.input_size, "network input")
    states, preacts = [x], [None]
    for layer in net.layers:
        a = layer.preactivation(x)
        x = sample_layer(a, net.noise, rng)
        preacts.append(a)
        states.append(x)
    return SampleTrace(states, preacts)


def make_trace(net: Network, x0, states: Sequence) -> SampleTrace:
    """Trace with prescribed binary states; preactivations are recomputed from them."""
    x = _as_batch(x0, net.input_size, "network input")
    if len(states) != net.depth:
        raise ShapeError(f"need {net.depth} layer states, got {len(states)}")
    out_states, preacts = [x], [None]
    for layer, s in zip(net.layers, states):
        a = layer.preactivation(x)
        s = np.asarray(s, dtype=np.float64)
        s = np.broadcast_to(s.reshape(-1, layer.out_size) if s.ndim == 1 else s, a.shape)
        if not np.all(np.abs(s) == 1.0):
            raise ContractError("binary states must be +1 or -1")
        out_states.append(np.array(s))
        preacts.append(a)
        x = out_states[-1]
    return SampleTrace(out_states, preacts)


def check_trace(net: Network, trace: SampleTrace) -> None:
    if trace.depth != net.depth:
        raise ContractError(f"trace has {trace.depth} layers, network has {net.depth}")
    if trace.states[0].shape[1] != net.input_size:
        raise ContractError("trace input does not match the network input size")
    for k, layer in enumerate(net.layers, start=1):
        if trace.states[k].shape[1] != layer.out_size or trace.preacts[k].shape != trace.states[k].shape:
            raise ContractError(f"trace layer {k} does not match the network")


def _loss_output(values, x):
    return float(values[0]) if np.ndim(x) == 1 else values


def head_loss(net: Network, xL, label):
    x = _as_batch(xL, net.head.n_in, "last-layer state")
    return _loss_output(net.head.loss(x, label), xL)


def head_loss_flips(net: Network, xL, label):
    x = _as_batch(xL, net.head.n_in, "last-layer state")
    df = net.head.loss_flips(x, label)
    return df[0] if np.ndim(xL) == 1 else df


def expected_loss_mc(net: Network, X, y, S: int, rng: np.random.Generator) -> float:
    """Monte Carlo estimate of the expected loss over a batch, S traces per point."""
    if S < 1:
        raise DomainError("S must be >= 1")
    X = _as_batch(X, net.input_size, "batch")
    if X.shape[0] == 0:
        raise DomainError("expected loss of an empty batch")
    y = np.broadcast_to(np.asarray(y), (X.shape[0],))
    trace = forward_sample(net, np.repeat(X, S, axis=0), rng)
    return float(np.mean(net.head.loss(trace.states[-1], np.repeat(y, S))))


def predict_ensemble(net: Network, x0, S: int, rng: np.random.Generator) -> np.ndarray:
    """Mean over S traces of the head's class probabilities."""
    if S < 1:
        raise DomainError("S must be >= 1")
    X = _as_batch(x0, net.input_size, "input")
    B = X.shape[0]
    trace = forward_sample(net, np.repeat(X, S, axis=0), rng)
    p = net.head.probabilities(trace.states[-1]).reshape(B, S, -1).mean(axis=1)
    return p[0] if np.ndim(x0) == 1 else p
