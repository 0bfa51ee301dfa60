"""Exact expected loss and gradient by enumerating layer state spaces.

The joint distribution of the layers is a Markov chain whose state at layer
k ranges over all 2**n_k binary vectors. Forward marginals are propagated
with ``mu_k = mu_{k-1} P_k`` and conditional expectations of the loss with
``v_{k-1} = P_k v_k``. Transition rows are built in chunks of previous
states so memory stays O(2**n) rather than O(4**n); chunks are always
visited in increasing state order, so results are bit-stable.

State ``s`` of an n-unit layer has ``x_j = +1`` iff bit j of s is set
(little-endian), e.g. for n = 2 the order is (-,-), (+,-), (-,+), (+,+).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import CapacityError, DomainError
from .gradient import GradientEstimate, from_flat
from .model import Network, _as_batch

DEFAULT_MAX_WIDTH = 20
_CHUNK_ELEMENTS = 1 << 22


def state_matrix(n: int) -> np.ndarray:
    """All 2**n binary states as rows, little-endian bit order."""
    bits = (np.arange(2**n)[:, None] >> np.arange(n)[None, :]) & 1
    return 2.0 * bits - 1.0


@dataclass
class LayerDistribution:
    k: int
    probs: np.ndarray


@dataclass
class ValueVector:
    k: int
    values: np.ndarray


def _check_widths(net: Network, max_width: int) -> None:
    for k, n in enumerate(net.widths, start=1):
        if n > max_width:
            raise CapacityError(k, n, max_width)


def _chunks(n_rows: int, n_cols: int):
    step = max(1, _CHUNK_ELEMENTS // max(n_cols, 1))
    for start in range(0, n_rows, step):
        yield slice(start, min(start + step, n_rows))


def _transition(net: Network, k: int, x_prev: np.ndarray, bits: np.ndarray):
    """Rows p(x^k | x^{k-1}) for a chunk of previous states, and the preactivations."""
    a = net.layers[k - 1].preactivation(x_prev)
    log_pos = net.noise.log_cdf(a)
    log_neg = net.noise.log_cdf(-a)
    logp = log_pos @ bits.T + log_neg @ (1.0 - bits).T
    return np.exp(logp), a


class _Enumeration:
    def __init__(self, net: Network, x0, max_width: int):
        _check_widths(net, max_width)
        self.net = net
        self.x0 = _as_batch(x0, net.input_size, "network input")
        if self.x0.shape[0] != 1:
            raise DomainError("the enumeration oracle takes a single input point")
        self.states = [self.x0] + [state_matrix(n) for n in net.widths]
        self.bits = [None] + [(s > 0).astype(np.float64) for s in self.states[1:]]

    def marginals(self) -> list[np.ndarray]:
        mus = [np.ones(1)]
        for k in range(1, self.net.depth + 1):
            prev = self.states[k - 1]
            mu = np.zeros(len(self.states[k]))
            for sl in _chunks(len(prev), len(self.states[k])):
                P, _ = _transition(self.net, k, prev[sl], self.bits[k])
                mu += mus[-1][sl] @ P
            mus.append(mu)
        return mus

    def values(self, label) -> list[np.ndarray]:
        L = self.net.depth
        vs = [None] * (L + 1)
        vs[L] = self.net.head.loss(self.states[L], label)
        for k in range(L, 0, -1):
            prev = self.states[k - 1]
            v = np.empty(len(prev))
            for sl in _chunks(len(prev), len(self.states[k])):
                P, _ = _transition(self.net, k, prev[sl], self.bits[k])
                v[sl] = P @ vs[k]
            vs[k - 1] = v
        return vs


def layer_marginals(net: Network, x0, max_width: int = DEFAULT_MAX_WIDTH) -> list[LayerDistribution]:
    mus = _Enumeration(net, x0, max_width).marginals()
    return [LayerDistribution(k, mu) for k, mu in enumerate(mus) if k > 0]


def value_vectors(net: Network, x0, label, max_width: int = DEFAULT_MAX_WIDTH) -> list[ValueVector]:
    vs = _Enumeration(net, x0, max_width).values(label)
    return [ValueVector(k, v) for k, v in enumerate(vs) if k > 0]


def enumerate_expected_loss(net: Network, x0, label, max_width: int = DEFAULT_MAX_WIDTH) -> float:
    """Exact E_Z[f(X^L)] for one input point."""
    en = _Enumeration(net, x0, max_width)
    mus = en.marginals()
    return float(mus[-1] @ net.head.loss(en.states[-1], label))


def enumerate_gradient(net: Network, x0, label, max_width: int = DEFAULT_MAX_WIDTH) -> GradientEstimate:
    """Exact gradient of the expected loss in all parameter blocks."""
    en = _Enumeration(net, x0, max_width)
    mus = en.marginals()
    vs = en.values(label)
    noise = net.noise
    blocks = []
    for k in range(1, net.depth + 1):
        layer = net.layers[k - 1]
        prev, nxt = en.states[k - 1], en.states[k]
        acc = [np.zeros_like(p) for p in layer.params]
        weighted = vs[k]
        for sl in _chunks(len(prev), len(nxt)):
            P, a = _transition(net, k, prev[sl], en.bits[k])
            Pv = P * weighted[None, :]
            # sum_t P[s,t] v(t) d/da_j log p(x_tj | a_sj), split by the sign of x_tj
            up = Pv @ en.bits[k]
            down = Pv @ (1.0 - en.bits[k])
            grad_a = noise.score(a, 1.0) * up + noise.score(a, -1.0) * down
            grad_a *= mus[k - 1][sl, None]
            for dst, g in zip(acc, layer.param_grads(prev[sl], grad_a)):
                dst += g
        blocks.append(tuple(acc))
    blocks.append(tuple(net.head.param_grads(en.states[-1], label, weights=mus[-1])))
    return GradientEstimate(blocks, "exact")


def dataset_expected_loss(net: Network, X, y, max_width: int = DEFAULT_MAX_WIDTH) -> float:
    X = _as_batch(X, net.input_size, "batch")
    y = np.broadcast_to(np.asarray(y), (X.shape[0],))
    return float(np.mean([enumerate_expected_loss(net, x, t, max_width) for x, t in zip(X, y)]))


def dataset_gradient(net: Network, X, y, max_width: int = DEFAULT_MAX_WIDTH) -> GradientEstimate:
    """Exact gradient of the batch-mean expected loss."""
    X = _as_batch(X, net.input_size, "batch")
    y = np.broadcast_to(np.asarray(y), (X.shape[0],))
    total = np.zeros(net.n_params)
    for x, t in zip(X, y):
        total += enumerate_gradient(net, x, t, max_width).flat()
    return from_flat(net, total / X.shape[0], "exact")


def finite_diff_gradient(net: Network, x0, label, h: float = 1e-4, max_width: int = DEFAULT_MAX_WIDTH):
    """Central differences of the exact expected loss, one parameter at a time."""
    if not h > 0:
        raise DomainError("finite-difference step must be positive")
    _check_widths(net, max_width)
    theta = net.flat_params()
    grad = np.empty_like(theta)
    for p in range(theta.size):
        tp = theta.copy()
        tp[p] += h
        tm = theta.copy()
        tm[p] -= h
        fp = enumerate_expected_loss(net.with_flat_params(tp), x0, label, max_width)
        fm = enumerate_expected_loss(net.with_flat_params(tm), x0, label, max_width)
        grad[p] = (fp - fm) / (2.0 * h)
    return from_flat(net, grad, "finite-diff")
