"""Shared test fixtures: small random networks and a test-only linear head."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from sbngrad.model import LOGISTIC, Conv2DLayer, FCLayer, Network, SoftmaxHead


@dataclass(frozen=True, eq=False)
class LinearHead:
    """Loss ``c . x + d`` with fixed coefficients (no trainable parameters)."""

    c: np.ndarray
    d: float = 0.0

    kind = "linear"

    @property
    def n_in(self) -> int:
        return len(self.c)

    @property
    def params(self):
        return ()

    def with_params(self, *args):
        return self

    def loss(self, x, y=None):
        return x @ self.c + self.d

    def loss_flips(self, x, y=None):
        return 2.0 * x * self.c

    def grad_x(self, x, y=None):
        return np.broadcast_to(self.c, x.shape).copy()

    def param_grads(self, x, y=None, weights=None, per_sample=False):
        return ()


def random_fc_net(widths, n_in=2, n_classes=2, seed=0, scale=1.0, head=None) -> Network:
    rng = np.random.default_rng(seed)
    layers, prev = [], n_in
    for n in widths:
        layers.append(FCLayer(scale * rng.normal(size=(n, prev)), 0.5 * scale * rng.normal(size=n)))
        prev = n
    if head is None:
        head = SoftmaxHead(rng.normal(size=(n_classes, prev)), 0.5 * rng.normal(size=n_classes))
    return Network(tuple(layers), head, LOGISTIC)


def random_conv_layer(in_shape=(2, 4, 4), c_out=2, kernel=3, stride=1, seed=0, scale=1.0) -> Conv2DLayer:
    rng = np.random.default_rng(seed)
    W = scale * rng.normal(size=(c_out, in_shape[0], kernel, kernel))
    return Conv2DLayer(W, 0.3 * rng.normal(size=c_out), in_shape, stride)


def random_input(n, seed=0):
    return np.random.default_rng(seed + 1000).normal(size=n)


def enumerate_outcomes(net: Network, x0):
    """All joint layer outcomes of a tiny net with their probabilities."""
    from itertools import product

    from sbngrad.model import make_trace
    from sbngrad.oracle import state_matrix

    spaces = [state_matrix(n) for n in net.widths]
    for combo in product(*[range(len(s)) for s in spaces]):
        states = [s[i] for s, i in zip(spaces, combo)]
        trace = make_trace(net, x0, states)
        logp = 0.0
        for k in range(1, net.depth + 1):
            logp += float(np.sum(net.noise.log_cdf(trace.preacts[k] * trace.states[k])))
        yield trace, np.exp(logp)


def brute_force_mean(net: Network, x0, label, estimator, **kw):
    """Exact expectation of a per-trace estimator over all outcomes."""
    total = None
    for trace, p in enumerate_outcomes(net, x0):
        g = estimator(net, trace, label, **kw).flat()
        total = p * g if total is None else total + p * g
    return total
