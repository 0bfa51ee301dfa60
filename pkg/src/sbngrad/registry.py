"""Name-based dispatch over estimators, shared by the harness, training and CLI."""

from __future__ import annotations

import numpy as np

from . import estimators as est
from .gradient import from_flat
from .model import Network, _as_batch, forward_sample
from .oracle import DEFAULT_MAX_WIDTH, enumerate_expected_loss, enumerate_gradient

ESTIMATOR_NAMES = ("exact", "psa", "psa-enh", "st", "hardst", "tanh", "reinforce", "reinforce-ewa")
DETERMINISTIC = frozenset({"exact", "tanh"})


def check_name(name: str) -> str:
    if name not in ESTIMATOR_NAMES:
        raise ValueError(f"unknown estimator {name!r}; choose from {', '.join(ESTIMATOR_NAMES)}")
    return name


def batch_estimate(
    name: str,
    net: Network,
    X,
    y,
    rng: np.random.Generator,
    point_ids=None,
    ewa: est.EwaBaselineState | None = None,
    max_width: int = DEFAULT_MAX_WIDTH,
):
    """Batch-mean gradient from one sample per point, plus the estimator's objective.

    The objective is what the estimator optimises: the sampled loss for
    sampling estimators, the relaxed loss for ``tanh`` and the exact expected
    loss for ``exact``.
    """
    check_name(name)
    X = _as_batch(X, net.input_size, "batch")
    y = np.broadcast_to(np.asarray(y), (X.shape[0],))
    if name == "exact":
        total = np.zeros(net.n_params)
        losses = []
        for x, t in zip(X, y):
            total += enumerate_gradient(net, x, t, max_width).flat()
            losses.append(enumerate_expected_loss(net, x, t, max_width))
        return from_flat(net, total / len(X), "exact", len(X)), float(np.mean(losses))
    if name == "tanh":
        return est.tanh_relaxation_gradient(net, X, y), float(np.mean(est.relaxed_loss(net, X, y)))

    trace = forward_sample(net, X, rng)
    f = net.head.loss(trace.states[-1], y)
    if name == "psa":
        g = est.psa_gradient(net, trace, y)
    elif name == "psa-enh":
        g = est.psa_gradient(net, trace, y, enhanced_last_layer=True)
    elif name == "st":
        g = est.st_gradient(net, trace, y)
    elif name == "hardst":
        g = est.hardst_gradient(net, trace, y)
    elif name == "reinforce":
        g = est.reinforce_gradient(net, trace, y)
    else:
        if ewa is None:
            raise ValueError("reinforce-ewa needs a baseline state")
        ids = np.arange(len(X)) if point_ids is None else np.asarray(point_ids)
        g = est.reinforce_gradient(net, trace, y, baseline=ewa.lookup(ids))
        ewa.update_many(ids, f)
    g.estimator = name
    return g, float(np.mean(f))
