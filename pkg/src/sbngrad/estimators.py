"""Gradient estimators for stochastic binary networks.

Every estimator here runs an explicit backward pass over a sampled trace
(or, for the tanh relaxation, over the deterministic relaxed network) and
returns per-trace gradients; ``per_sample=False`` averages them.

PSA backward pass, right to left::

    v = df                                   # loss differences under single flips
    for k = L..1:
        grad_a^k = p_Z(a^k) * x^k * v        # D^k contracted with v
        v = Delta^k v                        # discrete Jacobian (k >= 2)

The suffix ``Delta^k ... Delta^L df`` is shared by all layers below k.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError
from .gradient import GradientEstimate
from .model import LOGISTIC, Network, SampleTrace, _as_batch, check_trace


def _finish(blocks, name, per_sample) -> GradientEstimate:
    n = blocks[0][0].shape[0]
    est = GradientEstimate([tuple(blk) for blk in blocks], name, n, per_sample=True)
    return est if per_sample else est.mean()


# ---------------------------------------------------------------------------
# discrete Jacobians


@dataclass
class DiscreteJacobian:
    """Batch of matrices ``Delta[b, i, j] = x_j (F(a_j) - F(a_j with input i flipped))``."""

    k: int
    matrix: np.ndarray

    def apply(self, v):
        return np.einsum("bij,bj->bi", self.matrix, v)


def delta_fc(layer, trace: SampleTrace, k: int, noise=None) -> DiscreteJacobian:
    if k < 2:
        raise ContractError("discrete Jacobians are defined only for layers with binary inputs (k >= 2)")
    if layer.kind != "fc":
        raise ContractError("delta_fc requires a fully connected layer")
    noise = noise or LOGISTIC
    x_prev, a, x = trace.states[k - 1], trace.preacts[k], trace.states[k]
    a_flip = a[:, None, :] - 2.0 * x_prev[:, :, None] * layer.W.T[None, :, :]
    D = x[:, None, :] * (noise.cdf(a)[:, None, :] - noise.cdf(a_flip))
    return DiscreteJacobian(k, D)


def delta_conv_apply(layer, trace: SampleTrace, k: int, g_out, noise=None):
    """``g_in[c, i] = sum_{o, j} Delta[o, c, j, i] g_out[o, j]`` over the kernel support."""
    if k < 2:
        raise ContractError("discrete Jacobians are defined only for layers with binary inputs (k >= 2)")
    noise = noise or LOGISTIC
    oshape, ishape = layer.out_shape, layer.in_shape
    g = np.asarray(g_out, dtype=np.float64)
    if g.shape[-1] != layer.out_size:
        raise ContractError(f"g_out has {g.shape[-1]} entries, layer output has {layer.out_size}")
    g = g.reshape((-1,) + oshape)
    B = g.shape[0]
    a = trace.preacts[k].reshape((B,) + oshape)
    xk = trace.states[k].reshape((B,) + oshape)
    xin = trace.states[k - 1].reshape((B,) + ishape)
    gt = g * xk
    Fa = noise.cdf(a)
    out = np.zeros((B,) + ishape)
    kh, kw = layer.W.shape[2:]
    for u in range(kh):
        for v in range(kw):
            sy, sx = layer.input_slice(u, v)
            xi = xin[:, :, sy, sx]  # (B, c, Ho, Wo)
            w = layer.W[:, :, u, v]  # (o, c)
            a_flip = a[:, :, None] - 2.0 * w[None, :, :, None, None] * xi[:, None]
            term = gt[:, :, None] * (Fa[:, :, None] - noise.cdf(a_flip))
            out[:, :, sy, sx] += term.sum(axis=1)
    return out.reshape(B, -1)


def ratio_conv_apply(layer, trace: SampleTrace, k: int, g_out, noise=None):
    """Same result as :func:`delta_conv_apply`, specialised to logistic noise.

    With ``A = exp(a)`` and ``W± = exp(±2w)`` each summand is
    ``g~ / (1 + A W∓) - g~ / (1 + A)``, where the sign picks ``exp(-2 w x_in)``.
    Exponentials are taken only over outputs and the kernel.
    """
    noise = noise or LOGISTIC
    if noise.kind != "logistic":
        raise ContractError("the ratio convolution is defined for logistic noise only")
    if k < 2:
        raise ContractError("discrete Jacobians are defined only for layers with binary inputs (k >= 2)")
    oshape, ishape = layer.out_shape, layer.in_shape
    g = np.asarray(g_out, dtype=np.float64)
    if g.shape[-1] != layer.out_size:
        raise ContractError(f"g_out has {g.shape[-1]} entries, layer output has {layer.out_size}")
    g = g.reshape((-1,) + oshape)
    B = g.shape[0]
    a = trace.preacts[k].reshape((B,) + oshape)
    xk = trace.states[k].reshape((B,) + oshape)
    xin = trace.states[k - 1].reshape((B,) + ishape)
    gt = g * xk
    with np.errstate(over="ignore"):
        A = np.exp(a)
        w_plus = np.exp(2.0 * layer.W)
        w_minus = np.exp(-2.0 * layer.W)
        base = gt / (1.0 + A)
    base_sum = base.sum(axis=1)  # (B, Ho, Wo), shared by every input channel
    out = np.zeros((B,) + ishape)
    kh, kw = layer.W.shape[2:]
    for u in range(kh):
        for v in range(kw):
            sy, sx = layer.input_slice(u, v)
            xi = xin[:, :, sy, sx]
            ksel = np.where(
                xi[:, None] > 0,
                w_minus[None, :, :, u, v, None, None],
                w_plus[None, :, :, u, v, None, None],
            )
            with np.errstate(over="ignore", invalid="ignore"):
                ratio = gt[:, :, None] / (1.0 + A[:, :, None] * ksel)
            out[:, :, sy, sx] += ratio.sum(axis=1) - base_sum[:, None]
    return out.reshape(B, -1)


def _delta_transpose(layer, trace, k, v, noise, conv_mode):
    if layer.kind == "fc":
        return delta_fc(layer, trace, k, noise).apply(v)
    if conv_mode == "ratio":
        return ratio_conv_apply(layer, trace, k, v, noise)
    return delta_conv_apply(layer, trace, k, v, noise)


# ---------------------------------------------------------------------------
# PSA


def _head_blocks(net, xL, label, enhanced, gamma, noise, aL):
    head = net.head
    plain = head.param_grads(xL, label, per_sample=True)
    if not enhanced or not plain:
        return plain
    B, n = xL.shape
    if gamma is None:
        gamma = 1.0 / n
    # g(x) + gamma * sum_i (g(x flipped at i) - g(x)) * P(unit i takes the other state)
    flips = np.repeat(xL[:, None, :], n, axis=1)
    idx = np.arange(n)
    flips[:, idx, idx] *= -1.0
    labels = np.repeat(np.broadcast_to(np.asarray(label), (B,)), n)
    flipped = head.param_grads(flips.reshape(B * n, n), labels, per_sample=True)
    p_other = noise.cdf(-xL * aL)  # (B, n)
    out = []
    for g0, gf in zip(plain, flipped):
        gf = gf.reshape((B, n) + g0.shape[1:])
        diff = gf - g0[:, None]
        w = p_other.reshape((B, n) + (1,) * (g0.ndim - 1))
        out.append(g0 + gamma * (w * diff).sum(axis=1))
    return tuple(out)


def psa_gradient(
    net: Network,
    trace: SampleTrace,
    label,
    enhanced_last_layer: bool = False,
    gamma: float | None = None,
    conv_mode: str = "naive",
    per_sample: bool = False,
) -> GradientEstimate:
    """Path sample-analytic estimate for every trace in ``trace``.

    ``enhanced_last_layer`` replaces the head gradient by its derandomised
    version with weight ``gamma`` (default 1/n_L).
    """
    check_trace(net, trace)
    noise = net.noise
    L = net.depth
    xs, As = trace.states, trace.preacts
    v = net.head.loss_flips(xs[L], label)
    blocks = [None] * (L + 1)
    for k in range(L, 0, -1):
        layer = net.layers[k - 1]
        grad_a = noise.pdf(As[k]) * xs[k] * v
        blocks[k - 1] = layer.param_grads(xs[k - 1], grad_a, per_sample=True)
        if k > 1:
            v = _delta_transpose(layer, trace, k, v, noise, conv_mode)
    blocks[L] = _head_blocks(net, xs[L], label, enhanced_last_layer, gamma, noise, As[L])
    name = "psa-enh" if enhanced_last_layer else "psa"
    return _finish(blocks, name, per_sample)


# ---------------------------------------------------------------------------
# straight-through family


def _straight_through(net, trace, label, act_grad, name, per_sample):
    check_trace(net, trace)
    L = net.depth
    xs, As = trace.states, trace.preacts
    g = net.head.grad_x(xs[L], label)
    blocks = [None] * (L + 1)
    blocks[L] = net.head.param_grads(xs[L], label, per_sample=True)
    for k in range(L, 0, -1):
        layer = net.layers[k - 1]
        grad_a = g * act_grad(As[k])
        blocks[k - 1] = layer.param_grads(xs[k - 1], grad_a, per_sample=True)
        if k > 1:
            g = layer.backward_input(grad_a)
    return _finish(blocks, name, per_sample)


def st_gradient(net: Network, trace: SampleTrace, label, per_sample: bool = False) -> GradientEstimate:
    """Sampled forward values; backward uses d/da of 2 F_Z(a)."""
    return _straight_through(net, trace, label, lambda a: 2.0 * net.noise.pdf(a), "st", per_sample)


def hardst_gradient(net: Network, trace: SampleTrace, label, per_sample: bool = False) -> GradientEstimate:
    """Sampled forward values; backward uses the derivative of clamp(a, -1, 1)."""
    return _straight_through(
        net, trace, label, lambda a: (np.abs(a) <= 1.0).astype(np.float64), "hardst", per_sample
    )


def relaxed_forward(net: Network, x0):
    """Deterministic network with every sign(a - Z) replaced by tanh(a / 2)."""
    h = _as_batch(x0, net.input_size, "network input")
    hs, As = [h], [None]
    for layer in net.layers:
        a = layer.preactivation(h)
        h = np.tanh(0.5 * a)
        As.append(a)
        hs.append(h)
    return hs, As


def relaxed_loss(net: Network, x0, label):
    hs, _ = relaxed_forward(net, x0)
    out = net.head.loss(hs[-1], label)
    return float(out[0]) if np.ndim(x0) == 1 else out


def tanh_relaxation_gradient(net: Network, x0, label, per_sample: bool = False) -> GradientEstimate:
    hs, As = relaxed_forward(net, x0)
    L = net.depth
    g = net.head.grad_x(hs[L], label)
    blocks = [None] * (L + 1)
    blocks[L] = net.head.param_grads(hs[L], label, per_sample=True)
    for k in range(L, 0, -1):
        layer = net.layers[k - 1]
        grad_a = g * 0.5 * (1.0 - hs[k] ** 2)
        blocks[k - 1] = layer.param_grads(hs[k - 1], grad_a, per_sample=True)
        if k > 1:
            g = layer.backward_input(grad_a)
    return _finish(blocks, "tanh", per_sample)


# ---------------------------------------------------------------------------
# REINFORCE


def reinforce_gradient(net: Network, trace: SampleTrace, label, baseline=None, per_sample: bool = False):
    """Score-function estimate with an optional per-trace baseline.

    Layer blocks get ``(f(x^L) - b) * d log p(x^k | x^{k-1}) / d theta^k``;
    the head block is the pathwise gradient at the sampled state.
    """
    check_trace(net, trace)
    L = net.depth
    xs, As = trace.states, trace.preacts
    f = net.head.loss(xs[L], label)
    centred = f - (0.0 if baseline is None else np.asarray(baseline, dtype=np.float64))
    blocks = [None] * (L + 1)
    for k in range(1, L + 1):
        grad_a = centred[:, None] * net.noise.score(As[k], xs[k])
        blocks[k - 1] = net.layers[k - 1].param_grads(xs[k - 1], grad_a, per_sample=True)
    blocks[L] = net.head.param_grads(xs[L], label, per_sample=True)
    return _finish(blocks, "reinforce" if baseline is None else "reinforce-b", per_sample)


@dataclass
class EwaBaselineState:
    """Per-data-point exponentially weighted average of observed losses."""

    momentum: float = 0.9
    values: dict = field(default_factory=dict)

    def get(self, point_id, default=None):
        return self.values.get(point_id, default)

    def update(self, point_id, loss) -> EwaBaselineState:
        loss = float(loss)
        if point_id in self.values:
            self.values[point_id] = self.momentum * self.values[point_id] + (1.0 - self.momentum) * loss
        else:
            self.values[point_id] = loss
        return self

    def lookup(self, point_ids) -> np.ndarray:
        """Current baselines; points never observed get 0 (no centring)."""
        return np.array([self.values.get(int(p), 0.0) for p in point_ids])

    def update_many(self, point_ids, losses) -> EwaBaselineState:
        for p, l in zip(point_ids, losses):
            self.update(int(p), l)
        return self


def ewa_update(state: EwaBaselineState, point_id, loss) -> EwaBaselineState:
    return state.update(point_id, loss)
