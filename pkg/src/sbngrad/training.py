"""Toy-problem training: data, initialization, SGD with Nesterov momentum, lr search."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractError, DivergenceError
from .estimators import EwaBaselineState
from .model import (
    LOGISTIC,
    STREAM_DATA,
    STREAM_METRICS,
    STREAM_TRAIN,
    STREAM_WHITEN,
    Conv2DLayer,
    FCLayer,
    Network,
    SoftmaxHead,
    expected_loss_mc,
    make_rng,
    predict_ensemble,
    sample_layer,
)
from .registry import batch_estimate, check_name

log = logging.getLogger(__name__)

DEFAULT_BAND_HEIGHT = 1.5


@dataclass
class Dataset:
    points: np.ndarray  # (N, 2)
    labels: np.ndarray  # (N,)
    bounds: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.labels)


def gen_toy_data(n_per_class: int, seed: int, band_height: float = DEFAULT_BAND_HEIGHT) -> Dataset:
    """Two overlapping classes on x in [-pi/2, pi/2].

    Class 0 lies above y = 0 (y in (0, band]); class 1 lies below y = cos(x)
    (y in [cos(x) - band, cos(x))).
    """
    if n_per_class < 0:
        raise ValueError("n_per_class must be >= 0")
    if not band_height > 0:
        raise ValueError("band_height must be positive")
    rng = make_rng(seed, STREAM_DATA)
    half = math.pi / 2
    x0 = rng.uniform(-half, half, n_per_class)
    y0 = band_height - rng.uniform(0.0, band_height, n_per_class)
    x1 = rng.uniform(-half, half, n_per_class)
    c = np.cos(x1)
    y1 = np.minimum(c - (band_height - rng.uniform(0.0, band_height, n_per_class)), np.nextafter(c, -np.inf))
    points = np.concatenate([np.stack([x0, y0], 1), np.stack([x1, y1], 1)]).reshape(-1, 2)
    labels = np.concatenate([np.zeros(n_per_class, np.int64), np.ones(n_per_class, np.int64)])
    bounds = {"x": (-half, half), "band_height": band_height}
    return Dataset(points, labels, bounds)


def save_dataset(data: Dataset, path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["x", "y", "label"])
        for (px, py), t in zip(data.points, data.labels):
            w.writerow([format(float(px), ".17g"), format(float(py), ".17g"), int(t)])
    return path


def load_dataset(path) -> Dataset:
    with Path(path).open(newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        if header != ["x", "y", "label"]:
            raise ValueError(f"{path}: unexpected header {header}")
        rows = list(r)
    pts = np.array([[float(a), float(b)] for a, b, _ in rows]).reshape(-1, 2)
    labels = np.array([int(c) for _, _, c in rows], dtype=np.int64)
    return Dataset(pts, labels)


# ---------------------------------------------------------------------------
# network construction


@dataclass
class NetworkSpec:
    """Topology only. ``layers`` holds ``("fc", n_out)`` or ``("conv", c_out, kernel, stride)``."""

    input_shape: tuple
    layers: list
    n_classes: int = 2

    @classmethod
    def parse(cls, text: str, n_in: int = 2, n_classes: int = 2) -> NetworkSpec:
        """Fully connected spec from a width string such as ``"5-5-5"``."""
        widths = [int(w) for w in text.split("-")]
        return cls((n_in,), [("fc", w) for w in widths], n_classes)


def init_network(spec: NetworkSpec, seed: int, whiten_batch=None) -> Network:
    """Uniform weights in [-1/sqrt(fan_in), 1/sqrt(fan_in)], zero biases.

    With ``whiten_batch`` every layer is rescaled, bottom-up, so that its
    preactivations over the batch have zero mean and unit std (std floored
    at 1e-3). Deeper layers see states sampled from the already whitened
    layers below, drawn from the stream ``(seed, STREAM_WHITEN)``.
    """
    rng = make_rng(seed)
    layers = []
    shape = tuple(spec.input_shape)
    for entry in spec.layers:
        if entry[0] == "fc":
            n_in, n_out = int(np.prod(shape)), int(entry[1])
            r = 1.0 / math.sqrt(n_in)
            layers.append(FCLayer(rng.uniform(-r, r, (n_out, n_in)), np.zeros(n_out)))
            shape = (n_out,)
        elif entry[0] == "conv":
            _, c_out, kernel, stride = entry
            kh, kw = (kernel, kernel) if np.isscalar(kernel) else kernel
            if len(shape) != 3:
                raise ContractError("a conv layer needs a (c, h, w) input")
            r = 1.0 / math.sqrt(shape[0] * kh * kw)
            layer = Conv2DLayer(rng.uniform(-r, r, (c_out, shape[0], kh, kw)), np.zeros(c_out), shape, stride)
            layers.append(layer)
            shape = layer.out_shape
        else:
            raise ContractError(f"unknown layer kind {entry[0]!r}")
    n_last = int(np.prod(shape))
    r = 1.0 / math.sqrt(n_last)
    head = SoftmaxHead(rng.uniform(-r, r, (spec.n_classes, n_last)), np.zeros(spec.n_classes))
    net = Network(tuple(layers), head, LOGISTIC)
    if whiten_batch is not None:
        net = whiten(net, whiten_batch, seed)
    return net


def whiten(net: Network, batch, seed: int) -> Network:
    X = batch.points if isinstance(batch, Dataset) else np.asarray(batch, dtype=np.float64)
    if len(X) == 0:
        raise ContractError("whitening needs a non-empty batch")
    rng = make_rng(seed, STREAM_WHITEN)
    x = X.reshape(len(X), -1)
    new_layers = []
    for layer in net.layers:
        a = layer.preactivation(x)
        if layer.kind == "conv":
            a4 = a.reshape((len(x),) + layer.out_shape)
            mu = a4.mean(axis=(0, 2, 3))
            sd = np.maximum(a4.std(axis=(0, 2, 3)), 1e-3)
            layer = layer.with_params(layer.W / sd[:, None, None, None], (layer.b - mu) / sd)
        else:
            mu = a.mean(axis=0)
            sd = np.maximum(a.std(axis=0), 1e-3)
            layer = layer.with_params(layer.W / sd[:, None], (layer.b - mu) / sd)
        new_layers.append(layer)
        x = sample_layer(layer.preactivation(x), net.noise, rng)
    return Network(tuple(new_layers), net.head, net.noise)


# ---------------------------------------------------------------------------
# optimisation


class NesterovSGD:
    """SGD with Nesterov momentum: ``buf = mu*buf + g``; ``theta -= lr*(g + mu*buf)``."""

    def __init__(self, lr: float, momentum: float = 0.9):
        self.lr = lr
        self.momentum = momentum
        self.buf = None

    def step(self, theta: np.ndarray, grad: np.ndarray) -> np.ndarray:
        if self.buf is None:
            self.buf = grad.copy()
        else:
            self.buf = self.momentum * self.buf + grad
        return theta - self.lr * (grad + self.momentum * self.buf)


@dataclass
class EpochRecord:
    epoch: int
    exp_loss_mc: float
    train_acc: float
    lr: float
    wallclock_ms: float


@dataclass
class TrainHistory:
    records: list[EpochRecord] = field(default_factory=list)
    objectives: list[float] = field(default_factory=list)  # per iteration

    HEADER = ("epoch", "exp_loss_mc", "train_acc", "lr", "wallclock_ms")

    def to_csv(self, path) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(self.HEADER)
            for r in self.records:
                w.writerow([r.epoch, format(r.exp_loss_mc, ".17g"), format(r.train_acc, ".17g"),
                            format(r.lr, ".17g"), format(r.wallclock_ms, ".6f")])
        return path

    def losses(self) -> np.ndarray:
        return np.array([r.exp_loss_mc for r in self.records])


def _block_name(net: Network, index: int) -> str:
    return "head" if index == net.depth else f"layer {index + 1}"


def evaluate(net: Network, data: Dataset, seed: int, epoch: int, S: int = 10):
    rng = make_rng(seed, STREAM_METRICS, epoch)
    loss = expected_loss_mc(net, data.points, data.labels, S, rng)
    probs = predict_ensemble(net, data.points, S, rng)
    acc = float(np.mean(np.argmax(probs, axis=1) == data.labels))
    return loss, acc


def train(
    net: Network,
    data: Dataset,
    estimator: str,
    lr: float,
    momentum: float = 0.9,
    epochs: int = 100,
    batch_size: int | None = None,
    seed: int = 0,
    metrics_samples: int = 10,
    log_metrics: bool = True,
):
    """Minibatch SGD + Nesterov on one-sample estimates; returns (network, history).

    ``batch_size=None`` means full batch. Iteration i of epoch e draws its
    samples from the stream ``(seed, STREAM_TRAIN, e, i)``.
    """
    check_name(estimator)
    if lr < 0 or not math.isfinite(lr):
        raise ValueError("lr must be a finite non-negative number")
    N = len(data)
    if N == 0:
        raise ContractError("training needs a non-empty dataset")
    bs = N if batch_size is None else min(int(batch_size), N)
    opt = NesterovSGD(lr, momentum)
    ewa = EwaBaselineState() if estimator == "reinforce-ewa" else None
    theta = net.flat_params()
    slices = net.block_slices()
    history = TrainHistory()
    start = time.perf_counter()
    for epoch in range(1, epochs + 1):
        order = np.arange(N) if bs == N else make_rng(seed, STREAM_TRAIN, epoch).permutation(N)
        for it, lo in enumerate(range(0, N, bs)):
            idx = order[lo : lo + bs]
            rng = make_rng(seed, STREAM_TRAIN, epoch, it + 1)
            g, obj = batch_estimate(estimator, net, data.points[idx], data.labels[idx], rng, point_ids=idx, ewa=ewa)
            theta = opt.step(theta, g.flat())
            for b, sl in enumerate(slices):
                if not np.all(np.isfinite(theta[sl])):
                    raise DivergenceError(epoch, _block_name(net, b))
            net = net.with_flat_params(theta)
            history.objectives.append(obj)
        if log_metrics:
            loss, acc = evaluate(net, data, seed, epoch, metrics_samples)
        else:
            loss, acc = float("nan"), float("nan")
        history.records.append(EpochRecord(epoch, loss, acc, lr, 1000.0 * (time.perf_counter() - start)))
    return net, history


def ewa_smooth(values, momentum: float = 0.9) -> np.ndarray:
    """Exponentially weighted average, started at the first value."""
    out = np.empty(len(values))
    acc = None
    for i, v in enumerate(values):
        acc = v if acc is None else momentum * acc + (1.0 - momentum) * v
        out[i] = acc
    return out


def default_lr_grid() -> list[float]:
    return [float(v) for v in np.logspace(-6, 0, 10)]


@dataclass
class LrSearchResult:
    best_lr: float
    scores: dict
    all_diverged: bool = False


def lr_grid_search(
    net: Network,
    data: Dataset,
    estimator: str,
    grid=None,
    probe_epochs: int = 5,
    seed: int = 0,
    batch_size: int | None = None,
    momentum: float = 0.9,
) -> LrSearchResult:
    """Pick the lr whose short probe run has the lowest smoothed objective.

    Every probe starts from ``net`` with the same seed. The score is the
    final EWA (momentum 0.9) of the per-iteration objective; diverged or
    non-finite runs score +inf. Ties go to the smaller lr.
    """
    grid = default_lr_grid() if grid is None else list(grid)
    if not grid:
        raise ValueError("empty learning-rate grid")
    scores = {}
    for lr in sorted(grid):
        try:
            _, hist = train(net, data, estimator, lr, momentum, probe_epochs, batch_size, seed, log_metrics=False)
            score = float(ewa_smooth(hist.objectives)[-1]) if hist.objectives else math.inf
            if not math.isfinite(score):
                score = math.inf
        except DivergenceError:
            score = math.inf
        scores[lr] = score
    best = min(sorted(grid), key=lambda lr: scores[lr])
    all_diverged = all(math.isinf(s) for s in scores.values())
    if all_diverged:
        best = min(grid)
        log.warning("every probe run diverged; falling back to lr=%g", best)
    return LrSearchResult(float(best), scores, all_diverged)
