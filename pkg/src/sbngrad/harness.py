"""Gradient-accuracy measurement: sample banks, RMSE(M) curves, cosine statistics.

A bank holds T independent one-sample estimates of the batch gradient at a
frozen parameter point. M-sample estimators are emulated by splitting the
bank into floor(T/M) consecutive disjoint groups and averaging within each
group; the trailing remainder is discarded.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .estimators import EwaBaselineState
from .model import STREAM_SAMPLES, Network, make_rng
from .registry import DETERMINISTIC, batch_estimate, check_name

CSV_COLUMNS = ("estimator", "layer", "M", "rmse_rel", "cos_mean", "cos_p15", "cos_p85", "reliable_flag")


@dataclass
class SampleBank:
    estimator: str
    samples: np.ndarray  # (T, n_params)
    block_slices: list[slice]
    point_id: str = "point"
    seed: int = 0

    @property
    def T(self) -> int:
        return self.samples.shape[0]

    @property
    def n_blocks(self) -> int:
        return len(self.block_slices)

    def block(self, k: int) -> np.ndarray:
        return self.samples[:, self.block_slices[k - 1]]


def collect_samples(net: Network, estimator: str, X, y, T: int, seed: int, point_id: str = "point") -> SampleBank:
    """T one-sample batch-gradient estimates; sample t uses the stream (seed, t).

    Deterministic estimators are evaluated once and repeated. The EWA
    baseline of ``reinforce-ewa`` is carried across samples in index order.
    """
    check_name(estimator)
    if T < 1:
        raise ValueError("T must be >= 1")
    slices = net.block_slices()
    if estimator in DETERMINISTIC:
        g, _ = batch_estimate(estimator, net, X, y, make_rng(seed, STREAM_SAMPLES, 0))
        samples = np.tile(g.flat(), (T, 1))
        return SampleBank(estimator, samples, slices, point_id, seed)
    ewa = EwaBaselineState() if estimator == "reinforce-ewa" else None
    samples = np.empty((T, net.n_params))
    for t in range(T):
        g, _ = batch_estimate(estimator, net, X, y, make_rng(seed, STREAM_SAMPLES, t), ewa=ewa)
        samples[t] = g.flat()
    return SampleBank(estimator, samples, slices, point_id, seed)


def group_means(samples: np.ndarray, M: int) -> np.ndarray:
    G = samples.shape[0] // M
    if G < 1:
        raise ValueError(f"M = {M} exceeds the bank size {samples.shape[0]}")
    groups = samples[: G * M].reshape(G, M, -1)
    # shifted mean: exact when all members of a group coincide
    first = groups[:, 0]
    return first + (groups - first[:, None]).mean(axis=1)


@dataclass
class RmseCurve:
    Ms: list[int]
    values: dict[int, np.ndarray]  # block index -> rmse_rel per M
    reliable: list[bool]


def rmse_curve(bank: SampleBank, g_true, Ms) -> RmseCurve:
    """Relative RMSE of the M-sample mean, per block, for each M in ``Ms``.

    M > T/2 leaves fewer than two groups; such points are still computed but
    flagged unreliable.
    """
    Ms = [int(m) for m in Ms]
    if Ms != sorted(Ms) or any(m < 1 for m in Ms):
        raise ValueError("Ms must be sorted positive integers")
    g_true = np.asarray(g_true, dtype=np.float64)
    values = {k: np.empty(len(Ms)) for k in range(1, bank.n_blocks + 1)}
    for col, M in enumerate(Ms):
        means = group_means(bank.samples, M)
        for k, sl in enumerate(bank.block_slices, start=1):
            ref = g_true[sl]
            err = means[:, sl] - ref
            norm = np.linalg.norm(ref)
            values[k][col] = math.sqrt(np.mean(np.sum(err**2, axis=1))) / norm if norm > 0 else np.nan
    reliable = [M <= bank.T // 2 for M in Ms]
    return RmseCurve(Ms, values, reliable)


@dataclass
class CosineStats:
    mean: float
    p15: float
    p85: float
    zero_norm: int
    n_groups: int
    values: np.ndarray = field(repr=False)


def _cosines(means: np.ndarray, ref: np.ndarray):
    nref = np.linalg.norm(ref)
    norms = np.linalg.norm(means, axis=1)
    zero = (norms == 0) | (nref == 0)
    cos = np.zeros(len(means))
    ok = ~zero
    cos[ok] = (means[ok] @ ref) / (norms[ok] * nref)
    return np.clip(cos, -1.0, 1.0), int(zero.sum())


def _cosine_stats(bank, g_true, M):
    means = group_means(bank.samples, M)
    g_true = np.asarray(g_true, dtype=np.float64)
    out = {}
    for k, sl in enumerate(bank.block_slices, start=1):
        cos, zero = _cosines(means[:, sl], g_true[sl])
        p15, p85 = np.percentile(cos, [15, 85])
        out[k] = CosineStats(float(cos.mean()), float(p15), float(p85), zero, len(cos), cos)
    return out


def cosine_stats(bank: SampleBank, g_true, M: int) -> dict[int, CosineStats]:
    """Cosine of each M-sample group mean to the true gradient, per block.

    Zero-norm group means count as cosine 0. Percentiles use linear
    interpolation; [p15, p85] holds 70% of the groups.
    """
    if bank.T // M < 10:
        raise ValueError(f"cosine statistics need T/M >= 10 (T={bank.T}, M={M})")
    return _cosine_stats(bank, g_true, M)


def default_grid(T: int) -> list[int]:
    out, m = [], 1
    while m <= max(T // 2, 1):
        out.append(m)
        m *= 2
    return out


@dataclass
class EstimatorReport:
    estimator: str
    rows: list[tuple]  # one per (layer, M), in CSV column order
    seed: int = 0
    point_id: str = "point"


def build_report(bank: SampleBank, g_true, Ms=None) -> EstimatorReport:
    Ms = default_grid(bank.T) if Ms is None else list(Ms)
    curve = rmse_curve(bank, g_true, Ms)
    stats = [_cosine_stats(bank, g_true, M) for M in Ms]
    rows = []
    for k in range(1, bank.n_blocks + 1):
        for col, M in enumerate(Ms):
            cs = stats[col][k]
            rows.append((bank.estimator, k, M, float(curve.values[k][col]), cs.mean, cs.p15, cs.p85, int(curve.reliable[col])))
    return EstimatorReport(bank.estimator, rows, bank.seed, bank.point_id)


def _fmt(v) -> str:
    return format(v, ".17g") if isinstance(v, float) else str(v)


def report_csv(report: EstimatorReport, path) -> Path:
    path = Path(path)
    try:
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(CSV_COLUMNS)
            for row in report.rows:
                w.writerow([_fmt(v) for v in row])
    except OSError as exc:
        raise OSError(f"cannot write report to {path}: {exc}") from exc
    return path


def read_report_csv(path) -> EstimatorReport:
    path = Path(path)
    with path.open(newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        if tuple(header) != CSV_COLUMNS:
            raise ValueError(f"{path}: unexpected header {header}")
        rows = [
            (e, int(k), int(m), float(a), float(b), float(c), float(d), int(f))
            for e, k, m, a, b, c, d, f in r
        ]
    name = rows[0][0] if rows else ""
    return EstimatorReport(name, rows)


def loglog_slope(Ms, values) -> float:
    """Least-squares slope of log(values) against log(Ms)."""
    return float(np.polyfit(np.log(np.asarray(Ms, float)), np.log(np.asarray(values, float)), 1)[0])
