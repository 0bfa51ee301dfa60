from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError


@dataclass
class GradientEstimate:
    """Gradient buffers aligned with ``Network.param_blocks()``.

    ``blocks[k-1]`` holds the gradients of layer k (k = 1..L) and
    ``blocks[L]`` those of the head. When ``per_sample`` is set every array
    has an extra leading axis indexing traces.
    """

    blocks: list[tuple[np.ndarray, ...]]
    estimator: str
    n_traces: int = 1
    per_sample: bool = False

    def flat(self) -> np.ndarray:
        if self.per_sample:
            return np.concatenate(
                [g.reshape(g.shape[0], -1) for blk in self.blocks for g in blk], axis=1
            )
        return np.concatenate([g.ravel() for blk in self.blocks for g in blk])

    def block(self, k: int) -> np.ndarray:
        """Flattened gradient of block k (1-based; k = L+1 is the head)."""
        blk = self.blocks[k - 1]
        if not blk:
            return np.zeros((self.n_traces, 0) if self.per_sample else 0)
        if self.per_sample:
            return np.concatenate([g.reshape(g.shape[0], -1) for g in blk], axis=1)
        return np.concatenate([g.ravel() for g in blk])

    def mean(self) -> GradientEstimate:
        if not self.per_sample:
            return self
        return GradientEstimate(
            [tuple(g.mean(axis=0) for g in blk) for blk in self.blocks],
            self.estimator,
            self.n_traces,
        )

    def check(self, net) -> None:
        ref = net.param_blocks()
        if len(ref) != len(self.blocks):
            raise ShapeError("gradient block count differs from the network")
        for k, (r, g) in enumerate(zip(ref, self.blocks), start=1):
            for p, q in zip(r, g):
                shape = q.shape[1:] if self.per_sample else q.shape
                if shape != p.shape:
                    raise ShapeError(f"block {k}: gradient shape {shape} vs parameter {p.shape}")
                if not np.all(np.isfinite(q)):
                    raise ValueError(f"block {k}: non-finite gradient entries")


def from_flat(net, vec, estimator: str, n_traces: int = 1) -> GradientEstimate:
    g = net.with_flat_params(vec)
    return GradientEstimate([tuple(b) for b in g.param_blocks()], estimator, n_traces)
