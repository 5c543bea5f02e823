"""Iterative per-block model fitting by gradient descent.

fit_block optimizes one block; fit_blocks runs the same update rule on a
whole batch of blocks at once (each block is an independent problem, the
batch form just amortizes numpy overhead).  The returned parameters are the
best iterate seen, not the last, so step-size oscillation near convergence
cannot degrade the result.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .model import (
    DEFAULT_BANDWIDTH,
    DEFAULT_KERNEL_COUNT,
    BlockModel,
    PixelBlock,
    canonical_grid,
    _loss_and_gradients,
    _reconstruct,
)

UNIFORM_GRID = "uniform-grid"
RANDOM = "random"

_CHUNK = 128  # blocks optimized per numpy slab; keeps intermediates in cache


@dataclass(frozen=True)
class GdConfig:
    """Optimizer settings for per-block fitting."""

    iterations: int = 5000
    learning_rate: float = 0.01
    optimizer_kind: str = "adam"  # "adam" or "gd"
    init_strategy: str = UNIFORM_GRID
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if not self.learning_rate > 0.0:
            raise ValueError("learning_rate must be positive")
        if self.optimizer_kind not in ("adam", "gd"):
            raise ValueError(f"unknown optimizer_kind {self.optimizer_kind!r}")
        if self.init_strategy not in (UNIFORM_GRID, RANDOM):
            raise ValueError(f"unknown init_strategy {self.init_strategy!r}")


def lattice_centers(kernel_count: int) -> np.ndarray:
    """Centered sqrt(K) x sqrt(K) lattice in [0,1]^2, row-major."""
    g = math.isqrt(kernel_count)
    if g * g != kernel_count:
        raise ValueError(f"uniform-grid init needs a square kernel count, got {kernel_count}")
    ticks = (np.arange(g) + 0.5) / g
    return np.stack(np.meshgrid(ticks, ticks, indexing="ij"), axis=-1).reshape(-1, 2)


def partition_experts(pixels: np.ndarray, centers: np.ndarray) -> np.ndarray:
    """Mean luminance of each center's nearest-pixel partition.

    Empty partitions (possible with random centers) fall back to the block mean.
    """
    b = pixels.shape[-1]
    flat = pixels.reshape(-1)
    grid = canonical_grid(b).positions
    d2 = ((grid[:, None, :] - centers[None, :, :] * (b - 1)) ** 2).sum(axis=2)
    labels = d2.argmin(axis=1)
    k = centers.shape[0]
    counts = np.bincount(labels, minlength=k).astype(np.float64)
    sums = np.bincount(labels, weights=flat, minlength=k)
    experts = np.where(counts > 0, sums / np.maximum(counts, 1.0), flat.mean())
    return experts


def init_model(
    block: PixelBlock,
    kernel_count: int = DEFAULT_KERNEL_COUNT,
    bandwidth: float = DEFAULT_BANDWIDTH,
    strategy: str = UNIFORM_GRID,
    seed: int = 0,
) -> BlockModel:
    """Initial model for one block: lattice or seeded-random centers, partition-mean experts."""
    if kernel_count < 1:
        raise ValueError("kernel_count must be >= 1")
    if strategy == UNIFORM_GRID:
        centers = lattice_centers(kernel_count)
    elif strategy == RANDOM:
        rng = np.random.default_rng(seed)
        centers = rng.uniform(0.0, 1.0, size=(kernel_count, 2))
    else:
        raise ValueError(f"unknown init strategy {strategy!r}")
    experts = partition_experts(block.pixels, centers)
    return BlockModel(centers=centers, experts=np.clip(experts, 0.0, 1.0), bandwidth=bandwidth)


def fit_block(
    block: PixelBlock,
    config: GdConfig,
    kernel_count: int = DEFAULT_KERNEL_COUNT,
    bandwidth: float = DEFAULT_BANDWIDTH,
) -> tuple[BlockModel, np.ndarray]:
    """Fit one block; returns (best model, per-iteration loss trace).

    trace[0] is the loss of the initial model, trace[t] the loss after update
    t; the trace therefore has iterations+1 entries and is recorded whether or
    not the run diverges.
    """
    centers, experts, losses, traces = fit_blocks(
        block.pixels[None], config, kernel_count, bandwidth, record_traces=True
    )
    model = BlockModel(centers=centers[0], experts=experts[0], bandwidth=bandwidth)
    return model, traces[0]


def fit_blocks(
    blocks: np.ndarray,
    config: GdConfig,
    kernel_count: int = DEFAULT_KERNEL_COUNT,
    bandwidth: float = DEFAULT_BANDWIDTH,
    record_traces: bool = False,
    seed_offset: int = 0,
):
    """Fit a stack of blocks (n,B,B) independently with one shared config.

    Returns (centers (n,K,2), experts (n,K), best_losses (n,), traces), where
    traces is an (n, iterations+1) array or None.  Random initialization draws
    the centers of batch entry i from seed config.seed + seed_offset + i.
    """
    blocks = np.asarray(blocks, dtype=np.float64)
    if blocks.ndim != 3 or blocks.shape[1] != blocks.shape[2]:
        raise ValueError(f"blocks must be (n, B, B), got {blocks.shape}")
    n, b = blocks.shape[0], blocks.shape[1]

    if config.init_strategy == UNIFORM_GRID:
        base = lattice_centers(kernel_count)
        centers0 = np.broadcast_to(base, (n, kernel_count, 2)).copy()
    else:
        centers0 = np.empty((n, kernel_count, 2))
        for i in range(n):
            rng = np.random.default_rng(config.seed + seed_offset + i)
            centers0[i] = rng.uniform(0.0, 1.0, size=(kernel_count, 2))
    experts0 = np.empty((n, kernel_count))
    for i in range(n):
        experts0[i] = np.clip(partition_experts(blocks[i], centers0[i]), 0.0, 1.0)

    grid = canonical_grid(b).positions
    targets = blocks.reshape(n, -1)

    centers = np.empty_like(centers0)
    experts = np.empty_like(experts0)
    best_losses = np.empty(n)
    traces = np.empty((n, config.iterations + 1)) if record_traces else None

    for start in range(0, n, _CHUNK):
        sl = slice(start, min(start + _CHUNK, n))
        out = _fit_chunk(
            targets[sl], centers0[sl], experts0[sl], grid, b, bandwidth, config,
            record_traces,
        )
        centers[sl], experts[sl], best_losses[sl] = out[0], out[1], out[2]
        if record_traces:
            traces[sl] = out[3]

    return centers, experts, best_losses, traces


def _fit_chunk(targets, centers, experts, grid, block_size, bandwidth, config, record_traces):
    n = targets.shape[0]
    centers = centers.copy()
    experts = experts.copy()
    lr = config.learning_rate
    adam = config.optimizer_kind == "adam"
    if adam:
        b1, b2, eps = 0.9, 0.999, 1e-8
        m_c = np.zeros_like(centers)
        v_c = np.zeros_like(centers)
        m_e = np.zeros_like(experts)
        v_e = np.zeros_like(experts)

    best_loss = np.full(n, np.inf)
    best_centers = centers.copy()
    best_experts = experts.copy()
    trace = np.empty((n, config.iterations + 1)) if record_traces else None

    def keep_best(loss):
        better = loss < best_loss
        if better.any():
            best_loss[better] = loss[better]
            best_centers[better] = centers[better]
            best_experts[better] = experts[better]

    for t in range(config.iterations):
        loss, d_c, d_e, _ = _loss_and_gradients(
            centers, experts, bandwidth, targets, grid, block_size
        )
        if record_traces:
            trace[:, t] = loss
        keep_best(loss)
        if adam:
            step = t + 1
            m_c = b1 * m_c + (1 - b1) * d_c
            v_c = b2 * v_c + (1 - b2) * d_c * d_c
            m_e = b1 * m_e + (1 - b1) * d_e
            v_e = b2 * v_e + (1 - b2) * d_e * d_e
            c1 = 1 - b1 ** step
            c2 = 1 - b2 ** step
            centers = centers - lr * (m_c / c1) / (np.sqrt(v_c / c2) + eps)
            experts = experts - lr * (m_e / c1) / (np.sqrt(v_e / c2) + eps)
        else:
            centers = centers - lr * d_c
            experts = experts - lr * d_e
        np.clip(centers, 0.0, 1.0, out=centers)
        np.clip(experts, 0.0, 1.0, out=experts)

    y = _reconstruct(centers, experts, bandwidth, grid, block_size)
    final_loss = ((y - targets) ** 2).mean(axis=1)
    if record_traces:
        trace[:, config.iterations] = final_loss
    keep_best(final_loss)
    return best_centers, best_experts, best_loss, trace
