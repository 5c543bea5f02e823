"""Continuous per-block image model: radial Gaussian kernels blended by soft-max gates.

A block of pixels is regressed as y(x) = sum_i m_i * w_i(x) where the m_i are
constant expert values and the gates w_i are a soft-max over radial kernel
responses exp(-S * ||x - mu_i||^2) with one shared bandwidth S.  Centers are
stored normalized to [0,1]^2 and mapped to pixel units (times B-1) whenever a
block of size B is evaluated; S acts on squared pixel distances.

All public functions are pure; the batched private helpers at the bottom are
the single numeric code path shared by the optimizer, the codec and the
network trainer.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

DEFAULT_BLOCK_SIZE = 16
DEFAULT_KERNEL_COUNT = 4
DEFAULT_BANDWIDTH = 0.0035


@dataclass(frozen=True)
class PixelBlock:
    """A square grayscale pixel block with values in [0,1]."""

    pixels: np.ndarray
    origin: tuple[int, int] = (0, 0)

    def __post_init__(self):
        pixels = np.asarray(self.pixels, dtype=np.float64)
        if pixels.ndim != 2 or pixels.shape[0] != pixels.shape[1]:
            raise ValueError(f"block must be square 2-D, got shape {pixels.shape}")
        if pixels.shape[0] < 1:
            raise ValueError("block must contain at least one pixel")
        if np.any(pixels < 0.0) or np.any(pixels > 1.0):
            raise ValueError("pixel values must lie in [0, 1]")
        object.__setattr__(self, "pixels", pixels)

    @property
    def block_size(self) -> int:
        return self.pixels.shape[0]

    def flat(self) -> np.ndarray:
        """Row-major pixel vector of length B*B."""
        return self.pixels.reshape(-1)


@dataclass(frozen=True)
class Grid:
    """Evaluation positions in pixel units, (row, col) per entry.

    The canonical grid enumerates {0..B-1}^2 row-major; arbitrary grids (used
    for resampling) may hold any real coordinates in [0, B-1].
    """

    positions: np.ndarray
    block_size: int

    def __post_init__(self):
        positions = np.asarray(self.positions, dtype=np.float64)
        if positions.ndim != 2 or positions.shape[1] != 2:
            raise ValueError(f"positions must be (N, 2), got {positions.shape}")
        if positions.shape[0] == 0:
            raise ValueError("grid must not be empty")
        object.__setattr__(self, "positions", positions)

    def __len__(self) -> int:
        return self.positions.shape[0]


def canonical_grid(block_size: int) -> Grid:
    """Row-major integer grid over {0..B-1}^2."""
    r = np.arange(block_size, dtype=np.float64)
    positions = np.stack(np.meshgrid(r, r, indexing="ij"), axis=-1).reshape(-1, 2)
    return Grid(positions=positions, block_size=block_size)


@dataclass(frozen=True)
class BlockModel:
    """Per-block model parameters: K centers, K experts, shared bandwidth.

    Centers and experts are stored clamped to [0,1]; producers that can step
    outside that range (least-squares expert estimates, optimizer updates)
    clamp before constructing a model.
    """

    centers: np.ndarray
    experts: np.ndarray
    bandwidth: float = DEFAULT_BANDWIDTH

    def __post_init__(self):
        centers = np.asarray(self.centers, dtype=np.float64)
        experts = np.asarray(self.experts, dtype=np.float64)
        if centers.ndim != 2 or centers.shape[1] != 2:
            raise ValueError(f"centers must be (K, 2), got {centers.shape}")
        if experts.shape != (centers.shape[0],):
            raise ValueError("experts must be a vector with one entry per center")
        if centers.shape[0] < 1:
            raise ValueError("model needs at least one kernel")
        if np.any(centers < 0.0) or np.any(centers > 1.0):
            raise ValueError("centers must be stored normalized in [0, 1]^2")
        if np.any(experts < 0.0) or np.any(experts > 1.0):
            raise ValueError("experts must lie in [0, 1]")
        if not self.bandwidth > 0.0:
            raise ValueError("bandwidth must be positive")
        object.__setattr__(self, "centers", centers)
        object.__setattr__(self, "experts", experts)

    @property
    def kernel_count(self) -> int:
        return self.centers.shape[0]


@dataclass(frozen=True)
class FullKernel:
    """General anisotropic Gaussian kernel, evaluated but never optimized here."""

    center: np.ndarray
    covariance: np.ndarray

    def __post_init__(self):
        center = np.asarray(self.center, dtype=np.float64).reshape(2)
        covariance = np.asarray(self.covariance, dtype=np.float64)
        if covariance.shape != (2, 2):
            raise ValueError("covariance must be 2x2")
        object.__setattr__(self, "center", center)
        object.__setattr__(self, "covariance", covariance)


def gaussian_kernel(x, kernel: FullKernel) -> float:
    """Evaluate exp(-0.5 (x-mu)^T Sigma^-1 (x-mu)) at one position.

    Raises ValueError when the covariance is not symmetric positive-definite.
    """
    cov = kernel.covariance
    if not np.allclose(cov, cov.T, rtol=1e-12, atol=1e-12):
        raise ValueError("covariance must be symmetric")
    try:
        chol = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        raise ValueError("covariance must be positive-definite") from None
    diff = np.asarray(x, dtype=np.float64).reshape(2) - kernel.center
    # ||L^-1 d||^2 = d^T Sigma^-1 d
    z = np.linalg.solve(chol, diff)
    return float(np.exp(-0.5 * np.dot(z, z)))


def radial_kernel(x, center, bandwidth: float) -> float:
    """Isotropic kernel exp(-S ||x - mu||^2), the shared-bandwidth special case."""
    diff = np.asarray(x, dtype=np.float64).reshape(2) - np.asarray(center, dtype=np.float64).reshape(2)
    return float(np.exp(-bandwidth * np.dot(diff, diff)))


def gating_weights(model: BlockModel, grid: Grid) -> np.ndarray:
    """Soft-max gate matrix, one row per grid position, one column per kernel.

    Rows sum to 1; every entry lies in [0,1].  Centers are mapped from the
    stored [0,1] domain to pixel units of the grid's block size.
    """
    w = _gating(model.centers[None], model.bandwidth, grid.positions, grid.block_size)
    return w[0]


def reconstruct(model: BlockModel, grid: Grid) -> np.ndarray:
    """Predicted luminance at every grid position (convex combination of experts)."""
    w = _gating(model.centers[None], model.bandwidth, grid.positions, grid.block_size)
    return (w[0] * model.experts[None, :]).sum(axis=1)


def mse_loss(model: BlockModel, block: PixelBlock) -> float:
    """Mean squared reconstruction error over the block's canonical grid."""
    grid = canonical_grid(block.block_size)
    y = reconstruct(model, grid)
    r = y - block.flat()
    return float(np.mean(r * r))


def loss_gradients(model: BlockModel, block: PixelBlock) -> tuple[np.ndarray, np.ndarray]:
    """Analytic gradient of the block MSE wrt stored centers and experts.

    Returns (dL/dcenters with shape (K,2), dL/dexperts with shape (K,)).
    Gradients are taken in the stored normalized-center domain, i.e. they
    include the (B-1) chain factor of the pixel-unit mapping.
    """
    grid = canonical_grid(block.block_size)
    _, dmu, dm, _ = _loss_and_gradients(
        model.centers[None], model.experts[None], model.bandwidth,
        block.flat()[None], grid.positions, block.block_size,
    )
    return dmu[0], dm[0]


# ---------------------------------------------------------------------------
# Batched kernels.  centers (n,K,2) normalized, experts (n,K), targets (n,N);
# grid_pos (N,2) in pixel units shared across the batch.  These accept raw
# arrays without the [0,1] storage validation so optimizers and finite
# difference probes can evaluate slightly out-of-domain points.
# ---------------------------------------------------------------------------


def _gating(centers, bandwidth, grid_pos, block_size):
    """Batched gate matrices (n,N,K) for normalized centers (n,K,2)."""
    centers_px = np.asarray(centers, dtype=np.float64) * (block_size - 1)
    grid_pos = np.asarray(grid_pos, dtype=np.float64)
    # expand ||x-mu||^2 = ||x||^2 - 2 x.mu + ||mu||^2 to keep intermediates 3-D
    x2 = (grid_pos ** 2).sum(axis=1)                             # (N,)
    xm = grid_pos @ centers_px.transpose(0, 2, 1)                # (n,N,K)
    c2 = (centers_px ** 2).sum(axis=2)                           # (n,K)
    expo = -bandwidth * (x2[None, :, None] - 2.0 * xm + c2[:, None, :])
    expo -= expo.max(axis=2, keepdims=True)                      # soft-max shift
    g = np.exp(expo)
    return g / g.sum(axis=2, keepdims=True)


def _reconstruct(centers, experts, bandwidth, grid_pos, block_size):
    """Batched reconstruction (n,N)."""
    w = _gating(centers, bandwidth, grid_pos, block_size)
    return (w * np.asarray(experts, dtype=np.float64)[:, None, :]).sum(axis=2)


def _loss_and_gradients(centers, experts, bandwidth, targets, grid_pos, block_size):
    """Batched loss, gradients and reconstruction in one pass.

    Returns (loss (n,), dcenters (n,K,2), dexperts (n,K), y (n,N)).  The
    center gradient follows from the soft-max quotient rule:

        dy_n/dmu_k = 2 S w_nk (m_k - y_n) (x_n - mu_k)      [pixel units]

    and is scaled by (B-1) for the stored normalized domain.
    """
    centers = np.asarray(centers, dtype=np.float64)
    experts = np.asarray(experts, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    grid_pos = np.asarray(grid_pos, dtype=np.float64)
    n_pos = grid_pos.shape[0]
    scale = block_size - 1

    centers_px = centers * scale
    w = _gating(centers, bandwidth, grid_pos, block_size)        # (n,N,K)
    y = (w * experts[:, None, :]).sum(axis=2)                    # (n,N)
    r = y - targets
    loss = (r * r).mean(axis=1)

    dexperts = (2.0 / n_pos) * (r[:, :, None] * w).sum(axis=1)
    # c_nk = r_n w_nk (m_k - y_n); dL/dmu_k = 4S/N sum_n c_nk (x_n - mu_k)
    c = r[:, :, None] * w * (experts[:, None, :] - y[:, :, None])
    cx = np.einsum("bnk,nd->bkd", c, grid_pos)
    csum = c.sum(axis=1)
    dcenters_px = (4.0 * bandwidth / n_pos) * (cx - csum[:, :, None] * centers_px)
    return loss, dcenters_px * scale, dexperts, y
