"""Closed-form least-squares re-estimation of expert values for fixed gates."""

from __future__ import annotations

import numpy as np

from .model import BlockModel, PixelBlock, canonical_grid, _gating

DAMPING = 1e-8
CONDITION_LIMIT = 1e12


def ols_experts(block: PixelBlock, model: BlockModel) -> tuple[np.ndarray, bool]:
    """Optimal experts for the model's gates on this block.

    Solves the damped normal equations (W^T W + lambda I) m = W^T y where W is
    the gate matrix of the model's centers on the block's canonical grid.  The
    small Tikhonov term keeps coincident-center (rank-deficient) gates solvable
    and deterministic.  Returns the expert vector, which may leave [0,1], and a
    flag that is True when cond(W^T W) exceeds 1e12.
    """
    grid = canonical_grid(block.block_size)
    w = _gating(model.centers[None], model.bandwidth, grid.positions, block.block_size)[0]
    experts, flags = _ols_batch(w[None], block.flat()[None])
    return experts[0], bool(flags[0])


def clamp_experts(experts: np.ndarray) -> np.ndarray:
    """Componentwise clamp to the [0,1] storage domain."""
    return np.clip(np.asarray(experts, dtype=np.float64), 0.0, 1.0)


def _ols_batch(gates, targets):
    """Damped normal-equation solve for a batch of gate matrices.

    gates (n,N,K), targets (n,N) -> (experts (n,K), ill_conditioned (n,) bool).
    """
    gates = np.asarray(gates, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    k = gates.shape[2]
    wtw = np.einsum("bnk,bnl->bkl", gates, gates)
    wty = np.einsum("bnk,bn->bk", gates, targets)
    eigs = np.linalg.eigvalsh(wtw)
    with np.errstate(divide="ignore", invalid="ignore"):
        cond = eigs[:, -1] / eigs[:, 0]
    ill = ~(cond <= CONDITION_LIMIT)  # catches huge ratios, nan and inf
    damped = wtw + DAMPING * np.eye(k)[None]
    experts = np.linalg.solve(damped, wty[..., None])[..., 0]
    return experts, ill
