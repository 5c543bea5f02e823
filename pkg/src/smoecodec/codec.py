"""Image-level encoding and decoding.

Encode: pad the image to whole blocks, classify each block as textured or
non-textured, fit (gradient descent) or predict (network) models for the
textured ones, quantize and serialize.  Decode reverses the process and crops
back to the source dimensions.  Expert values of textured blocks are
re-estimated against the dequantized centers before they are quantized, and
the encoder keeps whichever of the refit or original expert set reconstructs
the block better after quantization, so the refit can only help.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import fit as fit_mod
from .bitstream import (
    BitstreamHeader,
    CodedBlock,
    deserialize,
    payload_bits,
    rate_bpp,
    serialize,
)
from .model import (
    DEFAULT_BANDWIDTH,
    DEFAULT_BLOCK_SIZE,
    DEFAULT_KERNEL_COUNT,
    BlockModel,
    PixelBlock,
    canonical_grid,
    _gating,
    _reconstruct,
)
from .ols import _ols_batch, clamp_experts
from .quantize import (
    DEFAULT_VARIANCE_THRESHOLD,
    NON_TEXTURED,
    TEXTURED,
    QuantSpec,
    dequantize_array,
    dequantize_uniform,
    quantize_array,
    quantize_uniform,
)

GD = "gd"
NEURAL = "neural"


@dataclass(frozen=True)
class EncodeResult:
    stream: bytes
    header: BitstreamHeader
    seconds: float
    rate_bpp: float
    textured_blocks: int
    total_blocks: int


@dataclass(frozen=True)
class DecodeResult:
    image: np.ndarray
    header: BitstreamHeader
    seconds: float


@dataclass(frozen=True)
class DecodedModels:
    """Per-block decoded parameters in raster order: BlockModel or float mean."""

    header: BitstreamHeader
    entries: tuple


def pad_to_blocks(image: np.ndarray, block_size: int) -> np.ndarray:
    """Edge-replicate so both dimensions become multiples of block_size."""
    h, w = image.shape
    pad_r = (-h) % block_size
    pad_c = (-w) % block_size
    if pad_r == 0 and pad_c == 0:
        return image
    return np.pad(image, ((0, pad_r), (0, pad_c)), mode="edge")


def split_blocks(padded: np.ndarray, block_size: int) -> np.ndarray:
    """Raster-order stack of (n, B, B) blocks from a padded image."""
    h, w = padded.shape
    rows, cols = h // block_size, w // block_size
    return (
        padded.reshape(rows, block_size, cols, block_size)
        .transpose(0, 2, 1, 3)
        .reshape(rows * cols, block_size, block_size)
    )


def assemble_blocks(blocks: np.ndarray, grid_shape: tuple[int, int]) -> np.ndarray:
    """Inverse of split_blocks."""
    rows, cols = grid_shape
    b = blocks.shape[1]
    return (
        blocks.reshape(rows, cols, b, b).transpose(0, 2, 1, 3).reshape(rows * b, cols * b)
    )


def _quantized_textured_codes(pixels, centers, experts, bandwidth, spec, refit_experts):
    """Quantize one textured block's parameters; returns the 3K code list.

    Centers are quantized first; experts are then (optionally) re-estimated by
    least squares against the dequantized centers.  Both the refit and the
    pass-through expert sets are quantized and the one with lower block MSE
    wins, which makes the refit a pure improvement.
    """
    b = pixels.shape[0]
    center_codes = quantize_array(centers.reshape(-1), spec.center_bits)
    deq_centers = dequantize_array(center_codes, spec.center_bits).reshape(-1, 2)
    target = pixels.reshape(-1)

    candidates = [experts]
    if refit_experts:
        grid = canonical_grid(b).positions
        gates = _gating(deq_centers[None], bandwidth, grid, b)
        refit, _ = _ols_batch(gates, target[None])
        candidates.insert(0, clamp_experts(refit[0]))

    best = None
    for cand in candidates:
        codes = quantize_array(cand, spec.expert_bits)
        deq = dequantize_array(codes, spec.expert_bits)
        y = _reconstruct(
            deq_centers[None], deq[None], bandwidth, canonical_grid(b).positions, b
        )[0]
        mse = float(((y - target) ** 2).mean())
        if best is None or mse < best[0]:
            best = (mse, codes)
    # payload order: all center rows, all center cols, all experts
    rows = center_codes.reshape(-1, 2)[:, 0]
    cols = center_codes.reshape(-1, 2)[:, 1]
    return tuple(int(c) for c in np.concatenate([rows, cols, best[1]]))


def encode_block(
    block: PixelBlock,
    model_or_mean,
    spec: QuantSpec,
    refit_experts: bool = True,
) -> CodedBlock:
    """Quantize one block: a BlockModel yields a textured payload, a scalar mean
    a non-textured one."""
    if isinstance(model_or_mean, BlockModel):
        model = model_or_mean
        codes = _quantized_textured_codes(
            block.pixels, model.centers, model.experts, model.bandwidth, spec, refit_experts
        )
        return CodedBlock(kind=TEXTURED, codes=codes)
    mean = float(model_or_mean)
    return CodedBlock(kind=NON_TEXTURED, codes=(quantize_uniform(mean, spec.mean_bits),))


def decode_block_model(coded: CodedBlock, header: BitstreamHeader):
    """Dequantized parameters of one coded block: BlockModel or float mean."""
    coded.validate(header)
    if coded.kind == NON_TEXTURED:
        return dequantize_uniform(coded.codes[0], QuantSpec().mean_bits)
    k = header.kernel_count
    codes = np.asarray(coded.codes)
    rows = dequantize_array(codes[:k], header.center_bits)
    cols = dequantize_array(codes[k : 2 * k], header.center_bits)
    experts = dequantize_array(codes[2 * k :], header.expert_bits)
    return BlockModel(
        centers=np.stack([rows, cols], axis=1),
        experts=experts,
        bandwidth=header.bandwidth,
    )


def decode_block(coded: CodedBlock, header: BitstreamHeader) -> PixelBlock:
    """Reconstruct one block on its canonical grid."""
    entry = decode_block_model(coded, header)
    b = header.block_size
    if isinstance(entry, BlockModel):
        grid = canonical_grid(b)
        pixels = (
            _reconstruct(entry.centers[None], entry.experts[None], entry.bandwidth,
                         grid.positions, b)[0]
        ).reshape(b, b)
    else:
        pixels = np.full((b, b), entry)
    return PixelBlock(pixels=pixels)


def _as_image(image) -> np.ndarray:
    image = np.asarray(image)
    if image.ndim != 2:
        raise ValueError(f"expected a 2-D grayscale image, got shape {image.shape}")
    if image.dtype == np.uint8:
        image = image.astype(np.float64) / 255.0
    else:
        image = image.astype(np.float64)
    if np.any(image < 0.0) or np.any(image > 1.0):
        raise ValueError("image values must lie in [0, 1]")
    return image


def encode_image(
    image,
    encoder: str = GD,
    quant: QuantSpec | None = None,
    kernel_count: int = DEFAULT_KERNEL_COUNT,
    bandwidth: float = DEFAULT_BANDWIDTH,
    block_size: int = DEFAULT_BLOCK_SIZE,
    variance_threshold: float = DEFAULT_VARIANCE_THRESHOLD,
    gd_config: fit_mod.GdConfig | None = None,
    net=None,
    use_ols: bool = True,
    refit_experts: bool = True,
) -> EncodeResult:
    """Encode a grayscale image to a byte stream; see module docstring.

    encoder "gd" fits every textured block by gradient descent with gd_config;
    encoder "neural" predicts parameters with a trained network (net), with
    use_ols re-estimating the predicted experts per block.
    """
    start = time.perf_counter()
    image = _as_image(image)
    quant = quant or QuantSpec()
    header = BitstreamHeader(
        width=image.shape[1],
        height=image.shape[0],
        block_size=block_size,
        kernel_count=kernel_count,
        bandwidth=bandwidth,
        center_bits=quant.center_bits,
        expert_bits=quant.expert_bits,
    )
    blocks = split_blocks(pad_to_blocks(image, block_size), block_size)
    variances = blocks.var(axis=(1, 2))
    textured = variances > variance_threshold
    idx = np.nonzero(textured)[0]

    models: dict[int, BlockModel] = {}
    if idx.size:
        if encoder == GD:
            config = gd_config or fit_mod.GdConfig()
            centers, experts, _, _ = fit_mod.fit_blocks(
                blocks[idx], config, kernel_count, bandwidth
            )
        elif encoder == NEURAL:
            if net is None:
                raise ValueError("neural encoding needs a trained network")
            from . import network as network_mod

            centers, experts = network_mod.predict_batch(
                net, blocks[idx], kernel_count, bandwidth, use_ols=use_ols
            )
        else:
            raise ValueError(f"unknown encoder {encoder!r}")
        for j, i in enumerate(idx):
            models[int(i)] = BlockModel(
                centers=centers[j], experts=experts[j], bandwidth=bandwidth
            )

    coded = []
    for i, pixels in enumerate(blocks):
        block = PixelBlock(pixels=pixels)
        if i in models:
            coded.append(encode_block(block, models[i], quant, refit_experts=refit_experts))
        else:
            coded.append(encode_block(block, float(pixels.mean()), quant))
    stream = serialize(header, coded)
    seconds = time.perf_counter() - start
    return EncodeResult(
        stream=stream,
        header=header,
        seconds=seconds,
        rate_bpp=rate_bpp(header, coded),
        textured_blocks=int(textured.sum()),
        total_blocks=len(coded),
    )


def decode_image_models(stream: bytes) -> DecodedModels:
    """Parse a stream into per-block dequantized parameters."""
    header, coded = deserialize(stream)
    entries = tuple(decode_block_model(c, header) for c in coded)
    return DecodedModels(header=header, entries=entries)


def decode_image(stream: bytes) -> DecodeResult:
    """Decode a stream back to its grayscale image."""
    start = time.perf_counter()
    decoded = decode_image_models(stream)
    header = decoded.header
    b = header.block_size
    grid = canonical_grid(b)

    pixels = np.empty((len(decoded.entries), b, b))
    model_idx = [i for i, e in enumerate(decoded.entries) if isinstance(e, BlockModel)]
    if model_idx:
        centers = np.stack([decoded.entries[i].centers for i in model_idx])
        experts = np.stack([decoded.entries[i].experts for i in model_idx])
        recon = _reconstruct(centers, experts, header.bandwidth, grid.positions, b)
        for j, i in enumerate(model_idx):
            pixels[i] = recon[j].reshape(b, b)
    for i, entry in enumerate(decoded.entries):
        if not isinstance(entry, BlockModel):
            pixels[i] = entry
    canvas = assemble_blocks(pixels, header.grid_shape)
    image = canvas[: header.height, : header.width]
    return DecodeResult(image=image, header=header, seconds=time.perf_counter() - start)
