"""Feed-forward parameter predictor trained through the fixed block-model decoder.

The encoder network maps a B x B block to 3K bottleneck values in [0,1]
(center rows, center cols, experts, in that order).  In "smoe-ae" mode the
bottleneck feeds the fixed, differentiable block-model reconstruction and the
training loss is the pixel MSE of that reconstruction; the decoder itself has
no trainable parameters.  In "c-ae" mode a mirrored dense decoder is appended
and trained jointly, which serves as the conventional-autoencoder baseline.

Weights live in one flat float32 vector with a per-layer offset table; all
arithmetic is performed in float64 so analytic gradients check against finite
differences, while float32 storage keeps the on-disk container bit-exact.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .model import DEFAULT_BANDWIDTH, DEFAULT_KERNEL_COUNT, PixelBlock, canonical_grid, _loss_and_gradients
from .ols import _ols_batch, clamp_experts
from .model import _gating, _reconstruct

DENSE = "dense"
CONV2D = "conv2d"  # 3x3 kernels, stride 1, same padding
FLATTEN = "flatten"
RELU = "relu"
SIGMOID = "sigmoid"

SMOE_AE = "smoe-ae"
C_AE = "c-ae"

MODEL_MAGIC = b"SMAE"
MODEL_VERSION = 1

_KIND_CODES = {DENSE: 0, CONV2D: 1, FLATTEN: 2, RELU: 3, SIGMOID: 4}
_CODE_KINDS = {v: k for k, v in _KIND_CODES.items()}


class ModelFileError(ValueError):
    """Base class for unreadable network containers."""


class BadModelMagicError(ModelFileError):
    pass


class UnsupportedModelVersionError(ModelFileError):
    pass


class ModelFileLengthError(ModelFileError):
    pass


@dataclass(frozen=True)
class LayerSpec:
    """One layer: dense/conv2d carry dims, the rest are shape-preserving.

    For dense, in_dim/out_dim are vector widths; for conv2d they are channel
    counts (3x3 kernels, stride 1, same padding); for flatten, in_dim is the
    flattened width it produces.
    """

    kind: str
    in_dim: int = 0
    out_dim: int = 0

    def __post_init__(self):
        if self.kind not in _KIND_CODES:
            raise ValueError(f"unknown layer kind {self.kind!r}")

    @property
    def weight_count(self) -> int:
        if self.kind == DENSE:
            return self.in_dim * self.out_dim + self.out_dim
        if self.kind == CONV2D:
            return self.in_dim * self.out_dim * 9 + self.out_dim
        return 0


@dataclass
class EncoderNet:
    """Layer list plus one flat float32 weight vector."""

    layers: tuple[LayerSpec, ...]
    weights: np.ndarray
    input_size: int
    kernel_count: int = DEFAULT_KERNEL_COUNT
    bandwidth: float = DEFAULT_BANDWIDTH
    mode: str = SMOE_AE
    bottleneck_index: int = -1  # index of the layer emitting the 3K vector
    seed: int = 0

    def __post_init__(self):
        expected = parameter_count(self.layers)
        if self.weights.shape != (expected,):
            raise ValueError(
                f"weight vector has {self.weights.shape} entries, layers imply {expected}"
            )
        if self.weights.dtype != np.float32:
            raise ValueError("weights are stored as float32")
        if self.bottleneck_index < 0:
            object.__setattr__ if False else setattr(self, "bottleneck_index", len(self.layers) - 1)

    @property
    def bottleneck_width(self) -> int:
        return 3 * self.kernel_count


def parameter_count(layers) -> int:
    return sum(spec.weight_count for spec in layers)


def encoder_layer_specs(input_size: int, hidden=(128, 64, 32), bottleneck: int = 12,
                        conv_filters=()) -> tuple[LayerSpec, ...]:
    """Encoder stack: optional 3x3 conv pyramid, then a dense funnel to the bottleneck."""
    specs: list[LayerSpec] = []
    channels = 1
    for filters in conv_filters:
        specs.append(LayerSpec(CONV2D, channels, filters))
        specs.append(LayerSpec(RELU))
        channels = filters
    width = channels * input_size * input_size
    if conv_filters:
        specs.append(LayerSpec(FLATTEN, width, width))
    for out in hidden:
        specs.append(LayerSpec(DENSE, width, out))
        specs.append(LayerSpec(RELU))
        width = out
    specs.append(LayerSpec(DENSE, width, bottleneck))
    specs.append(LayerSpec(SIGMOID))
    return tuple(specs)


def mirrored_decoder_specs(encoder: tuple[LayerSpec, ...], output_dim: int) -> tuple[LayerSpec, ...]:
    """Dense decoder mirroring a dense encoder, ending in a sigmoid image."""
    dense = [s for s in encoder if s.kind == DENSE]
    if any(s.kind == CONV2D for s in encoder):
        raise ValueError("mirrored decoder supports dense-only encoders")
    widths = [s.in_dim for s in dense][::-1]  # e.g. 32, 64, 128, 256
    specs: list[LayerSpec] = []
    width = dense[-1].out_dim
    for out in widths[:-1]:
        specs.append(LayerSpec(DENSE, width, out))
        specs.append(LayerSpec(RELU))
        width = out
    specs.append(LayerSpec(DENSE, width, output_dim))
    specs.append(LayerSpec(SIGMOID))
    return tuple(specs)


def full_scale_layer_specs(input_size: int = 16, bottleneck: int = 12) -> tuple[LayerSpec, ...]:
    """The full-size six-conv five-dense architecture (68,855,116 parameters at 16x16)."""
    return encoder_layer_specs(
        input_size,
        hidden=(512, 256, 128, 64),
        bottleneck=bottleneck,
        conv_filters=(16, 32, 64, 128, 256, 512),
    )


def init_weights(layers, seed: int = 0) -> np.ndarray:
    """Seeded uniform Glorot weights, zero biases, flattened layer by layer."""
    rng = np.random.default_rng(seed)
    chunks = []
    for spec in layers:
        if spec.kind == DENSE:
            limit = np.sqrt(6.0 / (spec.in_dim + spec.out_dim))
            w = rng.uniform(-limit, limit, size=spec.in_dim * spec.out_dim)
            chunks.append(np.concatenate([w, np.zeros(spec.out_dim)]))
        elif spec.kind == CONV2D:
            fan_in = spec.in_dim * 9
            fan_out = spec.out_dim * 9
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            w = rng.uniform(-limit, limit, size=spec.in_dim * spec.out_dim * 9)
            chunks.append(np.concatenate([w, np.zeros(spec.out_dim)]))
    if not chunks:
        return np.zeros(0, dtype=np.float32)
    return np.concatenate(chunks).astype(np.float32)


def build_network(
    input_size: int = 16,
    kernel_count: int = DEFAULT_KERNEL_COUNT,
    bandwidth: float = DEFAULT_BANDWIDTH,
    hidden=(128, 64, 32),
    conv_filters=(),
    mode: str = SMOE_AE,
    seed: int = 0,
) -> EncoderNet:
    """Fresh network with the desk-scale dense funnel by default."""
    if mode not in (SMOE_AE, C_AE):
        raise ValueError(f"unknown mode {mode!r}")
    encoder = encoder_layer_specs(input_size, hidden, 3 * kernel_count, conv_filters)
    layers = encoder
    if mode == C_AE:
        layers = encoder + mirrored_decoder_specs(encoder, input_size * input_size)
    return EncoderNet(
        layers=tuple(layers),
        weights=init_weights(layers, seed),
        input_size=input_size,
        kernel_count=kernel_count,
        bandwidth=bandwidth,
        mode=mode,
        bottleneck_index=len(encoder) - 1,
        seed=seed,
    )


# ---------------------------------------------------------------------------
# forward / backward
# ---------------------------------------------------------------------------


def _layer_params(layers, weights):
    """Per-layer float64 parameter views (W, b) keyed by layer index."""
    weights = np.asarray(weights, dtype=np.float64)
    params = {}
    offset = 0
    for i, spec in enumerate(layers):
        count = spec.weight_count
        if count:
            chunk = weights[offset : offset + count]
            if spec.kind == DENSE:
                w = chunk[: spec.in_dim * spec.out_dim].reshape(spec.out_dim, spec.in_dim)
                b = chunk[spec.in_dim * spec.out_dim :]
            else:  # conv2d
                w = chunk[: spec.in_dim * spec.out_dim * 9].reshape(
                    spec.out_dim, spec.in_dim, 3, 3
                )
                b = chunk[spec.in_dim * spec.out_dim * 9 :]
            params[i] = (w, b)
            offset += count
    return params


def _im2col(x):
    """(n,C,H,W) -> (n, H*W, C*9) patches for 3x3 same convolution."""
    n, c, h, w = x.shape
    padded = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    windows = np.lib.stride_tricks.sliding_window_view(padded, (3, 3), axis=(2, 3))
    # windows: (n, C, H, W, 3, 3)
    return windows.transpose(0, 2, 3, 1, 4, 5).reshape(n, h * w, c * 9)


def _run_layers(layers, params, x, input_size, stop_after=None, cache=None):
    """Run layers in order; optionally record what backward needs."""
    for i, spec in enumerate(layers):
        if stop_after is not None and i > stop_after:
            break
        if spec.kind == DENSE:
            if cache is not None:
                cache.append((i, x))
            w, b = params[i]
            x = x @ w.T + b
        elif spec.kind == CONV2D:
            if x.ndim == 2:
                n = x.shape[0]
                x = x.reshape(n, spec.in_dim, input_size, input_size)
            cols = _im2col(x)
            if cache is not None:
                cache.append((i, (cols, x.shape)))
            w, b = params[i]
            n, _, h, wd = x.shape
            y = cols @ w.reshape(spec.out_dim, -1).T + b
            x = y.transpose(0, 2, 1).reshape(n, spec.out_dim, h, wd)
        elif spec.kind == FLATTEN:
            if cache is not None:
                cache.append((i, x.shape))
            x = x.reshape(x.shape[0], -1)
        elif spec.kind == RELU:
            if cache is not None:
                cache.append((i, x > 0))
            x = np.maximum(x, 0.0)
        elif spec.kind == SIGMOID:
            x = 1.0 / (1.0 + np.exp(-x))
            if cache is not None:
                cache.append((i, x))
    return x


def _backprop_layers(layers, params, cache, grad, grads_out):
    """Walk the cache backwards, filling per-layer weight gradients."""
    for i, saved in reversed(cache):
        spec = layers[i]
        if spec.kind == DENSE:
            x = saved
            w, _ = params[i]
            grads_out[i] = (grad.T @ x, grad.sum(axis=0))
            grad = grad @ w
        elif spec.kind == CONV2D:
            cols, in_shape = saved
            w, _ = params[i]
            n, _, h, wd = in_shape
            f = spec.out_dim
            if grad.ndim == 2:
                grad = grad.reshape(n, f, h, wd)
            gy = grad.reshape(n, f, h * wd).transpose(0, 2, 1)  # (n, HW, F)
            w2 = w.reshape(f, -1)
            dw = np.einsum("npf,npc->fc", gy, cols).reshape(w.shape)
            db = gy.sum(axis=(0, 1))
            grads_out[i] = (dw, db)
            dcols = gy @ w2  # (n, HW, C*9)
            dpatch = dcols.reshape(n, h, wd, spec.in_dim, 3, 3)
            dpad = np.zeros((n, spec.in_dim, h + 2, wd + 2))
            for di in range(3):
                for dj in range(3):
                    dpad[:, :, di : di + h, dj : dj + wd] += dpatch[:, :, :, :, di, dj].transpose(
                        0, 3, 1, 2
                    )
            grad = dpad[:, :, 1:-1, 1:-1]
        elif spec.kind == FLATTEN:
            grad = grad.reshape(saved)
        elif spec.kind == RELU:
            grad = grad * saved
        elif spec.kind == SIGMOID:
            y = saved
            grad = grad * y * (1.0 - y)
    return grad


def _flatten_grads(layers, grads_by_layer, total):
    flat = np.zeros(total, dtype=np.float64)
    offset = 0
    for i, spec in enumerate(layers):
        count = spec.weight_count
        if count:
            if i in grads_by_layer:
                dw, db = grads_by_layer[i]
                flat[offset : offset + count] = np.concatenate([dw.reshape(-1), db])
            offset += count
    return flat


def _prepare_input(net: EncoderNet, blocks: np.ndarray) -> np.ndarray:
    blocks = np.asarray(blocks, dtype=np.float64)
    if blocks.ndim == 2:
        blocks = blocks[None]
    if blocks.shape[1:] != (net.input_size, net.input_size):
        raise ValueError(
            f"block shape {blocks.shape[1:]} does not match network input "
            f"{net.input_size}x{net.input_size}"
        )
    n = blocks.shape[0]
    if net.layers[0].kind == CONV2D:
        return blocks.reshape(n, 1, net.input_size, net.input_size)
    return blocks.reshape(n, -1)


def forward_batch(net: EncoderNet, blocks: np.ndarray, weights=None) -> np.ndarray:
    """Bottleneck vectors (n, 3K) for a stack of blocks."""
    params = _layer_params(net.layers, net.weights if weights is None else weights)
    x = _prepare_input(net, blocks)
    return _run_layers(net.layers, params, x, net.input_size, stop_after=net.bottleneck_index)


def forward(net: EncoderNet, block) -> np.ndarray:
    """Bottleneck vector for one block (PixelBlock or B x B array)."""
    pixels = block.pixels if isinstance(block, PixelBlock) else np.asarray(block)
    return forward_batch(net, pixels[None])[0]


def bottleneck_to_model_arrays(z: np.ndarray, kernel_count: int):
    """Split bottleneck vectors (n,3K) into centers (n,K,2) and experts (n,K)."""
    k = kernel_count
    centers = np.stack([z[:, :k], z[:, k : 2 * k]], axis=2)
    return centers, z[:, 2 * k :]


def _loss_and_input_grad(net, z_or_out, targets, mode):
    """Batch-mean loss and its gradient at the decoder input.

    smoe-ae: z (n,3K) runs through the fixed block-model decoder.
    c-ae: z_or_out is already the decoder output (n,B*B).
    """
    n = z_or_out.shape[0]
    if mode == SMOE_AE:
        k = net.kernel_count
        centers, experts = bottleneck_to_model_arrays(z_or_out, k)
        grid = canonical_grid(net.input_size).positions
        losses, d_centers, d_experts, _ = _loss_and_gradients(
            centers, experts, net.bandwidth, targets, grid, net.input_size
        )
        dz = np.concatenate([d_centers[:, :, 0], d_centers[:, :, 1], d_experts], axis=1)
        return losses.mean(), dz / n
    residual = z_or_out - targets
    losses = (residual ** 2).mean(axis=1)
    dout = 2.0 * residual / residual.shape[1] / n
    return losses.mean(), dout


def loss_batch(net: EncoderNet, blocks, targets=None, mode=None, weights=None) -> float:
    """Batch-mean training loss (pixel MSE through the active decoder)."""
    mode = mode or net.mode
    blocks = np.asarray(blocks, dtype=np.float64)
    if blocks.ndim == 2:
        blocks = blocks[None]
    targets = blocks if targets is None else np.asarray(targets, dtype=np.float64)
    targets = targets.reshape(blocks.shape[0], -1)
    params = _layer_params(net.layers, net.weights if weights is None else weights)
    x = _prepare_input(net, blocks)
    stop = net.bottleneck_index if mode == SMOE_AE else None
    out = _run_layers(net.layers, params, x, net.input_size, stop_after=stop)
    loss, _ = _loss_and_input_grad(net, out, targets, mode)
    return float(loss)


def backward_batch(net: EncoderNet, blocks, targets=None, mode=None, weights=None):
    """(batch-mean loss, flat gradient over all weights)."""
    mode = mode or net.mode
    blocks = np.asarray(blocks, dtype=np.float64)
    if blocks.ndim == 2:
        blocks = blocks[None]
    targets = blocks if targets is None else np.asarray(targets, dtype=np.float64)
    targets = targets.reshape(blocks.shape[0], -1)
    params = _layer_params(net.layers, net.weights if weights is None else weights)
    x = _prepare_input(net, blocks)
    cache: list = []
    stop = net.bottleneck_index if mode == SMOE_AE else None
    out = _run_layers(net.layers, params, x, net.input_size, stop_after=stop, cache=cache)
    loss, grad = _loss_and_input_grad(net, out, targets, mode)
    grads_by_layer: dict = {}
    _backprop_layers(net.layers, params, cache, grad, grads_by_layer)
    return float(loss), _flatten_grads(net.layers, grads_by_layer, net.weights.size)


def backward(net: EncoderNet, block, target=None, mode=None) -> np.ndarray:
    """Flat weight gradient of the reconstruction loss for one block."""
    pixels = block.pixels if isinstance(block, PixelBlock) else np.asarray(block)
    tgt = None
    if target is not None:
        tgt = (target.pixels if isinstance(target, PixelBlock) else np.asarray(target))[None]
    _, grad = backward_batch(net, pixels[None], tgt, mode)
    return grad


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    """Mini-batch Adam settings; defaults follow the reference recipe."""

    epochs: int = 30
    learning_rate: float = 0.00005
    batch_size: int = 64
    mode: str = SMOE_AE
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.mode not in (SMOE_AE, C_AE):
            raise ValueError(f"unknown mode {self.mode!r}")


def train(dataset: np.ndarray, config: TrainConfig, net: EncoderNet):
    """Train in place on a (n,B,B) block stack; returns (net, per-epoch mean loss).

    Block order is reshuffled every epoch from the config seed, so a run is
    bitwise reproducible on one machine.
    """
    blocks = np.asarray(dataset, dtype=np.float64)
    if blocks.ndim != 3 or blocks.shape[0] == 0:
        raise ValueError("dataset must be a non-empty (n, B, B) block stack")
    if net.mode != config.mode:
        raise ValueError(f"net mode {net.mode!r} does not match config mode {config.mode!r}")
    n = blocks.shape[0]
    rng = np.random.default_rng(config.seed)
    b1, b2, eps = 0.9, 0.999, 1e-8
    m = np.zeros(net.weights.size)
    v = np.zeros(net.weights.size)
    step = 0
    history = np.empty(config.epochs)
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, config.batch_size):
            batch = blocks[order[start : start + config.batch_size]]
            loss, grad = backward_batch(net, batch, mode=config.mode)
            step += 1
            m = b1 * m + (1 - b1) * grad
            v = b2 * v + (1 - b2) * grad * grad
            mh = m / (1 - b1 ** step)
            vh = v / (1 - b2 ** step)
            update = config.learning_rate * mh / (np.sqrt(vh) + eps)
            net.weights = (net.weights.astype(np.float64) - update).astype(np.float32)
            total += loss * batch.shape[0]
        history[epoch] = total / n
    return net, history


def predict_batch(net: EncoderNet, blocks, kernel_count=None, bandwidth=None, use_ols=False):
    """Predicted (centers (n,K,2), experts (n,K)) for a block stack.

    With use_ols the predicted experts are replaced by clamped least-squares
    estimates for the predicted gates whenever that lowers the block MSE, so
    the refinement never hurts.
    """
    k = kernel_count or net.kernel_count
    if 3 * k != net.bottleneck_width:
        raise ValueError(f"network bottleneck {net.bottleneck_width} does not fit K={k}")
    s = bandwidth or net.bandwidth
    blocks = np.asarray(blocks, dtype=np.float64)
    if blocks.ndim == 2:
        blocks = blocks[None]
    z = forward_batch(net, blocks).astype(np.float64)
    centers, experts = bottleneck_to_model_arrays(z, k)
    if use_ols:
        targets = blocks.reshape(blocks.shape[0], -1)
        grid = canonical_grid(net.input_size).positions
        gates = _gating(centers, s, grid, net.input_size)
        refit, _ = _ols_batch(gates, targets)
        refit = clamp_experts(refit)
        mse_pred = (((gates * experts[:, None, :]).sum(2) - targets) ** 2).mean(1)
        mse_refit = (((gates * refit[:, None, :]).sum(2) - targets) ** 2).mean(1)
        use = mse_refit <= mse_pred
        experts = np.where(use[:, None], refit, experts)
    return centers, experts


def predict_block_model(net: EncoderNet, block, kernel_count=None, bandwidth=None,
                        use_ols: bool = False):
    """BlockModel predicted for one block."""
    from .model import BlockModel

    pixels = block.pixels if isinstance(block, PixelBlock) else np.asarray(block)
    centers, experts = predict_batch(net, pixels[None], kernel_count, bandwidth, use_ols)
    return BlockModel(
        centers=np.clip(centers[0], 0.0, 1.0),
        experts=np.clip(experts[0], 0.0, 1.0),
        bandwidth=bandwidth or net.bandwidth,
    )


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

_FILE_HEAD = struct.Struct("<4sBBBBfqHH")


def save_model(net: EncoderNet, path) -> None:
    """Write the versioned binary container (little-endian, float32 weights)."""
    head = _FILE_HEAD.pack(
        MODEL_MAGIC,
        MODEL_VERSION,
        0 if net.mode == SMOE_AE else 1,
        net.input_size,
        net.kernel_count,
        net.bandwidth,
        net.seed,
        net.bottleneck_index,
        len(net.layers),
    )
    parts = [head]
    for spec in net.layers:
        parts.append(struct.pack("<BII", _KIND_CODES[spec.kind], spec.in_dim, spec.out_dim))
    parts.append(struct.pack("<Q", net.weights.size))
    parts.append(net.weights.astype("<f4").tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def load_model(path) -> EncoderNet:
    """Read a container written by save_model; bit-exact round trip."""
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < _FILE_HEAD.size:
        raise ModelFileLengthError("file shorter than its fixed header")
    magic, version, mode_code, input_size, kernel_count, bandwidth, seed, neck, n_layers = (
        _FILE_HEAD.unpack_from(data)
    )
    if magic != MODEL_MAGIC:
        raise BadModelMagicError(f"bad magic {magic!r}")
    if version != MODEL_VERSION:
        raise UnsupportedModelVersionError(f"unsupported version {version}")
    offset = _FILE_HEAD.size
    layers = []
    for _ in range(n_layers):
        if offset + 9 > len(data):
            raise ModelFileLengthError("layer table ends early")
        code, in_dim, out_dim = struct.unpack_from("<BII", data, offset)
        offset += 9
        if code not in _CODE_KINDS:
            raise ModelFileError(f"unknown layer kind code {code}")
        layers.append(LayerSpec(_CODE_KINDS[code], in_dim, out_dim))
    if offset + 8 > len(data):
        raise ModelFileLengthError("weight count field missing")
    (count,) = struct.unpack_from("<Q", data, offset)
    offset += 8
    if count != parameter_count(layers):
        raise ModelFileError("weight count does not match the layer table")
    end = offset + 4 * count
    if len(data) != end:
        raise ModelFileLengthError(
            f"expected {end} bytes total, file has {len(data)}"
        )
    weights = np.frombuffer(data[offset:end], dtype="<f4").astype(np.float32)
    return EncoderNet(
        layers=tuple(layers),
        weights=weights,
        input_size=input_size,
        kernel_count=kernel_count,
        bandwidth=float(bandwidth),
        mode=SMOE_AE if mode_code == 0 else C_AE,
        bottleneck_index=neck,
        seed=seed,
    )
