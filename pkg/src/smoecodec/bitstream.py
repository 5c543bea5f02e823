"""Bit-exact stream container for coded images.

Layout: a 16-byte header (magic "SMOE", version byte, width and height as
16-bit little-endian, block size, kernel count, bandwidth as IEEE-754 float32
little-endian, then center/expert bit widths packed high/low nibble in one
byte) followed by the blocks in raster order with no alignment padding.  Each
block starts with one flag bit (1 = textured) and then either 2K center codes
plus K expert codes, or one mean code.  Codes are written MSB-first; the last
byte is zero-padded.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

from .quantize import QuantSpec, TEXTURED, NON_TEXTURED

MAGIC = b"SMOE"
VERSION = 1

_HEADER = struct.Struct("<4sBHHBBfB")


class MalformedStreamError(ValueError):
    """Base class for undecodable streams."""


class BadMagicError(MalformedStreamError):
    pass


class UnsupportedVersionError(MalformedStreamError):
    pass


class TruncatedStreamError(MalformedStreamError):
    pass


@dataclass(frozen=True)
class BitstreamHeader:
    """Stream-level parameters; width and height are the source image's."""

    width: int
    height: int
    block_size: int = 16
    kernel_count: int = 4
    bandwidth: float = 0.0035
    center_bits: int = 4
    expert_bits: int = 5

    def __post_init__(self):
        if not 0 <= self.width < 1 << 16 or not 0 <= self.height < 1 << 16:
            raise ValueError("width/height must fit in 16 bits")
        if not 1 <= self.block_size < 1 << 8:
            raise ValueError("block_size must fit in 8 bits")
        if not 1 <= self.kernel_count < 1 << 8:
            raise ValueError("kernel_count must fit in 8 bits")
        if not self.bandwidth > 0:
            raise ValueError("bandwidth must be positive")
        if not 1 <= self.center_bits <= 8 or not 1 <= self.expert_bits <= 8:
            raise ValueError("bit widths must be in 1..8")

    @property
    def grid_shape(self) -> tuple[int, int]:
        """(block rows, block cols); padding to full blocks happens at encode."""
        return (
            math.ceil(self.height / self.block_size),
            math.ceil(self.width / self.block_size),
        )

    @property
    def block_count(self) -> int:
        rows, cols = self.grid_shape
        return rows * cols

    @property
    def quant_spec(self) -> QuantSpec:
        return QuantSpec(center_bits=self.center_bits, expert_bits=self.expert_bits)


@dataclass(frozen=True)
class CodedBlock:
    """Quantized payload of one block.

    Textured blocks carry 3K codes ordered center rows, center cols, experts;
    non-textured blocks carry a single mean code.
    """

    kind: str
    codes: tuple[int, ...]

    def __post_init__(self):
        if self.kind not in (TEXTURED, NON_TEXTURED):
            raise ValueError(f"unknown block kind {self.kind!r}")
        object.__setattr__(self, "codes", tuple(int(c) for c in self.codes))
        if self.kind == NON_TEXTURED and len(self.codes) != 1:
            raise ValueError("non-textured blocks carry exactly one mean code")
        if any(c < 0 for c in self.codes):
            raise ValueError("codes must be unsigned")

    def validate(self, header: BitstreamHeader) -> None:
        """Check code counts and bit widths against a header; raises on violation."""
        k = header.kernel_count
        if self.kind == TEXTURED:
            if len(self.codes) != 3 * k:
                raise MalformedStreamError(
                    f"textured block needs {3 * k} codes, got {len(self.codes)}"
                )
            widths = [header.center_bits] * 2 * k + [header.expert_bits] * k
        else:
            widths = [QuantSpec().mean_bits]
        for code, bits in zip(self.codes, widths):
            if code >= 1 << bits:
                raise MalformedStreamError(f"code {code} exceeds {bits} bits")


class BitWriter:
    """Accumulates MSB-first codes into a byte string."""

    def __init__(self):
        self._acc = 0
        self._nbits = 0

    def write(self, value: int, bits: int) -> None:
        if not 0 <= value < 1 << bits:
            raise ValueError(f"value {value} does not fit in {bits} bits")
        self._acc = (self._acc << bits) | value
        self._nbits += bits

    def getvalue(self) -> bytes:
        pad = (-self._nbits) % 8
        acc = self._acc << pad
        return acc.to_bytes((self._nbits + pad) // 8, "big")

    @property
    def bit_length(self) -> int:
        return self._nbits


class BitReader:
    """Reads MSB-first codes back out of a byte string."""

    def __init__(self, data: bytes):
        self._data = data
        self._pos = 0  # bit cursor

    def read(self, bits: int) -> int:
        end = self._pos + bits
        if end > len(self._data) * 8:
            raise TruncatedStreamError("bit payload ends early")
        value = 0
        pos = self._pos
        while bits > 0:
            byte = self._data[pos // 8]
            offset = pos % 8
            take = min(8 - offset, bits)
            chunk = (byte >> (8 - offset - take)) & ((1 << take) - 1)
            value = (value << take) | chunk
            pos += take
            bits -= take
        self._pos = pos
        return value


def payload_bits(header: BitstreamHeader, blocks) -> int:
    """Closed-form payload size in bits (header bytes excluded)."""
    spec = header.quant_spec
    total = 0
    for block in blocks:
        if block.kind == TEXTURED:
            total += spec.textured_bits(header.kernel_count)
        else:
            total += spec.non_textured_bits()
    return total


def rate_bpp(header: BitstreamHeader, blocks) -> float:
    """Payload bits per source pixel; the header is excluded by convention."""
    return payload_bits(header, blocks) / (header.width * header.height)


def serialize(header: BitstreamHeader, blocks) -> bytes:
    """Pack header and blocks; blocks must match the header's grid."""
    blocks = list(blocks)
    if len(blocks) != header.block_count:
        raise ValueError(
            f"header implies {header.block_count} blocks, got {len(blocks)}"
        )
    writer = BitWriter()
    for block in blocks:
        block.validate(header)
        if block.kind == TEXTURED:
            writer.write(1, 1)
            k = header.kernel_count
            for code in block.codes[: 2 * k]:
                writer.write(code, header.center_bits)
            for code in block.codes[2 * k :]:
                writer.write(code, header.expert_bits)
        else:
            writer.write(0, 1)
            writer.write(block.codes[0], QuantSpec().mean_bits)
    head = _HEADER.pack(
        MAGIC,
        VERSION,
        header.width,
        header.height,
        header.block_size,
        header.kernel_count,
        header.bandwidth,
        (header.center_bits << 4) | header.expert_bits,
    )
    return head + writer.getvalue()


def deserialize(data: bytes) -> tuple[BitstreamHeader, list[CodedBlock]]:
    """Inverse of serialize; raises a distinct error per failure mode."""
    if len(data) < _HEADER.size:
        raise TruncatedStreamError("stream shorter than header")
    magic, version, width, height, block_size, kernel_count, bandwidth, bits = (
        _HEADER.unpack_from(data)
    )
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r}")
    if version != VERSION:
        raise UnsupportedVersionError(f"unsupported version {version}")
    try:
        header = BitstreamHeader(
            width=width,
            height=height,
            block_size=block_size,
            kernel_count=kernel_count,
            bandwidth=float(bandwidth),
            center_bits=bits >> 4,
            expert_bits=bits & 0xF,
        )
    except ValueError as exc:
        raise MalformedStreamError(str(exc)) from None
    reader = BitReader(data[_HEADER.size :])
    blocks = []
    k = header.kernel_count
    for _ in range(header.block_count):
        if reader.read(1):
            codes = [reader.read(header.center_bits) for _ in range(2 * k)]
            codes += [reader.read(header.expert_bits) for _ in range(k)]
            blocks.append(CodedBlock(kind=TEXTURED, codes=tuple(codes)))
        else:
            blocks.append(CodedBlock(kind=NON_TEXTURED, codes=(reader.read(QuantSpec().mean_bits),)))
    return header, blocks
