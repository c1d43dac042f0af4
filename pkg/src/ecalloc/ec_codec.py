"""Fixed-DRR lossy embedded compression of 8x8 luma blocks.

Each block is scanned boustrophedon (row 0 left to right, row 1 right to
left, ...), DPCM-coded along the scan and the 63 residuals are packed in
nine groups of seven with significant bit truncation (SBT): a 4-bit width
header k followed by seven k-bit two's-complement fields.  When the lossless
size misses the target data reduction ratio, the M least significant bits
of every sample are dropped and the block is re-coded, for M = 1, 2, ... 7.

Block layout (little-endian bit order, see :mod:`ecalloc.bitio`)::

    M        3 bits
    anchor   8 - M bits   first scanned sample, already shifted right by M
    9 x (k: 4 bits, 7 x k-bit residuals)
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from typing import Sequence

import numpy as np

from .bitio import BitReader, BitWriter
from .pixel_io import BIT_DEPTH, BLOCK, MAX_VALUE, FramePlane

BLOCK_SAMPLES = BLOCK * BLOCK
GROUP_SIZE = 7
GROUP_COUNT = (BLOCK_SAMPLES - 1) // GROUP_SIZE
M_HEADER_BITS = 3
K_HEADER_BITS = 4
MAX_M = 7
MAX_K = 9
ORIGINAL_BITS = BLOCK_SAMPLES * BIT_DEPTH
MAX_DRR = Fraction(7, 10)


def _snake_scan() -> np.ndarray:
    order = []
    for r in range(BLOCK):
        cols = range(BLOCK) if r % 2 == 0 else range(BLOCK - 1, -1, -1)
        order.extend(r * BLOCK + c for c in cols)
    return np.array(order, dtype=np.intp)


SCAN = _snake_scan()
UNSCAN = np.argsort(SCAN)


class CorruptBlockError(ValueError):
    pass


def drr_fraction(value) -> Fraction:
    """Exact rational form of a DRR given as float, str, int or Fraction."""
    if isinstance(value, Fraction):
        return value
    if isinstance(value, float):
        return Fraction(repr(value))
    return Fraction(value)


def bit_budget(target) -> int:
    """Largest block size in bits whose DRR still meets ``target``."""
    t = drr_fraction(target)
    if not 0 <= t <= MAX_DRR:
        raise ValueError(f"target DRR {float(t)} outside [0, {float(MAX_DRR)}]")
    return int(ORIGINAL_BITS * (1 - t))


def signed_width(r: int) -> int:
    """Smallest k with r in [-2^(k-1), 2^(k-1)-1]; 0 for r == 0."""
    if r == 0:
        return 0
    return (r if r > 0 else ~r).bit_length() + 1


# widths for residuals in [-256, 255], indexed by r + 256
_WIDTH_LUT = np.array([signed_width(r) for r in range(-256, 256)], dtype=np.int64)


def _as_block(block) -> np.ndarray:
    b = np.asarray(block, dtype=np.int64).reshape(-1)
    if b.size != BLOCK_SAMPLES:
        raise ValueError(f"block must have {BLOCK_SAMPLES} samples, got {b.size}")
    return b


# --------------------------------------------------------------------------
# scalar reference path

def dpcm_forward(block) -> tuple[int, list[int]]:
    """Anchor and 63 scan-order differences of an 8x8 block."""
    s = _as_block(block)[SCAN]
    return int(s[0]), np.diff(s).tolist()


def dpcm_inverse(anchor: int, residuals: Sequence[int], max_value: int = MAX_VALUE) -> np.ndarray:
    if len(residuals) != BLOCK_SAMPLES - 1:
        raise ValueError(f"expected {BLOCK_SAMPLES - 1} residuals, got {len(residuals)}")
    scanned = np.cumsum(np.concatenate(([anchor], residuals))).astype(np.int64)
    if scanned.min() < 0 or scanned.max() > max_value:
        raise CorruptBlockError("reconstructed sample outside the valid range")
    return scanned[UNSCAN].reshape(BLOCK, BLOCK)


@dataclass(frozen=True)
class SbtGroup:
    k: int
    residuals: tuple[int, ...]

    def __post_init__(self):
        if len(self.residuals) != GROUP_SIZE:
            raise ValueError(f"an SBT group holds {GROUP_SIZE} residuals")
        if not 0 <= self.k <= MAX_K:
            raise ValueError(f"group width {self.k} outside 0..{MAX_K}")
        if max(signed_width(r) for r in self.residuals) > self.k:
            raise ValueError(f"residuals {self.residuals} do not fit in {self.k} bits")

    @property
    def size_bits(self) -> int:
        return K_HEADER_BITS + GROUP_SIZE * self.k


def sbt_encode(residuals: Sequence[int]) -> tuple[tuple[SbtGroup, ...], int]:
    r = [int(v) for v in residuals]
    if len(r) != GROUP_SIZE * GROUP_COUNT:
        raise ValueError(f"expected {GROUP_SIZE * GROUP_COUNT} residuals, got {len(r)}")
    if any(not -256 <= v <= 255 for v in r):
        raise ValueError("residual outside [-256, 255]")
    groups = []
    for g in range(GROUP_COUNT):
        chunk = tuple(r[g * GROUP_SIZE:(g + 1) * GROUP_SIZE])
        groups.append(SbtGroup(max(signed_width(v) for v in chunk), chunk))
    return tuple(groups), sum(g.size_bits for g in groups)


def sbt_decode(groups: Sequence[SbtGroup]) -> list[int]:
    return [v for g in groups for v in g.residuals]


def truncate_lsb(block, m: int) -> np.ndarray:
    """Drop the m LSBs and reconstruct at the middle of the quantisation bin."""
    if not 0 <= m <= MAX_M:
        raise ValueError(f"truncation level {m} outside 0..{MAX_M}")
    b = np.asarray(block, dtype=np.int64)
    if m == 0:
        return b.copy()
    return np.clip(((b >> m) << m) + (1 << (m - 1)), 0, MAX_VALUE)


@dataclass(frozen=True)
class CompressedBlock:
    m: int
    anchor: int
    groups: tuple[SbtGroup, ...]

    @property
    def size_bits(self) -> int:
        return (M_HEADER_BITS + BIT_DEPTH - self.m
                + sum(g.size_bits for g in self.groups))

    @property
    def drr(self) -> Fraction:
        return Fraction(ORIGINAL_BITS - self.size_bits, ORIGINAL_BITS)

    def write(self, w: BitWriter) -> None:
        w.write(self.m, M_HEADER_BITS)
        w.write(self.anchor, BIT_DEPTH - self.m)
        for g in self.groups:
            w.write(g.k, K_HEADER_BITS)
            for r in g.residuals:
                if g.k:
                    w.write_signed(r, g.k)

    @classmethod
    def read(cls, rd: BitReader) -> "CompressedBlock":
        m = rd.read(M_HEADER_BITS)
        anchor = rd.read(BIT_DEPTH - m)
        groups = []
        for _ in range(GROUP_COUNT):
            k = rd.read(K_HEADER_BITS)
            if k > MAX_K:
                raise CorruptBlockError(f"group width {k} exceeds {MAX_K}")
            vals = tuple(rd.read_signed(k) if k else 0 for _ in range(GROUP_SIZE))
            groups.append(SbtGroup(k, vals))
        return cls(m, anchor, tuple(groups))

    def decode(self) -> np.ndarray:
        """Reconstructed 8x8 block (truncated samples lifted to bin midpoints)."""
        shifted = dpcm_inverse(self.anchor, sbt_decode(self.groups),
                               max_value=MAX_VALUE >> self.m)
        if self.m == 0:
            return shifted
        return (shifted << self.m) + (1 << (self.m - 1))


def encode_block(block, m: int) -> CompressedBlock:
    """Code one block at a fixed truncation level."""
    b = _as_block(block)
    if b.min() < 0 or b.max() > MAX_VALUE:
        raise ValueError("block sample outside the 8-bit range")
    anchor, residuals = dpcm_forward(b >> m)
    groups, _ = sbt_encode(residuals)
    return CompressedBlock(m, anchor, groups)


@dataclass(frozen=True)
class BlockResult:
    compressed: CompressedBlock
    reconstructed: np.ndarray
    achieved_drr: Fraction
    shortfall: bool


def compress_block(block, target) -> BlockResult:
    """Smallest truncation level whose coded size meets the target DRR."""
    budget = bit_budget(target)
    if budget == ORIGINAL_BITS:
        # target 0 is the lossless mode; a block that SBT expands past the
        # raw size keeps M=0 but is flagged, since its DRR is negative
        cb = encode_block(block, 0)
        return BlockResult(cb, cb.decode(), cb.drr, cb.size_bits > budget)
    for m in range(MAX_M + 1):
        cb = encode_block(block, m)
        if cb.size_bits <= budget:
            break
    return BlockResult(cb, cb.decode(), cb.drr, cb.size_bits > budget)


def pack_blocks(blocks: Sequence[CompressedBlock]) -> bytes:
    w = BitWriter()
    for cb in blocks:
        cb.write(w)
    return w.getvalue()


def unpack_blocks(data: bytes, count: int) -> list[CompressedBlock]:
    rd = BitReader(data)
    return [CompressedBlock.read(rd) for _ in range(count)]


# --------------------------------------------------------------------------
# vectorised frame path

@dataclass(frozen=True)
class FrameStats:
    block_count: int
    mean_achieved_drr: float
    m_histogram: tuple[int, ...]
    shortfall_count: int


def plane_to_blocks(plane: np.ndarray) -> np.ndarray:
    """(H, W) plane -> (H/8 * W/8, 64) raster-order blocks."""
    h, w = plane.shape
    return (plane.reshape(h // BLOCK, BLOCK, w // BLOCK, BLOCK)
            .swapaxes(1, 2).reshape(-1, BLOCK_SAMPLES))


def blocks_to_plane(blocks: np.ndarray, h: int, w: int) -> np.ndarray:
    return (blocks.reshape(h // BLOCK, w // BLOCK, BLOCK, BLOCK)
            .swapaxes(1, 2).reshape(h, w))


def block_sizes(blocks: np.ndarray, m: int) -> np.ndarray:
    """Coded size in bits of every block at truncation level m."""
    scanned = (blocks[:, SCAN].astype(np.int64)) >> m
    res = np.diff(scanned, axis=1)
    k = _WIDTH_LUT[res + 256].reshape(-1, GROUP_COUNT, GROUP_SIZE).max(axis=2)
    return (M_HEADER_BITS + BIT_DEPTH - m + GROUP_COUNT * K_HEADER_BITS
            + GROUP_SIZE * k.sum(axis=1))


def compress_plane(plane: np.ndarray, target) -> tuple[np.ndarray, FrameStats]:
    budget = bit_budget(target)
    lossless = budget == ORIGINAL_BITS
    h, w = plane.shape
    blocks = plane_to_blocks(np.asarray(plane, dtype=np.int64))
    n = blocks.shape[0]
    chosen_m = np.full(n, MAX_M, dtype=np.int64)
    chosen_size = np.zeros(n, dtype=np.int64)
    pending = np.ones(n, dtype=bool)
    for m in range(MAX_M + 1):
        sizes = block_sizes(blocks[pending], m)
        idx = np.flatnonzero(pending)
        chosen_size[idx] = sizes
        ok = np.ones_like(pending[idx]) if lossless else sizes <= budget
        chosen_m[idx[ok]] = m
        pending[idx[ok]] = False
        if not pending.any():
            break
    shortfall = int(np.count_nonzero(chosen_size > budget))

    mm = chosen_m[:, None]
    half = np.where(mm > 0, 1 << np.maximum(mm - 1, 0), 0)
    recon = ((blocks >> mm) << mm) + half
    out = blocks_to_plane(recon, h, w).astype(np.uint8)

    stats = FrameStats(
        block_count=n,
        mean_achieved_drr=float(np.mean(ORIGINAL_BITS - chosen_size) / ORIGINAL_BITS),
        m_histogram=tuple(int(c) for c in np.bincount(chosen_m, minlength=MAX_M + 1)),
        shortfall_count=shortfall,
    )
    return out, stats


def compress_frame(frame: FramePlane, target) -> tuple[FramePlane, FrameStats]:
    """Apply :func:`compress_block` to every 8x8 block of a frame."""
    plane, stats = compress_plane(frame.samples, target)
    if stats.m_histogram[0] == stats.block_count:
        return frame, stats
    return FramePlane(plane), stats
