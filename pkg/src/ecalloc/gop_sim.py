"""Toy hierarchical-B codec used to measure decoder-side EC drift.

The encoder runs once without EC.  Decoding then replays the stream while
every reconstructed frame of level L is pushed through the embedded
compressor at that level's DRR before it enters the reference buffer; the
displayed frame is read back from the same (lossy) buffer.

Prediction is per 8x8 block: a single motion-compensated reference for P
frames, the rounded average of two for B frames.  Residuals are uniformly
quantised with step 2^((qp-4)/6).  There is no entropy coding.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Mapping, Sequence

import numpy as np

from . import ec_codec
from .analytic_model import psnr_from_mse
from .ec_codec import MAX_DRR, drr_fraction, plane_to_blocks
from .pixel_io import BLOCK, MAX_VALUE, FramePlane, VideoSequence

GOP_SIZE = 8
LEVELS = (0, 1, 2, 3)
REPORT_SCHEMA = "ecalloc.simulation/1"


class StreamError(ValueError):
    pass


@dataclass(frozen=True)
class GopStructure:
    gop_size: int
    level_of: Mapping[int, int]
    refs_of: Mapping[int, tuple[int, ...]]
    coding_order: tuple[int, ...]

    def level(self, poc: int) -> int:
        return self.level_of[poc % self.gop_size]


def build_hierarchical_gop() -> GopStructure:
    """Random-access GOP of 8 with three hierarchical B levels.

    Offsets are relative to the previous anchor.  Offset 8 (the next
    anchor) predicts from offset 0 alone when it is a P frame.
    """
    level_of = {0: 0, 8: 0, 4: 1, 2: 2, 6: 2, 1: 3, 3: 3, 5: 3, 7: 3}
    refs_of = {
        8: (0,),
        4: (0, 8),
        2: (0, 4), 6: (4, 8),
        1: (0, 2), 3: (2, 4), 5: (4, 6), 7: (6, 8),
    }
    coding_order = (8, 4, 2, 1, 3, 6, 5, 7)
    return GopStructure(GOP_SIZE, level_of, refs_of, coding_order)


GOP = build_hierarchical_gop()


@dataclass(frozen=True)
class CodecConfig:
    qp: int = 32
    search_range: int = 0
    intra_period: int = 32

    def __post_init__(self):
        if self.search_range < 0:
            raise ValueError("search_range must be non-negative")
        if self.intra_period <= 0 or self.intra_period % GOP_SIZE:
            raise ValueError(f"intra_period must be a positive multiple of {GOP_SIZE}")

    @property
    def quant_step(self) -> float:
        return 2.0 ** ((self.qp - 4) / 6.0)


@dataclass(frozen=True, eq=False)
class FrameRecord:
    poc: int
    frame_type: str
    refs: tuple[int, ...]
    # (blocks_y, blocks_x, len(refs), 2) integer (dy, dx) per block and reference
    motion: np.ndarray
    levels: np.ndarray


@dataclass(frozen=True, eq=False)
class EncodedStream:
    cfg: CodecConfig
    width: int
    height: int
    frame_count: int
    records: tuple[FrameRecord, ...]
    # encoder-side reconstruction, display order
    reconstruction: tuple[np.ndarray, ...]


def usable_frame_count(n: int) -> int:
    """Largest 8k+1 not above n: only whole GOPs are coded."""
    return 0 if n < 1 else (n - 1) // GOP_SIZE * GOP_SIZE + 1


def sequence_layout(frame_count: int, intra_period: int) -> list[tuple[int, str, tuple[int, ...]]]:
    """(poc, frame type, reference POCs) in coding order."""
    out = [(0, "I", ())]
    for base in range(0, frame_count - 1, GOP_SIZE):
        for off in GOP.coding_order:
            poc = base + off
            if off == GOP_SIZE:
                if poc % intra_period == 0:
                    out.append((poc, "I", ()))
                else:
                    out.append((poc, "P", (base,)))
            else:
                out.append((poc, "B", tuple(base + r for r in GOP.refs_of[off])))
    return out


def _shift(ref: np.ndarray, dy: int, dx: int) -> np.ndarray:
    """ref displaced so that out[y, x] = ref[y + dy, x + dx], edges replicated."""
    if dy == 0 and dx == 0:
        return ref
    r = max(abs(dy), abs(dx))
    padded = np.pad(ref, r, mode="edge")
    h, w = ref.shape
    return padded[r + dy:r + dy + h, r + dx:r + dx + w]


def _candidate_order(search_range: int) -> list[tuple[int, int]]:
    cands = [(dy, dx) for dy in range(-search_range, search_range + 1)
             for dx in range(-search_range, search_range + 1)]
    return sorted(cands, key=lambda c: (abs(c[0]) + abs(c[1]), c))


def motion_search(src: np.ndarray, ref: np.ndarray, search_range: int) -> np.ndarray:
    """Full-search SAD minimum per block; vectors keep the block inside the frame."""
    h, w = src.shape
    by, bx = h // BLOCK, w // BLOCK
    best = np.full(by * bx, np.iinfo(np.int64).max, dtype=np.int64)
    mv = np.zeros((by * bx, 2), dtype=np.int64)
    src_blocks = plane_to_blocks(src.astype(np.int64))
    ys = np.repeat(np.arange(by) * BLOCK, bx)
    xs = np.tile(np.arange(bx) * BLOCK, by)
    for dy, dx in _candidate_order(search_range):
        inside = ((ys + dy >= 0) & (ys + dy + BLOCK <= h)
                  & (xs + dx >= 0) & (xs + dx + BLOCK <= w))
        cand = plane_to_blocks(_shift(ref, dy, dx).astype(np.int64))
        sad = np.abs(src_blocks - cand).sum(axis=1)
        better = inside & (sad < best)
        best[better] = sad[better]
        mv[better] = (dy, dx)
    return mv.reshape(by, bx, 2)


def motion_compensate(ref: np.ndarray, mv: np.ndarray) -> np.ndarray:
    if not mv.any():
        return ref
    out = np.empty_like(ref)
    for j in range(mv.shape[0]):
        for i in range(mv.shape[1]):
            dy, dx = (int(v) for v in mv[j, i])
            y, x = j * BLOCK, i * BLOCK
            out[y:y + BLOCK, x:x + BLOCK] = ref[y + dy:y + dy + BLOCK, x + dx:x + dx + BLOCK]
    return out


def _predict(refs: Sequence[np.ndarray], motion: np.ndarray) -> np.ndarray:
    preds = [motion_compensate(r, motion[:, :, i]).astype(np.int64) for i, r in enumerate(refs)]
    if len(preds) == 1:
        return preds[0]
    return (preds[0] + preds[1] + 1) >> 1


def _reconstruct(pred: np.ndarray, levels: np.ndarray, step: float) -> np.ndarray:
    return np.clip(np.rint(pred + levels * step), 0, MAX_VALUE).astype(np.uint8)


def encode(seq: VideoSequence, cfg: CodecConfig = CodecConfig()) -> EncodedStream:
    n = usable_frame_count(len(seq))
    if n < GOP_SIZE + 1:
        raise StreamError(f"need at least {GOP_SIZE + 1} frames, got {len(seq)}")
    h, w = seq.height, seq.width
    step = cfg.quant_step
    recon: dict[int, np.ndarray] = {}
    records = []
    for poc, ftype, refs in sequence_layout(n, cfg.intra_period):
        src = seq[poc].samples.astype(np.int64)
        ref_planes = [recon[r] for r in refs]
        if ref_planes:
            motion = np.stack([motion_search(src, r, cfg.search_range) for r in ref_planes], axis=2)
            pred = _predict(ref_planes, motion)
        else:
            motion = np.zeros((h // BLOCK, w // BLOCK, 0, 2), dtype=np.int64)
            pred = np.zeros_like(src)
        levels = np.rint((src - pred) / step).astype(np.int32)
        recon[poc] = _reconstruct(pred, levels, step)
        records.append(FrameRecord(poc, ftype, refs, motion, levels))
    return EncodedStream(cfg, w, h, n, tuple(records), tuple(recon[p] for p in range(n)))


# --------------------------------------------------------------------------
# EC policies

@dataclass(frozen=True)
class EcPolicy:
    """Fixed DRR per B level; level0 is always lossless."""

    drr_of_level: tuple[Fraction, Fraction, Fraction] = (Fraction(0), Fraction(0), Fraction(0))

    def __post_init__(self):
        vals = tuple(drr_fraction(d) for d in self.drr_of_level)
        if len(vals) != 3:
            raise ValueError("need one DRR for each of levels 1, 2, 3")
        if any(not 0 <= d <= MAX_DRR for d in vals):
            raise ValueError(f"level DRR outside [0, {float(MAX_DRR)}]")
        object.__setattr__(self, "drr_of_level", vals)

    def apply(self, plane: np.ndarray, level: int):
        if level == 0 or self.drr_of_level[level - 1] == 0:
            return plane, None
        out, stats = ec_codec.compress_plane(plane, self.drr_of_level[level - 1])
        return out, stats

    def describe(self) -> dict:
        return {"kind": "drr", "levels": [str(d) for d in self.drr_of_level]}


@dataclass(frozen=True)
class TruncationPolicy:
    """Plain M-bit LSB truncation per B level, bypassing the DRR search."""

    m_of_level: tuple[int, int, int] = (0, 0, 0)

    def apply(self, plane: np.ndarray, level: int):
        if level == 0 or self.m_of_level[level - 1] == 0:
            return plane, None
        return ec_codec.truncate_lsb(plane, self.m_of_level[level - 1]).astype(np.uint8), None

    def describe(self) -> dict:
        return {"kind": "truncate", "levels": list(self.m_of_level)}


NO_EC = EcPolicy()


@dataclass(frozen=True, eq=False)
class DecodedSequence:
    planes: tuple[np.ndarray, ...]
    # mean achieved DRR per frame, None where EC was bypassed
    achieved_drr: tuple[float | None, ...]

    def as_sequence(self, label: str = "") -> VideoSequence:
        return VideoSequence(tuple(FramePlane(p) for p in self.planes), label)


def decode(stream: EncodedStream, policy=NO_EC) -> DecodedSequence:
    layout = sequence_layout(stream.frame_count, stream.cfg.intra_period)
    if len(layout) != len(stream.records):
        raise StreamError("stream does not match the GOP layout")
    step = stream.cfg.quant_step
    buffer: dict[int, np.ndarray] = {}
    drr: dict[int, float | None] = {}
    for (poc, ftype, refs), rec in zip(layout, stream.records):
        if (rec.poc, rec.frame_type, rec.refs) != (poc, ftype, refs):
            raise StreamError(f"unexpected record for POC {poc}")
        if refs:
            pred = _predict([buffer[r] for r in refs], rec.motion)
        else:
            pred = np.zeros(rec.levels.shape, dtype=np.int64)
        plane = _reconstruct(pred, rec.levels, step)
        plane, stats = policy.apply(plane, GOP.level(poc))
        buffer[poc] = plane
        drr[poc] = None if stats is None else stats.mean_achieved_drr
    n = stream.frame_count
    return DecodedSequence(tuple(buffer[p] for p in range(n)), tuple(drr[p] for p in range(n)))


# --------------------------------------------------------------------------
# measurement

def plane_mse(a: np.ndarray, b: np.ndarray) -> float:
    d = a.astype(np.float64) - b.astype(np.float64)
    return float(np.mean(d * d))


def delta_psnr(mse_wo: float, mse_w: float) -> float:
    if mse_w == mse_wo:
        return 0.0
    return psnr_from_mse(mse_wo) - psnr_from_mse(mse_w)


@dataclass(frozen=True)
class SimulationReport:
    label: str
    qp: int
    policy: dict
    pocs: tuple[int, ...]
    levels: tuple[int, ...]
    mse_wo: tuple[float, ...]
    mse_w: tuple[float, ...]
    psnr_wo: tuple[float, ...]
    psnr_w: tuple[float, ...]
    delta_psnr: tuple[float, ...]
    achieved_drr: tuple[float | None, ...]
    level_mean_delta_psnr: dict[int, float] = field(default_factory=dict)

    @property
    def mean_delta_psnr(self) -> float:
        return float(np.mean(self.delta_psnr))

    @property
    def sd_psnr_w(self) -> float:
        return float(np.std(self.psnr_w))

    @property
    def sd_psnr_wo(self) -> float:
        return float(np.std(self.psnr_wo))

    def frame_rows(self) -> list[dict]:
        return [
            {"poc": p, "level": lv, "psnr_wo": a, "psnr_w": b, "delta_psnr": d,
             "mse_wo": ma, "mse_w": mb, "achieved_drr": "" if r is None else r}
            for p, lv, a, b, d, ma, mb, r in zip(
                self.pocs, self.levels, self.psnr_wo, self.psnr_w, self.delta_psnr,
                self.mse_wo, self.mse_w, self.achieved_drr)
        ]

    def to_dict(self) -> dict:
        def fin(v):
            return None if v is None or math.isinf(v) else v
        return {
            "schema": REPORT_SCHEMA,
            "label": self.label,
            "qp": self.qp,
            "policy": self.policy,
            "mean_delta_psnr": self.mean_delta_psnr,
            "sd_psnr_w": self.sd_psnr_w,
            "sd_psnr_wo": self.sd_psnr_wo,
            "level_mean_delta_psnr": {str(k): v for k, v in self.level_mean_delta_psnr.items()},
            "frames": [{k: (fin(v) if isinstance(v, float) else v) for k, v in r.items()}
                       for r in self.frame_rows()],
        }


def _crop(plane: np.ndarray, size) -> np.ndarray:
    if size is None:
        return plane
    w, h = size
    return plane[:h, :w]


def simulate(seq: VideoSequence, cfg: CodecConfig = CodecConfig(), policy=NO_EC,
             stream: EncodedStream | None = None) -> SimulationReport:
    """Encode once, decode with and without EC, score both against the source."""
    if stream is None:
        stream = encode(seq, cfg)
    plain = decode(stream, NO_EC)
    lossy = plain if policy == NO_EC else decode(stream, policy)
    pocs = tuple(range(stream.frame_count))
    size = seq.source_size
    mse_wo, mse_w = [], []
    for p in pocs:
        src = _crop(seq[p].samples, size)
        mse_wo.append(plane_mse(_crop(plain.planes[p], size), src))
        mse_w.append(plane_mse(_crop(lossy.planes[p], size), src))
    levels = tuple(GOP.level(p) for p in pocs)
    deltas = tuple(delta_psnr(a, b) for a, b in zip(mse_wo, mse_w))
    per_level = {}
    for lv in LEVELS:
        vals = [d for d, l in zip(deltas, levels) if l == lv]
        per_level[lv] = float(np.mean(vals)) if vals else 0.0
    return SimulationReport(
        label=seq.label,
        qp=stream.cfg.qp,
        policy=policy.describe(),
        pocs=pocs,
        levels=levels,
        mse_wo=tuple(mse_wo),
        mse_w=tuple(mse_w),
        psnr_wo=tuple(psnr_from_mse(m) for m in mse_wo),
        psnr_w=tuple(psnr_from_mse(m) for m in mse_w),
        delta_psnr=deltas,
        achieved_drr=lossy.achieved_drr,
        level_mean_delta_psnr=per_level,
    )
