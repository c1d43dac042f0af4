"""Luma-plane ingestion: Y4M, headerless I420, and synthetic sequences.

Every plane handed to the rest of the package is 8-bit and padded to a
multiple of 8 in both dimensions by edge replication.  Chroma is parsed
(so that frame boundaries are found) and then discarded.
"""

from __future__ import annotations

import io
import os
import re
from dataclasses import dataclass, field
from typing import BinaryIO

import numpy as np

BIT_DEPTH = 8
MAX_VALUE = (1 << BIT_DEPTH) - 1
BLOCK = 8

Y4M_SIGNATURE = b"YUV4MPEG2"
SYNTH_PRNG = "numpy.random.Philox"

_Y4M_LUMA_ONLY = {"mono"}
_Y4M_420 = {"420", "420jpeg", "420paldv", "420mpeg2"}


class PixelIOError(ValueError):
    """Raised for malformed or truncated video input."""


def _readonly(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class FramePlane:
    """One 8-bit luma plane, stored as a (height, width) uint8 array."""

    samples: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.samples)
        if s.ndim != 2:
            raise ValueError(f"expected a 2-D plane, got shape {s.shape}")
        h, w = s.shape
        if h == 0 or w == 0 or h % BLOCK or w % BLOCK:
            raise ValueError(f"plane {w}x{h} is not a positive multiple of {BLOCK}")
        if s.dtype != np.uint8:
            if s.size and (s.min() < 0 or s.max() > MAX_VALUE):
                raise ValueError("sample outside the 8-bit range")
            s = s.astype(np.uint8)
        elif s.flags.writeable:
            s = s.copy()
        object.__setattr__(self, "samples", _readonly(s))

    @property
    def width(self) -> int:
        return self.samples.shape[1]

    @property
    def height(self) -> int:
        return self.samples.shape[0]

    @property
    def bit_depth(self) -> int:
        return BIT_DEPTH

    @property
    def n(self) -> int:
        return self.samples.size

    def equals(self, other: "FramePlane") -> bool:
        return np.array_equal(self.samples, other.samples)


@dataclass(frozen=True)
class VideoSequence:
    frames: tuple[FramePlane, ...]
    label: str = ""
    # geometry before padding; None when the frames were never padded
    source_size: tuple[int, int] | None = field(default=None)

    def __post_init__(self):
        frames = tuple(self.frames)
        if frames:
            shape = frames[0].samples.shape
            if any(f.samples.shape != shape for f in frames):
                raise ValueError("frames in a sequence must share one geometry")
        object.__setattr__(self, "frames", frames)

    def __len__(self) -> int:
        return len(self.frames)

    def __iter__(self):
        return iter(self.frames)

    def __getitem__(self, i):
        if isinstance(i, slice):
            return VideoSequence(self.frames[i], self.label, self.source_size)
        return self.frames[i]

    @property
    def width(self) -> int:
        return self.frames[0].width if self.frames else 0

    @property
    def height(self) -> int:
        return self.frames[0].height if self.frames else 0


def pad_plane(luma: np.ndarray) -> np.ndarray:
    """Pad a 2-D plane to multiples of 8 by replicating the last row/column."""
    h, w = luma.shape
    ph = -h % BLOCK
    pw = -w % BLOCK
    if ph == 0 and pw == 0:
        return luma
    return np.pad(luma, ((0, ph), (0, pw)), mode="edge")


# --------------------------------------------------------------------------
# Y4M

def _parse_y4m_header(line: bytes) -> dict:
    tokens = line.split()
    if not tokens or tokens[0] != Y4M_SIGNATURE:
        raise PixelIOError("missing YUV4MPEG2 signature")
    params = {}
    for tok in tokens[1:]:
        key, val = chr(tok[0]), tok[1:].decode("ascii", "replace")
        params[key] = val
    try:
        width = int(params["W"])
        height = int(params["H"])
    except (KeyError, ValueError) as exc:
        raise PixelIOError("Y4M header lacks a valid W/H") from exc
    if width <= 0 or height <= 0:
        raise PixelIOError(f"bad Y4M geometry {width}x{height}")

    chroma = params.get("C", "420jpeg")
    if chroma in _Y4M_LUMA_ONLY:
        chroma_bytes = 0
    elif chroma in _Y4M_420:
        chroma_bytes = 2 * ((width + 1) // 2) * ((height + 1) // 2)
    elif re.fullmatch(r"(\d{3}p|mono)\d+", chroma):
        raise PixelIOError(f"unsupported bit depth (colourspace C{chroma})")
    else:
        raise PixelIOError(f"unsupported chroma format C{chroma}")
    return {"width": width, "height": height, "chroma_bytes": chroma_bytes}


def read_y4m(stream: BinaryIO | bytes, label: str = "") -> VideoSequence:
    """Read the luma planes of a Y4M stream in display order."""
    if isinstance(stream, (bytes, bytearray)):
        stream = io.BytesIO(stream)
    header = stream.readline()
    if not header.endswith(b"\n"):
        raise PixelIOError("Y4M header is not newline-terminated")
    geo = _parse_y4m_header(header[:-1])
    w, h = geo["width"], geo["height"]

    frames = []
    while True:
        marker = stream.readline()
        if not marker:
            break
        if not marker.startswith(b"FRAME") or not marker.endswith(b"\n"):
            raise PixelIOError(f"bad frame marker at frame {len(frames)}")
        luma = stream.read(w * h)
        chroma = stream.read(geo["chroma_bytes"])
        if len(luma) != w * h or len(chroma) != geo["chroma_bytes"]:
            raise PixelIOError(f"truncated frame payload at frame {len(frames)}")
        plane = np.frombuffer(luma, dtype=np.uint8).reshape(h, w)
        frames.append(FramePlane(pad_plane(plane)))
    return VideoSequence(tuple(frames), label, (w, h))


def write_y4m(seq: VideoSequence, stream: BinaryIO, fps: str = "30:1") -> None:
    """Write luma planes as a monochrome Y4M, cropped back to the source size."""
    w, h = seq.source_size or (seq.width, seq.height)
    stream.write(b"YUV4MPEG2 W%d H%d F%s Ip A1:1 Cmono\n" % (w, h, fps.encode()))
    for f in seq.frames:
        stream.write(b"FRAME\n")
        stream.write(np.ascontiguousarray(f.samples[:h, :w]).tobytes())


def read_raw_yuv(path: str | os.PathLike, width: int, height: int, frame_count: int,
                 start_frame: int = 0) -> VideoSequence:
    """Read luma from a headerless planar I420 file."""
    if width <= 0 or height <= 0 or frame_count < 0 or start_frame < 0:
        raise PixelIOError("raw YUV geometry must be positive")
    luma_bytes = width * height
    frame_bytes = luma_bytes + 2 * ((width + 1) // 2) * ((height + 1) // 2)
    size = os.path.getsize(path)
    needed = (start_frame + frame_count) * frame_bytes
    if size < needed:
        raise PixelIOError(
            f"{path}: {size} bytes is shorter than {start_frame + frame_count} "
            f"frames of {width}x{height} I420 ({needed} bytes)")
    frames = []
    with open(path, "rb") as fh:
        fh.seek(start_frame * frame_bytes)
        for _ in range(frame_count):
            buf = fh.read(frame_bytes)
            plane = np.frombuffer(buf[:luma_bytes], dtype=np.uint8).reshape(height, width)
            frames.append(FramePlane(pad_plane(plane)))
    return VideoSequence(tuple(frames), os.path.basename(os.fspath(path)), (width, height))


# --------------------------------------------------------------------------
# synthetic content

@dataclass(frozen=True)
class SynthSpec:
    width: int = 64
    height: int = 64
    frame_count: int = 9
    seed: int = 1
    motion_px_per_frame: int = 1
    noise_amplitude: int = 2

    def describe(self) -> str:
        return (f"synth w={self.width} h={self.height} n={self.frame_count} "
                f"seed={self.seed} motion={self.motion_px_per_frame} "
                f"noise={self.noise_amplitude} prng={SYNTH_PRNG}")


def _pattern(u: np.ndarray, y: np.ndarray, phase: np.ndarray) -> np.ndarray:
    # smooth gradient with a few oriented ripples; u is the content coordinate
    return (128.0
            + 0.35 * (u % 160 - 80)
            + 45.0 * np.sin(2 * np.pi * u / 29.0 + phase[0])
            + 30.0 * np.sin(2 * np.pi * y / 19.0 + u / 13.0 + phase[1])
            + 18.0 * np.cos(2 * np.pi * (u + y) / 11.0 + phase[2]))


def synth_sequence(spec: SynthSpec) -> VideoSequence:
    """Translating smooth content plus per-frame uniform noise.

    Frame t samples the content at column ``x - motion * t``, so with zero
    noise frame t+1 is frame t shifted right by ``motion`` pixels.  Noise is
    drawn from a Philox stream keyed by ``seed``, which makes output
    identical across platforms and runs.
    """
    if spec.width <= 0 or spec.height <= 0:
        raise ValueError("synthetic sequence needs non-zero dimensions")
    if spec.frame_count < 0 or spec.noise_amplitude < 0:
        raise ValueError("frame_count and noise_amplitude must be non-negative")
    rng = np.random.Generator(np.random.Philox(spec.seed))
    phase = rng.uniform(0.0, 2 * np.pi, size=3)
    ys, xs = np.mgrid[0:spec.height, 0:spec.width]
    frames = []
    for t in range(spec.frame_count):
        u = (xs - spec.motion_px_per_frame * t).astype(np.float64)
        plane = np.rint(_pattern(u, ys.astype(np.float64), phase))
        if spec.noise_amplitude:
            plane += rng.integers(-spec.noise_amplitude, spec.noise_amplitude,
                                  size=plane.shape, endpoint=True)
        plane = np.clip(plane, 0, MAX_VALUE).astype(np.uint8)
        frames.append(FramePlane(pad_plane(plane)))
    return VideoSequence(tuple(frames), spec.describe(), (spec.width, spec.height))


# (motion px/frame, noise amplitude) of the built-in synthetic corpus
SYNTH_CORPUS = ((1, 2), (2, 4), (0, 3))


def synthetic_corpus(first_seed: int = 1, frame_count: int = 9,
                     width: int = 64, height: int = 64) -> list[VideoSequence]:
    """The built-in corpus: one sequence per SYNTH_CORPUS entry, consecutive seeds."""
    return [synth_sequence(SynthSpec(width, height, frame_count, first_seed + i, m, a))
            for i, (m, a) in enumerate(SYNTH_CORPUS)]
