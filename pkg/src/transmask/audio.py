"""Mono RIFF/WAVE reading and writing (16-bit PCM and 32-bit IEEE float)."""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

DEFAULT_SAMPLE_RATE = 8000

WAVE_FORMAT_PCM = 0x0001
WAVE_FORMAT_IEEE_FLOAT = 0x0003
WAVE_FORMAT_EXTENSIBLE = 0xFFFE


class WavParseError(ValueError):
    """Malformed RIFF/WAVE structure."""

    def __init__(self, message, offset):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class UnsupportedFormatError(ValueError):
    """Well-formed file in a codec this reader does not handle."""


@dataclass
class AudioBuffer:
    samples: np.ndarray
    sample_rate: int = DEFAULT_SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float32).reshape(-1)
        if self.samples.size < 1:
            raise ValueError("audio buffer needs at least one sample")
        if self.sample_rate <= 0:
            raise ValueError(f"sample rate must be positive, got {self.sample_rate}")

    def __len__(self):
        return self.samples.size

    @property
    def duration(self):
        return self.samples.size / self.sample_rate


def repeat(buffer, k):
    """Tile the samples ``k`` times; used to stretch benchmark inputs."""
    if k < 1:
        raise ValueError(f"repeat count must be positive, got {k}")
    return AudioBuffer(np.tile(buffer.samples, k), buffer.sample_rate)


def _chunks(blob):
    """Yield (chunk_id, payload_offset, size) for each sub-chunk after the RIFF header."""
    pos = 12
    while pos + 8 <= len(blob):
        cid, size = struct.unpack_from("<4sI", blob, pos)
        if pos + 8 + size > len(blob):
            raise WavParseError(f"chunk {cid!r} declares {size} bytes past end of file", pos)
        yield cid, pos + 8, size
        pos += 8 + size + (size & 1)


def read_wav(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 12:
        raise WavParseError("file too short for a RIFF header", len(blob))
    riff, _, wave = struct.unpack_from("<4sI4s", blob, 0)
    if riff != b"RIFF":
        raise WavParseError(f"expected 'RIFF', found {riff!r}", 0)
    if wave != b"WAVE":
        raise WavParseError(f"expected 'WAVE', found {wave!r}", 8)

    fmt = data = None
    for cid, offset, size in _chunks(blob):
        if cid == b"fmt ":
            if size < 16:
                raise WavParseError(f"fmt chunk of {size} bytes is too short", offset - 8)
            fmt = struct.unpack_from("<HHIIHH", blob, offset), offset, size
        elif cid == b"data":
            data = offset, size
    if fmt is None:
        raise WavParseError("no 'fmt ' chunk", 12)
    if data is None:
        raise WavParseError("no 'data' chunk", 12)

    (tag, channels, rate, _, block_align, bits), fmt_offset, fmt_size = fmt
    if tag == WAVE_FORMAT_EXTENSIBLE and fmt_size >= 40:
        tag = struct.unpack_from("<H", blob, fmt_offset + 24)[0]
    if channels < 1:
        raise WavParseError("channel count is zero", fmt_offset + 2)
    if rate == 0:
        raise WavParseError("sample rate is zero", fmt_offset + 4)
    if tag == WAVE_FORMAT_PCM and bits == 16:
        dtype, scale = np.dtype("<i2"), 1.0 / 32768.0
    elif tag == WAVE_FORMAT_IEEE_FLOAT and bits == 32:
        dtype, scale = np.dtype("<f4"), 1.0
    else:
        raise UnsupportedFormatError(f"unsupported WAVE encoding: format tag {tag:#06x}, {bits} bits")
    if block_align != channels * dtype.itemsize:
        raise WavParseError(f"block align {block_align} inconsistent with {channels}x{bits} bits",
                            fmt_offset + 12)

    offset, size = data
    n_frames = size // block_align
    if n_frames < 1:
        raise WavParseError("data chunk holds no complete frame", offset - 8)
    raw = np.frombuffer(blob, dtype=dtype, count=n_frames * channels, offset=offset)
    frames = raw.reshape(n_frames, channels).astype(np.float64) * scale
    mono = frames.mean(axis=1) if channels > 1 else frames[:, 0]
    return AudioBuffer(mono.astype(np.float32), int(rate))


def write_wav(buffer, path, encoding="float32"):
    """Write a mono file; samples are clamped to [-1, 1]."""
    samples = np.clip(buffer.samples, -1.0, 1.0)
    if encoding == "pcm16":
        payload = np.clip(np.round(samples * 32768.0), -32768, 32767).astype("<i2").tobytes()
        tag, bits = WAVE_FORMAT_PCM, 16
    elif encoding == "float32":
        payload = samples.astype("<f4").tobytes()
        tag, bits = WAVE_FORMAT_IEEE_FLOAT, 32
    else:
        raise ValueError(f"unknown encoding {encoding!r}; expected 'pcm16' or 'float32'")
    block_align = bits // 8
    rate = int(buffer.sample_rate)
    header = struct.pack("<4sI4s", b"RIFF", 4 + (8 + 16) + (8 + len(payload)), b"WAVE")
    header += struct.pack("<4sIHHIIHH", b"fmt ", 16, tag, 1, rate, rate * block_align, block_align, bits)
    header += struct.pack("<4sI", b"data", len(payload))
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(payload)
        if len(payload) & 1:
            fh.write(b"\x00")
