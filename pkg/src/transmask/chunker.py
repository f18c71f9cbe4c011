"""50%-overlap segmentation of a frame sequence and its exact inverse.

Chunk ``s`` covers padded frames ``[s*P, s*P + 2P)``. The sequence is padded at
the tail only, to the smallest multiple of ``P`` that is at least ``2P``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .frontend import EncodedRep
from .tensor import ContractError, Tensor, concatenate, pad


@dataclass
class ChunkedRep:
    chunks: Tensor  # [D, 2P, S]
    hop: int
    original_length: int
    # encoder bookkeeping carried through so overlap_add can rebuild an EncodedRep
    kernel: int = 0
    stride: int = 0
    n_samples: int = 0

    @property
    def n_chunks(self):
        return self.chunks.shape[2]

    @property
    def chunk_length(self):
        return self.chunks.shape[1]

    def with_chunks(self, chunks):
        return ChunkedRep(chunks, self.hop, self.original_length, self.kernel, self.stride, self.n_samples)


def padded_frames(length, hop):
    """Padded length L' = smallest multiple of hop with L' >= max(length, 2*hop)."""
    if hop < 1:
        raise ValueError(f"hop must be positive, got {hop}")
    return max(-(-length // hop) * hop, 2 * hop)


def chunk_count(length, hop):
    return padded_frames(length, hop) // hop - 1


def coverage(n_chunks, hop):
    """How many chunks contain each padded frame: 1 for the first and last hop, 2 elsewhere."""
    counts = np.zeros((n_chunks + 1) * hop, dtype=np.int64)
    for s in range(n_chunks):
        counts[s * hop:s * hop + 2 * hop] += 1
    return counts


def segment_tensor(x, hop):
    """Split ``x`` [D, L] into chunks [D, 2P, S]."""
    d, length = x.shape
    total = padded_frames(length, hop)
    n_chunks = total // hop - 1
    if total > length:
        x = pad(x, ((0, 0), (0, total - length)))
    first = x[:, :n_chunks * hop].reshape(d, n_chunks, hop)
    second = x[:, hop:].reshape(d, n_chunks, hop)
    return concatenate([first, second], axis=2).transpose(0, 2, 1)


def overlap_add_tensor(chunks, hop, original_length):
    """Average the chunk contributions at each frame and drop the tail padding."""
    d, width, n_chunks = chunks.shape
    if width != 2 * hop or n_chunks < 1 or padded_frames(original_length, hop) != (n_chunks + 1) * hop:
        raise ContractError(f"chunk geometry {chunks.shape} inconsistent with hop={hop}, "
                            f"original_length={original_length}")
    by_chunk = chunks.transpose(0, 2, 1)  # [D, S, 2P]
    first = by_chunk[:, :, :hop].reshape(d, n_chunks * hop)
    second = by_chunk[:, :, hop:].reshape(d, n_chunks * hop)
    summed = pad(first, ((0, 0), (0, hop))) + pad(second, ((0, 0), (hop, 0)))
    scale = Tensor((1.0 / coverage(n_chunks, hop)).astype(chunks.dtype), dtype=chunks.dtype)
    averaged = summed * scale
    return averaged[:, :original_length]


def segment(rep, hop):
    return ChunkedRep(segment_tensor(rep.features, hop), hop, rep.n_frames,
                      rep.kernel, rep.stride, rep.n_samples)


def overlap_add(chunked):
    features = overlap_add_tensor(chunked.chunks, chunked.hop, chunked.original_length)
    return EncodedRep(features, chunked.kernel, chunked.stride, chunked.n_samples)
