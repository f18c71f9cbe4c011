"""Learnable time-domain encoder and decoder."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .audio import AudioBuffer
from .nn import InputTooShortError, conv1d, conv_transpose1d
from .tensor import Tensor, as_tensor, pad, relu


@dataclass
class EncodedRep:
    """Non-negative filterbank features ``[D_enc, L]`` plus the geometry needed to invert them."""

    features: Tensor
    kernel: int
    stride: int
    n_samples: int

    @property
    def n_frames(self):
        return self.features.shape[1]

    @property
    def n_filters(self):
        return self.features.shape[0]


def padded_length(n_samples, kernel, stride):
    """Smallest length >= n_samples with (length - kernel) divisible by stride."""
    if n_samples < kernel:
        raise InputTooShortError(f"audio of {n_samples} samples is shorter than one kernel ({kernel})")
    excess = (n_samples - kernel) % stride
    return n_samples + ((stride - excess) % stride)


def frame_count(n_samples, kernel, stride):
    return (padded_length(n_samples, kernel, stride) - kernel) // stride + 1


def encode(audio, enc_weight, stride):
    """Encode a waveform (``AudioBuffer``, array or 1-d ``Tensor``) with ``enc_weight`` [D_enc, 1, K]."""
    if isinstance(audio, AudioBuffer):
        audio = audio.samples
    x = as_tensor(audio)
    if x.ndim != 1:
        raise ValueError(f"encode expects a 1-d waveform, got shape {x.shape}")
    kernel = enc_weight.shape[2]
    n = x.shape[0]
    total = padded_length(n, kernel, stride)
    x = x.reshape(1, n)
    if total > n:
        x = pad(x, ((0, 0), (0, total - n)))
    features = relu(conv1d(x, enc_weight, stride))
    return EncodedRep(features, kernel, stride, n)


def decode(rep, dec_weight):
    """Transposed convolution back to a waveform ``Tensor`` of exactly ``rep.n_samples`` samples."""
    if dec_weight.shape[0] != rep.n_filters or dec_weight.shape[2] != rep.kernel:
        raise ValueError(f"decoder kernel {dec_weight.shape} does not match representation "
                         f"{rep.features.shape} with kernel {rep.kernel}")
    wave = conv_transpose1d(rep.features, dec_weight, rep.stride)
    return wave[0, :rep.n_samples]


def decode_audio(rep, dec_weight, sample_rate):
    return AudioBuffer(np.asarray(decode(rep, dec_weight).data), sample_rate)
