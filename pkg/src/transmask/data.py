"""Synthetic two-source mixtures with spectrally disjoint sources.

Each source is a sum of 2-4 sinusoids; source A draws frequencies from a low
band and source B from a high band, so an ideal separator exists. Item ``i``
is generated from its own RNG stream ``(seed, i)``; even indices form the
training split and odd indices the validation split.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .audio import AudioBuffer


@dataclass(frozen=True)
class SyntheticMixSpec:
    seed: int = 0
    n_items: int = 64
    n_valid: int = 16
    duration: float = 2.0
    sample_rate: int = 8000
    band_a: tuple = (100.0, 900.0)
    band_b: tuple = (1100.0, 1900.0)
    min_tones: int = 2
    max_tones: int = 4
    amplitude: tuple = (0.3, 1.0)
    peak: float = 0.7

    def __post_init__(self):
        lo_a, hi_a = self.band_a
        lo_b, hi_b = self.band_b
        if not (0 < lo_a < hi_a and 0 < lo_b < hi_b):
            raise ValueError("frequency bands must be positive and increasing")
        if hi_a >= lo_b and hi_b >= lo_a:
            raise ValueError(f"bands {self.band_a} and {self.band_b} overlap")
        if max(hi_a, hi_b) >= self.sample_rate / 2:
            raise ValueError("bands must lie below the Nyquist frequency")


@dataclass
class MixtureItem:
    index: int
    mixture: AudioBuffer
    references: np.ndarray  # [2, N]; row 0 is the low-band source


def _tone_sum(rng, band, spec, t):
    n_tones = rng.integers(spec.min_tones, spec.max_tones + 1)
    freqs = rng.uniform(band[0], band[1], n_tones)
    amps = rng.uniform(spec.amplitude[0], spec.amplitude[1], n_tones)
    phases = rng.uniform(0.0, 2 * np.pi, n_tones)
    wave = (amps[:, None] * np.sin(2 * np.pi * freqs[:, None] * t + phases[:, None])).sum(axis=0)
    return wave * (spec.peak / np.max(np.abs(wave)))


def make_item(spec, index):
    rng = np.random.default_rng([spec.seed, index])
    n = int(round(spec.duration * spec.sample_rate))
    t = np.arange(n) / spec.sample_rate
    refs = np.stack([_tone_sum(rng, spec.band_a, spec, t), _tone_sum(rng, spec.band_b, spec, t)])
    mixture = np.clip(refs.sum(axis=0), -1.0, 1.0)
    return MixtureItem(index, AudioBuffer(mixture, spec.sample_rate), refs.astype(np.float32))


@dataclass
class Dataset:
    train: list
    valid: list


def generate_dataset(spec):
    train = [make_item(spec, 2 * i) for i in range(spec.n_items)]
    valid = [make_item(spec, 2 * i + 1) for i in range(spec.n_valid)]
    return Dataset(train, valid)
