"""Inference benchmark: real-time factor and sequential-step counts versus input length."""
from __future__ import annotations

import csv
import logging
import math
import statistics
import time
from dataclasses import astuple, dataclass, replace

from . import chunker
from .audio import repeat
from .frontend import frame_count
from .separator import DPRNN, STRNN, forward, inference_workers, init_params
from .tensor import no_grad

log = logging.getLogger(__name__)

CSV_HEADER = ("model", "mult", "audio_s", "wall_s", "rtf", "seq_steps", "workers")


def count_sequential_steps(config, n_frames):
    """Longest chain of ordered recurrence steps in one forward pass over ``n_frames`` frames.

    STRNN only recurs inside chunks (``2P`` steps per layer); the baseline also
    recurs across all ``S`` chunks.
    """
    per_layer = config.chunk_length
    if config.separator_kind == DPRNN:
        per_layer += chunker.chunk_count(n_frames, config.hop)
    return config.n_layers * per_layer


def frames_for(config, n_samples):
    return frame_count(n_samples, config.kernel, config.stride)


@dataclass
class BenchRow:
    model: str
    mult: int
    audio_s: float
    wall_s: float
    rtf: float
    seq_steps: int
    workers: int

    @property
    def failed(self):
        return math.isnan(self.wall_s)


@dataclass
class BenchReport:
    rows: list

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(CSV_HEADER)
            for row in self.rows:
                writer.writerow(astuple(row))

    def for_model(self, model):
        return [r for r in self.rows if r.model == model]


def read_report(path):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = tuple(next(reader))
        if header != CSV_HEADER:
            raise ValueError(f"unexpected bench header {header}")
        return BenchReport([BenchRow(r[0], int(r[1]), float(r[2]), float(r[3]), float(r[4]), int(r[5]), int(r[6]))
                            for r in reader])


def time_forward(config, params, samples, workers=1):
    start = time.perf_counter()
    with no_grad(), inference_workers(workers):
        forward(samples, config, params)
    return time.perf_counter() - start


def run_bench(models, audio, mults=(1, 2, 4, 8), workers=1, repetitions=5):
    """Time each ``(config, params)`` in ``models`` on ``audio`` tiled by every multiplier.

    One warm-up pass is run and discarded before the timed repetitions; the
    median wall time is reported. A row whose run exhausts memory is kept
    with NaN timings.
    """
    rows = []
    for name, (config, params) in models.items():
        for mult in mults:
            buffer = repeat(audio, mult)
            steps = count_sequential_steps(config, frames_for(config, len(buffer)))
            try:
                time_forward(config, params, buffer.samples, workers)
                wall = statistics.median(time_forward(config, params, buffer.samples, workers)
                                         for _ in range(repetitions))
            except MemoryError:
                log.warning("%s at %dx ran out of memory", name, mult)
                wall = math.nan
            rows.append(BenchRow(name, mult, buffer.duration, wall, wall / buffer.duration, steps, workers))
            log.info("%s x%d: wall=%.3fs rtf=%.3f steps=%d", name, mult, wall, rows[-1].rtf, steps)
    return BenchReport(rows)


def paired_models(config, params=None, seed=0):
    """An STRNN model and the DPRNN baseline with matched dimensions.

    ``params`` (e.g. from a checkpoint) are used for the model of ``config``'s
    own kind; the other kind gets a random initialisation.
    """
    models = {}
    for kind in (STRNN, DPRNN):
        cfg = replace(config, separator_kind=kind)
        use = params if (params is not None and kind == config.separator_kind) else init_params(cfg, seed)
        models[kind] = (cfg, use)
    return models
