"""Finite-difference verification of every differentiable operation.

All checks run in float64 with central differences (step 1e-5). The error of
one gradient entry is ``|analytic - numeric| / max(|analytic|, |numeric|, floor)``;
the floor keeps entries that are zero up to rounding from dominating.
"""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import chunker, nn, separator
from . import tensor as T
from .objective import si_snr, upit_loss
from .tensor import Tensor, precision

STEP = 1e-5
TOLERANCE = 1e-4
FLOOR = 1e-5

SCALES = {
    # seeds per op, sampled coordinates per parameter tensor in the end-to-end check
    "tiny": {"seeds": 2, "entries": 2},
    "small": {"seeds": 8, "entries": 6},
}


@dataclass
class CheckResult:
    name: str
    worst: float
    tolerance: float
    seconds: float

    @property
    def passed(self):
        return self.worst <= self.tolerance


def relative_error(analytic, numeric, floor=FLOOR):
    analytic, numeric = np.asarray(analytic), np.asarray(numeric)
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / scale)) if analytic.size else 0.0


def numeric_grad(loss_fn, x, indices, step=STEP):
    """Central differences of ``loss_fn()`` (a float) w.r.t. ``x.data`` at ``indices``."""
    out = np.empty(len(indices))
    for n, idx in enumerate(indices):
        orig = x.data[idx]
        x.data[idx] = orig + step
        plus = loss_fn()
        x.data[idx] = orig - step
        minus = loss_fn()
        x.data[idx] = orig
        out[n] = (plus - minus) / (2 * step)
    return out


def _sample_indices(shape, limit, rng):
    every = list(np.ndindex(*shape))
    if limit is None or len(every) <= limit:
        return every
    picks = rng.choice(len(every), size=limit, replace=False)
    return [every[i] for i in sorted(picks)]


def check_function(fn, inputs, rng, limit=None, floor=FLOOR):
    """Worst relative error of d(sum(w * fn(*inputs)))/d(input) over all inputs.

    ``w`` is a fixed random weighting so every output entry contributes.
    """
    out = fn(*inputs)
    weight = Tensor(rng.standard_normal(out.shape)) if out.shape else None

    def scalar():
        y = fn(*inputs)
        return y if weight is None else (y * weight).sum()

    for x in inputs:
        x.zero_grad()
    scalar().backward()
    worst = 0.0
    for x in inputs:
        if not x.requires_grad:
            continue
        idx = _sample_indices(x.shape, limit, rng)
        numeric = numeric_grad(lambda: scalar().item(), x, idx)
        analytic = np.array([x.grad[i] for i in idx])
        worst = max(worst, relative_error(analytic, numeric, floor))
    return worst


def _leaves(rng, *shapes, positive=()):
    out = []
    for n, shape in enumerate(shapes):
        data = rng.standard_normal(shape)
        if n in positive:
            data = np.abs(data) + 0.5
        out.append(Tensor(data, requires_grad=True))
    return out


def _tiny_config(**overrides):
    base = dict(d_model=8, d_enc=8, h_lstm=8, n_heads=2, d_ffn=16, n_layers=2, hop=2)
    base.update(overrides)
    return separator.ModelConfig(**base)


def _param_leaves(config, rng):
    params = separator.init_params(config, seed=int(rng.integers(1 << 30)))
    for p in params.values():
        # non-trivial gains/biases so their gradients are generic
        p.data = p.data + 0.1 * rng.standard_normal(p.shape)
    return params


def _unrolled_lstm(x, h, c, w_ih, w_hh, b):
    for t in range(x.shape[0]):
        h, c = nn.lstm_step(x[t], h, c, w_ih, w_hh, b)
    return T.concatenate([h, c], axis=0)


def _op_cases():
    """(name, builder) pairs; a builder maps an RNG to ``(fn, inputs)``."""
    cases = [
        ("matmul", lambda r: (T.matmul, _leaves(r, (3, 4), (4, 2)))),
        ("matmul_batched", lambda r: (T.matmul, _leaves(r, (2, 3, 4), (2, 4, 5)))),
        ("linear", lambda r: (T.linear, _leaves(r, (2, 3, 4), (4, 3), (3,)))),
        ("conv1d", lambda r: (lambda x, w: nn.conv1d(x, w, 2), _leaves(r, (2, 10), (3, 2, 4)))),
        ("conv_transpose1d", lambda r: (lambda x, w: nn.conv_transpose1d(x, w, 2), _leaves(r, (2, 5), (2, 3, 4)))),
        ("conv2d", lambda r: (lambda x, w: nn.conv2d(x, w, 1), _leaves(r, (2, 4, 5), (3, 2, 3, 3)))),
        ("lstm_step_unrolled", lambda r: (_unrolled_lstm, _leaves(r, (3, 2, 3), (2, 4), (2, 4), (3, 16), (4, 16), (16,)))),
        ("lstm_sequence", lambda r: (lambda x, a, b, c: nn.lstm_sequence(x, a, b, c, reverse=True),
                                     _leaves(r, (2, 4, 3), (3, 12), (3, 12), (12,)))),
        ("layer_norm", lambda r: (nn.layer_norm, _leaves(r, (3, 5), (5,), (5,)))),
        ("global_layer_norm", lambda r: (nn.global_layer_norm, _leaves(r, (3, 4, 2), (3,), (3,)))),
        ("softmax", lambda r: (lambda x: nn.softmax(x, -1), _leaves(r, (3, 5)))),
        ("gelu", lambda r: (T.gelu, _leaves(r, (4, 3)))),
        ("sigmoid", lambda r: (T.sigmoid, _leaves(r, (4, 3)))),
        ("tanh", lambda r: (T.tanh, _leaves(r, (4, 3)))),
        ("relu", lambda r: (T.relu, _leaves(r, (4, 3)))),
        ("exp_log", lambda r: (lambda x: T.log(T.exp(x) + 1.0), _leaves(r, (4, 3)))),
        ("add_sub_mul_div", lambda r: (lambda a, b, c: (a * b - c) / (b * b + 1.0) + c,
                                       _leaves(r, (3, 4), (3, 4), (4,)))),
        ("reshape_transpose", lambda r: (lambda x: x.transpose(2, 0, 1).reshape(4, 6), _leaves(r, (2, 3, 4)))),
        ("index_concat_stack", lambda r: (lambda a, b: T.stack([T.concatenate([a[1:], b[:1]], 0), a * b], 0),
                                          _leaves(r, (3, 2), (3, 2)))),
        ("pad", lambda r: (lambda x: T.pad(x, ((1, 0), (0, 2))), _leaves(r, (2, 3)))),
        ("sum_mean", lambda r: (lambda x: x.sum(axis=1) * x.mean(), _leaves(r, (3, 4)))),
        ("segment_overlap_add", lambda r: (lambda x: chunker.overlap_add_tensor(
            chunker.segment_tensor(x, 2) * chunker.segment_tensor(x, 2), 2, 7), _leaves(r, (2, 7)))),
        ("si_snr", lambda r: (lambda e, s: si_snr(e, s), _leaves(r, (16,), (16,)))),
        ("upit_loss", lambda r: (lambda e, s: upit_loss(e, s)[0], _leaves(r, (2, 16), (2, 16)))),
    ]
    return cases


def _block_cases():
    def sandwich(r):
        cfg = _tiny_config()
        params = _param_leaves(cfg, r)
        x = Tensor(r.standard_normal((3, 5, cfg.d_model)), requires_grad=True)
        return (lambda x, *_: separator.sandwich_block(x, params, "layers.0.inter", cfg.n_heads),
                [x] + [params[k] for k in params if k.startswith("layers.0.inter")])

    def layer(kind, fn):
        def build(r):
            cfg = _tiny_config(separator_kind=kind)
            params = _param_leaves(cfg, r)
            x = Tensor(r.standard_normal((cfg.d_model, 4, 3)), requires_grad=True)
            rep = chunker.ChunkedRep(x, 2, 4)
            keys = [k for k in params if k.startswith("layers.0.")]
            return (lambda x, *_: fn(rep.with_chunks(x), params, "layers.0", cfg).chunks,
                    [x] + [params[k] for k in keys])
        return build

    def dte(r):
        cfg = _tiny_config()
        params = _param_leaves(cfg, r)
        x = Tensor(r.standard_normal((cfg.d_model, 4, 3)), requires_grad=True)
        rep = chunker.ChunkedRep(x, 2, 4)
        keys = [k for k in params if k.startswith("dte.")]
        return (lambda x, *_: separator.dual_temporal_encoding(rep.with_chunks(x), params, cfg).chunks,
                [x] + [params[k] for k in keys])

    return [
        ("sandwich_block", sandwich),
        ("strnn_layer", layer(separator.STRNN, separator.strnn_layer)),
        ("dprnn_baseline_layer", layer(separator.DPRNN, separator.dprnn_baseline_layer)),
        ("dual_temporal_encoding", dte),
    ]


def end_to_end_check(rng, entries, n_frames=20):
    """uPIT loss of the full pipeline at desk scale (D=8, 2P=4, 2 layers) against finite differences.

    Every parameter tensor contributes ``entries`` sampled coordinates, and one
    directional derivative along a random direction covers all parameters at once.
    """
    cfg = _tiny_config()
    params = _param_leaves(cfg, rng)
    n_samples = (n_frames - 1) * cfg.stride + cfg.kernel
    mixture = rng.standard_normal(n_samples) * 0.5
    refs = Tensor(rng.standard_normal((cfg.n_speakers, n_samples)))

    def loss():
        return upit_loss(separator.forward(mixture, cfg, params), refs)[0]

    for p in params.values():
        p.zero_grad()
    loss().backward()
    worst = 0.0
    for p in params.values():
        idx = _sample_indices(p.shape, entries, rng)
        numeric = numeric_grad(lambda: loss().item(), p, idx)
        worst = max(worst, relative_error(np.array([p.grad[i] for i in idx]), numeric))

    direction = {k: rng.standard_normal(p.shape) for k, p in params.items()}
    analytic = sum(float(np.sum(p.grad * direction[k])) for k, p in params.items())
    originals = {k: p.data.copy() for k, p in params.items()}
    values = []
    for sign in (1.0, -1.0):
        for k, p in params.items():
            p.data = originals[k] + sign * STEP * direction[k]
        values.append(loss().item())
    for k, p in params.items():
        p.data = originals[k]
    numeric = (values[0] - values[1]) / (2 * STEP)
    return max(worst, relative_error(analytic, numeric))


def run_suite(scale="small", seed=0):
    if scale not in SCALES:
        raise ValueError(f"unknown scale {scale!r}; choose from {sorted(SCALES)}")
    settings = SCALES[scale]
    results = []
    with precision(np.float64):
        for name, build in _op_cases() + _block_cases():
            start = time.perf_counter()
            worst = 0.0
            for s in range(settings["seeds"]):
                rng = np.random.default_rng([seed, s, len(results)])
                fn, inputs = build(rng)
                worst = max(worst, check_function(fn, inputs, rng, limit=24))
            results.append(CheckResult(name, worst, TOLERANCE, time.perf_counter() - start))
        start = time.perf_counter()
        rng = np.random.default_rng([seed, 999])
        worst = end_to_end_check(rng, settings["entries"])
        results.append(CheckResult("end_to_end_upit", worst, TOLERANCE, time.perf_counter() - start))
    return results
