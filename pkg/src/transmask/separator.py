"""Mask-producing separator network.

Pipeline on an encoded mixture ``[D, L]``::

    segment -> dual-temporal conv encoding -> n_layers x (STRNN | DPRNN) layer
            -> overlap-add -> linear head -> sigmoid -> masks [n_speakers, D_enc, L]

Within a layer the chunked tensor ``[D, 2P, S]`` is viewed two ways: as ``S``
independent sequences of length ``2P`` (local context, handled by a
bidirectional LSTM) and as ``2P`` independent sequences of length ``S``
(strided context, handled by multi-head self-attention in STRNN or by a second
bidirectional LSTM in the DPRNN baseline).
"""
from __future__ import annotations

import contextlib
import math
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, fields, replace

import numpy as np

from . import chunker
from .frontend import EncodedRep, decode, encode
from .nn import conv2d, global_layer_norm, layer_norm, lstm_sequence, softmax
from .tensor import (
    Tensor,
    concatenate,
    gelu,
    getitem,
    grad_mode,
    is_grad_enabled,
    linear,
    sigmoid,
    stack,
)

STRNN = "strnn"
DPRNN = "dprnn_baseline"
MAX_SPEAKERS = 4


class ConfigError(ValueError):
    """Configuration or parameter set is inconsistent."""


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 64
    h_lstm: int = 128
    n_heads: int = 4
    d_ffn: int = 256
    n_layers: int = 6
    n_speakers: int = 2
    hop: int = 64
    d_enc: int = 64
    kernel: int = 16
    stride: int = 8
    n_conv_blocks: int = 3
    conv_kernel: int = 3
    separator_kind: str = STRNN
    sample_rate: int = 8000

    @property
    def chunk_length(self):
        return 2 * self.hop

    def validate(self):
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, int) and value <= 0:
                raise ConfigError(f"{f.name} must be positive, got {value}")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if self.d_enc != self.d_model:
            raise ConfigError(f"d_enc={self.d_enc} must equal d_model={self.d_model} (no bottleneck)")
        if self.separator_kind not in (STRNN, DPRNN):
            raise ConfigError(f"unknown separator_kind {self.separator_kind!r}")
        if not 2 <= self.n_speakers <= MAX_SPEAKERS:
            raise ConfigError(f"n_speakers must be in [2, {MAX_SPEAKERS}], got {self.n_speakers}")
        if self.conv_kernel % 2 == 0:
            raise ConfigError("conv_kernel must be odd to preserve shape")
        return self

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, values):
        known = {f.name for f in fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**values)


def transmask4(**overrides):
    return replace(ModelConfig(n_layers=4), **overrides)


def transmask6(**overrides):
    return replace(ModelConfig(n_layers=6), **overrides)


def dprnn_baseline(**overrides):
    return replace(ModelConfig(n_layers=6, separator_kind=DPRNN), **overrides)


@dataclass
class MaskSet:
    masks: Tensor  # [n_speakers, D_enc, L], values in (0, 1)

    @property
    def n_speakers(self):
        return self.masks.shape[0]


# ---------------------------------------------------------------- parameters
def _bilstm_shapes(prefix, d_in, hidden):
    shapes = []
    for direction in ("fwd", "bwd"):
        shapes += [(f"{prefix}.{direction}.w_ih", (d_in, 4 * hidden)),
                   (f"{prefix}.{direction}.w_hh", (hidden, 4 * hidden)),
                   (f"{prefix}.{direction}.b", (4 * hidden,))]
    return shapes


def _recurrent_block_shapes(prefix, config):
    d, h = config.d_model, config.h_lstm
    return _bilstm_shapes(prefix, d, h) + [
        (f"{prefix}.proj.w", (2 * h, d)), (f"{prefix}.proj.b", (d,)),
        (f"{prefix}.norm.gain", (d,)), (f"{prefix}.norm.bias", (d,)),
    ]


def _sandwich_shapes(prefix, config):
    d, f = config.d_model, config.d_ffn
    shapes = [(f"{prefix}.norm1.gain", (d,)), (f"{prefix}.norm1.bias", (d,))]
    for name in ("q", "k", "v", "o"):
        shapes += [(f"{prefix}.attn.w{name}", (d, d)), (f"{prefix}.attn.b{name}", (d,))]
    shapes += [(f"{prefix}.norm2.gain", (d,)), (f"{prefix}.norm2.bias", (d,)),
               (f"{prefix}.ffn.w1", (d, f)), (f"{prefix}.ffn.b1", (f,)),
               (f"{prefix}.ffn.w2", (f, d)), (f"{prefix}.ffn.b2", (d,)),
               (f"{prefix}.norm3.gain", (d,)), (f"{prefix}.norm3.bias", (d,))]
    return shapes


def parameter_shapes(config):
    """Ordered ``(name, shape)`` list of every parameter tensor."""
    c = config.validate()
    d, k = c.d_model, c.conv_kernel
    shapes = [("enc.weight", (c.d_enc, 1, c.kernel)), ("dec.weight", (c.d_enc, 1, c.kernel))]
    for i in range(c.n_conv_blocks):
        shapes += [(f"dte.{i}.conv", (d, d, k, k)), (f"dte.{i}.gain", (d,)), (f"dte.{i}.bias", (d,))]
    for layer in range(c.n_layers):
        shapes += _recurrent_block_shapes(f"layers.{layer}.intra", c)
        if c.separator_kind == STRNN:
            shapes += _sandwich_shapes(f"layers.{layer}.inter", c)
        else:
            shapes += _recurrent_block_shapes(f"layers.{layer}.inter", c)
    shapes += [("head.w", (d, c.n_speakers * c.d_enc)), ("head.b", (c.n_speakers * c.d_enc,))]
    return shapes


def _init_value(name, shape, config, rng):
    leaf = name.rsplit(".", 1)[-1]
    if leaf in ("gain",):
        return np.ones(shape)
    if leaf.startswith("b") and len(shape) == 1:
        if ".fwd." in name or ".bwd." in name:
            bound = 1.0 / math.sqrt(config.h_lstm)
            return rng.uniform(-bound, bound, shape)
        return np.zeros(shape)
    if leaf in ("w_ih", "w_hh"):
        bound = 1.0 / math.sqrt(config.h_lstm)
        return rng.uniform(-bound, bound, shape)
    if name in ("enc.weight", "dec.weight"):
        return rng.normal(0.0, 1.0 / math.sqrt(config.kernel), shape)
    fan_in = int(np.prod(shape[1:])) if len(shape) == 4 else shape[0]
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, shape)


def init_params(config, seed=0):
    """Fresh parameter tensors (``requires_grad=True``) keyed by dotted name."""
    rng = np.random.default_rng(seed)
    return {name: Tensor(_init_value(name, shape, config, rng), requires_grad=True, name=name)
            for name, shape in parameter_shapes(config)}


def check_params(config, params):
    expected = dict(parameter_shapes(config))
    if set(expected) != set(params):
        missing = sorted(set(expected) - set(params))
        extra = sorted(set(params) - set(expected))
        raise ConfigError(f"parameter names differ from config: missing={missing[:5]} extra={extra[:5]}")
    for name, shape in expected.items():
        if params[name].shape != shape:
            raise ConfigError(f"parameter {name} has shape {params[name].shape}, config expects {shape}")


def linear_param_count(d_in, d_out, bias=True):
    return d_in * d_out + (d_out if bias else 0)


def bilstm_param_count(d_in, hidden):
    return 2 * (4 * hidden * (d_in + hidden + 1))


@dataclass
class ParameterCount:
    total: int
    breakdown: dict


def count_parameters(config):
    """Closed-form parameter count with a per-block breakdown."""
    c = config.validate()
    d, h = c.d_model, c.h_lstm
    recurrent_block = bilstm_param_count(d, h) + linear_param_count(2 * h, d) + 2 * d
    sandwich = (3 * 2 * d + 4 * linear_param_count(d, d)
                + linear_param_count(d, c.d_ffn) + linear_param_count(c.d_ffn, d))
    inter = sandwich if c.separator_kind == STRNN else recurrent_block
    breakdown = {
        "encoder": c.d_enc * c.kernel,
        "decoder": c.d_enc * c.kernel,
        "dual_temporal_encoding": c.n_conv_blocks * (d * d * c.conv_kernel ** 2 + 2 * d),
        "intra_chunk": c.n_layers * recurrent_block,
        "inter_chunk": c.n_layers * inter,
        "mask_head": linear_param_count(d, c.n_speakers * c.d_enc),
    }
    return ParameterCount(sum(breakdown.values()), breakdown)


# ------------------------------------------------- parallelism and tallying
_state = threading.local()
_pools = {}


@contextlib.contextmanager
def inference_workers(count):
    """Shard independent chunks / intra-positions over ``count`` threads inside this block."""
    previous = getattr(_state, "workers", 1)
    _state.workers = max(1, int(count))
    try:
        yield
    finally:
        _state.workers = previous


def _pool(count):
    if count not in _pools:
        _pools[count] = ThreadPoolExecutor(max_workers=count, thread_name_prefix="transmask")
    return _pools[count]


def _sharded(fn, x):
    """Apply ``fn`` to ``x`` split along axis 0; shards are independent batch items."""
    workers = getattr(_state, "workers", 1)
    batch = x.shape[0]
    if workers <= 1 or batch < 2:
        return fn(x)
    bounds = np.linspace(0, batch, min(workers, batch) + 1).astype(int)
    pieces = [getitem(x, slice(a, b)) for a, b in zip(bounds[:-1], bounds[1:])]
    enabled = is_grad_enabled()

    def run(piece):
        with grad_mode(enabled):
            return fn(piece)

    return concatenate(list(_pool(workers).map(run, pieces)), axis=0)


class SequentialTally:
    """Counts inherently ordered recurrence steps along the forward pass."""

    def __init__(self):
        self.steps = 0
        self.calls = []


@contextlib.contextmanager
def track_sequential_steps():
    tally = SequentialTally()
    previous = getattr(_state, "tally", None)
    _state.tally = tally
    try:
        yield tally
    finally:
        _state.tally = previous


def _record_recurrence(length):
    tally = getattr(_state, "tally", None)
    if tally is not None:
        tally.steps += length
        tally.calls.append(length)


# ---------------------------------------------------------------- sub-blocks
def bilstm(x, params, prefix):
    """Bidirectional LSTM over axis 1 of ``x`` [B, T, D] -> [B, T, 2H].

    Both directions run concurrently, so one call contributes ``T`` ordered steps.
    """
    _record_recurrence(x.shape[1])

    def run(xs):
        outs = []
        for direction, reverse in (("fwd", False), ("bwd", True)):
            p = f"{prefix}.{direction}"
            outs.append(lstm_sequence(xs, params[p + ".w_ih"], params[p + ".w_hh"], params[p + ".b"],
                                      reverse=reverse))
        return concatenate(outs, axis=2)

    return _sharded(run, x)


def recurrent_block(x, params, prefix):
    """``x + LN(proj(BiLSTM(x)))`` along axis 1 of ``x`` [B, T, D]."""
    y = bilstm(x, params, prefix)
    y = linear(y, params[prefix + ".proj.w"], params[prefix + ".proj.b"])
    return x + layer_norm(y, params[prefix + ".norm.gain"], params[prefix + ".norm.bias"])


def multi_head_attention(x, params, prefix, n_heads, return_weights=False):
    """Scaled dot-product self-attention along axis 1 of ``x`` [B, S, D]."""
    batch, seq, d = x.shape
    dh = d // n_heads

    def heads(name):
        y = linear(x, params[f"{prefix}.w{name}"], params[f"{prefix}.b{name}"])
        return y.reshape(batch, seq, n_heads, dh).transpose(0, 2, 1, 3)

    q, k, v = heads("q"), heads("k"), heads("v")
    scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(dh))
    weights = softmax(scores, axis=-1)
    context = (weights @ v).transpose(0, 2, 1, 3).reshape(batch, seq, d)
    out = linear(context, params[f"{prefix}.wo"], params[f"{prefix}.bo"])
    return (out, weights) if return_weights else out


def sandwich_block(x, params, prefix, n_heads):
    """Pre-norm attention and feed-forward residual branches, closed by a final layer norm.

    ``x`` is [S, D] or a batch [B, S, D] of independent sequences.
    """
    if x.ndim == 2:
        return sandwich_block(x.reshape(1, *x.shape), params, prefix, n_heads).reshape(x.shape)

    def ln(t, which):
        return layer_norm(t, params[f"{prefix}.{which}.gain"], params[f"{prefix}.{which}.bias"])

    def run(xs):
        y1 = xs + multi_head_attention(ln(xs, "norm1"), params, prefix + ".attn", n_heads)
        hidden = gelu(linear(ln(y1, "norm2"), params[prefix + ".ffn.w1"], params[prefix + ".ffn.b1"]))
        y2 = y1 + linear(hidden, params[prefix + ".ffn.w2"], params[prefix + ".ffn.b2"])
        return ln(y2, "norm3")

    return _sharded(run, x)


def dual_temporal_encoding(chunked, params, config):
    """Trainable positional encoding: 2-D convolutions over the (intra, inter) chunk axes, added residually."""
    x = chunked.chunks
    if x.shape[0] != config.d_model:
        raise ConfigError(f"chunked input has {x.shape[0]} channels, config d_model={config.d_model}")
    h = x
    for i in range(config.n_conv_blocks):
        h = conv2d(h, params[f"dte.{i}.conv"], padding=config.conv_kernel // 2)
        h = gelu(global_layer_norm(h, params[f"dte.{i}.gain"], params[f"dte.{i}.bias"]))
    return chunked.with_chunks(x + h)


def _intra(chunks, params, prefix):
    # [D, 2P, S] -> S sequences of length 2P
    xs = chunks.transpose(2, 1, 0)
    return recurrent_block(xs, params, prefix).transpose(1, 0, 2)  # [2P, S, D]


def strnn_layer(chunked, params, prefix, config, inter=True):
    """Local bidirectional recurrence within chunks, then strided attention across chunks.

    ``inter=False`` skips the attention sub-stage (used to probe locality).
    """
    xp = _intra(chunked.chunks, params, prefix + ".intra")
    if inter:
        xp = sandwich_block(xp, params, prefix + ".inter", config.n_heads)
    return chunked.with_chunks(xp.transpose(2, 0, 1))


def dprnn_baseline_layer(chunked, params, prefix, config):
    xp = _intra(chunked.chunks, params, prefix + ".intra")
    xp = recurrent_block(xp, params, prefix + ".inter")
    return chunked.with_chunks(xp.transpose(2, 0, 1))


def strnn_inter_only(chunked, params, prefix, config):
    """Only the attention sub-stage of an STRNN layer."""
    xp = chunked.chunks.transpose(1, 2, 0)
    xp = sandwich_block(xp, params, prefix + ".inter", config.n_heads)
    return chunked.with_chunks(xp.transpose(2, 0, 1))


# ------------------------------------------------------------------ pipeline
def separate(rep, config, params):
    """Masks for every speaker from an encoded mixture."""
    config.validate()
    check_params(config, params)
    if rep.n_filters != config.d_enc:
        raise ConfigError(f"representation has {rep.n_filters} filters, config d_enc={config.d_enc}")
    chunked = chunker.segment(rep, config.hop)
    chunked = dual_temporal_encoding(chunked, params, config)
    layer_fn = strnn_layer if config.separator_kind == STRNN else dprnn_baseline_layer
    for layer in range(config.n_layers):
        chunked = layer_fn(chunked, params, f"layers.{layer}", config)
    features = chunker.overlap_add(chunked).features  # [D, L]
    logits = linear(features.transpose(1, 0), params["head.w"], params["head.b"])
    masks = sigmoid(logits).reshape(rep.n_frames, config.n_speakers, config.d_enc)
    return MaskSet(masks.transpose(1, 2, 0))


def apply_masks(rep, masks):
    if masks.masks.shape[1:] != rep.features.shape:
        raise ConfigError(f"masks {masks.masks.shape} do not match representation {rep.features.shape}")
    return [EncodedRep(masks.masks[i] * rep.features, rep.kernel, rep.stride, rep.n_samples)
            for i in range(masks.n_speakers)]


def forward(waveform, config, params):
    """Separate a mixture waveform into ``[n_speakers, N]`` estimates."""
    rep = encode(waveform, params["enc.weight"], config.stride)
    masks = separate(rep, config, params)
    return stack([decode(r, params["dec.weight"]) for r in apply_masks(rep, masks)], axis=0)
