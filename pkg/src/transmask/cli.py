"""Command-line entry point: ``transmask {train,separate,bench,gradcheck}``.

Exit codes: 0 success, 1 usage or I/O error, 2 numerical failure.
stdout carries machine-readable output only; diagnostics go to stderr.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import fields, replace
from pathlib import Path

import numpy as np

from . import bench, gradcheck
from .audio import AudioBuffer, read_wav, write_wav
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .data import SyntheticMixSpec, make_item
from .separator import ConfigError, ModelConfig, forward, inference_workers
from .tensor import no_grad
from .trainer import DivergenceError, train

log = logging.getLogger("transmask")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2

TRAIN_DEFAULTS = {"epochs": 30, "lr": 1e-3, "clip_norm": 5.0, "seed": 0, "target_si_snri": None}
# dataset keys that would collide with trainer/model keys get a prefix
DATA_KEYS = {"data_seed": "seed", "n_items": "n_items", "n_valid": "n_valid", "duration": "duration",
             "band_a": "band_a", "band_b": "band_b", "min_tones": "min_tones", "max_tones": "max_tones",
             "amplitude": "amplitude", "peak": "peak"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _coerce(key, raw, default):
    raw = raw.strip()
    try:
        if isinstance(default, tuple):
            return tuple(float(v) for v in raw.split(","))
        if isinstance(default, bool):
            return raw.lower() in ("1", "true", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float) or default is None:
            return None if raw.lower() == "none" else float(raw)
    except ValueError as exc:
        raise UsageError(f"config key {key!r}: cannot parse {raw!r}") from exc
    return raw


def config_defaults():
    """Every recognised key with its default value."""
    model = {f.name: f.default for f in fields(ModelConfig)}
    data_defaults = {f.name: f.default for f in fields(SyntheticMixSpec)}
    data = {key: data_defaults[attr] for key, attr in DATA_KEYS.items()}
    return {**model, **data, **TRAIN_DEFAULTS}


def parse_config_file(path):
    """Flat ``key = value`` lines; ``#`` starts a comment; unknown keys are rejected."""
    defaults = config_defaults()
    values = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key = value")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in defaults:
            raise UsageError(f"{path}:{lineno}: unknown key {key!r}")
        values[key] = _coerce(key, raw, defaults[key])
    return values


def build_settings(values):
    """Split merged key/values into (ModelConfig, SyntheticMixSpec, trainer settings)."""
    merged = {**config_defaults(), **values}
    model = ModelConfig(**{f.name: merged[f.name] for f in fields(ModelConfig)})
    spec = SyntheticMixSpec(sample_rate=model.sample_rate,
                            **{attr: merged[key] for key, attr in DATA_KEYS.items()})
    trainer = {k: merged[k] for k in TRAIN_DEFAULTS}
    return model, spec, trainer


def resolve_seed(flag, file_values):
    if flag is not None:
        return flag
    if "seed" in file_values:
        return file_values["seed"]
    env = os.environ.get("TRANSMASK_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError as exc:
            raise UsageError(f"TRANSMASK_SEED={env!r} is not an integer") from exc
    return TRAIN_DEFAULTS["seed"]


# ------------------------------------------------------------------ commands
def cmd_train(args):
    values = parse_config_file(args.config)
    values["seed"] = resolve_seed(args.seed, values)
    if args.epochs is not None:
        values["epochs"] = args.epochs
    model, spec, opts = build_settings(values)
    metrics_path = Path(args.metrics or f"{args.out}.metrics.jsonl")
    with open(metrics_path, "w") as metrics:
        def emit(record):
            line = json.dumps(record, sort_keys=True)
            metrics.write(line + "\n")
            metrics.flush()
            print(line, flush=True)

        result = train(model, spec, opts["epochs"], lr=opts["lr"], clip_norm=opts["clip_norm"],
                       seed=opts["seed"], target_si_snri=opts["target_si_snri"], on_record=emit)
    save_checkpoint(result.checkpoint, args.out)
    log.info("best epoch %d written to %s", result.best_epoch, args.out)
    return EXIT_OK


def cmd_separate(args):
    ckpt = load_checkpoint(args.ckpt)
    audio = read_wav(args.inp)
    config = ckpt.config
    if audio.sample_rate != config.sample_rate:
        raise UsageError(f"{args.inp} is sampled at {audio.sample_rate} Hz but the checkpoint expects "
                         f"{config.sample_rate} Hz; resample the input first")
    params = ckpt.tensors()
    with no_grad(), inference_workers(args.workers):
        estimates = np.asarray(forward(audio.samples, config, params).data)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for i, wave in enumerate(estimates, 1):
        path = out_dir / f"spk{i}.wav"
        write_wav(AudioBuffer(wave, audio.sample_rate), path)
        written.append(str(path))
    print(json.dumps({"outputs": written, "samples": len(audio), "sample_rate": audio.sample_rate}))
    return EXIT_OK


def cmd_bench(args):
    if args.ckpt:
        ckpt = load_checkpoint(args.ckpt)
        config, params = ckpt.config, ckpt.tensors()
    else:
        values = parse_config_file(args.config) if args.config else {}
        config, params = build_settings(values)[0], None
    seed = resolve_seed(args.seed, {})
    if args.inp:
        audio = read_wav(args.inp)
        if audio.sample_rate != config.sample_rate:
            raise UsageError(f"{args.inp} is sampled at {audio.sample_rate} Hz, model expects {config.sample_rate} Hz")
    else:
        spec = SyntheticMixSpec(seed=seed, duration=args.seconds, sample_rate=config.sample_rate)
        audio = make_item(spec, 1).mixture
    try:
        mults = [int(m) for m in args.mults.split(",")]
    except ValueError as exc:
        raise UsageError(f"--mults must be comma-separated integers, got {args.mults!r}") from exc
    report = bench.run_bench(bench.paired_models(config, params, seed), audio, mults,
                             workers=args.workers, repetitions=args.reps)
    report.to_csv(args.out)
    print(json.dumps({"report": str(args.out), "rows": len(report.rows)}))
    return EXIT_OK


def cmd_gradcheck(args):
    results = gradcheck.run_suite(args.scale)
    for r in results:
        print(f"{r.name}\t{r.worst:.3e}\t{'ok' if r.passed else 'FAIL'}")
    return EXIT_OK if all(r.passed for r in results) else EXIT_NUMERIC


def build_parser():
    parser = _Parser(prog="transmask", description="TransMask speech separation toolkit")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train on synthetic mixtures")
    p.add_argument("--config", required=True, help="flat key = value config file")
    p.add_argument("--out", required=True, help="checkpoint path to write")
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--metrics", help="metrics log path (default: <out>.metrics.jsonl)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("separate", help="separate a mixture WAV into spk1.wav, spk2.wav, ...")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_separate)

    p = sub.add_parser("bench", help="real-time factor and sequential steps versus input length")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--ckpt")
    src.add_argument("--random", action="store_true", help="random parameters (optionally --config)")
    p.add_argument("--config", help="model config for --random")
    p.add_argument("--in", dest="inp", help="base WAV (default: a synthetic mixture)")
    p.add_argument("--seconds", type=float, default=2.0, help="length of the synthetic base mixture")
    p.add_argument("--mults", default="1,2,4,8")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--reps", type=int, default=5)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True, help="CSV path")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    p.add_argument("--scale", choices=sorted(gradcheck.SCALES), default="small")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except DivergenceError as exc:
        print(f"transmask: training diverged: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (UsageError, ConfigError, CheckpointError, OSError, ValueError) as exc:
        print(f"transmask: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
