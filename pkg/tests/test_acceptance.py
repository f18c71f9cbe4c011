"""Acceptance criteria 1-8. Each test prints (and records for the summary) one PASS/FAIL line."""
import time
from dataclasses import replace

import numpy as np
import pytest

from transmask import bench
from transmask import separator as sep
from transmask.audio import AudioBuffer, read_wav, write_wav
from transmask.checkpoint import load_checkpoint, save_checkpoint
from transmask.chunker import overlap_add_tensor, segment_tensor
from transmask.cli import main
from transmask.data import SyntheticMixSpec, generate_dataset, make_item
from transmask.objective import si_snr, si_snr_improvement, upit_loss
from transmask.separator import ModelConfig, count_parameters, init_params
from transmask.tensor import Tensor, no_grad, precision
from transmask.trainer import train

from test_separator import (COMPOSED, SAME_CHUNK, SAME_OFFSET, TINY_JACOBIAN, _frame_jacobian_mask,
                            _perturbed, _reverse_mode_mask, _stages)

RESULTS = []

DESK = ModelConfig(d_model=32, d_enc=32, h_lstm=32, n_heads=4, d_ffn=128, n_layers=2, hop=8)
DESK_DATA = SyntheticMixSpec(seed=0, n_items=64, n_valid=16, duration=2.0, sample_rate=8000)
TARGET_DB = 5.0


def report(number, title, ok, detail):
    line = f"criterion {number} [{'PASS' if ok else 'FAIL'}]: {title} - {detail}"
    RESULTS.append(line)
    print(line)
    assert ok, line


def test_1_gradient_fidelity(capsys):
    start = time.perf_counter()
    code = main(["gradcheck", "--scale", "small"])
    elapsed = time.perf_counter() - start
    rows = [line.split("\t") for line in capsys.readouterr().out.strip().splitlines()]
    worst = max(float(r[1]) for r in rows)
    with capsys.disabled():
        report(1, "gradient fidelity", code == 0 and elapsed < 60 and len(rows) >= 29,
               f"{len(rows)} checks, worst rel err {worst:.2e} (tol 1e-4), {elapsed:.1f}s (limit 60s)")


def test_2_chunker_exactness():
    start = time.perf_counter()
    failures = 0
    with precision(np.float64):
        rng = np.random.default_rng(0)
        for hop in (1, 2, 4, 8):
            for length in range(1, 201):
                x = rng.standard_normal((3, length))
                back = overlap_add_tensor(segment_tensor(Tensor(x), hop), hop, length).data
                failures += not np.array_equal(back, x)
    elapsed = time.perf_counter() - start
    report(2, "chunker exactness", failures == 0 and elapsed < 10,
           f"{800 - failures}/800 round trips machine-equal in float64, {elapsed:.2f}s (limit 10s)")


def test_3_upit_correctness():
    worst_perm, worst_scale = 0.0, 0.0
    with precision(np.float64):
        for seed in range(100):
            rng = np.random.default_rng(seed)
            n_spk = int(rng.integers(2, 5))
            refs = rng.standard_normal((n_spk, 8000))
            # estimates resemble separator outputs: each carries some source plus leakage
            est = refs[rng.permutation(n_spk)] * rng.uniform(0.25, 2.0, (n_spk, 1)) + rng.standard_normal((n_spk, 8000))
            loss, perm = upit_loss(Tensor(est), Tensor(refs))
            shuffled, _ = upit_loss(Tensor(est), Tensor(refs[rng.permutation(n_spk)]))
            worst_perm = max(worst_perm, abs(loss.item() - shuffled.item()))
            alpha = float(np.exp(rng.uniform(np.log(0.1), np.log(10.0))))
            # each estimate is scored against the reference uPIT assigned to it
            base = si_snr(Tensor(est[0]), Tensor(refs[perm[0]])).item()
            scaled = si_snr(Tensor(alpha * est[0]), Tensor(refs[perm[0]])).item()
            worst_scale = max(worst_scale, abs(base - scaled))
    report(3, "uPIT correctness", worst_perm <= 1e-9 and worst_scale <= 1e-6,
           f"100 instances: permutation drift {worst_perm:.1e} (tol 1e-9), scale drift {worst_scale:.1e} (tol 1e-6)")


def test_4_receptive_field():
    leaks, mismatches = 0, []
    with precision(np.float64):
        params = _perturbed(TINY_JACOBIAN, 0)
        stages = _stages(params)
        fn, predicted = stages["layer"]
        for step in (1e-2, 0.5, 2.0):
            observed = _frame_jacobian_mask(lambda x: fn(x).data, step=step)
            leaks += int(np.sum(observed & ~predicted))
        for name, (fn, predicted) in stages.items():
            if not np.array_equal(_reverse_mode_mask(fn), predicted):
                mismatches.append(name)
    report(4, "receptive-field fidelity", leaks == 0 and not mismatches,
           f"D=2 2P=4 S=3: {leaks} finite-difference entries outside the strided+local mask; "
           f"analytic pattern mismatches: {mismatches or 'none'}")


def test_5_sequential_steps():
    mults = (1, 2, 4, 8)
    cfg = sep.transmask6()
    base = AudioBuffer(make_item(SyntheticMixSpec(duration=0.5), 1).mixture.samples)
    frames = [bench.frames_for(cfg, m * len(base)) for m in mults]
    strnn = [bench.count_sequential_steps(cfg, n) for n in frames]
    dprnn_cfg = replace(cfg, separator_kind=sep.DPRNN)
    dprnn = [bench.count_sequential_steps(dprnn_cfg, n) for n in frames]
    chunks = [sep.chunker.chunk_count(n, cfg.hop) for n in frames]
    affine = all(d == cfg.n_layers * (cfg.chunk_length + s) for d, s in zip(dprnn, chunks))
    ok = len(set(strnn)) == 1 and affine and dprnn[-1] > dprnn[0]

    # wall clock is observational only: one CPU here, so threads cannot speed anything up
    report_rows = bench.run_bench(bench.paired_models(cfg), base, mults, workers=4, repetitions=2)
    rtf = {name: [f"{r.rtf:.3f}" for r in report_rows.for_model(name)] for name in (sep.STRNN, sep.DPRNN)}
    report(5, "sequential-ops claim", ok,
           f"STRNN steps {strnn} (constant), DPRNN steps {dprnn} = n_layers*(2P+S) for S={chunks}; "
           f"rtf with 4 workers at x{list(mults)}, reported not asserted: STRNN {rtf[sep.STRNN]}, "
           f"DPRNN {rtf[sep.DPRNN]}")


@pytest.fixture(scope="module")
def desk_runs():
    data = generate_dataset(DESK_DATA)
    runs = {}
    for seed in range(3):
        start = time.perf_counter()
        result = train(DESK, DESK_DATA, epochs=30, lr=1e-3, seed=seed, target_si_snri=TARGET_DB, dataset=data)
        runs[seed] = (result, time.perf_counter() - start)
    return runs


@pytest.mark.slow
def test_6_desk_scale_learning(desk_runs, tmp_path):
    best = {seed: max(r["valid_si_snri"] for r in result.records) for seed, (result, _) in desk_runs.items()}
    epochs = {seed: len(result.records) for seed, (result, _) in desk_runs.items()}
    total = sum(t for _, t in desk_runs.values())
    reached = [seed for seed, score in best.items() if score >= TARGET_DB]

    # a held-out mixture outside both splits, separated through the command line
    winner = max(best, key=best.get)
    ckpt_path = tmp_path / "desk.ckpt"
    save_checkpoint(desk_runs[winner][0].checkpoint, ckpt_path)
    item = make_item(DESK_DATA, 10_001)
    write_wav(item.mixture, tmp_path / "mix.wav")
    assert main(["separate", "--ckpt", str(ckpt_path), "--in", str(tmp_path / "mix.wav"),
                 "--out-dir", str(tmp_path / "out")]) == 0
    est = np.stack([read_wav(tmp_path / "out" / f"spk{i}.wav").samples for i in (1, 2)])
    held_out, _ = si_snr_improvement(est, item.references, item.mixture.samples)

    detail = ", ".join(f"seed {s}: {best[s]:.2f} dB in {epochs[s]} epochs" for s in sorted(best))
    report(6, "desk-scale learning", len(reached) >= 2 and total <= 15 * 60,
           f"{detail}; {len(reached)}/3 seeds >= {TARGET_DB} dB; {total:.0f}s total (limit 900s); "
           f"held-out SI-SNRi via CLI {held_out:.2f} dB")


def test_7_model_size():
    mismatches = []
    for cfg in (sep.transmask4(), sep.transmask6(), sep.dprnn_baseline(), DESK):
        enumerated = sum(p.data.size for p in init_params(cfg).values())
        if enumerated != count_parameters(cfg).total:
            mismatches.append(cfg)
    small, baseline = count_parameters(sep.transmask6()).total, count_parameters(sep.dprnn_baseline()).total
    report(7, "model-size accounting", not mismatches and 1_100_000 <= small <= 2_100_000 and small < baseline,
           f"closed form == enumeration for 4 configs; TransMask-6 {small:,} in [1.1M, 2.1M], "
           f"< DPRNN baseline {baseline:,}")


def test_8_checkpoint_and_determinism(tmp_path):
    cfg = replace(DESK, n_layers=1)
    spec = SyntheticMixSpec(seed=3, n_items=3, n_valid=2, duration=0.25)
    runs = [train(cfg, spec, epochs=1, seed=11) for _ in range(2)]
    same_training = all(np.array_equal(runs[0].checkpoint.params[k], runs[1].checkpoint.params[k])
                        for k in runs[0].checkpoint.params)
    same_training &= [r["train_loss"] for r in runs[0].records] == [r["train_loss"] for r in runs[1].records]

    save_checkpoint(runs[0].checkpoint, tmp_path / "a.ckpt")
    loaded = load_checkpoint(tmp_path / "a.ckpt", expected_config=cfg)
    bit_exact = all(loaded.params[k].tobytes() == v.tobytes() for k, v in runs[0].checkpoint.params.items())
    save_checkpoint(loaded, tmp_path / "b.ckpt")
    bit_exact &= (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()

    lengths = []
    for n in (1000, 1237, 4001):
        mix = tmp_path / f"mix{n}.wav"
        write_wav(AudioBuffer(np.random.default_rng(n).uniform(-0.5, 0.5, n)), mix)
        outputs = []
        for run in ("x", "y"):
            out_dir = tmp_path / f"out{n}{run}"
            assert main(["separate", "--ckpt", str(tmp_path / "a.ckpt"), "--in", str(mix),
                         "--out-dir", str(out_dir)]) == 0
            outputs.append([(out_dir / f"spk{i}.wav").read_bytes() for i in (1, 2)])
            lengths.append((n, len(read_wav(out_dir / "spk1.wav")), len(read_wav(out_dir / "spk2.wav"))))
        same_training &= outputs[0] == outputs[1]
    exact_lengths = all(a == b == c for a, b, c in lengths)
    report(8, "checkpoint round trip and determinism", bit_exact and exact_lengths and same_training,
           f"bit-exact reload: {bit_exact}; output lengths equal input for N in (1000, 1237, 4001): "
           f"{exact_lengths}; repeated training and separation identical: {same_training}")
