import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import tiny_config
from transmask.checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from transmask.data import SyntheticMixSpec, generate_dataset, make_item
from transmask.separator import ConfigError, init_params
from transmask.tensor import Tensor
from transmask.trainer import AdamState, adam_step, clip_by_global_norm, evaluate_loss, train

SMALL_DATA = SyntheticMixSpec(n_items=4, n_valid=2, duration=0.05)


# -------------------------------------------------------------------- data


def test_same_seed_same_item():
    spec = SyntheticMixSpec(seed=3, duration=0.1)
    a, b = make_item(spec, 0), make_item(spec, 0)
    np.testing.assert_array_equal(a.mixture.samples, b.mixture.samples)
    assert not np.array_equal(make_item(spec, 1).mixture.samples, a.mixture.samples)
    assert not np.array_equal(make_item(SyntheticMixSpec(seed=4, duration=0.1), 0).mixture.samples,
                              a.mixture.samples)


def test_mixture_is_clipped_sum_of_references():
    item = make_item(SyntheticMixSpec(duration=0.5), 5)
    total = item.references.astype(np.float64).sum(axis=0)
    np.testing.assert_allclose(item.mixture.samples, np.clip(total, -1, 1), atol=1e-6)
    inside = np.abs(total) < 1
    np.testing.assert_allclose(item.mixture.samples[inside], total[inside], atol=1e-6)


def test_splits_are_disjoint_and_sized():
    data = generate_dataset(SMALL_DATA)
    assert [it.index for it in data.train] == [0, 2, 4, 6]
    assert [it.index for it in data.valid] == [1, 3]


@pytest.mark.parametrize("index", range(6))
def test_families_are_spectrally_disjoint(index):
    spec = SyntheticMixSpec(duration=1.0)
    low, high = make_item(spec, index).references.astype(np.float64)
    freqs = np.fft.rfftfreq(low.size, 1 / spec.sample_rate)
    window = np.hanning(low.size)

    def fraction(x, keep):
        power = np.abs(np.fft.rfft(x * window)) ** 2
        return power[keep].sum() / power.sum()

    # Hann leakage falls off quickly; 100 Hz of guard band leaves far less than 1e-6 of the energy
    assert fraction(low, freqs > 1000) < 1e-6
    assert fraction(high, freqs < 1000) < 1e-6


def test_overlapping_bands_rejected():
    with pytest.raises(ValueError):
        SyntheticMixSpec(band_a=(100, 1200), band_b=(1100, 1900))


# ---------------------------------------------------------------- optimiser


def test_adam_first_step_oracle():
    # frozen from a 30-digit evaluation of the bias-corrected update
    p = {"w": Tensor(np.array([1.0, -2.0]), dtype=np.float64)}
    adam_step(p, {"w": np.array([0.5, -0.1])}, AdamState(), lr=0.1)
    np.testing.assert_allclose(p["w"].data, [0.9000000019999999600000008, -1.90000000999999900000009999999],
                               rtol=0, atol=1e-15)


def test_adam_zero_gradient_is_a_no_op():
    p = {"w": Tensor(np.array([1.0, -2.0]), dtype=np.float64)}
    adam_step(p, {"w": np.zeros(2)}, AdamState(), lr=0.1)
    np.testing.assert_array_equal(p["w"].data, [1.0, -2.0])


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 1000), max_norm=st.floats(0.01, 10.0))
def test_clipping_preserves_direction(seed, max_norm):
    rng = np.random.default_rng(seed)
    grads = {"a": rng.standard_normal(3) * 5, "b": rng.standard_normal((2, 2)) * 5}
    clipped, norm = clip_by_global_norm(grads, max_norm)
    new_norm = np.sqrt(sum(np.sum(g ** 2) for g in clipped.values()))
    assert new_norm <= max_norm * (1 + 1e-9) or np.isclose(new_norm, norm)
    ratio = clipped["a"][0] / grads["a"][0]
    assert ratio > 0
    for k in grads:
        np.testing.assert_allclose(clipped[k], grads[k] * ratio, rtol=1e-12)


# ---------------------------------------------------------------- training


def test_smoke_train_logs_records_and_picks_best():
    result = train(tiny_config(), SMALL_DATA, epochs=2, seed=0)
    assert [r["epoch"] for r in result.records] == [1, 2]
    assert set(result.records[0]) == {"epoch", "train_loss", "valid_si_snri", "wall_seconds"}
    best = max(result.records, key=lambda r: r["valid_si_snri"])
    assert result.best_epoch == best["epoch"]
    assert np.all(np.isfinite([r["train_loss"] for r in result.records]))


def test_training_reduces_loss_for_every_seed():
    cfg = tiny_config(n_layers=1)
    spec = SyntheticMixSpec(n_items=8, n_valid=1, duration=0.1)
    data = generate_dataset(spec)
    for seed in range(3):
        before = evaluate_loss(cfg, init_params(cfg, seed), data.train)
        result = train(cfg, spec, epochs=1, lr=3e-3, seed=seed, dataset=data)
        assert evaluate_loss(cfg, result.params, data.train) < before


def test_training_is_deterministic():
    a = train(tiny_config(), SMALL_DATA, epochs=1, seed=5)
    b = train(tiny_config(), SMALL_DATA, epochs=1, seed=5)
    strip = lambda recs: [{k: v for k, v in r.items() if k != "wall_seconds"} for r in recs]
    assert strip(a.records) == strip(b.records)
    for k in a.checkpoint.params:
        assert np.array_equal(a.checkpoint.params[k], b.checkpoint.params[k])


def test_sample_rate_mismatch_is_rejected():
    with pytest.raises(ConfigError):
        train(tiny_config(), SyntheticMixSpec(sample_rate=16000, duration=0.05, n_items=1, n_valid=1), epochs=1)


# -------------------------------------------------------------- checkpoints


def test_checkpoint_round_trip_is_bit_exact(tmp_path, tiny):
    ckpt = Checkpoint.from_tensors(tiny, init_params(tiny, 9), epoch=3)
    save_checkpoint(ckpt, tmp_path / "m.ckpt")
    back = load_checkpoint(tmp_path / "m.ckpt", expected_config=tiny)
    assert back.config == tiny and back.meta == {"epoch": 3}
    assert list(back.params) == list(ckpt.params)
    for k, v in ckpt.params.items():
        assert back.params[k].tobytes() == v.tobytes()
    save_checkpoint(back, tmp_path / "again.ckpt")
    assert (tmp_path / "again.ckpt").read_bytes() == (tmp_path / "m.ckpt").read_bytes()


def test_truncated_checkpoint_is_rejected(tmp_path, tiny):
    save_checkpoint(Checkpoint.from_tensors(tiny, init_params(tiny)), tmp_path / "m.ckpt")
    blob = (tmp_path / "m.ckpt").read_bytes()
    (tmp_path / "cut.ckpt").write_bytes(blob[:-4])
    with pytest.raises(CheckpointError, match="payload"):
        load_checkpoint(tmp_path / "cut.ckpt")
    (tmp_path / "junk.ckpt").write_bytes(b"hello")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "junk.ckpt")


def test_checkpoint_config_mismatch(tmp_path, tiny):
    save_checkpoint(Checkpoint.from_tensors(tiny, init_params(tiny)), tmp_path / "m.ckpt")
    with pytest.raises(CheckpointError, match="does not match"):
        load_checkpoint(tmp_path / "m.ckpt", expected_config=tiny_config(n_layers=1))


def test_checkpoint_version_mismatch(tmp_path, tiny):
    save_checkpoint(Checkpoint.from_tensors(tiny, init_params(tiny)), tmp_path / "m.ckpt")
    blob = (tmp_path / "m.ckpt").read_bytes()
    (tmp_path / "v2.ckpt").write_bytes(blob.replace(b"TMCKPT 1", b"TMCKPT 2", 1))
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(tmp_path / "v2.ckpt")
