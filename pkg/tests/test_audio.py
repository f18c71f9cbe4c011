import struct

import numpy as np
import pytest

from transmask.audio import (AudioBuffer, UnsupportedFormatError, WavParseError, read_wav, repeat,
                             write_wav)


def _wav_bytes(payload, tag=1, channels=1, rate=8000, bits=16):
    align = channels * bits // 8
    fmt = struct.pack("<4sIHHIIHH", b"fmt ", 16, tag, channels, rate, rate * align, align, bits)
    data = struct.pack("<4sI", b"data", len(payload)) + payload
    return struct.pack("<4sI4s", b"RIFF", 4 + len(fmt) + len(data), b"WAVE") + fmt + data


def test_pcm16_scaling(tmp_path):
    path = tmp_path / "a.wav"
    path.write_bytes(_wav_bytes(np.array([0, 16384, -32768], "<i2").tobytes()))
    buf = read_wav(path)
    np.testing.assert_array_equal(buf.samples, [0.0, 0.5, -1.0])
    assert buf.sample_rate == 8000
    assert buf.samples.dtype == np.float32


def test_stereo_is_averaged(tmp_path):
    path = tmp_path / "s.wav"
    frames = np.array([[16384, 0], [-32768, -32768]], "<i2")
    path.write_bytes(_wav_bytes(frames.tobytes(), channels=2))
    np.testing.assert_array_equal(read_wav(path).samples, [0.25, -1.0])


def test_float32_round_trip_is_exact(tmp_path, rng):
    x = rng.uniform(-1, 1, 333).astype(np.float32)
    write_wav(AudioBuffer(x, 16000), tmp_path / "f.wav")
    back = read_wav(tmp_path / "f.wav")
    np.testing.assert_array_equal(back.samples, x)
    assert back.sample_rate == 16000


def test_pcm16_round_trip_within_one_lsb(tmp_path, rng):
    x = rng.uniform(-1, 1, 500).astype(np.float32)
    write_wav(AudioBuffer(x), tmp_path / "p.wav", encoding="pcm16")
    assert np.max(np.abs(read_wav(tmp_path / "p.wav").samples - x)) <= 1 / 32768


def test_write_clamps(tmp_path):
    write_wav(AudioBuffer([2.0, -3.0, 0.5]), tmp_path / "c.wav")
    np.testing.assert_array_equal(read_wav(tmp_path / "c.wav").samples, [1.0, -1.0, 0.5])


def test_bad_magic_reports_offset(tmp_path):
    path = tmp_path / "bad.wav"
    path.write_bytes(b"RIFX" + bytes(40))
    with pytest.raises(WavParseError) as info:
        read_wav(path)
    assert info.value.offset == 0


def test_truncated_chunk_reports_offset(tmp_path):
    blob = _wav_bytes(np.zeros(10, "<i2").tobytes())
    path = tmp_path / "t.wav"
    path.write_bytes(blob[:-6])
    with pytest.raises(WavParseError) as info:
        read_wav(path)
    assert info.value.offset == 36


def test_unsupported_encoding(tmp_path):
    path = tmp_path / "u.wav"
    path.write_bytes(_wav_bytes(bytes(6), bits=24))
    with pytest.raises(UnsupportedFormatError):
        read_wav(path)
    path.write_bytes(_wav_bytes(bytes(4), tag=6, bits=8))  # A-law
    with pytest.raises(UnsupportedFormatError):
        read_wav(path)


def test_empty_buffer_rejected():
    with pytest.raises(ValueError):
        AudioBuffer(np.zeros(0))


def test_repeat_tiles():
    buf = repeat(AudioBuffer([1.0, 2.0], 8000), 3)
    np.testing.assert_array_equal(buf.samples, [1, 2, 1, 2, 1, 2])
    assert buf.duration == 6 / 8000
