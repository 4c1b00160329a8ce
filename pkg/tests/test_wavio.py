import io
import struct
import wave

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from ttrss.signal import Waveform
from ttrss.wavio import WavFormatError, decode_wav, encode_wav, read_wav, write_wav


def test_stdlib_reader_agrees(tmp_path, rng):
    x = rng.uniform(-0.9, 0.9, 333)
    write_wav(tmp_path / "a.wav", Waveform(x, 8000))
    with wave.open(str(tmp_path / "a.wav")) as w:
        assert (w.getnchannels(), w.getsampwidth(), w.getframerate(), w.getnframes()) == (1, 2, 8000, 333)
        ints = np.frombuffer(w.readframes(333), dtype="<i2")
    assert np.array_equal(ints, np.round(x * 32767).astype(int))
    back = read_wav(tmp_path / "a.wav")
    assert np.array_equal(back.samples, ints / 32768.0)


@given(arrays(np.float64, st.integers(1, 200), elements=st.floats(-1, 1)))
def test_round_trip_error_bound(x):
    back = decode_wav(encode_wav(Waveform(x, 16000)))
    assert back.sample_rate == 16000
    # write scales by 32767 and read by 32768: half a step of rounding plus |x| / 32768
    assert np.max(np.abs(back.samples - x)) <= 1.5 / 32768 + 1e-12


def test_clipping():
    back = decode_wav(encode_wav(Waveform(np.array([2.0, -2.0]), 8000)))
    assert back.samples.tolist() == [32767 / 32768, -1.0]


def _stdlib_wav(channels=1, width=2):
    buf = io.BytesIO()
    with wave.open(buf, "wb") as w:
        w.setnchannels(channels)
        w.setsampwidth(width)
        w.setframerate(8000)
        w.writeframes(b"\x00" * channels * width * 4)
    return buf.getvalue()


def test_rejects_stereo_and_other_widths():
    assert len(decode_wav(_stdlib_wav())) == 4
    with pytest.raises(WavFormatError, match="mono"):
        decode_wav(_stdlib_wav(channels=2))
    with pytest.raises(WavFormatError, match="16-bit"):
        decode_wav(_stdlib_wav(width=3))


def test_rejects_float_format():
    blob = bytearray(_stdlib_wav())
    blob[20:22] = struct.pack("<H", 3)
    with pytest.raises(WavFormatError, match="format tag"):
        decode_wav(bytes(blob))


def test_rejects_garbage():
    with pytest.raises(WavFormatError):
        decode_wav(b"not a wave file at all")
