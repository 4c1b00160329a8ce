"""16-bit mono PCM RIFF/WAVE reader and writer."""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .signal import Waveform

PCM = 0x0001


class WavFormatError(ValueError):
    pass


def to_pcm16(samples: np.ndarray) -> np.ndarray:
    scaled = np.round(np.asarray(samples, dtype=np.float64) * 32767.0)
    return np.clip(scaled, -32768, 32767).astype("<i2")


def from_pcm16(data: np.ndarray) -> np.ndarray:
    return data.astype(np.float64) / 32768.0


def encode_wav(wave: Waveform) -> bytes:
    data = to_pcm16(wave.samples).tobytes()
    fmt = struct.pack("<HHIIHH", PCM, 1, wave.sample_rate, wave.sample_rate * 2, 2, 16)
    body = b"WAVE" + b"fmt " + struct.pack("<I", len(fmt)) + fmt + b"data" + struct.pack("<I", len(data)) + data
    if len(data) % 2:
        body += b"\x00"
    return b"RIFF" + struct.pack("<I", len(body)) + body


def write_wav(path, wave: Waveform) -> None:
    Path(path).write_bytes(encode_wav(wave))


def decode_wav(blob: bytes, name: str = "<bytes>") -> Waveform:
    if len(blob) < 12 or blob[:4] != b"RIFF" or blob[8:12] != b"WAVE":
        raise WavFormatError(f"{name}: not a RIFF/WAVE file")
    pos = 12
    fmt = None
    data = None
    while pos + 8 <= len(blob):
        chunk_id = blob[pos:pos + 4]
        (size,) = struct.unpack("<I", blob[pos + 4:pos + 8])
        payload = blob[pos + 8:pos + 8 + size]
        if len(payload) < size:
            raise WavFormatError(f"{name}: truncated {chunk_id!r} chunk")
        if chunk_id == b"fmt ":
            if size < 16:
                raise WavFormatError(f"{name}: fmt chunk too short ({size} bytes)")
            fmt = struct.unpack("<HHIIHH", payload[:16])
        elif chunk_id == b"data":
            data = payload
        pos += 8 + size + (size & 1)
    if fmt is None:
        raise WavFormatError(f"{name}: missing fmt chunk")
    if data is None:
        raise WavFormatError(f"{name}: missing data chunk")
    format_tag, channels, rate, _, _, bits = fmt
    if format_tag != PCM:
        raise WavFormatError(f"{name}: unsupported format tag {format_tag:#06x}, only integer PCM (1) is read")
    if channels != 1:
        raise WavFormatError(f"{name}: expected mono audio, found {channels} channels")
    if bits != 16:
        raise WavFormatError(f"{name}: expected 16-bit samples, found {bits}-bit")
    if len(data) % 2:
        raise WavFormatError(f"{name}: odd data chunk length for 16-bit samples")
    return Waveform(from_pcm16(np.frombuffer(data, dtype="<i2")), rate)


def read_wav(path) -> Waveform:
    path = Path(path)
    return decode_wav(path.read_bytes(), name=str(path))
