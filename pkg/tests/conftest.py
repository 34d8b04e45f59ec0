"""Shared test helpers: hand-rolled SMF assembly and random piece generation.

The SMF builders here are written independently of textmuse.midi_io.write_smf
so parser tests exercise bytes that the library did not produce itself.
"""

from __future__ import annotations

import random

import pytest

from textmuse.midi_io import QuantizedNote, QuantizedPiece


def varlen(value: int) -> bytes:
    """Encode a variable-length quantity (independent reference encoder)."""
    chunks = []
    while True:
        chunks.append(value & 0x7F)
        value >>= 7
        if value == 0:
            break
    out = bytes(0x80 | c for c in reversed(chunks[1:])) + bytes([chunks[0]])
    return out


def smf_bytes(track_bodies: list[bytes], fmt: int = 1, division: int = 480) -> bytes:
    """Assemble a complete SMF from raw track bodies (end-of-track included)."""
    data = b"MThd" + (6).to_bytes(4, "big")
    data += fmt.to_bytes(2, "big") + len(track_bodies).to_bytes(2, "big")
    data += division.to_bytes(2, "big")
    for body in track_bodies:
        data += b"MTrk" + len(body).to_bytes(4, "big") + body
    return data


def end_of_track(delta: int = 0) -> bytes:
    return varlen(delta) + b"\xff\x2f\x00"


def tempo_meta(delta: int, us_per_quarter: int) -> bytes:
    return varlen(delta) + b"\xff\x51\x03" + us_per_quarter.to_bytes(3, "big")


def note_on(delta: int, pitch: int, velocity: int, channel: int = 0) -> bytes:
    return varlen(delta) + bytes([0x90 | channel, pitch, velocity])


def note_off(delta: int, pitch: int, channel: int = 0) -> bytes:
    return varlen(delta) + bytes([0x80 | channel, pitch, 0])


def random_piece(rng: random.Random, max_bars: int = 32) -> QuantizedPiece:
    """A random grid-aligned piece.

    Notes of equal pitch never overlap in time: FIFO on/off pairing cannot
    tell overlapping same-pitch notes apart, so they sit outside the
    round-trip domain (as in real single-channel MIDI).
    """
    bars = rng.randint(1, max_bars)
    tempo = rng.choice([35, 68, 97, 110, 119, 140, 203, 224])
    notes = []
    spans: dict[int, list[tuple[int, int]]] = {}
    for _ in range(rng.randint(0, 3 * bars)):
        bar = rng.randrange(bars)
        subbeat = rng.randrange(16)
        pitch = rng.randrange(128)
        duration = rng.randint(1, 16)
        start = bar * 16 + subbeat
        if any(start < e and start + duration > s for s, e in spans.get(pitch, [])):
            continue
        spans.setdefault(pitch, []).append((start, start + duration))
        notes.append(QuantizedNote(bar, subbeat, pitch, rng.randint(1, 127), duration))
    notes.sort()
    return QuantizedPiece(tuple(notes), tempo, bars)


@pytest.fixture
def rng() -> random.Random:
    return random.Random(0xC0FFEE)
