"""Standard MIDI File reading/writing and 16th-note grid quantization.

Reads format 0/1 SMF data into a flat, tick-sorted event list, quantizes
note events onto a 16 sub-beats per bar grid (fixed 4/4), and writes
quantized pieces back out as single-track format 0 files at 480 ticks
per quarter note.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

SUBBEATS_PER_BAR = 16
OUTPUT_TICKS_PER_QUARTER = 480
OUTPUT_SUBBEAT_TICKS = OUTPUT_TICKS_PER_QUARTER // 4
DEFAULT_TEMPO_BPM = 120

# data-byte counts for channel messages, keyed by status & 0xF0
_CHANNEL_MSG_LEN = {
    0x80: 2,
    0x90: 2,
    0xA0: 2,
    0xB0: 2,
    0xC0: 1,
    0xD0: 1,
    0xE0: 2,
}


class SmfParseError(ValueError):
    """Malformed SMF input. ``offset`` is the byte position of the fault."""

    def __init__(self, offset: int, message: str):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


@dataclass(frozen=True)
class MidiEvent:
    """One timed event. ``kind`` is 'note_on', 'note_off', or 'tempo'."""

    tick: int
    kind: str
    channel: int = 0
    pitch: int = 0
    velocity: int = 0
    tempo_us: int = 0

    def __post_init__(self):
        if self.tick < 0:
            raise ValueError(f"negative tick {self.tick}")
        if self.kind not in ("note_on", "note_off", "tempo"):
            raise ValueError(f"unknown event kind {self.kind!r}")
        if self.kind != "tempo":
            if not 0 <= self.pitch <= 127:
                raise ValueError(f"pitch {self.pitch} out of range 0..127")
            if not 0 <= self.velocity <= 127:
                raise ValueError(f"velocity {self.velocity} out of range 0..127")
        elif self.tempo_us <= 0:
            raise ValueError(f"non-positive tempo {self.tempo_us} us/quarter")


@dataclass(frozen=True)
class MidiPiece:
    """Parsed SMF content: tick-sorted events plus the total tick extent."""

    ticks_per_quarter: int
    events: tuple[MidiEvent, ...]
    length_ticks: int = 0

    def __post_init__(self):
        if self.ticks_per_quarter <= 0:
            raise ValueError(f"ticks_per_quarter must be positive, got {self.ticks_per_quarter}")
        if self.length_ticks < 0:
            raise ValueError("negative length_ticks")
        prev = 0
        for ev in self.events:
            if ev.tick < prev:
                raise ValueError(f"events not sorted by tick at tick {ev.tick}")
            prev = ev.tick


@dataclass(frozen=True, order=True)
class QuantizedNote:
    """A note on the sub-beat grid. ``duration`` is in sub-beats, 1..16."""

    bar: int
    subbeat: int
    pitch: int
    velocity: int
    duration: int

    def __post_init__(self):
        if self.bar < 0:
            raise ValueError(f"negative bar {self.bar}")
        if not 0 <= self.subbeat < SUBBEATS_PER_BAR:
            raise ValueError(f"subbeat {self.subbeat} out of range 0..15")
        if not 0 <= self.pitch <= 127:
            raise ValueError(f"pitch {self.pitch} out of range 0..127")
        if not 0 <= self.velocity <= 127:
            raise ValueError(f"velocity {self.velocity} out of range 0..127")
        if not 1 <= self.duration <= SUBBEATS_PER_BAR:
            raise ValueError(f"duration {self.duration} out of range 1..16")


@dataclass(frozen=True)
class QuantizedPiece:
    """Grid-aligned piece: sorted notes, one tempo, and a bar count.

    ``unclosed_notes`` counts note-ons that had to be force-closed at the
    end of the input; it is diagnostic only and excluded from equality.
    """

    notes: tuple[QuantizedNote, ...]
    tempo_bpm: int
    bar_count: int
    unclosed_notes: int = field(default=0, compare=False)

    def __post_init__(self):
        if self.tempo_bpm <= 0:
            raise ValueError(f"tempo_bpm must be positive, got {self.tempo_bpm}")
        if self.bar_count < 0:
            raise ValueError("negative bar_count")
        prev = None
        for n in self.notes:
            if n.bar >= self.bar_count:
                raise ValueError(f"note bar {n.bar} outside bar_count {self.bar_count}")
            key = (n.bar, n.subbeat, n.pitch, n.velocity, n.duration)
            if prev is not None and key < prev:
                raise ValueError("notes not sorted")
            prev = key


def _round_half_up(x: float) -> int:
    return math.floor(x + 0.5)


def _read_u16(data: bytes, pos: int) -> int:
    return int.from_bytes(data[pos : pos + 2], "big")


def _read_u32(data: bytes, pos: int) -> int:
    return int.from_bytes(data[pos : pos + 4], "big")


def _read_varlen(data: bytes, pos: int) -> tuple[int, int]:
    """Decode a variable-length quantity; returns (value, next position)."""
    value = 0
    for i in range(4):
        if pos >= len(data):
            raise SmfParseError(pos, "truncated variable-length quantity")
        byte = data[pos]
        pos += 1
        value = (value << 7) | (byte & 0x7F)
        if not byte & 0x80:
            return value, pos
    raise SmfParseError(pos, "variable-length quantity longer than 4 bytes")


def _parse_track(data: bytes, pos: int, end: int, events: list[MidiEvent]) -> int:
    """Parse one MTrk body in data[pos:end]; returns the track's end tick."""
    tick = 0
    last_status = None
    while pos < end:
        delta, pos = _read_varlen(data, pos)
        tick += delta
        if pos >= end:
            raise SmfParseError(pos, "truncated event")
        byte = data[pos]
        if byte >= 0x80:
            status = byte
            pos += 1
        else:
            if last_status is None:
                raise SmfParseError(pos, "data byte with no running status")
            status = last_status

        if status == 0xFF:
            last_status = None
            if pos >= end:
                raise SmfParseError(pos, "truncated meta event")
            meta_type = data[pos]
            pos += 1
            length, pos = _read_varlen(data, pos)
            if pos + length > end:
                raise SmfParseError(pos, "meta event runs past track end")
            payload = data[pos : pos + length]
            pos += length
            if meta_type == 0x2F:
                return tick
            if meta_type == 0x51:
                if length != 3:
                    raise SmfParseError(pos - length, f"set-tempo length {length}, expected 3")
                us = int.from_bytes(payload, "big")
                if us == 0:
                    raise SmfParseError(pos - length, "set-tempo of 0 microseconds")
                events.append(MidiEvent(tick, "tempo", tempo_us=us))
        elif status in (0xF0, 0xF7):
            last_status = None
            length, pos = _read_varlen(data, pos)
            if pos + length > end:
                raise SmfParseError(pos, "sysex runs past track end")
            pos += length
        elif status >= 0xF0:
            raise SmfParseError(pos - 1, f"unsupported system message 0x{status:02X}")
        else:
            last_status = status
            n = _CHANNEL_MSG_LEN[status & 0xF0]
            if pos + n > end:
                raise SmfParseError(pos, "truncated channel message")
            d = data[pos : pos + n]
            pos += n
            if any(b >= 0x80 for b in d):
                raise SmfParseError(pos - n, "status byte where data byte expected")
            kind = status & 0xF0
            channel = status & 0x0F
            if kind == 0x90:
                if d[1] == 0:
                    events.append(MidiEvent(tick, "note_off", channel, d[0], 0))
                else:
                    events.append(MidiEvent(tick, "note_on", channel, d[0], d[1]))
            elif kind == 0x80:
                events.append(MidiEvent(tick, "note_off", channel, d[0], d[1]))
    # track body ended without an end-of-track meta; tolerate it
    return tick


def parse_smf(data: bytes) -> MidiPiece:
    """Parse SMF bytes (format 0 or 1) into a MidiPiece.

    Keeps note-on/note-off/set-tempo events only; note-on with velocity 0
    becomes note-off. Raises SmfParseError on malformed input.
    """
    if len(data) < 14 or data[:4] != b"MThd":
        raise SmfParseError(0, "missing MThd header")
    header_len = _read_u32(data, 4)
    if header_len < 6:
        raise SmfParseError(4, f"MThd length {header_len} < 6")
    fmt = _read_u16(data, 8)
    n_tracks = _read_u16(data, 10)
    division = _read_u16(data, 12)
    if fmt not in (0, 1):
        raise SmfParseError(8, f"unsupported SMF format {fmt}")
    if division & 0x8000:
        raise SmfParseError(12, "SMPTE time division unsupported")
    if division == 0:
        raise SmfParseError(12, "zero ticks per quarter")

    pos = 8 + header_len
    events: list[MidiEvent] = []
    length = 0
    for _ in range(n_tracks):
        if pos + 8 > len(data) or data[pos : pos + 4] != b"MTrk":
            raise SmfParseError(pos, "missing MTrk chunk")
        track_len = _read_u32(data, pos + 4)
        body_start = pos + 8
        body_end = body_start + track_len
        if body_end > len(data):
            raise SmfParseError(pos + 4, "track length runs past end of file")
        end_tick = _parse_track(data, body_start, body_end, events)
        length = max(length, end_tick)
        pos = body_end

    events.sort(key=lambda ev: ev.tick)
    length = max([length] + [ev.tick for ev in events])
    return MidiPiece(division, tuple(events), length)


def quantize(piece: MidiPiece, default_bpm: int = DEFAULT_TEMPO_BPM) -> QuantizedPiece:
    """Snap note events to the 16th-note grid of ``piece``.

    Grid unit is ticks_per_quarter / 4; onsets round to nearest with ties
    up, durations round the same way then clamp to 1..16 sub-beats. Note
    pairing is FIFO per (channel, pitch). Tempo is the piece's first tempo
    event (rounded to integer bpm) or ``default_bpm`` if there is none.
    """
    grid = piece.ticks_per_quarter / 4

    open_notes: dict[tuple[int, int], list[tuple[int, int]]] = {}
    closed: list[tuple[int, int, int, int]] = []
    tempo_bpm = None
    last_tick = 0
    for ev in piece.events:
        last_tick = ev.tick
        if ev.kind == "note_on":
            open_notes.setdefault((ev.channel, ev.pitch), []).append((ev.tick, ev.velocity))
        elif ev.kind == "note_off":
            queue = open_notes.get((ev.channel, ev.pitch))
            if queue:
                on_tick, velocity = queue.pop(0)
                closed.append((on_tick, ev.tick, ev.pitch, velocity))
        elif tempo_bpm is None:
            tempo_bpm = _round_half_up(60_000_000 / ev.tempo_us)
    if tempo_bpm is None:
        tempo_bpm = default_bpm

    piece_end = max(piece.length_ticks, last_tick)
    unclosed = 0
    for (_, pitch), queue in open_notes.items():
        for on_tick, velocity in queue:
            closed.append((on_tick, max(piece_end, on_tick), pitch, velocity))
            unclosed += 1

    notes = []
    for on_tick, off_tick, pitch, velocity in closed:
        onset = _round_half_up(on_tick / grid)
        duration = min(max(_round_half_up((off_tick - on_tick) / grid), 1), SUBBEATS_PER_BAR)
        bar, subbeat = divmod(onset, SUBBEATS_PER_BAR)
        notes.append(QuantizedNote(bar, subbeat, pitch, velocity, duration))
    notes.sort()

    bar_count = _round_half_up(piece_end / grid) // SUBBEATS_PER_BAR
    if notes:
        bar_count = max(bar_count, notes[-1].bar + 1)
    return QuantizedPiece(tuple(notes), tempo_bpm, bar_count, unclosed)


def _write_varlen(value: int) -> bytes:
    out = [value & 0x7F]
    value >>= 7
    while value:
        out.append(0x80 | (value & 0x7F))
        value >>= 7
    return bytes(reversed(out))


def write_smf(piece: QuantizedPiece) -> bytes:
    """Serialize a QuantizedPiece as a single-track format 0 SMF at 480 tpq.

    Emits one set-tempo at tick 0, note on/off pairs on channel 0, and an
    end-of-track placed at the later of bar_count * 16 sub-beats and the
    last note-off, so empty trailing bars survive a parse/quantize round
    trip.
    """
    tempo_us = _round_half_up(60_000_000 / piece.tempo_bpm)
    # (tick, sort class, pitch, message); offs sort before ons at equal ticks
    messages: list[tuple[int, int, int, bytes]] = [
        (0, 0, 0, b"\xff\x51\x03" + tempo_us.to_bytes(3, "big"))
    ]
    end_tick = piece.bar_count * SUBBEATS_PER_BAR * OUTPUT_SUBBEAT_TICKS
    for n in piece.notes:
        on = (n.bar * SUBBEATS_PER_BAR + n.subbeat) * OUTPUT_SUBBEAT_TICKS
        off = on + n.duration * OUTPUT_SUBBEAT_TICKS
        # velocity 0 would read back as a note-off, so floor it at 1
        messages.append((on, 2, n.pitch, bytes([0x90, n.pitch, max(1, n.velocity)])))
        messages.append((off, 1, n.pitch, bytes([0x80, n.pitch, 0])))
        end_tick = max(end_tick, off)
    messages.sort(key=lambda m: m[:3])

    body = bytearray()
    tick = 0
    for ev_tick, _, _, msg in messages:
        body += _write_varlen(ev_tick - tick)
        body += msg
        tick = ev_tick
    body += _write_varlen(end_tick - tick)
    body += b"\xff\x2f\x00"

    header = b"MThd" + (6).to_bytes(4, "big")
    header += (0).to_bytes(2, "big") + (1).to_bytes(2, "big")
    header += OUTPUT_TICKS_PER_QUARTER.to_bytes(2, "big")
    return header + b"MTrk" + len(body).to_bytes(4, "big") + bytes(body)
