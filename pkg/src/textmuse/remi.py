"""Event-token representation of quantized pieces.

The vocabulary has 405 tokens across eight families:

    Bar (1)                bar line
    Beat (16)              sub-beat position 0..15 inside the bar
    Tempo (65)             32..224 bpm in steps of 3
    Note_Pitch (128)       MIDI pitch 0..127
    Note_Velocity (44)     40..126 in steps of 2
    Note_Duration (17)     0..16 sub-beats (0 is representable, played as 1)
    Chord (133)            12 roots x 11 qualities + N_N for no chord
    EOS (1)                end of sequence

A piece encodes as: per bar a Bar token, then for each occupied sub-beat a
Beat token followed by chord change, tempo (first sub-beat of the piece
only), and note triples Note_Pitch/Note_Velocity/Note_Duration. Chords are
tracked per half bar (sub-beats 0 and 8) and re-emitted only on change.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

from .midi_io import SUBBEATS_PER_BAR, QuantizedNote, QuantizedPiece

TEMPO_MIN, TEMPO_MAX, TEMPO_STEP = 32, 224, 3
VELOCITY_MIN, VELOCITY_MAX, VELOCITY_STEP = 40, 126, 2
DURATION_MAX = 16
SUBBEAT_TICKS = 120  # tick unit used by the serialized Note_Duration values

DEFAULT_TEMPO = 110
DEFAULT_VELOCITY = 76
DEFAULT_DURATION = 4

PITCH_CLASS_NAMES = ("C", "C#", "D", "D#", "E", "F", "F#", "G", "G#", "A", "A#", "B")

# chord qualities and their pitch-class interval templates, in tie-break order
QUALITIES = ("M", "m", "7", "M7", "m7", "m7b5", "o", "o7", "+", "sus2", "sus4")
QUALITY_INTERVALS = {
    "M": (0, 4, 7),
    "m": (0, 3, 7),
    "7": (0, 4, 7, 10),
    "M7": (0, 4, 7, 11),
    "m7": (0, 3, 7, 10),
    "m7b5": (0, 3, 6, 10),
    "o": (0, 3, 6),
    "o7": (0, 3, 6, 9),
    "+": (0, 4, 8),
    "sus2": (0, 2, 7),
    "sus4": (0, 5, 7),
}

HALF_BAR = SUBBEATS_PER_BAR // 2


class RemiDecodeError(ValueError):
    """Structural fault in a token stream. ``index`` is the token position."""

    def __init__(self, index: int, message: str):
        super().__init__(f"{message} (token index {index}; run repair() first)")
        self.index = index


@dataclass(frozen=True)
class ChordLabel:
    """A detected chord: root pitch class 0..11 plus quality, or no chord."""

    root: int | None
    quality: str | None

    def __post_init__(self):
        if (self.root is None) != (self.quality is None):
            raise ValueError("root and quality must both be set or both be None")
        if self.root is not None:
            if not 0 <= self.root <= 11:
                raise ValueError(f"root {self.root} out of range 0..11")
            if self.quality not in QUALITIES:
                raise ValueError(f"unknown quality {self.quality!r}")

    @property
    def is_none(self) -> bool:
        return self.root is None

    @property
    def name(self) -> str:
        if self.root is None:
            return "N_N"
        return f"{PITCH_CLASS_NAMES[self.root]}_{self.quality}"

    @classmethod
    def from_name(cls, name: str) -> "ChordLabel":
        if name == "N_N":
            return NO_CHORD
        root_name, _, quality = name.partition("_")
        if root_name in PITCH_CLASS_NAMES and quality in QUALITIES:
            return cls(PITCH_CLASS_NAMES.index(root_name), quality)
        raise ValueError(f"unknown chord name {name!r}")


NO_CHORD = ChordLabel(None, None)


@dataclass(frozen=True)
class RemiToken:
    """One vocabulary entry: a family name plus its value."""

    name: str
    value: int | str | None


class RemiVocab:
    """The fixed 405-token vocabulary with id lookup in both directions."""

    def __init__(self):
        entries: list[RemiToken] = [RemiToken("Bar", None)]
        entries += [RemiToken("Beat", i) for i in range(SUBBEATS_PER_BAR)]
        entries += [
            RemiToken("Tempo", t) for t in range(TEMPO_MIN, TEMPO_MAX + 1, TEMPO_STEP)
        ]
        entries += [RemiToken("Note_Pitch", p) for p in range(128)]
        entries += [
            RemiToken("Note_Velocity", v)
            for v in range(VELOCITY_MIN, VELOCITY_MAX + 1, VELOCITY_STEP)
        ]
        entries += [RemiToken("Note_Duration", d) for d in range(DURATION_MAX + 1)]
        entries.append(RemiToken("Chord", "N_N"))
        entries += [
            RemiToken("Chord", f"{PITCH_CLASS_NAMES[root]}_{quality}")
            for root in range(12)
            for quality in QUALITIES
        ]
        entries.append(RemiToken("EOS", None))
        self.entries: tuple[RemiToken, ...] = tuple(entries)
        self._ids = {(tok.name, tok.value): i for i, tok in enumerate(self.entries)}

    def __len__(self) -> int:
        return len(self.entries)

    def token(self, token_id: int) -> RemiToken:
        if not 0 <= token_id < len(self.entries):
            raise ValueError(f"token id {token_id} out of range 0..{len(self.entries) - 1}")
        return self.entries[token_id]

    def token_id(self, name: str, value: int | str | None = None) -> int:
        try:
            return self._ids[(name, value)]
        except KeyError:
            raise ValueError(f"no vocabulary entry {name}_{value}") from None

    def family_size(self, name: str) -> int:
        return sum(1 for tok in self.entries if tok.name == name)

    @property
    def bar_id(self) -> int:
        return self._ids[("Bar", None)]

    @property
    def eos_id(self) -> int:
        return self._ids[("EOS", None)]

    def beat_id(self, subbeat: int) -> int:
        return self.token_id("Beat", subbeat)

    def tempo_id(self, bpm: int) -> int:
        return self.token_id("Tempo", self.snap_tempo(bpm))

    def pitch_id(self, pitch: int) -> int:
        return self.token_id("Note_Pitch", pitch)

    def velocity_id(self, velocity: int) -> int:
        return self.token_id("Note_Velocity", self.snap_velocity(velocity))

    def duration_id(self, duration: int) -> int:
        return self.token_id("Note_Duration", duration)

    def chord_id(self, label: ChordLabel) -> int:
        return self.token_id("Chord", label.name)

    @staticmethod
    def snap_tempo(bpm: int) -> int:
        """Clamp to 32..224 and round to the nearest grid value (ties up)."""
        bpm = min(max(bpm, TEMPO_MIN), TEMPO_MAX)
        steps = (2 * (bpm - TEMPO_MIN) + TEMPO_STEP) // (2 * TEMPO_STEP)
        return TEMPO_MIN + TEMPO_STEP * steps

    @staticmethod
    def snap_velocity(velocity: int) -> int:
        """Clamp to 40..126 and round down to an even value."""
        velocity = min(max(velocity, VELOCITY_MIN), VELOCITY_MAX)
        return velocity - (velocity % 2)


VOCAB = RemiVocab()


def build_vocab() -> RemiVocab:
    """Construct a fresh vocabulary instance (the module-level VOCAB is shared)."""
    return RemiVocab()


@dataclass(frozen=True)
class RemiSequence:
    """Token ids plus the positions of the Bar tokens within them."""

    tokens: tuple[int, ...]
    bar_positions: tuple[int, ...]

    def __post_init__(self):
        expected = tuple(i for i, t in enumerate(self.tokens) if t == VOCAB.bar_id)
        if self.bar_positions != expected:
            raise ValueError("bar_positions do not match Bar token locations")
        for t in self.tokens:
            if not 0 <= t < len(VOCAB):
                raise ValueError(f"token id {t} out of vocabulary range")

    @classmethod
    def from_tokens(cls, tokens: Iterable[int]) -> "RemiSequence":
        toks = tuple(int(t) for t in tokens)
        bars = tuple(i for i, t in enumerate(toks) if t == VOCAB.bar_id)
        return cls(toks, bars)

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def bar_count(self) -> int:
        return len(self.bar_positions)


def _half_bar_labels(
    chords: Sequence[ChordLabel], bar_count: int
) -> list[ChordLabel]:
    """Normalize a chord list to one label per half bar (2 per bar)."""
    if len(chords) == 2 * bar_count:
        return list(chords)
    if len(chords) == bar_count:
        out = []
        for label in chords:
            out += [label, label]
        return out
    raise ValueError(
        f"need {bar_count} or {2 * bar_count} chord labels, got {len(chords)}"
    )


def encode(
    piece: QuantizedPiece,
    chords: Sequence[ChordLabel] | None = None,
    vocab: RemiVocab = VOCAB,
) -> RemiSequence:
    """Tokenize a quantized piece.

    ``chords`` may have one label per bar or per half bar; None runs
    detect_chords(). Velocities snap down to the even 40..126 grid and
    tempo snaps to the 32..224 step-3 grid. The single Tempo token sits at
    the piece's first sub-beat; a Chord token appears at sub-beats 0 and 8
    whenever the label differs from the previous half bar (always for the
    first half bar).
    """
    if chords is None:
        chords = detect_chords(piece)
    labels = _half_bar_labels(chords, piece.bar_count)

    by_position: dict[tuple[int, int], list[QuantizedNote]] = {}
    for note in piece.notes:
        by_position.setdefault((note.bar, note.subbeat), []).append(note)

    tokens: list[int] = []
    prev_label: ChordLabel | None = None
    tempo_pending = True
    for bar in range(piece.bar_count):
        tokens.append(vocab.bar_id)
        for subbeat in range(SUBBEATS_PER_BAR):
            marks: list[int] = []
            if subbeat % HALF_BAR == 0:
                label = labels[2 * bar + subbeat // HALF_BAR]
                if label != prev_label:
                    marks.append(vocab.chord_id(label))
                    prev_label = label
            if tempo_pending:
                marks.append(vocab.tempo_id(piece.tempo_bpm))
                tempo_pending = False
            notes = by_position.get((bar, subbeat), ())
            if marks or notes:
                tokens.append(vocab.beat_id(subbeat))
                tokens.extend(marks)
            for note in notes:
                tokens.append(vocab.pitch_id(note.pitch))
                tokens.append(vocab.velocity_id(note.velocity))
                tokens.append(vocab.duration_id(note.duration))
    tokens.append(vocab.eos_id)
    return RemiSequence.from_tokens(tokens)


def decode(
    seq: RemiSequence, vocab: RemiVocab = VOCAB
) -> tuple[QuantizedPiece, tuple[ChordLabel, ...]]:
    """Reconstruct the quantized piece and per-half-bar chords from tokens.

    Inverse of encode() on its image; arbitrary streams should go through
    repair() first. Raises RemiDecodeError on structural faults: a note
    without a preceding Beat, an incomplete Note_Pitch/Velocity/Duration
    triple, orphan velocity/duration tokens, or content after EOS.
    """
    bar = -1
    subbeat: int | None = None
    tempo: int | None = None
    notes: list[QuantizedNote] = []
    chord_marks: list[tuple[int, ChordLabel]] = []  # (half-bar window, label)
    pending: dict | None = None

    def close_pending(index: int):
        nonlocal pending
        if pending is None:
            return
        if pending["velocity"] is None or pending["duration"] is None:
            missing = "Note_Velocity" if pending["velocity"] is None else "Note_Duration"
            raise RemiDecodeError(index, f"note triple missing {missing}")
        notes.append(
            QuantizedNote(
                pending["bar"],
                pending["subbeat"],
                pending["pitch"],
                pending["velocity"],
                max(1, pending["duration"]),
            )
        )
        pending = None

    for i, token_id in enumerate(seq.tokens):
        tok = vocab.token(token_id)
        if tok.name == "Bar":
            close_pending(i)
            bar += 1
            subbeat = None
        elif tok.name == "Beat":
            close_pending(i)
            if bar < 0:
                raise RemiDecodeError(i, "Beat before any Bar")
            subbeat = tok.value
        elif tok.name == "Tempo":
            if tempo is None:
                tempo = tok.value
        elif tok.name == "Chord":
            if bar < 0:
                raise RemiDecodeError(i, "Chord before any Bar")
            window = 2 * bar + (1 if (subbeat or 0) >= HALF_BAR else 0)
            chord_marks.append((window, ChordLabel.from_name(tok.value)))
        elif tok.name == "Note_Pitch":
            close_pending(i)
            if bar < 0:
                raise RemiDecodeError(i, "note before any Bar")
            if subbeat is None:
                raise RemiDecodeError(i, "note before any Beat in its bar")
            pending = {
                "bar": bar,
                "subbeat": subbeat,
                "pitch": tok.value,
                "velocity": None,
                "duration": None,
            }
        elif tok.name == "Note_Velocity":
            if pending is None or pending["velocity"] is not None:
                raise RemiDecodeError(i, "Note_Velocity without an open note")
            pending["velocity"] = tok.value
        elif tok.name == "Note_Duration":
            if pending is None or pending["duration"] is not None:
                raise RemiDecodeError(i, "Note_Duration without an open note")
            pending["duration"] = tok.value
        else:  # EOS
            close_pending(i)
            if i != len(seq.tokens) - 1:
                raise RemiDecodeError(i, "content after EOS")
    close_pending(len(seq.tokens))

    bar_count = bar + 1 if bar >= 0 else 0
    notes.sort()
    piece = QuantizedPiece(tuple(notes), tempo if tempo is not None else DEFAULT_TEMPO, bar_count)

    labels: list[ChordLabel] = []
    marked = dict()
    for window, label in chord_marks:
        marked.setdefault(window, label)  # first mark in a window wins
    current = NO_CHORD
    for window in range(2 * bar_count):
        current = marked.get(window, current)
        labels.append(current)
    return piece, tuple(labels)


def detect_chords(piece: QuantizedPiece) -> list[ChordLabel]:
    """Template-matched chord labels, one per half bar (2 per bar).

    Pitch-class weights are note durations clipped to the half-bar window
    (held notes count). Score for (root, quality) is in-template weight
    minus out-of-template weight; ties break toward the lower root, then
    the earlier quality in QUALITIES. Windows with fewer than two distinct
    pitch classes get N_N.
    """
    labels: list[ChordLabel] = []
    for window in range(2 * piece.bar_count):
        start = window * HALF_BAR
        end = start + HALF_BAR
        weights = [0.0] * 12
        for note in piece.notes:
            onset = note.bar * SUBBEATS_PER_BAR + note.subbeat
            overlap = min(end, onset + note.duration) - max(start, onset)
            if overlap > 0:
                weights[note.pitch % 12] += overlap
        if sum(1 for w in weights if w > 0) < 2:
            labels.append(NO_CHORD)
            continue
        total = sum(weights)
        best, best_score = NO_CHORD, float("-inf")
        for root in range(12):
            for quality in QUALITIES:
                in_weight = sum(
                    weights[(root + iv) % 12] for iv in QUALITY_INTERVALS[quality]
                )
                score = 2 * in_weight - total
                if score > best_score:
                    best, best_score = ChordLabel(root, quality), score
        labels.append(best)
    return labels


def repair(seq: RemiSequence | Sequence[int], vocab: RemiVocab = VOCAB) -> RemiSequence:
    """Normalize an arbitrary token stream into a decodable one.

    Total (never raises on in-vocabulary ids) and idempotent. Rules:

    - the stream is truncated at the first EOS and ends with exactly one
    - a Bar is prepended when the stream does not start with one
    - at most one Chord per Bar/Beat span survives (the first)
    - the first Tempo anywhere is kept in place and the rest are dropped;
      when there is none, Tempo 110 is inserted after the first Beat
      (stepping over a chord that immediately follows it)
    - a Beat 0 is inserted before a note that would precede any Beat
    - each Note_Pitch is completed to a full triple using the next unclaimed
      velocity/duration before the following Bar/Beat/Note_Pitch, with
      defaults Velocity 76 and Duration 4; Duration 0 becomes 1; leftover
      velocity/duration tokens are dropped
    """
    ids = list(seq.tokens if isinstance(seq, RemiSequence) else seq)
    if vocab.eos_id in ids:
        ids = ids[: ids.index(vocab.eos_id)]

    out: list[int] = []
    in_bar = False
    bar_has_beat = False
    span_has_chord = False
    tempo_seen = False
    pending: list[int | None] | None = None  # [pitch, velocity, duration]

    def close_pending():
        nonlocal pending
        if pending is None:
            return
        pitch, velocity, duration = pending
        velocity = DEFAULT_VELOCITY if velocity is None else velocity
        duration = DEFAULT_DURATION if duration is None else max(1, duration)
        out.append(vocab.pitch_id(pitch))
        out.append(vocab.token_id("Note_Velocity", velocity))
        out.append(vocab.token_id("Note_Duration", duration))
        pending = None

    def open_bar():
        nonlocal in_bar, bar_has_beat, span_has_chord
        out.append(vocab.bar_id)
        in_bar = True
        bar_has_beat = False
        span_has_chord = False

    for token_id in ids:
        tok = vocab.token(token_id)
        if tok.name == "Bar":
            close_pending()
            open_bar()
        elif tok.name == "Beat":
            close_pending()
            if not in_bar:
                open_bar()
            out.append(token_id)
            bar_has_beat = True
            span_has_chord = False
        elif tok.name == "Chord":
            if not in_bar:
                open_bar()
            if not span_has_chord:
                out.append(token_id)
                span_has_chord = True
        elif tok.name == "Tempo":
            if not tempo_seen:
                if not in_bar:
                    open_bar()
                out.append(token_id)
                tempo_seen = True
        elif tok.name == "Note_Pitch":
            close_pending()
            if not in_bar:
                open_bar()
            if not bar_has_beat:
                out.append(vocab.beat_id(0))
                bar_has_beat = True
                span_has_chord = False
            pending = [tok.value, None, None]
        elif tok.name == "Note_Velocity":
            if pending is not None and pending[1] is None:
                pending[1] = tok.value
                if pending[2] is not None:
                    close_pending()  # flush now so trailing marks keep their place
        elif tok.name == "Note_Duration":
            if pending is not None and pending[2] is None:
                pending[2] = tok.value
                if pending[1] is not None:
                    close_pending()
    close_pending()

    if not out:
        out.append(vocab.bar_id)
    if not tempo_seen:
        beat_at = next(
            (i for i, t in enumerate(out) if vocab.token(t).name == "Beat"), None
        )
        if beat_at is None:
            first_bar = next(i for i, t in enumerate(out) if t == vocab.bar_id)
            out.insert(first_bar + 1, vocab.beat_id(0))
            beat_at = first_bar + 1
        insert_at = beat_at + 1
        if insert_at < len(out) and vocab.token(out[insert_at]).name == "Chord":
            insert_at += 1
        out.insert(insert_at, vocab.token_id("Tempo", DEFAULT_TEMPO))
    out.append(vocab.eos_id)
    return RemiSequence.from_tokens(out)


# ---------------------------------------------------------------------------
# serialization


def _token_to_name_value(tok: RemiToken) -> tuple[str, int | str | None]:
    """External (name, value) form; durations go out in ticks of 120."""
    if tok.name == "Note_Duration":
        return tok.name, tok.value * SUBBEAT_TICKS
    return tok.name, tok.value


def _token_from_name_value(name: str, value, where: str, vocab: RemiVocab) -> int:
    """Resolve an external (name, value) pair to a token id, leniently.

    Tempo snaps to its grid, velocity to its even grid; durations above 16
    are read as ticks and divided by 120 (nearest, ties up, clamped 0..16).
    """
    if name == "Bar" or name == "EOS":
        if value is not None:
            raise ValueError(f"{where}: {name} takes no value, got {value!r}")
        return vocab.token_id(name, None)
    if name == "Chord":
        if not isinstance(value, str):
            raise ValueError(f"{where}: chord value must be a string")
        return vocab.chord_id(ChordLabel.from_name(value))
    if not isinstance(value, int) or isinstance(value, bool):
        raise ValueError(f"{where}: {name} needs an integer value, got {value!r}")
    if name == "Beat":
        if not 0 <= value < SUBBEATS_PER_BAR:
            raise ValueError(f"{where}: Beat {value} out of range 0..15")
        return vocab.beat_id(value)
    if name == "Tempo":
        if value <= 0:
            raise ValueError(f"{where}: non-positive tempo {value}")
        return vocab.tempo_id(value)
    if name == "Note_Pitch":
        if not 0 <= value <= 127:
            raise ValueError(f"{where}: pitch {value} out of range 0..127")
        return vocab.pitch_id(value)
    if name == "Note_Velocity":
        if not 0 <= value <= 127:
            raise ValueError(f"{where}: velocity {value} out of range 0..127")
        return vocab.velocity_id(value)
    if name == "Note_Duration":
        if value < 0:
            raise ValueError(f"{where}: negative duration {value}")
        if value > DURATION_MAX:
            value = min((2 * value + SUBBEAT_TICKS) // (2 * SUBBEAT_TICKS), DURATION_MAX)
        return vocab.duration_id(value)
    raise ValueError(f"{where}: unknown event name {name!r}")


def to_text(seq: RemiSequence, vocab: RemiVocab = VOCAB) -> str:
    """One event per line as NAME_VALUE, e.g. Bar_None, Beat_12, Chord_C#_sus4."""
    lines = []
    for token_id in seq.tokens:
        name, value = _token_to_name_value(vocab.token(token_id))
        lines.append(f"{name}_{value}")
    return "\n".join(lines)


def from_text(text: str, vocab: RemiVocab = VOCAB) -> RemiSequence:
    """Parse the to_text() format; blank lines are skipped."""
    names = sorted({tok.name for tok in vocab.entries}, key=len, reverse=True)
    tokens = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        name = next((n for n in names if line.startswith(n + "_")), None)
        if name is None:
            raise ValueError(f"line {lineno}: unknown event {line!r}")
        value_text = line[len(name) + 1 :]
        value: int | str | None
        if value_text == "None":
            value = None
        elif name == "Chord":
            value = value_text
        else:
            try:
                value = int(value_text)
            except ValueError:
                raise ValueError(f"line {lineno}: bad value in {line!r}") from None
        tokens.append(_token_from_name_value(name, value, f"line {lineno}", vocab))
    return RemiSequence.from_tokens(tokens)


def to_events(seq: RemiSequence, vocab: RemiVocab = VOCAB) -> list[dict]:
    """JSON-ready event dicts: [{"name": ..., "value": ...}, ...]."""
    out = []
    for token_id in seq.tokens:
        name, value = _token_to_name_value(vocab.token(token_id))
        out.append({"name": name, "value": value})
    return out


def from_events(events: Iterable[dict], vocab: RemiVocab = VOCAB) -> RemiSequence:
    """Parse the to_events() format."""
    tokens = []
    for i, obj in enumerate(events):
        if not isinstance(obj, dict) or "name" not in obj:
            raise ValueError(f"event {i}: expected an object with a name field")
        tokens.append(
            _token_from_name_value(obj["name"], obj.get("value"), f"event {i}", vocab)
        )
    return RemiSequence.from_tokens(tokens)
