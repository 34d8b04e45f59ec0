"""Objective evaluation metrics over quantized pieces.

Seven measurements: qualified notes rate, empty bar rate, pitch min/max/
space, unique pitches per bar, chord repetition, polyphonicity, and
rhythmic intensity. The last two are corpus means of the per-bar attribute
scores.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, fields
from typing import Sequence

from .attributes import polyphony, rhythmic_intensity
from .midi_io import QuantizedPiece
from .remi import ChordLabel


@dataclass(frozen=True)
class MetricsReport:
    qualified_notes_rate: float
    empty_bar_rate: float
    pitch_min: int | None
    pitch_max: int | None
    pitch_space: int | None
    unique_pitches_per_bar: float
    chord_repetition: float
    polyphonicity: float
    rhythmic_intensity: float

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def to_table(self) -> str:
        """Aligned two-column text table."""
        rows = []
        for name, value in self.to_dict().items():
            if value is None:
                shown = "-"
            elif isinstance(value, int):
                shown = str(value)
            else:
                shown = f"{value:.4f}"
            rows.append((name, shown))
        width = max(len(name) for name, _ in rows)
        return "\n".join(f"{name:<{width}}  {shown}" for name, shown in rows)


def evaluate(
    piece: QuantizedPiece,
    chords: Sequence[ChordLabel],
    min_duration: int = 1,
) -> MetricsReport:
    """Compute the seven metrics for one piece and its chord label list.

    ``min_duration`` is the qualified-note threshold in sub-beats. At the
    default 1 every stored note qualifies (durations are clamped to >=1 on
    the way in), so raise it to probe for fragmentary notes.
    """
    if piece.bar_count == 0:
        raise ValueError("cannot evaluate a piece with no bars")

    notes = piece.notes
    if notes:
        qualified = sum(1 for n in notes if n.duration >= min_duration) / len(notes)
        pitches = [n.pitch for n in notes]
        pitch_min, pitch_max = min(pitches), max(pitches)
        pitch_space = pitch_max - pitch_min
    else:
        qualified = 1.0
        pitch_min = pitch_max = pitch_space = None

    onset_pitches: dict[int, set[int]] = {bar: set() for bar in range(piece.bar_count)}
    for n in notes:
        onset_pitches[n.bar].add(n.pitch)
    empty_bars = sum(1 for s in onset_pitches.values() if not s)
    unique_mean = sum(len(s) for s in onset_pitches.values()) / piece.bar_count

    if len(chords) >= 2:
        repeats = sum(1 for a, b in zip(chords, chords[1:]) if a == b)
        chord_repetition = repeats / (len(chords) - 1)
    else:
        chord_repetition = 0.0

    return MetricsReport(
        qualified_notes_rate=qualified,
        empty_bar_rate=empty_bars / piece.bar_count,
        pitch_min=pitch_min,
        pitch_max=pitch_max,
        pitch_space=pitch_space,
        unique_pitches_per_bar=unique_mean,
        chord_repetition=chord_repetition,
        polyphonicity=float(polyphony(piece).mean()),
        rhythmic_intensity=float(rhythmic_intensity(piece).mean()),
    )
