"""Score a piece: per-bar attributes, octile classes, and the metrics table."""

import random

from textmuse import remi
from textmuse.attributes import assign_classes, octile_edges, polyphony, rhythmic_intensity
from textmuse.metrics import evaluate
from textmuse.midi_io import QuantizedNote, QuantizedPiece


def busy_piece(seed=7, bars=8):
    """Random but structured: density ramps up across the bars."""
    rng = random.Random(seed)
    notes = []
    for bar in range(bars):
        for _ in range(1 + bar):
            subbeat = rng.randrange(16)
            pitch = rng.choice([48, 52, 55, 60, 64, 67, 72])
            notes.append(QuantizedNote(bar, subbeat, pitch, 60 + 4 * bar, rng.randint(1, 6)))
    return QuantizedPiece(tuple(sorted(set(notes))), tempo_bpm=122, bar_count=bars)


def main():
    piece = busy_piece()

    rhym = rhythmic_intensity(piece)
    poly = polyphony(piece)
    print("bar  rhythmic  polyphony  class(r/p)")
    r_cls = assign_classes(rhym, octile_edges(rhym))
    p_cls = assign_classes(poly, octile_edges(poly))
    for bar in range(piece.bar_count):
        print(f"{bar:3d}   {rhym[bar]:.4f}    {poly[bar]:.4f}     {r_cls[bar]}/{p_cls[bar]}")

    report = evaluate(piece, remi.detect_chords(piece))
    print()
    print(report.to_table())


if __name__ == "__main__":
    main()
