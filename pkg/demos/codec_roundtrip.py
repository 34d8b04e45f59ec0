"""Encode a small piece to tokens, print them, decode back, render a MIDI file.

Run: python3 demos/codec_roundtrip.py
"""

from pathlib import Path

from textmuse import remi
from textmuse.midi_io import QuantizedNote, QuantizedPiece, write_smf

OUT = Path(__file__).parent / "out"


def main():
    # two bars: a C major arpeggio answered by a G7 voicing
    notes = [
        QuantizedNote(0, 0, 60, 80, 4),
        QuantizedNote(0, 4, 64, 80, 4),
        QuantizedNote(0, 8, 67, 84, 4),
        QuantizedNote(0, 12, 72, 84, 4),
        QuantizedNote(1, 0, 55, 78, 8),
        QuantizedNote(1, 0, 59, 74, 8),
        QuantizedNote(1, 0, 65, 74, 8),
        QuantizedNote(1, 8, 67, 80, 8),
    ]
    piece = QuantizedPiece(tuple(sorted(notes)), tempo_bpm=98, bar_count=2)

    chords = remi.detect_chords(piece)
    print("detected chords:", " ".join(c.name for c in chords))

    seq = remi.encode(piece, chords)
    print(f"\n{len(seq.tokens)} tokens:")
    print(remi.to_text(seq))

    decoded, decoded_chords = remi.decode(seq)
    assert decoded == piece and list(decoded_chords) == list(chords)
    print("round trip: exact")

    OUT.mkdir(exist_ok=True)
    path = OUT / "roundtrip.mid"
    path.write_bytes(write_smf(piece))
    print(f"wrote {path}")


if __name__ == "__main__":
    main()
