"""Normalize a broken token stream and show what the repair rules changed."""

from textmuse import remi


def main():
    # orphan velocity, two chords in one span, duplicate tempo, missing EOS
    broken = "\n".join(
        [
            "Note_Velocity_90",
            "Tempo_110",
            "Chord_C_M",
            "Chord_G_7",
            "Beat_4",
            "Tempo_203",
            "Note_Pitch_64",
            "Note_Pitch_67",
            "Note_Duration_480",
        ]
    )
    print("input:")
    print(broken)

    fixed = remi.repair(remi.from_text(broken))
    print("\nrepaired:")
    print(remi.to_text(fixed))

    again = remi.repair(fixed.tokens)
    print("\nidempotent:", again.tokens == fixed.tokens)
    piece, chords = remi.decode(fixed)
    print(f"decodes to {len(piece.notes)} notes over {piece.bar_count} bar(s), "
          f"chords {' '.join(c.name for c in chords)}")


if __name__ == "__main__":
    main()
