"""Prompt-guided generation end to end.

A fresh decoder is nudged toward a text prompt through the alignment model's
shared embedding space, then sampled, repaired, and written out as MIDI.
With untrained models the music is noise; the point is the moving parts.
"""

from pathlib import Path

from textmuse import remi
from textmuse.align import AlignConfig, AlignModel
from textmuse.generate import DecoderConfig, DecoderModel, GenerationConfig, clip_guided_tune
from textmuse.midi_io import write_smf

OUT = Path(__file__).parent / "out"


def main():
    decoder = DecoderModel.init(DecoderConfig(embed_dim=64, max_len=256, seed=3))
    align_model = AlignModel.init(AlignConfig(embed_dim=64, seed=3))

    config = GenerationConfig(
        prompt="A pop song about love",
        max_tokens=192,
        context_len=24,
        tune_epochs=40,
        seed=3,
    )
    result = clip_guided_tune(decoder, align_model, config)

    print(f"guidance loss: {result.history[0]:.4f} -> {result.history[-1]:.4f} "
          f"over {len(result.history)} epochs")
    print(f"sampled {len(result.raw_tokens)} raw tokens, "
          f"{len(result.repaired.tokens)} after repair")

    piece, chords = remi.decode(result.repaired)
    print(f"decoded: {len(piece.notes)} notes, {piece.bar_count} bars, "
          f"tempo {piece.tempo_bpm}")
    print("chords:", " ".join(c.name for c in chords) or "(none)")

    OUT.mkdir(exist_ok=True)
    path = OUT / "generated.mid"
    path.write_bytes(write_smf(piece))
    print(f"wrote {path}")


if __name__ == "__main__":
    main()
