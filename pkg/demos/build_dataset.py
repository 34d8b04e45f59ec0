"""Build a paired text-music dataset from pieces and captions, then split it.

Covers the whole data path: tokenize a corpus with octile attribute classes,
cut 16-bar segments, pair each against its linked caption plus a mismatched
negative, split by segment, and write JSONL files.
"""

import random
from pathlib import Path

from textmuse.dataset import build_pairs, read_jsonl, segment, split, tokenize_corpus, write_jsonl
from textmuse.midi_io import QuantizedNote, QuantizedPiece

OUT = Path(__file__).parent / "out"

MOODS = ["slow and airy", "dense driving rhythm", "sparse late-night keys",
         "bright and busy", "low rumbling pads", "syncopated bounce"]


def synth_piece(seed, bars=32):
    rng = random.Random(seed)
    notes = []
    for bar in range(bars):
        for _ in range(rng.randint(1, 4)):
            notes.append(
                QuantizedNote(bar, rng.randrange(16), rng.randrange(36, 84),
                              40 + 2 * rng.randrange(40), rng.randint(1, 8))
            )
    return QuantizedPiece(tuple(sorted(set(notes))), tempo_bpm=80 + 7 * seed, bar_count=bars)


def main():
    pieces = {f"piece{i}": synth_piece(i) for i in range(6)}
    reviews = {f"rev{i}": MOODS[i] for i in range(6)}
    by_piece = {f"piece{i}": [f"rev{i}"] for i in range(6)}

    tokenized = tokenize_corpus(pieces, reviews_by_piece=by_piece)
    segments = [s for t in tokenized for s in segment(t)]
    print(f"{len(pieces)} pieces -> {len(segments)} sixteen-bar segments")

    examples = build_pairs(segments, reviews, seed=0)
    pos = sum(1 for e in examples if e.polarity == "positive")
    print(f"{len(examples)} examples ({pos} positive / {len(examples) - pos} negative)")

    parts = split(examples, seed=0)
    OUT.mkdir(exist_ok=True)
    for name, part in (("train", parts.train), ("validation", parts.validation),
                       ("test", parts.test)):
        path = OUT / f"{name}.jsonl"
        write_jsonl(part, path)
        print(f"  {path}: {len(part)} examples")

    back = read_jsonl(OUT / "train.jsonl")
    print(f"reload check: {len(back)} examples, first caption {back[0].caption!r}")


if __name__ == "__main__":
    main()
