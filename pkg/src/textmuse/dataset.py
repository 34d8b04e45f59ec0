"""Contrastive training data: segmentation, pairing, splits, JSONL files.

Pieces are tokenized with their per-bar attribute classes, cut into fixed
16-bar segments, and paired with caption text: each (segment, linked
caption) yields one positive example plus one seeded-random negative whose
caption belongs to a different piece. Splits group by segment so no
segment's music appears in two splits.
"""

from __future__ import annotations

import json
import math
import random
from dataclasses import dataclass
from typing import Mapping, Sequence

from . import remi
from .attributes import assign_classes, octile_edges, polyphony, rhythmic_intensity
from .midi_io import QuantizedPiece


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class TokenizedPiece:
    """A piece ready for pairing: tokens, per-bar classes, linked captions."""

    piece_id: str
    seq: remi.RemiSequence
    a_rhym: tuple[int, ...]
    a_poly: tuple[int, ...]
    review_ids: tuple[str, ...]

    def __post_init__(self):
        bars = self.seq.bar_count
        if len(self.a_rhym) != bars or len(self.a_poly) != bars:
            raise ValueError(
                f"attribute class lists must have one entry per bar ({bars}), "
                f"got {len(self.a_rhym)}/{len(self.a_poly)}"
            )

    def features(self) -> dict:
        """The JSON feature bundle: bar positions, events, both class lists."""
        return {
            "bar_positions": list(self.seq.bar_positions),
            "events": remi.to_events(self.seq),
            "rhythmic_intensity_classes": list(self.a_rhym),
            "polyphony_classes": list(self.a_poly),
        }


@dataclass(frozen=True)
class PairExample:
    music: str
    caption: str
    polarity: str
    segment_id: str

    def __post_init__(self):
        if self.polarity not in ("positive", "negative"):
            raise ValueError(f"polarity must be positive|negative, got {self.polarity!r}")
        if not self.music:
            raise ValueError("music text must be non-empty")


@dataclass(frozen=True)
class SplitSet:
    train: tuple[PairExample, ...]
    validation: tuple[PairExample, ...]
    test: tuple[PairExample, ...]
    seed: int


def tokenize_corpus(
    pieces: Mapping[str, QuantizedPiece],
    reviews_by_piece: Mapping[str, Sequence[str]] | None = None,
) -> list[TokenizedPiece]:
    """Encode every piece and attach octile classes binned over the corpus.

    Attribute edges come from the pooled per-bar scores of all given
    pieces; pass a single piece for piece-local binning.
    """
    if not pieces:
        raise DatasetError("empty corpus")
    ids = list(pieces)
    rhym = {pid: rhythmic_intensity(pieces[pid]) for pid in ids}
    poly = {pid: polyphony(pieces[pid]) for pid in ids}
    pooled_rhym = [s for pid in ids for s in rhym[pid]]
    pooled_poly = [s for pid in ids for s in poly[pid]]
    if not pooled_rhym:
        raise DatasetError("corpus has no bars to bin")
    rhym_edges = octile_edges(pooled_rhym)
    poly_edges = octile_edges(pooled_poly)
    out = []
    for pid in ids:
        piece = pieces[pid]
        seq = remi.encode(piece, remi.detect_chords(piece))
        linked = tuple(reviews_by_piece.get(pid, ())) if reviews_by_piece else ()
        out.append(
            TokenizedPiece(
                piece_id=pid,
                seq=seq,
                a_rhym=tuple(int(c) for c in assign_classes(rhym[pid], rhym_edges)),
                a_poly=tuple(int(c) for c in assign_classes(poly[pid], poly_edges)),
                review_ids=linked,
            )
        )
    return out


def segment(piece: TokenizedPiece, bars_per_segment: int = 16) -> list[TokenizedPiece]:
    """Cut into consecutive fixed-length windows; a short tail is dropped.

    Each window's tokens are re-rooted: bar positions recomputed and an
    EOS appended. Attribute class lists are sliced alongside.
    """
    if bars_per_segment < 1:
        raise ValueError("bars_per_segment must be >= 1")
    bars = piece.seq.bar_positions
    tokens = piece.seq.tokens
    count = len(bars) // bars_per_segment
    segments = []
    for i in range(count):
        start = bars[i * bars_per_segment]
        next_bar = (i + 1) * bars_per_segment
        end = bars[next_bar] if next_bar < len(bars) else len(tokens)
        window = list(tokens[start:end])
        while window and window[-1] == remi.VOCAB.eos_id:
            window.pop()
        window.append(remi.VOCAB.eos_id)
        lo, hi = i * bars_per_segment, (i + 1) * bars_per_segment
        segments.append(
            TokenizedPiece(
                piece_id=f"{piece.piece_id}:{i}",
                seq=remi.RemiSequence.from_tokens(window),
                a_rhym=piece.a_rhym[lo:hi],
                a_poly=piece.a_poly[lo:hi],
                review_ids=piece.review_ids,
            )
        )
    return segments


def build_pairs(
    segments: Sequence[TokenizedPiece],
    reviews: Mapping[str, str],
    seed: int = 0,
) -> list[PairExample]:
    """One positive per (segment, linked caption), plus a matched negative.

    The negative caption is drawn uniformly (seeded) from reviews not
    linked to the segment's piece. Positive and negative counts are equal.
    """
    rng = random.Random(seed)
    examples: list[PairExample] = []
    for seg in segments:
        linked = [rid for rid in seg.review_ids if rid in reviews]
        if not linked:
            raise DatasetError(f"segment {seg.piece_id} has no caption in the review map")
        own = set(seg.review_ids)
        pool = sorted(rid for rid in reviews if rid not in own)
        if not pool:
            raise DatasetError(
                f"no negative pool for segment {seg.piece_id}: every review is its own"
            )
        music = remi.to_text(seg.seq)
        for rid in linked:
            examples.append(PairExample(music, reviews[rid], "positive", seg.piece_id))
            neg = pool[rng.randrange(len(pool))]
            examples.append(PairExample(music, reviews[neg], "negative", seg.piece_id))
    return examples


def split(examples: Sequence[PairExample], seed: int = 0) -> SplitSet:
    """Deterministic 0.8/0.1/0.1 split grouped by segment_id."""
    if len(examples) < 10:
        raise DatasetError(f"need at least 10 examples to split, got {len(examples)}")
    ids = sorted({e.segment_id for e in examples})
    rng = random.Random(seed)
    rng.shuffle(ids)
    n = len(ids)
    n_train = math.floor(0.8 * n + 0.5)
    n_val = min(math.floor(0.1 * n + 0.5), n - n_train)
    bucket = {}
    for i, sid in enumerate(ids):
        bucket[sid] = "train" if i < n_train else "validation" if i < n_train + n_val else "test"
    groups = {"train": [], "validation": [], "test": []}
    for e in examples:
        groups[bucket[e.segment_id]].append(e)
    return SplitSet(
        tuple(groups["train"]), tuple(groups["validation"]), tuple(groups["test"]), seed
    )


def write_jsonl(examples: Sequence[PairExample], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for e in examples:
            fh.write(
                json.dumps(
                    {
                        "segment_id": e.segment_id,
                        "music": e.music,
                        "caption": e.caption,
                        "polarity": e.polarity,
                    },
                    ensure_ascii=False,
                )
            )
            fh.write("\n")


def read_jsonl(path) -> list[PairExample]:
    examples = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetError(f"{path}: line {lineno}: not valid JSON ({exc.msg})") from None
            try:
                examples.append(
                    PairExample(
                        music=obj["music"],
                        caption=obj["caption"],
                        polarity=obj["polarity"],
                        segment_id=obj["segment_id"],
                    )
                )
            except (KeyError, TypeError, ValueError) as exc:
                raise DatasetError(f"{path}: line {lineno}: {exc}") from None
    return examples
