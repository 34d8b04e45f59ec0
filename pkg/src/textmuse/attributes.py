"""Bar-level musical attribute scores and their ordinal classes.

Two scores per bar: rhythmic intensity (fraction of the 16 sub-beats with
at least one onset) and polyphony (mean count of notes sounding per
sub-beat, held notes included). Scores are binned into 8 ordinal classes
by empirical octiles of a pooled corpus distribution.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .midi_io import SUBBEATS_PER_BAR, QuantizedPiece

N_CLASSES = 8


def rhythmic_intensity(piece: QuantizedPiece) -> np.ndarray:
    """Per-bar fraction of sub-beats with >=1 note onset; shape (bar_count,)."""
    onsets = np.zeros((piece.bar_count, SUBBEATS_PER_BAR), dtype=bool)
    for note in piece.notes:
        onsets[note.bar, note.subbeat] = True
    return onsets.mean(axis=1) if piece.bar_count else np.zeros(0)


def polyphony(piece: QuantizedPiece) -> np.ndarray:
    """Per-bar mean number of notes sounding per sub-beat; shape (bar_count,).

    A note sounds on every sub-beat in [onset, onset + duration), including
    sub-beats in later bars when it crosses a barline. Coverage past the
    final barline is discarded.
    """
    total = piece.bar_count * SUBBEATS_PER_BAR
    active = np.zeros(total)
    for note in piece.notes:
        start = note.bar * SUBBEATS_PER_BAR + note.subbeat
        active[start : min(start + note.duration, total)] += 1
    if not piece.bar_count:
        return np.zeros(0)
    return active.reshape(piece.bar_count, SUBBEATS_PER_BAR).mean(axis=1)


def octile_edges(scores) -> np.ndarray:
    """Seven octile cut points (12.5% .. 87.5% nearest-rank quantiles)."""
    pooled = np.sort(np.asarray(scores, dtype=float).ravel())
    if pooled.size == 0:
        raise ValueError("cannot bin an empty score list")
    ranks = [math.ceil(k * pooled.size / N_CLASSES) for k in range(1, N_CLASSES)]
    return pooled[[r - 1 for r in ranks]]


def assign_classes(scores, edges) -> np.ndarray:
    """Class of each score = number of edges strictly below it (0..7)."""
    return np.searchsorted(np.asarray(edges), np.asarray(scores, dtype=float), side="left").astype(np.int64)


@dataclass(frozen=True, eq=False)
class AttributeClasses:
    """Per-bar ordinal classes plus the octile edges that produced them."""

    a_rhym: np.ndarray
    a_poly: np.ndarray
    rhym_edges: np.ndarray
    poly_edges: np.ndarray

    def __post_init__(self):
        for classes in (self.a_rhym, self.a_poly):
            if classes.size and not ((classes >= 0) & (classes < N_CLASSES)).all():
                raise ValueError("classes out of range 0..7")


def bin_attributes(rhym_scores, poly_scores) -> AttributeClasses:
    """Bin pooled corpus score lists into octile classes.

    Both inputs are flat per-bar score arrays pooled over the corpus being
    binned (a single piece's bars is the degenerate corpus). Use
    octile_edges/assign_classes directly to classify new scores against an
    existing corpus.
    """
    rhym = np.asarray(rhym_scores, dtype=float).ravel()
    poly = np.asarray(poly_scores, dtype=float).ravel()
    rhym_edges = octile_edges(rhym)
    poly_edges = octile_edges(poly)
    return AttributeClasses(
        assign_classes(rhym, rhym_edges),
        assign_classes(poly, poly_edges),
        rhym_edges,
        poly_edges,
    )
