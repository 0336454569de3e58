"""Synthetic scores and bundles for gradient checks and randomized tests.

Notes are confined to single bars (no barline crossings) so every generated
piece is engravable, and all class labels are drawn from the real
vocabularies so losses and metrics see realistic shapes.
"""

from __future__ import annotations

import numpy as np

from .decoders import HEAD_WIDTHS, NODE_HEADS, PredictionBundle
from .graph import (ScoreGraph, candidate_pairs, chord_candidate_pairs)
from .notes import (KEY_MIN_FIFTHS, LabelSet, MAX_DOTS, N_KEY_CLASSES, Score,
                    TimeSignature, TUPLET_VALUES, bar_table, make_score)
from .rng import Rng


def random_score(seed: int, n_notes: int = 12, divisions: int = 4,
                 numerator: int = 4, denominator: int = 4, n_bars: int = 2,
                 name: str = "", with_labels: bool = True,
                 cross_bar: bool = True) -> Score:
    """A random but valid labeled piece on the division grid."""
    rng = Rng(seed)
    bars = bar_table(divisions,
                     (TimeSignature(0, numerator, denominator),), n_bars)
    triples = []
    seen = set()
    while len(triples) < n_notes:
        b = int(rng.integers(n_bars)[0])
        bar_onset, bar_len = bars[b]
        pos = int(rng.integers(bar_len)[0])
        onset = bar_onset + pos
        duration = 1 + int(rng.integers(bar_len - pos)[0])
        midi = 36 + int(rng.integers(48)[0])
        if (onset, midi) in seen:
            continue
        seen.add((onset, midi))
        triples.append((onset, duration, midi))
    score = make_score(divisions, ((0, numerator, denominator),), triples,
                       name=name or f"synth-{seed}")
    if not with_labels:
        return score
    labels = random_labels(score, rng, cross_bar=cross_bar)
    score = Score(divisions_per_quarter=score.divisions_per_quarter,
                  time_signatures=score.time_signatures, notes=score.notes,
                  labels=labels, name=score.name)
    score.validate()
    return score


def random_labels(score: Score, rng: Rng, cross_bar: bool = True) -> LabelSet:
    """Uniformly random labels over the vocabularies, edges from candidates."""
    n = len(score.notes)

    def draw(width: int) -> tuple[int, ...]:
        return tuple(int(v) for v in rng.integers(width, n))

    candidates = candidate_pairs(score, cross_bar=cross_bar)
    keep_v = rng.uniform(max(len(candidates), 1))
    voice_edges = frozenset(
        pair for pair, k in zip(candidates, keep_v) if k < 0.25)
    same_onset = [(a.id, b.id)
                  for i, a in enumerate(score.notes)
                  for b in score.notes[i + 1:]
                  if a.onset_div == b.onset_div]
    keep_c = rng.uniform(max(len(same_onset), 1))
    chord_edges = frozenset(
        (min(u, w), max(u, w))
        for (u, w), k in zip(same_onset, keep_c) if k < 0.3)
    return LabelSet(
        staff=draw(2),
        spelling=draw(HEAD_WIDTHS["spelling"]),
        key_fifths=tuple(KEY_MIN_FIFTHS + int(v)
                         for v in rng.integers(N_KEY_CLASSES, n)),
        stem=draw(3),
        octave_shift=draw(4),
        clef=draw(3),
        note_type=draw(HEAD_WIDTHS["note_type"]),
        dots=draw(MAX_DOTS + 1),
        tuplet=tuple(TUPLET_VALUES[int(v)] for v in rng.integers(3, n)),
        voice_edges=voice_edges,
        chord_edges=chord_edges)


def random_bundle(graph: ScoreGraph, seed: int,
                  scale: float = 2.0) -> PredictionBundle:
    """Random logits/probabilities shaped for the graph's candidates."""
    rng = Rng(seed)
    n = graph.node_count
    note_logits = {head: rng.normal(n, HEAD_WIDTHS[head]) * scale
                   for head in NODE_HEADS}
    staff = note_logits["staff"]
    staff_probs = np.exp(
        staff - np.logaddexp.reduce(staff, axis=1, keepdims=True))[:, 1]

    def sigmoid(x: np.ndarray) -> np.ndarray:
        return 1.0 / (1.0 + np.exp(-x))

    voice_pairs = graph.candidate_pairs
    chord_pairs = chord_candidate_pairs(graph)
    return PredictionBundle(
        note_logits=note_logits, staff_probs=staff_probs,
        voice_pairs=voice_pairs,
        voice_probs=sigmoid(rng.normal(len(voice_pairs)) * scale),
        chord_pairs=chord_pairs,
        chord_probs=sigmoid(rng.normal(len(chord_pairs)) * scale))
