"""Deterministic postprocessing: predictions to a musically valid score.

Four steps. (1) Chord pooling: accepted chord edges (probability at or above
the threshold, equal duration, equal predicted staff) are closed under
transitivity with a union-find; logits of the pooled heads (note type, dots,
tuplet, stem, key) are averaged over members. (2) Voice assignment: per
staff, sweep onset groups left to right and match open voice ends against
the new pooled nodes with the Hungarian algorithm on -log(probability)
costs, padded square with dummy rows/columns priced at -log(threshold) — a
dummy column ends a voice, a dummy row starts one, and the pricing makes a
real match win exactly when p >= threshold. (3) Unpooling: members inherit
their pool's voice; keys are smoothed to one per measure (majority vote,
ties toward the previous measure), clef sequences are median-filtered
(window 3) and split into maximal runs, octave-shift labels become maximal
bracket runs. (4) Rest infilling: every gap in every active bar of every
voice is filled greedily, largest symbol first, never letting a rest start
off its own-length grid within the bar (so decompositions split at beat
boundaries).
"""

from __future__ import annotations

import collections
import dataclasses
import math
from typing import Optional

import numpy as np

from .decoders import PredictionBundle, POOLED_HEADS, NODE_HEADS, HEAD_WIDTHS
from .graph import ScoreGraph, build_graph
from .hungarian import hungarian
from .notes import (MAX_DOTS, NOTE_TYPE_NAMES, STEM_NONE, Score,
                    TimeSignature, TUPLET_VALUES, KEY_MIN_FIFTHS,
                    QuantizedNote, bar_table, key_class,
                    symbolic_duration_div)

_PROB_FLOOR = 1e-12


class UnfillableGap(RuntimeError):
    def __init__(self, voice: int, bar_index: int, start_div: int, length_div: int):
        super().__init__(
            f"voice {voice}, bar {bar_index}: gap of {length_div} divisions "
            f"at {start_div} is not expressible as rests")
        self.voice = voice
        self.bar_index = bar_index
        self.start_div = start_div
        self.length_div = length_div


class _UnionFind:
    def __init__(self, n: int):
        self.parent = list(range(n))
        self.rank = [0] * n

    def find(self, x: int) -> int:
        root = x
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[x] != root:
            self.parent[x], x = root, self.parent[x]
        return root

    def union(self, a: int, b: int) -> None:
        ra, rb = self.find(a), self.find(b)
        if ra == rb:
            return
        if self.rank[ra] < self.rank[rb]:
            ra, rb = rb, ra
        self.parent[rb] = ra
        if self.rank[ra] == self.rank[rb]:
            self.rank[ra] += 1


@dataclasses.dataclass(frozen=True)
class PooledNode:
    """A chord (possibly a single note) treated as one unit."""

    ids: tuple[int, ...]
    onset_div: int
    duration_div: int
    staff: int
    pooled_logits: dict

    @property
    def offset_div(self) -> int:
        return self.onset_div + self.duration_div


@dataclasses.dataclass(frozen=True)
class EngravedEvent:
    """One time slot of one voice: a chord (note_ids) or a rest (empty)."""

    voice: int
    staff: int
    onset_div: int
    duration_div: int
    note_ids: tuple[int, ...]
    note_type: int
    dots: int
    tuplet: int          # ratio value in {1, 3, 5}
    stem: int

    @property
    def is_rest(self) -> bool:
        return not self.note_ids

    @property
    def offset_div(self) -> int:
        return self.onset_div + self.duration_div


@dataclasses.dataclass(frozen=True)
class EngravedScore:
    """The fully decided notation of one piece, ready for serialization."""

    divisions_per_quarter: int
    time_signatures: tuple[TimeSignature, ...]
    bar_count: int
    notes: tuple[QuantizedNote, ...]
    staff: tuple[int, ...]           # per note
    spelling: tuple[int, ...]        # per note
    octave_shift: tuple[int, ...]    # per note, region-canonical
    clef: tuple[int, ...]            # per note, region-canonical
    events: tuple[EngravedEvent, ...]
    measure_keys: tuple[int, ...]    # fifths per bar
    clef_regions: dict               # staff -> ((start_div, clef_index), ...)
    octave_regions: dict             # staff -> ((start_div, end_div, shift), ...)
    voice_staff: dict                # voice number -> staff index

    def bars(self) -> list[tuple[int, int]]:
        return bar_table(self.divisions_per_quarter, self.time_signatures,
                         self.bar_count)

    def voice_events(self) -> dict:
        by_voice: dict[int, list[EngravedEvent]] = collections.defaultdict(list)
        for ev in self.events:
            by_voice[ev.voice].append(ev)
        return {v: sorted(evs, key=lambda e: e.onset_div)
                for v, evs in sorted(by_voice.items())}

    def validate(self) -> None:
        seen: list[int] = []
        for ev in self.events:
            seen.extend(ev.note_ids)
        if sorted(seen) != list(range(len(self.notes))):
            raise ValueError("events do not cover every note exactly once")
        bars = self.bars()
        for voice, evs in self.voice_events().items():
            for ev in evs:
                bar_i = _bar_of(bars, ev.onset_div)
                onset, length = bars[bar_i]
                if ev.onset_div < onset or ev.offset_div > onset + length:
                    raise ValueError(f"voice {voice}: event crosses a barline")
            for prev, nxt in zip(evs, evs[1:]):
                if prev.offset_div > nxt.onset_div:
                    raise ValueError(f"voice {voice}: overlapping events")
            first_bar = _bar_of(bars, evs[0].onset_div)
            last_bar = _bar_of(bars, evs[-1].onset_div)
            for b in range(first_bar, last_bar + 1):
                onset, length = bars[b]
                total = sum(e.duration_div for e in evs
                            if onset <= e.onset_div < onset + length)
                if total != length:
                    raise ValueError(
                        f"voice {voice}, bar {b}: durations sum to {total}, "
                        f"bar length is {length}")
        if len(self.measure_keys) != self.bar_count:
            raise ValueError("one key per measure required")
        for staff, regions in self.octave_regions.items():
            for start, end, shift in regions:
                if not (0 < shift < 4) or end <= start:
                    raise ValueError(f"bad octave region on staff {staff}")
            for (s1, e1, _), (s2, _, _) in zip(regions, regions[1:]):
                if s2 < e1:
                    raise ValueError(f"overlapping octave regions on staff {staff}")


def _bar_of(bars: list[tuple[int, int]], div: int) -> int:
    for i in reversed(range(len(bars))):
        if bars[i][0] <= div:
            return i
    raise ValueError(f"division {div} before bar 0")


# --- step 1: chord pooling ---

def pool_chords(bundle: PredictionBundle, score: Score,
                threshold: float = 0.5) -> list[PooledNode]:
    n = len(score.notes)
    staff_pred = [bundle.staff_of(i) for i in range(n)]
    dsu = _UnionFind(n)
    for (u, w), p in zip(bundle.chord_pairs, bundle.chord_probs.tolist()):
        if (p >= threshold
                and score.notes[u].duration_div == score.notes[w].duration_div
                and staff_pred[u] == staff_pred[w]):
            dsu.union(u, w)
    members: dict[int, list[int]] = collections.defaultdict(list)
    for i in range(n):
        members[dsu.find(i)].append(i)
    pools = []
    for ids in members.values():
        ids = tuple(sorted(ids))
        pooled = {head: bundle.note_logits[head][list(ids)].mean(axis=0)
                  for head in POOLED_HEADS}
        pools.append(PooledNode(
            ids=ids, onset_div=score.notes[ids[0]].onset_div,
            duration_div=score.notes[ids[0]].duration_div,
            staff=staff_pred[ids[0]], pooled_logits=pooled))
    pools.sort(key=lambda p: (p.onset_div, p.staff, p.ids[0]))
    return pools


# --- step 2: voice assignment ---

@dataclasses.dataclass
class VoiceStream:
    staff: int
    pool_indices: list[int]


def assign_voices(pools: list[PooledNode], bundle: PredictionBundle,
                  threshold: float = 0.5, pair_agg: str = "max") -> list[VoiceStream]:
    """Chain pooled nodes into monophonic per-staff voice streams."""
    if pair_agg not in ("max", "mean"):
        raise ValueError(f"unknown pair aggregation {pair_agg!r}")
    prob = dict(zip(bundle.voice_pairs, bundle.voice_probs.tolist()))
    dummy_cost = -math.log(min(max(threshold, _PROB_FLOOR), 1.0 - _PROB_FLOOR))
    streams: list[VoiceStream] = []

    def pair_probability(last: PooledNode, new: PooledNode) -> float:
        found = [prob[(u, w)] for u in last.ids for w in new.ids
                 if (u, w) in prob]
        if not found:
            return _PROB_FLOOR
        p = max(found) if pair_agg == "max" else sum(found) / len(found)
        return min(max(p, _PROB_FLOOR), 1.0 - _PROB_FLOOR)

    for staff in (0, 1):
        pool_ids = [i for i, p in enumerate(pools) if p.staff == staff]
        groups: "collections.OrderedDict[int, list[int]]" = collections.OrderedDict()
        for i in pool_ids:
            groups.setdefault(pools[i].onset_div, []).append(i)
        open_streams: list[VoiceStream] = []
        for onset, group in groups.items():
            eligible = [s for s in open_streams
                        if pools[s.pool_indices[-1]].offset_div <= onset]
            r, c = len(eligible), len(group)
            cost = np.full((r + c, r + c), dummy_cost)
            for i, stream in enumerate(eligible):
                last = pools[stream.pool_indices[-1]]
                for j, pi in enumerate(group):
                    cost[i, j] = -math.log(pair_probability(last, pools[pi]))
            col_of_row = hungarian(cost)
            row_of_col = {j: i for i, j in enumerate(col_of_row)}
            for i, stream in enumerate(eligible):
                if col_of_row[i] < c:
                    stream.pool_indices.append(group[col_of_row[i]])
                else:
                    open_streams.remove(stream)  # matched a dummy: voice ends
            for j, pi in enumerate(group):
                if row_of_col[j] >= r:           # dummy row: new voice starts
                    stream = VoiceStream(staff=staff, pool_indices=[pi])
                    streams.append(stream)
                    open_streams.append(stream)
    return streams


def number_voices(streams: list[VoiceStream], pools: list[PooledNode],
                  notes) -> dict[int, VoiceStream]:
    """Assign MusicXML voice numbers: 1.. on the upper staff, 5.. on the lower.

    Within a staff, voices are ordered by first onset, then by descending
    top pitch of the first chord (the melody gets the lowest number), with
    note ids as the final tiebreak. Numbers may exceed the 4-per-staff
    serialization budget; the exporter enforces that bound. When the upper
    staff overflows its block, the lower staff starts after it so numbers
    stay unique.
    """
    numbered: dict[int, VoiceStream] = {}
    upper_count = sum(1 for s in streams if s.staff == 0)
    for staff, base in ((0, 1), (1, max(5, upper_count + 1))):
        staff_streams = [s for s in streams if s.staff == staff]
        staff_streams.sort(key=lambda s: (
            pools[s.pool_indices[0]].onset_div,
            -max(notes[i].midi_pitch for i in pools[s.pool_indices[0]].ids),
            pools[s.pool_indices[0]].ids))
        for k, stream in enumerate(staff_streams):
            numbered[base + k] = stream
    return numbered


# --- step 4 helper: rest infilling ---

def _rest_vocabulary(divisions: int) -> list[tuple[int, int, int]]:
    """(duration_div, type_index, dots) of every plain rest symbol, longest first."""
    out = []
    for type_index in range(len(NOTE_TYPE_NAMES)):
        for dots in range(MAX_DOTS + 1):
            div = symbolic_duration_div(type_index, dots, 1, divisions)
            if div is not None:
                out.append((div, type_index, dots))
    out.sort(key=lambda t: -t[0])
    return out


def decompose_gap(start_div: int, length_div: int, bar_onset_div: int,
                  vocabulary: list[tuple[int, int, int]]) -> Optional[list[tuple[int, int, int]]]:
    """Split a gap into (duration_div, type_index, dots) rests.

    Greedy largest-first; a rest may only start at an integer multiple of
    its own length from the bar start, which makes decompositions break at
    beat boundaries. Returns None when the gap cannot be expressed.
    """
    rests = []
    pos = start_div
    remaining = length_div
    while remaining > 0:
        rel = pos - bar_onset_div
        for div, type_index, dots in vocabulary:
            if div <= remaining and rel % div == 0:
                rests.append((div, type_index, dots))
                pos += div
                remaining -= div
                break
        else:
            return None
    return rests


# --- step 3 + 4: unpooling, smoothing, infilling ---

def _median3(seq: list[int]) -> list[int]:
    if len(seq) <= 2:
        return list(seq)
    out = []
    for i in range(len(seq)):
        window = sorted((seq[max(0, i - 1)], seq[i], seq[min(len(seq) - 1, i + 1)]))
        out.append(window[1])
    return out


def _majority(values: list[int], tie_break: Optional[int]) -> int:
    counts = collections.Counter(values)
    top = max(counts.values())
    tied = sorted(c for c, k in counts.items() if k == top)
    if tie_break is not None and tie_break in tied:
        return tie_break
    return tied[0]


def _group_by_onset(note_ids: list[int], notes) -> list[list[int]]:
    groups: "collections.OrderedDict[int, list[int]]" = collections.OrderedDict()
    for i in note_ids:
        groups.setdefault(notes[i].onset_div, []).append(i)
    return list(groups.values())


def unpool_and_finalize(numbered: dict[int, VoiceStream],
                        pools: list[PooledNode], bundle: PredictionBundle,
                        score: Score) -> EngravedScore:
    notes = score.notes
    n = len(notes)
    bars = score.bar_table()
    bar_count = score.num_bars

    staff = [0] * n
    for stream in numbered.values():
        for pi in stream.pool_indices:
            for i in pools[pi].ids:
                staff[i] = pools[pi].staff

    spelling = bundle.argmax("spelling").tolist()
    shift_raw = bundle.argmax("octave_shift").tolist()
    clef_raw = bundle.argmax("clef").tolist()
    key_raw = [c + KEY_MIN_FIFTHS for c in bundle.argmax("key").tolist()]

    # per-measure key: majority vote, ties toward the previous measure
    measure_keys = []
    previous = 0
    votes_by_bar: dict[int, list[int]] = collections.defaultdict(list)
    for i, note in enumerate(notes):
        votes_by_bar[note.bar_index].append(key_raw[i])
    for b in range(bar_count):
        votes = votes_by_bar.get(b)
        if votes:
            counts = collections.Counter(votes)
            top = max(counts.values())
            tied = sorted(f for f, k in counts.items() if k == top)
            if previous in tied:
                chosen = previous
            else:
                chosen = min(tied, key=lambda f: (abs(f - previous), f))
            previous = chosen
        measure_keys.append(previous)

    # clef: median filter per staff, then one value per onset group
    clef = [0] * n
    clef_regions: dict[int, tuple] = {}
    for s in (0, 1):
        ids = [i for i in range(n) if staff[i] == s]
        if not ids:
            continue
        filtered = _median3([clef_raw[i] for i in ids])
        by_note = dict(zip(ids, filtered))
        regions = []
        prev_value: Optional[int] = None
        for group in _group_by_onset(ids, notes):
            value = _majority([by_note[i] for i in group], prev_value)
            for i in group:
                clef[i] = value
            if value != prev_value:
                regions.append((notes[group[0]].onset_div, value))
                prev_value = value
        regions[0] = (0, regions[0][1])
        clef_regions[s] = tuple(regions)

    # octave brackets: canonical per onset group, then maximal non-none runs
    octave_shift = [0] * n
    octave_regions: dict[int, tuple] = {}
    for s in (0, 1):
        ids = [i for i in range(n) if staff[i] == s]
        if not ids:
            continue
        groups = _group_by_onset(ids, notes)
        values = [_majority([shift_raw[i] for i in group], None)
                  for group in groups]
        for group, value in zip(groups, values):
            for i in group:
                octave_shift[i] = value
        regions = []
        k = 0
        while k < len(groups):
            if values[k] == 0:
                k += 1
                continue
            j = k
            while j + 1 < len(groups) and values[j + 1] == values[k]:
                j += 1
            start = notes[groups[k][0]].onset_div
            end = max(notes[i].offset_div for g in groups[k:j + 1] for i in g)
            if j + 1 < len(groups):
                end = min(end, notes[groups[j + 1][0]].onset_div)
            regions.append((start, end, values[k]))
            k = j + 1
        if regions:
            octave_regions[s] = tuple(regions)

    # events per voice + rest infilling over each voice's active bars
    vocabulary = _rest_vocabulary(score.divisions_per_quarter)
    events: list[EngravedEvent] = []
    voice_staff: dict[int, int] = {}
    for voice, stream in numbered.items():
        voice_staff[voice] = stream.staff
        chord_events = []
        for pi in stream.pool_indices:
            pool = pools[pi]
            note_type = int(np.argmax(pool.pooled_logits["note_type"]))
            dots = int(np.argmax(pool.pooled_logits["dots"]))
            tuplet = TUPLET_VALUES[int(np.argmax(pool.pooled_logits["tuplet"]))]
            stem = int(np.argmax(pool.pooled_logits["stem"]))
            chord_events.append(EngravedEvent(
                voice=voice, staff=stream.staff, onset_div=pool.onset_div,
                duration_div=pool.duration_div, note_ids=pool.ids,
                note_type=note_type, dots=dots, tuplet=tuplet, stem=stem))
        chord_events.sort(key=lambda e: e.onset_div)
        first_bar = _bar_of(bars, chord_events[0].onset_div)
        last_bar = _bar_of(bars, chord_events[-1].onset_div)
        cursor = bars[first_bar][0]
        pending = list(chord_events)
        for b in range(first_bar, last_bar + 1):
            bar_onset, bar_len = bars[b]
            bar_end = bar_onset + bar_len
            while True:
                next_onset = (pending[0].onset_div
                              if pending and pending[0].onset_div < bar_end
                              else bar_end)
                if cursor < next_onset:
                    rests = decompose_gap(cursor, next_onset - cursor,
                                          bar_onset, vocabulary)
                    if rests is None:
                        raise UnfillableGap(voice, b, cursor, next_onset - cursor)
                    for div, type_index, dots in rests:
                        events.append(EngravedEvent(
                            voice=voice, staff=stream.staff, onset_div=cursor,
                            duration_div=div, note_ids=(), note_type=type_index,
                            dots=dots, tuplet=1, stem=STEM_NONE))
                        cursor += div
                if pending and pending[0].onset_div < bar_end:
                    ev = pending.pop(0)
                    events.append(ev)
                    cursor = ev.offset_div
                else:
                    break
        if pending:
            raise ValueError(f"voice {voice}: events outside its bar span")

    events.sort(key=lambda e: (e.voice, e.onset_div))
    engraved = EngravedScore(
        divisions_per_quarter=score.divisions_per_quarter,
        time_signatures=score.time_signatures, bar_count=bar_count,
        notes=notes, staff=tuple(staff), spelling=tuple(spelling),
        octave_shift=tuple(octave_shift), clef=tuple(clef),
        events=tuple(events), measure_keys=tuple(measure_keys),
        clef_regions=clef_regions, octave_regions=octave_regions,
        voice_staff=voice_staff)
    engraved.validate()
    return engraved


def engrave(bundle: PredictionBundle, score: Score, threshold: float = 0.5,
            pair_agg: str = "max") -> EngravedScore:
    """The full decode pipeline: pool chords, chain voices, unpool, fill."""
    pools = pool_chords(bundle, score, threshold)
    streams = assign_voices(pools, bundle, threshold, pair_agg)
    numbered = number_voices(streams, pools, score.notes)
    return unpool_and_finalize(numbered, pools, bundle, score)


# --- oracle-mode helpers ---

def perfect_bundle(score: Score, graph: Optional[ScoreGraph] = None,
                   margin: float = 20.0) -> PredictionBundle:
    """The bundle a perfect model would emit for a labeled score."""
    if score.labels is None:
        raise ValueError("perfect_bundle needs ground-truth labels")
    if graph is None:
        graph = build_graph(score)
    from .decoders import labels_to_classes
    n = len(score.notes)
    classes = labels_to_classes(score.labels, n)
    note_logits = {}
    for head in NODE_HEADS:
        logits = np.zeros((n, HEAD_WIDTHS[head]))
        logits[np.arange(n), classes[head]] = margin
        note_logits[head] = logits
    staff = note_logits["staff"]
    staff_probs = np.exp(staff - np.logaddexp.reduce(staff, axis=1,
                                                     keepdims=True))[:, 1]
    voice_pairs = graph.candidate_pairs
    truth_v = score.labels.voice_edges
    voice_probs = np.array([0.99 if pair in truth_v else 0.01
                            for pair in voice_pairs])
    from .graph import chord_candidate_pairs
    chord_pairs = chord_candidate_pairs(graph)
    truth_c = score.labels.chord_edges
    chord_probs = np.array([0.99 if pair in truth_c else 0.01
                            for pair in chord_pairs])
    return PredictionBundle(note_logits=note_logits, staff_probs=staff_probs,
                            voice_pairs=voice_pairs, voice_probs=voice_probs,
                            chord_pairs=chord_pairs, chord_probs=chord_probs)


def engrave_from_labels(score: Score, threshold: float = 0.5) -> EngravedScore:
    return engrave(perfect_bundle(score), score, threshold)


def labels_of(engraved: EngravedScore):
    """Read a LabelSet back off an engraved score (its implied ground truth)."""
    from .notes import LabelSet
    n = len(engraved.notes)
    note_type = [0] * n
    dots = [0] * n
    tuplet = [1] * n
    stem = [STEM_NONE] * n
    key = [0] * n
    voice_edges = set()
    chord_edges = set()
    for _, evs in engraved.voice_events().items():
        chords = [e for e in evs if not e.is_rest]
        for ev in chords:
            for i in ev.note_ids:
                note_type[i] = ev.note_type
                dots[i] = ev.dots
                tuplet[i] = ev.tuplet
                stem[i] = ev.stem
            for a in ev.note_ids:
                for b in ev.note_ids:
                    if a < b:
                        chord_edges.add((a, b))
        for prev, nxt in zip(chords, chords[1:]):
            for u in prev.note_ids:
                for w in nxt.note_ids:
                    voice_edges.add((u, w))
    for i, note in enumerate(engraved.notes):
        key[i] = engraved.measure_keys[note.bar_index]
    return LabelSet(
        staff=engraved.staff, spelling=engraved.spelling,
        key_fifths=tuple(key), stem=tuple(stem),
        octave_shift=engraved.octave_shift, clef=engraved.clef,
        note_type=tuple(note_type), dots=tuple(dots), tuplet=tuple(tuplet),
        voice_edges=frozenset(voice_edges), chord_edges=frozenset(chord_edges))
