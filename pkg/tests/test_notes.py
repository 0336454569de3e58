"""Oracle tests for vocabularies, durations, features, and Score assembly."""

from __future__ import annotations

import math

import pytest

from notesetter.notes import (ALTER_VALUES, DEFAULT_SPELLING_BY_PC, MAX_DOTS,
                              N_FEATURES, N_KEY_CLASSES, N_SPELLING,
                              NOTE_TYPE_NAMES, NOTE_TYPE_QUARTERS, STEP_NAMES,
                              STEP_TO_PC, TUPLET_VALUES, QuantizedNote, Score,
                              TimeSignature, bar_length_div, bar_table,
                              compute_features, key_class, key_fifths,
                              make_score, spelling_class, spelling_of,
                              spelling_parts, spelling_pitch_class,
                              symbolic_duration_div, tuplet_class)


def test_spelling_class_oracle():
    # [DERIVED] class = 5*step_index + alter_index with steps A..G and
    # alters (-2,-1,0,1,2): C natural = 5*2+2 = 12, G natural = 5*6+2 = 32,
    # F sharp = 5*5+3 = 28, B flat = 5*1+1 = 6.
    assert spelling_of("C", 0) == 12
    assert spelling_of("G", 0) == 32
    assert spelling_of("A", 0) == 2
    assert spelling_of("F", 1) == 28
    assert spelling_of("B", -1) == 6
    assert spelling_class(0, 0) == 0  # A double-flat
    assert spelling_class(6, 4) == 34  # G double-sharp


def test_spelling_round_trip_and_pitch_class():
    for cls in range(N_SPELLING):
        step_i, alter_i = spelling_parts(cls)
        assert spelling_class(step_i, alter_i) == cls
        expected_pc = (STEP_TO_PC[STEP_NAMES[step_i]]
                       + ALTER_VALUES[alter_i]) % 12
        assert spelling_pitch_class(cls) == expected_pc
    # [DERIVED] spot checks: F#=6, Bb=10, Cb=11, E#=5.
    assert spelling_pitch_class(spelling_of("F", 1)) == 6
    assert spelling_pitch_class(spelling_of("B", -1)) == 10
    assert spelling_pitch_class(spelling_of("C", -1)) == 11
    assert spelling_pitch_class(spelling_of("E", 1)) == 5


def test_spelling_errors():
    with pytest.raises(ValueError):
        spelling_class(7, 0)
    with pytest.raises(ValueError):
        spelling_class(0, 5)
    with pytest.raises(ValueError):
        spelling_parts(35)


def test_default_spelling_covers_all_pitch_classes():
    for pc, (step, alter) in DEFAULT_SPELLING_BY_PC.items():
        assert (STEP_TO_PC[step] + alter) % 12 == pc
    assert set(DEFAULT_SPELLING_BY_PC) == set(range(12))


def test_key_class_oracle():
    # [DERIVED] shift by +7: fifths -7..7 -> classes 0..14.
    assert key_class(-7) == 0
    assert key_class(0) == 7
    assert key_class(7) == 14
    assert N_KEY_CLASSES == 15
    for f in range(-7, 8):
        assert key_fifths(key_class(f)) == f
    with pytest.raises(ValueError):
        key_class(8)
    with pytest.raises(ValueError):
        key_class(-8)


def test_tuplet_class():
    assert TUPLET_VALUES == (1, 3, 5)
    assert [tuplet_class(v) for v in TUPLET_VALUES] == [0, 1, 2]


def test_note_type_tables():
    assert NOTE_TYPE_NAMES.index("quarter") == 3
    assert NOTE_TYPE_QUARTERS[1] == 4  # whole
    assert NOTE_TYPE_QUARTERS[7] == pytest.approx(1 / 16)  # 64th
    assert MAX_DOTS == 3


QUARTER = NOTE_TYPE_NAMES.index("quarter")
EIGHTH = NOTE_TYPE_NAMES.index("eighth")
HALF = NOTE_TYPE_NAMES.index("half")
WHOLE = NOTE_TYPE_NAMES.index("whole")
BREVE = NOTE_TYPE_NAMES.index("breve")
SIXTEENTH = NOTE_TYPE_NAMES.index("16th")


def test_symbolic_duration_oracle():
    # [DERIVED] by hand: nominal quarters * divisions * dot factor
    # (2 - 2^-dots) * tuplet factor normal/actual.
    assert symbolic_duration_div(QUARTER, 0, 1, 4) == 4
    assert symbolic_duration_div(QUARTER, 1, 1, 4) == 6
    assert symbolic_duration_div(QUARTER, 2, 1, 4) == 7
    assert symbolic_duration_div(QUARTER, 3, 1, 4) is None  # 7.5 ticks
    assert symbolic_duration_div(EIGHTH, 0, 3, 6) == 2  # triplet eighth at 6
    assert symbolic_duration_div(SIXTEENTH, 0, 1, 2) is None  # half tick
    assert symbolic_duration_div(WHOLE, 0, 1, 1) == 4
    assert symbolic_duration_div(BREVE, 0, 1, 1) == 8
    assert symbolic_duration_div(QUARTER, 0, 5, 5) == 4  # quintuplet at 5
    assert symbolic_duration_div(QUARTER, 0, 5, 4) is None  # 16/5 ticks
    # dotted triplet half at 6: 12 * 1.5 * (2/3) = 12
    assert symbolic_duration_div(HALF, 1, 3, 6) == 12


def test_quantized_note_make_oracle():
    # [DERIVED] midi 60 -> pc 0, octave 4 (C4); midi 21 -> A0; midi 108 -> C8.
    n = QuantizedNote.make(0, 0, 4, 60, 0, 0, 16)
    assert (n.pitch_class, n.octave) == (0, 4)
    assert n.offset_div == 4
    assert QuantizedNote.make(0, 0, 1, 21, 0, 0, 16).octave == 0
    assert QuantizedNote.make(0, 0, 1, 108, 0, 0, 16).octave == 8


def test_quantized_note_validation():
    with pytest.raises(ValueError):
        QuantizedNote.make(0, 0, 0, 60, 0, 0, 16)  # zero duration
    with pytest.raises(ValueError):
        QuantizedNote.make(0, 0, 4, 128, 0, 0, 16)  # midi out of range
    with pytest.raises(ValueError):
        QuantizedNote.make(0, 16, 4, 60, 0, 0, 16)  # onset outside bar


def test_compute_features_quarter_in_44():
    # [DERIVED] quarter at the downbeat of a 4/4 bar, divisions 1:
    # norm_duration = tanh(1/4) ~= 0.2449, onset_fraction 0, downbeat 1.
    note = QuantizedNote.make(0, 0, 1, 60, 0, 0, 4)
    f = compute_features(note)
    assert f.pitch_class_onehot == tuple(1.0 if i == 0 else 0.0
                                         for i in range(12))
    assert f.norm_duration == pytest.approx(0.24491866240370913, abs=1e-12)
    assert f.onset_fraction == 0.0
    assert f.downbeat_flag == 1.0
    assert f.octave_value == 4.0
    assert f.bar_index == 0.0
    row = f.as_row()
    assert len(row) == N_FEATURES == 17
    assert row[12:] == (4.0, f.norm_duration, 0.0, 1.0, 0.0)


def test_compute_features_formula_duplicate():
    # [DERIVED: duplicate-formula oracle] straight-line reimplementation.
    for onset, dur, midi, bar_i, bar_on, bar_len in [
            (3, 2, 67, 0, 0, 8), (9, 6, 41, 1, 8, 8), (14, 1, 99, 1, 8, 8)]:
        note = QuantizedNote.make(0, onset, dur, midi, bar_i, bar_on, bar_len)
        f = compute_features(note)
        assert f.pitch_class_onehot[midi % 12] == 1.0
        assert sum(f.pitch_class_onehot) == 1.0
        assert f.octave_value == float(midi // 12 - 1)
        assert f.norm_duration == pytest.approx(math.tanh(dur / bar_len),
                                                abs=1e-15)
        assert f.onset_fraction == pytest.approx((onset - bar_on) / bar_len,
                                                 abs=1e-15)
        assert f.downbeat_flag == (1.0 if onset == bar_on else 0.0)
        assert f.bar_index == float(bar_i)


def test_bar_length_div():
    assert bar_length_div(4, 4, 4) == 16
    assert bar_length_div(3, 4, 2) == 6
    assert bar_length_div(6, 8, 2) == 6
    assert bar_length_div(2, 2, 1) == 4
    with pytest.raises(ValueError):
        bar_length_div(1, 8, 1)  # half a division


def test_bar_table_with_signature_change():
    # [DERIVED] 4/4 then 3/4 from bar 2 at divisions 2: lengths 8,8,6,6.
    sigs = (TimeSignature(0, 4, 4), TimeSignature(2, 3, 4))
    assert bar_table(2, sigs, 4) == [(0, 8), (8, 8), (16, 6), (22, 6)]


def test_make_score_sorts_and_numbers():
    score = make_score(2, [(0, 4, 4)],
                       [(8, 2, 60), (0, 4, 64), (0, 4, 60), (9, 1, 55)],
                       name="t")
    score.validate()
    got = [(n.onset_div, n.duration_div, n.midi_pitch) for n in score.notes]
    assert got == [(0, 4, 60), (0, 4, 64), (8, 2, 60), (9, 1, 55)]
    assert [n.id for n in score.notes] == [0, 1, 2, 3]
    assert score.num_bars == 2
    assert score.notes[2].bar_index == 1
    assert score.notes[2].bar_onset_div == 8


def test_score_validate_rejects_unsorted():
    n0 = QuantizedNote.make(0, 4, 2, 60, 0, 0, 8)
    n1 = QuantizedNote.make(1, 0, 2, 60, 0, 0, 8)
    score = Score(divisions_per_quarter=2,
                  time_signatures=(TimeSignature(0, 4, 4),),
                  notes=(n0, n1))
    with pytest.raises(ValueError):
        score.validate()


def test_score_validate_rejects_bad_bar_fields():
    bad = QuantizedNote.make(0, 0, 2, 60, 0, 0, 6)  # claims a 6-div bar
    score = Score(divisions_per_quarter=2,
                  time_signatures=(TimeSignature(0, 4, 4),),
                  notes=(bad,))
    with pytest.raises(ValueError):
        score.validate()
