"""Shared fixtures: paths to the hand-written MusicXML corpus and parsed scores.

The five files under tests/fixtures/ are hand-authored and hand-verified;
tests that need ground truth about them carry [DERIVED] tables worked out
from the XML by hand, independent of the parser under test.
"""

from __future__ import annotations

from pathlib import Path

import pytest

from notesetter.musicxml import read_score_file

FIXTURE_DIR = Path(__file__).parent / "fixtures"

FIXTURE_NAMES = (
    "fixture_a",
    "fixture_b",
    "grace_clip",
    "single_whole",
    "triplet_octave",
)


def fixture_path(name: str) -> Path:
    return FIXTURE_DIR / f"{name}.musicxml"


def parse_fixture(name: str):
    return read_score_file(fixture_path(name))


@pytest.fixture(scope="session")
def parsed_fixtures():
    """name -> ParseResult for every fixture file, parsed once per session."""
    return {name: parse_fixture(name) for name in FIXTURE_NAMES}


@pytest.fixture(scope="session")
def fixture_a(parsed_fixtures):
    return parsed_fixtures["fixture_a"]


@pytest.fixture(scope="session")
def fixture_b(parsed_fixtures):
    return parsed_fixtures["fixture_b"]


# Acceptance tests (tests/test_acceptance.py) append one "PASS: ..."/"FAIL: ..."
# line per criterion here; the summary hook reprints them after the test run so
# they survive pytest's output capture.
ACCEPTANCE_RESULTS: list[str] = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if ACCEPTANCE_RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_RESULTS:
            terminalreporter.write_line(line)
