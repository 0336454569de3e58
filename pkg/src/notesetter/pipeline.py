"""Batch plumbing: corpus ingest with manifests, prediction dumps, engraving.

A prediction dump is JSON-lines: one ``meta`` record carrying the quantized
score (so downstream steps need no other input), then one record per note and
per candidate pair. The manifest records a seeded 80/20 train/test split that
depends only on (seed, piece name), so re-ingesting a grown corpus never
moves existing pieces between splits.
"""

from __future__ import annotations

import json
import zlib
from pathlib import Path
from typing import Optional

from .decoders import PredictionBundle
from .musicxml import export_musicxml, read_score_file
from .notes import Score, make_score
from .postprocess import engrave
from .model import ModelConfig, predict_bundle

MANIFEST_VERSION = 1
SCORE_SUFFIXES = (".musicxml", ".xml", ".mxl")


class MissingInput(ValueError):
    pass


def split_of(seed: int, name: str) -> str:
    """Seeded, order-independent 80/20 assignment."""
    bucket = zlib.crc32(f"{seed}:{name}".encode("utf-8")) % 100
    return "train" if bucket < 80 else "test"


def find_score_files(in_dir: Path) -> list[Path]:
    in_dir = Path(in_dir)
    if not in_dir.is_dir():
        raise MissingInput(f"corpus directory {in_dir} does not exist")
    files = sorted(p for p in in_dir.rglob("*")
                   if p.is_file() and p.suffix.lower() in SCORE_SUFFIXES)
    if not files:
        raise MissingInput(f"no {'/'.join(SCORE_SUFFIXES)} files under {in_dir}")
    return files


def ingest_corpus(in_dir: Path, seed: int) -> dict:
    """Parse every score under ``in_dir`` into a manifest dictionary."""
    pieces = []
    seen_names = set()
    for path in find_score_files(in_dir):
        result = read_score_file(path)
        name = result.score.name
        if name in seen_names:
            raise MissingInput(
                f"duplicate piece name {name!r} (from {path}); "
                f"file stems must be unique")
        seen_names.add(name)
        pieces.append({
            "name": name,
            "path": str(Path(path).resolve()),
            "split": split_of(seed, name),
            "notes": len(result.score.notes),
            "bars": result.score.num_bars,
            "grace_dropped": result.grace_dropped,
            "clipped_notes": result.clipped_notes,
            "fifteen_mb_mapped": result.fifteen_mb_mapped,
        })
    return {"version": MANIFEST_VERSION, "seed": seed, "pieces": pieces}


def write_manifest(manifest: dict, path: Path) -> None:
    Path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n",
                          encoding="utf-8")


def load_manifest(path: Path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise MissingInput(f"manifest {path} does not exist")
    try:
        manifest = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise MissingInput(f"manifest {path} is not valid JSON: {exc}") from exc
    if not isinstance(manifest, dict) or "pieces" not in manifest:
        raise MissingInput(f"manifest {path} lacks a pieces list")
    return manifest


def load_corpus(manifest: dict, split: Optional[str] = None) -> list[Score]:
    """Parse the manifest's pieces (optionally one split) into Scores."""
    scores = []
    for piece in manifest["pieces"]:
        if split is not None and piece["split"] != split:
            continue
        path = Path(piece["path"])
        if not path.is_file():
            raise MissingInput(f"manifest points at missing file {path}")
        result = read_score_file(path)
        scores.append(result.score)
    return scores


# --- prediction dumps ---

def prediction_lines(score: Score, bundle: PredictionBundle) -> list[str]:
    meta = {
        "kind": "meta",
        "name": score.name,
        "divisions": score.divisions_per_quarter,
        "time_signatures": [[t.bar_index, t.numerator, t.denominator]
                            for t in score.time_signatures],
        "notes": [[n.onset_div, n.duration_div, n.midi_pitch]
                  for n in score.notes],
    }
    return [json.dumps(meta)] + bundle.to_json_lines()


def write_predictions(path: Path, score: Score,
                      bundle: PredictionBundle) -> None:
    Path(path).write_text("\n".join(prediction_lines(score, bundle)) + "\n",
                          encoding="utf-8")


def read_predictions(path: Path) -> tuple[Score, PredictionBundle]:
    path = Path(path)
    if not path.is_file():
        raise MissingInput(f"prediction dump {path} does not exist")
    lines = path.read_text(encoding="utf-8").splitlines()
    meta = None
    for line in lines:
        if line.strip():
            rec = json.loads(line)
            if rec.get("kind") == "meta":
                meta = rec
            break
    if meta is None:
        raise MissingInput(f"{path}: first record must be the meta line")
    score = make_score(meta["divisions"],
                       [tuple(t) for t in meta["time_signatures"]],
                       [tuple(n) for n in meta["notes"]],
                       name=meta.get("name", path.stem))
    bundle = PredictionBundle.from_json_lines(lines)
    if bundle.note_count != len(score.notes):
        raise MissingInput(
            f"{path}: dump has {bundle.note_count} notes, "
            f"meta describes {len(score.notes)}")
    bundle.validate()
    return score, bundle


def predict_file(path: Path, params, config: ModelConfig) -> tuple[Score, PredictionBundle]:
    result = read_score_file(path)
    return result.score, predict_bundle(result.score, params, config)


def engrave_dump(path: Path, threshold: float = 0.5,
                 pair_agg: str = "max") -> bytes:
    """Prediction dump file -> engraved MusicXML bytes."""
    score, bundle = read_predictions(path)
    engraved = engrave(bundle, score, threshold=threshold, pair_agg=pair_agg)
    return export_musicxml(engraved)
