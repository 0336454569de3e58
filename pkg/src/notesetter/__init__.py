"""notesetter: engrave quantized piano music as MusicXML.

The pipeline: build a typed score graph from quantized notes, encode it with
a graph-convolution + GRU network (pure numpy, custom reverse-mode autodiff),
decode per-note and per-pair engraving decisions with MLP heads, then
deterministically post-process (chord pooling, optimal voice assignment, rest
infilling) into a strict MusicXML 3.1 subset.
"""

from .notes import (LabelSet, QuantizedNote, Score, TimeSignature, make_score)
from .graph import ScoreGraph, build_graph, candidate_pairs, coverage_report
from .model import ModelConfig, init_params, predict_bundle
from .trainer import TrainConfig, evaluate_corpus, train
from .postprocess import EngravedScore, engrave, engrave_from_labels
from .musicxml import (ParseResult, export_musicxml, parse_musicxml,
                       read_score_file, validate_subset)
from .metrics import EvalReport, evaluate_bundle

__version__ = "0.1.0"

__all__ = [
    "EngravedScore", "EvalReport", "LabelSet", "ModelConfig", "ParseResult",
    "QuantizedNote", "Score", "ScoreGraph", "TimeSignature", "TrainConfig",
    "build_graph", "candidate_pairs", "coverage_report", "engrave",
    "engrave_from_labels", "evaluate_bundle", "evaluate_corpus",
    "export_musicxml", "init_params", "make_score", "parse_musicxml",
    "predict_bundle", "read_score_file", "train", "validate_subset",
    "__version__",
]
