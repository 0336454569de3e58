"""Full model: graph encoder plus prediction heads, with one loss per piece."""

from __future__ import annotations

import dataclasses
from typing import Optional

from .autodiff import Value, no_grad
from .decoders import (LossResult, Predictions, PredictionBundle, decode_all,
                       init_decoder_params, total_loss)
from .encoder import EncoderConfig, encode, init_encoder_params
from .graph import ScoreGraph, build_graph
from .notes import Score
from .rng import Rng

# keys that change parameter shapes; the config hash covers exactly these
MODEL_SHAPE_KEYS = ("hidden_size", "num_layers", "aggregation", "use_gru",
                    "gru_on_initial_features")


@dataclasses.dataclass
class ModelConfig:
    hidden_size: int = 256
    num_layers: int = 3
    dropout_p: float = 0.5
    aggregation: str = "sum"
    use_gru: bool = True
    gru_on_initial_features: bool = False
    threshold: float = 0.5
    pair_agg: str = "max"
    strict_same_bar_candidates: bool = False

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(
            hidden_size=self.hidden_size, num_layers=self.num_layers,
            dropout_p=self.dropout_p, aggregation=self.aggregation,
            use_gru=self.use_gru,
            gru_on_initial_features=self.gru_on_initial_features)

    @property
    def cross_bar(self) -> bool:
        return not self.strict_same_bar_candidates

    def validate(self) -> None:
        self.encoder_config().validate()
        if not 0.0 < self.threshold < 1.0:
            raise ValueError(f"threshold {self.threshold} outside (0, 1)")
        if self.pair_agg not in ("max", "mean"):
            raise ValueError(f"pair_agg {self.pair_agg!r}")

    def shape_dict(self) -> dict:
        return {k: getattr(self, k) for k in MODEL_SHAPE_KEYS}


def init_params(config: ModelConfig, rng: Rng) -> dict[str, Value]:
    """All trainable parameters, in a fixed creation order."""
    config.validate()
    params = init_encoder_params(config.encoder_config(), rng)
    params.update(init_decoder_params(config.hidden_size, rng))
    return params


def forward(graph: ScoreGraph, params: dict[str, Value], config: ModelConfig,
            rng: Optional[Rng] = None, train: bool = False) -> Predictions:
    embeddings = encode(graph, params, config.encoder_config(), rng=rng,
                        train=train)
    return decode_all(embeddings, graph, params)


def graph_for(score: Score, config: ModelConfig) -> ScoreGraph:
    return build_graph(score, cross_bar=config.cross_bar)


def loss_for_score(score: Score, graph: ScoreGraph, params: dict[str, Value],
                   config: ModelConfig, rng: Optional[Rng] = None,
                   train: bool = True) -> LossResult:
    if score.labels is None:
        raise ValueError(f"score {score.name!r} carries no labels")
    preds = forward(graph, params, config, rng=rng, train=train)
    return total_loss(preds, score.labels, len(score.notes))


def predict_bundle(score: Score, params: dict[str, Value],
                   config: ModelConfig) -> PredictionBundle:
    """Deterministic inference: eval mode (no dropout), numpy bundle out."""
    graph = graph_for(score, config)
    with no_grad():
        preds = forward(graph, params, config, rng=None, train=False)
    return preds.bundle()
