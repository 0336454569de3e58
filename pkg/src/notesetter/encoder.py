"""Hybrid encoder: relation-typed graph convolution interleaved with a GRU.

Each of the L blocks computes a heterogeneous GraphSAGE convolution

    h~_u = ReLU( W0 h_u + sum_r sum_{v in N_r(u)} W_r h_v )

followed by dropout, then sweeps a GRU over the notes in ``note_order``
(onset, then pitch), carrying the hidden state from each note to the next.
Layer normalization is applied inside the GRU cell (on the candidate
pre-activation) and between blocks. The block output — the GRU states in
note-id order — feeds the next block; the last block's output is the
embedding matrix.

Ablation switches: ``use_gru=False`` drops the recurrence entirely (the
block output is the normalized convolution), and ``gru_on_initial_features``
makes every layer's GRU read the projected input features h^(0) instead of
that layer's convolution output, adding its states to the convolution
before the block norm.
"""

from __future__ import annotations

import dataclasses
import math

import numpy as np

from . import autodiff as ad
from .autodiff import Value
from .graph import RELATIONS, ScoreGraph
from .notes import N_FEATURES
from .rng import Rng


class RelationMismatch(ValueError):
    pass


@dataclasses.dataclass(frozen=True)
class EncoderConfig:
    hidden_size: int = 256
    num_layers: int = 3
    dropout_p: float = 0.5
    aggregation: str = "sum"          # "sum" (paper) or "mean" (ablation)
    use_gru: bool = True
    gru_on_initial_features: bool = False

    def validate(self) -> None:
        if self.num_layers < 1:
            raise ValueError("num_layers must be >= 1")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError("dropout_p must be in [0, 1)")
        if self.aggregation not in ("sum", "mean"):
            raise ValueError(f"unknown aggregation {self.aggregation!r}")


def init_encoder_params(config: EncoderConfig, rng: Rng) -> dict[str, Value]:
    """Fresh encoder parameters; creation order is fixed for determinism."""
    config.validate()
    h = config.hidden_size
    params: dict[str, Value] = {}

    def weight(name: str, rows: int, cols: int) -> None:
        params[name] = Value(rng.normal(rows, cols) * math.sqrt(1.0 / rows))

    def bias(name: str, cols: int) -> None:
        params[name] = Value(np.zeros((1, cols)))

    def norm(prefix: str, cols: int) -> None:
        params[f"{prefix}.g"] = Value(np.ones((1, cols)))
        params[f"{prefix}.b"] = Value(np.zeros((1, cols)))

    weight("enc.proj.W", N_FEATURES, h)
    bias("enc.proj.b", h)
    for layer in range(1, config.num_layers + 1):
        pre = f"enc.l{layer}"
        weight(f"{pre}.conv.W0", h, h)
        for rel in RELATIONS:
            weight(f"{pre}.conv.W.{rel}", h, h)
        for gate in ("z", "r", "c"):
            weight(f"{pre}.gru.Wx{gate}", h, h)
            weight(f"{pre}.gru.Wh{gate}", h, h)
            bias(f"{pre}.gru.b{gate}", h)
        norm(f"{pre}.gru.ln", h)
        norm(f"{pre}.ln", h)
    return params


def _gru_sweep(seq: Value, params: dict[str, Value], prefix: str,
               hidden: int) -> Value:
    """Run the GRU over the rows of ``seq`` (already in time order)."""
    n = seq.shape[0]
    zx = ad.add(ad.matmul(seq, params[f"{prefix}.Wxz"]), params[f"{prefix}.bz"])
    rx = ad.add(ad.matmul(seq, params[f"{prefix}.Wxr"]), params[f"{prefix}.br"])
    cx = ad.add(ad.matmul(seq, params[f"{prefix}.Wxc"]), params[f"{prefix}.bc"])
    ln_g = params[f"{prefix}.ln.g"]
    ln_b = params[f"{prefix}.ln.b"]
    state = Value(np.zeros((1, hidden)))
    rows = []
    for t in range(n):
        z = ad.sigmoid(ad.add(ad.row_gather(zx, [t]),
                              ad.matmul(state, params[f"{prefix}.Whz"])))
        r = ad.sigmoid(ad.add(ad.row_gather(rx, [t]),
                              ad.matmul(state, params[f"{prefix}.Whr"])))
        c = ad.tanh(ad.layer_norm(
            ad.add(ad.row_gather(cx, [t]),
                   ad.matmul(ad.mul(r, state), params[f"{prefix}.Whc"])),
            ln_g, ln_b))
        state = ad.add(ad.mul(ad.affine(z, -1.0, 1.0), c), ad.mul(z, state))
        rows.append(state)
    return ad.concat_rows(rows)


def encode(graph: ScoreGraph, params: dict[str, Value], config: EncoderConfig,
           rng: Rng, train: bool) -> Value:
    """Embed every note; (node_count x hidden_size)."""
    config.validate()
    h = config.hidden_size
    n = graph.node_count
    missing = [r for r in RELATIONS if r not in graph.edges]
    if missing:
        raise RelationMismatch(f"graph lacks relations {missing}")

    order = graph.note_order
    inverse_order = np.argsort(order)
    mean_scale: dict[str, Value] = {}
    if config.aggregation == "mean":
        for rel in RELATIONS:
            _, dst = graph.edges[rel]
            deg = np.bincount(dst, minlength=n).astype(np.float64)
            scale = np.where(deg > 0, 1.0 / np.maximum(deg, 1.0), 1.0)
            mean_scale[rel] = Value(np.repeat(scale.reshape(-1, 1), h, axis=1))

    features = Value(graph.features)
    hidden = ad.add(ad.matmul(features, params["enc.proj.W"]), params["enc.proj.b"])
    initial = hidden

    for layer in range(1, config.num_layers + 1):
        pre = f"enc.l{layer}"
        mixed = ad.matmul(hidden, params[f"{pre}.conv.W0"])
        for rel in RELATIONS:
            src, dst = graph.edges[rel]
            if len(src) == 0:
                continue
            agg = ad.scatter_sum(ad.row_gather(hidden, src), dst, n)
            if config.aggregation == "mean":
                agg = ad.mul(agg, mean_scale[rel])
            mixed = ad.add(mixed, ad.matmul(agg, params[f"{pre}.conv.W.{rel}"]))
        conv = ad.dropout(ad.relu(mixed), config.dropout_p, rng, train)
        if config.use_gru:
            source = initial if config.gru_on_initial_features else conv
            swept = _gru_sweep(ad.row_gather(source, order), params,
                               f"{pre}.gru", h)
            states = ad.row_gather(swept, inverse_order)
            block = ad.add(conv, states) if config.gru_on_initial_features else states
        else:
            block = conv
        hidden = ad.layer_norm(block, params[f"{pre}.ln.g"], params[f"{pre}.ln.b"])
    return hidden
