"""Source recovery: predict which merged token owns each original position,
and expand merged tokens back to the original length."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .numerics import RandomStream, _softmax_rows, as_matrix, attention64, layer_norm
from .tome import LayerWeights, SourceMatrix

PROB_EPS = 1e-7
DEFAULT_HIDDEN = 384


@dataclass
class RecoveryModel:
    queries: np.ndarray  # L x hidden learnable recovery queries
    w_in: np.ndarray  # code_dim x hidden, lifts quantized tokens into the model
    w_out: np.ndarray  # hidden x code_dim, maps refined queries back for scoring
    cross: LayerWeights
    blocks: list[LayerWeights] = field(default_factory=list)

    @property
    def l(self) -> int:
        return self.queries.shape[0]

    @property
    def code_dim(self) -> int:
        return self.w_in.shape[0]

    @classmethod
    def init(cls, l: int, code_dim: int, rng: RandomStream, hidden: int = DEFAULT_HIDDEN, depth: int = 2):
        if l < 1 or code_dim < 1 or hidden < 1:
            raise ValueError("RecoveryModel.init: sizes must be >= 1")
        return cls(
            queries=rng.matrix(l, hidden),
            w_in=rng.matrix(code_dim, hidden, 1.0 / math.sqrt(code_dim)),
            w_out=rng.matrix(hidden, code_dim, 1.0 / math.sqrt(hidden)),
            cross=LayerWeights.init(hidden, rng),
            blocks=[LayerWeights.init(hidden, rng) for _ in range(depth)],
        )


@dataclass(frozen=True)
class SourceLogits:
    scores: np.ndarray  # L x K
    probs: np.ndarray  # row softmax of scores


@dataclass(frozen=True)
class SourcePrediction:
    source: SourceMatrix
    empty_clusters: tuple[int, ...]

    @property
    def degenerate(self) -> bool:
        return bool(self.empty_clusters)


def _block(x, memory, w: LayerWeights) -> np.ndarray:
    f64 = lambda m: m.astype(np.float64)  # noqa: E731
    xn = layer_norm(x)
    mn = xn if memory is None else layer_norm(memory)
    a = attention64(xn @ f64(w.wq), mn @ f64(w.wk), mn @ f64(w.wv))
    h = x + a @ f64(w.wo)
    return h + np.maximum(layer_norm(h) @ f64(w.w1), 0.0) @ f64(w.w2)


def recovery_forward(model: RecoveryModel, z_quant) -> SourceLogits:
    z = as_matrix(z_quant, "z_quant").astype(np.float64)
    if z.shape[0] == 0:
        raise ValueError("recovery_forward: no merged tokens (K = 0)")
    if z.shape[1] != model.code_dim:
        raise ValueError(f"recovery_forward: code dim {z.shape[1]} != model {model.code_dim}")
    memory = z @ model.w_in.astype(np.float64)
    x = _block(model.queries.astype(np.float64), memory, model.cross)
    for w in model.blocks:
        x = _block(x, None, w)
    refined = x @ model.w_out.astype(np.float64)
    scores = refined @ z.T
    return SourceLogits(scores, _softmax_rows(scores))


def _probs(logits) -> np.ndarray:
    return np.asarray(logits.probs if isinstance(logits, SourceLogits) else logits, dtype=np.float64)


def predict_source(logits) -> SourcePrediction:
    """Row-wise argmax (lowest cluster on ties); flags clusters left empty."""
    probs = _probs(logits)
    source = SourceMatrix(np.argmax(probs, axis=1), probs.shape[1])
    return SourcePrediction(source, tuple(source.empty_rows().tolist()))


def _target(truth: SourceMatrix, shape) -> np.ndarray:
    if (truth.l, truth.k) != tuple(shape):
        raise ValueError(f"source_loss: truth is {truth.k}x{truth.l}, probs are {shape[0]}x{shape[1]}")
    return truth.dense(np.float64).T


def source_loss(logits, truth: SourceMatrix) -> float:
    """Binary cross-entropy summed over all L x K entries of the softmax."""
    p = np.clip(_probs(logits), PROB_EPS, 1.0 - PROB_EPS)
    s = _target(truth, p.shape)
    return float(-(s * np.log(p) + (1.0 - s) * np.log1p(-p)).sum())


def source_loss_grad(logits, truth: SourceMatrix) -> np.ndarray:
    """d(source_loss)/d(probs); zero where the clamp is active."""
    raw = _probs(logits)
    p = np.clip(raw, PROB_EPS, 1.0 - PROB_EPS)
    s = _target(truth, p.shape)
    grad = -s / p + (1.0 - s) / (1.0 - p)
    return np.where((raw < PROB_EPS) | (raw > 1.0 - PROB_EPS), 0.0, grad)


def recover_tokens(z_quant, source: SourceMatrix) -> np.ndarray:
    """Expand K merged rows to L rows: row ``j`` copies the row owning ``j``."""
    z = as_matrix(z_quant, "z_quant")
    if z.shape[0] != source.k:
        raise ValueError(f"recover_tokens: {z.shape[0]} rows but source has k={source.k}")
    return z[source.assignment]
