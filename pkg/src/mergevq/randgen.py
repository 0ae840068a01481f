"""Random-order generation followed by source prediction and token expansion.

The decoder sees ``class, P(pi_1), x_1, P(pi_2), x_2, ...`` where ``P(j)`` is
a position-instruction input naming the slot the next token fills. Slots map
to raster positions through ``targets`` (default: slot ``j`` -> position
``j``); for merged sequences the natural target is the first raster
position of each cluster.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .lfq import index_codes
from .numerics import RandomStream
from .recovery import RecoveryModel, SourcePrediction, predict_source, recover_tokens, recovery_forward
from .tome import SourceMatrix
from .toymodel import KvCache, ToyARModel, choose_token, forward_step


@dataclass
class RandomOrderTrace:
    class_id: int
    permutation: np.ndarray  # slot generated at each step
    targets: np.ndarray  # raster position of each slot
    tokens: list[int]  # in generation order
    stream: list[tuple[str, int]]

    @property
    def k(self) -> int:
        return len(self.tokens)

    def raster_tokens(self) -> list[int]:
        """Tokens re-sorted by slot."""
        out = [0] * self.k
        for step, slot in enumerate(self.permutation.tolist()):
            out[slot] = self.tokens[step]
        return out


def random_order_decode(
    model: ToyARModel,
    class_id: int,
    k: int,
    rng: RandomStream,
    order=None,
    targets=None,
    temperature: float | None = None,
    forced=None,
) -> RandomOrderTrace:
    """Decode ``k`` tokens in a random slot order drawn from ``rng``.

    ``order`` fixes the permutation instead; ``forced`` fixes the tokens.
    """
    if k < 1 or 2 * k + 1 > model.l_max:
        raise ValueError(f"random_order_decode: 2*{k}+1 inputs exceed l_max={model.l_max}")
    perm = rng.permutation(k) if order is None else np.asarray(order, dtype=np.int64)
    if not np.array_equal(np.sort(perm), np.arange(k)):
        raise ValueError("random_order_decode: order is not a permutation")
    targets = np.arange(k) if targets is None else np.asarray(targets, dtype=np.int64)
    if targets.shape != (k,):
        raise ValueError(f"random_order_decode: need {k} targets")
    cache = KvCache(model, 2 * k + 1)
    stream = [("class", int(class_id))]
    forward_step(model, class_id, 0, cache, kind="class")
    tokens = []
    for n, slot in enumerate(perm.tolist()):
        instr = int(targets[slot])
        logits = forward_step(model, instr, 2 * n + 1, cache, kind="pos")
        stream.append(("pos", instr))
        tok = int(forced[n]) if forced is not None else choose_token(logits, temperature, rng)
        tokens.append(tok)
        stream.append(("image", tok))
        if n + 1 < k:
            forward_step(model, tok, 2 * n + 2, cache)
    return RandomOrderTrace(int(class_id), perm, targets, tokens, stream)


@dataclass
class PipelineResult:
    output: np.ndarray  # L x d expanded tokens
    z_k: np.ndarray  # K x d decoded codes in slot order
    source: SourceMatrix
    prediction: SourcePrediction | None

    @property
    def degenerate(self) -> bool:
        return self.prediction is not None and self.prediction.degenerate


def generate_pipeline(trace: RandomOrderTrace, recovery: RecoveryModel, lfq_dim: int, l: int,
                      source: SourceMatrix | None = None) -> PipelineResult:
    """Token ids -> codes -> predicted source -> L expanded rows.

    Passing ``source`` bypasses the recovery model (ground-truth injection).
    """
    if recovery.l != l:
        raise ValueError(f"generate_pipeline: recovery model is configured for L={recovery.l}, not {l}")
    if recovery.code_dim != lfq_dim:
        raise ValueError(f"generate_pipeline: recovery code dim {recovery.code_dim} != {lfq_dim}")
    z_k = index_codes(trace.raster_tokens(), lfq_dim)
    prediction = None
    if source is None:
        prediction = predict_source(recovery_forward(recovery, z_k))
        source = prediction.source
    if source.shape != (trace.k, l):
        raise ValueError(f"generate_pipeline: source is {source.shape}, expected {(trace.k, l)}")
    return PipelineResult(recover_tokens(z_k, source), z_k, source, prediction)
