"""Lookup-free quantization.

Each latent dimension is quantized to its sign; the codebook is the implicit
set ``{-1, +1}^d`` and a code's index is the integer whose bit ``j`` (0-based,
least significant first) is set when component ``j`` is ``+1``. Exact zeros
quantize to ``+1``.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .numerics import as_matrix

DEFAULT_CODE_DIM = 18
_MAX_CODE_DIM = 62


@dataclass(frozen=True)
class LfqCode:
    index: int
    dims: int

    @property
    def bits(self) -> tuple[int, ...]:
        return tuple((self.index >> j) & 1 for j in range(self.dims))

    @property
    def vector(self) -> np.ndarray:
        return index_code(self.index, self.dims)


def _check_dims(d: int) -> None:
    if not 1 <= d <= _MAX_CODE_DIM:
        raise ValueError(f"code dimension {d} outside [1, {_MAX_CODE_DIM}]")


def quantize(z):
    """Sign-quantize rows of ``z``; returns ``(indices, z_quant)``."""
    z = as_matrix(z, "z")
    _check_dims(z.shape[1])
    z_quant = np.where(z >= 0, np.float32(1.0), np.float32(-1.0))
    return code_indices(z_quant), z_quant


def code_indices(codes) -> np.ndarray:
    codes = np.asarray(codes)
    if codes.ndim == 1:
        codes = codes[None, :]
    if not np.all((codes == 1) | (codes == -1)):
        raise ValueError("code_index: entries must be -1 or +1")
    _check_dims(codes.shape[1])
    weights = np.left_shift(np.int64(1), np.arange(codes.shape[1], dtype=np.int64))
    return ((codes > 0).astype(np.int64) * weights).sum(axis=1)


def code_index(code) -> int:
    return int(code_indices(np.asarray(code).ravel())[0])


def index_codes(indices, d: int) -> np.ndarray:
    _check_dims(d)
    idx = np.asarray(indices, dtype=np.int64).ravel()
    if idx.size and (idx.min() < 0 or idx.max() >= (1 << d)):
        raise ValueError(f"code index outside [0, 2^{d})")
    bits = (idx[:, None] >> np.arange(d, dtype=np.int64)[None, :]) & 1
    return np.where(bits == 1, np.float32(1.0), np.float32(-1.0))


def index_code(index: int, d: int) -> np.ndarray:
    return index_codes([index], d)[0]


def straight_through(z):
    """Forward value ``z + stop_grad(sign(z) - z)`` and its backward map.

    The backward is the identity: upstream gradients with respect to the
    quantized output pass to ``z`` unchanged.
    """
    _, z_quant = quantize(z)
    return z_quant, lambda grad: np.asarray(grad, dtype=np.float64)


def commitment_loss(z, z_quant) -> float:
    """Mean squared distance between ``z`` and its (stop-gradient) code."""
    z = np.asarray(z, dtype=np.float64)
    zq = np.asarray(z_quant, dtype=np.float64)
    if z.shape != zq.shape:
        raise ValueError(f"commitment_loss: shapes {z.shape} and {zq.shape} differ")
    return float(np.mean((z - zq) ** 2))


def commitment_loss_grad(z, z_quant) -> np.ndarray:
    """Gradient with respect to ``z`` only; the code side is detached."""
    z = np.asarray(z, dtype=np.float64)
    zq = np.asarray(z_quant, dtype=np.float64)
    if z.shape != zq.shape:
        raise ValueError(f"commitment_loss_grad: shapes {z.shape} and {zq.shape} differ")
    return 2.0 * (z - zq) / z.size


def _binary_entropy_from_logit(x: np.ndarray) -> np.ndarray:
    # H(sigmoid(x)) in nats, stable for large |x|
    p = 1.0 / (1.0 + np.exp(-x))
    return np.logaddexp(0.0, -np.abs(x)) + np.abs(x) * (1.0 - np.where(x >= 0, p, 1.0 - p))


def _binary_entropy(p: np.ndarray) -> np.ndarray:
    p = np.clip(p, 1e-12, 1.0 - 1e-12)
    return -(p * np.log(p) + (1.0 - p) * np.log(1.0 - p))


def entropy_terms(z) -> tuple[float, float]:
    """``(sample_entropy, codebook_entropy)`` in nats.

    Bit ``j`` of a row is ``+1`` with probability ``sigmoid(2 z_j)``.
    ``sample_entropy`` sums the per-bit binary entropies of each row and
    averages over rows; ``codebook_entropy`` sums the binary entropies of the
    batch-averaged bit probabilities.
    """
    z = np.asarray(z, dtype=np.float64)
    if z.ndim == 1:
        z = z[None, :]
    logits = 2.0 * z
    sample = float(_binary_entropy_from_logit(logits).sum(axis=1).mean())
    mean_p = (1.0 / (1.0 + np.exp(-logits))).mean(axis=0)
    codebook = float(_binary_entropy(mean_p).sum())
    return sample, codebook


def entropy_penalty(z) -> float:
    """Per-sample entropy minus codebook entropy (lower is better)."""
    sample, codebook = entropy_terms(z)
    return sample - codebook


@dataclass
class CodebookStats:
    dims: int
    counts: Counter = field(default_factory=Counter)

    def __post_init__(self):
        _check_dims(self.dims)

    @property
    def distinct(self) -> int:
        return len(self.counts)

    @property
    def usage(self) -> float:
        return self.distinct / float(1 << self.dims)

    def record(self, indices) -> "CodebookStats":
        idx = np.asarray(indices, dtype=np.int64).ravel()
        if idx.size and (idx.min() < 0 or idx.max() >= (1 << self.dims)):
            raise ValueError(f"record_usage: index outside [0, 2^{self.dims})")
        self.counts.update(idx.tolist())
        return self


def record_usage(stats: CodebookStats, codes) -> CodebookStats:
    """Add codes to ``stats``. ``codes`` is an index vector or a {-1,+1} matrix."""
    codes = np.asarray(codes)
    if codes.ndim == 2:
        if codes.shape[1] != stats.dims:
            raise ValueError(f"record_usage: code dim {codes.shape[1]} != stats dim {stats.dims}")
        codes = code_indices(codes)
    return stats.record(codes)
