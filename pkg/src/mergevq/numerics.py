"""Dense float kernels and the seeded random stream used across the package.

Matrices are plain ``numpy`` arrays of ``float32``. Every reduction (matmul,
softmax, attention) accumulates in ``float64`` and rounds the result back to
``float32`` once, so oracle comparisons stay tight at toy scale.

Random numbers come from :class:`RandomStream`, a thin wrapper around the
Philox-4x64 counter-based bit generator. Only the raw 64-bit words of Philox
are consumed; the uniform and normal transforms are defined here so that a
seed yields the same values on every platform and numpy release:

* uniform: ``(word >> 11) * 2**-53``, a double in ``[0, 1)``
* normal: Box-Muller on consecutive word pairs ``(u1, u2)``,
  ``sqrt(-2 ln(1 - u1)) * (cos 2*pi*u2, sin 2*pi*u2)``, both outputs used in
  that order; an odd request discards the trailing sine output.
"""

from __future__ import annotations

import math

import numpy as np

_MASK64 = (1 << 64) - 1
_TWO_NEG53 = 2.0**-53


def as_matrix(x, name: str = "matrix") -> np.ndarray:
    """Coerce ``x`` to a finite 2-D float32 array."""
    m = np.asarray(x, dtype=np.float32)
    if m.ndim == 1:
        m = m.reshape(1, -1)
    if m.ndim != 2:
        raise ValueError(f"{name}: expected 2-D, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError(f"{name}: non-finite entries")
    return m


def matmul(a, b) -> np.ndarray:
    a = np.asarray(a, dtype=np.float32)
    b = np.asarray(b, dtype=np.float32)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: shape mismatch {a.shape} x {b.shape}")
    return (a.astype(np.float64) @ b.astype(np.float64)).astype(np.float32)


def _softmax_rows(x: np.ndarray) -> np.ndarray:
    # rows may contain -inf (masked); callers guarantee one finite entry per row
    m = np.max(x, axis=-1, keepdims=True)
    e = np.exp(x - m)
    return e / np.sum(e, axis=-1, keepdims=True)


def softmax(v, temperature: float = 1.0) -> np.ndarray:
    """Numerically stable softmax of a vector at the given temperature."""
    x = np.asarray(v, dtype=np.float64).ravel()
    if x.size == 0:
        raise ValueError("softmax: empty input")
    if not temperature > 0:
        raise ValueError(f"softmax: temperature must be positive, got {temperature}")
    return _softmax_rows(x / temperature)


def attention64(q, k, v, bias=None, mask=None) -> np.ndarray:
    """Scaled dot-product attention evaluated entirely in float64.

    ``bias`` is added to every query's scores for the matching key (the
    proportional-attention ``log s`` term). ``mask[i, j]`` False hides key
    ``j`` from query ``i``.
    """
    q = np.asarray(q, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if q.ndim != 2 or k.ndim != 2 or v.ndim != 2:
        raise ValueError("attention: q, k, v must be 2-D")
    if q.shape[1] != k.shape[1]:
        raise ValueError(f"attention: q cols {q.shape[1]} != k cols {k.shape[1]}")
    if v.shape[0] != k.shape[0]:
        raise ValueError(f"attention: v rows {v.shape[0]} != k rows {k.shape[0]}")
    if k.shape[0] == 0:
        raise ValueError("attention: no keys")
    scores = (q @ k.T) / math.sqrt(k.shape[1])
    if bias is not None:
        bias = np.asarray(bias, dtype=np.float64).ravel()
        if bias.shape[0] != k.shape[0]:
            raise ValueError(f"attention: bias length {bias.shape[0]} != keys {k.shape[0]}")
        scores = scores + bias[None, :]
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != scores.shape:
            raise ValueError(f"attention: mask shape {mask.shape} != {scores.shape}")
        dead = ~mask.any(axis=1)
        if dead.any():
            raise ValueError(f"attention: query row {int(np.argmax(dead))} is fully masked")
        scores = np.where(mask, scores, -np.inf)
    return _softmax_rows(scores) @ v


def attention(q, k, v, bias=None, mask=None) -> np.ndarray:
    return attention64(q, k, v, bias=bias, mask=mask).astype(np.float32)


def layer_norm(x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Parameter-free layer norm over the last axis (float64)."""
    x = np.asarray(x, dtype=np.float64)
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps)


class RandomStream:
    """Seeded, platform-independent random source (Philox-4x64).

    ``stream`` selects an independent substream for the same seed, which is
    how parallel sessions get disjoint randomness.
    """

    def __init__(self, seed: int, stream: int = 0):
        self.seed = int(seed) & _MASK64
        self.stream = int(stream) & _MASK64
        self._bitgen = np.random.Philox(key=self.seed | (self.stream << 64))

    def __repr__(self):
        return f"RandomStream(seed={self.seed}, stream={self.stream})"

    def child(self, stream: int) -> "RandomStream":
        return RandomStream(self.seed, stream)

    def raw(self, n: int) -> np.ndarray:
        if n == 0:
            return np.zeros(0, dtype=np.uint64)
        return np.asarray(self._bitgen.random_raw(n), dtype=np.uint64)

    def uniform(self, n: int) -> np.ndarray:
        return (self.raw(n) >> np.uint64(11)).astype(np.float64) * _TWO_NEG53

    def normal(self, n: int) -> np.ndarray:
        if n < 0:
            raise ValueError("normal: n must be >= 0")
        if n == 0:
            return np.zeros(0, dtype=np.float64)
        pairs = (n + 1) // 2
        u = self.uniform(2 * pairs).reshape(pairs, 2)
        radius = np.sqrt(-2.0 * np.log1p(-u[:, 0]))
        theta = 2.0 * np.pi * u[:, 1]
        out = np.stack([radius * np.cos(theta), radius * np.sin(theta)], axis=1)
        return out.ravel()[:n]

    def matrix(self, rows: int, cols: int, scale: float = 1.0) -> np.ndarray:
        return (self.normal(rows * cols) * scale).reshape(rows, cols).astype(np.float32)

    def integers(self, high: int, n: int) -> np.ndarray:
        """``n`` integers uniform on ``[0, high)`` (floor of a uniform draw)."""
        return np.minimum((self.uniform(n) * high).astype(np.int64), high - 1)

    def permutation(self, n: int) -> np.ndarray:
        """Uniform permutation of ``range(n)`` by Fisher-Yates."""
        perm = np.arange(n, dtype=np.int64)
        if n < 2:
            return perm
        u = self.uniform(n - 1)
        for i in range(n - 1, 0, -1):
            j = min(int(u[n - 1 - i] * (i + 1)), i)
            perm[i], perm[j] = perm[j], perm[i]
        return perm


def rng_normal(stream: RandomStream, n: int) -> np.ndarray:
    return stream.normal(n)
