"""Merge-ratio sampling: draw an offset ``T`` and map it to a kept-token count.

Kept counts are perfect squares ``(base + sign * T)**2``:

======= ====== ===== ================ =========================
version base   sign  default range    note
======= ====== ===== ================ =========================
R       6      +1    [36, 100]        256-token grid
G+R     12     +1    [121, 225]       stage-2 range [144, 256]
G       16     +1    [256, 1024]      1024-token grid
======= ====== ===== ================ =========================

The offset distribution is either a discrete exponential on ``T >= 0`` or a
discrete Gaussian on the integers; both are restricted to offsets whose kept
count lies inside the range and renormalized there.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .numerics import RandomStream

VERSIONS = {
    "R": (6, +1, (36, 100)),
    "G+R": (12, +1, (121, 225)),
    "G": (16, +1, (256, 1024)),
}
# other ranges shown for the same versions
RANGES = {
    ("R", "stage1"): (36, 100),
    ("G+R", "stage1"): (121, 225),
    ("G+R", "stage2"): (144, 256),
    ("G", "gaussian"): (225, 400),
    ("G", "exponential"): (256, 1024),
}
KINDS = ("exponential", "gaussian")


@dataclass(frozen=True)
class MergeRatioSampler:
    kind: str = "exponential"
    version: str = "R"
    lam: float = 1.0
    mu: float = 0.0
    sigma: float = 1.0
    base: int | None = None
    sign: int | None = None
    kept_range: tuple[int, int] | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"sampler kind must be one of {KINDS}, got {self.kind!r}")
        if self.version not in VERSIONS:
            raise ValueError(f"sampler version must be one of {tuple(VERSIONS)}, got {self.version!r}")
        base, sign, rng = VERSIONS[self.version]
        object.__setattr__(self, "base", base if self.base is None else int(self.base))
        object.__setattr__(self, "sign", sign if self.sign is None else int(self.sign))
        object.__setattr__(self, "kept_range", tuple(rng if self.kept_range is None else self.kept_range))
        if self.sign not in (-1, 1):
            raise ValueError("sampler sign must be +1 or -1")
        if not self.lam > 0:
            raise ValueError("sampler lambda must be positive")
        if not self.sigma > 0:
            raise ValueError("sampler sigma must be positive")
        lo, hi = self.kept_range
        if not 1 <= lo <= hi:
            raise ValueError(f"bad kept range {self.kept_range}")
        if not self.support():
            raise ValueError(f"no offset maps into kept range {self.kept_range}")

    def kept(self, t: int) -> int:
        return (self.base + self.sign * t) ** 2

    def support(self) -> list[int]:
        lo, hi = self.kept_range
        # |base + sign*t| <= sqrt(hi) bounds the candidate offsets
        reach = math.isqrt(hi) + abs(self.base) + 1
        ts = range(0 if self.kind == "exponential" else -reach, reach + 1)
        return [t for t in ts if self.base + self.sign * t >= 1 and lo <= self.kept(t) <= hi]


def _weights(sampler: MergeRatioSampler, ts) -> np.ndarray:
    t = np.asarray(ts, dtype=np.float64)
    if sampler.kind == "exponential":
        return (1.0 - math.exp(-sampler.lam)) * np.exp(-sampler.lam * t)
    return np.exp(-((t - sampler.mu) ** 2) / (2.0 * sampler.sigma**2))


def exponential_pmf(k: int, lam: float = 1.0) -> float:
    """Untruncated discrete exponential ``P(T = k)`` for ``k >= 0``."""
    return (1.0 - math.exp(-lam)) * math.exp(-lam * k)


def distribution_table(sampler: MergeRatioSampler) -> list[tuple[int, float]]:
    ts = sampler.support()
    w = _weights(sampler, ts)
    p = w / w.sum()
    return list(zip(ts, p.tolist()))


def sample_offsets(sampler: MergeRatioSampler, rng: RandomStream, n: int) -> np.ndarray:
    table = distribution_table(sampler)
    ts = np.array([t for t, _ in table], dtype=np.int64)
    cdf = np.cumsum([p for _, p in table])
    idx = np.searchsorted(cdf, rng.uniform(n), side="right")
    return ts[np.minimum(idx, ts.size - 1)]


def sample_offset(sampler: MergeRatioSampler, rng: RandomStream) -> int:
    """Inverse-CDF draw of ``T`` from the truncated, renormalized table."""
    return int(sample_offsets(sampler, rng, 1)[0])


def kept_tokens(sampler: MergeRatioSampler, t: int) -> int:
    k = sampler.kept(t)
    lo, hi = sampler.kept_range
    if sampler.base + sampler.sign * t < 1 or not lo <= k <= hi:
        raise ValueError(f"kept count {k} for T={t} outside {sampler.version} range [{lo}, {hi}]")
    return k


def histogram(sampler: MergeRatioSampler, rng: RandomStream, n: int) -> dict:
    draws = sample_offsets(sampler, rng, n)
    table = distribution_table(sampler)
    counts = {t: int(np.sum(draws == t)) for t, _ in table}
    tv = 0.5 * sum(abs(counts[t] / n - p) for t, p in table)
    return {
        "version": sampler.version,
        "kind": sampler.kind,
        "n": n,
        "kept_range": list(sampler.kept_range),
        "table": [{"T": t, "kept": sampler.kept(t), "p": p} for t, p in table],
        "histogram": [{"T": t, "kept": sampler.kept(t), "count": counts[t]} for t, _ in table],
        "tv_distance": tv,
    }
