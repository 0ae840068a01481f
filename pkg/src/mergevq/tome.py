"""Token merging encoder with source-matrix tracking.

Each layer runs pre-norm self-attention with a per-key ``log s`` bias
(``s`` = number of original tokens a merged token stands for), a residual
feed-forward block, and then merges ``r`` token pairs found by bipartite
soft matching on the layer's attention keys.

Ordering convention: after a merge the surviving tokens keep their relative
order and the merged token takes the slot of its group-A member.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .numerics import RandomStream, as_matrix, attention64, layer_norm


@dataclass(frozen=True)
class SourceMatrix:
    """Binary K x L matrix stored column-wise: ``assignment[j]`` is the row
    (merged cluster) that owns original position ``j``.

    Construction only checks that assignments are in range. Whether every row
    has a member is reported by :meth:`empty_rows`, because predicted sources
    may legitimately leave clusters empty; use :meth:`check` where a full
    partition is required.
    """

    assignment: np.ndarray
    k: int

    def __post_init__(self):
        a = np.asarray(self.assignment, dtype=np.int64).ravel()
        a.setflags(write=False)
        object.__setattr__(self, "assignment", a)
        object.__setattr__(self, "k", int(self.k))
        if self.k < 0:
            raise ValueError("SourceMatrix: k must be >= 0")
        if a.size and (a.min() < 0 or a.max() >= self.k):
            raise ValueError(f"SourceMatrix: assignment outside [0, {self.k})")

    @classmethod
    def identity(cls, l: int) -> "SourceMatrix":
        return cls(np.arange(l), l)

    @classmethod
    def from_dense(cls, dense) -> "SourceMatrix":
        d = np.asarray(dense)
        if d.ndim != 2:
            raise ValueError("SourceMatrix.from_dense: expected 2-D")
        col = d.sum(axis=0)
        if not np.all(col == 1) or not np.all((d == 0) | (d == 1)):
            raise ValueError("SourceMatrix.from_dense: every column needs exactly one 1")
        return cls(np.argmax(d, axis=0), d.shape[0])

    @property
    def l(self) -> int:
        return int(self.assignment.size)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.k, self.l)

    def dense(self, dtype=np.int8) -> np.ndarray:
        out = np.zeros((self.k, self.l), dtype=dtype)
        out[self.assignment, np.arange(self.l)] = 1
        return out

    def counts(self) -> np.ndarray:
        """Members per row, i.e. the cluster sizes ``s``."""
        return np.bincount(self.assignment, minlength=self.k)

    def members(self, row: int) -> np.ndarray:
        return np.flatnonzero(self.assignment == row)

    def empty_rows(self) -> np.ndarray:
        return np.flatnonzero(self.counts() == 0)

    def check(self) -> None:
        empty = self.empty_rows()
        if empty.size:
            raise ValueError(f"SourceMatrix: rows without members: {empty.tolist()}")

    def __eq__(self, other):
        if not isinstance(other, SourceMatrix):
            return NotImplemented
        return self.k == other.k and np.array_equal(self.assignment, other.assignment)

    def __hash__(self):
        return hash((self.k, self.assignment.tobytes()))


@dataclass(frozen=True)
class TokenState:
    tokens: np.ndarray
    sizes: np.ndarray
    source: SourceMatrix

    def __post_init__(self):
        t = as_matrix(self.tokens, "tokens")
        s = np.asarray(self.sizes, dtype=np.int64).ravel()
        object.__setattr__(self, "tokens", t)
        object.__setattr__(self, "sizes", s)
        if not (t.shape[0] == s.size == self.source.k):
            raise ValueError(
                f"TokenState: rows {t.shape[0]}, sizes {s.size}, source.k {self.source.k} disagree"
            )
        if s.size and s.min() < 1:
            raise ValueError("TokenState: sizes must be positive")
        if int(s.sum()) != self.source.l:
            raise ValueError(f"TokenState: sizes sum {int(s.sum())} != L={self.source.l}")

    @classmethod
    def initial(cls, tokens) -> "TokenState":
        t = as_matrix(tokens, "tokens")
        n = t.shape[0]
        return cls(t, np.ones(n, dtype=np.int64), SourceMatrix.identity(n))

    @property
    def count(self) -> int:
        return self.tokens.shape[0]


@dataclass(frozen=True)
class MergePlan:
    """Pairs ``(a, b)`` of group-A and group-B indices to merge.

    Group A holds the even positions of the current sequence and group B the
    odd ones, so pair ``(a, b)`` joins positions ``2a`` and ``2b + 1``.
    """

    pairs: tuple[tuple[int, int], ...] = ()

    def __len__(self):
        return len(self.pairs)


@dataclass(frozen=True)
class MergeSchedule:
    counts: tuple[int, ...]

    def __post_init__(self):
        c = tuple(int(x) for x in self.counts)
        if any(x < 0 for x in c):
            raise ValueError(f"MergeSchedule: negative merge count in {c}")
        object.__setattr__(self, "counts", c)

    @property
    def total(self) -> int:
        return sum(self.counts)

    def __len__(self):
        return len(self.counts)

    def final_count(self, l: int) -> int:
        return l - self.total

    def check(self, l: int) -> None:
        remaining = l
        for i, r in enumerate(self.counts):
            if r > remaining // 2:
                raise ValueError(
                    f"MergeSchedule: layer {i} merges {r} but only {remaining // 2} pairs available"
                )
            remaining -= r


@dataclass
class LayerWeights:
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    w1: np.ndarray
    w2: np.ndarray

    @classmethod
    def init(cls, dim: int, rng: RandomStream, hidden: int | None = None) -> "LayerWeights":
        hidden = hidden or 2 * dim
        s, h = 1.0 / math.sqrt(dim), 1.0 / math.sqrt(hidden)
        return cls(
            wq=rng.matrix(dim, dim, s),
            wk=rng.matrix(dim, dim, s),
            wv=rng.matrix(dim, dim, s),
            wo=rng.matrix(dim, dim, s),
            w1=rng.matrix(dim, hidden, s),
            w2=rng.matrix(hidden, dim, h),
        )


def init_encoder(dim: int, n_layers: int, rng: RandomStream) -> list[LayerWeights]:
    return [LayerWeights.init(dim, rng) for _ in range(n_layers)]


def bipartite_soft_match(keys, sizes, r: int) -> MergePlan:
    """Pick ``r`` disjoint (A, B) pairs by cosine similarity of ``keys``.

    Candidate pairs are visited in order of decreasing similarity, ties going
    to the lowest A index and then the lowest B index; a pair is taken when
    neither member is already used. The first pair taken for any A token is
    therefore its most similar B token that is still free.
    """
    keys = np.asarray(keys, dtype=np.float64)
    n = keys.shape[0]
    if sizes is not None and len(sizes) != n:
        raise ValueError(f"bipartite_soft_match: {len(sizes)} sizes for {n} tokens")
    if r < 0 or r > n // 2:
        raise ValueError(f"bipartite_soft_match: r={r} exceeds floor({n}/2)={n // 2}")
    if r == 0:
        return MergePlan()
    norms = np.linalg.norm(keys, axis=1)
    if np.any(norms == 0):
        raise ValueError("bipartite_soft_match: zero key row")
    unit = keys / norms[:, None]
    sim = unit[0::2] @ unit[1::2].T
    na, nb = sim.shape
    a_idx, b_idx = np.meshgrid(np.arange(na), np.arange(nb), indexing="ij")
    order = np.lexsort((b_idx.ravel(), a_idx.ravel(), -sim.ravel()))
    used_a = np.zeros(na, dtype=bool)
    used_b = np.zeros(nb, dtype=bool)
    pairs = []
    for flat in order:
        a, b = divmod(int(flat), nb)
        if used_a[a] or used_b[b]:
            continue
        used_a[a] = used_b[b] = True
        pairs.append((a, b))
        if len(pairs) == r:
            break
    return MergePlan(tuple(pairs))


def apply_merge(state: TokenState, plan: MergePlan) -> TokenState:
    if not plan.pairs:
        return state
    n = state.count
    tokens = state.tokens.astype(np.float64)
    sizes = state.sizes.copy()
    dropped = np.zeros(n, dtype=bool)
    absorbed_by = np.arange(n)
    seen_a, seen_b = set(), set()
    for a, b in plan.pairs:
        ia, ib = 2 * a, 2 * b + 1
        if a in seen_a or b in seen_b or ia >= n or ib >= n:
            raise ValueError(f"apply_merge: invalid pair {(a, b)} for {n} tokens")
        seen_a.add(a)
        seen_b.add(b)
        sa, sb = sizes[ia], sizes[ib]
        tokens[ia] = (sa * tokens[ia] + sb * tokens[ib]) / (sa + sb)
        sizes[ia] = sa + sb
        dropped[ib] = True
        absorbed_by[ib] = ia
    keep = np.flatnonzero(~dropped)
    new_row = np.full(n, -1, dtype=np.int64)
    new_row[keep] = np.arange(keep.size)
    inner = SourceMatrix(new_row[absorbed_by], keep.size)
    return TokenState(
        tokens[keep].astype(np.float32),
        sizes[keep],
        compose_source(inner, state.source),
    )


def compose_source(outer: SourceMatrix, inner: SourceMatrix) -> SourceMatrix:
    """Boolean product ``outer @ inner``: original -> inner row -> outer row."""
    if outer.l != inner.k:
        raise ValueError(f"compose_source: outer is {outer.shape}, inner is {inner.shape}")
    return SourceMatrix(outer.assignment[inner.assignment], outer.k)


def attention_block(tokens, sizes, weights: LayerWeights):
    """One pre-norm transformer layer with proportional attention.

    Returns float64 ``(output, keys)``; ``keys`` are this layer's attention
    keys, the similarity metric for merging. ``sizes=None`` runs plain
    attention. Callers round the output to float32 between layers.
    """
    x = np.asarray(tokens, dtype=np.float64)
    xn = layer_norm(x)
    q = xn @ weights.wq.astype(np.float64)
    k = xn @ weights.wk.astype(np.float64)
    v = xn @ weights.wv.astype(np.float64)
    bias = None if sizes is None else np.log(np.asarray(sizes, dtype=np.float64))
    h = x + attention64(q, k, v, bias=bias) @ weights.wo.astype(np.float64)
    hidden = np.maximum(layer_norm(h) @ weights.w1.astype(np.float64), 0.0)
    out = h + hidden @ weights.w2.astype(np.float64)
    return out, k


def tome_attention_layer(state: TokenState, r: int, weights: LayerWeights) -> TokenState:
    out, keys = attention_block(state.tokens, state.sizes, weights)
    plan = bipartite_soft_match(keys, state.sizes, r)
    return apply_merge(TokenState(out, state.sizes, state.source), plan)


def encode_state(tokens, schedule: MergeSchedule, weights: Sequence[LayerWeights]) -> TokenState:
    state = TokenState.initial(tokens)
    if len(weights) != len(schedule):
        raise ValueError(f"encode: {len(weights)} layers of weights for {len(schedule)} schedule entries")
    schedule.check(state.count)
    for r, w in zip(schedule.counts, weights):
        state = tome_attention_layer(state, r, w)
    return state


def encode(tokens, schedule: MergeSchedule, weights=None, rng: RandomStream | None = None):
    """Run the merging encoder; returns ``(S, Z_K)``.

    Without explicit ``weights`` a fresh stack is drawn from ``rng``.
    """
    tokens = as_matrix(tokens, "tokens")
    if weights is None:
        if rng is None:
            raise ValueError("encode: need weights or an rng to draw them")
        weights = init_encoder(tokens.shape[1], len(schedule), rng)
    state = encode_state(tokens, schedule, weights)
    return state.source, state.tokens


def transformer_stack(tokens, weights: Sequence[LayerWeights]) -> np.ndarray:
    """Plain (no merging, no size bias) stack; reference for r = 0 encodes."""
    x = as_matrix(tokens, "tokens")
    for w in weights:
        out, _ = attention_block(x, None, w)
        x = out.astype(np.float32)
    return x


def _apportion(total: int, weights: Sequence[float]) -> list[int]:
    # largest remainder; equal remainders go to the earlier layer
    w = np.asarray(weights, dtype=np.float64)
    ideal = total * w / w.sum()
    base = np.floor(ideal).astype(np.int64)
    short = total - int(base.sum())
    frac = ideal - base
    order = np.lexsort((np.arange(w.size), -frac))
    base[order[:short]] += 1
    return base.tolist()


def _decreasing_schedule(l: int, k_target: int, n_layers: int, power: int) -> MergeSchedule:
    if n_layers < 1:
        raise ValueError("schedule: n_layers must be >= 1")
    if not 0 <= k_target <= l:
        raise ValueError(f"schedule: k_target={k_target} outside [0, {l}]")
    weights = [(n_layers - i) ** power for i in range(n_layers)]
    sched = MergeSchedule(tuple(_apportion(l - k_target, weights)))
    try:
        sched.check(l)
    except ValueError as exc:
        raise ValueError(f"schedule infeasible for L={l}, K={k_target}, N={n_layers}: {exc}") from None
    return sched


def square_schedule(l: int, k_target: int, n_layers: int) -> MergeSchedule:
    """Merge counts proportional to ``(N - i + 1)**2`` for layers ``i = 1..N``."""
    return _decreasing_schedule(l, k_target, n_layers, 2)


def linear_schedule(l: int, k_target: int, n_layers: int) -> MergeSchedule:
    return _decreasing_schedule(l, k_target, n_layers, 1)


def constant_schedule(r: int, n_layers: int) -> MergeSchedule:
    return MergeSchedule((r,) * n_layers)


def make_schedule(kind: str, l: int, k_target: int, n_layers: int) -> MergeSchedule:
    if kind == "square":
        return square_schedule(l, k_target, n_layers)
    if kind == "linear":
        return linear_schedule(l, k_target, n_layers)
    if kind == "constant":
        if (l - k_target) % n_layers:
            raise ValueError(f"constant schedule: {l - k_target} merges not divisible by {n_layers} layers")
        sched = constant_schedule((l - k_target) // n_layers, n_layers)
        sched.check(l)
        return sched
    raise ValueError(f"unknown schedule kind {kind!r}")
