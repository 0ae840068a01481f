"""Raster-order decoding with duplicate pruning of the KV cache.

A generated token whose id equals a live (non-redundant) entry within the
look-back window is a duplicate: it gets a redundant entry in the position
cache pointing at that first occurrence, and no key/value rows of its own.

``mode="lossy"`` simply drops the duplicate's rows. ``mode="compensated"``
also bumps the surviving row's size counter so attention adds ``log s`` for
it; with a content-keyed model this reproduces uncompressed decoding.

Sequence layout: model position 0 is the class token, 1 the merge
instruction, and image token ``t`` sits at model position ``t + 2``.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .numerics import RandomStream
from .tome import SourceMatrix
from .toymodel import KvCache, ToyARModel, choose_token, forward_step

PREFIX = 2
MODES = ("lossy", "compensated")


@dataclass
class PositionEntry:
    position: int
    token: int
    size: int = 1
    redundant: bool = False
    source: int = -1  # first-occurrence position; equals ``position`` when not redundant
    row: int = -1  # KV cache row (non-redundant entries only)


@dataclass
class PositionCache:
    """Ledger of generated raster positions.

    Non-redundant entries are kept for the whole session. Redundant entries
    are evicted once they fall out of the sliding window (``window=None``
    means the window never moves past anything).
    """

    window: int | None = None
    entries: list[PositionEntry] = field(default_factory=list)

    def __post_init__(self):
        if self.window is not None and self.window < 0:
            raise ValueError("PositionCache: window must be >= 0 or None")
        self._by_position: dict[int, PositionEntry] = {e.position: e for e in self.entries}

    def __len__(self):
        return len(self.entries)

    @property
    def next_position(self) -> int:
        return self.entries[-1].position + 1 if self.entries else 0

    def add(self, position: int, token: int, row: int) -> PositionEntry:
        self._check_order(position)
        entry = PositionEntry(position, token, 1, False, position, row)
        self.entries.append(entry)
        self._by_position[position] = entry
        return entry

    def add_redundant(self, position: int, token: int, first: int) -> PositionEntry:
        self._check_order(position)
        owner = self._by_position[first]
        owner.size += 1
        entry = PositionEntry(position, token, 1, True, first, owner.row)
        self.entries.append(entry)
        return entry

    def live(self) -> list[PositionEntry]:
        return [e for e in self.entries if not e.redundant]

    def entry(self, position: int) -> PositionEntry:
        return self._by_position[position]

    def evict(self, current: int) -> int:
        """Drop redundant entries older than the window; returns how many."""
        if self.window is None:
            return 0
        keep = [e for e in self.entries if not e.redundant or current - e.position <= self.window]
        dropped = len(self.entries) - len(keep)
        self.entries = keep
        return dropped

    def _check_order(self, position: int) -> None:
        if self.entries and position <= self.entries[-1].position:
            raise ValueError(f"PositionCache: position {position} not after {self.entries[-1].position}")


def detect_duplicate(token_id: int, cache: PositionCache, window: int | None = None,
                     position: int | None = None) -> int | None:
    """First-occurrence position of a live entry with the same id, if any.

    Only entries at positions ``position - window .. position - 1`` are
    considered (``window=None``: all of them); ``position`` defaults to the
    slot after the newest entry. The most recent match wins.
    """
    t = cache.next_position if position is None else position
    for e in reversed(cache.entries):
        if window is not None and t - e.position > window:
            break
        if not e.redundant and e.token == token_id:
            return e.position
    return None


@dataclass(frozen=True)
class DedupCausalMask:
    l: int
    allowed: np.ndarray  # (l, l) bool, lower-triangular

    def keys_for(self, query: int) -> np.ndarray:
        return np.flatnonzero(self.allowed[query])


def build_causal_mask(source: SourceMatrix, order=None) -> DedupCausalMask:
    """Causal mask that admits only the first occurrence of every cluster.

    ``order[t]`` is the raster position generated at step ``t`` (identity for
    raster decoding); the mask is indexed by step. Key ``j`` is visible to
    query ``i`` iff ``j <= i`` and step ``j`` is the earliest step of its
    cluster.
    """
    l = source.l
    order = np.arange(l) if order is None else np.asarray(order, dtype=np.int64)
    if order.shape != (l,) or not np.array_equal(np.sort(order), np.arange(l)):
        raise ValueError(f"build_causal_mask: order is not a permutation of range({l})")
    cluster = source.assignment[order]
    first = np.zeros(l, dtype=bool)
    seen = set()
    for t, c in enumerate(cluster.tolist()):
        if c not in seen:
            seen.add(c)
            first[t] = True
    allowed = np.tril(np.ones((l, l), dtype=bool)) & first[None, :]
    return DedupCausalMask(l, allowed)


def trace_source(assignment) -> SourceMatrix:
    """SourceMatrix from per-position owner positions, rows in first-seen order."""
    owners = np.asarray(assignment, dtype=np.int64)
    rows: dict[int, int] = {}
    out = np.empty(owners.size, dtype=np.int64)
    for j, o in enumerate(owners.tolist()):
        out[j] = rows.setdefault(o, len(rows))
    return SourceMatrix(out, len(rows))


def token_source(tokens) -> SourceMatrix:
    """Clusters = equal token ids (what an unbounded window detects)."""
    first: dict[int, int] = {}
    return trace_source([first.setdefault(int(t), j) for j, t in enumerate(tokens)])


@dataclass
class DecodeStats:
    duplicates: int = 0
    cache_len_trace: list[int] = field(default_factory=list)
    step_ns: list[int] = field(default_factory=list)
    logits: list[np.ndarray] = field(default_factory=list)
    owners: list[int] = field(default_factory=list)  # first-occurrence position per generated token
    cache_positions: list[int] = field(default_factory=list)  # image positions of KV rows at the end

    @property
    def cache_len(self) -> int:
        return self.cache_len_trace[-1] if self.cache_len_trace else 0

    def source(self) -> SourceMatrix:
        return trace_source(self.owners)

    def kept_keys(self, step: int) -> list[int]:
        """Image positions with KV rows once ``step`` has been fed."""
        return self.cache_positions[: self.cache_len_trace[step]]


@dataclass
class DecodeResult:
    tokens: list[int]
    position_cache: PositionCache
    stats: DecodeStats


def _check_length(model: ToyARModel, l: int) -> None:
    if l < 1 or l > model.l_max - PREFIX:
        raise ValueError(f"decode: length {l} outside [1, {model.l_max - PREFIX}]")


def _prefill(model: ToyARModel, cache: KvCache, class_id: int, merge_instruction: int) -> np.ndarray:
    forward_step(model, class_id, 0, cache, kind="class")
    return forward_step(model, merge_instruction, 1, cache, kind="merge")


def _pick(t, logits, forced, temperature, rng) -> int:
    if forced is not None:
        return int(forced[t])
    return choose_token(logits, temperature, rng)


def decode_raster(
    model: ToyARModel,
    class_id: int,
    merge_instruction: int,
    l: int,
    mode: str = "compensated",
    window: int | None = None,
    rng: RandomStream | None = None,
    temperature: float | None = None,
    forced=None,
) -> DecodeResult:
    """Generate ``l`` image tokens with duplicate pruning.

    Tokens are chosen greedily unless ``temperature`` is given. ``forced``
    overrides the choice with a fixed id sequence (teacher forcing, used by
    stub workloads); logits are still computed and recorded.
    """
    if mode not in MODES:
        raise ValueError(f"decode_raster: mode must be one of {MODES}, got {mode!r}")
    _check_length(model, l)
    cache = KvCache(model, PREFIX + l)
    pcache = PositionCache(window)
    stats = DecodeStats()
    logits = _prefill(model, cache, class_id, merge_instruction)
    tokens = []
    for t in range(l):
        tok = _pick(t, logits, forced, temperature, rng)
        tokens.append(tok)
        stats.logits.append(logits)
        start = time.perf_counter_ns()
        first = detect_duplicate(tok, pcache, window, t)
        if first is None:
            row = cache.length
            logits = forward_step(model, tok, t + PREFIX, cache)
            pcache.add(t, tok, row)
            stats.owners.append(t)
        else:
            owner = pcache.entry(first)
            logits = forward_step(model, tok, t + PREFIX, cache, merge_into=owner.row,
                                  compensate=(mode == "compensated"))
            pcache.add_redundant(t, tok, first)
            stats.owners.append(first)
            stats.duplicates += 1
        pcache.evict(t)
        stats.step_ns.append(time.perf_counter_ns() - start)
        stats.cache_len_trace.append(cache.length - PREFIX)
    stats.cache_positions = (cache.positions[PREFIX:cache.length] - PREFIX).tolist()
    return DecodeResult(tokens, pcache, stats)


def decode_full_oracle(
    model: ToyARModel,
    class_id: int,
    merge_instruction: int,
    l: int,
    rng: RandomStream | None = None,
    temperature: float | None = None,
    forced=None,
):
    """Uncompressed KV decode; returns ``(tokens, logits_trace, step_ns)``."""
    _check_length(model, l)
    cache = KvCache(model, PREFIX + l)
    logits = _prefill(model, cache, class_id, merge_instruction)
    tokens, trace, step_ns = [], [], []
    for t in range(l):
        tok = _pick(t, logits, forced, temperature, rng)
        tokens.append(tok)
        trace.append(logits)
        start = time.perf_counter_ns()
        logits = forward_step(model, tok, t + PREFIX, cache)
        step_ns.append(time.perf_counter_ns() - start)
    return tokens, trace, step_ns


def cache_bound(l: int, unique: int, window: int | None) -> int:
    """Upper bound on live KV rows after ``l`` steps.

    An id can be re-admitted only once its previous live copy is more than
    ``window`` positions back, so each distinct id owns at most
    ``ceil(l / (window + 1))`` rows.
    """
    if window is None:
        return min(l, unique)
    return min(l, unique * math.ceil(l / (window + 1)))


def merge_bucket(kept: int, total: int, n_buckets: int = 16) -> int:
    """Merge-instruction id for a target kept-token count."""
    if not 1 <= kept <= total:
        raise ValueError(f"merge_bucket: kept={kept} outside [1, {total}]")
    return min(n_buckets - 1, (kept * n_buckets - 1) // total)


def simulate(model: ToyARModel, seed: int, l: int, mode: str = "compensated", window: int | None = None,
             class_id: int | None = None, merge_instruction: int = 0, forced=None) -> dict:
    """Run both decoders on one seeded session and summarize as a JSON-able dict."""
    rng = RandomStream(seed)
    if class_id is None:
        class_id = int(rng.integers(model.cls_emb.shape[0], 1)[0])
    res = decode_raster(model, class_id, merge_instruction, l, mode, window, forced=forced)
    ref_tokens, ref_logits, ref_ns = decode_full_oracle(model, class_id, merge_instruction, l, forced=forced)
    max_dlogit = max(float(np.max(np.abs(a - b))) for a, b in zip(res.stats.logits, ref_logits))
    return {
        "seed": seed,
        "length": l,
        "mode": mode,
        "window": window,
        "class_id": class_id,
        "tokens": res.tokens,
        "duplicates": res.stats.duplicates,
        "cache_len_trace": res.stats.cache_len_trace,
        "step_ns": res.stats.step_ns,
        "oracle_step_ns": ref_ns,
        "max_abs_logit_diff": max_dlogit,
        "equivalence": res.tokens == ref_tokens and max_dlogit <= 1e-5,
    }
